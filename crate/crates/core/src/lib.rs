//! Submodule-level model merging.
//!
//! The crate merges several fine-tuned checkpoints of one base transformer by
//! splitting the model into submodule groups (layers, attention/MLP branches,
//! attention heads), collecting each group's inputs from a single base-model
//! forward pass, and solving a small least-squares problem per group for the
//! weights of its task vectors. Weight averaging, task arithmetic and DARE are
//! included as baselines, together with linearity diagnostics that tell how
//! well a group's output follows its parameter deltas.
//!
//! Typical flow:
//!
//! ```no_run
//! use linmerge::{archive::TensorArchive, decompose::Granularity, features::read_jsonl, merge};
//!
//! # fn main() -> linmerge::Result<()> {
//! let base = TensorArchive::read("base.tza")?;
//! let fine_tuned = vec![TensorArchive::read("ft_0.tza")?, TensorArchive::read("ft_1.tza")?];
//! let datasets = read_jsonl("data.jsonl")?;
//! let out = merge::merge_linear_solve(&base, &fine_tuned, Granularity::AttnMlp, &datasets, 30, 0, true)?;
//! out.merged.write("merged.tza")?;
//! # Ok(())
//! # }
//! ```

pub mod archive;
pub mod cli;
pub mod decompose;
mod error;
pub mod features;
pub mod fixture;
pub mod matrix;
pub mod merge;
pub mod metrics;
pub mod model;
pub mod solver;

pub use error::{Error, Result};
