//! Seeded synthetic checkpoints and datasets for desk-scale experiments.
//!
//! A fixture is a random base model plus `T` "fine-tuned" models built as
//! `θ_t = θ₀ + tau_scale · G_t`, where every tensor of `G_t` is a random
//! direction of unit Frobenius norm. `tau_scale` is the knob that moves the
//! fixture between the quasi-linear and strongly non-linear regimes.

use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::archive::{Tensor, TensorArchive, MODEL_CONFIG_KEY};
use crate::error::{Error, Result};
use crate::features::{write_jsonl, TaskDataset};
use crate::model::{bind_weights, ModelConfig, TapId, TapSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureSpec {
    pub config: ModelConfig,
    pub tasks: usize,
    pub tau_scale: f32,
    pub dataset_size: usize,
    pub seq_len: usize,
    pub seed: u64,
    /// Matrix entries of the base model are drawn from `N(0, (init_scale/√d_model)²)`.
    #[serde(default = "default_init_scale")]
    pub init_scale: f32,
    /// Point each task's `lm_head` direction down that task's own loss, so the
    /// fine-tuned model actually improves on its data.
    #[serde(default)]
    pub trained: bool,
}

fn default_init_scale() -> f32 {
    DEFAULT_INIT_SCALE
}

pub const DEFAULT_INIT_SCALE: f32 = 1.0;

impl FixtureSpec {
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.tasks == 0 || self.dataset_size == 0 || self.seq_len == 0 {
            return Err(Error::Config("tasks, dataset_size and seq_len must be positive".into()));
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return Err(Error::Config("init_scale must be positive".into()));
        }
        if !(self.tau_scale >= 0.0 && self.tau_scale.is_finite()) {
            return Err(Error::Config("tau_scale must be a non-negative number".into()));
        }
        if self.seq_len > self.config.max_seq {
            return Err(Error::Config(format!(
                "seq_len {} exceeds max_seq {}",
                self.seq_len, self.config.max_seq
            )));
        }
        Ok(())
    }
}

/// In-memory fixture.
#[derive(Debug, Clone)]
pub struct Fixture {
    pub base: TensorArchive,
    pub fine_tuned: Vec<TensorArchive>,
    pub datasets: Vec<TaskDataset>,
}

/// Locations written by [`gen_fixture`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixturePaths {
    pub base: PathBuf,
    pub fine_tuned: Vec<PathBuf>,
    pub datasets: PathBuf,
    pub manifest: PathBuf,
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn archive_meta(cfg: &ModelConfig, kind: &str) -> TensorArchive {
    let mut a = TensorArchive::new();
    a.meta_mut().insert(MODEL_CONFIG_KEY.into(), cfg.to_json());
    a.meta_mut().insert("kind".into(), kind.into());
    a
}

fn is_norm(name: &str) -> bool {
    name.contains("norm")
}

/// Base initialization: `N(0, (scale/√d_model)²)` matrices, unit norm weights.
pub fn base_init(cfg: &ModelConfig, seed: u64, scale: f32) -> TensorArchive {
    let mut rng = rng_for(seed, 0);
    let std = scale / (cfg.d_model as f32).sqrt();
    let normal = Normal::new(0.0f32, std).unwrap();
    let mut a = archive_meta(cfg, "base");
    for (name, shape) in cfg.parameter_shapes() {
        let n: usize = shape.iter().product();
        let data = if is_norm(&name) {
            vec![1.0; n]
        } else {
            (0..n).map(|_| normal.sample(&mut rng)).collect()
        };
        a.insert(name, Tensor::new(shape, data).unwrap()).unwrap();
    }
    a
}

/// Random direction archive with unit Frobenius norm per tensor.
pub fn unit_directions(cfg: &ModelConfig, seed: u64, stream: u64) -> TensorArchive {
    let mut rng = rng_for(seed, stream);
    let normal = Normal::new(0.0f64, 1.0).unwrap();
    let mut a = archive_meta(cfg, "direction");
    for (name, shape) in cfg.parameter_shapes() {
        let n: usize = shape.iter().product();
        let raw: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-30);
        let data = raw.into_iter().map(|v| (v / norm) as f32).collect();
        a.insert(name, Tensor::new(shape, data).unwrap()).unwrap();
    }
    a
}

/// Archive with `N(0, std²)` matrices and norm weights `1 + N(0, std²)`.
/// Handy for tests that need well-scaled activations.
pub fn random_archive(cfg: &ModelConfig, seed: u64, std: f32) -> TensorArchive {
    let mut rng = rng_for(seed, 1_000);
    let normal = Normal::new(0.0f32, std).unwrap();
    let mut a = archive_meta(cfg, "random");
    for (name, shape) in cfg.parameter_shapes() {
        let n: usize = shape.iter().product();
        let offset = if is_norm(&name) { 1.0 } else { 0.0 };
        let data = (0..n).map(|_| offset + normal.sample(&mut rng)).collect();
        a.insert(name, Tensor::new(shape, data).unwrap()).unwrap();
    }
    a
}

/// `T` datasets of random sequences; task `t` over-samples tokens `v ≡ t (mod T)`.
pub fn random_datasets(cfg: &ModelConfig, tasks: usize, size: usize, seq_len: usize, seed: u64) -> Vec<TaskDataset> {
    (0..tasks)
        .map(|t| {
            let mut rng = rng_for(seed, 10_000 + t as u64);
            let weights: Vec<f64> = (0..cfg.vocab_size)
                .map(|v| if v % tasks == t { 4.0 } else { 1.0 })
                .collect();
            let dist = WeightedIndex::new(&weights).unwrap();
            let sequences = (0..size)
                .map(|_| {
                    // a little length variety keeps flattening honest
                    let len = if seq_len > 2 {
                        rng.random_range(seq_len - seq_len / 4..=seq_len)
                    } else {
                        seq_len
                    };
                    (0..len).map(|_| dist.sample(&mut rng) as u32).collect()
                })
                .collect();
            TaskDataset {
                task: format!("task{t}"),
                sequences,
            }
        })
        .collect()
}

/// Unit-norm direction of steepest descent of next-token loss on `data`
/// with respect to `lm_head`, everything else held at `model`.
pub fn lm_head_descent(model: &TensorArchive, cfg: &ModelConfig, data: &TaskDataset) -> Result<Tensor> {
    let bound = bind_weights(model, cfg)?;
    let taps: TapSpec = [TapId::FinalHidden].into_iter().collect();
    let (v, d) = (cfg.vocab_size, cfg.d_model);
    let mut grad = vec![0f64; v * d];
    for seq in &data.sequences {
        let trace = bound.forward_with_taps(seq, &taps)?;
        let hidden = &trace.taps[&TapId::FinalHidden];
        for p in 0..seq.len().saturating_sub(1) {
            let row = trace.logits.row(p);
            let max = row.iter().fold(f32::NEG_INFINITY, |m, &x| m.max(x)) as f64;
            let exp: Vec<f64> = row.iter().map(|&x| (x as f64 - max).exp()).collect();
            let z: f64 = exp.iter().sum();
            let target = seq[p + 1] as usize;
            for (tok, e) in exp.iter().enumerate() {
                let err = e / z - if tok == target { 1.0 } else { 0.0 };
                for (g, &h) in grad[tok * d..(tok + 1) * d].iter_mut().zip(hidden.row(p)) {
                    *g += err * h as f64;
                }
            }
        }
    }
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm < 1e-30 {
        return Err(Error::Degenerate(format!("task {:?} gives a zero gradient", data.task)));
    }
    Tensor::new(vec![v, d], grad.iter().map(|g| (-g / norm) as f32).collect())
}

pub fn build_fixture(spec: &FixtureSpec) -> Result<Fixture> {
    spec.validate()?;
    let cfg = &spec.config;
    let base = base_init(cfg, spec.seed, spec.init_scale);
    let datasets = random_datasets(cfg, spec.tasks, spec.dataset_size, spec.seq_len, spec.seed);
    let fine_tuned = (0..spec.tasks)
        .map(|t| {
            let mut g = unit_directions(cfg, spec.seed, 1 + t as u64);
            if spec.trained {
                g.insert("lm_head", lm_head_descent(&base, cfg, &datasets[t])?)?;
            }
            let mut ft = archive_meta(cfg, "fine_tuned");
            ft.meta_mut().insert("task".into(), format!("task{t}"));
            for (name, b) in base.iter() {
                let d = g.get(name).unwrap();
                let data = b
                    .data()
                    .iter()
                    .zip(d.data())
                    .map(|(x, y)| x + spec.tau_scale * y)
                    .collect();
                ft.insert(name, Tensor::new(b.shape().to_vec(), data)?)?;
            }
            Ok(ft)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Fixture {
        base,
        fine_tuned,
        datasets,
    })
}

/// Writes a fixture to `out`: `base.tza`, `ft_<t>.tza`, `data.jsonl`, `fixture.json`.
pub fn gen_fixture(spec: &FixtureSpec, out: impl AsRef<Path>) -> Result<FixturePaths> {
    let out = out.as_ref();
    let fx = build_fixture(spec)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let base = out.join("base.tza");
    fx.base.write(&base)?;
    let mut fine_tuned = Vec::new();
    for (t, ft) in fx.fine_tuned.iter().enumerate() {
        let p = out.join(format!("ft_{t}.tza"));
        ft.write(&p)?;
        fine_tuned.push(p);
    }
    let datasets = out.join("data.jsonl");
    write_jsonl(&fx.datasets, &datasets)?;
    let manifest = out.join("fixture.json");
    let paths = FixturePaths {
        base,
        fine_tuned,
        datasets,
        manifest: manifest.clone(),
    };
    let body = serde_json::json!({"spec": spec, "paths": paths});
    std::fs::write(&manifest, serde_json::to_string_pretty(&body).unwrap()).map_err(|e| Error::io(&manifest, e))?;
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(tau: f32) -> FixtureSpec {
        FixtureSpec {
            config: ModelConfig::new(8, 2, 2, 16, 11, 16),
            tasks: 2,
            tau_scale: tau,
            dataset_size: 4,
            seq_len: 6,
            seed: 3,
            init_scale: DEFAULT_INIT_SCALE,
            trained: false,
        }
    }

    #[test]
    fn zero_tau_fine_tunes_equal_base() {
        let fx = build_fixture(&spec(0.0)).unwrap();
        for ft in &fx.fine_tuned {
            for (name, t) in ft.iter() {
                assert_eq!(t.data(), fx.base.get(name).unwrap().data());
            }
        }
    }

    #[test]
    fn directions_have_unit_norm() {
        let g = unit_directions(&spec(1.0).config, 5, 1);
        for (_, t) in g.iter() {
            let n: f64 = t.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let pa = gen_fixture(&spec(0.5), a.path()).unwrap();
        let pb = gen_fixture(&spec(0.5), b.path()).unwrap();
        let read = |p: &PathBuf| std::fs::read(p).unwrap();
        assert_eq!(read(&pa.base), read(&pb.base));
        assert_eq!(read(&pa.fine_tuned[1]), read(&pb.fine_tuned[1]));
        assert_eq!(read(&pa.datasets), read(&pb.datasets));
    }

    #[test]
    fn datasets_have_task_bias() {
        let cfg = ModelConfig::new(8, 2, 1, 16, 10, 64);
        let ds = random_datasets(&cfg, 2, 50, 64, 1);
        let even = |d: &TaskDataset| {
            let all: Vec<u32> = d.sequences.concat();
            all.iter().filter(|&&t| t % 2 == 0).count() as f64 / all.len() as f64
        };
        assert!(even(&ds[0]) > 0.7);
        assert!(even(&ds[1]) < 0.3);
    }
}
