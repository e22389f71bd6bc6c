//! Input feature collection and per-group output deltas.
//!
//! Inputs for every group always come from a single forward pass of the base
//! model. Fine-tuned, interpolated and merged parameters are only ever
//! evaluated on those stored inputs, one group at a time.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::archive::{Tensor, TensorArchive};
use crate::decompose::{DecompositionPlan, GroupInput, OutputKind, Region, SubmoduleGroup};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{
    self, attention_branch, bind_weights, embed_tokens, head_attention, layer_forward, mlp_branch, rms_norm,
    take_matrix, take_vector, AttnWeights, BoundModel, LayerWeights, MlpWeights, ModelConfig, TapId,
};

/// Token sequences belonging to one task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    pub task: String,
    pub sequences: Vec<Vec<u32>>,
}

#[derive(Serialize, Deserialize)]
struct JsonlRecord {
    task: String,
    tokens: Vec<u32>,
}

/// Reads `{"task": .., "tokens": [..]}` lines, grouping by task in first-seen order.
pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<TaskDataset>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out: Vec<TaskDataset> = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: JsonlRecord =
            serde_json::from_str(&line).map_err(|e| Error::Input(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        match out.iter_mut().find(|d| d.task == rec.task) {
            Some(d) => d.sequences.push(rec.tokens),
            None => out.push(TaskDataset {
                task: rec.task,
                sequences: vec![rec.tokens],
            }),
        }
    }
    Ok(out)
}

pub fn write_jsonl(datasets: &[TaskDataset], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut s = String::new();
    for d in datasets {
        for seq in &d.sequences {
            let rec = JsonlRecord {
                task: d.task.clone(),
                tokens: seq.clone(),
            };
            s.push_str(&serde_json::to_string(&rec).expect("record serializes"));
            s.push('\n');
        }
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// One stored input sequence for a group.
#[derive(Debug, Clone, Copy)]
pub enum SeqInput<'a> {
    Tokens(&'a [u32]),
    Hidden(&'a Matrix),
}

/// Concrete parameters of a group, ready for evaluation.
#[derive(Debug, Clone)]
pub enum GroupParams {
    Model(Box<BoundModel>),
    Embed(Matrix),
    LmHead {
        norm_final: Vec<f32>,
        lm_head: Matrix,
    },
    Layer(Box<LayerWeights>),
    Attn {
        norm1: Vec<f32>,
        weights: AttnWeights,
    },
    Head {
        norm1: Vec<f32>,
        q: Matrix,
        k: Matrix,
        v: Matrix,
        o_cols: Matrix,
    },
    Mlp {
        norm2: Vec<f32>,
        weights: MlpWeights,
    },
}

impl GroupParams {
    /// Pulls the group's parameters from `archive`. Tensors the group reads but
    /// does not own (norm1 for heads other than 0) come from `base`.
    pub fn extract(
        group: &SubmoduleGroup,
        cfg: &ModelConfig,
        archive: &TensorArchive,
        base: &TensorArchive,
    ) -> Result<Self> {
        let (d, v) = (cfg.d_model, cfg.vocab_size);
        Ok(match group.output {
            OutputKind::ModelLogits => GroupParams::Model(Box::new(bind_weights(archive, cfg)?)),
            OutputKind::EmbedRows => GroupParams::Embed(take_matrix(archive, "embed", [v, d])?),
            OutputKind::Logits => GroupParams::LmHead {
                norm_final: take_vector(archive, "norm_final", d)?,
                lm_head: take_matrix(archive, "lm_head", [v, d])?,
            },
            OutputKind::LayerOut => GroupParams::Layer(Box::new(model::take_layer(archive, cfg, layer_of(group)?)?)),
            OutputKind::AttnBranch => {
                let l = model::take_layer_attn(archive, cfg, layer_of(group)?)?;
                GroupParams::Attn {
                    norm1: l.0,
                    weights: l.1,
                }
            }
            OutputKind::MlpBranch => {
                let i = layer_of(group)?;
                let l = model::take_layer_mlp(archive, cfg, i)?;
                GroupParams::Mlp {
                    norm2: l.0,
                    weights: l.1,
                }
            }
            OutputKind::HeadBranch(h) => {
                let i = layer_of(group)?;
                let norm_name = format!("layers.{i}.norm1");
                let owns_norm = group.params.iter().any(|p| p.tensor == norm_name);
                let norm1 = take_vector(if owns_norm { archive } else { base }, &norm_name, d)?;
                let s = crate::decompose::head_slices(cfg, i, h)?;
                let m = |p: &str| take_matrix(archive, &format!("layers.{i}.attn.{p}_proj"), [d, d]);
                GroupParams::Head {
                    norm1,
                    q: m("q")?.row_block(s.qkv_rows.clone()),
                    k: m("k")?.row_block(s.qkv_rows.clone()),
                    v: m("v")?.row_block(s.qkv_rows),
                    o_cols: m("o")?.col_block(s.o_cols),
                }
            }
        })
    }
}

fn layer_of(group: &SubmoduleGroup) -> Result<usize> {
    group
        .layer
        .ok_or_else(|| Error::Plan(format!("group {} has no layer index", group.id)))
}

/// Output width of a group.
pub fn output_width(group: &SubmoduleGroup, cfg: &ModelConfig) -> usize {
    match group.output {
        OutputKind::Logits | OutputKind::ModelLogits => cfg.vocab_size,
        _ => cfg.d_model,
    }
}

/// Evaluates one group on one stored input sequence.
pub fn apply_group_seq(
    group: &SubmoduleGroup,
    cfg: &ModelConfig,
    params: &GroupParams,
    input: SeqInput<'_>,
) -> Result<Matrix> {
    fn hidden<'a>(group: &SubmoduleGroup, cfg: &ModelConfig, x: SeqInput<'a>) -> Result<&'a Matrix> {
        match x {
            SeqInput::Hidden(m) if m.cols() == cfg.d_model => Ok(m),
            SeqInput::Hidden(m) => Err(Error::Input(format!(
                "group {} expects width {}, got {}",
                group.id,
                cfg.d_model,
                m.cols()
            ))),
            SeqInput::Tokens(_) => Err(Error::Input(format!("group {} expects hidden states", group.id))),
        }
    }
    fn tokens<'a>(group: &SubmoduleGroup, x: SeqInput<'a>) -> Result<&'a [u32]> {
        match x {
            SeqInput::Tokens(t) => Ok(t),
            SeqInput::Hidden(_) => Err(Error::Input(format!("group {} expects token ids", group.id))),
        }
    }
    let hidden = |x| hidden(group, cfg, x);
    let tokens = |x| tokens(group, x);
    Ok(match params {
        GroupParams::Model(m) => m.logits(tokens(input)?)?,
        GroupParams::Embed(e) => {
            let t = tokens(input)?;
            model::check_tokens(cfg, t)?;
            embed_tokens(e, t)
        }
        GroupParams::LmHead { norm_final, lm_head } => {
            model::unembed(hidden(input)?, norm_final, lm_head, cfg.norm_eps)
        }
        GroupParams::Layer(w) => layer_forward(hidden(input)?, w, cfg).out,
        GroupParams::Attn { norm1, weights } => attention_branch(hidden(input)?, norm1, weights, cfg).1,
        GroupParams::Head { norm1, q, k, v, o_cols } => {
            let xn = rms_norm(hidden(input)?, norm1, cfg.norm_eps);
            head_attention(&xn, q, k, v, cfg.rope_theta).matmul_t(o_cols)
        }
        GroupParams::Mlp { norm2, weights } => mlp_branch(hidden(input)?, norm2, weights, cfg.norm_eps),
    })
}

/// Evaluates one group on a list of stored input sequences.
pub fn apply_group(
    group: &SubmoduleGroup,
    cfg: &ModelConfig,
    params: &GroupParams,
    inputs: &[SeqInput<'_>],
) -> Result<Vec<Matrix>> {
    inputs.iter().map(|&x| apply_group_seq(group, cfg, params, x)).collect()
}

/// Base-model features for one task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskFeatures {
    pub task: String,
    pub sequences: Vec<Vec<u32>>,
    pub taps: BTreeMap<TapId, Vec<Matrix>>,
    /// Per group id, base outputs flattened over positions (sequence-major).
    pub base_outputs: BTreeMap<String, Matrix>,
}

impl TaskFeatures {
    pub fn token_count(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStore {
    pub config: ModelConfig,
    pub tasks: Vec<TaskFeatures>,
}

impl FeatureStore {
    pub fn n_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn inputs<'a>(&'a self, group: &SubmoduleGroup, task: usize) -> Result<Vec<SeqInput<'a>>> {
        let tf = &self.tasks[task];
        match group.input {
            GroupInput::Tokens => Ok(tf.sequences.iter().map(|s| SeqInput::Tokens(s)).collect()),
            GroupInput::Tap(t) => {
                let taps = tf
                    .taps
                    .get(&t)
                    .ok_or_else(|| Error::Input(format!("tap {t} was not collected")))?;
                Ok(taps.iter().map(SeqInput::Hidden).collect())
            }
        }
    }

    pub fn base_output(&self, group: &str, task: usize) -> Result<&Matrix> {
        self.tasks[task]
            .base_outputs
            .get(group)
            .ok_or_else(|| Error::Input(format!("no base outputs for group {group:?}")))
    }

    /// Group outputs at `params` for every task, each flattened over positions.
    pub fn evaluate(&self, group: &SubmoduleGroup, params: &GroupParams) -> Result<Vec<Matrix>> {
        (0..self.n_tasks())
            .map(|t| {
                let outs = apply_group(group, &self.config, params, &self.inputs(group, t)?)?;
                Ok(Matrix::vstack(&outs))
            })
            .collect()
    }

    /// Output deltas against the base for every task.
    pub fn evaluate_deltas(&self, group: &SubmoduleGroup, params: &GroupParams) -> Result<Vec<Matrix>> {
        self.evaluate(group, params)?
            .into_iter()
            .enumerate()
            .map(|(t, out)| Ok(out.sub(self.base_output(&group.id, t)?)))
            .collect()
    }

    /// Stores inputs and base outputs as an archive keyed `features/<group>/<task>`
    /// and `base/<group>/<task>`; token sequences go in meta.
    pub fn to_archive(&self, plan: &DecompositionPlan) -> Result<TensorArchive> {
        let mut a = TensorArchive::new();
        a.meta_mut()
            .insert(crate::archive::MODEL_CONFIG_KEY.into(), self.config.to_json());
        a.meta_mut().insert("kind".into(), "features".into());
        let tasks: Vec<&str> = self.tasks.iter().map(|t| t.task.as_str()).collect();
        a.meta_mut()
            .insert("tasks".into(), serde_json::to_string(&tasks).unwrap());
        for (ti, tf) in self.tasks.iter().enumerate() {
            a.meta_mut()
                .insert(format!("sequences/{ti}"), serde_json::to_string(&tf.sequences).unwrap());
            for g in &plan.groups {
                if let GroupInput::Tap(_) = g.input {
                    let inputs: Vec<Matrix> = self
                        .inputs(g, ti)?
                        .into_iter()
                        .map(|x| match x {
                            SeqInput::Hidden(m) => m.clone(),
                            SeqInput::Tokens(_) => unreachable!(),
                        })
                        .collect();
                    a.insert(format!("features/{}/{ti}", g.id), Matrix::vstack(&inputs).into_tensor())?;
                }
                a.insert(
                    format!("base/{}/{ti}", g.id),
                    self.base_output(&g.id, ti)?.clone().into_tensor(),
                )?;
            }
        }
        Ok(a)
    }

    /// Inverse of [`FeatureStore::to_archive`] for the same plan.
    pub fn from_archive(archive: &TensorArchive, plan: &DecompositionPlan) -> Result<Self> {
        let config = ModelConfig::from_archive(archive)?;
        let meta = archive.meta();
        let tasks: Vec<String> = meta
            .get("tasks")
            .and_then(|s| serde_json::from_str(s).ok())
            .ok_or_else(|| Error::Format("feature archive lacks task list".into()))?;
        let mut out = Vec::new();
        for (ti, task) in tasks.into_iter().enumerate() {
            let sequences: Vec<Vec<u32>> = meta
                .get(&format!("sequences/{ti}"))
                .and_then(|s| serde_json::from_str(s).ok())
                .ok_or_else(|| Error::Format(format!("feature archive lacks sequences for task {ti}")))?;
            let mut taps = BTreeMap::new();
            let mut base_outputs = BTreeMap::new();
            for g in &plan.groups {
                if let GroupInput::Tap(tap) = g.input {
                    let flat = Matrix::from_tensor(archive.require(&format!("features/{}/{ti}", g.id))?)?;
                    let mut start = 0;
                    let per_seq: Vec<Matrix> = sequences
                        .iter()
                        .map(|s| {
                            let m = flat.row_block(start..start + s.len());
                            start += s.len();
                            m
                        })
                        .collect();
                    taps.insert(tap, per_seq);
                }
                let b = Matrix::from_tensor(archive.require(&format!("base/{}/{ti}", g.id))?)?;
                base_outputs.insert(g.id.clone(), b);
            }
            out.push(TaskFeatures {
                task,
                sequences,
                taps,
                base_outputs,
            });
        }
        Ok(Self { config, tasks: out })
    }
}

/// Seeded sample of `n` distinct indices from `0..len`, in ascending order.
fn sample_indices(len: usize, n: usize, seed: u64, task: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add((task as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)));
    let mut idx = rand::seq::index::sample(&mut rng, len, n).into_vec();
    idx.sort_unstable();
    idx
}

/// Runs the base model once over a seeded sample of each task's data, storing
/// every group's inputs and base outputs.
pub fn collect_base_features(
    base: &TensorArchive,
    datasets: &[TaskDataset],
    plan: &DecompositionPlan,
    sample_n: usize,
    seed: u64,
) -> Result<FeatureStore> {
    let cfg = plan.config;
    let model = bind_weights(base, &cfg)?;
    let taps = plan.required_taps();
    if sample_n == 0 {
        return Err(Error::Sample("samples per task must be positive".into()));
    }
    let mut tasks = Vec::with_capacity(datasets.len());
    for (ti, ds) in datasets.iter().enumerate() {
        if ds.sequences.len() < sample_n {
            return Err(Error::Sample(format!(
                "task {:?} has {} sequences, need {sample_n}",
                ds.task,
                ds.sequences.len()
            )));
        }
        let sequences: Vec<Vec<u32>> = sample_indices(ds.sequences.len(), sample_n, seed, ti)
            .into_iter()
            .map(|i| ds.sequences[i].clone())
            .collect();
        let traces = sequences
            .par_iter()
            .map(|s| model.forward_with_taps(s, &taps))
            .collect::<Result<Vec<_>>>()?;
        let mut tap_store: BTreeMap<TapId, Vec<Matrix>> = taps.iter().map(|&t| (t, Vec::new())).collect();
        for tr in traces {
            for (id, m) in tr.taps {
                tap_store.get_mut(&id).unwrap().push(m);
            }
        }
        tasks.push(TaskFeatures {
            task: ds.task.clone(),
            sequences,
            taps: tap_store,
            base_outputs: BTreeMap::new(),
        });
    }
    let mut store = FeatureStore { config: cfg, tasks };

    let base_outputs = plan
        .groups
        .par_iter()
        .map(|g| {
            let params = GroupParams::extract(g, &cfg, base, base)?;
            Ok((g.id.clone(), store.evaluate(g, &params)?))
        })
        .collect::<Result<Vec<_>>>()?;
    for (id, per_task) in base_outputs {
        for (tf, m) in store.tasks.iter_mut().zip(per_task) {
            tf.base_outputs.insert(id.clone(), m);
        }
    }
    Ok(store)
}

/// Output deltas of one group: `blocks[a][b]` holds Δf of model `b` on data task `a`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupDeltas {
    pub blocks: Vec<Vec<Matrix>>,
}

impl GroupDeltas {
    pub fn n_tasks(&self) -> usize {
        self.blocks.len()
    }

    pub fn n_models(&self) -> usize {
        self.blocks.first().map_or(0, Vec::len)
    }

    /// Rows of data task `a`.
    pub fn rows(&self, a: usize) -> usize {
        self.blocks[a].first().map_or(0, Matrix::rows)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeltaStore {
    pub groups: BTreeMap<String, GroupDeltas>,
}

impl DeltaStore {
    pub fn group(&self, id: &str) -> Result<&GroupDeltas> {
        self.groups
            .get(id)
            .ok_or_else(|| Error::Input(format!("no deltas for group {id:?}")))
    }
}

/// Δf of every fine-tuned model for every group on every task's stored inputs.
pub fn compute_delta_outputs(
    store: &FeatureStore,
    base: &TensorArchive,
    fine_tuned: &[TensorArchive],
    plan: &DecompositionPlan,
) -> Result<DeltaStore> {
    for ft in fine_tuned {
        base.check_compatible(ft)?;
    }
    let jobs: Vec<(usize, usize)> = (0..plan.groups.len())
        .flat_map(|g| (0..fine_tuned.len()).map(move |m| (g, m)))
        .collect();
    let results = jobs
        .par_iter()
        .map(|&(g, m)| {
            let group = &plan.groups[g];
            let params = GroupParams::extract(group, &plan.config, &fine_tuned[m], base)?;
            store.evaluate_deltas(group, &params)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut groups = BTreeMap::new();
    let mut results = results.into_iter();
    for group in &plan.groups {
        let mut blocks: Vec<Vec<Matrix>> = vec![Vec::with_capacity(fine_tuned.len()); store.n_tasks()];
        for _ in 0..fine_tuned.len() {
            for (a, d) in results.next().unwrap().into_iter().enumerate() {
                blocks[a].push(d);
            }
        }
        groups.insert(group.id.clone(), GroupDeltas { blocks });
    }
    Ok(DeltaStore { groups })
}

/// Copy of `base` where the group's owned slices are `base + Σ_t coeffs[t]·taus[t]`.
/// Only the tensors the group touches are rewritten.
pub fn combine_group(
    base: &TensorArchive,
    taus: &[TensorArchive],
    coeffs: &[f64],
    group: &SubmoduleGroup,
) -> Result<TensorArchive> {
    let mut out = base.clone();
    apply_group_combination(&mut out, base, taus, coeffs, group)?;
    Ok(out)
}

/// Writes `base + Σ_t coeffs[t]·taus[t]` into `target` on the group's slices, in f64.
pub fn apply_group_combination(
    target: &mut TensorArchive,
    base: &TensorArchive,
    taus: &[TensorArchive],
    coeffs: &[f64],
    group: &SubmoduleGroup,
) -> Result<()> {
    if coeffs.len() != taus.len() {
        return Err(Error::Coeff(format!(
            "group {} got {} coefficients for {} task vectors",
            group.id,
            coeffs.len(),
            taus.len()
        )));
    }
    if let Some(c) = coeffs.iter().find(|c| !c.is_finite()) {
        return Err(Error::Coeff(format!(
            "non-finite coefficient {c} for group {}",
            group.id
        )));
    }
    for p in &group.params {
        let b = base.require(&p.tensor)?;
        let shape = b.shape().to_vec();
        let idx = crate::decompose::region_indices(&shape, &p.region);
        let tau_data = taus
            .iter()
            .map(|t| t.require(&p.tensor).map(Tensor::data))
            .collect::<Result<Vec<_>>>()?;
        let dst = target
            .get_mut(&p.tensor)
            .ok_or_else(|| Error::Compat(format!("missing tensor {:?}", p.tensor)))?;
        let bd = b.data();
        let out = dst.data_mut();
        for &i in &idx {
            let mut acc = bd[i] as f64;
            for (td, &c) in tau_data.iter().zip(coeffs) {
                acc += c * td[i] as f64;
            }
            out[i] = acc as f32;
        }
        if matches!(p.region, Region::Full) {
            debug_assert_eq!(idx.len(), bd.len());
        }
    }
    Ok(())
}

/// Group outputs at `θ₀ + c·τ` for each `c`, flattened over all tasks' positions.
pub fn interpolated_outputs(
    store: &FeatureStore,
    base: &TensorArchive,
    tau: &TensorArchive,
    group: &SubmoduleGroup,
    coeffs: &[f64],
) -> Result<Vec<Matrix>> {
    coeffs
        .par_iter()
        .map(|&c| {
            let archive = combine_group(base, std::slice::from_ref(tau), &[c], group)?;
            let params = GroupParams::extract(group, &store.config, &archive, base)?;
            Ok(Matrix::vstack(&store.evaluate(group, &params)?))
        })
        .collect()
}
