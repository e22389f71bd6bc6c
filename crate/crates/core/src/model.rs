//! Minimal decoder-only transformer: pre-norm residual blocks with RMSNorm,
//! multi-head causal attention with rotary embeddings and a SwiGLU MLP.
//!
//! Every intermediate the merge pipeline needs is exposed as a named tap
//! (see [`TapId`]). The branch functions are public to the crate so that a
//! single submodule can be re-evaluated on stored inputs with arbitrary
//! parameters.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::archive::{TensorArchive, MODEL_CONFIG_KEY};
use crate::error::{Error, Result};
use crate::matrix::{dot, Matrix};

fn default_norm_eps() -> f32 {
    1e-5
}

fn default_rope_theta() -> f32 {
    10_000.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f32,
    #[serde(default = "default_rope_theta")]
    pub rope_theta: f32,
}

impl ModelConfig {
    pub fn new(
        d_model: usize,
        n_heads: usize,
        n_layers: usize,
        d_ff: usize,
        vocab_size: usize,
        max_seq: usize,
    ) -> Self {
        Self {
            d_model,
            n_heads,
            n_layers,
            d_ff,
            vocab_size,
            max_seq,
            norm_eps: default_norm_eps(),
            rope_theta: default_rope_theta(),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq", self.max_seq),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        // rotary embedding rotates pairs of head dimensions
        if !self.head_dim().is_multiple_of(2) {
            return Err(Error::Config(format!("head dim {} must be even", self.head_dim())));
        }
        if !(self.norm_eps > 0.0 && self.norm_eps.is_finite()) {
            return Err(Error::Config("norm_eps must be positive".into()));
        }
        if !(self.rope_theta > 0.0 && self.rope_theta.is_finite()) {
            return Err(Error::Config("rope_theta must be positive".into()));
        }
        Ok(())
    }

    /// Canonical parameter names with their `[out, in]` (or `[n]`) shapes.
    pub fn parameter_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        let (d, f, v) = (self.d_model, self.d_ff, self.vocab_size);
        let mut m = BTreeMap::new();
        m.insert("embed".to_string(), vec![v, d]);
        for i in 0..self.n_layers {
            m.insert(format!("layers.{i}.norm1"), vec![d]);
            for p in ["q", "k", "v", "o"] {
                m.insert(format!("layers.{i}.attn.{p}_proj"), vec![d, d]);
            }
            m.insert(format!("layers.{i}.norm2"), vec![d]);
            m.insert(format!("layers.{i}.mlp.gate_proj"), vec![f, d]);
            m.insert(format!("layers.{i}.mlp.up_proj"), vec![f, d]);
            m.insert(format!("layers.{i}.mlp.down_proj"), vec![d, f]);
        }
        m.insert("norm_final".to_string(), vec![d]);
        m.insert("lm_head".to_string(), vec![v, d]);
        m
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// Reads the config stored in an archive's `model_config` meta entry.
    pub fn from_archive(archive: &TensorArchive) -> Result<Self> {
        let raw = archive
            .meta()
            .get(MODEL_CONFIG_KEY)
            .ok_or_else(|| Error::Config(format!("archive meta lacks {MODEL_CONFIG_KEY:?}")))?;
        let cfg: ModelConfig =
            serde_json::from_str(raw).map_err(|e| Error::Config(format!("bad {MODEL_CONFIG_KEY}: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Named activation tap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TapId {
    /// Residual stream entering layer `i`.
    LayerIn(usize),
    /// Input of the attention branch. Records the un-normalized stream, like `LayerIn`.
    AttnIn(usize),
    /// Attention branch output before the residual add.
    AttnOut(usize),
    /// Concatenated per-head attention outputs feeding `o_proj`.
    OprojIn(usize),
    /// Residual stream entering the MLP branch.
    MlpIn(usize),
    /// MLP branch output before the residual add.
    MlpOut(usize),
    /// Residual stream leaving layer `i`.
    LayerOut(usize),
    FinalHidden,
    Logits,
}

impl TapId {
    pub fn layer(&self) -> Option<usize> {
        match *self {
            TapId::LayerIn(i)
            | TapId::AttnIn(i)
            | TapId::AttnOut(i)
            | TapId::OprojIn(i)
            | TapId::MlpIn(i)
            | TapId::MlpOut(i)
            | TapId::LayerOut(i) => Some(i),
            TapId::FinalHidden | TapId::Logits => None,
        }
    }

    pub fn width(&self, cfg: &ModelConfig) -> usize {
        match self {
            TapId::Logits => cfg.vocab_size,
            _ => cfg.d_model,
        }
    }

    fn check(&self, cfg: &ModelConfig) -> Result<()> {
        match self.layer() {
            Some(i) if i >= cfg.n_layers => Err(Error::Input(format!(
                "tap {self} refers to layer {i} of a {}-layer model",
                cfg.n_layers
            ))),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for TapId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TapId::LayerIn(i) => write!(f, "layer_in[{i}]"),
            TapId::AttnIn(i) => write!(f, "attn_in[{i}]"),
            TapId::AttnOut(i) => write!(f, "attn_out[{i}]"),
            TapId::OprojIn(i) => write!(f, "oproj_in[{i}]"),
            TapId::MlpIn(i) => write!(f, "mlp_in[{i}]"),
            TapId::MlpOut(i) => write!(f, "mlp_out[{i}]"),
            TapId::LayerOut(i) => write!(f, "layer_out[{i}]"),
            TapId::FinalHidden => write!(f, "final_hidden"),
            TapId::Logits => write!(f, "logits"),
        }
    }
}

impl FromStr for TapId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "final_hidden" => return Ok(TapId::FinalHidden),
            "logits" => return Ok(TapId::Logits),
            _ => {}
        }
        let bad = || Error::Input(format!("unknown tap id {s:?}"));
        let (kind, rest) = s.split_once('[').ok_or_else(bad)?;
        let idx: usize = rest.strip_suffix(']').ok_or_else(bad)?.parse().map_err(|_| bad())?;
        Ok(match kind {
            "layer_in" => TapId::LayerIn(idx),
            "attn_in" => TapId::AttnIn(idx),
            "attn_out" => TapId::AttnOut(idx),
            "oproj_in" => TapId::OprojIn(idx),
            "mlp_in" => TapId::MlpIn(idx),
            "mlp_out" => TapId::MlpOut(idx),
            "layer_out" => TapId::LayerOut(idx),
            _ => return Err(bad()),
        })
    }
}

impl Serialize for TapId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for TapId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

pub type TapSpec = BTreeSet<TapId>;

/// Every tap the model can produce.
pub fn all_taps(cfg: &ModelConfig) -> TapSpec {
    let mut s = TapSpec::new();
    for i in 0..cfg.n_layers {
        s.extend([
            TapId::LayerIn(i),
            TapId::AttnIn(i),
            TapId::AttnOut(i),
            TapId::OprojIn(i),
            TapId::MlpIn(i),
            TapId::MlpOut(i),
            TapId::LayerOut(i),
        ]);
    }
    s.insert(TapId::FinalHidden);
    s.insert(TapId::Logits);
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub logits: Matrix,
    pub taps: BTreeMap<TapId, Matrix>,
}

/// Weights of one transformer block.
#[derive(Debug, Clone)]
pub struct LayerWeights {
    pub norm1: Vec<f32>,
    pub attn: AttnWeights,
    pub norm2: Vec<f32>,
    pub mlp: MlpWeights,
}

#[derive(Debug, Clone)]
pub struct AttnWeights {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    pub o: Matrix,
}

#[derive(Debug, Clone)]
pub struct MlpWeights {
    pub gate: Matrix,
    pub up: Matrix,
    pub down: Matrix,
}

/// Validated weights bound to a config. Immutable once built.
#[derive(Debug, Clone)]
pub struct BoundModel {
    config: ModelConfig,
    embed: Matrix,
    layers: Vec<LayerWeights>,
    norm_final: Vec<f32>,
    lm_head: Matrix,
}

pub(crate) fn take_matrix(archive: &TensorArchive, name: &str, shape: [usize; 2]) -> Result<Matrix> {
    let t = archive.get(name).ok_or_else(|| Error::Bind(name.to_string()))?;
    if t.shape() != shape {
        return Err(Error::Bind(format!(
            "{name}: expected shape {shape:?}, found {:?}",
            t.shape()
        )));
    }
    Matrix::from_tensor(t)
}

pub(crate) fn take_vector(archive: &TensorArchive, name: &str, len: usize) -> Result<Vec<f32>> {
    let t = archive.get(name).ok_or_else(|| Error::Bind(name.to_string()))?;
    if t.shape() != [len] {
        return Err(Error::Bind(format!(
            "{name}: expected shape [{len}], found {:?}",
            t.shape()
        )));
    }
    Ok(t.data().to_vec())
}

pub(crate) fn take_layer_attn(archive: &TensorArchive, cfg: &ModelConfig, i: usize) -> Result<(Vec<f32>, AttnWeights)> {
    let d = cfg.d_model;
    let m = |s: &str| take_matrix(archive, &format!("layers.{i}.attn.{s}_proj"), [d, d]);
    Ok((
        take_vector(archive, &format!("layers.{i}.norm1"), d)?,
        AttnWeights {
            q: m("q")?,
            k: m("k")?,
            v: m("v")?,
            o: m("o")?,
        },
    ))
}

pub(crate) fn take_layer_mlp(archive: &TensorArchive, cfg: &ModelConfig, i: usize) -> Result<(Vec<f32>, MlpWeights)> {
    let (d, f) = (cfg.d_model, cfg.d_ff);
    let p = |s: &str| format!("layers.{i}.{s}");
    Ok((
        take_vector(archive, &p("norm2"), d)?,
        MlpWeights {
            gate: take_matrix(archive, &p("mlp.gate_proj"), [f, d])?,
            up: take_matrix(archive, &p("mlp.up_proj"), [f, d])?,
            down: take_matrix(archive, &p("mlp.down_proj"), [d, f])?,
        },
    ))
}

pub(crate) fn take_layer(archive: &TensorArchive, cfg: &ModelConfig, i: usize) -> Result<LayerWeights> {
    let (norm1, attn) = take_layer_attn(archive, cfg, i)?;
    let (norm2, mlp) = take_layer_mlp(archive, cfg, i)?;
    Ok(LayerWeights {
        norm1,
        attn,
        norm2,
        mlp,
    })
}

/// Binds an archive's canonical parameters to a model.
pub fn bind_weights(archive: &TensorArchive, config: &ModelConfig) -> Result<BoundModel> {
    config.validate()?;
    let (d, v) = (config.d_model, config.vocab_size);
    let embed = take_matrix(archive, "embed", [v, d])?;
    let layers = (0..config.n_layers)
        .map(|i| take_layer(archive, config, i))
        .collect::<Result<Vec<_>>>()?;
    let norm_final = take_vector(archive, "norm_final", d)?;
    let lm_head = take_matrix(archive, "lm_head", [v, d])?;
    Ok(BoundModel {
        config: *config,
        embed,
        layers,
        norm_final,
        lm_head,
    })
}

impl BoundModel {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn forward_with_taps(&self, tokens: &[u32], taps: &TapSpec) -> Result<ForwardTrace> {
        forward_with_taps(self, tokens, taps)
    }

    pub fn logits(&self, tokens: &[u32]) -> Result<Matrix> {
        Ok(forward_with_taps(self, tokens, &TapSpec::new())?.logits)
    }
}

pub(crate) fn check_tokens(cfg: &ModelConfig, tokens: &[u32]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::Input("empty token sequence".into()));
    }
    if tokens.len() > cfg.max_seq {
        return Err(Error::Input(format!(
            "sequence length {} exceeds max_seq {}",
            tokens.len(),
            cfg.max_seq
        )));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::Input(format!("token id {t} >= vocab size {}", cfg.vocab_size)));
    }
    Ok(())
}

/// Gathers embedding rows.
pub(crate) fn embed_tokens(embed: &Matrix, tokens: &[u32]) -> Matrix {
    let mut data = Vec::with_capacity(tokens.len() * embed.cols());
    for &t in tokens {
        data.extend_from_slice(embed.row(t as usize));
    }
    Matrix::new(tokens.len(), embed.cols(), data)
}

pub(crate) fn rms_norm(x: &Matrix, weight: &[f32], eps: f32) -> Matrix {
    let mut out = x.clone();
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let ms = row.iter().map(|v| v * v).sum::<f32>() / row.len() as f32;
        let inv = 1.0 / (ms + eps).sqrt();
        for (v, w) in row.iter_mut().zip(weight) {
            *v = *v * inv * w;
        }
    }
    out
}

/// Rotates pairs `(j, j + d/2)` of each row of a `[seq × head_dim]` block.
fn apply_rope(x: &mut Matrix, theta: f32) {
    let d = x.cols();
    let half = d / 2;
    for pos in 0..x.rows() {
        let row = x.row_mut(pos);
        for j in 0..half {
            let freq = theta.powf(-2.0 * j as f32 / d as f32);
            let angle = pos as f32 * freq;
            let (sin, cos) = angle.sin_cos();
            let (a, b) = (row[j], row[j + half]);
            row[j] = a * cos - b * sin;
            row[j + half] = a * sin + b * cos;
        }
    }
}

/// Causal attention of one head given its q/k/v projection rows
/// (`[head_dim × d_model]` each) applied to the normalized input.
pub(crate) fn head_attention(xn: &Matrix, q_rows: &Matrix, k_rows: &Matrix, v_rows: &Matrix, theta: f32) -> Matrix {
    let mut q = xn.matmul_t(q_rows);
    let mut k = xn.matmul_t(k_rows);
    let v = xn.matmul_t(v_rows);
    apply_rope(&mut q, theta);
    apply_rope(&mut k, theta);
    let n = xn.rows();
    let dh = q.cols();
    let scale = 1.0 / (dh as f32).sqrt();
    let mut out = Matrix::zeros(n, dh);
    let mut scores = vec![0f32; n];
    for i in 0..n {
        let qi = q.row(i);
        let mut max = f32::NEG_INFINITY;
        for j in 0..=i {
            scores[j] = dot(qi, k.row(j)) * scale;
            max = max.max(scores[j]);
        }
        let mut sum = 0.0;
        for s in &mut scores[..=i] {
            *s = (*s - max).exp();
            sum += *s;
        }
        let o = out.row_mut(i);
        for j in 0..=i {
            let w = scores[j] / sum;
            for (acc, vj) in o.iter_mut().zip(v.row(j)) {
                *acc += w * vj;
            }
        }
    }
    out
}

/// Output of the attention branch before the residual add, plus the
/// concatenated head outputs that feed `o_proj`.
pub(crate) fn attention_branch(x: &Matrix, norm1: &[f32], w: &AttnWeights, cfg: &ModelConfig) -> (Matrix, Matrix) {
    let xn = rms_norm(x, norm1, cfg.norm_eps);
    let dh = cfg.head_dim();
    let mut concat = Matrix::zeros(x.rows(), cfg.d_model);
    for h in 0..cfg.n_heads {
        let r = h * dh..(h + 1) * dh;
        let head = head_attention(
            &xn,
            &w.q.row_block(r.clone()),
            &w.k.row_block(r.clone()),
            &w.v.row_block(r.clone()),
            cfg.rope_theta,
        );
        for p in 0..x.rows() {
            concat.row_mut(p)[r.clone()].copy_from_slice(head.row(p));
        }
    }
    let out = concat.matmul_t(&w.o);
    (concat, out)
}

fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

pub(crate) fn mlp_branch(a: &Matrix, norm2: &[f32], w: &MlpWeights, eps: f32) -> Matrix {
    let an = rms_norm(a, norm2, eps);
    let mut g = an.matmul_t(&w.gate);
    let u = an.matmul_t(&w.up);
    for (gv, uv) in g.data_mut().iter_mut().zip(u.data()) {
        *gv = silu(*gv) * uv;
    }
    g.matmul_t(&w.down)
}

/// Intermediates of one block.
pub(crate) struct LayerTrace {
    pub oproj_in: Matrix,
    pub attn_out: Matrix,
    pub mlp_in: Matrix,
    pub mlp_out: Matrix,
    pub out: Matrix,
}

pub(crate) fn layer_forward(x: &Matrix, w: &LayerWeights, cfg: &ModelConfig) -> LayerTrace {
    let (oproj_in, attn_out) = attention_branch(x, &w.norm1, &w.attn, cfg);
    let mlp_in = x.add(&attn_out);
    let mlp_out = mlp_branch(&mlp_in, &w.norm2, &w.mlp, cfg.norm_eps);
    let out = mlp_in.add(&mlp_out);
    LayerTrace {
        oproj_in,
        attn_out,
        mlp_in,
        mlp_out,
        out,
    }
}

/// Final norm followed by the unembedding.
pub(crate) fn unembed(stream: &Matrix, norm_final: &[f32], lm_head: &Matrix, eps: f32) -> Matrix {
    rms_norm(stream, norm_final, eps).matmul_t(lm_head)
}

pub fn forward_with_taps(model: &BoundModel, tokens: &[u32], taps: &TapSpec) -> Result<ForwardTrace> {
    let cfg = &model.config;
    check_tokens(cfg, tokens)?;
    for t in taps {
        t.check(cfg)?;
    }
    let mut recorded = BTreeMap::new();
    let mut record = |id: TapId, m: &Matrix| {
        if taps.contains(&id) {
            recorded.insert(id, m.clone());
        }
    };

    let mut x = embed_tokens(&model.embed, tokens);
    for (i, w) in model.layers.iter().enumerate() {
        record(TapId::LayerIn(i), &x);
        record(TapId::AttnIn(i), &x);
        let lt = layer_forward(&x, w, cfg);
        record(TapId::OprojIn(i), &lt.oproj_in);
        record(TapId::AttnOut(i), &lt.attn_out);
        record(TapId::MlpIn(i), &lt.mlp_in);
        record(TapId::MlpOut(i), &lt.mlp_out);
        record(TapId::LayerOut(i), &lt.out);
        x = lt.out;
    }
    let final_hidden = rms_norm(&x, &model.norm_final, cfg.norm_eps);
    record(TapId::FinalHidden, &final_hidden);
    let logits = final_hidden.matmul_t(&model.lm_head);
    record(TapId::Logits, &logits);
    Ok(ForwardTrace { logits, taps: recorded })
}

/// Mean next-token cross-entropy (nats) per sequence, averaged over sequences.
pub fn eval_cross_entropy(model: &BoundModel, dataset: &[Vec<u32>]) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Input("empty dataset".into()));
    }
    let mut total = 0.0;
    for seq in dataset {
        if seq.len() < 2 {
            return Err(Error::Input("sequences need at least 2 tokens".into()));
        }
        let logits = model.logits(seq)?;
        let mut nll = 0.0;
        for p in 0..seq.len() - 1 {
            let row = logits.row(p);
            let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
            let lse = max + row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln();
            nll += lse - row[seq[p + 1] as usize] as f64;
        }
        total += nll / (seq.len() - 1) as f64;
    }
    Ok(total / dataset.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::archive::Tensor;

    pub(crate) fn tiny_cfg() -> ModelConfig {
        ModelConfig::new(8, 2, 2, 16, 11, 16)
    }

    fn zero_archive(cfg: &ModelConfig) -> TensorArchive {
        let mut a = TensorArchive::new();
        for (name, shape) in cfg.parameter_shapes() {
            a.insert(name, Tensor::zeros(shape)).unwrap();
        }
        a
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let cfg = tiny_cfg();
        let m = bind_weights(&zero_archive(&cfg), &cfg).unwrap();
        let logits = m.logits(&[1, 2, 3]).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
        let ce = eval_cross_entropy(&m, &[vec![1, 2, 3], vec![4, 5]]).unwrap();
        assert!((ce - 11f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn bind_errors_name_the_offender() {
        let cfg = tiny_cfg();
        let mut a = TensorArchive::new();
        for (name, shape) in cfg.parameter_shapes() {
            if name != "lm_head" {
                a.insert(name, Tensor::zeros(shape)).unwrap();
            }
        }
        match bind_weights(&a, &cfg) {
            Err(Error::Bind(name)) => assert_eq!(name, "lm_head"),
            other => panic!("unexpected {other:?}"),
        }
        let mut a = zero_archive(&cfg);
        a.insert("layers.0.attn.q_proj", Tensor::zeros(vec![8, 9])).unwrap();
        assert!(matches!(bind_weights(&a, &cfg), Err(Error::Bind(m)) if m.contains("q_proj")));
    }

    #[test]
    fn input_errors() {
        let cfg = tiny_cfg();
        let m = bind_weights(&zero_archive(&cfg), &cfg).unwrap();
        assert!(matches!(m.logits(&[11]), Err(Error::Input(_))));
        assert!(matches!(m.logits(&[0; 17]), Err(Error::Input(_))));
        assert!(matches!(eval_cross_entropy(&m, &[]), Err(Error::Input(_))));
        let taps: TapSpec = [TapId::LayerIn(5)].into();
        assert!(m.forward_with_taps(&[1], &taps).is_err());
    }

    #[test]
    fn tap_ids_round_trip_through_strings() {
        for t in all_taps(&tiny_cfg()) {
            assert_eq!(t.to_string().parse::<TapId>().unwrap(), t);
        }
        assert!("mlp_in[x]".parse::<TapId>().is_err());
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::new(8, 3, 1, 4, 4, 4).validate().is_err());
        assert!(ModelConfig::new(6, 2, 1, 4, 4, 4).validate().is_err());
        assert!(ModelConfig::new(8, 2, 0, 4, 4, 4).validate().is_err());
        let cfg: ModelConfig =
            serde_json::from_str(r#"{"d_model":8,"n_heads":2,"n_layers":1,"d_ff":4,"vocab_size":5,"max_seq":4}"#)
                .unwrap();
        assert_eq!(cfg.norm_eps, 1e-5);
        assert_eq!(cfg.rope_theta, 10_000.0);
    }
}
