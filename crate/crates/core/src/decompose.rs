//! Splits a model into merge units ("submodule groups") at a chosen granularity.
//!
//! Every plan is a partition of the parameter elements: each element of each
//! tensor is owned by exactly one group. Head groups own row blocks of
//! `q/k/v_proj` and the matching column block of `o_proj`; the layer's
//! `norm1` goes to head 0.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, TapId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Model,
    Layer,
    AttnMlp,
    HeadMlp,
}

impl Granularity {
    pub const ALL: [Granularity; 4] = [
        Granularity::Model,
        Granularity::Layer,
        Granularity::AttnMlp,
        Granularity::HeadMlp,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Granularity::Model => "model",
            Granularity::Layer => "layer",
            Granularity::AttnMlp => "attn_mlp",
            Granularity::HeadMlp => "head_mlp",
        }
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Granularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "model" => Ok(Granularity::Model),
            "layer" => Ok(Granularity::Layer),
            "attn_mlp" | "attnmlp" => Ok(Granularity::AttnMlp),
            "head_mlp" | "headmlp" => Ok(Granularity::HeadMlp),
            other => Err(Error::Config(format!("unknown level {other:?}"))),
        }
    }
}

/// Where a group reads its input from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupInput {
    Tokens,
    Tap(TapId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputKind {
    LayerOut,
    AttnBranch,
    MlpBranch,
    HeadBranch(usize),
    EmbedRows,
    Logits,
    ModelLogits,
}

/// Portion of a tensor owned by a group.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Full,
    Rows(Range<usize>),
    Cols(Range<usize>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSlice {
    pub tensor: String,
    pub region: Region,
}

impl ParamSlice {
    fn full(tensor: impl Into<String>) -> Self {
        Self {
            tensor: tensor.into(),
            region: Region::Full,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmoduleGroup {
    pub id: String,
    pub layer: Option<usize>,
    pub head_index: Option<usize>,
    pub input: GroupInput,
    pub output: OutputKind,
    pub params: Vec<ParamSlice>,
}

impl SubmoduleGroup {
    /// Distinct tensor names touched by this group.
    pub fn param_names(&self) -> Vec<&str> {
        let mut names: Vec<&str> = self.params.iter().map(|p| p.tensor.as_str()).collect();
        names.dedup();
        names
    }

    /// True when the group's output is affine-linear in its parameters for fixed inputs.
    pub fn is_parameter_linear(&self) -> bool {
        matches!(self.output, OutputKind::EmbedRows)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionPlan {
    pub granularity: Granularity,
    pub config: ModelConfig,
    pub groups: Vec<SubmoduleGroup>,
}

/// Head `h`'s row range in `q/k/v_proj` and column range in `o_proj`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeadSlices {
    pub layer: usize,
    pub head: usize,
    pub qkv_rows: Range<usize>,
    pub o_cols: Range<usize>,
}

pub fn head_slices(config: &ModelConfig, layer: usize, head: usize) -> Result<HeadSlices> {
    if head >= config.n_heads {
        return Err(Error::Plan(format!(
            "head {head} out of range for {} heads",
            config.n_heads
        )));
    }
    if layer >= config.n_layers {
        return Err(Error::Plan(format!(
            "layer {layer} out of range for {} layers",
            config.n_layers
        )));
    }
    let dh = config.head_dim();
    let r = head * dh..(head + 1) * dh;
    Ok(HeadSlices {
        layer,
        head,
        qkv_rows: r.clone(),
        o_cols: r,
    })
}

fn attn_params(i: usize) -> Vec<ParamSlice> {
    let mut v = vec![ParamSlice::full(format!("layers.{i}.norm1"))];
    for p in ["q", "k", "v", "o"] {
        v.push(ParamSlice::full(format!("layers.{i}.attn.{p}_proj")));
    }
    v
}

fn mlp_params(i: usize) -> Vec<ParamSlice> {
    vec![
        ParamSlice::full(format!("layers.{i}.norm2")),
        ParamSlice::full(format!("layers.{i}.mlp.gate_proj")),
        ParamSlice::full(format!("layers.{i}.mlp.up_proj")),
        ParamSlice::full(format!("layers.{i}.mlp.down_proj")),
    ]
}

fn embed_group() -> SubmoduleGroup {
    SubmoduleGroup {
        id: "embed".into(),
        layer: None,
        head_index: None,
        input: GroupInput::Tokens,
        output: OutputKind::EmbedRows,
        params: vec![ParamSlice::full("embed")],
    }
}

fn lm_head_group(config: &ModelConfig) -> SubmoduleGroup {
    SubmoduleGroup {
        id: "lm_head".into(),
        layer: None,
        head_index: None,
        // norm_final belongs to this group, so it reads the un-normalized stream
        input: GroupInput::Tap(TapId::LayerOut(config.n_layers - 1)),
        output: OutputKind::Logits,
        params: vec![ParamSlice::full("lm_head"), ParamSlice::full("norm_final")],
    }
}

fn mlp_group(i: usize) -> SubmoduleGroup {
    SubmoduleGroup {
        id: format!("mlp.{i}"),
        layer: Some(i),
        head_index: None,
        input: GroupInput::Tap(TapId::MlpIn(i)),
        output: OutputKind::MlpBranch,
        params: mlp_params(i),
    }
}

pub fn plan_decomposition(config: &ModelConfig, level: Granularity) -> Result<DecompositionPlan> {
    config.validate()?;
    let mut groups = Vec::new();
    if level == Granularity::Model {
        groups.push(SubmoduleGroup {
            id: "model".into(),
            layer: None,
            head_index: None,
            input: GroupInput::Tokens,
            output: OutputKind::ModelLogits,
            params: config.parameter_shapes().into_keys().map(ParamSlice::full).collect(),
        });
    } else {
        groups.push(embed_group());
        for i in 0..config.n_layers {
            match level {
                Granularity::Layer => {
                    let mut params = attn_params(i);
                    params.extend(mlp_params(i));
                    groups.push(SubmoduleGroup {
                        id: format!("layer.{i}"),
                        layer: Some(i),
                        head_index: None,
                        input: GroupInput::Tap(TapId::LayerIn(i)),
                        output: OutputKind::LayerOut,
                        params,
                    });
                }
                Granularity::AttnMlp => {
                    groups.push(SubmoduleGroup {
                        id: format!("attn.{i}"),
                        layer: Some(i),
                        head_index: None,
                        input: GroupInput::Tap(TapId::LayerIn(i)),
                        output: OutputKind::AttnBranch,
                        params: attn_params(i),
                    });
                    groups.push(mlp_group(i));
                }
                Granularity::HeadMlp => {
                    for h in 0..config.n_heads {
                        let s = head_slices(config, i, h)?;
                        let mut params = Vec::new();
                        if h == 0 {
                            params.push(ParamSlice::full(format!("layers.{i}.norm1")));
                        }
                        for p in ["q", "k", "v"] {
                            params.push(ParamSlice {
                                tensor: format!("layers.{i}.attn.{p}_proj"),
                                region: Region::Rows(s.qkv_rows.clone()),
                            });
                        }
                        params.push(ParamSlice {
                            tensor: format!("layers.{i}.attn.o_proj"),
                            region: Region::Cols(s.o_cols.clone()),
                        });
                        groups.push(SubmoduleGroup {
                            id: format!("head.{i}.{h}"),
                            layer: Some(i),
                            head_index: Some(h),
                            input: GroupInput::Tap(TapId::LayerIn(i)),
                            output: OutputKind::HeadBranch(h),
                            params,
                        });
                    }
                    groups.push(mlp_group(i));
                }
                Granularity::Model => unreachable!(),
            }
        }
        groups.push(lm_head_group(config));
    }
    Ok(DecompositionPlan {
        granularity: level,
        config: *config,
        groups,
    })
}

impl DecompositionPlan {
    pub fn group(&self, id: &str) -> Result<&SubmoduleGroup> {
        self.groups
            .iter()
            .find(|g| g.id == id)
            .ok_or_else(|| Error::Plan(format!("unknown group {id:?}")))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.groups.iter().map(|g| g.id.as_str())
    }

    /// Input taps needed to evaluate every group.
    pub fn required_taps(&self) -> crate::model::TapSpec {
        self.groups
            .iter()
            .filter_map(|g| match g.input {
                GroupInput::Tap(t) => Some(t),
                GroupInput::Tokens => None,
            })
            .collect()
    }

    /// Verifies that every element of every canonical tensor is owned by exactly one group.
    pub fn check_partition(&self) -> Result<()> {
        let shapes = self.config.parameter_shapes();
        let mut owners: BTreeMap<&str, Vec<u32>> = shapes
            .iter()
            .map(|(n, s)| (n.as_str(), vec![0u32; s.iter().product()]))
            .collect();
        for g in &self.groups {
            for p in &g.params {
                let shape = shapes
                    .get(&p.tensor)
                    .ok_or_else(|| Error::Plan(format!("{}: unknown tensor {:?}", g.id, p.tensor)))?;
                let counts = owners.get_mut(p.tensor.as_str()).unwrap();
                for idx in region_indices(shape, &p.region) {
                    counts[idx] += 1;
                }
            }
        }
        for (name, counts) in owners {
            if let Some(pos) = counts.iter().position(|&c| c != 1) {
                return Err(Error::Plan(format!(
                    "element {pos} of {name} owned by {} groups",
                    counts[pos]
                )));
            }
        }
        Ok(())
    }
}

/// Exact parameter slices touched when `group_id` is merged.
pub fn module_parameters(plan: &DecompositionPlan, group_id: &str) -> Result<Vec<ParamSlice>> {
    Ok(plan.group(group_id)?.params.clone())
}

/// Flat element indices of a region inside a tensor of `shape`.
pub fn region_indices(shape: &[usize], region: &Region) -> Vec<usize> {
    let numel: usize = shape.iter().product();
    match region {
        Region::Full => (0..numel).collect(),
        Region::Rows(r) => {
            let cols = numel / shape[0];
            (r.start * cols..r.end * cols).collect()
        }
        Region::Cols(c) => {
            let cols = shape[1];
            (0..shape[0])
                .flat_map(|row| c.clone().map(move |col| row * cols + col))
                .collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(n_layers: usize, n_heads: usize) -> ModelConfig {
        ModelConfig::new(8, n_heads, n_layers, 16, 11, 16)
    }

    #[test]
    fn group_counts() {
        let c = cfg(4, 2);
        let count = |l| plan_decomposition(&c, l).unwrap().groups.len();
        assert_eq!(count(Granularity::Model), 1);
        assert_eq!(count(Granularity::Layer), 6);
        assert_eq!(count(Granularity::AttnMlp), 10);
        assert_eq!(count(Granularity::HeadMlp), 14);
    }

    #[test]
    fn every_plan_is_a_partition() {
        for heads in [1, 2, 4] {
            let c = cfg(3, heads);
            for level in Granularity::ALL {
                plan_decomposition(&c, level).unwrap().check_partition().unwrap();
            }
        }
    }

    #[test]
    fn overlapping_plan_is_rejected() {
        let mut plan = plan_decomposition(&cfg(2, 2), Granularity::Layer).unwrap();
        plan.groups[1].params.push(ParamSlice::full("embed"));
        assert!(plan.check_partition().is_err());
    }

    #[test]
    fn head_slice_ranges() {
        let c = cfg(1, 2);
        assert_eq!(head_slices(&c, 0, 0).unwrap().qkv_rows, 0..4);
        assert_eq!(head_slices(&c, 0, 1).unwrap().o_cols, 4..8);
        assert!(matches!(head_slices(&c, 0, 2), Err(Error::Plan(_))));
    }

    #[test]
    fn module_parameter_lookup() {
        let c = cfg(2, 2);
        let plan = plan_decomposition(&c, Granularity::HeadMlp).unwrap();
        let mlp: Vec<String> = module_parameters(&plan, "mlp.0")
            .unwrap()
            .into_iter()
            .map(|p| {
                assert_eq!(p.region, Region::Full);
                p.tensor
            })
            .collect();
        assert_eq!(
            mlp,
            [
                "layers.0.norm2",
                "layers.0.mlp.gate_proj",
                "layers.0.mlp.up_proj",
                "layers.0.mlp.down_proj"
            ]
        );
        let head = module_parameters(&plan, "head.0.1").unwrap();
        assert_eq!(head.len(), 4);
        assert!(head
            .iter()
            .any(|p| p.tensor == "layers.0.attn.o_proj" && p.region == Region::Cols(4..8)));
        assert!(head
            .iter()
            .any(|p| p.tensor == "layers.0.attn.q_proj" && p.region == Region::Rows(4..8)));
        assert_eq!(
            module_parameters(&plan, "embed").unwrap(),
            vec![ParamSlice::full("embed")]
        );
        assert!(matches!(module_parameters(&plan, "nope"), Err(Error::Plan(_))));
    }

    #[test]
    fn head_groups_reconstruct_attention_group() {
        let c = cfg(2, 4);
        let heads = plan_decomposition(&c, Granularity::HeadMlp).unwrap();
        let attn = plan_decomposition(&c, Granularity::AttnMlp).unwrap();
        let shapes = c.parameter_shapes();
        for i in 0..2 {
            let mut covered: BTreeMap<String, Vec<usize>> = BTreeMap::new();
            for g in heads
                .groups
                .iter()
                .filter(|g| g.layer == Some(i) && g.head_index.is_some())
            {
                for p in &g.params {
                    covered
                        .entry(p.tensor.clone())
                        .or_default()
                        .extend(region_indices(&shapes[&p.tensor], &p.region));
                }
            }
            let a = attn.group(&format!("attn.{i}")).unwrap();
            assert_eq!(covered.len(), a.params.len());
            for p in &a.params {
                let mut idx = covered.remove(&p.tensor).unwrap();
                idx.sort_unstable();
                assert_eq!(idx, region_indices(&shapes[&p.tensor], &Region::Full));
            }
        }
    }

    #[test]
    fn plan_serializes() {
        let plan = plan_decomposition(&cfg(1, 2), Granularity::HeadMlp).unwrap();
        let s = serde_json::to_string(&plan).unwrap();
        let back: DecompositionPlan = serde_json::from_str(&s).unwrap();
        assert_eq!(back, plan);
        assert_eq!("attn-mlp".parse::<Granularity>().unwrap(), Granularity::AttnMlp);
    }
}
