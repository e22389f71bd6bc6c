//! Merged checkpoints: weight averaging, task arithmetic, DARE and the
//! per-group closed-form merge.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::{task_vector, Tensor, TensorArchive};
use crate::decompose::{plan_decomposition, DecompositionPlan, Granularity};
use crate::error::{Error, Result};
use crate::features::{apply_group_combination, collect_base_features, compute_delta_outputs, TaskDataset};
use crate::model::ModelConfig;
use crate::solver::{solve_plan, MergeWeights};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeMethod {
    WeightAvg,
    TaskArithmetic,
    Dare,
    LinearSolve,
}

impl std::str::FromStr for MergeMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "weight_avg" => Ok(MergeMethod::WeightAvg),
            "task_arithmetic" => Ok(MergeMethod::TaskArithmetic),
            "dare" => Ok(MergeMethod::Dare),
            "linear_solve" => Ok(MergeMethod::LinearSolve),
            other => Err(Error::Config(format!("unknown merge method {other:?}"))),
        }
    }
}

impl std::fmt::Display for MergeMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MergeMethod::WeightAvg => "weight_avg",
            MergeMethod::TaskArithmetic => "task_arithmetic",
            MergeMethod::Dare => "dare",
            MergeMethod::LinearSolve => "linear_solve",
        })
    }
}

fn default_samples() -> usize {
    30
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeRequest {
    pub method: MergeMethod,
    #[serde(default)]
    pub level: Option<Granularity>,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub drop_p: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_true")]
    pub normalized: bool,
    #[serde(default = "default_samples")]
    pub samples_per_task: usize,
}

impl MergeRequest {
    pub fn new(method: MergeMethod) -> Self {
        Self {
            method,
            level: None,
            alpha: None,
            drop_p: None,
            seed: 0,
            normalized: true,
            samples_per_task: default_samples(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.method {
            MergeMethod::TaskArithmetic if self.alpha.is_none() => {
                Err(Error::Config("task_arithmetic needs alpha".into()))
            }
            MergeMethod::Dare if self.alpha.is_none() || self.drop_p.is_none() => {
                Err(Error::Config("dare needs alpha and drop_p".into()))
            }
            MergeMethod::Dare if !(0.0..1.0).contains(&self.drop_p.unwrap()) => {
                Err(Error::Param(format!("drop_p {} not in [0, 1)", self.drop_p.unwrap())))
            }
            MergeMethod::LinearSolve if self.level.is_none() => Err(Error::Config("linear_solve needs a level".into())),
            MergeMethod::LinearSolve if self.samples_per_task == 0 => {
                Err(Error::Config("samples_per_task must be positive".into()))
            }
            _ => Ok(()),
        }
    }
}

fn tag(mut a: TensorArchive, method: &str) -> TensorArchive {
    a.meta_mut().insert("kind".into(), "merged".into());
    a.meta_mut().insert("merge_method".into(), method.into());
    a
}

fn require_models(fine_tuned: &[TensorArchive]) -> Result<()> {
    if fine_tuned.is_empty() {
        Err(Error::Input("no fine-tuned models to merge".into()))
    } else {
        Ok(())
    }
}

/// Elementwise mean of the fine-tuned archives.
pub fn merge_weight_average(base: &TensorArchive, fine_tuned: &[TensorArchive]) -> Result<TensorArchive> {
    require_models(fine_tuned)?;
    for ft in fine_tuned {
        base.check_compatible(ft)?;
    }
    let inv = 1.0 / fine_tuned.len() as f64;
    let mut out = TensorArchive::with_meta(base.meta().clone());
    for (name, b) in base.iter() {
        let mut acc = vec![0f64; b.numel()];
        for ft in fine_tuned {
            for (a, &x) in acc.iter_mut().zip(ft.require(name)?.data()) {
                *a += x as f64;
            }
        }
        let data = acc.into_iter().map(|v| (v * inv) as f32).collect();
        out.insert(name, Tensor::new(b.shape().to_vec(), data)?)?;
    }
    Ok(tag(out, "weight_avg"))
}

pub fn task_vectors(base: &TensorArchive, fine_tuned: &[TensorArchive]) -> Result<Vec<TensorArchive>> {
    fine_tuned.iter().map(|ft| task_vector(ft, base)).collect()
}

/// `θ₀ + α Σ_t τ_t`.
pub fn merge_task_arithmetic(base: &TensorArchive, fine_tuned: &[TensorArchive], alpha: f64) -> Result<TensorArchive> {
    sum_deltas(base, fine_tuned, alpha, None).map(|a| tag(a, "task_arithmetic"))
}

/// `θ₀ + α Σ_t τ_t` with `τ_t = θ_t − θ₀` formed in f64 straight from the
/// checkpoints, optionally drop-and-rescaled. One rounding at the end keeps
/// the baselines' algebraic identities tight.
fn sum_deltas(
    base: &TensorArchive,
    fine_tuned: &[TensorArchive],
    alpha: f64,
    dare: Option<(f64, u64)>,
) -> Result<TensorArchive> {
    require_models(fine_tuned)?;
    for ft in fine_tuned {
        base.check_compatible(ft)?;
    }
    let mut sums: Vec<Vec<f64>> = base.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
    for (t, ft) in fine_tuned.iter().enumerate() {
        let mut rng = dare.map(|(_, seed)| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(t as u64);
            r
        });
        for ((name, b), acc) in base.iter().zip(sums.iter_mut()) {
            for ((s, &x), &y) in acc.iter_mut().zip(ft.require(name)?.data()).zip(b.data()) {
                let mut tau = x as f64 - y as f64;
                if let (Some((p, _)), Some(r)) = (dare, rng.as_mut()) {
                    tau = if r.random::<f64>() < p { 0.0 } else { tau / (1.0 - p) };
                }
                *s += tau;
            }
        }
    }
    let mut out = TensorArchive::with_meta(base.meta().clone());
    for ((name, b), acc) in base.iter().zip(sums) {
        let data = b
            .data()
            .iter()
            .zip(acc)
            .map(|(&x, s)| (x as f64 + alpha * s) as f32)
            .collect();
        out.insert(name, Tensor::new(b.shape().to_vec(), data)?)?;
    }
    Ok(out)
}

/// Drops each element of `tau` with probability `drop_p` and rescales survivors by `1/(1-drop_p)`.
pub fn dare_drop(tau: &TensorArchive, drop_p: f64, rng: &mut impl Rng) -> Result<TensorArchive> {
    if !(0.0..1.0).contains(&drop_p) {
        return Err(Error::Param(format!("drop_p {drop_p} not in [0, 1)")));
    }
    let scale = (1.0 / (1.0 - drop_p)) as f32;
    let mut out = TensorArchive::with_meta(tau.meta().clone());
    for (name, t) in tau.iter() {
        let data = t
            .data()
            .iter()
            .map(|&v| if rng.random::<f64>() < drop_p { 0.0 } else { v * scale })
            .collect();
        out.insert(name, Tensor::new(t.shape().to_vec(), data)?)?;
    }
    Ok(out)
}

/// DARE: per-task drop-and-rescale of the task vectors, then task arithmetic with `alpha`.
pub fn merge_dare(
    base: &TensorArchive,
    fine_tuned: &[TensorArchive],
    alpha: f64,
    drop_p: f64,
    seed: u64,
) -> Result<TensorArchive> {
    if !(0.0..1.0).contains(&drop_p) {
        return Err(Error::Param(format!("drop_p {drop_p} not in [0, 1)")));
    }
    sum_deltas(base, fine_tuned, alpha, Some((drop_p, seed))).map(|a| tag(a, "dare"))
}

/// Applies each group's α to exactly that group's parameter slices.
pub fn merge_with_weights(
    base: &TensorArchive,
    fine_tuned: &[TensorArchive],
    plan: &DecompositionPlan,
    weights: &MergeWeights,
) -> Result<TensorArchive> {
    require_models(fine_tuned)?;
    let taus = task_vectors(base, fine_tuned)?;
    let mut out = base.clone();
    for g in &plan.groups {
        let alpha = weights
            .alpha(&g.id)
            .ok_or_else(|| Error::Coeff(format!("no weights for group {:?}", g.id)))?;
        apply_group_combination(&mut out, base, &taus, alpha, g)?;
    }
    Ok(tag(out, "linear_solve"))
}

#[derive(Debug, Clone)]
pub struct LinearSolveOutput {
    pub merged: TensorArchive,
    pub weights: MergeWeights,
    pub plan: DecompositionPlan,
}

/// Solves per-group weights from base-model features and merges with them.
pub fn solve_weights(
    base: &TensorArchive,
    fine_tuned: &[TensorArchive],
    level: Granularity,
    datasets: &[TaskDataset],
    samples_per_task: usize,
    seed: u64,
    normalized: bool,
) -> Result<(DecompositionPlan, MergeWeights)> {
    require_models(fine_tuned)?;
    if datasets.len() != fine_tuned.len() {
        return Err(Error::Input(format!(
            "{} datasets for {} fine-tuned models",
            datasets.len(),
            fine_tuned.len()
        )));
    }
    let cfg = ModelConfig::from_archive(base)?;
    let plan = plan_decomposition(&cfg, level)?;
    let store = collect_base_features(base, datasets, &plan, samples_per_task, seed)?;
    let deltas = compute_delta_outputs(&store, base, fine_tuned, &plan)?;
    let weights = solve_plan(&plan, &deltas, normalized)?;
    Ok((plan, weights))
}

pub fn merge_linear_solve(
    base: &TensorArchive,
    fine_tuned: &[TensorArchive],
    level: Granularity,
    datasets: &[TaskDataset],
    samples_per_task: usize,
    seed: u64,
    normalized: bool,
) -> Result<LinearSolveOutput> {
    let (plan, weights) = solve_weights(base, fine_tuned, level, datasets, samples_per_task, seed, normalized)?;
    let merged = merge_with_weights(base, fine_tuned, &plan, &weights)?;
    Ok(LinearSolveOutput { merged, weights, plan })
}

/// Dispatches a request. Weights are returned for `linear_solve` only.
pub fn run_merge(
    request: &MergeRequest,
    base: &TensorArchive,
    fine_tuned: &[TensorArchive],
    datasets: &[TaskDataset],
) -> Result<(TensorArchive, Option<MergeWeights>)> {
    request.validate()?;
    Ok(match request.method {
        MergeMethod::WeightAvg => (merge_weight_average(base, fine_tuned)?, None),
        MergeMethod::TaskArithmetic => (merge_task_arithmetic(base, fine_tuned, request.alpha.unwrap())?, None),
        MergeMethod::Dare => (
            merge_dare(
                base,
                fine_tuned,
                request.alpha.unwrap(),
                request.drop_p.unwrap(),
                request.seed,
            )?,
            None,
        ),
        MergeMethod::LinearSolve => {
            let out = merge_linear_solve(
                base,
                fine_tuned,
                request.level.unwrap(),
                datasets,
                request.samples_per_task,
                request.seed,
                request.normalized,
            )?;
            (out.merged, Some(out.weights))
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: &[f32]) -> TensorArchive {
        let mut a = TensorArchive::new();
        a.insert("w", Tensor::new(vec![v.len()], v.to_vec()).unwrap()).unwrap();
        a
    }

    #[test]
    fn weight_average_small_cases() {
        let base = one(&[5.0]);
        let out = merge_weight_average(&base, &[one(&[0.0]), one(&[2.0])]).unwrap();
        assert_eq!(out.get("w").unwrap().data(), &[1.0]);
        let single = merge_weight_average(&base, &[one(&[0.25])]).unwrap();
        assert_eq!(single.get("w").unwrap().data(), &[0.25]);
    }

    #[test]
    fn task_arithmetic_edges() {
        let base = one(&[1.0, -1.0]);
        let ft = one(&[1.5, 0.0]);
        let zero = merge_task_arithmetic(&base, std::slice::from_ref(&ft), 0.0).unwrap();
        assert_eq!(zero.get("w").unwrap().data(), base.get("w").unwrap().data());
        let full = merge_task_arithmetic(&base, std::slice::from_ref(&ft), 1.0).unwrap();
        assert_eq!(full.get("w").unwrap().data(), ft.get("w").unwrap().data());
    }

    #[test]
    fn dare_rejects_bad_probability() {
        let base = one(&[1.0]);
        assert!(matches!(
            merge_dare(&base, &[one(&[2.0])], 1.0, 1.0, 0),
            Err(Error::Param(_))
        ));
        let mut r = MergeRequest::new(MergeMethod::Dare);
        r.alpha = Some(1.0);
        r.drop_p = Some(1.2);
        assert!(matches!(r.validate(), Err(Error::Param(_))));
    }

    #[test]
    fn dare_is_seeded() {
        let base = one(&[0.0; 64]);
        let ft = one(&[1.0; 64]);
        let a = merge_dare(&base, std::slice::from_ref(&ft), 1.0, 0.7, 11).unwrap();
        let b = merge_dare(&base, std::slice::from_ref(&ft), 1.0, 0.7, 11).unwrap();
        let c = merge_dare(&base, &[ft], 1.0, 0.7, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn method_names_parse() {
        for m in [
            MergeMethod::WeightAvg,
            MergeMethod::TaskArithmetic,
            MergeMethod::Dare,
            MergeMethod::LinearSolve,
        ] {
            assert_eq!(m.to_string().parse::<MergeMethod>().unwrap(), m);
        }
    }
}
