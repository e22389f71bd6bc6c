//! Closed-form per-group merging weights.
//!
//! For a group with per-model output deltas `Δf_b(x)` on the inputs of data
//! task `a`, the Gram tensor is
//!
//! ```text
//! B[a][b][c] = mean_{x ∈ task a} ⟨Δf_b(x), Δf_c(x)⟩            (plain)
//! B[a][b][c] = mean_{x ∈ task a} ⟨Δf_b(x), Δf_c(x)⟩ / e(x)     (normalized)
//! e(x)       = (1/T) Σ_t ‖Δf_t(x)‖²
//! ```
//!
//! and the weights minimizing `Σ_t E_{x∈t} ‖Σ_{t'} α_{t'} Δf_{t'}(x) − Δf_t(x)‖²`
//! solve `A α = b` with `A[j][k] = Σ_t B[t][j][k]` and `b[j] = Σ_t B[t][j][t]`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decompose::{DecompositionPlan, Granularity};
use crate::error::{Error, Result};
use crate::features::{DeltaStore, GroupDeltas};

/// Relative ridge applied when the direct solve is ill-conditioned.
pub const DEFAULT_RIDGE_REL: f64 = 1e-8;
/// Condition estimate above which the direct solve is not trusted.
pub const MAX_CONDITION: f64 = 1e12;
/// Per-sample energies (and traces) below this count as zero.
pub const ZERO_SIGNAL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GramTensor {
    pub group: String,
    pub tasks: usize,
    /// Row-major `[a][b][c]`.
    pub data: Vec<f64>,
    pub normalized: bool,
    pub samples: Vec<usize>,
    pub skipped: Vec<usize>,
}

impl GramTensor {
    pub fn get(&self, a: usize, b: usize, c: usize) -> f64 {
        let t = self.tasks;
        self.data[(a * t + b) * t + c]
    }
}

/// Builds the Gram tensor of one group, accumulating in f64.
pub fn compute_gram(group: &str, deltas: &GroupDeltas, normalized: bool) -> Result<GramTensor> {
    let t = deltas.n_models();
    if t == 0 {
        return Err(Error::Input(format!("group {group} has no models")));
    }
    if deltas.n_tasks() != t {
        return Err(Error::Input(format!(
            "group {group}: {} data tasks but {t} models",
            deltas.n_tasks()
        )));
    }
    let mut data = vec![0f64; t * t * t];
    let mut samples = vec![0usize; t];
    let mut skipped = vec![0usize; t];
    let mut gram = vec![0f64; t * t];
    for a in 0..t {
        let block = &deltas.blocks[a];
        let rows = block[0].rows();
        if block.iter().any(|m| m.rows() != rows || m.cols() != block[0].cols()) {
            return Err(Error::Input(format!(
                "group {group}: inconsistent delta shapes for task {a}"
            )));
        }
        let mut acc = vec![0f64; t * t];
        for r in 0..rows {
            for b in 0..t {
                for c in b..t {
                    let v: f64 = block[b]
                        .row(r)
                        .iter()
                        .zip(block[c].row(r))
                        .map(|(&x, &y)| x as f64 * y as f64)
                        .sum();
                    gram[b * t + c] = v;
                    gram[c * t + b] = v;
                }
            }
            let weight = if normalized {
                let energy = (0..t).map(|b| gram[b * t + b]).sum::<f64>() / t as f64;
                if energy < ZERO_SIGNAL {
                    skipped[a] += 1;
                    continue;
                }
                1.0 / energy
            } else {
                1.0
            };
            for (s, g) in acc.iter_mut().zip(&gram) {
                *s += weight * g;
            }
            samples[a] += 1;
        }
        if samples[a] > 0 {
            let k = samples[a] as f64;
            data[a * t * t..(a + 1) * t * t]
                .iter_mut()
                .zip(acc)
                .for_each(|(d, s)| *d = s / k);
        }
    }
    if samples.iter().all(|&s| s == 0) {
        return Err(Error::Degenerate(format!(
            "group {group}: no samples with non-zero deltas"
        )));
    }
    Ok(GramTensor {
        group: group.to_string(),
        tasks: t,
        data,
        normalized,
        samples,
        skipped,
    })
}

/// Normal equations `A α = b`.
pub fn assemble_system(gram: &GramTensor) -> (DMatrix<f64>, DVector<f64>) {
    let t = gram.tasks;
    let a = DMatrix::from_fn(t, t, |j, k| (0..t).map(|s| gram.get(s, j, k)).sum());
    let b = DVector::from_fn(t, |j, _| (0..t).map(|s| gram.get(s, j, s)).sum());
    (a, b)
}

/// Value of the quadratic surrogate objective at `alpha`, expressed through `B`.
pub fn surrogate_objective(gram: &GramTensor, alpha: &[f64]) -> f64 {
    let (a, b) = assemble_system(gram);
    let x = DVector::from_column_slice(alpha);
    let constant: f64 = (0..gram.tasks).map(|t| gram.get(t, t, t)).sum();
    (x.transpose() * &a * &x)[(0, 0)] - 2.0 * x.dot(&b) + constant
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveDiagnostics {
    /// Ratio of extreme eigenvalue magnitudes of `A`; absent when `A` is
    /// exactly singular or was never formed.
    pub condition: Option<f64>,
    pub ridge: f64,
    pub residual: f64,
    pub fallback: bool,
    pub zero_signal: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl SolveDiagnostics {
    fn uniform(zero_signal: bool, error: Option<String>) -> Self {
        Self {
            condition: None,
            ridge: 0.0,
            residual: 0.0,
            fallback: true,
            zero_signal,
            error,
        }
    }
}

fn condition_estimate(a: &DMatrix<f64>) -> Option<f64> {
    let eig = a.clone().symmetric_eigen();
    let abs: Vec<f64> = eig.eigenvalues.iter().map(|v| v.abs()).collect();
    let max = abs.iter().cloned().fold(0.0, f64::max);
    let min = abs.iter().cloned().fold(f64::INFINITY, f64::min);
    (min > 0.0).then(|| max / min)
}

/// Solves `A α = b`, falling back to a relative ridge when `A` is
/// ill-conditioned and to uniform weights when `A` carries no signal.
pub fn solve_alpha(a: &DMatrix<f64>, b: &DVector<f64>, ridge_rel: f64) -> Result<(Vec<f64>, SolveDiagnostics)> {
    let t = b.len();
    if a.nrows() != t || a.ncols() != t || t == 0 {
        return Err(Error::Numeric(format!(
            "system shape {}x{} vs rhs {t}",
            a.nrows(),
            a.ncols()
        )));
    }
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite entries in normal equations".into()));
    }
    let trace = a.trace();
    if trace < ZERO_SIGNAL {
        return Ok((vec![1.0 / t as f64; t], SolveDiagnostics::uniform(true, None)));
    }
    let residual = |x: &DVector<f64>| (a * x - b).norm();

    let condition = condition_estimate(a);
    if condition.is_some_and(|c| c <= MAX_CONDITION) {
        if let Some(x) = a.clone().lu().solve(b) {
            if x.iter().all(|v| v.is_finite()) {
                let r = residual(&x);
                return Ok((
                    x.iter().copied().collect(),
                    SolveDiagnostics {
                        condition,
                        ridge: 0.0,
                        residual: r,
                        fallback: false,
                        zero_signal: false,
                        error: None,
                    },
                ));
            }
        }
    }

    let lambda = ridge_rel * trace / t as f64;
    let reg = a + DMatrix::identity(t, t) * lambda;
    let x = reg
        .clone()
        .cholesky()
        .map(|c| c.solve(b))
        .or_else(|| reg.lu().solve(b))
        .ok_or_else(|| Error::Numeric("ridge system is singular".into()))?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("ridge solution is not finite".into()));
    }
    let r = residual(&x);
    Ok((
        x.iter().copied().collect(),
        SolveDiagnostics {
            condition,
            ridge: lambda,
            residual: r,
            fallback: true,
            zero_signal: false,
            error: None,
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupWeights {
    pub id: String,
    pub alpha: Vec<f64>,
    #[serde(flatten)]
    pub diagnostics: SolveDiagnostics,
}

/// Solved weights for every group of a plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeWeights {
    pub level: Granularity,
    pub normalized: bool,
    pub groups: Vec<GroupWeights>,
}

impl MergeWeights {
    pub fn alpha(&self, id: &str) -> Option<&[f64]> {
        self.groups.iter().find(|g| g.id == id).map(|g| g.alpha.as_slice())
    }

    pub fn any_fallback(&self) -> bool {
        self.groups.iter().any(|g| g.diagnostics.fallback)
    }

    /// Same α for every group of the plan.
    pub fn uniform(plan: &DecompositionPlan, alpha: &[f64]) -> Self {
        Self {
            level: plan.granularity,
            normalized: false,
            groups: plan
                .groups
                .iter()
                .map(|g| GroupWeights {
                    id: g.id.clone(),
                    alpha: alpha.to_vec(),
                    diagnostics: SolveDiagnostics {
                        condition: None,
                        ridge: 0.0,
                        residual: 0.0,
                        fallback: false,
                        zero_signal: false,
                        error: None,
                    },
                })
                .collect(),
        }
    }
}

fn solve_group(id: &str, deltas: &GroupDeltas, normalized: bool) -> Result<(Vec<f64>, SolveDiagnostics)> {
    let gram = compute_gram(id, deltas, normalized)?;
    let (a, b) = assemble_system(&gram);
    solve_alpha(&a, &b, DEFAULT_RIDGE_REL)
}

/// One α per group. Per-group failures fall back to uniform weights and are
/// recorded in the diagnostics rather than aborting.
pub fn solve_plan(plan: &DecompositionPlan, deltas: &DeltaStore, normalized: bool) -> Result<MergeWeights> {
    let groups = plan
        .groups
        .par_iter()
        .map(|g| {
            let gd = deltas.group(&g.id)?;
            let t = gd.n_models();
            let (alpha, diagnostics) = match solve_group(&g.id, gd, normalized) {
                Ok(r) => r,
                Err(e) => {
                    let zero = matches!(e, Error::Degenerate(_));
                    (
                        vec![1.0 / t as f64; t],
                        SolveDiagnostics::uniform(zero, Some(e.to_string())),
                    )
                }
            };
            Ok(GroupWeights {
                id: g.id.clone(),
                alpha,
                diagnostics,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MergeWeights {
        level: plan.granularity,
        normalized,
        groups,
    })
}
