//! Linearity diagnostics for a submodule group.
//!
//! * Non-linearity Score: how far the output path along `θ₀ + cτ` deviates
//!   from a straight, uniformly traversed line.
//! * `cosine_merge` / projection distance: how well the output delta of a
//!   merged group matches the same weighted sum of per-model output deltas.
//! * `cosine_base`: mean pairwise cosine between the per-model deltas.
//!
//! A sample is one token position. Samples whose reference delta has
//! (near-)zero norm are skipped and counted.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::archive::TensorArchive;
use crate::decompose::SubmoduleGroup;
use crate::error::{Error, Result};
use crate::features::{combine_group, interpolated_outputs, FeatureStore, GroupDeltas, GroupParams};
use crate::matrix::Matrix;

/// Norms below this are treated as zero.
pub const DEGENERATE_NORM: f64 = 1e-12;

/// Default interpolation resolution.
pub const DEFAULT_N: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearityRecord {
    pub group: String,
    pub metric: String,
    /// `None` when the metric was undefined for this configuration; see `aux["error"]`.
    pub value: Option<f64>,
    pub aux: BTreeMap<String, Value>,
}

impl LinearityRecord {
    pub fn new(group: &str, metric: &str, value: f64) -> Self {
        Self {
            group: group.to_string(),
            metric: metric.to_string(),
            value: Some(value),
            aux: BTreeMap::new(),
        }
    }

    pub fn failed(group: &str, metric: &str, err: &Error) -> Self {
        let mut r = Self::new(group, metric, 0.0);
        r.value = None;
        r.aux.insert("error".into(), Value::String(err.to_string()));
        r
    }

    pub fn with(mut self, key: &str, v: impl Into<Value>) -> Self {
        self.aux.insert(key.to_string(), v.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaGrid {
    pub vectors: Vec<Vec<f64>>,
}

impl AlphaGrid {
    pub fn new(vectors: Vec<Vec<f64>>) -> Result<Self> {
        let t = vectors
            .first()
            .ok_or_else(|| Error::Input("alpha grid is empty".into()))?
            .len();
        if t == 0 || vectors.iter().any(|v| v.len() != t) {
            return Err(Error::Input("alpha grid vectors must share a positive length".into()));
        }
        Ok(Self { vectors })
    }

    /// Cartesian product `levels^tasks`.
    pub fn product(levels: &[f64], tasks: usize) -> Result<Self> {
        let mut vectors: Vec<Vec<f64>> = vec![Vec::new()];
        for _ in 0..tasks {
            vectors = vectors
                .into_iter()
                .flat_map(|v| {
                    levels.iter().map(move |&l| {
                        let mut w = v.clone();
                        w.push(l);
                        w
                    })
                })
                .collect();
        }
        Self::new(vectors)
    }

    /// `{0.2, 0.4, 0.6, 0.8, 1.0}^T` for up to two tasks, `{0.3, 0.5, 0.7}^T` beyond.
    pub fn default_for(tasks: usize) -> Result<Self> {
        if tasks <= 2 {
            Self::product(&[0.2, 0.4, 0.6, 0.8, 1.0], tasks)
        } else {
            Self::product(&[0.3, 0.5, 0.7], tasks)
        }
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

fn norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

fn dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Score of one sample whose outputs along the interpolation path are
/// `points[0..=N]`. `None` if the endpoints coincide.
pub fn nls_sample<P: AsRef<[f32]>>(points: &[P]) -> Option<f64> {
    let n = points.len() - 1;
    let span = dist(points[n].as_ref(), points[0].as_ref());
    if span < DEGENERATE_NORM {
        return None;
    }
    let mut score = 0.0;
    for i in 0..=n {
        for j in 0..=n {
            let ratio = dist(points[i].as_ref(), points[j].as_ref()) / span;
            let ideal = i.abs_diff(j) as f64 / n as f64;
            score += (ratio - ideal).powi(2);
        }
    }
    Some(score)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NlsResult {
    pub mean: f64,
    pub std: f64,
    pub samples: usize,
    pub skipped: usize,
    pub n: usize,
    /// Mean over retained samples of `D(f_i, f_j) / D(f_N, f_0)`.
    pub ratio_matrix: Vec<Vec<f64>>,
}

/// Non-linearity Score from the `N+1` output matrices of an interpolation path.
pub fn nls_from_path(path: &[Matrix]) -> Result<NlsResult> {
    if path.len() < 3 {
        return Err(Error::Input("need N >= 2 interpolation steps".into()));
    }
    let n = path.len() - 1;
    let rows = path[0].rows();
    let mut scores = Vec::with_capacity(rows);
    let mut ratio = vec![vec![0.0; n + 1]; n + 1];
    for r in 0..rows {
        let pts: Vec<&[f32]> = path.iter().map(|m| m.row(r)).collect();
        if let Some(s) = nls_sample(&pts) {
            scores.push(s);
            let span = dist(pts[n], pts[0]);
            for i in 0..=n {
                for j in 0..=n {
                    ratio[i][j] += dist(pts[i], pts[j]) / span;
                }
            }
        }
    }
    if scores.is_empty() {
        return Err(Error::Degenerate("every sample has identical endpoint outputs".into()));
    }
    let k = scores.len() as f64;
    ratio.iter_mut().flatten().for_each(|v| *v /= k);
    let (mean, std) = mean_std(&scores);
    Ok(NlsResult {
        mean,
        std,
        samples: scores.len(),
        skipped: rows - scores.len(),
        n,
        ratio_matrix: ratio,
    })
}

pub(crate) fn mean_std(xs: &[f64]) -> (f64, f64) {
    let k = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / k;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / k;
    (mean, var.sqrt())
}

/// Non-linearity Score of `group` along `θ₀ + (k/N)τ`, `k = 0..=N`, on the stored inputs.
pub fn non_linearity_score(
    store: &FeatureStore,
    base: &TensorArchive,
    tau: &TensorArchive,
    group: &SubmoduleGroup,
    n: usize,
) -> Result<NlsResult> {
    if n < 2 {
        return Err(Error::Input("N must be at least 2".into()));
    }
    let coeffs: Vec<f64> = (0..=n).map(|k| k as f64 / n as f64).collect();
    let path = interpolated_outputs(store, base, tau, group, &coeffs)?;
    nls_from_path(&path)
}

/// `Σ_t α_t Δf_t`, row by row.
pub fn weighted_sum(deltas: &[Matrix], alpha: &[f64]) -> Result<Matrix> {
    if deltas.len() != alpha.len() || deltas.is_empty() {
        return Err(Error::Input(format!(
            "{} delta sets for {} coefficients",
            deltas.len(),
            alpha.len()
        )));
    }
    let (rows, cols) = (deltas[0].rows(), deltas[0].cols());
    if deltas.iter().any(|d| d.rows() != rows || d.cols() != cols) {
        return Err(Error::Input("delta sets differ in shape".into()));
    }
    let mut acc = vec![0f64; rows * cols];
    for (d, &a) in deltas.iter().zip(alpha) {
        for (s, &v) in acc.iter_mut().zip(d.data()) {
            *s += a * v as f64;
        }
    }
    Ok(Matrix::new(rows, cols, acc.into_iter().map(|v| v as f32).collect()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosineResult {
    pub per_row: Vec<f64>,
    pub mean: f64,
    pub skipped: usize,
}

fn check_rows(target: &Matrix, merged: &Matrix) -> Result<()> {
    if target.rows() != merged.rows() || target.cols() != merged.cols() {
        return Err(Error::Input(format!(
            "merged deltas {}x{} vs reference {}x{}",
            merged.rows(),
            merged.cols(),
            target.rows(),
            target.cols()
        )));
    }
    Ok(())
}

/// Row-wise cosine between merged deltas and `Σ_t α_t Δf_t`.
pub fn cosine_merge(deltas: &[Matrix], alpha: &[f64], merged: &Matrix) -> Result<CosineResult> {
    let target = weighted_sum(deltas, alpha)?;
    check_rows(&target, merged)?;
    let mut per_row = Vec::new();
    for r in 0..target.rows() {
        let (a, b) = (merged.row(r), target.row(r));
        let (na, nb) = (norm(a), norm(b));
        if na < DEGENERATE_NORM || nb < DEGENERATE_NORM {
            continue;
        }
        let d: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
        per_row.push((d / (na * nb)).clamp(-1.0, 1.0));
    }
    if per_row.is_empty() {
        return Err(Error::Degenerate(
            "all merged/reference delta rows have zero norm".into(),
        ));
    }
    let mean = per_row.iter().sum::<f64>() / per_row.len() as f64;
    Ok(CosineResult {
        skipped: target.rows() - per_row.len(),
        per_row,
        mean,
    })
}

/// Mean over samples of the mean cosine over unordered model pairs.
pub fn cosine_base(deltas: &[Matrix]) -> Result<f64> {
    let t = deltas.len();
    if t < 2 {
        return Err(Error::Input("cosine_base needs at least two models".into()));
    }
    let rows = deltas[0].rows();
    let mut per_row = Vec::new();
    'rows: for r in 0..rows {
        let norms: Vec<f64> = deltas.iter().map(|d| norm(d.row(r))).collect();
        if norms.iter().any(|&n| n < DEGENERATE_NORM) {
            continue 'rows;
        }
        let mut sum = 0.0;
        for i in 0..t {
            for j in i + 1..t {
                let d: f64 = deltas[i]
                    .row(r)
                    .iter()
                    .zip(deltas[j].row(r))
                    .map(|(&x, &y)| x as f64 * y as f64)
                    .sum();
                sum += d / (norms[i] * norms[j]);
            }
        }
        per_row.push(2.0 * sum / (t * (t - 1)) as f64);
    }
    if per_row.is_empty() {
        return Err(Error::Degenerate("all rows have a zero-norm delta".into()));
    }
    Ok(per_row.iter().sum::<f64>() / per_row.len() as f64)
}

/// `| 1 − mean_x ‖Δf_merged‖·cos / ‖Σ α Δf‖ |`.
pub fn projection_distance(deltas: &[Matrix], alpha: &[f64], merged: &Matrix) -> Result<f64> {
    let target = weighted_sum(deltas, alpha)?;
    check_rows(&target, merged)?;
    let mut ratios = Vec::new();
    for r in 0..target.rows() {
        let (a, b) = (merged.row(r), target.row(r));
        let (na, nb) = (norm(a), norm(b));
        if na < DEGENERATE_NORM || nb < DEGENERATE_NORM {
            continue;
        }
        let d: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
        // ‖a‖·cos(a,b)/‖b‖ = a·b / ‖b‖²
        ratios.push(d / (nb * nb));
    }
    if ratios.is_empty() {
        return Err(Error::Degenerate(
            "all merged/reference delta rows have zero norm".into(),
        ));
    }
    Ok((1.0 - ratios.iter().sum::<f64>() / ratios.len() as f64).abs())
}

/// Per-model deltas of a group with all data tasks' rows stacked.
pub fn pooled_deltas(gd: &GroupDeltas) -> Vec<Matrix> {
    (0..gd.n_models())
        .map(|m| Matrix::vstack(gd.blocks.iter().map(|row| &row[m])))
        .collect()
}

/// Output deltas of the group merged with coefficients `alpha`, stacked over tasks.
pub fn merged_deltas(
    store: &FeatureStore,
    base: &TensorArchive,
    taus: &[TensorArchive],
    group: &SubmoduleGroup,
    alpha: &[f64],
) -> Result<Matrix> {
    let merged = combine_group(base, taus, alpha, group)?;
    let params = GroupParams::extract(group, &store.config, &merged, base)?;
    Ok(Matrix::vstack(&store.evaluate_deltas(group, &params)?))
}

/// `cosine_merge` and projection distance for every α in the grid, plus grid means.
pub fn metric_sweep(
    store: &FeatureStore,
    base: &TensorArchive,
    taus: &[TensorArchive],
    group: &SubmoduleGroup,
    deltas: &GroupDeltas,
    grid: &AlphaGrid,
) -> Result<Vec<LinearityRecord>> {
    if grid.is_empty() {
        return Err(Error::Input("alpha grid is empty".into()));
    }
    let pooled = pooled_deltas(deltas);
    let per_alpha: Vec<(LinearityRecord, LinearityRecord)> = grid
        .vectors
        .par_iter()
        .map(|alpha| {
            let tag = |r: LinearityRecord| r.with("alpha", json!(alpha));
            let merged = match merged_deltas(store, base, taus, group, alpha) {
                Ok(m) => m,
                Err(e) => {
                    return (
                        tag(LinearityRecord::failed(&group.id, "cosine_merge", &e)),
                        tag(LinearityRecord::failed(&group.id, "projection_distance", &e)),
                    )
                }
            };
            let cos = match cosine_merge(&pooled, alpha, &merged) {
                Ok(c) => LinearityRecord::new(&group.id, "cosine_merge", c.mean)
                    .with("samples", c.per_row.len())
                    .with("skipped", c.skipped),
                Err(e) => LinearityRecord::failed(&group.id, "cosine_merge", &e),
            };
            let proj = match projection_distance(&pooled, alpha, &merged) {
                Ok(p) => LinearityRecord::new(&group.id, "projection_distance", p),
                Err(e) => LinearityRecord::failed(&group.id, "projection_distance", &e),
            };
            (tag(cos), tag(proj))
        })
        .collect();

    let mut out = Vec::with_capacity(2 * per_alpha.len() + 2);
    let (mut cos_vals, mut proj_vals) = (Vec::new(), Vec::new());
    for (c, p) in per_alpha {
        cos_vals.extend(c.value);
        proj_vals.extend(p.value);
        out.push(c);
        out.push(p);
    }
    for (metric, vals) in [
        ("cosine_merge_grid_mean", cos_vals),
        ("projection_distance_grid_mean", proj_vals),
    ] {
        if vals.is_empty() {
            out.push(LinearityRecord::failed(
                &group.id,
                metric,
                &Error::Degenerate("no alpha configuration produced a value".into()),
            ));
        } else {
            let (m, s) = mean_std(&vals);
            out.push(
                LinearityRecord::new(&group.id, metric, m)
                    .with("std", s)
                    .with("configs", vals.len()),
            );
        }
    }
    Ok(out)
}
