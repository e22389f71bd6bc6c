//! One PASS/FAIL line per acceptance criterion. Exits non-zero if any fails.

use std::time::{Duration, Instant};

use linmerge::cli::{compare_methods, default_fixture};
use linmerge::decompose::{plan_decomposition, Granularity, SubmoduleGroup};
use linmerge::features::{
    apply_group_seq, collect_base_features, compute_delta_outputs, GroupDeltas, GroupParams, SeqInput,
};
use linmerge::fixture::{build_fixture, random_archive, Fixture, FixtureSpec, DEFAULT_INIT_SCALE};
use linmerge::matrix::Matrix;
use linmerge::merge::{
    merge_dare, merge_linear_solve, merge_task_arithmetic, merge_weight_average, task_vectors, MergeMethod,
};
use linmerge::metrics::{
    cosine_merge, merged_deltas, metric_sweep, nls_from_path, non_linearity_score, pooled_deltas, projection_distance,
    AlphaGrid,
};
use linmerge::model::{bind_weights, ModelConfig, TapId, TapSpec};
use linmerge::solver::{assemble_system, compute_gram, solve_alpha, surrogate_objective, DEFAULT_RIDGE_REL};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;
type CheckFn = fn() -> Check;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(elapsed: Duration, limit_s: u64) -> Result<(), String> {
    ensure(
        elapsed.as_secs_f64() < limit_s as f64,
        format!("took {elapsed:.1?}, limit {limit_s}s"),
    )
}

fn random_deltas(rng: &mut ChaCha8Rng, tasks: usize, dim: usize, max_rows: usize) -> GroupDeltas {
    let blocks = (0..tasks)
        .map(|_| {
            let rows = rng.random_range(1..=max_rows);
            (0..tasks)
                .map(|_| {
                    Matrix::new(
                        rows,
                        dim,
                        (0..rows * dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    )
                })
                .collect()
        })
        .collect();
    GroupDeltas { blocks }
}

fn closed_form_optimality() -> Check {
    let start = Instant::now();
    let mut worst_gap = f64::NEG_INFINITY;
    let mut worst_residual = 0f64;
    for seed in 0..50 {
        let d = random_deltas(&mut ChaCha8Rng::seed_from_u64(seed), 2, 8, 32);
        let g = compute_gram("g", &d, false).map_err(|e| e.to_string())?;
        let (a, b) = assemble_system(&g);
        let (alpha, diag) = solve_alpha(&a, &b, DEFAULT_RIDGE_REL).map_err(|e| e.to_string())?;
        let at = surrogate_objective(&g, &alpha);
        let mut best = f64::INFINITY;
        for i in 0..=400 {
            for j in 0..=400 {
                best = best.min(surrogate_objective(
                    &g,
                    &[-2.0 + 0.01 * i as f64, -2.0 + 0.01 * j as f64],
                ));
            }
        }
        worst_gap = worst_gap.max(at - best);
        ensure(
            at <= best + 1e-6,
            format!("seed {seed}: {at} above grid minimum {best}"),
        )?;
        ensure(
            diag.residual <= 1e-8 * (1.0 + b.norm()),
            format!("seed {seed}: residual {}", diag.residual),
        )?;
        worst_residual = worst_residual.max(diag.residual);
    }
    within(start.elapsed(), 10)?;
    Ok(format!(
        "worst objective minus grid minimum {worst_gap:.2e}, worst residual {worst_residual:.1e}, {:.1?}",
        start.elapsed()
    ))
}

fn degenerate_closed_forms() -> Check {
    let solve = |d: &GroupDeltas| {
        let g = compute_gram("g", d, false).unwrap();
        let (a, b) = assemble_system(&g);
        let (alpha, diag) = solve_alpha(&a, &b, DEFAULT_RIDGE_REL).unwrap();
        let obj = surrogate_objective(&g, &alpha);
        (alpha, diag, obj)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let single = random_deltas(&mut rng, 1, 8, 16);
    let (alpha, ..) = solve(&single);
    ensure((alpha[0] - 1.0).abs() <= 1e-8, format!("T=1 gave {alpha:?}"))?;

    let one = random_deltas(&mut rng, 1, 8, 16).blocks[0][0].clone();
    let other = random_deltas(&mut rng, 1, 8, 16).blocks[0][0].clone();
    let identical = GroupDeltas {
        blocks: vec![vec![one.clone(), one], vec![other.clone(), other]],
    };
    let (pair, diag, obj) = solve(&identical);
    ensure(diag.fallback, "identical deltas did not take the ridge path")?;
    ensure(
        pair.iter().all(|a| (a - 0.5).abs() <= 1e-4),
        format!("identical deltas gave {pair:?}"),
    )?;
    ensure(obj.abs() <= 1e-8, format!("objective {obj}"))?;
    Ok(format!(
        "T=1 α={:.10}, identical α=[{:.6}, {:.6}], objective {obj:.1e}",
        alpha[0], pair[0], pair[1]
    ))
}

fn small_spec(tasks: usize, seed: u64) -> FixtureSpec {
    FixtureSpec {
        config: ModelConfig::new(16, 4, 2, 32, 20, 16),
        tasks,
        tau_scale: 0.5,
        dataset_size: 6,
        seq_len: 10,
        seed,
        init_scale: DEFAULT_INIT_SCALE,
        trained: false,
    }
}

fn exact_linearity() -> Check {
    let (mut worst_nls, mut worst_pd, mut worst_cos) = (0f64, 0f64, 1f64);
    for tasks in [2, 3] {
        let s = small_spec(tasks, 10 + tasks as u64);
        let fx = build_fixture(&s).map_err(|e| e.to_string())?;
        let plan = plan_decomposition(&s.config, Granularity::Layer).unwrap();
        let embed = plan.group("embed").unwrap();
        let store = collect_base_features(&fx.base, &fx.datasets, &plan, 4, 1).map_err(|e| e.to_string())?;
        let deltas = compute_delta_outputs(&store, &fx.base, &fx.fine_tuned, &plan).map_err(|e| e.to_string())?;
        let taus = task_vectors(&fx.base, &fx.fine_tuned).unwrap();
        for tau in &taus {
            worst_nls = worst_nls.max(non_linearity_score(&store, &fx.base, tau, embed, 10).unwrap().mean);
        }
        let pooled = pooled_deltas(deltas.group("embed").unwrap());
        for alpha in &AlphaGrid::default_for(tasks).unwrap().vectors {
            let merged = merged_deltas(&store, &fx.base, &taus, embed, alpha).unwrap();
            worst_pd = worst_pd.max(projection_distance(&pooled, alpha, &merged).unwrap());
            worst_cos = worst_cos.min(cosine_merge(&pooled, alpha, &merged).unwrap().mean);
        }
    }
    ensure(worst_nls <= 1e-10, format!("score {worst_nls:e}"))?;
    ensure(worst_pd <= 1e-6, format!("projection distance {worst_pd:e}"))?;
    ensure(worst_cos >= 1.0 - 1e-6, format!("cosine {worst_cos}"))?;

    // the solved embedding weights against a fine grid on the exact objective
    let s = small_spec(2, 21);
    let fx = build_fixture(&s).unwrap();
    let out = merge_linear_solve(
        &fx.base,
        &fx.fine_tuned,
        Granularity::Layer,
        &fx.datasets,
        s.dataset_size,
        0,
        false,
    )
    .map_err(|e| e.to_string())?;
    let alpha = out.weights.alpha("embed").unwrap().to_vec();
    let gap = embed_grid_gap(&fx, &alpha);
    ensure(gap <= 1e-6, format!("grid improves on the solve by {gap:e}"))?;
    Ok(format!(
        "score {worst_nls:.1e}, projection distance {worst_pd:.1e}, cosine {worst_cos:.9}, grid gain {:.1e}",
        gap.max(0.0)
    ))
}

/// How far a step-0.01 grid over [−2, 2]² undercuts `alpha` on the embedding
/// objective, which is an exact quadratic recovered by polarization.
fn embed_grid_gap(fx: &Fixture, alpha: &[f64]) -> f64 {
    let e0 = fx.base.get("embed").unwrap();
    let d = e0.shape()[1];
    let f = |x: f64, y: f64| {
        let mut total = 0.0;
        for (t, ds) in fx.datasets.iter().enumerate() {
            let (mut acc, mut n) = (0.0, 0usize);
            for &tok in ds.sequences.iter().flatten() {
                for k in tok as usize * d..(tok as usize + 1) * d {
                    let b = e0.data()[k] as f64;
                    let tau = |m: usize| fx.fine_tuned[m].get("embed").unwrap().data()[k] as f64 - b;
                    acc += (b + x * tau(0) + y * tau(1) - (b + tau(t))).powi(2);
                }
                n += 1;
            }
            total += acc / n as f64;
        }
        total
    };
    let c = f(0.0, 0.0);
    let (fx1, fy1, fxy, fmx, fmy) = (f(1.0, 0.0), f(0.0, 1.0), f(1.0, 1.0), f(-1.0, 0.0), f(0.0, -1.0));
    let (axx, ayy) = ((fx1 + fmx) / 2.0 - c, (fy1 + fmy) / 2.0 - c);
    let (bx, by) = ((fx1 - fmx) / 2.0, (fy1 - fmy) / 2.0);
    let axy = fxy - c - axx - ayy - bx - by;
    let q = |x: f64, y: f64| axx * x * x + ayy * y * y + axy * x * y + bx * x + by * y + c;
    let mut best = f64::INFINITY;
    for i in 0..=400 {
        for j in 0..=400 {
            best = best.min(q(-2.0 + 0.01 * i as f64, -2.0 + 0.01 * j as f64));
        }
    }
    f(alpha[0], alpha[1]) - best
}

fn baseline_identities() -> Check {
    let mut worst = 0f32;
    for tasks in 1..=3 {
        let fx = build_fixture(&small_spec(tasks, 30 + tasks as u64)).unwrap();
        let wa = merge_weight_average(&fx.base, &fx.fine_tuned).unwrap();
        let ta = merge_task_arithmetic(&fx.base, &fx.fine_tuned, 1.0 / tasks as f64).unwrap();
        for (name, t) in wa.iter() {
            for (x, y) in t.data().iter().zip(ta.get(name).unwrap().data()) {
                worst = worst.max((x - y).abs());
            }
        }
    }
    ensure(worst <= 1e-7, format!("weight averaging differs by {worst:e}"))?;

    let fx = build_fixture(&small_spec(2, 40)).unwrap();
    let ta = merge_task_arithmetic(&fx.base, &fx.fine_tuned, 0.8).unwrap();
    let dare = merge_dare(&fx.base, &fx.fine_tuned, 0.8, 0.0, 5).unwrap();
    for (name, t) in ta.iter() {
        let same = t
            .data()
            .iter()
            .zip(dare.get(name).unwrap().data())
            .all(|(x, y)| x.to_bits() == y.to_bits());
        ensure(same, format!("DARE at p=0 differs on {name}"))?;
    }

    let p = 0.7;
    let fx = build_fixture(&small_spec(1, 41)).unwrap();
    let name = "layers.0.mlp.up_proj";
    let base = fx.base.get(name).unwrap().data();
    let tau: Vec<f64> = fx.fine_tuned[0]
        .get(name)
        .unwrap()
        .data()
        .iter()
        .zip(base)
        .map(|(f, b)| (f - b) as f64)
        .collect();
    let mut sums = vec![0f64; tau.len()];
    let runs = 200;
    for seed in 0..runs {
        let m = merge_dare(&fx.base, &fx.fine_tuned, 1.0, p, seed).unwrap();
        for ((s, v), b) in sums.iter_mut().zip(m.get(name).unwrap().data()).zip(base) {
            *s += (v - b) as f64;
        }
    }
    let mut outside = 0;
    for (s, t) in sums.iter().zip(&tau) {
        let se = t.abs() * (p / (1.0 - p)).sqrt() / (runs as f64).sqrt();
        if (s / runs as f64 - t).abs() > 3.0 * se + 1e-6 {
            outside += 1;
        }
    }
    // 3 standard errors leave about 0.3% of elements outside by chance
    let allowed = (tau.len() as f64 * 0.01).ceil() as usize;
    ensure(
        outside <= allowed,
        format!("{outside} of {} elements beyond 3 SE", tau.len()),
    )?;
    Ok(format!(
        "weight averaging gap {worst:.1e}, DARE p=0 bitwise, {outside}/{} elements beyond 3 SE",
        tau.len()
    ))
}

fn trend_spec(tasks: usize, seed: u64) -> FixtureSpec {
    FixtureSpec {
        config: ModelConfig::new(32, 4, 4, 64, 64, 32),
        tasks,
        tau_scale: 0.5,
        dataset_size: 30,
        seq_len: 16,
        seed,
        init_scale: DEFAULT_INIT_SCALE,
        trained: false,
    }
}

/// Groups inside the transformer blocks.
fn block_groups(level: Granularity, cfg: &ModelConfig) -> Vec<SubmoduleGroup> {
    plan_decomposition(cfg, level)
        .unwrap()
        .groups
        .into_iter()
        .filter(|g| level == Granularity::Model || g.layer.is_some())
        .collect()
}

fn nonlinearity_by_level() -> Check {
    let start = Instant::now();
    let levels = [Granularity::Model, Granularity::Layer, Granularity::AttnMlp];
    let mut means = [0f64; 3];
    for seed in 1..=3 {
        let s = trend_spec(2, seed);
        let fx = build_fixture(&s).unwrap();
        let taus = task_vectors(&fx.base, &fx.fine_tuned).unwrap();
        for (li, &level) in levels.iter().enumerate() {
            let plan = plan_decomposition(&s.config, level).unwrap();
            let store = collect_base_features(&fx.base, &fx.datasets, &plan, 10, seed).map_err(|e| e.to_string())?;
            let (mut sum, mut n) = (0.0, 0);
            for g in block_groups(level, &s.config) {
                for tau in &taus {
                    sum += non_linearity_score(&store, &fx.base, tau, &g, 10)
                        .map_err(|e| e.to_string())?
                        .mean;
                    n += 1;
                }
            }
            means[li] += sum / n as f64 / 3.0;
        }
    }
    let [model, layer, attn_mlp] = means;
    ensure(layer <= 0.5 * model, format!("layer {layer:.4} vs model {model:.4}"))?;
    ensure(
        attn_mlp <= 0.5 * model,
        format!("attn/mlp {attn_mlp:.4} vs model {model:.4}"),
    )?;
    within(start.elapsed(), 300)?;
    Ok(format!(
        "model {model:.4}, layer {layer:.4}, attn/mlp {attn_mlp:.4}, {:.1?}",
        start.elapsed()
    ))
}

fn projection_distance_by_level() -> Check {
    let levels = [Granularity::Model, Granularity::Layer, Granularity::AttnMlp];
    let mut report = Vec::new();
    for tasks in [2, 3] {
        let mut means = [0f64; 3];
        for seed in 1..=3 {
            let s = trend_spec(tasks, seed);
            let fx = build_fixture(&s).unwrap();
            let taus = task_vectors(&fx.base, &fx.fine_tuned).unwrap();
            let grid = AlphaGrid::default_for(tasks).unwrap();
            for (li, &level) in levels.iter().enumerate() {
                let plan = plan_decomposition(&s.config, level).unwrap();
                let store =
                    collect_base_features(&fx.base, &fx.datasets, &plan, 10, seed).map_err(|e| e.to_string())?;
                let deltas =
                    compute_delta_outputs(&store, &fx.base, &fx.fine_tuned, &plan).map_err(|e| e.to_string())?;
                let (mut sum, mut n) = (0.0, 0);
                for g in block_groups(level, &s.config) {
                    let records = metric_sweep(&store, &fx.base, &taus, &g, deltas.group(&g.id).unwrap(), &grid)
                        .map_err(|e| e.to_string())?;
                    let mean = records
                        .iter()
                        .find(|r| r.metric == "projection_distance_grid_mean")
                        .and_then(|r| r.value)
                        .ok_or_else(|| format!("no projection distance for {}", g.id))?;
                    sum += mean;
                    n += 1;
                }
                means[li] += sum / n as f64 / 3.0;
            }
        }
        let [model, layer, attn_mlp] = means;
        ensure(
            layer <= model && attn_mlp <= model,
            format!("T={tasks}: model {model:.4}, layer {layer:.4}, attn/mlp {attn_mlp:.4}"),
        )?;
        report.push(format!(
            "T={tasks}: model {model:.4}, layer {layer:.4}, attn/mlp {attn_mlp:.4}"
        ));
    }
    Ok(report.join("; "))
}

fn toy_score() -> Check {
    // f(θ) = θ² from θ₀ = 0 to θ₀ + τ = 1 in N = 2 steps
    let path: Vec<Matrix> = (0..=2)
        .map(|k| Matrix::new(1, 1, vec![(k as f32 / 2.0).powi(2)]))
        .collect();
    let s = nls_from_path(&path).map_err(|e| e.to_string())?.mean;
    ensure((s - 0.25).abs() <= 1e-12, format!("score {s}"))?;
    Ok(format!("score {s}"))
}

fn per_head_identity() -> Check {
    let cfg = ModelConfig::new(32, 4, 2, 64, 40, 32);
    let archive = random_archive(&cfg, 9, 0.3);
    let model = bind_weights(&archive, &cfg).unwrap();
    let heads = plan_decomposition(&cfg, Granularity::HeadMlp).unwrap();
    let attn = plan_decomposition(&cfg, Granularity::AttnMlp).unwrap();
    let tokens: Vec<u32> = (0..24).map(|i| (i * 7 % 40) as u32).collect();
    let mut worst = 0f32;
    for layer in 0..cfg.n_layers {
        let taps: TapSpec = [TapId::LayerIn(layer)].into_iter().collect();
        let x = model.forward_with_taps(&tokens, &taps).unwrap().taps[&TapId::LayerIn(layer)].clone();
        let g = attn.group(&format!("attn.{layer}")).unwrap();
        let p = GroupParams::extract(g, &cfg, &archive, &archive).unwrap();
        let whole = apply_group_seq(g, &cfg, &p, SeqInput::Hidden(&x)).unwrap();
        let mut sum = Matrix::zeros(whole.rows(), whole.cols());
        for h in 0..cfg.n_heads {
            let g = heads.group(&format!("head.{layer}.{h}")).unwrap();
            let p = GroupParams::extract(g, &cfg, &archive, &archive).unwrap();
            sum = sum.add(&apply_group_seq(g, &cfg, &p, SeqInput::Hidden(&x)).unwrap());
        }
        worst = worst.max(sum.max_abs_diff(&whole));
    }
    ensure(worst <= 1e-5, format!("max difference {worst:e}"))?;
    Ok(format!("max difference {worst:.1e}"))
}

fn end_to_end() -> Check {
    let start = Instant::now();
    let mut report = Vec::new();
    for seed in 1..=3 {
        let mut spec = default_fixture(seed);
        spec.trained = true;
        let fx = build_fixture(&spec).map_err(|e| e.to_string())?;
        let cmp = compare_methods(
            &fx.base,
            &fx.fine_tuned,
            &fx.datasets,
            Granularity::AttnMlp,
            30,
            seed,
            true,
        )
        .map_err(|e| e.to_string())?;
        let solved = cmp.best_mean(MergeMethod::LinearSolve).unwrap();
        let ta = cmp.best_mean(MergeMethod::TaskArithmetic).unwrap();
        ensure(
            solved <= ta * 1.02,
            format!("seed {seed}: solved {solved:.5} vs task arithmetic {ta:.5}"),
        )?;
        report.push(format!("seed {seed}: {solved:.4} vs {ta:.4}"));
    }
    within(start.elapsed(), 600)?;
    Ok(format!("{}, {:.1?}", report.join(", "), start.elapsed()))
}

fn main() {
    let checks: [(&str, CheckFn); 9] = [
        ("closed-form optimality", closed_form_optimality),
        ("degenerate closed forms", degenerate_closed_forms),
        ("exact linearity of the embedding group", exact_linearity),
        ("baseline identities", baseline_identities),
        ("non-linearity falls with granularity", nonlinearity_by_level),
        (
            "projection distance falls with granularity",
            projection_distance_by_level,
        ),
        ("quadratic toy score", toy_score),
        ("per-head decomposition identity", per_head_identity),
        ("end-to-end merge quality", end_to_end),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        match std::panic::catch_unwind(check) {
            Ok(Ok(detail)) => println!("PASS {name}: {detail}"),
            Ok(Err(why)) => {
                failed += 1;
                println!("FAIL {name}: {why}");
            }
            Err(_) => {
                failed += 1;
                println!("FAIL {name}: panicked");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
