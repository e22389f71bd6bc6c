//! Non-linearity Score and projection distance, whole model against submodules.
//!
//! `cargo run --release --example linearity_analysis -- [tau_scale]`

use linmerge::decompose::{plan_decomposition, Granularity};
use linmerge::features::{collect_base_features, compute_delta_outputs};
use linmerge::fixture::{build_fixture, FixtureSpec, DEFAULT_INIT_SCALE};
use linmerge::merge::task_vectors;
use linmerge::metrics::{metric_sweep, non_linearity_score, AlphaGrid};
use linmerge::model::ModelConfig;

fn main() -> linmerge::Result<()> {
    let tau_scale = std::env::args().nth(1).map_or(0.5, |s| s.parse().expect("tau_scale"));
    let spec = FixtureSpec {
        config: ModelConfig::new(32, 4, 4, 64, 64, 32),
        tasks: 2,
        tau_scale,
        dataset_size: 30,
        seq_len: 16,
        seed: 1,
        init_scale: DEFAULT_INIT_SCALE,
        trained: false,
    };
    let fx = build_fixture(&spec)?;
    let taus = task_vectors(&fx.base, &fx.fine_tuned)?;
    let grid = AlphaGrid::default_for(spec.tasks)?;

    println!("{:<9} {:<10} {:>10} {:>12}", "level", "group", "nls", "proj dist");
    for level in Granularity::ALL {
        let plan = plan_decomposition(&spec.config, level)?;
        let store = collect_base_features(&fx.base, &fx.datasets, &plan, 10, 0)?;
        let deltas = compute_delta_outputs(&store, &fx.base, &fx.fine_tuned, &plan)?;
        for g in plan
            .groups
            .iter()
            .filter(|g| g.layer.is_some() || level == Granularity::Model)
        {
            let nls = non_linearity_score(&store, &fx.base, &taus[0], g, 10)?;
            let proj = metric_sweep(&store, &fx.base, &taus, g, deltas.group(&g.id)?, &grid)?
                .into_iter()
                .find(|r| r.metric == "projection_distance_grid_mean")
                .and_then(|r| r.value);
            println!(
                "{:<9} {:<10} {:>10.5} {:>12.5}",
                level.to_string(),
                g.id,
                nls.mean,
                proj.unwrap_or(f64::NAN)
            );
        }
    }
    Ok(())
}
