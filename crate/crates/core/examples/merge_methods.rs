//! Every merge method on one synthetic fixture, scored per task.

use linmerge::cli::{default_fixture, evaluate_tasks};
use linmerge::decompose::Granularity;
use linmerge::fixture::build_fixture;
use linmerge::merge::{merge_dare, merge_linear_solve, merge_task_arithmetic, merge_weight_average};
use linmerge::model::ModelConfig;

fn main() -> linmerge::Result<()> {
    let mut spec = default_fixture(1);
    spec.trained = true;
    let fx = build_fixture(&spec)?;
    let cfg = ModelConfig::from_archive(&fx.base)?;

    let solved = merge_linear_solve(
        &fx.base,
        &fx.fine_tuned,
        Granularity::AttnMlp,
        &fx.datasets,
        30,
        0,
        true,
    )?;
    for g in solved.weights.groups.iter().take(4) {
        println!("{:<8} alpha {:?}", g.id, g.alpha);
    }

    let merged = [
        ("base", fx.base.clone()),
        ("weight_avg", merge_weight_average(&fx.base, &fx.fine_tuned)?),
        (
            "task_arithmetic 0.5",
            merge_task_arithmetic(&fx.base, &fx.fine_tuned, 0.5)?,
        ),
        ("dare p=0.7 a=0.8", merge_dare(&fx.base, &fx.fine_tuned, 0.8, 0.7, 0)?),
        ("linear_solve", solved.merged),
    ];
    for (name, archive) in &merged {
        let losses: Vec<String> = evaluate_tasks(archive, &cfg, &fx.datasets)?
            .iter()
            .map(|l| format!("{}={:.4}", l.task, l.loss))
            .collect();
        println!("{name:<20} {}", losses.join("  "));
    }
    Ok(())
}
