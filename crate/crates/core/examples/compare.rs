//! The full baseline grid against the closed-form merge, as a CSV table.

use linmerge::cli::{compare_methods, default_fixture};
use linmerge::decompose::Granularity;
use linmerge::fixture::build_fixture;
use linmerge::merge::MergeMethod;

fn main() -> linmerge::Result<()> {
    let mut spec = default_fixture(2);
    spec.trained = true;
    let fx = build_fixture(&spec)?;
    let cmp = compare_methods(
        &fx.base,
        &fx.fine_tuned,
        &fx.datasets,
        Granularity::AttnMlp,
        30,
        0,
        true,
    )?;
    print!("{}", cmp.to_csv());
    for m in [MergeMethod::TaskArithmetic, MergeMethod::Dare, MergeMethod::LinearSolve] {
        println!("best {m}: {:.4}", cmp.best_mean(m).unwrap());
    }
    Ok(())
}
