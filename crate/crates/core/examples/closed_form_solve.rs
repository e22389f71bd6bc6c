//! Solve merging weights for hand-made output deltas.
//!
//! Each merged output has to serve both tasks, so with symmetric deltas the
//! weights land at one half each. The leftover objective is the part no
//! single merged model can fit.

use linmerge::features::GroupDeltas;
use linmerge::matrix::Matrix;
use linmerge::solver::{assemble_system, compute_gram, solve_alpha, surrogate_objective, DEFAULT_RIDGE_REL};

fn main() -> linmerge::Result<()> {
    let d0 = Matrix::new(2, 3, vec![1.0, 0.0, 0.5, 1.0, 0.0, 0.5]);
    let d1 = Matrix::new(2, 3, vec![0.0, 1.0, 0.5, 0.0, 1.0, 0.5]);
    // blocks[a][b]: model b's output delta on task a's inputs
    let deltas = GroupDeltas {
        blocks: vec![vec![d0.clone(), d1.clone()], vec![d0, d1]],
    };
    for normalized in [false, true] {
        let gram = compute_gram("demo", &deltas, normalized)?;
        let (a, b) = assemble_system(&gram);
        let (alpha, diag) = solve_alpha(&a, &b, DEFAULT_RIDGE_REL)?;
        println!(
            "normalized={normalized}: alpha = [{:.4}, {:.4}], objective {:.4}, condition {:?}",
            alpha[0],
            alpha[1],
            surrogate_objective(&gram, &alpha),
            diag.condition
        );
    }
    Ok(())
}
