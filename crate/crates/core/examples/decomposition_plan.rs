//! How a model splits into merge groups at each granularity.

use linmerge::decompose::{plan_decomposition, Granularity};
use linmerge::model::ModelConfig;

fn main() -> linmerge::Result<()> {
    let cfg = ModelConfig::new(32, 4, 2, 64, 64, 32);
    for level in Granularity::ALL {
        let plan = plan_decomposition(&cfg, level)?;
        println!("{level}: {} groups", plan.groups.len());
        for g in &plan.groups {
            let linear = if g.is_parameter_linear() {
                "  (linear in its parameters)"
            } else {
                ""
            };
            println!("  {:<12} {:?} -> {:?}{linear}", g.id, g.input, g.output);
            for name in g.param_names() {
                println!("      {name}");
            }
        }
    }
    let json = serde_json::to_string(&plan_decomposition(&cfg, Granularity::HeadMlp)?).unwrap();
    println!("head/mlp plan serializes to {} bytes of JSON", json.len());
    Ok(())
}
