//! Run the reference transformer and read intermediate activations.

use linmerge::fixture::random_archive;
use linmerge::model::{bind_weights, eval_cross_entropy, ModelConfig, TapId, TapSpec};

fn main() -> linmerge::Result<()> {
    let cfg = ModelConfig::new(32, 4, 2, 64, 50, 32);
    let weights = random_archive(&cfg, 0, 0.2);
    let model = bind_weights(&weights, &cfg)?;

    let tokens = [1u32, 7, 3, 3, 42, 9];
    let taps: TapSpec = [TapId::AttnOut(0), TapId::MlpOut(1), TapId::FinalHidden]
        .into_iter()
        .collect();
    let trace = model.forward_with_taps(&tokens, &taps)?;
    for (id, m) in &trace.taps {
        let rms = (m.data().iter().map(|v| v * v).sum::<f32>() / m.data().len() as f32).sqrt();
        println!("{id:<16} {}x{}  rms {rms:.4}", m.rows(), m.cols());
    }
    println!("logits {}x{}", trace.logits.rows(), trace.logits.cols());

    let loss = eval_cross_entropy(&model, &[tokens.to_vec()])?;
    println!(
        "next-token loss {loss:.4} (uniform would be {:.4})",
        (cfg.vocab_size as f64).ln()
    );
    Ok(())
}
