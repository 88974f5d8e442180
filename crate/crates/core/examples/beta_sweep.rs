//! Trains the same small model with input cost scales 0.2 ... 1.0, prints
//! each model's KL and input cost and writes a sample sheet per scale.
//!
//! cargo run --release --example beta_sweep -- [steps]

use convdraw::analysis::{chunk_rows, emit_grid, evaluate};
use convdraw::model::{ConvDraw, Likelihood, ModelConfig};
use convdraw::nn::AdamConfig;
use convdraw::train::{synth, TrainConfig, Trainer};

fn main() -> convdraw::Result<()> {
    let steps: u64 = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(250);
    let data = synth::glyphs(564, 16, 20, 21);
    let (valid, train) = data.split_at(64);
    println!("beta   KL nats   L^x nats");
    for beta in [0.2, 0.4, 0.6, 0.8, 1.0] {
        let cfg = ModelConfig {
            timesteps: 4,
            channels: 1,
            height: 16,
            width: 16,
            feature_maps: vec![8],
            latent_maps: vec![2],
            kernel: 3,
            beta,
            likelihood: Likelihood::Bernoulli,
            ..ModelConfig::default()
        };
        let mut trainer = Trainer::new(
            ConvDraw::<f32>::new(cfg, 0)?,
            TrainConfig {
                steps,
                adam: AdamConfig {
                    lr: 3e-3,
                    ..AdamConfig::default()
                },
                ..TrainConfig::default()
            },
        )?;
        trainer.fit(&train, |_, _| Ok(()))?;
        let r = evaluate(trainer.model(), &valid, 1, 32, 0)?.0;
        println!("{beta:.1}  {:9.3}  {:9.3}", r.kl_nats, r.lx_nats);
        let samples = trainer.model().sample(16, 1.0, 0)?;
        emit_grid(&chunk_rows(&samples, 8), format!("beta_{beta:.1}.ppm"))?;
    }
    Ok(())
}
