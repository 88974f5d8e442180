//! Trains a two-layer model briefly and prints how the KL (information sent
//! through the latents) is spread over steps and layers.
//!
//! cargo run --release --example kl_profile -- [steps]

use convdraw::analysis::kl_profile;
use convdraw::model::{ConvDraw, Likelihood, ModelConfig};
use convdraw::nn::AdamConfig;
use convdraw::train::{synth, TrainConfig, Trainer};

fn main() -> convdraw::Result<()> {
    let steps: u64 = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(200);
    let data = synth::glyphs(600, 16, 20, 8);
    let (valid, train) = data.split_at(100);
    let cfg = ModelConfig {
        layers: 2,
        timesteps: 6,
        channels: 1,
        height: 16,
        width: 16,
        feature_maps: vec![16, 16],
        latent_maps: vec![4, 4],
        kernel: 3,
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
    let p = kl_profile(trainer.model(), &valid, 0)?;
    println!("  t   layer0   layer1    total");
    for (t, row) in p.kl.iter().enumerate() {
        println!(
            "{t:3} {:8.3} {:8.3} {:8.3}",
            row[0],
            row[1],
            row[0] + row[1]
        );
    }
    println!("total KL {:.3} nats per image", p.total());
    Ok(())
}
