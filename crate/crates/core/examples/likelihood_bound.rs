//! Trains a small model with the dequantized Gaussian likelihood on colour
//! blobs and reports its bound in bits/dim next to the 8 bits/dim of a
//! uniform model.
//!
//! cargo run --release --example likelihood_bound -- [steps]

use convdraw::analysis::eval_bound;
use convdraw::model::{ConvDraw, Likelihood, ModelConfig};
use convdraw::nn::AdamConfig;
use convdraw::train::{synth, TrainConfig, Trainer};

fn main() -> convdraw::Result<()> {
    let steps: u64 = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(200);
    let data = synth::color_blobs(600, 16, 3);
    let (valid, train) = data.split_at(100);
    let cfg = ModelConfig {
        timesteps: 6,
        channels: 3,
        height: 16,
        width: 16,
        feature_maps: vec![24],
        latent_maps: vec![4],
        kernel: 3,
        likelihood: Likelihood::DequantizedGaussian,
        ..ModelConfig::default()
    };
    let before = eval_bound(&ConvDraw::<f32>::new(cfg.clone(), 0)?, &valid, 1, 0)?;
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
    let after = eval_bound(trainer.model(), &valid, 2, 0)?;
    println!("uniform model      8.00000 bits/dim");
    println!("untrained   < {:.5} bits/dim", before.bits_per_dim);
    println!(
        "after {steps:4} steps < {:.5} bits/dim (± {:.5})",
        after.bits_per_dim,
        after.std_err / (768.0 * std::f64::consts::LN_2)
    );
    println!("{}", after.summary());
    Ok(())
}
