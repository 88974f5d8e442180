//! Loss against examples seen for several numbers of recurrent steps, with
//! wall time, written as CSV to stdout.
//!
//! cargo run --release --example depth_benchmark -- [examples]

use convdraw::model::{Likelihood, ModelConfig};
use convdraw::train::{bench_csv, bench_depth, synth, TrainConfig};

fn main() -> convdraw::Result<()> {
    let examples: u64 = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(2048);
    let data = synth::glyphs(1000, 16, 20, 2);
    let base = ModelConfig {
        timesteps: 1,
        channels: 1,
        height: 16,
        width: 16,
        feature_maps: vec![12],
        latent_maps: vec![2],
        kernel: 3,
        likelihood: Likelihood::Bernoulli,
        ..ModelConfig::default()
    };
    let rows = bench_depth::<f32>(
        &base,
        &[2, 4, 8],
        &data,
        &TrainConfig::default(),
        examples,
        0,
    )?;
    print!("{}", bench_csv(&rows));
    Ok(())
}
