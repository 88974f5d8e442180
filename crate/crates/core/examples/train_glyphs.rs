//! Trains a small single-layer model on procedurally drawn characters and
//! compares its validation bound with a per-pixel Bernoulli baseline.
//!
//! cargo run --release --example train_glyphs -- [steps] [kernel]

use convdraw::analysis::eval_bound;
use convdraw::model::{ConvDraw, Likelihood, ModelConfig};
use convdraw::nn::AdamConfig;
use convdraw::train::{marginal_bernoulli_baseline, synth, TrainConfig, Trainer};

fn main() -> convdraw::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CONVDRAW_LOG", "info")).init();
    let args: Vec<String> = std::env::args().collect();
    let steps: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let kernel: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(5);
    let lr: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(2e-3);

    let data = synth::glyphs(1200, 28, 50, 7);
    let (valid, train) = data.split_at(200);
    let baseline = marginal_bernoulli_baseline(&train, &valid);

    let cfg = ModelConfig {
        timesteps: 8,
        channels: 1,
        height: 28,
        width: 28,
        feature_maps: vec![32],
        latent_maps: vec![4],
        kernel,
        likelihood: Likelihood::Bernoulli,
        ..ModelConfig::default()
    };
    let model = ConvDraw::<f32>::new(cfg, 1)?;
    let tcfg = TrainConfig {
        steps,
        log_every: 25,
        adam: AdamConfig {
            lr,
            ..AdamConfig::default()
        },
        ..TrainConfig::default()
    };
    let start = std::time::Instant::now();
    let mut trainer = Trainer::new(model, tcfg)?;
    trainer.fit(&train, |_, _| Ok(()))?;
    let result = eval_bound(trainer.model(), &valid, 1, 0)?;
    println!("baseline {baseline:.2} nats, model {}", result.summary());
    println!(
        "improvement {:.1}% in {:.0}s",
        100.0 * (1.0 - result.nats / baseline),
        start.elapsed().as_secs_f64()
    );
    Ok(())
}
