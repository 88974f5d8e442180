//! Trains a fixed-posterior-variance model, calibrates its quantization grid
//! and compresses held-out characters at increasing numbers of stored steps.
//! Writes a progression sheet to `progressive_codec.ppm`.
//!
//! cargo run --release --example progressive_codec -- [steps]

use convdraw::analysis::{emit_grid, mse};
use convdraw::codec::{compress, decompress, Bitstream, CodecModel};
use convdraw::data::ImageBatch;
use convdraw::model::{ConvDraw, Likelihood, ModelConfig};
use convdraw::nn::AdamConfig;
use convdraw::nn::Tensor4;
use convdraw::train::{synth, TrainConfig, Trainer};

fn main() -> convdraw::Result<()> {
    let steps: u64 = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(300);
    let data = synth::glyphs(1100, 16, 20, 4);
    let (valid, train) = data.split_at(100);
    let cfg = ModelConfig {
        timesteps: 8,
        channels: 1,
        height: 16,
        width: 16,
        feature_maps: vec![16],
        latent_maps: vec![4],
        kernel: 3,
        likelihood: Likelihood::Bernoulli,
        fixed_posterior_variance: true,
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
    let calib: Vec<usize> = (0..64).collect();
    let cm = CodecModel::calibrate(trainer.into_model(), &train.batch(&calib, 1.0 / 256.0))?;

    let images: ImageBatch<f32> = valid.batch(&(0..8).collect::<Vec<_>>(), 1.0 / 256.0);
    let mut rows = Vec::new();
    println!("t_keep  bytes/image  mse");
    for t_keep in [0, 1, 2, 4, 6, 8] {
        let (mut bytes, mut err) = (0usize, 0.0);
        let mut recs = Vec::new();
        for i in 0..images.len() {
            let img = images.image(i);
            let c = compress(&cm, &img, t_keep, 0.0, 0)?;
            let wire = c.bitstream.to_bytes();
            let out = decompress(&cm, &Bitstream::from_bytes(&wire)?, 0)?;
            assert_eq!(out.x.data(), c.reconstruction.x.data());
            bytes += wire.len();
            err += mse(&img, &out)?[0];
            recs.extend_from_slice(out.x.data());
        }
        let n = images.len();
        println!(
            "{t_keep:6}  {:11.1}  {:.4}",
            bytes as f64 / n as f64,
            err / n as f64
        );
        rows.push(ImageBatch::new(
            Tensor4::new(images.x.shape(), recs)?,
            images.step,
        ));
    }
    rows.push(images);
    emit_grid(&rows, "progressive_codec.ppm")?;
    println!("wrote progressive_codec.ppm");
    Ok(())
}
