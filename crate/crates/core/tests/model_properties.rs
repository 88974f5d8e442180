use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use convdraw::data::ImageBatch;
use convdraw::model::{elbo_loss, gaussian_kl, ConvDraw, Likelihood, ModelConfig, Rollout};
use convdraw::nn::{Shape4, Tensor4};
use convdraw::train::synth;

fn config(layers: usize, likelihood: Likelihood) -> ModelConfig {
    ModelConfig {
        layers,
        timesteps: 4,
        channels: 1,
        height: 12,
        width: 12,
        feature_maps: vec![6; layers],
        latent_maps: vec![2; layers],
        kernel: 3,
        likelihood,
        ..ModelConfig::default()
    }
}

fn images(n: usize) -> ImageBatch<f64> {
    synth::glyphs(n, 12, 3, 17).all(1.0 / 256.0)
}

#[test]
fn posterior_forced_to_prior_leaves_scaled_input_cost() {
    let model = ConvDraw::<f64>::new(config(2, Likelihood::Bernoulli), 1).unwrap();
    let x = images(3);
    let mut ro = Rollout::new(&model, 3, false, 2).unwrap();
    ro.observe(&x.x).unwrap();
    let mut traces: Vec<_> = (0..4).map(|_| ro.inference_step(None).unwrap()).collect();
    let lv = ro.loss(1.0).unwrap();
    let lx: Vec<f64> = ro.value(lv.lx).data().to_vec();
    for tr in &mut traces {
        for layer in &mut tr.layers {
            layer.q = Some(layer.p.clone());
            layer.kl = Some(gaussian_kl(&layer.p, &layer.p).unwrap());
        }
    }
    for beta in [0.2, 0.7, 1.0] {
        let loss = elbo_loss(&traces, &lx, beta).unwrap();
        for (l, x) in loss.iter().zip(&lx) {
            assert_eq!(*l, beta * x);
        }
    }
}

#[test]
fn nothing_kept_at_zero_temperature_ignores_the_input() {
    for layers in [1, 2] {
        let model = ConvDraw::<f32>::new(config(layers, Likelihood::Bernoulli), 3).unwrap();
        let a = synth::glyphs(2, 12, 3, 1).all::<f32>(1.0 / 256.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b = ImageBatch::new(
            Tensor4::uniform(Shape4::new(2, 1, 12, 12), 0.0, 1.0, &mut rng),
            1.0 / 256.0,
        );
        let ra = model.reconstruct_partial(&a, 0, 0.0, 5).unwrap();
        let rb = model.reconstruct_partial(&b, 0, 0.0, 99).unwrap();
        assert_eq!(ra.x.data(), rb.x.data());
        assert_eq!(ra.x.item(0), ra.x.item(1));
    }
}

#[test]
fn checkpoint_round_trip_preserves_losses() {
    let model = ConvDraw::<f32>::new(config(2, Likelihood::DequantizedGaussian), 7).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    model.to_checkpoint(false).write(&path).unwrap();
    let back =
        ConvDraw::<f32>::from_checkpoint(&convdraw::nn::Checkpoint::read(&path).unwrap()).unwrap();
    let x = images(2).x.cast::<f32>();
    let run = |m: &ConvDraw<f32>| {
        let mut ro = Rollout::new(m, 2, false, 8).unwrap();
        ro.observe(&x).unwrap();
        for _ in 0..4 {
            ro.inference_step(None).unwrap();
        }
        let lv = ro.loss(1.0).unwrap();
        ro.value(lv.total).data().to_vec()
    };
    assert_eq!(run(&model), run(&back));
}
