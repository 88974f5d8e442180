use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{bits_per_dim, ConvDraw, Likelihood, Rollout};
use crate::nn::Real;
use crate::train::{binarize, dequantize, Binarization, Dataset, DatasetFormat};

/// Variational bound (`beta = 1`) averaged over a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub dataset: String,
    /// Mean bound in nats per image (an upper bound on the NLL).
    pub nats: f64,
    pub bits_per_dim: f64,
    pub lx_nats: f64,
    pub kl_nats: f64,
    /// Standard error of `nats` across images and noise draws.
    pub std_err: f64,
    pub images: usize,
    pub noise_draws: usize,
    /// Always 1: the plain bound, no importance weighting.
    pub importance_samples: usize,
}

impl EvalResult {
    pub fn summary(&self) -> String {
        format!(
            "{}: < {:.4} nats/image (± {:.4}), < {:.5} bits/dim; L^x {:.4}, KL {:.4} over {} images x {} draws",
            self.dataset,
            self.nats,
            self.std_err,
            self.bits_per_dim,
            self.lx_nats,
            self.kl_nats,
            self.images,
            self.noise_draws
        )
    }
}

/// Mean KL per timestep and layer.
#[derive(Clone, Debug, PartialEq)]
pub struct KlProfile {
    /// `kl[t][layer]` in nats per image.
    pub kl: Vec<Vec<f64>>,
}

impl KlProfile {
    pub fn timesteps(&self) -> usize {
        self.kl.len()
    }

    pub fn layers(&self) -> usize {
        self.kl.first().map_or(0, |r| r.len())
    }

    /// Sum over layers for each timestep.
    pub fn row_totals(&self) -> Vec<f64> {
        self.kl.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn total(&self) -> f64 {
        self.row_totals().iter().sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,layer,kl_nats\n");
        for (t, row) in self.kl.iter().enumerate() {
            for (l, v) in row.iter().enumerate() {
                let _ = writeln!(s, "{t},{l},{v:?}");
            }
        }
        s
    }
}

/// Shared pass behind [`eval_bound`] and [`kl_profile`].
pub fn evaluate<R: Real>(
    model: &ConvDraw<R>,
    data: &Dataset,
    noise_draws: usize,
    batch_size: usize,
    seed: u64,
) -> Result<(EvalResult, KlProfile)> {
    let cfg = model.config();
    if data.dims() != (cfg.channels, cfg.height, cfg.width) {
        return Err(Error::Dataset(format!(
            "dataset images are {:?}, model expects {}x{}x{}",
            data.dims(),
            cfg.channels,
            cfg.height,
            cfg.width
        )));
    }
    if data.is_empty() || noise_draws == 0 {
        return Err(Error::Contract(
            "evaluation needs at least one image and one noise draw".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kl = vec![vec![0.0; cfg.layers]; cfg.timesteps];
    let (mut sum, mut sum_sq, mut lx_sum, mut kl_sum) = (0.0, 0.0, 0.0, 0.0);
    let idx: Vec<usize> = (0..data.len()).collect();
    for _ in 0..noise_draws {
        for chunk in idx.chunks(batch_size.max(1)) {
            let raw = data.batch::<R>(chunk, cfg.quant_step);
            let x = match cfg.likelihood {
                Likelihood::Bernoulli if data.format() == DatasetFormat::Binarized => {
                    binarize(&raw, Binarization::Dynamic, &mut rng)
                }
                Likelihood::Bernoulli => raw,
                Likelihood::DequantizedGaussian if cfg.binned_gaussian => raw,
                Likelihood::DequantizedGaussian => dequantize(&raw, cfg.quant_step, rng.gen()),
            };
            let mut ro = Rollout::new(model, x.len(), false, rng.gen())?;
            ro.observe(&x.x)?;
            // per-image KL accumulated in f64 from the traces, so the bound
            // and the profile share one set of numbers
            let mut item_kl = vec![0.0; x.len()];
            for kl_t in kl.iter_mut().take(cfg.timesteps) {
                let tr = ro.inference_step(None)?;
                for (l, row) in kl_t.iter_mut().enumerate() {
                    let per = tr.kl_per_item(l).expect("inference step");
                    *row += per.iter().sum::<f64>();
                    item_kl.iter_mut().zip(&per).for_each(|(a, b)| *a += b);
                }
            }
            let lv = ro.loss(1.0)?;
            for (i, &k) in item_kl.iter().enumerate() {
                let lx = ro.value(lv.lx).data()[i].as_f64();
                let total = lx + k;
                sum += total;
                sum_sq += total * total;
                lx_sum += lx;
                kl_sum += k;
            }
        }
    }
    let count = (data.len() * noise_draws) as f64;
    kl.iter_mut().flatten().for_each(|v| *v /= count);
    let mean = sum / count;
    let var = (sum_sq / count - mean * mean).max(0.0);
    let dims = cfg.input_dims();
    let result = EvalResult {
        dataset: String::new(),
        nats: mean,
        bits_per_dim: bits_per_dim(mean, dims),
        lx_nats: lx_sum / count,
        kl_nats: kl_sum / count,
        std_err: (var / count).sqrt(),
        images: data.len(),
        noise_draws,
        importance_samples: 1,
    };
    Ok((result, KlProfile { kl }))
}

pub fn eval_bound<R: Real>(
    model: &ConvDraw<R>,
    data: &Dataset,
    noise_draws: usize,
    seed: u64,
) -> Result<EvalResult> {
    Ok(evaluate(model, data, noise_draws, 32, seed)?.0)
}

pub fn kl_profile<R: Real>(model: &ConvDraw<R>, data: &Dataset, seed: u64) -> Result<KlProfile> {
    Ok(evaluate(model, data, 1, 32, seed)?.1)
}
