use std::fmt::Write as _;

use sha2::{Digest, Sha256};

use crate::codec::bitstream::{hex, Bitstream, VERSION};
use crate::codec::coder::{Pmf, RangeDecoder, RangeEncoder};
use crate::codec::quant::{bin_pmf, quantize_latent, QuantGrid, MAX_SYMBOLS};
use crate::data::ImageBatch;
use crate::error::{Error, Result};
use crate::model::{ConvDraw, LatentChoice, LatentRequest, Rollout, LOGVAR_LIMIT};
use crate::nn::{Checkpoint, CheckpointEntry, Real, Tensor4};

/// Prior support, in standard deviations, covered by calibrated grids.
const PRIOR_SPAN: f64 = 8.0;
/// Widest symmetric bound usable before calibration.
const WIDE: i32 = (MAX_SYMBOLS as i32 - 2) / 2;

/// Called with `(t, layer, latent)` once a layer is resolved.
type LayerHook<'a, R> = dyn FnMut(usize, usize, Option<&Tensor4<R>>) + 'a;

/// A trained model together with its per-layer quantization grids.
#[derive(Clone, Debug)]
pub struct CodecModel<R: Real> {
    model: ConvDraw<R>,
    grids: Vec<QuantGrid>,
}

/// Bin widths `sigma_q` per layer and channel.
fn bin_widths<R: Real>(model: &ConvDraw<R>) -> Result<Vec<Vec<f64>>> {
    let cfg = model.config();
    if !cfg.fixed_posterior_variance {
        return Err(Error::Contract(
            "the codec needs a model trained with fixed_posterior_variance = true".into(),
        ));
    }
    (0..cfg.layers)
        .map(|l| {
            let name = format!("l{l}.q.logvar");
            let id = model
                .params()
                .id(&name)
                .ok_or_else(|| Error::Format(format!("model lacks `{name}`")))?;
            Ok(model
                .params()
                .value(id)
                .data()
                .iter()
                .map(|v| (0.5 * v.as_f64().clamp(-LOGVAR_LIMIT, LOGVAR_LIMIT)).exp())
                .collect())
        })
        .collect()
}

fn grid_entry(name: String, v: &[i32]) -> CheckpointEntry {
    CheckpointEntry {
        name,
        dims: vec![v.len()],
        data: v.iter().map(|&k| k as f32).collect(),
    }
}

pub fn has_codec_grids(ckpt: &Checkpoint) -> bool {
    ckpt.entry("codec.l0.kmin").is_some()
}

impl<R: Real> CodecModel<R> {
    pub fn new(model: ConvDraw<R>, bounds: Vec<(Vec<i32>, Vec<i32>)>) -> Result<Self> {
        let widths = bin_widths(&model)?;
        if bounds.len() != widths.len() {
            return Err(Error::Format(format!(
                "{} quantization grids for a {}-layer model",
                bounds.len(),
                widths.len()
            )));
        }
        let grids: Vec<QuantGrid> = widths
            .into_iter()
            .zip(bounds)
            .map(|(delta, (k_min, k_max))| QuantGrid {
                delta,
                k_min,
                k_max,
            })
            .collect();
        for g in &grids {
            g.validate()?;
        }
        Ok(Self { model, grids })
    }

    /// Derives symbol bounds from quantized rollouts of `images`: each
    /// channel covers the prior means plus `8 sigma_p` and every symbol the
    /// calibration images produced.
    pub fn calibrate(model: ConvDraw<R>, images: &ImageBatch<R>) -> Result<Self> {
        let cfg = model.config().clone();
        let wide: Vec<_> = cfg
            .latent_maps
            .iter()
            .map(|&c| (vec![-WIDE; c], vec![WIDE; c]))
            .collect();
        let probe = Self::new(model, wide)?;
        let mut lo: Vec<Vec<f64>> = cfg.latent_maps.iter().map(|&c| vec![0.0; c]).collect();
        let mut hi = lo.clone();
        for i in 0..images.len() {
            let x = images.x.batch_slice(i, 1);
            let mut on_unit = |u: Unit| -> Result<i32> {
                let g = &probe.grids[u.layer];
                let d = g.delta[u.channel];
                let (k, _) = quantize_latent(
                    u.mu_q.expect("encoding"),
                    d,
                    g.k_min[u.channel],
                    g.k_max[u.channel],
                );
                let a = &mut lo[u.layer][u.channel];
                *a = a.min(k as f64).min((u.mu_p - PRIOR_SPAN * u.sigma_p) / d);
                let b = &mut hi[u.layer][u.channel];
                *b = b.max(k as f64).max((u.mu_p + PRIOR_SPAN * u.sigma_p) / d);
                Ok(k)
            };
            probe.drive(Some(&x), cfg.timesteps, 0, &mut on_unit, &mut |_, _, _| {})?;
        }
        let bounds = lo
            .iter()
            .zip(&hi)
            .map(|(lo, hi)| {
                lo.iter()
                    .zip(hi)
                    .map(|(&a, &b)| {
                        let a = (a.floor() as i64).clamp(-(WIDE as i64), WIDE as i64) as i32;
                        let b = (b.ceil() as i64).clamp(-(WIDE as i64), WIDE as i64) as i32;
                        (a, b)
                    })
                    .unzip()
            })
            .collect();
        Self::new(probe.model, bounds)
    }

    /// Loads a model whose checkpoint carries `codec.l{l}.kmin` / `kmax`.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let model = ConvDraw::from_checkpoint(ckpt)?;
        let bounds = (0..model.config().layers)
            .map(|l| {
                let get = |what: &str| -> Result<Vec<i32>> {
                    let name = format!("codec.l{l}.{what}");
                    let e = ckpt.entry(&name).ok_or_else(|| {
                        Error::Format(format!(
                            "checkpoint lacks `{name}`; the model has not been calibrated"
                        ))
                    })?;
                    Ok(e.data.iter().map(|&v| v as i32).collect())
                };
                Ok((get("kmin")?, get("kmax")?))
            })
            .collect::<Result<_>>()?;
        Self::new(model, bounds)
    }

    pub fn to_checkpoint(&self, with_optimizer: bool) -> Checkpoint {
        let mut ckpt = self.model.to_checkpoint(with_optimizer);
        for (l, g) in self.grids.iter().enumerate() {
            ckpt.entries
                .push(grid_entry(format!("codec.l{l}.kmin"), &g.k_min));
            ckpt.entries
                .push(grid_entry(format!("codec.l{l}.kmax"), &g.k_max));
        }
        ckpt
    }

    pub fn model(&self) -> &ConvDraw<R> {
        &self.model
    }

    pub fn grids(&self) -> &[QuantGrid] {
        &self.grids
    }

    /// First 8 bytes of SHA-256 over the configuration, the precision, every
    /// parameter (as f32) and the grid bounds.
    pub fn hash(&self) -> [u8; 8] {
        let mut h = Sha256::new();
        h.update(self.model.config().to_text().as_bytes());
        h.update(R::NAME.as_bytes());
        let p = self.model.params();
        for id in p.ids() {
            h.update(p.name(id).as_bytes());
            for v in p.value(id).data() {
                h.update((v.as_f64() as f32).to_le_bytes());
            }
        }
        for g in &self.grids {
            for (a, b) in g.k_min.iter().zip(&g.k_max) {
                h.update(a.to_le_bytes());
                h.update(b.to_le_bytes());
            }
        }
        let mut out = [0u8; 8];
        out.copy_from_slice(&h.finalize()[..8]);
        out
    }

    /// Runs `steps` quantized steps. Every latent unit is resolved by
    /// `on_unit` in a fixed order (layers top-down, then tensor order) and
    /// replaced by `k * delta`. With `x`, the encoder runs and units see
    /// their posterior mean.
    fn drive<'m>(
        &'m self,
        x: Option<&Tensor4<R>>,
        steps: usize,
        seed: u64,
        on_unit: &mut dyn FnMut(Unit) -> Result<i32>,
        on_layer: &mut LayerHook<'_, R>,
    ) -> Result<Rollout<'m, R>> {
        let mut ro = Rollout::new(&self.model, 1, false, seed)?;
        if let Some(x) = x {
            ro.observe(x)?;
        }
        for _ in 0..steps {
            let mut policy = |req: LatentRequest<'_, R>| -> Result<LatentChoice<R>> {
                let g = &self.grids[req.layer];
                let shape = req.p.mu.shape();
                let plane = shape.h * shape.w;
                let mut z = Tensor4::zeros(shape);
                let (mu_p, lv_p) = (req.p.mu.data(), req.p.log_var.data());
                let mu_q = req.q.map(|q| q.mu.data());
                for (i, zi) in z.data_mut().iter_mut().enumerate() {
                    let channel = (i / plane) % shape.c;
                    let k = on_unit(Unit {
                        t: req.t,
                        layer: req.layer,
                        channel,
                        mu_q: mu_q.map(|m| m[i].as_f64()),
                        mu_p: mu_p[i].as_f64(),
                        sigma_p: (0.5 * lv_p[i].as_f64()).exp(),
                    })?;
                    *zi = R::of(k as f64 * g.delta[channel]);
                }
                Ok(LatentChoice::Value(z))
            };
            let trace = ro.step_with(x.is_some(), &mut policy)?;
            for (l, lt) in trace.layers.iter().enumerate() {
                on_layer(trace.t, l, lt.kl.as_ref());
            }
        }
        Ok(ro)
    }

    fn check_image(&self, image: &ImageBatch<R>) -> Result<()> {
        let cfg = self.model.config();
        let want = crate::nn::Shape4::new(1, cfg.channels, cfg.height, cfg.width);
        image.x.expect_shape("compress", want)
    }
}

/// One latent unit as seen by the coding loop.
#[derive(Clone, Copy, Debug)]
struct Unit {
    t: usize,
    layer: usize,
    channel: usize,
    mu_q: Option<f64>,
    mu_p: f64,
    sigma_p: f64,
}

/// Rate of one stored timestep and layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RateRow {
    pub t: usize,
    pub layer: usize,
    /// `-log2` of the coded symbol probabilities.
    pub coded_bits: f64,
    /// `KL(q || p) / ln 2` of the same step on the quantized trajectory.
    pub kl_bits: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RateReport {
    pub rows: Vec<RateRow>,
    /// Actual payload size.
    pub payload_bits: u64,
    pub header_bits: u64,
    /// Sum of `coded_bits`.
    pub ideal_bits: f64,
    /// Bits-back rate: total KL in bits.
    pub kl_bits: f64,
    pub dims: usize,
    pub symbols: usize,
    /// Units whose quantized mean fell outside the grid.
    pub clamped: usize,
}

impl RateReport {
    pub fn bits_per_dim(&self) -> f64 {
        self.payload_bits as f64 / self.dims as f64
    }

    /// Coded and KL bits summed over layers, per stored step.
    pub fn per_step(&self) -> Vec<(f64, f64)> {
        let steps = self.rows.iter().map(|r| r.t + 1).max().unwrap_or(0);
        let mut out = vec![(0.0, 0.0); steps];
        for r in &self.rows {
            out[r.t].0 += r.coded_bits;
            out[r.t].1 += r.kl_bits;
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,layer,coded_bits,kl_bits\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{:?},{:?}", r.t, r.layer, r.coded_bits, r.kl_bits);
        }
        s
    }

    pub fn summary(&self) -> String {
        format!(
            "{} symbols, payload {} bits ({:.4} bits/dim), ideal {:.1} bits, bits-back {:.1} bits, {} clamped",
            self.symbols,
            self.payload_bits,
            self.bits_per_dim(),
            self.ideal_bits,
            self.kl_bits,
            self.clamped
        )
    }
}

pub struct Compressed<R> {
    pub bitstream: Bitstream,
    /// What the decoder will reconstruct for the same seed.
    pub reconstruction: ImageBatch<R>,
    pub report: RateReport,
}

fn unit_pmf(g: &QuantGrid, u: &Unit) -> Result<Pmf> {
    let c = u.channel;
    Pmf::from_freqs(&bin_pmf(
        u.mu_p, u.sigma_p, g.delta[c], g.k_min[c], g.k_max[c],
    )?)
}

/// Encodes the first `t_keep` steps of one image's latents; the remaining
/// steps are left to the prior at temperature `lambda`.
pub fn compress<R: Real>(
    cm: &CodecModel<R>,
    image: &ImageBatch<R>,
    t_keep: usize,
    lambda: f64,
    seed: u64,
) -> Result<Compressed<R>> {
    cm.check_image(image)?;
    let cfg = cm.model.config();
    if t_keep > cfg.timesteps {
        return Err(Error::Contract(format!(
            "t_keep {t_keep} exceeds {} timesteps",
            cfg.timesteps
        )));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Contract(format!(
            "temperature {lambda} outside [0, 1]"
        )));
    }
    let mut enc = RangeEncoder::new();
    let mut coded = vec![vec![0.0; cfg.layers]; t_keep];
    let mut kl = vec![vec![0.0; cfg.layers]; t_keep];
    let (mut symbols, mut clamped) = (0usize, 0usize);
    let mut on_unit = |u: Unit| -> Result<i32> {
        let g = &cm.grids[u.layer];
        let c = u.channel;
        let (k, hit) = quantize_latent(
            u.mu_q.expect("encoding"),
            g.delta[c],
            g.k_min[c],
            g.k_max[c],
        );
        let pmf = unit_pmf(g, &u)?;
        let s = (k - g.k_min[c]) as usize;
        enc.encode(&pmf, s)?;
        coded[u.t][u.layer] += pmf.cost_bits(s);
        symbols += 1;
        clamped += hit as usize;
        Ok(k)
    };
    let mut on_layer = |t: usize, l: usize, k: Option<&Tensor4<R>>| {
        kl[t][l] = k.map_or(0.0, |k| k.sum().as_f64()) / std::f64::consts::LN_2;
    };
    let mut ro = cm.drive(Some(&image.x), t_keep, seed, &mut on_unit, &mut on_layer)?;
    for _ in t_keep..cfg.timesteps {
        ro.generation_step(lambda, None)?;
    }
    let reconstruction = ImageBatch::new(ro.output_means(true), image.step);
    let payload = enc.finish();
    let rows: Vec<RateRow> = (0..t_keep)
        .flat_map(|t| (0..cfg.layers).map(move |l| (t, l)))
        .map(|(t, l)| RateRow {
            t,
            layer: l,
            coded_bits: coded[t][l],
            kl_bits: kl[t][l],
        })
        .collect();
    let bitstream = Bitstream {
        version: VERSION,
        model_hash: cm.hash(),
        height: cfg.height as u16,
        width: cfg.width as u16,
        channels: cfg.channels as u8,
        t_total: cfg.timesteps as u8,
        t_stored: t_keep as u8,
        lambda: lambda as f32,
        payload,
    };
    let report = RateReport {
        ideal_bits: rows.iter().map(|r| r.coded_bits).sum(),
        kl_bits: rows.iter().map(|r| r.kl_bits).sum(),
        rows,
        payload_bits: bitstream.payload.len() as u64 * 8,
        header_bits: crate::codec::bitstream::HEADER_LEN as u64 * 8,
        dims: cfg.input_dims(),
        symbols,
        clamped,
    };
    Ok(Compressed {
        bitstream,
        reconstruction,
        report,
    })
}

/// Rebuilds the image from a bitstream. `seed` must match the one used by
/// [`compress`] when the stream leaves steps to a nonzero temperature.
pub fn decompress<R: Real>(cm: &CodecModel<R>, bs: &Bitstream, seed: u64) -> Result<ImageBatch<R>> {
    let found = cm.hash();
    if bs.model_hash != found {
        return Err(Error::HashMismatch {
            expected: hex(&bs.model_hash),
            found: hex(&found),
        });
    }
    let cfg = cm.model.config();
    let dims = (
        bs.channels as usize,
        bs.height as usize,
        bs.width as usize,
        bs.t_total as usize,
    );
    if dims != (cfg.channels, cfg.height, cfg.width, cfg.timesteps) {
        return Err(Error::CorruptStream(format!(
            "stream is {}x{}x{} over {} steps, model is {}x{}x{} over {}",
            dims.0, dims.1, dims.2, dims.3, cfg.channels, cfg.height, cfg.width, cfg.timesteps
        )));
    }
    let mut dec = RangeDecoder::new(&bs.payload)?;
    let mut on_unit = |u: Unit| -> Result<i32> {
        let g = &cm.grids[u.layer];
        let s = dec.decode(&unit_pmf(g, &u)?)?;
        Ok(g.k_min[u.channel] + s as i32)
    };
    let mut ro = cm.drive(
        None,
        bs.t_stored as usize,
        seed,
        &mut on_unit,
        &mut |_, _, _| {},
    )?;
    for _ in bs.t_stored as usize..cfg.timesteps {
        ro.generation_step(bs.lambda as f64, None)?;
    }
    Ok(ImageBatch::new(ro.output_means(true), cfg.quant_step))
}

pub fn rate_report<R: Real>(
    cm: &CodecModel<R>,
    image: &ImageBatch<R>,
    t_keep: usize,
) -> Result<RateReport> {
    Ok(compress(cm, image, t_keep, 0.0, 0)?.report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Likelihood, ModelConfig};
    use crate::train::synth;

    fn codec(layers: usize, zero: bool) -> CodecModel<f32> {
        let cfg = ModelConfig {
            layers,
            timesteps: 4,
            channels: 1,
            height: 12,
            width: 12,
            feature_maps: vec![6; layers],
            latent_maps: vec![2; layers],
            kernel: 3,
            likelihood: Likelihood::Bernoulli,
            fixed_posterior_variance: true,
            ..ModelConfig::default()
        };
        let mut m = ConvDraw::<f32>::new(cfg, 5).unwrap();
        if zero {
            m.params_mut().zero_all();
        }
        let imgs = synth::glyphs(4, 12, 2, 3).batch::<f32>(&[0, 1, 2, 3], 1.0 / 256.0);
        CodecModel::calibrate(m, &imgs).unwrap()
    }

    fn image(i: usize) -> ImageBatch<f32> {
        synth::glyphs(8, 12, 2, 11).batch(&[i], 1.0 / 256.0)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for layers in [1, 2] {
            let cm = codec(layers, false);
            for (t_keep, lambda) in [(0, 0.0), (2, 0.0), (4, 0.0), (1, 0.7)] {
                let c = compress(&cm, &image(1), t_keep, lambda, 9).unwrap();
                let bytes = c.bitstream.to_bytes();
                let out = decompress(&cm, &Bitstream::from_bytes(&bytes).unwrap(), 9).unwrap();
                assert_eq!(
                    out.x.data(),
                    c.reconstruction.x.data(),
                    "layers {layers} t_keep {t_keep}"
                );
            }
        }
    }

    #[test]
    fn payload_tracks_ideal_rate() {
        let cm = codec(2, false);
        let r = rate_report(&cm, &image(2), 4).unwrap();
        assert_eq!(r.clamped, 0);
        assert!(r.payload_bits as f64 >= r.ideal_bits - 1e-6);
        assert!((r.payload_bits as f64) < r.ideal_bits + 40.0);
        assert_eq!(r.rows.len(), 8);
        assert_eq!(r.to_csv().lines().count(), 9);
    }

    #[test]
    fn zero_model_has_zero_kl() {
        let cm = codec(1, true);
        let r = rate_report(&cm, &image(0), 4).unwrap();
        assert!(r.rows.iter().all(|row| row.kl_bits == 0.0));
    }

    #[test]
    fn hash_and_grids_survive_checkpoints() {
        let cm = codec(2, false);
        let back = CodecModel::<f32>::from_checkpoint(&cm.to_checkpoint(false)).unwrap();
        assert_eq!(back.grids(), cm.grids());
        assert_eq!(back.hash(), cm.hash());
        assert!(CodecModel::<f32>::from_checkpoint(&cm.model().to_checkpoint(false)).is_err());
    }

    #[test]
    fn mismatched_model_is_refused() {
        let cm = codec(1, false);
        let bs = compress(&cm, &image(0), 2, 0.0, 0).unwrap().bitstream;
        let mut other = cm.model().clone();
        let id = other.params().ids().next().unwrap();
        other.params_mut().value_mut(id).data_mut()[0] += 0.25;
        let bounds = cm
            .grids()
            .iter()
            .map(|g| (g.k_min.clone(), g.k_max.clone()))
            .collect();
        let cm2 = CodecModel::new(other, bounds).unwrap();
        assert!(matches!(
            decompress(&cm2, &bs, 0),
            Err(Error::HashMismatch { .. })
        ));
    }

    #[test]
    fn learned_variance_model_is_rejected() {
        let cfg = ModelConfig {
            timesteps: 2,
            channels: 1,
            height: 8,
            width: 8,
            feature_maps: vec![4],
            latent_maps: vec![2],
            kernel: 3,
            ..ModelConfig::default()
        };
        let m = ConvDraw::<f32>::new(cfg, 0).unwrap();
        assert!(CodecModel::new(m, vec![(vec![-4; 2], vec![4; 2])]).is_err());
    }
}
