//! Convolutional DRAW.
//!
//! Per timestep, for layers `l = 0..L` (layer 0 sits next to the pixels):
//!
//! ```text
//! eps      = x - mean(r)
//! h_e[0]   = Rnn(conv_s([x, eps]), h_e[0], h_d[0])
//! h_e[l]   = Rnn(conv(mu(q[l-1])), h_e[l], h_d[l])          l > 0
//! q[l]     = q(h_e[l])
//! -- top-down --
//! p[l]     = p(h_d[l], h_d'[l+1])
//! z[l]     ~ q[l]  (or the prior, a replayed value, a quantized value)
//! h_d'[l]  = Rnn(z[l], h_d[l], h_d'[l+1], conv_s(r) if l == 0)
//! r        = r + convT_s(h_d'[0])
//! L_z      = sum_l KL(q[l] || p[l])
//! ```
//!
//! Recurrent maps live at `1/stride` of the input resolution.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::ImageBatch;
use crate::error::{Error, Result};
use crate::model::config::{Likelihood, ModelConfig};
use crate::nn::{
    lstm_cell, Checkpoint, ConvGeom, ConvKernel, ConvLstmState, Graph, Padding, ParamId,
    ParamStore, Real, Shape4, Tensor4, Var,
};

/// Log-variances of posteriors, priors and the output are clamped to
/// `[-LOGVAR_LIMIT, LOGVAR_LIMIT]`.
pub const LOGVAR_LIMIT: f64 = 14.0;

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianParams<R> {
    pub mu: Tensor4<R>,
    pub log_var: Tensor4<R>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerTrace<R> {
    /// Posterior; absent for generation steps.
    pub q: Option<GaussianParams<R>>,
    pub p: GaussianParams<R>,
    pub z: Tensor4<R>,
    /// Per-unit `KL(q || p)` in nats; absent when `q` is.
    pub kl: Option<Tensor4<R>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TimestepTrace<R> {
    pub t: usize,
    pub layers: Vec<LayerTrace<R>>,
}

impl<R: Real> TimestepTrace<R> {
    /// Summed KL of layer `l` per batch item.
    pub fn kl_per_item(&self, l: usize) -> Option<Vec<f64>> {
        self.layers[l].kl.as_ref().map(|k| k.sum_per_item())
    }
}

/// Every recurrent variable of one unrolled model instance.
#[derive(Clone, Debug, PartialEq)]
pub struct DrawState<R> {
    pub canvas: Tensor4<R>,
    pub encoders: Vec<ConvLstmState<R>>,
    pub decoders: Vec<ConvLstmState<R>>,
}

/// How the latent of one layer is obtained at one step.
pub enum LatentChoice<R> {
    /// `z = mu_q + sigma_q * noise` (reparameterized, differentiable).
    Posterior { noise: Tensor4<R> },
    /// `z = mu_p + lambda * sigma_p * noise`.
    Prior { lambda: f64, noise: Tensor4<R> },
    /// A fixed value (replayed or dequantized latent).
    Value(Tensor4<R>),
}

/// What a [`LatentPolicy`] sees when asked for a latent.
pub struct LatentRequest<'a, R> {
    pub t: usize,
    pub layer: usize,
    pub q: Option<&'a GaussianParams<R>>,
    pub p: &'a GaussianParams<R>,
    pub rng: &'a mut ChaCha8Rng,
}

pub trait LatentPolicy<R> {
    fn choose(&mut self, req: LatentRequest<'_, R>) -> Result<LatentChoice<R>>;
}

impl<R, F> LatentPolicy<R> for F
where
    F: FnMut(LatentRequest<'_, R>) -> Result<LatentChoice<R>>,
{
    fn choose(&mut self, req: LatentRequest<'_, R>) -> Result<LatentChoice<R>> {
        self(req)
    }
}

#[derive(Clone, Debug)]
struct LayerIds {
    enc_h0: ParamId,
    enc_c0: ParamId,
    dec_h0: ParamId,
    dec_c0: ParamId,
    enc_in: ParamId,
    enc_rec_w: ParamId,
    enc_rec_b: ParamId,
    enc_cross: ParamId,
    q_w: ParamId,
    q_b: ParamId,
    q_logvar: Option<ParamId>,
    p_w: ParamId,
    p_b: ParamId,
    p_upper: Option<ParamId>,
    dec_z: ParamId,
    dec_rec_w: ParamId,
    dec_rec_b: ParamId,
    dec_upper: Option<ParamId>,
    dec_canvas: Option<ParamId>,
}

/// A convolutional DRAW model: configuration plus parameters.
#[derive(Clone, Debug)]
pub struct ConvDraw<R> {
    cfg: ModelConfig,
    params: ParamStore<R>,
    canvas0: ParamId,
    write: ParamId,
    layers: Vec<LayerIds>,
}

fn name_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a over the name, mixed with the run seed
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

struct Builder<'a, R> {
    store: &'a mut ParamStore<R>,
    seed: u64,
}

impl<R: Real> Builder<'_, R> {
    fn zeros(&mut self, name: &str, dims: &[usize]) -> Result<ParamId> {
        let shape = crate::nn::params::storage_shape(dims)?;
        self.store.add(name, dims, Tensor4::zeros(shape))
    }

    fn filled(&mut self, name: &str, dims: &[usize], f: impl Fn(usize) -> f64) -> Result<ParamId> {
        let shape = crate::nn::params::storage_shape(dims)?;
        let data = (0..shape.len()).map(|i| R::of(f(i))).collect();
        self.store.add(name, dims, Tensor4::from_vec(shape, data))
    }

    /// Conv weight `[out, in, k, k]` uniform in `±sqrt(3 / fan_in)`.
    fn kernel(
        &mut self,
        name: &str,
        out_c: usize,
        in_c: usize,
        k: usize,
        fan_in: usize,
    ) -> Result<ParamId> {
        let mut rng = ChaCha8Rng::seed_from_u64(name_seed(self.seed, name));
        let geom = ConvGeom {
            out_c,
            in_c,
            kh: k,
            kw: k,
            stride: 1,
            pad: Padding::default(),
        };
        let mut kern: ConvKernel<R> = ConvKernel::init(geom, &mut rng);
        let bound = (3.0 / fan_in.max(1) as f64).sqrt();
        let default_bound = (3.0 / (in_c * k * k).max(1) as f64).sqrt();
        if bound != default_bound {
            let scale = R::of(bound / default_bound);
            for v in kern.weight.data_mut() {
                *v *= scale;
            }
        }
        self.store.add(name, &[out_c, in_c, k, k], kern.weight)
    }
}

impl<R: Real> ConvDraw<R> {
    /// Fresh model with deterministic initialization: each parameter is drawn
    /// from a stream keyed by `seed` and its name, so shared parameters of
    /// different configurations start out equal.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let (hh, hw) = cfg.hidden_dims();
        let k = cfg.kernel;
        let cr = cfg.canvas_channels();
        let mut b = Builder {
            store: &mut params,
            seed,
        };
        let canvas0 = b.zeros("canvas0", &[1, cr, cfg.height, cfg.width])?;
        let s2 = cfg.stride * cfg.stride;
        let write = b.kernel(
            "l0.write.w",
            cfg.feature_maps[0],
            cr,
            k,
            cfg.feature_maps[0] * k * k / s2,
        )?;
        let mut layers = Vec::new();
        for l in 0..cfg.layers {
            let f = cfg.feature_maps[l];
            let lat = cfg.latent_maps[l];
            let upper = (l + 1 < cfg.layers).then(|| cfg.feature_maps[l + 1]);
            let n = |s: &str| format!("l{l}.{s}");
            let state = [1, f, hh, hw];
            let in_c = if l == 0 {
                2 * cfg.channels
            } else {
                cfg.latent_maps[l - 1]
            };
            let forget_bias = |i: usize| if (f..2 * f).contains(&i) { 1.0 } else { 0.0 };
            let q_out = if cfg.fixed_posterior_variance {
                lat
            } else {
                2 * lat
            };
            let ids = LayerIds {
                enc_h0: b.zeros(&n("enc.h0"), &state)?,
                enc_c0: b.zeros(&n("enc.c0"), &state)?,
                dec_h0: b.zeros(&n("dec.h0"), &state)?,
                dec_c0: b.zeros(&n("dec.c0"), &state)?,
                enc_in: b.kernel(&n("enc.in.w"), 4 * f, in_c, k, in_c * k * k)?,
                enc_rec_w: b.kernel(&n("enc.rec.w"), 4 * f, f, k, f * k * k)?,
                enc_rec_b: b.filled(&n("enc.rec.b"), &[4 * f], forget_bias)?,
                enc_cross: b.kernel(&n("enc.cross.w"), 4 * f, f, 1, f)?,
                q_w: b.kernel(&n("q.w"), q_out, f, k, f * k * k)?,
                q_b: b.zeros(&n("q.b"), &[q_out])?,
                q_logvar: if cfg.fixed_posterior_variance {
                    Some(b.zeros(&n("q.logvar"), &[lat])?)
                } else {
                    None
                },
                p_w: b.kernel(&n("p.w"), 2 * lat, f, k, f * k * k)?,
                p_b: b.zeros(&n("p.b"), &[2 * lat])?,
                p_upper: match upper {
                    Some(fu) => Some(b.kernel(&n("p.upper.w"), 2 * lat, fu, k, fu * k * k)?),
                    None => None,
                },
                dec_z: b.kernel(&n("dec.z.w"), 4 * f, lat, k, lat * k * k)?,
                dec_rec_w: b.kernel(&n("dec.rec.w"), 4 * f, f, k, f * k * k)?,
                dec_rec_b: b.filled(&n("dec.rec.b"), &[4 * f], forget_bias)?,
                dec_upper: match upper {
                    Some(fu) => Some(b.kernel(&n("dec.upper.w"), 4 * f, fu, k, fu * k * k)?),
                    None => None,
                },
                dec_canvas: if l == 0 {
                    Some(b.kernel(&n("dec.canvas.w"), 4 * f, cr, k, cr * k * k)?)
                } else {
                    None
                },
            };
            layers.push(ids);
        }
        Ok(ConvDraw {
            cfg,
            params,
            canvas0,
            write,
            layers,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<R> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<R> {
        &mut self.params
    }

    /// Rebuilds a model from a checkpoint's config text and parameters.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let cfg = ModelConfig::from_text(&ckpt.config_text)?;
        let mut model = ConvDraw::new(cfg, 0)?;
        model.params.load_from(ckpt)?;
        Ok(model)
    }

    pub fn to_checkpoint(&self, with_optimizer: bool) -> Checkpoint {
        Checkpoint {
            config_text: self.cfg.to_text(),
            optimizer_step: with_optimizer.then(|| self.params.step()),
            entries: self.params.to_entries(with_optimizer),
        }
    }

    /// Same model at another precision.
    pub fn cast<S: Real>(&self) -> ConvDraw<S> {
        ConvDraw {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
            canvas0: self.canvas0,
            write: self.write,
            layers: self.layers.clone(),
        }
    }

    /// Latent map shape of layer `l` for a batch of `n`.
    pub fn latent_shape(&self, l: usize, n: usize) -> Shape4 {
        let (hh, hw) = self.cfg.hidden_dims();
        Shape4::new(n, self.cfg.latent_maps[l], hh, hw)
    }

    /// Learned initial state broadcast over a batch.
    pub fn init_state(&self, batch_size: usize) -> Result<DrawState<R>> {
        let ro = Rollout::new(self, batch_size, false, 0)?;
        Ok(ro.state())
    }

    /// One inference step on plain state; `noise` holds one tensor per layer.
    pub fn inference_step(
        &self,
        state: &DrawState<R>,
        x: &ImageBatch<R>,
        noise: Option<&[Tensor4<R>]>,
        seed: u64,
    ) -> Result<(DrawState<R>, TimestepTrace<R>)> {
        let mut ro = Rollout::from_state(self, state, 0, seed)?;
        ro.observe(&x.x)?;
        let trace = ro.inference_step(noise)?;
        Ok((ro.state(), trace))
    }

    /// Single timestep of the two-layer model; errors on a one-layer model.
    pub fn two_layer_step(
        &self,
        state: &DrawState<R>,
        x: &ImageBatch<R>,
        noise: Option<&[Tensor4<R>]>,
        seed: u64,
    ) -> Result<(DrawState<R>, TimestepTrace<R>)> {
        if self.cfg.layers != 2 {
            return Err(Error::Contract(format!(
                "two_layer_step on a {}-layer model",
                self.cfg.layers
            )));
        }
        self.inference_step(state, x, noise, seed)
    }

    /// One generation step with prior temperature `lambda`.
    pub fn generation_step(
        &self,
        state: &DrawState<R>,
        lambda: f64,
        noise: Option<&[Tensor4<R>]>,
        seed: u64,
    ) -> Result<DrawState<R>> {
        let mut ro = Rollout::from_state(self, state, 0, seed)?;
        ro.generation_step(lambda, noise)?;
        Ok(ro.state())
    }

    /// Observes `x` for `t_keep` steps and generates the rest with prior
    /// temperature `lambda`; returns canvas means clamped to `[0, 1]`.
    pub fn reconstruct_partial(
        &self,
        x: &ImageBatch<R>,
        t_keep: usize,
        lambda: f64,
        seed: u64,
    ) -> Result<ImageBatch<R>> {
        if t_keep > self.cfg.timesteps {
            return Err(Error::Contract(format!(
                "t_keep {t_keep} exceeds {} timesteps",
                self.cfg.timesteps
            )));
        }
        let mut ro = Rollout::new(self, x.len(), false, seed)?;
        ro.observe(&x.x)?;
        for _ in 0..t_keep {
            ro.inference_step(None)?;
        }
        for _ in t_keep..self.cfg.timesteps {
            ro.generation_step(lambda, None)?;
        }
        Ok(ImageBatch::new(ro.output_means(true), x.step))
    }

    /// Unconditional samples.
    pub fn sample(&self, n: usize, lambda: f64, seed: u64) -> Result<ImageBatch<R>> {
        let mut ro = Rollout::new(self, n, false, seed)?;
        for _ in 0..self.cfg.timesteps {
            ro.generation_step(lambda, None)?;
        }
        Ok(ImageBatch::new(ro.output_means(true), self.cfg.quant_step))
    }
}

#[derive(Clone, Copy, Debug)]
struct QVars {
    mu: Var,
    lv: Var,
}

/// Loss nodes of a full unroll.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    /// `n x 1 x 1 x 1` input cost in nats.
    pub lx: Var,
    /// `n x 1 x 1 x 1` summed KL in nats.
    pub kl: Var,
    /// `n x 1 x 1 x 1` `beta * lx + kl`.
    pub total: Var,
    /// Batch mean of `total` (scalar).
    pub mean: Var,
}

/// An unrolled model instance recorded on a tape.
pub struct Rollout<'m, R: Real> {
    model: &'m ConvDraw<R>,
    graph: Graph<R>,
    batch: usize,
    canvas: Var,
    enc: Vec<(Var, Var)>,
    dec: Vec<(Var, Var)>,
    x: Option<Var>,
    t: usize,
    kl_vars: Vec<Var>,
    rng: ChaCha8Rng,
}

impl<'m, R: Real> Rollout<'m, R> {
    /// Starts from the learned initial state. `seed` keys internally drawn
    /// noise.
    pub fn new(model: &'m ConvDraw<R>, batch: usize, grad: bool, seed: u64) -> Result<Self> {
        if batch == 0 {
            return Err(Error::Contract("batch size must be >= 1".into()));
        }
        let cfg = &model.cfg;
        let mut graph = if grad { Graph::new() } else { Graph::no_grad() };
        let (hh, hw) = cfg.hidden_dims();
        let c0 = graph.param(&model.params, model.canvas0);
        let canvas = graph.broadcast(
            c0,
            Shape4::new(batch, cfg.canvas_channels(), cfg.height, cfg.width),
        )?;
        let mut enc = Vec::new();
        let mut dec = Vec::new();
        for (l, ids) in model.layers.iter().enumerate() {
            let s = Shape4::new(batch, cfg.feature_maps[l], hh, hw);
            let mut bc = |id| -> Result<Var> {
                let p = graph.param(&model.params, id);
                graph.broadcast(p, s)
            };
            enc.push((bc(ids.enc_h0)?, bc(ids.enc_c0)?));
            dec.push((bc(ids.dec_h0)?, bc(ids.dec_c0)?));
        }
        Ok(Rollout {
            model,
            graph,
            batch,
            canvas,
            enc,
            dec,
            x: None,
            t: 0,
            kl_vars: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// Resumes from a plain state at step `t` (no gradients).
    pub fn from_state(
        model: &'m ConvDraw<R>,
        state: &DrawState<R>,
        t: usize,
        seed: u64,
    ) -> Result<Self> {
        let cfg = &model.cfg;
        let batch = state.canvas.shape().n;
        state.canvas.expect_shape(
            "DrawState canvas",
            Shape4::new(batch, cfg.canvas_channels(), cfg.height, cfg.width),
        )?;
        if state.encoders.len() != cfg.layers || state.decoders.len() != cfg.layers {
            return Err(Error::Contract(
                "DrawState layer count does not match the model".into(),
            ));
        }
        let (hh, hw) = cfg.hidden_dims();
        let mut graph = Graph::no_grad();
        let canvas = graph.constant(state.canvas.clone());
        let mut enc = Vec::new();
        let mut dec = Vec::new();
        for l in 0..cfg.layers {
            let s = Shape4::new(batch, cfg.feature_maps[l], hh, hw);
            for st in [&state.encoders[l], &state.decoders[l]] {
                st.h.expect_shape("DrawState lstm", s)?;
                st.c.expect_shape("DrawState lstm", s)?;
            }
            enc.push((
                graph.constant(state.encoders[l].h.clone()),
                graph.constant(state.encoders[l].c.clone()),
            ));
            dec.push((
                graph.constant(state.decoders[l].h.clone()),
                graph.constant(state.decoders[l].c.clone()),
            ));
        }
        Ok(Rollout {
            model,
            graph,
            batch,
            canvas,
            enc,
            dec,
            x: None,
            t,
            kl_vars: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn graph(&self) -> &Graph<R> {
        &self.graph
    }

    pub fn model(&self) -> &ConvDraw<R> {
        self.model
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Binds the input the encoder will look at (and the loss will score).
    pub fn observe(&mut self, x: &Tensor4<R>) -> Result<()> {
        let cfg = &self.model.cfg;
        x.expect_shape(
            "observe",
            Shape4::new(self.batch, cfg.channels, cfg.height, cfg.width),
        )?;
        if !x.is_finite() {
            return Err(Error::NonFinite("observed input".into()));
        }
        self.x = Some(self.graph.constant(x.clone()));
        Ok(())
    }

    pub fn state(&self) -> DrawState<R> {
        let v = |x: Var| self.graph.value(x).clone();
        DrawState {
            canvas: v(self.canvas),
            encoders: self
                .enc
                .iter()
                .map(|&(h, c)| ConvLstmState { h: v(h), c: v(c) })
                .collect(),
            decoders: self
                .dec
                .iter()
                .map(|&(h, c)| ConvLstmState { h: v(h), c: v(c) })
                .collect(),
        }
    }

    pub fn canvas(&self) -> &Tensor4<R> {
        self.graph.value(self.canvas)
    }

    /// Mean image implied by the canvas: sigmoid of logits (Bernoulli) or
    /// the mean block (Gaussian), optionally clamped to `[0, 1]`.
    pub fn output_means(&self, clamp: bool) -> Tensor4<R> {
        let cfg = &self.model.cfg;
        let r = self.canvas();
        let m = match cfg.likelihood {
            Likelihood::Bernoulli => r.map(crate::nn::graph::sigmoid),
            Likelihood::DequantizedGaussian => r.channels(0, cfg.channels),
        };
        if clamp {
            m.map(|v| v.max(R::zero()).min(R::one()))
        } else {
            m
        }
    }

    fn conv(&mut self, x: Var, w: ParamId, b: Option<ParamId>, stride: usize) -> Result<Var> {
        let wv = self.graph.param(&self.model.params, w);
        let bv = b.map(|b| self.graph.param(&self.model.params, b));
        let ws = self.graph.shape(wv);
        let pad = if stride == 1 {
            Padding {
                top: ws.h / 2,
                bottom: ws.h / 2,
                left: ws.w / 2,
                right: ws.w / 2,
            }
        } else {
            let xs = self.graph.shape(x);
            Padding::same(ws.h, stride, xs.h, xs.w)
        };
        self.graph.conv(x, wv, bv, stride, pad)
    }

    fn mean_image(&mut self) -> Var {
        let cfg = &self.model.cfg;
        match cfg.likelihood {
            Likelihood::Bernoulli => self.graph.sigmoid(self.canvas),
            Likelihood::DequantizedGaussian => self.graph.slice(self.canvas, 0, cfg.channels),
        }
    }

    fn posterior(&mut self, l: usize, h: Var) -> Result<QVars> {
        let ids = self.model.layers[l].clone();
        let lat = self.model.cfg.latent_maps[l];
        let out = self.conv(h, ids.q_w, Some(ids.q_b), 1)?;
        let (mu, raw_lv) = match ids.q_logvar {
            Some(lv) => {
                let p = self.graph.param(&self.model.params, lv);
                let shape = self.graph.shape(out);
                (out, self.graph.broadcast(p, shape)?)
            }
            None => (
                self.graph.slice(out, 0, lat),
                self.graph.slice(out, lat, lat),
            ),
        };
        let lv = self.graph.clamp(raw_lv, -LOGVAR_LIMIT, LOGVAR_LIMIT);
        Ok(QVars { mu, lv })
    }

    fn prior(&mut self, l: usize, h_prev: Var, upper: Option<Var>) -> Result<QVars> {
        let ids = self.model.layers[l].clone();
        let lat = self.model.cfg.latent_maps[l];
        let mut out = self.conv(h_prev, ids.p_w, Some(ids.p_b), 1)?;
        if let (Some(u), Some(w)) = (upper, ids.p_upper) {
            let extra = self.conv(u, w, None, 1)?;
            out = self.graph.add(out, extra)?;
        }
        let mu = self.graph.slice(out, 0, lat);
        let raw = self.graph.slice(out, lat, lat);
        let lv = self.graph.clamp(raw, -LOGVAR_LIMIT, LOGVAR_LIMIT);
        Ok(QVars { mu, lv })
    }

    fn gaussian(&self, v: QVars) -> GaussianParams<R> {
        GaussianParams {
            mu: self.graph.value(v.mu).clone(),
            log_var: self.graph.value(v.lv).clone(),
        }
    }

    /// `mu + scale * exp(lv / 2) * noise`
    fn reparam(&mut self, v: QVars, scale: f64, noise: Tensor4<R>) -> Result<Var> {
        let half = self.graph.scale(v.lv, 0.5);
        let sd = self.graph.exp(half);
        let n = self.graph.constant(noise);
        let mut dev = self.graph.mul(sd, n)?;
        if scale != 1.0 {
            dev = self.graph.scale(dev, scale);
        }
        self.graph.add(v.mu, dev)
    }

    /// One timestep. With `encode`, the encoder runs on the observed input
    /// and posteriors are offered to `policy`; otherwise only priors are.
    pub fn step_with(
        &mut self,
        encode: bool,
        policy: &mut dyn LatentPolicy<R>,
    ) -> Result<TimestepTrace<R>> {
        let cfg = self.model.cfg.clone();
        let nl = cfg.layers;
        let layers = self.model.layers.clone();
        let mut qs: Vec<Option<QVars>> = vec![None; nl];
        let mut new_enc = self.enc.clone();
        if encode {
            let x = self.x.ok_or_else(|| {
                Error::Contract("inference step without an observed input".into())
            })?;
            let mean = self.mean_image();
            let eps = self.graph.sub(x, mean)?;
            let xe = self.graph.concat(&[x, eps])?;
            for l in 0..nl {
                let ids = &layers[l];
                let input = if l == 0 {
                    self.conv(xe, ids.enc_in, None, cfg.stride)?
                } else {
                    let below = qs[l - 1].expect("lower posterior computed first").mu;
                    self.conv(below, ids.enc_in, None, 1)?
                };
                let rec = self.conv(self.enc[l].0, ids.enc_rec_w, Some(ids.enc_rec_b), 1)?;
                let cross = self.conv(self.dec[l].0, ids.enc_cross, None, 1)?;
                let pre = self.graph.sum_of(&[rec, input, cross])?;
                let (h, c) = lstm_cell(&mut self.graph, pre, self.enc[l].1)?;
                new_enc[l] = (h, c);
                qs[l] = Some(self.posterior(l, h)?);
            }
        }

        let mut new_dec = self.dec.clone();
        let mut traces: Vec<Option<LayerTrace<R>>> = vec![None; nl];
        for l in (0..nl).rev() {
            let ids = &layers[l];
            let upper = (l + 1 < nl).then(|| new_dec[l + 1].0);
            let p = self.prior(l, self.dec[l].0, upper)?;
            let p_val = self.gaussian(p);
            let q_val = qs[l].map(|q| self.gaussian(q));
            let choice = policy.choose(LatentRequest {
                t: self.t,
                layer: l,
                q: q_val.as_ref(),
                p: &p_val,
                rng: &mut self.rng,
            })?;
            let zshape = p_val.mu.shape();
            let z = match choice {
                LatentChoice::Posterior { noise } => {
                    noise.expect_shape("posterior noise", zshape)?;
                    let q = qs[l].ok_or_else(|| {
                        Error::Contract("posterior sample requested without encoder".into())
                    })?;
                    self.reparam(q, 1.0, noise)?
                }
                LatentChoice::Prior { lambda, noise } => {
                    noise.expect_shape("prior noise", zshape)?;
                    if !(0.0..=1.0).contains(&lambda) {
                        return Err(Error::Contract(format!(
                            "prior temperature {lambda} outside [0, 1]"
                        )));
                    }
                    if lambda == 0.0 {
                        p.mu
                    } else {
                        self.reparam(p, lambda, noise)?
                    }
                }
                LatentChoice::Value(v) => {
                    v.expect_shape("latent value", zshape)?;
                    self.graph.constant(v)
                }
            };
            let mut terms = vec![
                self.conv(self.dec[l].0, ids.dec_rec_w, Some(ids.dec_rec_b), 1)?,
                self.conv(z, ids.dec_z, None, 1)?,
            ];
            if let (Some(u), Some(w)) = (upper, ids.dec_upper) {
                terms.push(self.conv(u, w, None, 1)?);
            }
            if let Some(w) = ids.dec_canvas {
                terms.push(self.conv(self.canvas, w, None, cfg.stride)?);
            }
            let pre = self.graph.sum_of(&terms)?;
            let (h, c) = lstm_cell(&mut self.graph, pre, self.dec[l].1)?;
            new_dec[l] = (h, c);
            let kl = match qs[l] {
                Some(q) => {
                    let k = self.graph.gaussian_kl(q.mu, q.lv, p.mu, p.lv)?;
                    self.kl_vars.push(k);
                    Some(self.graph.value(k).clone())
                }
                None => None,
            };
            traces[l] = Some(LayerTrace {
                q: q_val,
                p: p_val,
                z: self.graph.value(z).clone(),
                kl,
            });
        }

        let wv = self.graph.param(&self.model.params, self.model.write);
        let k = self.graph.shape(wv).h;
        let pad = Padding::same(k, cfg.stride, cfg.height, cfg.width);
        let write =
            self.graph
                .conv_transpose(new_dec[0].0, wv, cfg.stride, pad, cfg.height, cfg.width)?;
        self.canvas = self.graph.add(self.canvas, write)?;
        self.enc = new_enc;
        self.dec = new_dec;

        let trace = TimestepTrace {
            t: self.t,
            layers: traces
                .into_iter()
                .map(|t| t.expect("every layer visited"))
                .collect(),
        };
        if !self.graph.value(self.canvas).is_finite() {
            return Err(Error::NumericFault {
                step: self.t,
                what: "canvas".into(),
            });
        }
        for (l, lt) in trace.layers.iter().enumerate() {
            if !lt.z.is_finite() || lt.kl.as_ref().is_some_and(|k| !k.is_finite()) {
                return Err(Error::NumericFault {
                    step: self.t,
                    what: format!("latent layer {l}"),
                });
            }
        }
        self.t += 1;
        Ok(trace)
    }

    /// Posterior sampling step. `noise` supplies one standard-normal tensor
    /// per layer; without it, noise is drawn from the rollout's generator.
    pub fn inference_step(&mut self, noise: Option<&[Tensor4<R>]>) -> Result<TimestepTrace<R>> {
        let mut policy = |req: LatentRequest<'_, R>| -> Result<LatentChoice<R>> {
            let shape = req.p.mu.shape();
            let noise = match noise {
                Some(n) => n
                    .get(req.layer)
                    .cloned()
                    .ok_or_else(|| Error::Contract(format!("no noise for layer {}", req.layer)))?,
                None => Tensor4::randn(shape, req.rng),
            };
            Ok(LatentChoice::Posterior { noise })
        };
        self.step_with(true, &mut policy)
    }

    /// Prior sampling step at temperature `lambda`; the encoder is untouched.
    pub fn generation_step(
        &mut self,
        lambda: f64,
        noise: Option<&[Tensor4<R>]>,
    ) -> Result<TimestepTrace<R>> {
        let mut policy = |req: LatentRequest<'_, R>| -> Result<LatentChoice<R>> {
            let shape = req.p.mu.shape();
            let noise = match noise {
                Some(n) => n
                    .get(req.layer)
                    .cloned()
                    .ok_or_else(|| Error::Contract(format!("no noise for layer {}", req.layer)))?,
                None if lambda == 0.0 => Tensor4::zeros(shape),
                None => Tensor4::randn(shape, req.rng),
            };
            Ok(LatentChoice::Prior { lambda, noise })
        };
        self.step_with(false, &mut policy)
    }

    /// Decoder-only step driven by recorded latents (one per layer).
    pub fn replay_step(&mut self, z: &[Tensor4<R>]) -> Result<TimestepTrace<R>> {
        let mut policy = |req: LatentRequest<'_, R>| -> Result<LatentChoice<R>> {
            z.get(req.layer)
                .cloned()
                .map(LatentChoice::Value)
                .ok_or_else(|| Error::Contract(format!("no latent for layer {}", req.layer)))
        };
        self.step_with(false, &mut policy)
    }

    /// Input cost and total loss over the steps taken so far, scored against
    /// the observed input.
    pub fn loss(&mut self, beta: f64) -> Result<LossVars> {
        let cfg = self.model.cfg.clone();
        let x = self
            .x
            .ok_or_else(|| Error::Contract("loss without an observed input".into()))?;
        let lx = match cfg.likelihood {
            Likelihood::Bernoulli => {
                let nll = self.graph.bernoulli_nll(x, self.canvas)?;
                self.graph.sum_per_item(nll)
            }
            Likelihood::DequantizedGaussian => {
                let mean = self.graph.slice(self.canvas, 0, cfg.channels);
                let raw = self.graph.slice(self.canvas, cfg.channels, cfg.channels);
                let lv = self.graph.clamp(raw, -LOGVAR_LIMIT, LOGVAR_LIMIT);
                if cfg.binned_gaussian {
                    let nll = self
                        .graph
                        .binned_gaussian_nll(x, mean, lv, cfg.quant_step)?;
                    self.graph.sum_per_item(nll)
                } else {
                    let nll = self.graph.gaussian_nll(x, mean, lv)?;
                    let s = self.graph.sum_per_item(nll);
                    // log q0(x) = -log s per dimension
                    let offset = -(cfg.quant_step.ln()) * cfg.input_dims() as f64;
                    let c = self.graph.constant(Tensor4::full(
                        Shape4::new(self.batch, 1, 1, 1),
                        R::of(-offset),
                    ));
                    self.graph.sub(s, c)?
                }
            }
        };
        let kl = if self.kl_vars.is_empty() {
            self.graph
                .constant(Tensor4::zeros(Shape4::new(self.batch, 1, 1, 1)))
        } else {
            let per: Vec<Var> = self
                .kl_vars
                .clone()
                .into_iter()
                .map(|k| self.graph.sum_per_item(k))
                .collect();
            self.graph.sum_of(&per)?
        };
        let scaled = self.graph.scale(lx, beta);
        let total = self.graph.add(scaled, kl)?;
        let sum = self.graph.sum(total);
        let mean = self.graph.scale(sum, 1.0 / self.batch as f64);
        Ok(LossVars {
            lx,
            kl,
            total,
            mean,
        })
    }

    pub fn value(&self, v: Var) -> &Tensor4<R> {
        self.graph.value(v)
    }

    /// Gradients of a scalar node with respect to every model parameter.
    pub fn gradients(&self, out: Var) -> Result<Vec<Tensor4<R>>> {
        Ok(self
            .graph
            .backward(out, self.model.params.len(), &self.model.params)?
            .params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::grad_check_with;
    use crate::nn::GradCheckOptions;

    fn tiny(layers: usize, likelihood: Likelihood) -> ModelConfig {
        ModelConfig {
            layers,
            timesteps: 3,
            channels: 1,
            height: 4,
            width: 4,
            feature_maps: vec![2; layers],
            latent_maps: vec![1; layers],
            kernel: 3,
            stride: 2,
            likelihood,
            ..ModelConfig::default()
        }
    }

    fn batch(n: usize, cfg: &ModelConfig, seed: u64) -> ImageBatch<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor4::<f64>::uniform(
            Shape4::new(n, cfg.channels, cfg.height, cfg.width),
            0.0,
            1.0,
            &mut rng,
        );
        let x = if cfg.likelihood == Likelihood::Bernoulli {
            x.map(|v| v.round())
        } else {
            x
        };
        ImageBatch::new(x, cfg.quant_step)
    }

    fn full_loss(
        model: &ConvDraw<f64>,
        x: &ImageBatch<f64>,
        seed: u64,
        grad: bool,
    ) -> (f64, Vec<Tensor4<f64>>) {
        let mut ro = Rollout::new(model, x.len(), grad, seed).unwrap();
        ro.observe(&x.x).unwrap();
        for _ in 0..model.config().timesteps {
            ro.inference_step(None).unwrap();
        }
        let beta = model.config().beta;
        let lv = ro.loss(beta).unwrap();
        let g = if grad {
            ro.gradients(lv.mean).unwrap()
        } else {
            Vec::new()
        };
        (ro.value(lv.mean).data()[0], g)
    }

    fn perturb(model: &mut ConvDraw<f64>, seed: u64) {
        // move learned initial states and biases off zero so every path is live
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<ParamId> = model.params().ids().collect();
        for id in ids {
            let s = model.params().value(id).shape();
            let noise = Tensor4::<f64>::uniform(s, -0.3, 0.3, &mut rng);
            let v = model.params_mut().value_mut(id);
            for (a, b) in v.data_mut().iter_mut().zip(noise.data()) {
                *a += b;
            }
        }
    }

    #[test]
    fn zero_weights_give_zero_kl() {
        let mut model = ConvDraw::<f64>::new(tiny(1, Likelihood::Bernoulli), 1).unwrap();
        model.params_mut().zero_all();
        let x = batch(2, model.config(), 2);
        let mut ro = Rollout::new(&model, 2, false, 3).unwrap();
        ro.observe(&x.x).unwrap();
        for _ in 0..3 {
            let tr = ro.inference_step(None).unwrap();
            assert!(tr.layers[0]
                .kl
                .as_ref()
                .unwrap()
                .data()
                .iter()
                .all(|&k| k == 0.0));
        }
    }

    #[test]
    fn uniform_bernoulli_costs_one_bit_per_pixel() {
        let cfg = ModelConfig {
            height: 28,
            width: 28,
            ..tiny(1, Likelihood::Bernoulli)
        };
        let mut model = ConvDraw::<f64>::new(cfg, 1).unwrap();
        model.params_mut().zero_all();
        let x = batch(3, model.config(), 5);
        let (loss, _) = full_loss(&model, &x, 0, false);
        assert!((loss - 784.0 * std::f64::consts::LN_2).abs() < 1e-9);
        assert!((loss - 543.4).abs() < 0.05);
    }

    #[test]
    fn matched_gaussian_width_gives_zero_input_cost() {
        // sigma = s / sqrt(2 pi) and mean = x make the density exactly 1/s
        let cfg = tiny(1, Likelihood::DequantizedGaussian);
        let mut model = ConvDraw::<f64>::new(cfg.clone(), 1).unwrap();
        model.params_mut().zero_all();
        let x = batch(1, &cfg, 9);
        let s = cfg.quant_step;
        let lv = (s * s / (2.0 * std::f64::consts::PI)).ln();
        let id = model.params().id("canvas0").unwrap();
        let c0 = model.params_mut().value_mut(id);
        for i in 0..16 {
            c0.data_mut()[i] = x.x.data()[i];
            c0.data_mut()[16 + i] = lv;
        }
        let mut ro = Rollout::new(&model, 1, false, 0).unwrap();
        ro.observe(&x.x).unwrap();
        ro.inference_step(None).unwrap();
        let l = ro.loss(1.0).unwrap();
        assert!(ro.value(l.lx).data()[0].abs() < 1e-9);
    }

    #[test]
    fn replayed_latents_reproduce_canvas_bit_exactly() {
        let cfg = tiny(2, Likelihood::DequantizedGaussian);
        let mut model = ConvDraw::<f32>::new(cfg, 4).unwrap();
        let mut m64 = model.cast::<f64>();
        perturb(&mut m64, 1);
        model = m64.cast();
        let x = batch(2, model.config(), 3).x.cast::<f32>();
        let mut enc = Rollout::new(&model, 2, false, 17).unwrap();
        enc.observe(&x).unwrap();
        let mut zs = Vec::new();
        for _ in 0..3 {
            let tr = enc.inference_step(None).unwrap();
            zs.push(tr.layers.iter().map(|l| l.z.clone()).collect::<Vec<_>>());
        }
        let mut dec = Rollout::new(&model, 2, false, 99).unwrap();
        for z in &zs {
            dec.replay_step(z).unwrap();
        }
        assert_eq!(enc.canvas().data(), dec.canvas().data());
        assert_eq!(enc.state().decoders, dec.state().decoders);
    }

    #[test]
    fn same_seed_same_trajectory() {
        let model = ConvDraw::<f64>::new(tiny(1, Likelihood::Bernoulli), 4).unwrap();
        let x = batch(2, model.config(), 3);
        let a = full_loss(&model, &x, 5, false).0;
        let b = full_loss(&model, &x, 5, false).0;
        let c = full_loss(&model, &x, 6, false).0;
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn functional_step_matches_rollout() {
        let model = ConvDraw::<f64>::new(tiny(1, Likelihood::DequantizedGaussian), 4).unwrap();
        let x = batch(1, model.config(), 3);
        let noise = vec![Tensor4::full(model.latent_shape(0, 1), 0.5)];
        let s0 = model.init_state(1).unwrap();
        let (s1, t1) = model.inference_step(&s0, &x, Some(&noise), 0).unwrap();
        let mut ro = Rollout::new(&model, 1, false, 0).unwrap();
        ro.observe(&x.x).unwrap();
        let t2 = ro.inference_step(Some(&noise)).unwrap();
        assert_eq!(t1, t2);
        assert_eq!(s1, ro.state());
        assert!(model.two_layer_step(&s0, &x, Some(&noise), 0).is_err());
    }

    #[test]
    fn degenerate_top_layer_matches_single_layer() {
        let one = ConvDraw::<f64>::new(tiny(1, Likelihood::DequantizedGaussian), 8).unwrap();
        let cfg2 = ModelConfig {
            latent_maps: vec![1, 0],
            ..tiny(2, Likelihood::DequantizedGaussian)
        };
        let mut two = ConvDraw::<f64>::new(cfg2, 8).unwrap();
        for name in ["l0.p.upper.w", "l0.dec.upper.w"] {
            let id = two.params().id(name).unwrap();
            two.params_mut().value_mut(id).data_mut().fill(0.0);
        }
        for id in one.params().ids() {
            let id2 = two.params().id(one.params().name(id)).unwrap();
            assert_eq!(one.params().value(id), two.params().value(id2));
        }
        let x = batch(2, one.config(), 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut s1 = one.init_state(2).unwrap();
        let mut s2 = two.init_state(2).unwrap();
        for _ in 0..3 {
            let n0 = Tensor4::randn(one.latent_shape(0, 2), &mut rng);
            let n1 = Tensor4::zeros(two.latent_shape(1, 2));
            let (a, ta) = one
                .inference_step(&s1, &x, Some(std::slice::from_ref(&n0)), 0)
                .unwrap();
            let (b, tb) = two.two_layer_step(&s2, &x, Some(&[n0, n1]), 0).unwrap();
            assert_eq!(ta.layers[0], tb.layers[0]);
            assert_eq!(a.canvas, b.canvas);
            s1 = a;
            s2 = b;
        }
    }

    fn check_grads(cfg: ModelConfig) {
        let mut model = ConvDraw::<f64>::new(cfg, 3).unwrap();
        perturb(&mut model, 7);
        let x = batch(2, model.config(), 11);
        let template = model.clone();
        let report = grad_check_with(
            model.params(),
            &GradCheckOptions {
                eps: 1e-6,
                max_probes_per_param: 6,
                abs_floor: 1e-4,
                ..GradCheckOptions::default()
            },
            |p| {
                let mut m = template.clone();
                *m.params_mut() = p.clone();
                Ok(full_loss(&m, &x, 21, true))
            },
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{:?}", report);
    }

    #[test]
    fn gradients_bernoulli_single_layer() {
        check_grads(tiny(1, Likelihood::Bernoulli));
    }

    #[test]
    fn gradients_gaussian_two_layer() {
        check_grads(ModelConfig {
            beta: 0.7,
            ..tiny(2, Likelihood::DequantizedGaussian)
        });
    }

    #[test]
    fn gradients_fixed_posterior_variance() {
        check_grads(ModelConfig {
            fixed_posterior_variance: true,
            ..tiny(1, Likelihood::DequantizedGaussian)
        });
    }

    #[test]
    fn checkpoint_round_trip_preserves_model() {
        let model = ConvDraw::<f32>::new(tiny(2, Likelihood::Bernoulli), 3).unwrap();
        let bytes = model.to_checkpoint(false).to_bytes().unwrap();
        let back =
            ConvDraw::<f32>::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back.params().flat(), model.params().flat());
        assert_eq!(back.config(), model.config());
    }
}
