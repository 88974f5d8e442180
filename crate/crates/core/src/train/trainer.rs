use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::ImageBatch;
use crate::error::{Error, Result};
use crate::model::{bits_per_dim, ConvDraw, Likelihood, Rollout};
use crate::nn::{adam_step, clip_global_norm, AdamConfig, Real, Tensor4};
use crate::train::dataset::{binarize, dequantize, Binarization, Dataset};
use crate::train::guard::{RollbackDecision, RollbackGuard};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Global-norm gradient clipping; `None` disables it.
    pub clip_norm: Option<f64>,
    pub binarization: Binarization,
    pub spike_threshold: f64,
    pub ema_decay: f64,
    pub snapshot_every: u64,
    pub log_every: u64,
    /// Write a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            steps: 1000,
            seed: 0,
            adam: AdamConfig::default(),
            clip_norm: None,
            binarization: Binarization::Dynamic,
            spike_threshold: 3.0,
            ema_decay: 0.99,
            snapshot_every: 500,
            log_every: 10,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let bad = || Error::Config(format!("bad value `{v}` for `{key}`"));
        let f = || v.parse::<f64>().map_err(|_| bad());
        let u = || v.parse::<u64>().map_err(|_| bad());
        match key {
            "batch_size" => self.batch_size = u()? as usize,
            "steps" => self.steps = u()?,
            "seed" => self.seed = u()?,
            "lr" => self.adam.lr = f()?,
            "beta1" => self.adam.beta1 = f()?,
            "beta2" => self.adam.beta2 = f()?,
            "adam_eps" => self.adam.eps = f()?,
            "clip_norm" => self.clip_norm = Some(f()?).filter(|&c| c > 0.0),
            "binarization" => self.binarization = v.parse()?,
            "spike_threshold" => self.spike_threshold = f()?,
            "ema_decay" => self.ema_decay = f()?,
            "snapshot_every" => self.snapshot_every = u()?,
            "log_every" => self.log_every = u()?,
            "checkpoint_every" => self.checkpoint_every = u()?,
            other => return Err(Error::Config(format!("unknown train key `{other}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.spike_threshold > 1.0) || !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config(
                "spike_threshold must exceed 1 and ema_decay lie in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// One logged training step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub wall_ms: u64,
    /// Batch mean of `beta * lx + kl` in nats per image.
    pub loss_nats: f64,
    pub loss_bits_per_dim: f64,
    pub kl_nats: f64,
    pub lx_nats: f64,
    pub rolled_back: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
}

impl TrainLog {
    pub const HEADER: &'static str = "step,wall_ms,loss_nats,loss_bits_per_dim,kl_nats,lx_nats";

    pub fn push(&mut self, r: StepRecord) {
        debug_assert!(self.records.last().is_none_or(|l| l.step < r.step));
        self.records.push(r);
    }

    pub fn csv_row(r: &StepRecord) -> String {
        format!(
            "{},{},{:?},{:?},{:?},{:?}",
            r.step, r.wall_ms, r.loss_nats, r.loss_bits_per_dim, r.kl_nats, r.lx_nats
        )
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::HEADER);
        s.push('\n');
        for r in &self.records {
            let _ = writeln!(s, "{}", Self::csv_row(r));
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Loss, its two terms and parameter gradients for one batch.
pub struct BatchLoss<R> {
    pub loss_nats: f64,
    pub kl_nats: f64,
    pub lx_nats: f64,
    pub grads: Vec<Tensor4<R>>,
}

/// Full-unroll loss and gradients on an already prepared batch.
pub fn loss_and_grads<R: Real>(
    model: &ConvDraw<R>,
    x: &ImageBatch<R>,
    seed: u64,
) -> Result<BatchLoss<R>> {
    let mut ro = Rollout::new(model, x.len(), true, seed)?;
    ro.observe(&x.x)?;
    for _ in 0..model.config().timesteps {
        ro.inference_step(None)?;
    }
    let lv = ro.loss(model.config().beta)?;
    let n = x.len() as f64;
    let mean = |v: &Tensor4<R>| v.data().iter().map(|a| a.as_f64()).sum::<f64>() / n;
    let loss_nats = ro.value(lv.mean).data()[0].as_f64();
    let kl_nats = mean(ro.value(lv.kl));
    let lx_nats = mean(ro.value(lv.lx));
    let grads = ro.gradients(lv.mean)?;
    Ok(BatchLoss {
        loss_nats,
        kl_nats,
        lx_nats,
        grads,
    })
}

/// Owns a model and its optimizer state and runs the training loop.
pub struct Trainer<R: Real> {
    model: ConvDraw<R>,
    cfg: TrainConfig,
    guard: RollbackGuard<R>,
    rng: ChaCha8Rng,
    step: u64,
    start: Instant,
    pub log: TrainLog,
}

impl<R: Real> Trainer<R> {
    pub fn new(model: ConvDraw<R>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let guard = RollbackGuard::new(
            model.params(),
            cfg.spike_threshold,
            cfg.ema_decay,
            cfg.snapshot_every,
        );
        Ok(Trainer {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            guard,
            model,
            cfg,
            step: 0,
            start: Instant::now(),
            log: TrainLog::default(),
        })
    }

    pub fn model(&self) -> &ConvDraw<R> {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut ConvDraw<R> {
        &mut self.model
    }

    pub fn into_model(self) -> ConvDraw<R> {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn guard(&self) -> &RollbackGuard<R> {
        &self.guard
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Applies the input noise model: binarization for Bernoulli models,
    /// dequantization for the density-ratio Gaussian. Fresh noise each call.
    pub fn prepare(&mut self, raw: &ImageBatch<R>) -> ImageBatch<R> {
        let cfg = self.model.config();
        match cfg.likelihood {
            Likelihood::Bernoulli => binarize(raw, self.cfg.binarization, &mut self.rng),
            Likelihood::DequantizedGaussian if cfg.binned_gaussian => raw.clone(),
            Likelihood::DequantizedGaussian => {
                let s = cfg.quant_step;
                dequantize(raw, s, self.rng.gen())
            }
        }
    }

    /// One optimizer step on a prepared batch. Spikes and numeric faults
    /// restore the snapshot and skip the batch instead of failing.
    pub fn train_step(&mut self, batch: &ImageBatch<R>) -> Result<StepRecord> {
        self.step += 1;
        let seed = self.rng.gen();
        let dims = self.model.config().input_dims();
        let outcome = match loss_and_grads(&self.model, batch, seed) {
            Ok(b) => Some(b),
            Err(Error::NumericFault { step, what }) => {
                log::warn!("numeric fault at unroll step {step} ({what}); rolling back");
                None
            }
            Err(e) => return Err(e),
        };
        let loss = outcome.as_ref().map_or(f64::NAN, |b| b.loss_nats);
        let mut record = StepRecord {
            step: self.step,
            wall_ms: self.start.elapsed().as_millis() as u64,
            loss_nats: loss,
            loss_bits_per_dim: bits_per_dim(loss, dims),
            kl_nats: outcome.as_ref().map_or(f64::NAN, |b| b.kl_nats),
            lx_nats: outcome.as_ref().map_or(f64::NAN, |b| b.lx_nats),
            rolled_back: false,
        };
        if self.guard.maybe_rollback(self.model.params_mut(), loss) == RollbackDecision::Reverted {
            log::warn!(
                "step {}: loss {loss} rejected, reverted to step {}",
                self.step,
                self.guard.snapshot_step()
            );
            record.rolled_back = true;
            return Ok(record);
        }
        let mut grads = outcome.expect("finite loss implies a forward pass").grads;
        if let Some(c) = self.cfg.clip_norm {
            clip_global_norm(&mut grads, c);
        }
        match adam_step(self.model.params_mut(), &grads, &self.cfg.adam) {
            Ok(()) => {}
            Err(Error::NonFiniteGradient(name)) => {
                log::warn!(
                    "step {}: non-finite gradient for `{name}`, reverting",
                    self.step
                );
                self.guard.revert(self.model.params_mut());
                record.rolled_back = true;
                return Ok(record);
            }
            Err(e) => return Err(e),
        }
        self.guard.after_update(self.model.params(), self.step);
        Ok(record)
    }

    /// Trains for `cfg.steps` steps over shuffled epochs of `data`, logging
    /// every `log_every` steps. `on_log` sees each logged record.
    pub fn fit(
        &mut self,
        data: &Dataset,
        mut on_log: impl FnMut(&Trainer<R>, &StepRecord) -> Result<()>,
    ) -> Result<()> {
        if data.is_empty() {
            return Err(Error::Dataset("empty training set".into()));
        }
        let (c, h, w) = data.dims();
        let mc = self.model.config();
        if (c, h, w) != (mc.channels, mc.height, mc.width) {
            return Err(Error::Dataset(format!(
                "dataset images are {c}x{h}x{w}, model expects {}x{}x{}",
                mc.channels, mc.height, mc.width
            )));
        }
        let step_size = mc.quant_step;
        let mut epoch = 0u64;
        while self.step < self.cfg.steps {
            for idx in data
                .epoch_order(self.cfg.seed, epoch)
                .chunks(self.cfg.batch_size)
            {
                if self.step >= self.cfg.steps {
                    break;
                }
                let raw = data.batch::<R>(idx, step_size);
                let batch = self.prepare(&raw);
                let rec = self.train_step(&batch)?;
                if rec.step % self.cfg.log_every.max(1) == 0
                    || rec.step == self.cfg.steps
                    || rec.rolled_back
                {
                    log::info!(
                        "step {} loss {:.3} nats ({:.4} bits/dim) kl {:.3} lx {:.3}",
                        rec.step,
                        rec.loss_nats,
                        rec.loss_bits_per_dim,
                        rec.kl_nats,
                        rec.lx_nats
                    );
                    on_log(self, &rec)?;
                    self.log.push(rec);
                }
            }
            epoch += 1;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::train::synth;

    fn toy() -> (ConvDraw<f64>, Dataset) {
        let cfg = ModelConfig {
            timesteps: 2,
            channels: 1,
            height: 8,
            width: 8,
            feature_maps: vec![4],
            latent_maps: vec![2],
            kernel: 3,
            likelihood: Likelihood::Bernoulli,
            ..ModelConfig::default()
        };
        (ConvDraw::new(cfg, 1).unwrap(), synth::glyphs(4, 8, 2, 5))
    }

    fn tcfg(steps: u64) -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            steps,
            log_every: 1,
            binarization: Binarization::Threshold,
            adam: AdamConfig {
                lr: 3e-3,
                ..AdamConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn overfits_four_images() {
        let (model, data) = toy();
        let mut t = Trainer::new(model, tcfg(200)).unwrap();
        t.fit(&data, |_, _| Ok(())).unwrap();
        let first = t.log.records[..10].iter().map(|r| r.loss_nats).sum::<f64>();
        let last = t.log.records[190..]
            .iter()
            .map(|r| r.loss_nats)
            .sum::<f64>();
        assert!(last < 0.7 * first, "{first} -> {last}");
    }

    #[test]
    fn zero_learning_rate_freezes_parameters() {
        let (model, data) = toy();
        let before = model.params().flat();
        let mut cfg = tcfg(5);
        cfg.adam.lr = 0.0;
        let mut t = Trainer::new(model, cfg).unwrap();
        t.fit(&data, |_, _| Ok(())).unwrap();
        assert_eq!(t.model().params().flat(), before);
    }

    #[test]
    fn same_seed_same_log() {
        let run = || {
            let (model, data) = toy();
            let mut t = Trainer::new(model, tcfg(6)).unwrap();
            t.fit(&data, |_, _| Ok(())).unwrap();
            t.log
                .records
                .iter()
                .map(|r| (r.loss_nats, r.kl_nats))
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn logged_bits_match_nats() {
        let (model, data) = toy();
        let mut t = Trainer::new(model, tcfg(3)).unwrap();
        t.fit(&data, |_, _| Ok(())).unwrap();
        for r in &t.log.records {
            let want = r.loss_nats / (64.0 * std::f64::consts::LN_2);
            assert!((r.loss_bits_per_dim - want).abs() <= 1e-12);
        }
        assert!(t.log.to_csv().starts_with(TrainLog::HEADER));
    }

    #[test]
    fn poisoned_weights_roll_back() {
        let (model, data) = toy();
        let mut t = Trainer::new(model, tcfg(1)).unwrap();
        t.fit(&data, |_, _| Ok(())).unwrap();
        let snapshot = t.guard().snapshot().clone();
        let id = t.model().params().id("l0.dec.rec.w").unwrap();
        t.model_mut().params_mut().value_mut(id).data_mut()[0] = f64::NAN;
        let batch = data.all::<f64>(1.0);
        let rec = t.train_step(&batch).unwrap();
        assert!(rec.rolled_back);
        assert_eq!(t.model().params().flat(), snapshot.flat());
    }
}
