use std::fmt::Write as _;
use std::time::Instant;

use crate::error::Result;
use crate::model::{ConvDraw, ModelConfig};
use crate::nn::Real;
use crate::train::dataset::Dataset;
use crate::train::trainer::{TrainConfig, Trainer};

/// One point on a depth-vs-time training curve.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub n_t: usize,
    pub examples: u64,
    /// `examples * n_t`: the abscissa that charges each example for its
    /// iterations.
    pub example_steps: u64,
    pub wall_ms: f64,
    pub loss_nats: f64,
}

pub const BENCH_HEADER: &str = "n_t,examples,example_steps,wall_ms,loss_nats";

/// Trains one model per `n_t` (all else equal) for `examples` training
/// examples each, recording a row every `tcfg.log_every` steps.
pub fn bench_depth<R: Real>(
    base: &ModelConfig,
    n_ts: &[usize],
    data: &Dataset,
    tcfg: &TrainConfig,
    examples: u64,
    seed: u64,
) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for &n_t in n_ts {
        let cfg = ModelConfig {
            timesteps: n_t,
            ..base.clone()
        };
        let model = ConvDraw::<R>::new(cfg, seed)?;
        let steps = examples.div_ceil(tcfg.batch_size as u64);
        let tc = TrainConfig {
            steps,
            seed,
            ..tcfg.clone()
        };
        let mut trainer = Trainer::new(model, tc)?;
        let start = Instant::now();
        let batch = tcfg.batch_size as u64;
        trainer.fit(data, |_, rec| {
            let seen = rec.step * batch;
            rows.push(BenchRow {
                n_t,
                examples: seen,
                example_steps: seen * n_t as u64,
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
                loss_nats: rec.loss_nats,
            });
            Ok(())
        })?;
    }
    Ok(rows)
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = format!("{BENCH_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{:.3},{:?}",
            r.n_t, r.examples, r.example_steps, r.wall_ms, r.loss_nats
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Likelihood;
    use crate::train::synth;

    #[test]
    fn three_families_and_linear_time() {
        let base = ModelConfig {
            channels: 1,
            height: 8,
            width: 8,
            feature_maps: vec![4],
            latent_maps: vec![2],
            kernel: 3,
            likelihood: Likelihood::Bernoulli,
            ..ModelConfig::default()
        };
        let data = synth::glyphs(16, 8, 3, 1);
        let tcfg = TrainConfig {
            batch_size: 8,
            log_every: 2,
            ..TrainConfig::default()
        };
        let rows = bench_depth::<f32>(&base, &[2, 4, 8], &data, &tcfg, 64, 0).unwrap();
        let csv = bench_csv(&rows);
        assert!(csv.starts_with(BENCH_HEADER));
        let fams: std::collections::BTreeSet<_> = rows.iter().map(|r| r.n_t).collect();
        assert_eq!(fams.len(), 3);
        for r in &rows {
            assert_eq!(r.example_steps, r.examples * r.n_t as u64);
        }
    }
}
