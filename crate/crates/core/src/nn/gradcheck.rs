use crate::error::Result;
use crate::nn::{ParamId, ParamStore, Tensor4};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Central-difference half step.
    pub eps: f64,
    /// Elements probed per parameter tensor (evenly strided); 0 means all.
    pub max_probes_per_param: usize,
    /// Denominator floor so near-zero gradients are compared absolutely.
    pub abs_floor: f64,
    /// Use the fourth-order five-point stencil instead of the central
    /// difference.
    pub five_point: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-6,
            max_probes_per_param: 0,
            abs_floor: 1e-6,
            five_point: false,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub probes: usize,
    /// `(parameter, element, analytic, numeric)` of the worst probe.
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Compares the gradients returned by `loss_fn` against central finite
/// differences of its loss. `loss_fn` must be deterministic: any sampling
/// noise has to be frozen by the caller.
pub fn grad_check<F>(params: &ParamStore<f64>, eps: f64, loss_fn: F) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore<f64>) -> Result<(f64, Vec<Tensor4<f64>>)>,
{
    grad_check_with(
        params,
        &GradCheckOptions {
            eps,
            ..GradCheckOptions::default()
        },
        loss_fn,
    )
}

pub fn grad_check_with<F>(
    params: &ParamStore<f64>,
    opts: &GradCheckOptions,
    mut loss_fn: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore<f64>) -> Result<(f64, Vec<Tensor4<f64>>)>,
{
    let (_, analytic) = loss_fn(params)?;
    let mut probe = params.clone();
    let mut report = GradCheckReport::default();
    for id in params.ids().collect::<Vec<ParamId>>() {
        let len = params.value(id).len();
        let stride = match opts.max_probes_per_param {
            0 => 1,
            m => len.div_ceil(m).max(1),
        };
        for i in (0..len).step_by(stride) {
            let orig = params.value(id).data()[i];
            let mut at = |k: f64| -> Result<f64> {
                probe.value_mut(id).data_mut()[i] = orig + k * opts.eps;
                Ok(loss_fn(&probe)?.0)
            };
            let numeric = if opts.five_point {
                (8.0 * (at(1.0)? - at(-1.0)?) - (at(2.0)? - at(-2.0)?)) / (12.0 * opts.eps)
            } else {
                (at(1.0)? - at(-1.0)?) / (2.0 * opts.eps)
            };
            probe.value_mut(id).data_mut()[i] = orig;
            let a = analytic[id.0].data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.abs_floor);
            report.probes += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((params.name(id).to_string(), i, a, numeric));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Graph, Padding, Shape4};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_loss_has_exact_gradient() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        store
            .add(
                "p",
                &[1, 3, 2, 2],
                Tensor4::randn(Shape4::new(1, 3, 2, 2), &mut rng),
            )
            .unwrap();
        let report = grad_check(&store, 1e-5, |s| {
            let p = s.value(ParamId(0));
            let loss = p.data().iter().map(|v| v * v).sum::<f64>() / 2.0;
            Ok((loss, vec![p.clone()]))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-8, "{report:?}");
        assert_eq!(report.probes, 12);
    }

    #[test]
    fn conv_sum_loss_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let w = store
            .add(
                "w",
                &[2, 3, 3, 3],
                Tensor4::randn(Shape4::new(2, 3, 3, 3), &mut rng),
            )
            .unwrap();
        let b = store
            .add("b", &[2], Tensor4::randn(Shape4::new(1, 2, 1, 1), &mut rng))
            .unwrap();
        let x = Tensor4::randn(Shape4::new(2, 3, 6, 6), &mut rng);
        let report = grad_check(&store, 1e-6, |s| {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let wv = g.param(s, w);
            let bv = g.param(s, b);
            let y = g.conv(xv, wv, Some(bv), 2, Padding::uniform(1))?;
            let sq = g.mul(y, y)?;
            let out = g.sum(sq);
            let grads = g.backward(out, s.len(), s)?;
            Ok((g.value(out).data()[0], grads.params))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }
}
