use crate::error::{Error, Result};
use crate::nn::{ParamStore, Real, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |b: f64| b > 0.0 && b < 1.0;
        if !(self.lr >= 0.0) || !unit(self.beta1) || !unit(self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config(format!("invalid Adam settings {self:?}")));
        }
        Ok(())
    }
}

/// One bias-corrected Adam update over every parameter of `store`.
///
/// Gradients are checked for finiteness before anything is modified, so an
/// error leaves the store untouched.
pub fn adam_step<R: Real>(
    store: &mut ParamStore<R>,
    grads: &[Tensor4<R>],
    cfg: &AdamConfig,
) -> Result<()> {
    if grads.len() != store.len() {
        return Err(Error::shape(
            "adam_step",
            format!("{} gradients", store.len()),
            grads.len(),
        ));
    }
    for (id, g) in store.ids().zip(grads) {
        g.expect_shape("adam_step", store.value(id).shape())?;
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient(store.name(id).to_string()));
        }
    }
    let t = store.step() + 1;
    let bc1 = 1.0 - cfg.beta1.powf(t as f64);
    let bc2 = 1.0 - cfg.beta2.powf(t as f64);
    let (b1, b2) = (R::of(cfg.beta1), R::of(cfg.beta2));
    let (c1, c2) = (R::one() - b1, R::one() - b2);
    let step_size = R::of(cfg.lr / bc1);
    let inv_bc2_sqrt = R::of(1.0 / bc2.sqrt());
    let eps = R::of(cfg.eps);
    let ids: Vec<_> = store.ids().collect();
    for (id, g) in ids.into_iter().zip(grads) {
        let (p, m, v) = store.moments_mut(id);
        for i in 0..g.len() {
            let gi = g.data()[i];
            let mi = b1 * m.data()[i] + c1 * gi;
            let vi = b2 * v.data()[i] + c2 * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            p.data_mut()[i] -= step_size * mi / (vi.sqrt() * inv_bc2_sqrt + eps);
        }
    }
    store.set_step(t);
    Ok(())
}

/// Scales `grads` so that their global L2 norm is at most `max_norm`;
/// returns the norm before scaling.
pub fn clip_global_norm<R: Real>(grads: &mut [Tensor4<R>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let k = R::of(max_norm / norm);
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= k;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Shape4;

    fn scalar_store(x: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("w", &[1], Tensor4::full(Shape4::new(1, 1, 1, 1), x))
            .unwrap();
        s
    }

    fn g(x: f64) -> Vec<Tensor4<f64>> {
        vec![Tensor4::full(Shape4::new(1, 1, 1, 1), x)]
    }

    #[test]
    fn zero_gradient_from_fresh_state_is_identity() {
        let mut s = scalar_store(1.25);
        adam_step(&mut s, &g(0.0), &AdamConfig::default()).unwrap();
        assert_eq!(s.value(crate::nn::ParamId(0)).data()[0], 1.25);
        assert_eq!(s.step(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let cfg = AdamConfig::default();
        for grad in [3.0, -0.01, 250.0] {
            let mut s = scalar_store(0.0);
            adam_step(&mut s, &g(grad), &cfg).unwrap();
            let moved = s.value(crate::nn::ParamId(0)).data()[0];
            // m_hat = g, v_hat = g^2: step = lr * g / (|g| + eps)
            let want = -cfg.lr * grad / (grad.abs() + cfg.eps);
            assert!((moved - want).abs() < 1e-15, "{moved} vs {want}");
            assert!((moved.abs() - cfg.lr).abs() < cfg.lr * cfg.eps / grad.abs() * 2.0);
        }
    }

    #[test]
    fn two_steps_follow_scalar_trace() {
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let mut s = scalar_store(1.0);
        adam_step(&mut s, &g(0.5), &cfg).unwrap();
        adam_step(&mut s, &g(0.5), &cfg).unwrap();
        // hand-rolled scalar Adam
        let (mut p, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=2 {
            m = 0.9 * m + 0.1 * 0.5;
            v = 0.999 * v + 0.001 * 0.25;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            p -= 0.1 * mh / (vh.sqrt() + 1e-8);
        }
        let got = s.value(crate::nn::ParamId(0)).data()[0];
        assert!((got - p).abs() < 1e-14, "{got} vs {p}");
    }

    #[test]
    fn non_finite_gradient_names_parameter_and_changes_nothing() {
        let mut s = scalar_store(2.0);
        let before = s.clone();
        let err = adam_step(
            &mut s,
            &[Tensor4::from_vec(Shape4::new(1, 1, 1, 1), vec![f64::NAN])],
            &AdamConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(ref n) if n == "w"));
        assert_eq!(s, before);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut gs = vec![Tensor4::<f64>::full(Shape4::new(1, 4, 1, 1), 10.0)];
        let norm = clip_global_norm(&mut gs, 10.0);
        assert!((norm - 20.0).abs() < 1e-12);
        let after: f64 = gs[0].data().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((after - 10.0).abs() < 1e-12);
    }
}
