use crate::nn::{ParamStore, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RollbackDecision {
    Kept,
    Reverted,
}

/// Loss-spike detector with a parameter snapshot to fall back to.
///
/// A loss counts as a spike when it is non-finite or exceeds the running
/// mean by more than `(spike_threshold - 1) * |ema|`; for positive losses
/// this is `loss > spike_threshold * ema`.
#[derive(Clone, Debug)]
pub struct RollbackGuard<R> {
    snapshot: ParamStore<R>,
    snapshot_step: u64,
    pub spike_threshold: f64,
    pub ema_decay: f64,
    pub snapshot_every: u64,
    ema_loss: Option<f64>,
    reverts: usize,
}

impl<R: Real> RollbackGuard<R> {
    pub fn new(
        params: &ParamStore<R>,
        spike_threshold: f64,
        ema_decay: f64,
        snapshot_every: u64,
    ) -> Self {
        RollbackGuard {
            snapshot: params.clone(),
            snapshot_step: 0,
            spike_threshold,
            ema_decay,
            snapshot_every: snapshot_every.max(1),
            ema_loss: None,
            reverts: 0,
        }
    }

    pub fn ema(&self) -> Option<f64> {
        self.ema_loss
    }

    pub fn snapshot(&self) -> &ParamStore<R> {
        &self.snapshot
    }

    pub fn snapshot_step(&self) -> u64 {
        self.snapshot_step
    }

    pub fn reverts(&self) -> usize {
        self.reverts
    }

    pub fn is_spike(&self, loss: f64) -> bool {
        if !loss.is_finite() {
            return true;
        }
        match self.ema_loss {
            Some(ema) => loss - ema > (self.spike_threshold - 1.0) * ema.abs(),
            None => false,
        }
    }

    /// Restores the snapshot (parameters and Adam state) on a spike;
    /// otherwise folds `loss` into the running mean.
    pub fn maybe_rollback(&mut self, params: &mut ParamStore<R>, loss: f64) -> RollbackDecision {
        if self.is_spike(loss) {
            self.revert(params);
            return RollbackDecision::Reverted;
        }
        self.ema_loss = Some(match self.ema_loss {
            Some(e) => self.ema_decay * e + (1.0 - self.ema_decay) * loss,
            None => loss,
        });
        RollbackDecision::Kept
    }

    pub fn revert(&mut self, params: &mut ParamStore<R>) {
        *params = self.snapshot.clone();
        self.reverts += 1;
    }

    /// Refreshes the snapshot once `snapshot_every` steps have passed.
    pub fn after_update(&mut self, params: &ParamStore<R>, step: u64) {
        if step >= self.snapshot_step + self.snapshot_every {
            self.snapshot = params.clone();
            self.snapshot_step = step;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Shape4, Tensor4};

    fn store(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("w", &[1], Tensor4::full(Shape4::new(1, 1, 1, 1), v))
            .unwrap();
        s
    }

    #[test]
    fn nan_reverts_and_equal_keeps() {
        let mut p = store(1.0);
        let mut g = RollbackGuard::new(&p, 3.0, 0.99, 500);
        assert_eq!(g.maybe_rollback(&mut p, 2.0), RollbackDecision::Kept);
        assert_eq!(g.maybe_rollback(&mut p, 2.0), RollbackDecision::Kept);
        *p.value_mut(crate::nn::ParamId(0)) = Tensor4::full(Shape4::new(1, 1, 1, 1), 5.0);
        assert_eq!(
            g.maybe_rollback(&mut p, f64::NAN),
            RollbackDecision::Reverted
        );
        assert_eq!(p.flat(), vec![1.0]);
        assert_eq!(g.reverts(), 1);
    }

    #[test]
    fn threshold_boundary() {
        let p = store(0.0);
        let mut g = RollbackGuard::new(&p, 3.0, 0.99, 500);
        let mut q = p.clone();
        g.maybe_rollback(&mut q, 2.0);
        assert!(g.is_spike(6.1));
        assert!(!g.is_spike(5.9));
    }

    #[test]
    fn negative_losses_use_magnitude() {
        let p = store(0.0);
        let mut g = RollbackGuard::new(&p, 3.0, 0.99, 500);
        let mut q = p.clone();
        g.maybe_rollback(&mut q, -1000.0);
        assert!(!g.is_spike(-900.0));
        assert!(!g.is_spike(900.0));
        assert!(g.is_spike(1100.0));
    }

    #[test]
    fn snapshot_refresh_cadence() {
        let mut p = store(0.0);
        let mut g = RollbackGuard::new(&p, 3.0, 0.99, 3);
        for step in 1..=7u64 {
            p.value_mut(crate::nn::ParamId(0)).data_mut()[0] = step as f64;
            g.after_update(&p, step);
        }
        assert_eq!(g.snapshot_step(), 6);
        assert_eq!(g.snapshot().flat(), vec![6.0]);
    }
}
