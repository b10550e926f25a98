//! AdamW with decoupled weight decay, and the warmup/cosine learning-rate
//! schedule used for training.

use crate::clip::backend::Real;
use crate::clip::params::ParamStore;

/// AdamW state: first/second moment per parameter plus the step count.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    m: Vec<T>,
    v: Vec<T>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl<T: Real> AdamW<T> {
    pub fn new(n_params: usize, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        AdamW {
            m: vec![T::zero(); n_params],
            v: vec![T::zero(); n_params],
            t: 0,
            beta1,
            beta2,
            eps,
            weight_decay,
        }
    }

    /// Steps taken so far.
    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update from the gradients currently held in `store`. Weight
    /// decay applies only to blocks registered with the decay flag
    /// (weight matrices and embeddings — not biases, gains, or the logit
    /// scale).
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (T::from_f64(self.beta1), T::from_f64(self.beta2));
        let (one_m_b1, one_m_b2) = (
            T::from_f64(1.0 - self.beta1),
            T::from_f64(1.0 - self.beta2),
        );
        let inv_bc1 = T::from_f64(1.0 / bc1);
        let inv_bc2_sqrt = T::from_f64(1.0 / bc2.sqrt());
        let eps = T::from_f64(self.eps);
        let lr_t = T::from_f64(lr);
        let blocks = store.blocks().to_vec();
        for meta in blocks {
            let decay = if meta.decay {
                T::from_f64(lr * self.weight_decay)
            } else {
                T::zero()
            };
            for i in meta.handle.range() {
                let g = store.grads[i];
                self.m[i] = b1 * self.m[i] + one_m_b1 * g;
                self.v[i] = b2 * self.v[i] + one_m_b2 * g * g;
                let m_hat = self.m[i] * inv_bc1;
                let v_hat_sqrt = (self.v[i]).sqrt() * inv_bc2_sqrt;
                let p = store.values[i];
                store.values[i] = p - lr_t * m_hat / (v_hat_sqrt + eps) - decay * p;
            }
        }
    }
}

/// Learning rate at `step` (0-based): linear warmup over `warmup_steps`,
/// then cosine annealing to zero at `total_steps`.
pub fn lr_at(base: f64, step: usize, warmup_steps: usize, total_steps: usize) -> f64 {
    if warmup_steps > 0 && step < warmup_steps {
        return base * (step + 1) as f64 / warmup_steps as f64;
    }
    let span = total_steps.saturating_sub(warmup_steps).max(1);
    let done = step.saturating_sub(warmup_steps).min(span);
    let progress = done as f64 / span as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Scalar AdamW transcription for one parameter.
    struct Scalar {
        m: f64,
        v: f64,
        t: u64,
    }

    impl Scalar {
        fn step(&mut self, p: f64, g: f64, lr: f64, wd: f64) -> f64 {
            const B1: f64 = 0.9;
            const B2: f64 = 0.98;
            const EPS: f64 = 1e-6;
            self.t += 1;
            self.m = B1 * self.m + (1.0 - B1) * g;
            self.v = B2 * self.v + (1.0 - B2) * g * g;
            let m_hat = self.m / (1.0 - B1.powi(self.t as i32));
            let v_hat = self.v / (1.0 - B2.powi(self.t as i32));
            p - lr * m_hat / (v_hat.sqrt() + EPS) - lr * wd * p
        }
    }

    fn store_with(decay: bool, init: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let h = s.add("p", 1, init.len(), decay);
        s.value_mut(h).copy_from_slice(init);
        s
    }

    #[test]
    fn follows_the_scalar_reference_over_many_steps() {
        let mut store = store_with(true, &[0.5, -0.3]);
        let mut opt = AdamW::new(store.len(), 0.9, 0.98, 1e-6, 0.1);
        let mut refs = [
            (0.5, Scalar { m: 0.0, v: 0.0, t: 0 }),
            (-0.3, Scalar { m: 0.0, v: 0.0, t: 0 }),
        ];
        for step in 0..25 {
            // A made-up but deterministic gradient signal.
            let g = [
                (step as f64 * 0.37).sin() + 0.2,
                (step as f64 * 0.11).cos() - 0.1,
            ];
            store.grads.copy_from_slice(&g);
            opt.step(&mut store, 3e-3);
            for (i, (p, sc)) in refs.iter_mut().enumerate() {
                *p = sc.step(*p, g[i], 3e-3, 0.1);
                assert!(
                    (store.values[i] - *p).abs() < 1e-12,
                    "step {step} param {i}: {} vs {p}",
                    store.values[i]
                );
            }
        }
        assert_eq!(opt.steps(), 25);
    }

    #[test]
    fn weight_decay_skips_non_decay_blocks() {
        let mut store = store_with(false, &[1.0]);
        let mut opt = AdamW::new(store.len(), 0.9, 0.98, 1e-6, 0.1);
        store.grads[0] = 0.0;
        opt.step(&mut store, 1e-2);
        // No gradient and no decay: the parameter must not move.
        assert_eq!(store.values[0], 1.0);

        let mut store = store_with(true, &[1.0]);
        let mut opt = AdamW::new(store.len(), 0.9, 0.98, 1e-6, 0.1);
        store.grads[0] = 0.0;
        opt.step(&mut store, 1e-2);
        // Decoupled decay shrinks it even with zero gradient.
        assert!((store.values[0] - (1.0 - 1e-2 * 0.1)).abs() < 1e-15);
    }

    #[test]
    fn schedule_ramps_then_anneals_to_zero() {
        let base = 5e-4;
        let (warmup, total) = (50, 500);
        assert!((lr_at(base, 0, warmup, total) - base / 50.0).abs() < 1e-18);
        assert!((lr_at(base, 49, warmup, total) - base).abs() < 1e-18);
        // Monotone non-increasing after warmup, ending at zero.
        let mut prev = f64::INFINITY;
        for step in warmup..total {
            let lr = lr_at(base, step, warmup, total);
            assert!(lr <= prev + 1e-18);
            prev = lr;
        }
        assert!(lr_at(base, total - 1, warmup, total) < 0.01 * base);
        assert!(lr_at(base, total, warmup, total).abs() < 1e-18);
        // Halfway through the cosine span the rate is half the base.
        assert!((lr_at(base, 275, warmup, total) - 0.5 * base).abs() < 1e-12);
    }

    #[test]
    fn zero_base_rate_freezes_everything() {
        let mut store = store_with(true, &[0.7]);
        let mut opt = AdamW::new(store.len(), 0.9, 0.98, 1e-6, 0.1);
        store.grads[0] = 1.3;
        opt.step(&mut store, 0.0);
        assert_eq!(store.values[0], 0.7);
    }
}
