//! Exponential-moving-average shadow of the speaker encoder.
//!
//! The optimizer updates `theta_model`; after every step the shadow moves
//! towards it by `theta_ema = alpha * theta_ema + (1 - alpha) * theta_model`.
//! Batch-norm running statistics are averaged like any other entry.

use crate::error::{invalid, Error, Result};
use crate::nn::ParamStore;
use crate::real::Real;

pub const DEFAULT_ALPHA: f64 = 0.999;

#[derive(Debug, Clone, PartialEq)]
pub struct EmaState<T> {
    pub theta_model: ParamStore<T>,
    pub theta_ema: ParamStore<T>,
    pub alpha: f64,
    pub step: u64,
}

impl<T: Real> EmaState<T> {
    /// Both copies start from `init`.
    pub fn new(init: &ParamStore<T>, alpha: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&alpha) {
            return Err(invalid(format!("EMA alpha {alpha} outside [0, 1)")));
        }
        Ok(Self {
            theta_model: init.clone(),
            theta_ema: init.clone(),
            alpha,
            step: 0,
        })
    }

    /// Apply one averaging step after the optimizer has moved `theta_model`.
    pub fn update(&mut self) -> Result<()> {
        if !self.theta_model.same_layout(&self.theta_ema) {
            return Err(Error::Corruption(
                "EMA copies have different layouts".into(),
            ));
        }
        let a = T::lit(self.alpha);
        let b = T::lit(1.0 - self.alpha);
        for (e, m) in self
            .theta_ema
            .entries_mut()
            .iter_mut()
            .zip(self.theta_model.entries())
        {
            for (x, &y) in e.data.iter_mut().zip(&m.data) {
                *x = a * *x + b * y;
            }
        }
        self.step += 1;
        Ok(())
    }

    /// Immutable copy of the smoothed parameters.
    pub fn snapshot(&self) -> ParamStore<T> {
        self.theta_ema.clone()
    }
}

/// `c + alpha^k (e0 - c)`: the shadow after `k` steps towards a constant.
pub fn closed_form(e0: f64, c: f64, alpha: f64, k: u32) -> f64 {
    c + alpha.powi(k as i32) * (e0 - c)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> ParamStore<f64> {
        let mut p = ParamStore::new();
        p.push("w", &[1], vec![v], true);
        p
    }

    #[test]
    fn alpha_zero_copies_model() {
        let mut s = EmaState::new(&scalar(1.0), 0.0).unwrap();
        s.theta_model.entries_mut()[0].data[0] = 0.37;
        s.update().unwrap();
        assert_eq!(s.theta_ema, s.theta_model);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn matches_geometric_recursion() {
        let mut s = EmaState::new(&scalar(2.0), DEFAULT_ALPHA).unwrap();
        s.theta_model.entries_mut()[0].data[0] = -1.0;
        for _ in 0..10 {
            s.update().unwrap();
        }
        let want = closed_form(2.0, -1.0, DEFAULT_ALPHA, 10);
        let got = s.theta_ema.entries()[0].data[0];
        assert!(((got - want) / want).abs() < 1e-12);
    }

    #[test]
    fn snapshot_is_a_copy() {
        let mut s = EmaState::new(&scalar(1.0), 0.9).unwrap();
        let snap = s.snapshot();
        assert_eq!(snap, scalar(1.0));
        s.theta_model.entries_mut()[0].data[0] = 5.0;
        s.update().unwrap();
        assert_eq!(snap, scalar(1.0));
        assert_eq!(s.snapshot(), s.snapshot());
    }

    #[test]
    fn rejects_bad_alpha_and_layouts() {
        assert!(EmaState::new(&scalar(0.0), 1.0).is_err());
        assert!(EmaState::new(&scalar(0.0), -0.1).is_err());
        let mut s = EmaState::new(&scalar(0.0), 0.5).unwrap();
        s.theta_model.push("extra", &[1], vec![0.0], true);
        assert!(matches!(s.update(), Err(Error::Corruption(_))));
    }

    proptest::proptest! {
        #[test]
        fn shadow_stays_in_convex_hull(
            alpha in 0.0f64..0.999,
            init in -5.0f64..5.0,
            targets in proptest::collection::vec(-5.0f64..5.0, 1..60),
        ) {
            let mut s = EmaState::new(&scalar(init), alpha).unwrap();
            let (mut lo, mut hi) = (init, init);
            for &t in &targets {
                s.theta_model.entries_mut()[0].data[0] = t;
                s.update().unwrap();
                lo = lo.min(t);
                hi = hi.max(t);
                let e = s.theta_ema.entries()[0].data[0];
                proptest::prop_assert!(lo <= e && e <= hi, "{e} outside [{lo}, {hi}]");
            }
        }

        #[test]
        fn distance_to_fixed_target_contracts(alpha in 0.0f64..0.999, init in -5.0f64..5.0, target in -5.0f64..5.0) {
            let mut s = EmaState::new(&scalar(init), alpha).unwrap();
            s.theta_model.entries_mut()[0].data[0] = target;
            let mut gap = (init - target).abs();
            for _ in 0..20 {
                s.update().unwrap();
                let next = (s.theta_ema.entries()[0].data[0] - target).abs();
                proptest::prop_assert!(next <= alpha * gap + 1e-12);
                gap = next;
            }
        }
    }
}
