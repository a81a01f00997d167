//! Epoch-indexed blending of the coarse and refined losses.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LlsMode {
    #[default]
    Linear,
    ConstantHalf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LlsSchedule {
    pub total_epochs: u64,
    pub mode: LlsMode,
}

impl LlsSchedule {
    pub fn new(total_epochs: u64, mode: LlsMode) -> Result<Self> {
        if total_epochs == 0 {
            return Err(Error::invalid("lls", "total_epochs must be positive"));
        }
        Ok(Self { total_epochs, mode })
    }

    /// Weight of the refined loss at `epoch`: `min(epoch / total, 1)` in
    /// linear mode, `0.5` in constant-half mode.
    pub fn alpha(&self, epoch: i64) -> Result<f64> {
        if epoch < 0 {
            return Err(Error::invalid("lls", format!("negative epoch {epoch}")));
        }
        Ok(match self.mode {
            LlsMode::ConstantHalf => 0.5,
            LlsMode::Linear => (epoch as f64 / self.total_epochs as f64).min(1.0),
        })
    }
}

/// `(1 − a)·l1 + a·l2`.
pub fn combine_losses(tape: &mut Tape, l1: Var, l2: Var, a: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&a) {
        return Err(Error::invalid("combine-losses", format!("weight {a} outside [0, 1]")));
    }
    for v in [l1, l2] {
        if tape.value(v).numel() != 1 {
            return Err(Error::NonScalarLoss(tape.shape(v).to_vec()));
        }
    }
    let w1 = tape.scale(l1, 1.0 - a)?;
    let w2 = tape.scale(l2, a)?;
    tape.add(w1, w2)
}

/// Value-level counterpart of [`combine_losses`], evaluated the same way.
pub fn blend(l1: f64, l2: f64, a: f64) -> f64 {
    (1.0 - a) * l1 + a * l2
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    fn combine(l1: f64, l2: f64, a: f64) -> Result<(f64, f64, f64)> {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(l1));
        let y = tape.param(Tensor::scalar(l2));
        let t = combine_losses(&mut tape, x, y, a)?;
        let g = tape.backward(t)?;
        Ok((tape.value(t).item()?, g.get(x).unwrap()[0], g.get(y).unwrap()[0]))
    }

    #[test]
    fn linear_schedule_examples() {
        let s = LlsSchedule::new(100, LlsMode::Linear).unwrap();
        assert_eq!(s.alpha(0).unwrap(), 0.0);
        assert_eq!(s.alpha(37).unwrap(), 0.37);
        assert_eq!(s.alpha(100).unwrap(), 1.0);
        assert_eq!(s.alpha(150).unwrap(), 1.0);
        assert!(s.alpha(-1).is_err());
        assert!(LlsSchedule::new(0, LlsMode::Linear).is_err());
    }

    #[test]
    fn constant_half_ignores_epoch() {
        let s = LlsSchedule::new(10, LlsMode::ConstantHalf).unwrap();
        assert!((0..20).all(|e| s.alpha(e).unwrap() == 0.5));
    }

    #[test]
    fn combine_examples() {
        assert_eq!(combine(2.0, 4.0, 0.0).unwrap().0, 2.0);
        assert_eq!(combine(2.0, 4.0, 1.0).unwrap().0, 4.0);
        assert_eq!(combine(2.0, 4.0, 0.5).unwrap().0, 3.0);
        assert!(combine(2.0, 4.0, 1.5).is_err());
        assert!(combine(2.0, 4.0, -0.1).is_err());
    }

    #[test]
    fn rejects_non_scalar_losses() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::ones(&[2]));
        let y = tape.param(Tensor::scalar(1.0));
        assert!(combine_losses(&mut tape, x, y, 0.5).is_err());
    }

    #[test]
    fn one_minus_alpha_trace_is_nonincreasing() {
        let s = LlsSchedule::new(39, LlsMode::Linear).unwrap();
        let trace: Vec<f64> = (0..60).map(|e| 1.0 - s.alpha(e).unwrap()).collect();
        assert!(trace.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(trace[0], 1.0);
        assert_eq!(trace[39], 0.0);
    }

    proptest! {
        #[test]
        fn combined_loss_is_convex_with_exact_gradients(l1 in -10.0f64..10.0, l2 in -10.0f64..10.0, a in 0.0f64..=1.0) {
            let (t, g1, g2) = combine(l1, l2, a).unwrap();
            let slack = 1e-12 * (1.0 + l1.abs().max(l2.abs()));
            prop_assert!(t >= l1.min(l2) - slack && t <= l1.max(l2) + slack);
            prop_assert_eq!(t, blend(l1, l2, a));
            prop_assert_eq!(g1, 1.0 - a);
            prop_assert_eq!(g2, a);
        }

        #[test]
        fn linear_alpha_in_unit_interval_and_monotone(total in 1u64..500, e in 0i64..1000) {
            let s = LlsSchedule::new(total, LlsMode::Linear).unwrap();
            let a = s.alpha(e).unwrap();
            prop_assert!((0.0..=1.0).contains(&a));
            prop_assert!(s.alpha(e + 1).unwrap() >= a);
        }
    }
}
