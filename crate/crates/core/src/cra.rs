//! Counterfactual attention: replace the learned attention with an unrelated
//! map, classify again with the same weights, and train on the difference.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::fmt;
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CounterfactualMode {
    #[default]
    UniformRandom,
    Shuffled,
    ConstantMean,
}

impl CounterfactualMode {
    pub const ALL: [CounterfactualMode; 3] = [Self::UniformRandom, Self::Shuffled, Self::ConstantMean];

    pub fn name(self) -> &'static str {
        match self {
            Self::UniformRandom => "uniform-random",
            Self::Shuffled => "shuffled",
            Self::ConstantMean => "constant-mean",
        }
    }
}

impl fmt::Display for CounterfactualMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CounterfactualMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid("counterfactual-mode", format!("unknown mode {s:?}")))
    }
}

/// Draws a counterfactual stack shaped like `learned` (`[B,D,h,w]`).
/// The result is a plain tensor; callers place it on the tape as a constant.
pub fn sample_counterfactual(learned: &Tensor, mode: CounterfactualMode, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let s = learned.shape();
    if s.len() != 4 {
        return Err(Error::shape("sample-counterfactual", &[s]));
    }
    Ok(match mode {
        CounterfactualMode::UniformRandom => Tensor::from_fn(s, |_| rng.gen::<f64>()),
        CounterfactualMode::ConstantMean => {
            let mean = learned.data().iter().sum::<f64>() / learned.numel() as f64;
            Tensor::full(s, mean)
        }
        CounterfactualMode::Shuffled => {
            let hw = s[2] * s[3];
            let mut out = learned.clone();
            for plane in out.data_mut().chunks_mut(hw) {
                plane.shuffle(rng);
            }
            out
        }
    })
}

/// Factual logits, counterfactual logits and their difference, all `[B,K]`.
#[derive(Clone, Copy, Debug)]
pub struct EffectTriple {
    pub y: Var,
    pub y_bar: Var,
    pub effect: Var,
}

pub fn effect_logits(tape: &mut Tape, y: Var, y_bar: Var) -> Result<EffectTriple> {
    if tape.shape(y) != tape.shape(y_bar) {
        return Err(Error::shape("effect-logits", &[tape.shape(y), tape.shape(y_bar)]));
    }
    let effect = tape.sub(y, y_bar)?;
    Ok(EffectTriple { y, y_bar, effect })
}

/// Mean cross-entropy of the effect logits against `labels`.
pub fn effect_loss(tape: &mut Tape, triple: &EffectTriple, labels: &[usize]) -> Result<Var> {
    tape.cross_entropy(triple.effect, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn logits(tape: &mut Tape, rows: &[&[f64]]) -> Var {
        let k = rows[0].len();
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        tape.param(Tensor::new(&[rows.len(), k], data).unwrap())
    }

    #[test]
    fn mode_names_round_trip() {
        for m in CounterfactualMode::ALL {
            assert_eq!(m.name().parse::<CounterfactualMode>().unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(json, format!("\"{}\"", m.name()));
        }
        assert!("sign".parse::<CounterfactualMode>().is_err());
    }

    #[test]
    fn constant_mean_of_constant_stack() {
        let a = Tensor::full(&[2, 3, 4, 4], 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = sample_counterfactual(&a, CounterfactualMode::ConstantMean, &mut rng).unwrap();
        assert!(m.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn uniform_sampling_is_seeded_and_in_range() {
        let a = Tensor::zeros(&[2, 3, 4, 4]);
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            sample_counterfactual(&a, CounterfactualMode::UniformRandom, &mut rng).unwrap()
        };
        assert_eq!(draw(5), draw(5));
        assert_ne!(draw(5), draw(6));
        assert!(draw(5).data().iter().all(|&v| (0.0..1.0).contains(&v)));
    }

    #[test]
    fn shuffling_preserves_each_channel_multiset() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::from_fn(&[2, 3, 4, 5], |_| rng.gen_range(0.0..1.0));
        let m = sample_counterfactual(&a, CounterfactualMode::Shuffled, &mut rng).unwrap();
        assert_ne!(a, m);
        for (pa, pm) in a.data().chunks(20).zip(m.data().chunks(20)) {
            let mut x = pa.to_vec();
            let mut y = pm.to_vec();
            x.sort_by(f64::total_cmp);
            y.sort_by(f64::total_cmp);
            assert_eq!(x, y);
        }
    }

    #[test]
    fn effect_is_exact_difference() {
        let mut tape = Tape::new();
        let y = logits(&mut tape, &[&[2.0, 0.0]]);
        let yb = logits(&mut tape, &[&[1.0, 1.0]]);
        let t = effect_logits(&mut tape, y, yb).unwrap();
        assert_eq!(tape.value(t.effect).data(), &[1.0, -1.0]);
        let t = effect_logits(&mut tape, y, y).unwrap();
        assert!(tape.value(t.effect).data().iter().all(|&v| v == 0.0));
        let short = logits(&mut tape, &[&[1.0, 1.0, 1.0]]);
        assert!(effect_logits(&mut tape, y, short).is_err());
    }

    #[test]
    fn shift_leaves_effect_argmax_unchanged() {
        let mut tape = Tape::new();
        let y = logits(&mut tape, &[&[0.3, 2.0, -1.0]]);
        let yb = logits(&mut tape, &[&[1.0, 0.5, 0.2]]);
        let ys = tape.add_scalar(y, 7.5).unwrap();
        let ybs = tape.add_scalar(yb, 7.5).unwrap();
        let a = effect_logits(&mut tape, y, yb).unwrap();
        let b = effect_logits(&mut tape, ys, ybs).unwrap();
        let argmax = |t: &Tensor| t.data().iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert_eq!(argmax(tape.value(a.effect)), argmax(tape.value(b.effect)));
    }

    #[test]
    fn null_intervention_costs_log_k() {
        for k in [2usize, 5, 10] {
            let mut tape = Tape::new();
            let row: Vec<f64> = (0..k).map(|i| i as f64 * 0.37).collect();
            let y = logits(&mut tape, &[&row]);
            let t = effect_logits(&mut tape, y, y).unwrap();
            let loss = effect_loss(&mut tape, &t, &[k - 1]).unwrap();
            assert_eq!(tape.value(loss).item().unwrap(), (k as f64).ln());
        }
    }

    #[test]
    fn peaked_effect_costs_almost_nothing() {
        let mut tape = Tape::new();
        let y = logits(&mut tape, &[&[40.0, 0.0, 0.0]]);
        let yb = logits(&mut tape, &[&[0.0, 0.0, 0.0]]);
        let t = effect_logits(&mut tape, y, yb).unwrap();
        let loss = effect_loss(&mut tape, &t, &[0]).unwrap();
        assert!(tape.value(loss).item().unwrap() < 1e-12);
    }

    #[test]
    fn rejects_out_of_range_label() {
        let mut tape = Tape::new();
        let y = logits(&mut tape, &[&[1.0, 2.0]]);
        let t = effect_logits(&mut tape, y, y).unwrap();
        assert!(effect_loss(&mut tape, &t, &[2]).is_err());
    }

    #[test]
    fn gradients_are_softmax_minus_onehot_and_its_negation() {
        let mut tape = Tape::new();
        let y = logits(&mut tape, &[&[0.5, -1.0, 2.0]]);
        let yb = logits(&mut tape, &[&[1.5, 0.25, -0.5]]);
        let t = effect_logits(&mut tape, y, yb).unwrap();
        let loss = effect_loss(&mut tape, &t, &[1]).unwrap();
        let g = tape.backward(loss).unwrap();
        let e: Vec<f64> = tape.value(t.effect).data().to_vec();
        let z: f64 = e.iter().map(|v| v.exp()).sum();
        let expected: Vec<f64> = e
            .iter()
            .enumerate()
            .map(|(i, v)| v.exp() / z - if i == 1 { 1.0 } else { 0.0 })
            .collect();
        let gy = g.get(y).unwrap();
        let gyb = g.get(yb).unwrap();
        for i in 0..3 {
            assert!((gy[i] - expected[i]).abs() < 1e-12);
            assert_eq!(gyb[i], -gy[i]);
        }
    }
}
