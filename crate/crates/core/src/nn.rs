//! Parameter containers shared by the model components.

use crate::error::Result;
use crate::tensor::{BatchNormMode, Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Batch-norm running-statistics momentum: `running ← m·running + (1−m)·batch`.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Places parameters on a tape, either as gradient leaves or constants, and
/// remembers the order they were bound in.
pub struct Binder<'t> {
    tape: &'t mut Tape,
    trainable: bool,
    vars: Vec<Var>,
    replay: Option<std::vec::IntoIter<Var>>,
}

impl<'t> Binder<'t> {
    pub fn new(tape: &'t mut Tape, trainable: bool) -> Self {
        Self {
            tape,
            trainable,
            vars: Vec::new(),
            replay: None,
        }
    }

    /// Hands out `vars` in order instead of creating leaves, so parameters
    /// can live on the tape before the model is bound.
    pub fn replay(tape: &'t mut Tape, vars: Vec<Var>) -> Self {
        Self {
            tape,
            trainable: true,
            vars: Vec::new(),
            replay: Some(vars.into_iter()),
        }
    }

    /// Panics when replaying and the variables run out.
    pub fn bind(&mut self, t: &Tensor) -> Var {
        if let Some(next) = self.replay.as_mut() {
            let v = next.next().expect("replay binder ran out of variables");
            assert_eq!(self.tape.shape(v), t.shape(), "replayed variable has the wrong shape");
            self.vars.push(v);
            return v;
        }
        let v = if self.trainable {
            self.tape.param(t.clone())
        } else {
            self.tape.constant(t.clone())
        };
        self.vars.push(v);
        v
    }

    /// Bound variables in binding order.
    pub fn finish(self) -> Vec<Var> {
        self.vars
    }
}

/// Uniform init in `±sqrt(6 / fan_in)`.
pub fn fan_in_uniform(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundBatchNorm {
    pub gamma: Var,
    pub beta: Var,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::ones(&[channels]),
            beta: Tensor::zeros(&[channels]),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }

    pub fn bind(&self, b: &mut Binder) -> BoundBatchNorm {
        BoundBatchNorm {
            gamma: b.bind(&self.gamma),
            beta: b.bind(&self.beta),
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: BoundBatchNorm, x: Var, mode: Mode) -> Result<Var> {
        let bn_mode = match mode {
            Mode::Train => BatchNormMode::Train,
            Mode::Eval => BatchNormMode::Eval {
                mean: &self.running_mean,
                var: &self.running_var,
            },
        };
        tape.batchnorm2d(x, bound.gamma, bound.beta, bn_mode)
    }

    /// Folds the batch statistics recorded at `node` into the running stats.
    /// No-op for nodes that were not train-mode batch norms on a gradient tape.
    pub fn absorb(&mut self, tape: &Tape, node: Var) {
        if let Some((mean, var)) = tape.batch_stats(node) {
            for (r, &m) in self.running_mean.iter_mut().zip(mean) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * m;
            }
            for (r, &v) in self.running_var.iter_mut().zip(var) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * v;
            }
        }
    }
}

/// Fully connected layer, weight `[in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundLinear {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    pub fn new(input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            weight: fan_in_uniform(&[input, output], input, rng),
            bias: Tensor::zeros(&[output]),
        }
    }

    pub fn bind(&self, b: &mut Binder) -> BoundLinear {
        BoundLinear {
            weight: b.bind(&self.weight),
            bias: b.bind(&self.bias),
        }
    }

    pub fn forward(tape: &mut Tape, bound: BoundLinear, x: Var) -> Result<Var> {
        let y = tape.matmul(x, bound.weight)?;
        tape.add(y, bound.bias)
    }
}
