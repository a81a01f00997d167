use super::ops::{self, Op, OpAttrs, Saved};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

struct Record {
    op: Op,
    inputs: Vec<Var>,
    saved: Saved,
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    record: Option<Record>,
}

/// Batch-norm statistics source.
pub enum BatchNormMode<'a> {
    /// Normalise with the statistics of the current batch.
    Train,
    /// Normalise with externally kept running statistics.
    Eval { mean: &'a [f64], var: &'a [f64] },
}

/// Record of one forward pass. Nodes are appended in evaluation order, so
/// node ids are already a topological order.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss w.r.t. every leaf that requires one.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros of `len` when the loss does not reach it.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &[f64])> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_deref().map(|g| (Var(i), g)))
    }
}

macro_rules! unary_methods {
    ($($name:ident => $op:expr),* $(,)?) => {
        $(
            pub fn $name(&mut self, x: Var) -> Result<Var> {
                self.apply($op, &[x])
            }
        )*
    };
}

macro_rules! binary_methods {
    ($($name:ident => $op:expr),* $(,)?) => {
        $(
            pub fn $name(&mut self, a: Var, b: Var) -> Result<Var> {
                self.apply($op, &[a, b])
            }
        )*
    };
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, record: Option<Record>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            record,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, false, None)
    }

    /// A leaf whose gradient is reported by [`Tape::backward`].
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, true, None)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Applies a primitive; records it when any input requires a gradient.
    pub fn apply(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let values: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        // conv2d only needs its columns for the kernel gradient
        let want_saved = match op {
            Op::Conv2d { .. } => self.nodes[inputs[1].0].requires_grad,
            _ => requires_grad,
        };
        let (value, saved) = ops::forward(&op, &values, want_saved)?;
        let record = requires_grad.then(|| Record {
            op,
            inputs: inputs.to_vec(),
            saved,
        });
        Ok(self.push(value, requires_grad, record))
    }

    /// Applies a primitive looked up by name.
    pub fn apply_primitive(&mut self, name: &str, inputs: &[Var], attrs: &OpAttrs) -> Result<Var> {
        let op = Op::from_name(name, attrs)?;
        self.apply(op, inputs)
    }

    binary_methods! {
        add => Op::Add,
        sub => Op::Sub,
        mul => Op::Mul,
        div => Op::Div,
        matmul => Op::MatMul,
    }

    unary_methods! {
        relu => Op::Relu,
        sigmoid => Op::Sigmoid,
        softplus => Op::Softplus,
        exp => Op::Exp,
        ln => Op::Ln,
        square => Op::Square,
        sqrt => Op::Sqrt,
        signed_sqrt => Op::SignedSqrt,
        sum_all => Op::SumAll,
        softmax => Op::Softmax,
        log_softmax => Op::LogSoftmax,
        global_avg_pool => Op::GlobalAvgPool,
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.apply(Op::ScalarMul(s), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        self.apply(Op::AddScalar(s), &[x])
    }

    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        self.apply(Op::BatchMatMul { trans_b }, &[a, b])
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        self.apply(Op::Conv2d { stride, padding }, &[x, w])
    }

    pub fn mean(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.apply(Op::Mean { axes: axes.to_vec() }, &[x])
    }

    pub fn sum(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.apply(Op::Sum { axes: axes.to_vec() }, &[x])
    }

    pub fn max(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.apply(Op::Max { axes: axes.to_vec() }, &[x])
    }

    pub fn min(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.apply(Op::Min { axes: axes.to_vec() }, &[x])
    }

    pub fn resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        self.apply(Op::BilinearResize { out_h, out_w }, &[x])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        self.apply(Op::Concat { axis }, xs)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.apply(Op::Reshape { shape: shape.to_vec() }, &[x])
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.apply(Op::Narrow { axis, start, len }, &[x])
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.apply(Op::Clamp { lo, hi }, &[x])
    }

    pub fn batchnorm2d(&mut self, x: Var, gamma: Var, beta: Var, mode: BatchNormMode<'_>) -> Result<Var> {
        const EPS: f64 = 1e-5;
        match mode {
            BatchNormMode::Train => self.apply(Op::BatchNorm2d { train: true, eps: EPS }, &[x, gamma, beta]),
            BatchNormMode::Eval { mean, var } => {
                let c = mean.len();
                let m = self.constant(Tensor::from_parts(vec![c], mean.to_vec()));
                let v = self.constant(Tensor::from_parts(vec![c], var.to_vec()));
                self.apply(Op::BatchNorm2d { train: false, eps: EPS }, &[x, gamma, beta, m, v])
            }
        }
    }

    /// Batch mean and biased variance computed by a train-mode batch-norm node.
    pub fn batch_stats(&self, v: Var) -> Option<(&[f64], &[f64])> {
        match &self.nodes[v.0].record {
            Some(Record {
                op: Op::BatchNorm2d { train: true, .. },
                saved: Saved::BatchNorm { mean, var, .. },
                ..
            }) => Some((mean, var)),
            _ => None,
        }
    }

    /// Mean softmax cross-entropy of `[B,K]` logits against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::shape("cross-entropy", &[&shape, &[labels.len()]]));
        }
        let k = shape[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::invalid(
                "cross-entropy",
                format!("label {bad} out of range for {k} classes"),
            ));
        }
        let mut onehot = vec![0.0; labels.len() * k];
        for (i, &l) in labels.iter().enumerate() {
            onehot[i * k + l] = 1.0;
        }
        let onehot = self.constant(Tensor::from_parts(shape, onehot));
        let logp = self.log_softmax(logits)?;
        let picked = self.mul(logp, onehot)?;
        let total = self.sum_all(picked)?;
        self.scale(total, -1.0 / labels.len() as f64)
    }

    /// Reverse pass from a scalar `loss`; returns gradients of every
    /// gradient-requiring leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.numel() != 1 {
            return Err(Error::NonScalarLoss(loss_node.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !loss_node.requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            let Some(record) = &node.record else { continue };
            let Some(g) = grads[id].take() else { continue };
            let inputs: Vec<&Tensor> = record.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let needs: Vec<bool> = record.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
            let input_grads = ops::backward(&record.op, &inputs, &node.value, &record.saved, &g, &needs);
            for (v, ig) in record.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(ig),
                }
            }
        }
        Ok(Gradients { grads })
    }
}
