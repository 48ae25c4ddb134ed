//! Reverse-mode differentiation by recording primitive calls on a tape.
//!
//! Every value produced on a [`Tape`] is immutable and owned by the tape.
//! Records are appended in execution order, so the tape is already
//! topologically sorted and [`Tape::backprop`] simply walks it backwards.

use crate::error::{Error, Result};
use crate::kernels::conv::{self, ConvParams};
use crate::kernels::loss;
use crate::kernels::norm::{self, NormCache, NormMode, RunningStats};
use crate::kernels::pool::{self, PoolParams};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Record<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        params: ConvParams,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        params: ConvParams,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        cache: NormCache<T>,
    },
    Relu {
        x: Var,
    },
    Add {
        xs: Vec<Var>,
    },
    Sum {
        x: Var,
    },
    SumSquares {
        x: Var,
    },
    WeightedSum {
        x: Var,
        weights: Vec<T>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<u8>,
        probs: Vec<T>,
    },
}

/// Ordered record of executed primitives plus the values they produced.
#[derive(Debug, Default)]
pub struct Tape<T> {
    values: Vec<Tensor<T>>,
    records: Vec<Record<T>>,
    requires_grad: Vec<bool>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            records: Vec::new(),
            requires_grad: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, record: Record<T>, requires_grad: bool) -> Var {
        self.values.push(value);
        self.records.push(record);
        self.requires_grad.push(requires_grad);
        Var(self.values.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.requires_grad[v.0])
    }

    /// A differentiable input (parameter or probed tensor).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Record::Leaf, true)
    }

    /// An input that never receives a gradient (e.g. an image batch).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Record::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    /// Gradient accumulated on a leaf by the last [`Tape::backprop`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.values[v.0].grad()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        self.values[v.0].take_grad()
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, params: &ConvParams) -> Result<Var> {
        let out = conv::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), params)?;
        let rg = self.any_grad(&[x, w]) || b.is_some_and(|b| self.requires_grad[b.0]);
        Ok(self.push(
            out,
            Record::Conv2d {
                x,
                w,
                b,
                params: *params,
            },
            rg,
        ))
    }

    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, params: &ConvParams) -> Result<Var> {
        let out = conv::conv_transpose2d(self.value(x), self.value(w), b.map(|b| self.value(b)), params)?;
        let rg = self.any_grad(&[x, w]) || b.is_some_and(|b| self.requires_grad[b.0]);
        Ok(self.push(
            out,
            Record::ConvTranspose2d {
                x,
                w,
                b,
                params: *params,
            },
            rg,
        ))
    }

    pub fn maxpool2d(&mut self, x: Var, params: &PoolParams) -> Result<Var> {
        let (out, argmax) = pool::maxpool2d(self.value(x), params)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Record::MaxPool { x, argmax }, rg))
    }

    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats<T>,
        mode: NormMode,
    ) -> Result<Var> {
        let (out, cache) = norm::batch_norm(self.value(x), self.value(gamma), self.value(beta), stats, mode)?;
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(out, Record::BatchNorm { x, gamma, beta, cache }, rg))
    }

    /// `max(0, x)`. The subgradient at exactly zero is zero.
    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.any_grad(&[x]);
        self.push(out, Record::Relu { x }, rg)
    }

    /// Elementwise sum of two or more identically shaped values.
    pub fn fuse_add(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.len() < 2 {
            return Err(Error::Contract(format!(
                "fuse_add needs at least two inputs, got {}",
                xs.len()
            )));
        }
        let shape = self.value(xs[0]).shape();
        if xs.iter().any(|&v| self.value(v).shape() != shape) {
            let shapes: Vec<String> = xs.iter().map(|&v| self.value(v).shape().to_string()).collect();
            return Err(Error::dim("fuse_add", format!("shapes differ: {}", shapes.join(", "))));
        }
        let mut out = self.value(xs[0]).clone();
        for &v in &xs[1..] {
            for (o, &a) in out.data_mut().iter_mut().zip(self.values[v.0].data()) {
                *o += a;
            }
        }
        let rg = self.any_grad(xs);
        Ok(self.push(out, Record::Add { xs: xs.to_vec() }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.any_grad(&[x]);
        self.push(out, Record::Sum { x }, rg)
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).dot(self.value(x)));
        let rg = self.any_grad(&[x]);
        self.push(out, Record::SumSquares { x }, rg)
    }

    /// `sum(x * weights)` for a constant weight tensor of the same length.
    pub fn weighted_sum(&mut self, x: Var, weights: &[T]) -> Result<Var> {
        if weights.len() != self.value(x).numel() {
            return Err(Error::dim(
                "weights",
                format!("{} weights for {} values", weights.len(), self.value(x).numel()),
            ));
        }
        let total = self.value(x).data().iter().zip(weights).map(|(&a, &b)| a * b).sum();
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::scalar(total),
            Record::WeightedSum {
                x,
                weights: weights.to_vec(),
            },
            rg,
        ))
    }

    /// Mean pixelwise softmax cross-entropy; `labels` laid out `(n, h, w)`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[u8]) -> Result<Var> {
        let (value, probs) = loss::softmax_cross_entropy(self.value(logits), labels)?;
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(value),
            Record::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Propagates d(loss)/d(value) back to every leaf. Leaves that the loss
    /// does not depend on receive an all-zero gradient. Intermediate
    /// gradients are released as soon as they have been consumed.
    pub fn backprop(&mut self, loss: Var) -> Result<()> {
        let shape = self.value(loss).shape();
        if shape != Shape::scalar() {
            return Err(Error::Contract(format!(
                "backprop needs a scalar loss, got shape {shape}"
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.values.len()];
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            if matches!(self.records[i], Record::Leaf) {
                let g = grads[i]
                    .take()
                    .unwrap_or_else(|| vec![T::zero(); self.values[i].numel()]);
                if self.requires_grad[i] {
                    self.values[i].set_grad(g)?;
                }
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if !self.requires_grad[i] {
                continue;
            }
            self.backward_one(i, g, &mut grads)?;
        }
        for i in loss.0 + 1..self.values.len() {
            if matches!(self.records[i], Record::Leaf) && self.requires_grad[i] {
                let n = self.values[i].numel();
                self.values[i].set_grad(vec![T::zero(); n])?;
            }
        }
        Ok(())
    }

    fn backward_one(&self, i: usize, g: Vec<T>, grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let rg = |v: &Var| self.requires_grad[v.0];
        match &self.records[i] {
            Record::Leaf => {}
            Record::Conv2d { x, w, b, params } => {
                let (dx, dw, db) = conv::conv2d_backward(self.value(*x), self.value(*w), params, &g, rg(x))?;
                if let Some(dx) = dx {
                    accumulate(grads, *x, dx);
                }
                accumulate(grads, *w, dw);
                if let (Some(b), Some(db)) = (b, db) {
                    accumulate(grads, *b, db);
                }
            }
            Record::ConvTranspose2d { x, w, b, params } => {
                let (dx, dw, db) = conv::conv_transpose2d_backward(self.value(*x), self.value(*w), params, &g, rg(x))?;
                if let Some(dx) = dx {
                    accumulate(grads, *x, dx);
                }
                accumulate(grads, *w, dw);
                if let (Some(b), Some(db)) = (b, db) {
                    accumulate(grads, *b, db);
                }
            }
            Record::MaxPool { x, argmax } => {
                let dx = pool::maxpool2d_backward(self.value(*x).numel(), argmax, &g);
                accumulate(grads, *x, dx);
            }
            Record::BatchNorm { x, gamma, beta, cache } => {
                let (dx, dg, db) = norm::batch_norm_backward(self.value(*x), self.value(*gamma), cache, &g);
                accumulate(grads, *x, dx);
                accumulate(grads, *gamma, dg);
                accumulate(grads, *beta, db);
            }
            Record::Relu { x } => {
                let dx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(&g)
                    .map(|(&v, &d)| if v > T::zero() { d } else { T::zero() })
                    .collect();
                accumulate(grads, *x, dx);
            }
            Record::Add { xs } => {
                for v in xs {
                    if rg(v) {
                        accumulate(grads, *v, g.clone());
                    }
                }
            }
            Record::Sum { x } => {
                accumulate(grads, *x, vec![g[0]; self.value(*x).numel()]);
            }
            Record::SumSquares { x } => {
                let two = T::from_f64(2.0);
                let dx = self.value(*x).data().iter().map(|&v| two * v * g[0]).collect();
                accumulate(grads, *x, dx);
            }
            Record::WeightedSum { x, weights } => {
                accumulate(grads, *x, weights.iter().map(|&w| w * g[0]).collect());
            }
            Record::SoftmaxCrossEntropy { logits, labels, probs } => {
                let s = self.value(*logits).shape();
                let dx = loss::softmax_cross_entropy_backward(probs, labels, s.n, s.c, s.plane(), g[0]);
                accumulate(grads, *logits, dx);
            }
        }
        Ok(())
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
    match &mut grads[v.0] {
        slot @ None => *slot = Some(g),
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_forward_and_backward_convention() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![-1.0, 0.0, 2.0]).unwrap());
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let l = tape.sum(y);
        tape.backprop(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn all_negative_relu_is_dead() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(Shape::new(1, 2, 2, 2), -0.5));
        let y = tape.relu(x);
        let l = tape.sum(y);
        tape.backprop(l).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
        assert!(tape.grad(x).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fuse_add_sums_and_fans_gradient_out() {
        let mut tape = Tape::<f64>::new();
        let s = Shape::new(1, 2, 2, 2);
        let a = tape.leaf(Tensor::ones(s));
        let b = tape.leaf(Tensor::full(s, 2.0));
        let c = tape.leaf(Tensor::full(s, 3.0));
        let y = tape.fuse_add(&[a, b, c]).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 6.0));
        let l = tape.sum(y);
        tape.backprop(l).unwrap();
        for v in [a, b, c] {
            assert!(tape.grad(v).unwrap().iter().all(|&g| g == 1.0));
        }
    }

    #[test]
    fn fuse_add_of_negation_is_zero() {
        let mut tape = Tape::<f64>::new();
        let t = Tensor::from_fn(Shape::new(1, 1, 2, 3), |[_, _, h, w]| (h * 3 + w) as f64 - 2.5);
        let a = tape.leaf(t.clone());
        let b = tape.leaf(t.map(|v| -v));
        let y = tape.fuse_add(&[a, b]).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fuse_add_rejects_mismatched_shapes_and_single_input() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::ones(Shape::new(1, 1, 2, 2)));
        let b = tape.leaf(Tensor::ones(Shape::new(1, 1, 2, 3)));
        let err = tape.fuse_add(&[a, b]).unwrap_err();
        assert!(err.to_string().contains("(1, 1, 2, 2)") && err.to_string().contains("(1, 1, 2, 3)"));
        assert!(matches!(tape.fuse_add(&[a]), Err(Error::Contract(_))));
    }

    #[test]
    fn sum_gradient_is_ones_and_unused_leaf_gets_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(Shape::new(2, 3, 1, 2), 0.3));
        let unused = tape.leaf(Tensor::full(Shape::new(1, 1, 2, 2), 7.0));
        let l = tape.sum(x);
        tape.backprop(l).unwrap();
        assert!(tape.grad(x).unwrap().iter().all(|&g| g == 1.0));
        assert!(tape.grad(unused).unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn leaf_created_after_loss_gets_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones(Shape::new(1, 1, 1, 2)));
        let l = tape.sum(x);
        let later = tape.leaf(Tensor::ones(Shape::new(1, 1, 1, 1)));
        tape.backprop(l).unwrap();
        assert_eq!(tape.grad(later).unwrap(), &[0.0]);
    }

    #[test]
    fn non_scalar_loss_is_a_contract_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones(Shape::new(1, 1, 2, 2)));
        assert!(matches!(tape.backprop(x), Err(Error::Contract(_))));
    }

    #[test]
    fn conv_weight_gradient_of_sum_is_window_sum() {
        // loss = sum(conv(x; W)) on a 3x3 input with a 2x2 kernel:
        // dL/dW[i,j] = sum of the input entries that W[i,j] touches.
        let mut tape = Tape::<f64>::new();
        let xv = Tensor::from_fn(Shape::new(1, 1, 3, 3), |[_, _, h, w]| (h * 3 + w + 1) as f64);
        let x = tape.constant(xv.clone());
        let w = tape.leaf(Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![0.5, -1.0, 2.0, 0.25]).unwrap());
        let p = ConvParams::new(1, 1, 2).no_bias();
        let y = tape.conv2d(x, w, None, &p).unwrap();
        let l = tape.sum(y);
        tape.backprop(l).unwrap();
        let expected: Vec<f64> = (0..2)
            .flat_map(|i| (0..2).map(move |j| (i, j)))
            .map(|(i, j)| {
                (0..2)
                    .flat_map(|a| (0..2).map(move |b| (a, b)))
                    .map(|(a, b)| xv.at(0, 0, a + i, b + j))
                    .sum()
            })
            .collect();
        assert_eq!(tape.grad(w).unwrap(), expected.as_slice());
        assert_eq!(expected, vec![12.0, 16.0, 24.0, 28.0]);
        // the constant input receives nothing
        assert!(tape.grad(x).is_none());
    }
}
