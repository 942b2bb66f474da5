//! Reverse-mode automatic differentiation over a dynamically recorded graph.
//!
//! A [`Graph`] owns every tensor produced while it records. Operations append
//! nodes in execution order, which is already a valid reverse-traversal order,
//! so [`Graph::backward`] is a single reverse sweep that visits each node once.
//! Inference never touches a graph: the direct kernel path in [`crate::ops`]
//! is used instead, so no backward state is retained outside training.

use crate::loss;
use crate::ops;
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

enum Op<T: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Matmul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Relu(Var),
    Softmax(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: (usize, usize),
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        stats: ops::BnBatchStats<T>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        mean: Vec<T>,
        var: Vec<T>,
    },
    ConcatChannels(Var, Var),
    Reshape(Var),
    Sum(Var),
    SelectScalar {
        x: Var,
        index: usize,
    },
    FocalLoss {
        probs: Var,
        targets: Vec<usize>,
        gamma: f64,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    requires: bool,
    op: Op<T>,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Inserts an input tensor. Gradients accumulate into it iff `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a node, if backward has reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires
    }

    fn push(&mut self, value: Tensor<T>, requires: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn req(&self, v: Var) -> bool {
        self.nodes[v.0].requires
    }

    fn val(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = ops::add(self.val(a), self.val(b))?;
        let requires = self.req(a) || self.req(b);
        Ok(self.push(value, requires, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = ops::sub(self.val(a), self.val(b))?;
        let requires = self.req(a) || self.req(b);
        Ok(self.push(value, requires, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = ops::mul(self.val(a), self.val(b))?;
        let requires = self.req(a) || self.req(b);
        Ok(self.push(value, requires, Op::Mul(a, b)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = ops::matmul(self.val(a), self.val(b))?;
        let requires = self.req(a) || self.req(b);
        Ok(self.push(value, requires, Op::Matmul(a, b)))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        let value = ops::linear_forward(self.val(x), self.val(w), self.val(b))?;
        let requires = self.req(x) || self.req(w) || self.req(b);
        Ok(self.push(value, requires, Op::Linear { x, w, b }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = ops::relu(self.val(x));
        let requires = self.req(x);
        self.push(value, requires, Op::Relu(x))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var, TensorError> {
        let value = ops::softmax_rows(self.val(x))?;
        let requires = self.req(x);
        Ok(self.push(value, requires, Op::Softmax(x)))
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: (usize, usize),
    ) -> Result<Var, TensorError> {
        let value = ops::conv2d_forward(self.val(x), self.val(w), self.val(b), stride, pad)?;
        let requires = self.req(x) || self.req(w) || self.req(b);
        Ok(self.push(value, requires, Op::Conv2d { x, w, b, stride, pad }))
    }

    pub fn maxpool2d(&mut self, x: Var, size: usize, stride: usize) -> Result<Var, TensorError> {
        let (value, argmax) = ops::maxpool_forward(self.val(x), size, stride)?;
        let requires = self.req(x);
        Ok(self.push(value, requires, Op::MaxPool2d { x, argmax }))
    }

    /// Train-mode batch norm; also returns the batch statistics so the layer
    /// can update its running averages.
    pub fn batchnorm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, Vec<T>, Vec<T>), TensorError> {
        let (value, stats) =
            ops::batchnorm_train_forward(self.val(x), self.val(gamma), self.val(beta), eps)?;
        let (mean, var) = (stats.mean.clone(), stats.var.clone());
        let requires = self.req(x) || self.req(gamma) || self.req(beta);
        let v = self.push(
            value,
            requires,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                eps,
                stats,
            },
        );
        Ok((v, mean, var))
    }

    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        var: Vec<T>,
        eps: f64,
    ) -> Var {
        let value =
            ops::batchnorm_eval_forward(self.val(x), self.val(gamma), self.val(beta), &mean, &var, eps);
        let requires = self.req(x) || self.req(gamma) || self.req(beta);
        self.push(
            value,
            requires,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                eps,
                mean,
                var,
            },
        )
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = ops::concat_channels(self.val(a), self.val(b))?;
        let requires = self.req(a) || self.req(b);
        Ok(self.push(value, requires, Op::ConcatChannels(a, b)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let value = self.val(x).reshape(shape)?;
        let requires = self.req(x);
        Ok(self.push(value, requires, Op::Reshape(x)))
    }

    /// Full reduction to a rank-0 scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let mut total = T::zero();
        for &v in self.val(x).iter() {
            total += v;
        }
        let requires = self.req(x);
        self.push(Tensor::scalar(total), requires, Op::Sum(x))
    }

    /// Picks one element (by flat index) as a rank-0 scalar.
    pub fn select_scalar(&mut self, x: Var, index: usize) -> Result<Var, TensorError> {
        let t = self.val(x);
        if index >= t.numel() {
            return Err(TensorError::IndexOutOfBounds {
                index,
                len: t.numel(),
            });
        }
        let value = Tensor::scalar(t.data()[index]);
        let requires = self.req(x);
        Ok(self.push(value, requires, Op::SelectScalar { x, index }))
    }

    /// Mean focal loss over the batch; `probs` must be row-stochastic [B, C].
    pub fn focal_loss(
        &mut self,
        probs: Var,
        targets: &[usize],
        gamma: f64,
    ) -> Result<Var, TensorError> {
        let value = loss::focal_loss_forward(self.val(probs), targets, gamma)?;
        let requires = self.req(probs);
        Ok(self.push(
            Tensor::scalar(value),
            requires,
            Op::FocalLoss {
                probs,
                targets: targets.to_vec(),
                gamma,
            },
        ))
    }

    /// Accumulates d(loss)/d(node) into every reachable node with
    /// `requires_grad`. Calling backward again without clearing adds on top;
    /// the training loop starts from a fresh graph each step instead.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        let loss_node = &self.nodes[loss.0];
        if !loss_node.value.is_scalar() {
            return Err(TensorError::NonScalarLoss(loss_node.value.shape().to_vec()));
        }
        let mut adjoint: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        adjoint[loss.0] = Some(Tensor::scalar(T::one()));

        for i in (0..=loss.0).rev() {
            let adj = match adjoint[i].take() {
                Some(a) => a,
                None => continue,
            };
            if !self.nodes[i].requires {
                continue;
            }
            self.propagate(i, &adj, &mut adjoint);
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(g) => {
                    for (dst, &src) in g.data_mut().iter_mut().zip(adj.iter()) {
                        *dst += src;
                    }
                }
                None => node.grad = Some(adj),
            }
        }
        Ok(())
    }

    fn accumulate(adjoint: &mut [Option<Tensor<T>>], v: Var, contribution: Tensor<T>) {
        match &mut adjoint[v.0] {
            Some(existing) => {
                for (dst, &src) in existing.data_mut().iter_mut().zip(contribution.iter()) {
                    *dst += src;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
    }

    fn propagate(&self, i: usize, adj: &Tensor<T>, adjoint: &mut [Option<Tensor<T>>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.req(*a) {
                    Self::accumulate(adjoint, *a, ops::reduce_to_shape(adj, self.val(*a).shape()));
                }
                if self.req(*b) {
                    Self::accumulate(adjoint, *b, ops::reduce_to_shape(adj, self.val(*b).shape()));
                }
            }
            Op::Sub(a, b) => {
                if self.req(*a) {
                    Self::accumulate(adjoint, *a, ops::reduce_to_shape(adj, self.val(*a).shape()));
                }
                if self.req(*b) {
                    let neg = adj.map(|v| -v);
                    Self::accumulate(adjoint, *b, ops::reduce_to_shape(&neg, self.val(*b).shape()));
                }
            }
            Op::Mul(a, b) => {
                if self.req(*a) {
                    let da = ops::mul(adj, self.val(*b)).expect("recorded shapes are consistent");
                    Self::accumulate(adjoint, *a, ops::reduce_to_shape(&da, self.val(*a).shape()));
                }
                if self.req(*b) {
                    let db = ops::mul(adj, self.val(*a)).expect("recorded shapes are consistent");
                    Self::accumulate(adjoint, *b, ops::reduce_to_shape(&db, self.val(*b).shape()));
                }
            }
            Op::Matmul(a, b) => {
                let (da, db) = ops::matmul_backward(self.val(*a), self.val(*b), adj);
                if self.req(*a) {
                    Self::accumulate(adjoint, *a, da);
                }
                if self.req(*b) {
                    Self::accumulate(adjoint, *b, db);
                }
            }
            Op::Linear { x, w, b } => {
                let (dx, dw, db) = ops::linear_backward(self.val(*x), self.val(*w), adj);
                if self.req(*x) {
                    Self::accumulate(adjoint, *x, dx);
                }
                if self.req(*w) {
                    Self::accumulate(adjoint, *w, dw);
                }
                if self.req(*b) {
                    Self::accumulate(adjoint, *b, db);
                }
            }
            Op::Relu(x) => {
                if self.req(*x) {
                    Self::accumulate(adjoint, *x, ops::relu_backward(self.val(*x), adj));
                }
            }
            Op::Softmax(x) => {
                if self.req(*x) {
                    let dx = ops::softmax_rows_backward(&self.nodes[i].value, adj);
                    Self::accumulate(adjoint, *x, dx);
                }
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let (dx, dw, db) =
                    ops::conv2d_backward(self.val(*x), self.val(*w), adj, *stride, *pad);
                if self.req(*x) {
                    Self::accumulate(adjoint, *x, dx);
                }
                if self.req(*w) {
                    Self::accumulate(adjoint, *w, dw);
                }
                if self.req(*b) {
                    Self::accumulate(adjoint, *b, db);
                }
            }
            Op::MaxPool2d { x, argmax } => {
                if self.req(*x) {
                    let dx = ops::maxpool_backward(adj, argmax, self.val(*x).shape());
                    Self::accumulate(adjoint, *x, dx);
                }
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                eps,
                stats,
            } => {
                let (dx, dgamma, dbeta) =
                    ops::batchnorm_train_backward(self.val(*x), self.val(*gamma), stats, *eps, adj);
                if self.req(*x) {
                    Self::accumulate(adjoint, *x, dx);
                }
                if self.req(*gamma) {
                    Self::accumulate(adjoint, *gamma, dgamma);
                }
                if self.req(*beta) {
                    Self::accumulate(adjoint, *beta, dbeta);
                }
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                eps,
                mean,
                var,
            } => {
                let (dx, dgamma, dbeta) = ops::batchnorm_eval_backward(
                    self.val(*x),
                    self.val(*gamma),
                    mean,
                    var,
                    *eps,
                    adj,
                );
                if self.req(*x) {
                    Self::accumulate(adjoint, *x, dx);
                }
                if self.req(*gamma) {
                    Self::accumulate(adjoint, *gamma, dgamma);
                }
                if self.req(*beta) {
                    Self::accumulate(adjoint, *beta, dbeta);
                }
            }
            Op::ConcatChannels(a, b) => {
                let ca = self.val(*a).shape()[1];
                let cb = self.val(*b).shape()[1];
                let (da, db) = ops::concat_channels_backward(adj, ca, cb);
                if self.req(*a) {
                    Self::accumulate(adjoint, *a, da);
                }
                if self.req(*b) {
                    Self::accumulate(adjoint, *b, db);
                }
            }
            Op::Reshape(x) => {
                if self.req(*x) {
                    let dx = adj.reshape(self.val(*x).shape()).expect("same element count");
                    Self::accumulate(adjoint, *x, dx);
                }
            }
            Op::Sum(x) => {
                if self.req(*x) {
                    let dx = Tensor::full(self.val(*x).shape(), adj.item());
                    Self::accumulate(adjoint, *x, dx);
                }
            }
            Op::SelectScalar { x, index } => {
                if self.req(*x) {
                    let mut dx = Tensor::zeros(self.val(*x).shape());
                    dx.data_mut()[*index] = adj.item();
                    Self::accumulate(adjoint, *x, dx);
                }
            }
            Op::FocalLoss {
                probs,
                targets,
                gamma,
            } => {
                if self.req(*probs) {
                    let dp =
                        loss::focal_loss_backward(self.val(*probs), targets, *gamma, adj.item());
                    Self::accumulate(adjoint, *probs, dp);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_f64_slice(&[3], &[1.0, 2.0, 3.0]).unwrap(), true);
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_loss_gradient() {
        // loss = sum(x^2) at x=[1,2] -> grad [2,4]
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_f64_slice(&[2], &[1.0, 2.0]).unwrap(), true);
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn add_zero_is_identity_with_ones_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_f64_slice(&[2], &[1.0, 2.0]).unwrap(), true);
        let zero = g.leaf(Tensor::scalar(0.0), false);
        let y = g.add(x, zero).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0]);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0]);
        assert!(g.grad(zero).is_none());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_f64_slice(&[2], &[1.0, 2.0]).unwrap(), true);
        assert!(matches!(
            g.backward(x).unwrap_err(),
            TensorError::NonScalarLoss(_)
        ));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_f64_slice(&[2], &[1.0, 2.0]).unwrap(), true);
        let s = g.sum(x);
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn grad_of_product_equals_other_operand() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::from_f64_slice(&[3], &[1.0, -2.0, 0.5]).unwrap(), true);
        let b = g.leaf(Tensor::from_f64_slice(&[3], &[4.0, 5.0, -6.0]).unwrap(), true);
        let p = g.mul(a, b).unwrap();
        let s = g.sum(p);
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), g.value(b).data());
        assert_eq!(g.grad(b).unwrap().data(), g.value(a).data());
    }
}
