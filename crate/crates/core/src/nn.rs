//! Network layers: convolution, batch normalization, max pooling and
//! fully-connected. Each layer owns its parameters, offers a graph-recording
//! forward for training and a direct kernel forward for inference, and can
//! report its parameter count in closed form.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::ops;
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPSILON: f64 = 1e-5;

/// Kaiming-uniform draw (fan-in, ReLU gain): uniform in ±sqrt(6/fan_in).
/// Values are drawn in f64 and converted, so f32/f64 models share streams.
pub fn kaiming_uniform<T: Scalar>(
    shape: &[usize],
    fan_in: usize,
    rng: &mut impl Rng,
) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64((rng.gen::<f64>() * 2.0 - 1.0) * bound))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape/data constructed consistently")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding of (k-1)/2 per side, so stride-1 output keeps the input
    /// spatial size (kernels here are odd).
    Same,
    Valid,
}

// ---------------------------------------------------------------------------

pub struct Conv2d<T: Scalar> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: Padding,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: usize,
        padding: Padding,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_channels * kernel.0 * kernel.1;
        let weight = kaiming_uniform(&[out_channels, in_channels, kernel.0, kernel.1], fan_in, rng);
        let bias = Tensor::zeros(&[out_channels]);
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight,
            bias,
        }
    }

    pub fn pad_px(&self) -> (usize, usize) {
        match self.padding {
            Padding::Same => ((self.kernel.0 - 1) / 2, (self.kernel.1 - 1) / 2),
            Padding::Valid => (0, 0),
        }
    }

    /// floor((extent + 2p - k)/s) + 1 per axis.
    pub fn output_spatial(&self, h: usize, w: usize) -> Result<(usize, usize), TensorError> {
        let (ph, pw) = self.pad_px();
        let oh = ops::conv_out_extent(h, self.kernel.0, ph, self.stride);
        let ow = ops::conv_out_extent(w, self.kernel.1, pw, self.stride);
        if oh <= 0 || ow <= 0 {
            return Err(TensorError::EmptyConvOutput(vec![
                self.out_channels as isize,
                oh,
                ow,
            ]));
        }
        Ok((oh as usize, ow as usize))
    }

    /// in·k_h·k_w·out weights plus out biases.
    pub fn param_count(&self) -> usize {
        self.in_channels * self.kernel.0 * self.kernel.1 * self.out_channels + self.out_channels
    }

    pub fn forward_eval(&self, x: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        ops::conv2d_forward(x, &self.weight, &self.bias, self.stride, self.pad_px())
    }

    /// Inserts weight and bias as trainable leaves.
    pub fn insert_params(&self, g: &mut Graph<T>) -> (Var, Var) {
        (g.leaf(self.weight.clone(), true), g.leaf(self.bias.clone(), true))
    }

    pub fn forward_graph(
        &self,
        g: &mut Graph<T>,
        x: Var,
        weight: Var,
        bias: Var,
    ) -> Result<Var, TensorError> {
        g.conv2d(x, weight, bias, self.stride, self.pad_px())
    }
}

// ---------------------------------------------------------------------------

pub struct BatchNorm2d<T: Scalar> {
    pub channels: usize,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: f64,
    pub eps: f64,
    /// Train mode uses batch statistics and updates the running averages;
    /// eval mode reads the running averages and never writes them.
    pub train: bool,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            gamma: Tensor::full(&[channels], T::one()),
            beta: Tensor::zeros(&[channels]),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: BN_MOMENTUM,
            eps: BN_EPSILON,
            train: false,
        }
    }

    pub fn param_count(&self) -> usize {
        2 * self.channels
    }

    pub fn forward_eval(&self, x: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        if x.rank() != 4 {
            return Err(TensorError::RankMismatch {
                expected: 4,
                shape: x.shape().to_vec(),
            });
        }
        if x.shape()[1] != self.channels {
            return Err(TensorError::ChannelMismatch {
                expected: self.channels,
                got: x.shape()[1],
            });
        }
        Ok(ops::batchnorm_eval_forward(
            x,
            &self.gamma,
            &self.beta,
            &self.running_mean,
            &self.running_var,
            self.eps,
        ))
    }

    pub fn insert_params(&self, g: &mut Graph<T>) -> (Var, Var) {
        (g.leaf(self.gamma.clone(), true), g.leaf(self.beta.clone(), true))
    }

    /// Graph forward honoring the train/eval flag. In train mode the running
    /// statistics move by an exponential average (unbiased variance, as the
    /// normalizer itself uses the biased one).
    pub fn forward_graph(
        &mut self,
        g: &mut Graph<T>,
        x: Var,
        gamma: Var,
        beta: Var,
    ) -> Result<Var, TensorError> {
        if g.value(x).shape()[1] != self.channels {
            return Err(TensorError::ChannelMismatch {
                expected: self.channels,
                got: g.value(x).shape()[1],
            });
        }
        if self.train {
            let shape = g.value(x).shape();
            let n = (shape[0] * shape[2] * shape[3]) as f64;
            let (out, mean, var) = g.batchnorm_train(x, gamma, beta, self.eps)?;
            let unbias = T::from_f64(n / (n - 1.0));
            let keep = T::from_f64(1.0 - self.momentum);
            let take = T::from_f64(self.momentum);
            for c in 0..self.channels {
                self.running_mean[c] = keep * self.running_mean[c] + take * mean[c];
                self.running_var[c] = keep * self.running_var[c] + take * var[c] * unbias;
            }
            Ok(out)
        } else {
            Ok(g.batchnorm_eval(
                x,
                gamma,
                beta,
                self.running_mean.clone(),
                self.running_var.clone(),
                self.eps,
            ))
        }
    }
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct MaxPool2d {
    pub size: usize,
    pub stride: usize,
}

impl MaxPool2d {
    pub fn new(size: usize, stride: usize) -> Self {
        Self { size, stride }
    }

    pub fn forward_eval<T: Scalar>(&self, x: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        Ok(ops::maxpool_forward(x, self.size, self.stride)?.0)
    }

    pub fn forward_graph<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        x: Var,
    ) -> Result<Var, TensorError> {
        g.maxpool2d(x, self.size, self.stride)
    }
}

// ---------------------------------------------------------------------------

pub struct Linear<T: Scalar> {
    pub in_features: usize,
    pub out_features: usize,
    /// Weight layout [out_features, in_features].
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(in_features: usize, out_features: usize, rng: &mut impl Rng) -> Self {
        let weight = kaiming_uniform(&[out_features, in_features], in_features, rng);
        let bias = Tensor::zeros(&[out_features]);
        Self {
            in_features,
            out_features,
            weight,
            bias,
        }
    }

    /// in·out weights plus out biases.
    pub fn param_count(&self) -> usize {
        self.in_features * self.out_features + self.out_features
    }

    pub fn forward_eval(&self, x: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        ops::linear_forward(x, &self.weight, &self.bias)
    }

    pub fn insert_params(&self, g: &mut Graph<T>) -> (Var, Var) {
        (g.leaf(self.weight.clone(), true), g.leaf(self.bias.clone(), true))
    }

    pub fn forward_graph(
        &self,
        g: &mut Graph<T>,
        x: Var,
        weight: Var,
        bias: Var,
    ) -> Result<Var, TensorError> {
        g.linear(x, weight, bias)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    /// Direct nested-loop cross-correlation, independent of the im2col path.
    fn naive_conv(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        bias: &Tensor<f64>,
        stride: usize,
        pad: (usize, usize),
    ) -> Tensor<f64> {
        let (b, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (o, _, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        let oh = (h + 2 * pad.0 - kh) / stride + 1;
        let ow = (wd + 2 * pad.1 - kw) / stride + 1;
        let mut y = Tensor::<f64>::zeros(&[b, o, oh, ow]);
        for bi in 0..b {
            for oc in 0..o {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bias.data()[oc];
                        for ci in 0..c {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let iy = (oy * stride + ki) as isize - pad.0 as isize;
                                    let ix = (ox * stride + kj) as isize - pad.1 as isize;
                                    if iy >= 0 && iy < h as isize && ix >= 0 && ix < wd as isize {
                                        let xi = ((bi * c + ci) * h + iy as usize) * wd
                                            + ix as usize;
                                        let wi = ((oc * c + ci) * kh + ki) * kw + kj;
                                        acc += x.data()[xi] * w.data()[wi];
                                    }
                                }
                            }
                        }
                        let yi = ((bi * o + oc) * oh + oy) * ow + ox;
                        y.data_mut()[yi] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_same_padding_matches_naive_oracle() {
        let mut r = rng();
        let conv = Conv2d::<f64>::new(3, 4, (3, 3), 1, Padding::Same, &mut r);
        let x = Tensor::<f64>::new(
            vec![2, 3, 8, 8],
            (0..2 * 3 * 8 * 8).map(|_| r.gen::<f64>() * 2.0 - 1.0).collect(),
        )
        .unwrap();
        let got = conv.forward_eval(&x).unwrap();
        let want = naive_conv(&x, &conv.weight, &conv.bias, 1, conv.pad_px());
        assert_eq!(got.shape(), &[2, 4, 8, 8]);
        for (a, b) in got.iter().zip(want.iter()) {
            let denom = b.abs().max(1e-9);
            assert!(((a - b) / denom).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn conv_param_count_formula() {
        let mut r = rng();
        let conv = Conv2d::<f32>::new(1, 8, (3, 3), 1, Padding::Same, &mut r);
        assert_eq!(conv.param_count(), 1 * 3 * 3 * 8 + 8);
        assert_eq!(
            conv.param_count(),
            conv.weight.numel() + conv.bias.numel()
        );
    }

    #[test]
    fn conv_output_shape_invariant() {
        let mut r = rng();
        let conv = Conv2d::<f32>::new(2, 2, (3, 3), 1, Padding::Valid, &mut r);
        assert_eq!(conv.output_spatial(8, 10).unwrap(), (6, 8));
        let same = Conv2d::<f32>::new(2, 2, (3, 3), 1, Padding::Same, &mut r);
        assert_eq!(same.output_spatial(8, 10).unwrap(), (8, 10));
        assert!(conv.output_spatial(2, 2).is_err());
    }

    #[test]
    fn batchnorm_train_normalizes_per_channel() {
        let mut r = rng();
        let mut bn = BatchNorm2d::<f64>::new(3);
        bn.train = true;
        let x = Tensor::<f64>::new(
            vec![4, 3, 5, 5],
            (0..4 * 3 * 5 * 5).map(|_| r.gen::<f64>() * 3.0 + 0.5).collect(),
        )
        .unwrap();
        let mut g = Graph::new();
        let xv = g.leaf(x, false);
        let (gv, bv) = bn.insert_params(&mut g);
        let y = bn.forward_graph(&mut g, xv, gv, bv).unwrap();
        let out = g.value(y);
        let n = (4 * 5 * 5) as f64;
        for c in 0..3 {
            let mut mean = 0.0;
            let mut var = 0.0;
            for b in 0..4 {
                for i in 0..25 {
                    mean += out.data()[(b * 3 + c) * 25 + i];
                }
            }
            mean /= n;
            for b in 0..4 {
                for i in 0..25 {
                    let d = out.data()[(b * 3 + c) * 25 + i] - mean;
                    var += d * d;
                }
            }
            var /= n;
            assert!(mean.abs() < 1e-5, "channel {c} mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "channel {c} var {var}");
        }
    }

    #[test]
    fn batchnorm_running_stats_move_in_train_and_freeze_in_eval() {
        let mut r = rng();
        let mut bn = BatchNorm2d::<f64>::new(2);
        let x = Tensor::<f64>::new(
            vec![2, 2, 4, 4],
            (0..2 * 2 * 4 * 4).map(|_| r.gen::<f64>()).collect(),
        )
        .unwrap();
        bn.train = true;
        let mut g = Graph::new();
        let xv = g.leaf(x.clone(), false);
        let (gv, bv) = bn.insert_params(&mut g);
        bn.forward_graph(&mut g, xv, gv, bv).unwrap();
        assert!(bn.running_mean.iter().any(|&m| m != 0.0));
        let snapshot_mean = bn.running_mean.clone();
        let snapshot_var = bn.running_var.clone();

        bn.train = false;
        let mut g2 = Graph::new();
        let xv = g2.leaf(x.clone(), false);
        let (gv, bv) = bn.insert_params(&mut g2);
        bn.forward_graph(&mut g2, xv, gv, bv).unwrap();
        bn.forward_eval(&x).unwrap();
        assert_eq!(bn.running_mean, snapshot_mean);
        assert_eq!(bn.running_var, snapshot_var);
    }

    #[test]
    fn linear_param_count_and_eval() {
        let mut r = rng();
        let lin = Linear::<f64>::new(3, 2, &mut r);
        assert_eq!(lin.param_count(), 3 * 2 + 2);
        let x = Tensor::from_f64_slice(&[1, 3], &[1.0, 0.0, -1.0]).unwrap();
        let y = lin.forward_eval(&x).unwrap();
        let w = lin.weight.data();
        let want0 = w[0] - w[2];
        let want1 = w[3] - w[5];
        assert!((y.data()[0] - want0).abs() < 1e-12);
        assert!((y.data()[1] - want1).abs() < 1e-12);
    }

    #[test]
    fn kaiming_bound_holds() {
        let mut r = rng();
        let t = kaiming_uniform::<f64>(&[100], 50, &mut r);
        let bound = (6.0f64 / 50.0).sqrt();
        assert!(t.iter().all(|v| v.abs() <= bound));
        // Not degenerate.
        assert!(t.iter().any(|v| v.abs() > bound * 0.5));
    }

    #[test]
    fn maxpool_halves_constant_input() {
        let x = Tensor::<f64>::full(&[1, 1, 4, 4], 3.0);
        let pool = MaxPool2d::new(2, 2);
        let y = pool.forward_eval(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert!(y.iter().all(|&v| v == 3.0));
    }

    #[test]
    fn maxpool_backward_routes_to_argmax_only() {
        // Window values chosen so argmax is unique except one tied window.
        let x = Tensor::<f64>::from_f64_slice(
            &[1, 1, 2, 4],
            &[1.0, 2.0, 5.0, 5.0, 4.0, 3.0, 0.0, -1.0],
        )
        .unwrap();
        let mut g = Graph::new();
        let xv = g.leaf(x, true);
        let y = g.maxpool2d(xv, 2, 2).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        let grad = g.grad(xv).unwrap();
        // Left window max = 4.0 at index 4; right window ties at 5.0 (indices
        // 2 and 3): the first in row-major scan wins.
        assert_eq!(grad.data(), &[0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
    }
}
