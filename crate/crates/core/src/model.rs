//! The LightTBNet architecture: N residual blocks (two 3x3 convs with ReLU
//! and BatchNorm on the main path, a 1x1-conv skip, channel concatenation,
//! 2x2/stride-2 max pool), a 1x1 reduction conv, and a two-layer classifier
//! head ending in softmax over two classes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::nn::{BatchNorm2d, Conv2d, Linear, MaxPool2d, Padding};
use crate::ops;
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};

/// Architecture hyperparameters. `seed` drives parameter initialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_blocks: usize,
    pub input_size: (usize, usize),
    pub input_channels: usize,
    /// Output width of each block's main and skip paths; the block emits
    /// twice this many channels after concatenation.
    pub channel_plan: Vec<usize>,
    pub reduce_channels: usize,
    pub fc_hidden: usize,
    pub n_classes: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Default configuration for a given block count at 256x256 input.
    pub fn default_for(n_blocks: usize) -> Self {
        let channel_plan = match n_blocks {
            3 => vec![32, 64, 128],
            4 => vec![32, 64, 128, 128],
            5 => vec![32, 64, 128, 128, 128],
            n => {
                let mut plan = vec![32, 64];
                plan.resize(n, 128);
                plan.truncate(n);
                plan
            }
        };
        Self {
            n_blocks,
            input_size: (256, 256),
            input_channels: 1,
            channel_plan,
            reduce_channels: 32,
            fc_hidden: 128,
            n_classes: 2,
            seed: 42,
        }
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        if !(2..=6).contains(&self.n_blocks) {
            return Err(TensorError::Invalid(format!(
                "n_blocks must be in [2,6], got {}",
                self.n_blocks
            )));
        }
        if self.channel_plan.len() != self.n_blocks {
            return Err(TensorError::Invalid(format!(
                "channel_plan has {} entries for {} blocks",
                self.channel_plan.len(),
                self.n_blocks
            )));
        }
        if self.channel_plan.iter().any(|&w| w == 0) {
            return Err(TensorError::Invalid("channel widths must be >= 1".into()));
        }
        if self.reduce_channels == 0 || self.fc_hidden == 0 || self.input_channels == 0 {
            return Err(TensorError::Invalid("layer widths must be >= 1".into()));
        }
        if self.n_classes != 2 {
            return Err(TensorError::Invalid(format!(
                "this architecture is a binary classifier, got n_classes = {}",
                self.n_classes
            )));
        }
        let div = 1usize << self.n_blocks;
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % div != 0 || w % div != 0 {
            return Err(TensorError::Invalid(format!(
                "input size {h}x{w} must be divisible by 2^{} = {div}",
                self.n_blocks
            )));
        }
        Ok(())
    }

    /// Spatial size of the feature map after all N pooling steps.
    pub fn final_spatial(&self) -> (usize, usize) {
        let div = 1usize << self.n_blocks;
        (self.input_size.0 / div, self.input_size.1 / div)
    }

    /// Length of the flattened vector fed to the first FC layer.
    pub fn flatten_len(&self) -> usize {
        let (h, w) = self.final_spatial();
        self.reduce_channels * h * w
    }
}

/// Two 3x3 conv stages with ReLU and BatchNorm, a 1x1-conv skip, channel
/// concatenation (main path first), and a trailing 2x2/stride-2 max pool.
pub struct ResidualBlock<T: Scalar> {
    pub conv1: Conv2d<T>,
    pub bn1: BatchNorm2d<T>,
    pub conv2: Conv2d<T>,
    pub bn2: BatchNorm2d<T>,
    pub skip: Conv2d<T>,
    pub pool: MaxPool2d,
    width: usize,
}

impl<T: Scalar> ResidualBlock<T> {
    fn new(in_channels: usize, width: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            conv1: Conv2d::new(in_channels, width, (3, 3), 1, Padding::Same, rng),
            bn1: BatchNorm2d::new(width),
            conv2: Conv2d::new(width, width, (3, 3), 1, Padding::Same, rng),
            bn2: BatchNorm2d::new(width),
            skip: Conv2d::new(in_channels, width, (1, 1), 1, Padding::Valid, rng),
            pool: MaxPool2d::new(2, 2),
            width,
        }
    }

    /// Main and skip paths each emit `width` channels; concatenation doubles it.
    pub fn out_channels(&self) -> usize {
        2 * self.width
    }

    fn forward_eval(&self, x: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        let m = self.conv1.forward_eval(x)?;
        let m = ops::relu(&m);
        let m = self.bn1.forward_eval(&m)?;
        let m = self.conv2.forward_eval(&m)?;
        let m = ops::relu(&m);
        let m = self.bn2.forward_eval(&m)?;
        let s = self.skip.forward_eval(x)?;
        let merged = ops::concat_channels(&m, &s)?;
        self.pool.forward_eval(&merged)
    }

    fn forward_graph(
        &mut self,
        g: &mut Graph<T>,
        x: Var,
        prefix: &str,
        bindings: &mut Vec<ParamBinding>,
    ) -> Result<Var, TensorError> {
        let (w1, b1) = self.conv1.insert_params(g);
        bindings.push(ParamBinding::new(format!("{prefix}.conv1.weight"), w1));
        bindings.push(ParamBinding::new(format!("{prefix}.conv1.bias"), b1));
        let m = self.conv1.forward_graph(g, x, w1, b1)?;
        let m = g.relu(m);
        let (g1, be1) = self.bn1.insert_params(g);
        bindings.push(ParamBinding::new(format!("{prefix}.bn1.gamma"), g1));
        bindings.push(ParamBinding::new(format!("{prefix}.bn1.beta"), be1));
        let m = self.bn1.forward_graph(g, m, g1, be1)?;
        let (w2, b2) = self.conv2.insert_params(g);
        bindings.push(ParamBinding::new(format!("{prefix}.conv2.weight"), w2));
        bindings.push(ParamBinding::new(format!("{prefix}.conv2.bias"), b2));
        let m = self.conv2.forward_graph(g, m, w2, b2)?;
        let m = g.relu(m);
        let (g2, be2) = self.bn2.insert_params(g);
        bindings.push(ParamBinding::new(format!("{prefix}.bn2.gamma"), g2));
        bindings.push(ParamBinding::new(format!("{prefix}.bn2.beta"), be2));
        let m = self.bn2.forward_graph(g, m, g2, be2)?;
        let (ws, bs) = self.skip.insert_params(g);
        bindings.push(ParamBinding::new(format!("{prefix}.skip.weight"), ws));
        bindings.push(ParamBinding::new(format!("{prefix}.skip.bias"), bs));
        let s = self.skip.forward_graph(g, x, ws, bs)?;
        let merged = g.concat_channels(m, s)?;
        self.pool.forward_graph(g, merged)
    }
}

/// Name/graph-variable pair for one parameter tensor, in registry order.
pub struct ParamBinding {
    pub name: String,
    pub var: Var,
}

impl ParamBinding {
    fn new(name: String, var: Var) -> Self {
        Self { name, var }
    }
}

/// Result of a graph-recorded forward pass.
pub struct GraphForward {
    pub logits: Var,
    pub probs: Var,
    /// Output of each residual block (post-pool), for grad-CAM targeting.
    pub block_outputs: Vec<Var>,
    pub params: Vec<ParamBinding>,
}

pub struct LightTBNet<T: Scalar> {
    config: ModelConfig,
    pub blocks: Vec<ResidualBlock<T>>,
    pub reduce: Conv2d<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

impl<T: Scalar> LightTBNet<T> {
    /// Deterministic construction: the same config (seed included) yields
    /// bitwise-identical initial parameters.
    pub fn build(config: &ModelConfig) -> Result<Self, TensorError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut blocks = Vec::with_capacity(config.n_blocks);
        let mut in_ch = config.input_channels;
        for &width in &config.channel_plan {
            let block = ResidualBlock::new(in_ch, width, &mut rng);
            in_ch = block.out_channels();
            blocks.push(block);
        }
        let reduce = Conv2d::new(in_ch, config.reduce_channels, (1, 1), 1, Padding::Valid, &mut rng);
        let fc1 = Linear::new(config.flatten_len(), config.fc_hidden, &mut rng);
        let fc2 = Linear::new(config.fc_hidden, config.n_classes, &mut rng);
        Ok(Self {
            config: config.clone(),
            blocks,
            reduce,
            fc1,
            fc2,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Switches batch-norm layers between batch statistics (train) and
    /// running statistics (eval).
    pub fn set_train(&mut self, train: bool) {
        for b in &mut self.blocks {
            b.bn1.train = train;
            b.bn2.train = train;
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<(), TensorError> {
        let (h, w) = self.config.input_size;
        if shape.len() != 4
            || shape[1] != self.config.input_channels
            || shape[2] != h
            || shape[3] != w
        {
            return Err(TensorError::Invalid(format!(
                "expected input [B, {}, {h}, {w}], got {shape:?}",
                self.config.input_channels
            )));
        }
        Ok(())
    }

    /// Inference forward: softmax probabilities [B, 2], using running BN
    /// statistics. Records no graph.
    pub fn forward_eval(&self, x: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        self.check_input(x.shape())?;
        let mut cur = self.blocks[0].forward_eval(x)?;
        for block in &self.blocks[1..] {
            cur = block.forward_eval(&cur)?;
        }
        let cur = self.reduce.forward_eval(&cur)?;
        let batch = cur.shape()[0];
        let flat = cur.reshape(&[batch, self.config.flatten_len()])?;
        let h = self.fc1.forward_eval(&flat)?;
        let h = ops::relu(&h);
        let logits = self.fc2.forward_eval(&h)?;
        ops::softmax_rows(&logits)
    }

    /// Graph-recorded forward. BN behavior follows each layer's train flag
    /// (see [`Self::set_train`]); `input` is a leaf already inserted by the
    /// caller, which controls whether input gradients are tracked.
    pub fn forward_graph(
        &mut self,
        g: &mut Graph<T>,
        input: Var,
    ) -> Result<GraphForward, TensorError> {
        self.check_input(g.value(input).shape())?;
        let mut bindings = Vec::new();
        let mut block_outputs = Vec::with_capacity(self.blocks.len());
        let mut cur = input;
        for (i, block) in self.blocks.iter_mut().enumerate() {
            cur = block.forward_graph(g, cur, &format!("block{i}"), &mut bindings)?;
            block_outputs.push(cur);
        }
        let (wr, br) = self.reduce.insert_params(g);
        bindings.push(ParamBinding::new("reduce.weight".into(), wr));
        bindings.push(ParamBinding::new("reduce.bias".into(), br));
        let cur = self.reduce.forward_graph(g, cur, wr, br)?;
        let batch = g.value(cur).shape()[0];
        let flat = g.reshape(cur, &[batch, self.config.flatten_len()])?;
        let (w1, b1) = self.fc1.insert_params(g);
        bindings.push(ParamBinding::new("fc1.weight".into(), w1));
        bindings.push(ParamBinding::new("fc1.bias".into(), b1));
        let h = self.fc1.forward_graph(g, flat, w1, b1)?;
        let h = g.relu(h);
        let (w2, b2) = self.fc2.insert_params(g);
        bindings.push(ParamBinding::new("fc2.weight".into(), w2));
        bindings.push(ParamBinding::new("fc2.bias".into(), b2));
        let logits = self.fc2.forward_graph(g, h, w2, b2)?;
        let probs = g.softmax(logits)?;
        Ok(GraphForward {
            logits,
            probs,
            block_outputs,
            params: bindings,
        })
    }

    /// Trainable parameters in the documented stable order: blocks in order
    /// (conv1, bn1, conv2, bn2, skip within each), then reduce, fc1, fc2;
    /// weight before bias, gamma before beta.
    pub fn parameter_registry(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.conv1.weight"), &b.conv1.weight));
            out.push((format!("block{i}.conv1.bias"), &b.conv1.bias));
            out.push((format!("block{i}.bn1.gamma"), &b.bn1.gamma));
            out.push((format!("block{i}.bn1.beta"), &b.bn1.beta));
            out.push((format!("block{i}.conv2.weight"), &b.conv2.weight));
            out.push((format!("block{i}.conv2.bias"), &b.conv2.bias));
            out.push((format!("block{i}.bn2.gamma"), &b.bn2.gamma));
            out.push((format!("block{i}.bn2.beta"), &b.bn2.beta));
            out.push((format!("block{i}.skip.weight"), &b.skip.weight));
            out.push((format!("block{i}.skip.bias"), &b.skip.bias));
        }
        out.push(("reduce.weight".into(), &self.reduce.weight));
        out.push(("reduce.bias".into(), &self.reduce.bias));
        out.push(("fc1.weight".into(), &self.fc1.weight));
        out.push(("fc1.bias".into(), &self.fc1.bias));
        out.push(("fc2.weight".into(), &self.fc2.weight));
        out.push(("fc2.bias".into(), &self.fc2.bias));
        out
    }

    /// Mutable registry in the same order, for optimizer updates.
    pub fn parameter_registry_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = Vec::new();
        for b in self.blocks.iter_mut() {
            out.push(&mut b.conv1.weight);
            out.push(&mut b.conv1.bias);
            out.push(&mut b.bn1.gamma);
            out.push(&mut b.bn1.beta);
            out.push(&mut b.conv2.weight);
            out.push(&mut b.conv2.bias);
            out.push(&mut b.bn2.gamma);
            out.push(&mut b.bn2.beta);
            out.push(&mut b.skip.weight);
            out.push(&mut b.skip.bias);
        }
        out.push(&mut self.reduce.weight);
        out.push(&mut self.reduce.bias);
        out.push(&mut self.fc1.weight);
        out.push(&mut self.fc1.bias);
        out.push(&mut self.fc2.weight);
        out.push(&mut self.fc2.bias);
        out
    }

    /// Registry tensors plus batch-norm running statistics, as owned copies,
    /// in checkpoint order (running stats follow each bn's gamma/beta).
    pub fn state_tensors(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.conv1.weight"), b.conv1.weight.clone()));
            out.push((format!("block{i}.conv1.bias"), b.conv1.bias.clone()));
            out.push((format!("block{i}.bn1.gamma"), b.bn1.gamma.clone()));
            out.push((format!("block{i}.bn1.beta"), b.bn1.beta.clone()));
            out.push((
                format!("block{i}.bn1.running_mean"),
                Tensor::new(vec![b.bn1.channels], b.bn1.running_mean.clone()).unwrap(),
            ));
            out.push((
                format!("block{i}.bn1.running_var"),
                Tensor::new(vec![b.bn1.channels], b.bn1.running_var.clone()).unwrap(),
            ));
            out.push((format!("block{i}.conv2.weight"), b.conv2.weight.clone()));
            out.push((format!("block{i}.conv2.bias"), b.conv2.bias.clone()));
            out.push((format!("block{i}.bn2.gamma"), b.bn2.gamma.clone()));
            out.push((format!("block{i}.bn2.beta"), b.bn2.beta.clone()));
            out.push((
                format!("block{i}.bn2.running_mean"),
                Tensor::new(vec![b.bn2.channels], b.bn2.running_mean.clone()).unwrap(),
            ));
            out.push((
                format!("block{i}.bn2.running_var"),
                Tensor::new(vec![b.bn2.channels], b.bn2.running_var.clone()).unwrap(),
            ));
            out.push((format!("block{i}.skip.weight"), b.skip.weight.clone()));
            out.push((format!("block{i}.skip.bias"), b.skip.bias.clone()));
        }
        out.push(("reduce.weight".into(), self.reduce.weight.clone()));
        out.push(("reduce.bias".into(), self.reduce.bias.clone()));
        out.push(("fc1.weight".into(), self.fc1.weight.clone()));
        out.push(("fc1.bias".into(), self.fc1.bias.clone()));
        out.push(("fc2.weight".into(), self.fc2.weight.clone()));
        out.push(("fc2.bias".into(), self.fc2.bias.clone()));
        out
    }

    /// Installs one named state tensor (parameter or running statistic).
    pub fn set_state_tensor(&mut self, name: &str, tensor: Tensor<T>) -> Result<(), TensorError> {
        let slot = self.state_slot(name)?;
        match slot {
            StateSlot::Param(p) => {
                if p.shape() != tensor.shape() {
                    return Err(TensorError::ShapeMismatch {
                        left: p.shape().to_vec(),
                        right: tensor.shape().to_vec(),
                    });
                }
                *p = tensor;
            }
            StateSlot::Buffer(buf) => {
                if tensor.numel() != buf.len() {
                    return Err(TensorError::ShapeMismatch {
                        left: vec![buf.len()],
                        right: tensor.shape().to_vec(),
                    });
                }
                buf.copy_from_slice(tensor.data());
            }
        }
        Ok(())
    }

    fn state_slot(&mut self, name: &str) -> Result<StateSlot<'_, T>, TensorError> {
        let unknown = || TensorError::Invalid(format!("unknown state tensor '{name}'"));
        if let Some(rest) = name.strip_prefix("block") {
            let (idx_str, field) = rest.split_once('.').ok_or_else(unknown)?;
            let idx: usize = idx_str.parse().map_err(|_| unknown())?;
            let block = self.blocks.get_mut(idx).ok_or_else(unknown)?;
            return match field {
                "conv1.weight" => Ok(StateSlot::Param(&mut block.conv1.weight)),
                "conv1.bias" => Ok(StateSlot::Param(&mut block.conv1.bias)),
                "bn1.gamma" => Ok(StateSlot::Param(&mut block.bn1.gamma)),
                "bn1.beta" => Ok(StateSlot::Param(&mut block.bn1.beta)),
                "bn1.running_mean" => Ok(StateSlot::Buffer(&mut block.bn1.running_mean)),
                "bn1.running_var" => Ok(StateSlot::Buffer(&mut block.bn1.running_var)),
                "conv2.weight" => Ok(StateSlot::Param(&mut block.conv2.weight)),
                "conv2.bias" => Ok(StateSlot::Param(&mut block.conv2.bias)),
                "bn2.gamma" => Ok(StateSlot::Param(&mut block.bn2.gamma)),
                "bn2.beta" => Ok(StateSlot::Param(&mut block.bn2.beta)),
                "bn2.running_mean" => Ok(StateSlot::Buffer(&mut block.bn2.running_mean)),
                "bn2.running_var" => Ok(StateSlot::Buffer(&mut block.bn2.running_var)),
                "skip.weight" => Ok(StateSlot::Param(&mut block.skip.weight)),
                "skip.bias" => Ok(StateSlot::Param(&mut block.skip.bias)),
                _ => Err(unknown()),
            };
        }
        match name {
            "reduce.weight" => Ok(StateSlot::Param(&mut self.reduce.weight)),
            "reduce.bias" => Ok(StateSlot::Param(&mut self.reduce.bias)),
            "fc1.weight" => Ok(StateSlot::Param(&mut self.fc1.weight)),
            "fc1.bias" => Ok(StateSlot::Param(&mut self.fc1.bias)),
            "fc2.weight" => Ok(StateSlot::Param(&mut self.fc2.weight)),
            "fc2.bias" => Ok(StateSlot::Param(&mut self.fc2.bias)),
            _ => Err(unknown()),
        }
    }

    /// Total number of stored parameter scalars.
    pub fn param_count(&self) -> usize {
        self.parameter_registry().iter().map(|(_, t)| t.numel()).sum()
    }
}

enum StateSlot<'a, T: Scalar> {
    Param(&'a mut Tensor<T>),
    Buffer(&'a mut Vec<T>),
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            n_blocks: 2,
            input_size: (32, 32),
            input_channels: 1,
            channel_plan: vec![2, 2],
            reduce_channels: 2,
            fc_hidden: 8,
            n_classes: 2,
            seed: 11,
        }
    }

    #[test]
    fn spatial_plan_follows_powers_of_two() {
        assert_eq!(ModelConfig::default_for(4).final_spatial(), (16, 16));
        assert_eq!(ModelConfig::default_for(5).final_spatial(), (8, 8));
        assert_eq!(ModelConfig::default_for(3).final_spatial(), (32, 32));
    }

    #[test]
    fn config_validation() {
        let mut bad = ModelConfig::default_for(4);
        bad.n_blocks = 7;
        assert!(bad.validate().is_err());
        let mut bad = ModelConfig::default_for(4);
        bad.input_size = (250, 256);
        assert!(bad.validate().is_err());
        let mut bad = ModelConfig::default_for(4);
        bad.channel_plan.pop();
        assert!(bad.validate().is_err());
        assert!(ModelConfig::default_for(3).validate().is_ok());
    }

    #[test]
    fn build_is_deterministic_for_fixed_seed() {
        let cfg = tiny_config();
        let a = LightTBNet::<f32>::build(&cfg).unwrap();
        let b = LightTBNet::<f32>::build(&cfg).unwrap();
        for ((na, ta), (nb, tb)) in a.parameter_registry().iter().zip(b.parameter_registry()) {
            assert_eq!(*na, nb);
            assert_eq!(ta.data(), tb.data(), "tensor {na} differs");
        }
        let mut other = cfg.clone();
        other.seed = 12;
        let c = LightTBNet::<f32>::build(&other).unwrap();
        assert_ne!(
            a.parameter_registry()[0].1.data(),
            c.parameter_registry()[0].1.data()
        );
    }

    #[test]
    fn registry_order_and_size() {
        let model = LightTBNet::<f32>::build(&tiny_config()).unwrap();
        let reg = model.parameter_registry();
        // 2 blocks x 5 layers + 3 tail layers, two tensors each.
        assert_eq!(reg.len(), (2 * 5 + 3) * 2);
        assert_eq!(reg[0].0, "block0.conv1.weight");
        assert_eq!(reg[1].0, "block0.conv1.bias");
        assert_eq!(reg[2].0, "block0.bn1.gamma");
        assert_eq!(reg[3].0, "block0.bn1.beta");
        assert_eq!(reg[8].0, "block0.skip.weight");
        assert_eq!(reg[10].0, "block1.conv1.weight");
        assert_eq!(reg[reg.len() - 2].0, "fc2.weight");
        assert_eq!(reg[reg.len() - 1].0, "fc2.bias");
        let total: usize = reg.iter().map(|(_, t)| t.numel()).sum();
        assert_eq!(total, model.param_count());
    }

    #[test]
    fn eval_forward_is_row_stochastic_and_deterministic() {
        let model = LightTBNet::<f32>::build(&tiny_config()).unwrap();
        let mut data = vec![0.0f64; 2 * 32 * 32];
        for (i, v) in data.iter_mut().enumerate() {
            *v = ((i * 2654435761) % 1000) as f64 / 1000.0 - 0.5;
        }
        // Two identical images in one batch.
        let img: Vec<f64> = data[..32 * 32].to_vec();
        let mut batch = img.clone();
        batch.extend_from_slice(&img);
        let x = Tensor::<f32>::from_f64_slice(&[2, 1, 32, 32], &batch).unwrap();
        let y = model.forward_eval(&x).unwrap();
        assert_eq!(y.shape(), &[2, 2]);
        for r in 0..2 {
            let sum = y.data()[2 * r] + y.data()[2 * r + 1];
            assert!((sum - 1.0).abs() < 1e-6);
        }
        assert_eq!(y.data()[0], y.data()[2]);
        assert_eq!(y.data()[1], y.data()[3]);
    }

    #[test]
    fn wrong_input_shape_rejected() {
        let model = LightTBNet::<f32>::build(&tiny_config()).unwrap();
        let x = Tensor::<f32>::zeros(&[1, 1, 16, 16]);
        assert!(model.forward_eval(&x).is_err());
        let x = Tensor::<f32>::zeros(&[1, 3, 32, 32]);
        assert!(model.forward_eval(&x).is_err());
    }

    #[test]
    fn eval_forward_matches_layer_by_layer_composition() {
        // Independent composition of the same kernels, layer by layer.
        let model = LightTBNet::<f64>::build(&tiny_config()).unwrap();
        let n = 32 * 32;
        let data: Vec<f64> = (0..n).map(|i| ((i * 97) % 113) as f64 / 113.0 - 0.4).collect();
        let x = Tensor::<f64>::from_f64_slice(&[1, 1, 32, 32], &data).unwrap();

        let mut cur = x.clone();
        for b in &model.blocks {
            let m = ops::conv2d_forward(&cur, &b.conv1.weight, &b.conv1.bias, 1, (1, 1)).unwrap();
            let m = ops::relu(&m);
            let m = ops::batchnorm_eval_forward(
                &m,
                &b.bn1.gamma,
                &b.bn1.beta,
                &b.bn1.running_mean,
                &b.bn1.running_var,
                b.bn1.eps,
            );
            let m = ops::conv2d_forward(&m, &b.conv2.weight, &b.conv2.bias, 1, (1, 1)).unwrap();
            let m = ops::relu(&m);
            let m = ops::batchnorm_eval_forward(
                &m,
                &b.bn2.gamma,
                &b.bn2.beta,
                &b.bn2.running_mean,
                &b.bn2.running_var,
                b.bn2.eps,
            );
            let s = ops::conv2d_forward(&cur, &b.skip.weight, &b.skip.bias, 1, (0, 0)).unwrap();
            let merged = ops::concat_channels(&m, &s).unwrap();
            cur = ops::maxpool_forward(&merged, 2, 2).unwrap().0;
        }
        let cur2 = ops::conv2d_forward(&cur, &model.reduce.weight, &model.reduce.bias, 1, (0, 0))
            .unwrap();
        let flat = cur2.reshape(&[1, model.config().flatten_len()]).unwrap();
        let h = ops::linear_forward(&flat, &model.fc1.weight, &model.fc1.bias).unwrap();
        let h = ops::relu(&h);
        let logits = ops::linear_forward(&h, &model.fc2.weight, &model.fc2.bias).unwrap();
        let want = ops::softmax_rows(&logits).unwrap();

        let got = model.forward_eval(&x).unwrap();
        for (a, b) in got.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn state_tensors_round_trip_through_set_state() {
        let src = LightTBNet::<f32>::build(&tiny_config()).unwrap();
        let mut cfg2 = tiny_config();
        cfg2.seed = 99;
        let mut dst = LightTBNet::<f32>::build(&cfg2).unwrap();
        for (name, tensor) in src.state_tensors() {
            dst.set_state_tensor(&name, tensor).unwrap();
        }
        for ((_, a), (_, b)) in src.state_tensors().iter().zip(dst.state_tensors()) {
            assert_eq!(a.data(), b.data());
        }
        assert!(dst
            .set_state_tensor("block9.conv1.weight", Tensor::zeros(&[1]))
            .is_err());
    }
}
