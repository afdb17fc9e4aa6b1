//! Toy convolutional classifier: conv blocks → `F` → GAP → bias-free head.

mod checkpoint;
mod optim;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use optim::{clip_grad_norm, LearningRates, Sgd};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dropout::{apply_mask, DropMask};
use crate::error::{Error, Result};
use crate::tensor::{conv_out_size, Gradients, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlock {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvBlock {
    pub fn padding(&self) -> usize {
        self.kernel / 2
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub input_channels: usize,
    pub input_size: usize,
    pub conv_blocks: Vec<ConvBlock>,
    /// Block whose (post-ReLU) output is `F'`.
    pub drop_layer_index: usize,
    pub num_classes: usize,
    pub feature_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let block = |out_channels, stride| ConvBlock {
            out_channels,
            kernel: 3,
            stride,
        };
        ModelConfig {
            input_channels: 3,
            input_size: 64,
            conv_blocks: vec![block(16, 2), block(32, 2), block(64, 2), block(64, 1)],
            drop_layer_index: 2,
            num_classes: 8,
            feature_dim: 64,
        }
    }
}

impl ModelConfig {
    /// Spatial size after each block.
    pub fn spatial_sizes(&self) -> Vec<usize> {
        let mut size = self.input_size;
        self.conv_blocks
            .iter()
            .map(|b| {
                size = conv_out_size(size, b.kernel, b.stride, b.padding()).unwrap_or(0);
                size
            })
            .collect()
    }

    /// Side of the square final feature map `F`.
    pub fn feature_size(&self) -> usize {
        self.spatial_sizes().last().copied().unwrap_or(0)
    }

    /// Side of the square intermediate map `F'`.
    pub fn drop_size(&self) -> usize {
        self.spatial_sizes()
            .get(self.drop_layer_index)
            .copied()
            .unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.conv_blocks.is_empty() {
            return Err(Error::config("conv_blocks", "at least one block is required"));
        }
        if self.input_channels == 0 || self.num_classes == 0 {
            return Err(Error::config("model", "channels and classes must be positive"));
        }
        if self.drop_layer_index >= self.conv_blocks.len() {
            return Err(Error::config(
                "drop_layer_index",
                format!("{} is not below block count {}", self.drop_layer_index, self.conv_blocks.len()),
            ));
        }
        for (i, b) in self.conv_blocks.iter().enumerate() {
            if b.out_channels == 0 || b.kernel == 0 || b.stride == 0 {
                return Err(Error::config(format!("conv_blocks[{i}]"), "zero-sized block"));
            }
        }
        if self.conv_blocks.last().map(|b| b.out_channels) != Some(self.feature_dim) {
            return Err(Error::config(
                "feature_dim",
                "must equal the last block's out_channels",
            ));
        }
        if self.spatial_sizes().iter().any(|&s| s == 0) || self.feature_size() < 2 {
            return Err(Error::config(
                "conv_blocks",
                format!("final feature map must be at least 2x2, got {}", self.feature_size()),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Former,
    Latter,
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
    pub grad: Option<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: Vec<Param>,
}

/// Parameter leaves registered on one tape, parallel to [`Model::params`].
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn conv(&self, block: usize) -> (Var, Var) {
        (self.vars[2 * block], self.vars[2 * block + 1])
    }

    pub fn head(&self) -> Var {
        *self.vars.last().expect("model has a head")
    }
}

/// Tensors of one forward pass, all on the same tape.
#[derive(Clone, Copy, Debug)]
pub struct ForwardBundle {
    pub f_prime: Var,
    pub f_map: Var,
    pub pooled: Var,
    pub logits: Var,
}

fn expected_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>, ParamGroup)> {
    let last = config.conv_blocks.len() - 1;
    let mut in_ch = config.input_channels;
    let mut shapes = Vec::new();
    for (i, b) in config.conv_blocks.iter().enumerate() {
        let group = if i == last {
            ParamGroup::Latter
        } else {
            ParamGroup::Former
        };
        shapes.push((
            format!("conv{i}.weight"),
            vec![b.out_channels, in_ch, b.kernel, b.kernel],
            group,
        ));
        shapes.push((format!("conv{i}.bias"), vec![b.out_channels], group));
        in_ch = b.out_channels;
    }
    shapes.push((
        "head.weight".to_string(),
        vec![config.num_classes, config.feature_dim],
        ParamGroup::Latter,
    ));
    shapes
}

impl Model {
    /// Kaiming-uniform kernels (`±sqrt(6/fan_in)`), `±sqrt(1/fan_in)` head,
    /// zero biases.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = expected_shapes(&config)
            .into_iter()
            .map(|(name, shape, group)| {
                let value = if name.ends_with(".bias") {
                    Tensor::zeros(&shape)
                } else {
                    let fan_in: usize = shape[1..].iter().product();
                    // ReLU gain for kernels, plain fan-in scaling for the head
                    let gain = if name == "head.weight" { 1.0 } else { 6.0 };
                    let bound = (gain / fan_in as f64).sqrt();
                    let n = shape.iter().product();
                    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
                    Tensor::new(shape, data).expect("shape and data agree")
                };
                Param {
                    name,
                    group,
                    value,
                    grad: None,
                }
            })
            .collect();
        Ok(Model { config, params })
    }

    /// Builds a model from named tensors, checking names and shapes.
    pub fn from_tensors(config: ModelConfig, mut tensors: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let mut params = Vec::new();
        for (name, shape, group) in expected_shapes(&config) {
            let pos = tensors
                .iter()
                .position(|(n, _)| *n == name)
                .ok_or_else(|| Error::invalid(format!("missing parameter `{name}`")))?;
            let (_, value) = tensors.swap_remove(pos);
            if value.shape() != shape.as_slice() {
                return Err(Error::shape("from_tensors", value.shape(), &shape));
            }
            params.push(Param {
                name,
                group,
                value,
                grad: None,
            });
        }
        if let Some((extra, _)) = tensors.first() {
            return Err(Error::invalid(format!("unexpected parameter `{extra}`")));
        }
        Ok(Model { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    /// Class weight matrix `W: [C, D]`.
    pub fn head_weights(&self) -> &Tensor {
        &self.params.last().expect("model has a head").value
    }

    pub fn head_weights_mut(&mut self) -> &mut Tensor {
        &mut self.params.last_mut().expect("model has a head").value
    }

    pub fn class_weight(&self, class: usize) -> Result<&[f64]> {
        let d = self.config.feature_dim;
        if class >= self.config.num_classes {
            return Err(Error::invalid(format!(
                "class index {class} out of range for {} classes",
                self.config.num_classes
            )));
        }
        Ok(&self.head_weights().data()[class * d..(class + 1) * d])
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        BoundParams {
            vars: self.params.iter().map(|p| tape.param(p.value.clone())).collect(),
        }
    }

    /// Wraps leaves created elsewhere (one per parameter, in order).
    pub fn bind_vars(&self, vars: &[Var]) -> Result<BoundParams> {
        if vars.len() != self.params.len() {
            return Err(Error::invalid(format!(
                "expected {} parameter leaves, got {}",
                self.params.len(),
                vars.len()
            )));
        }
        Ok(BoundParams { vars: vars.to_vec() })
    }

    /// Registers the parameters as constants (no gradients), for evaluation.
    pub fn bind_frozen(&self, tape: &mut Tape) -> BoundParams {
        BoundParams {
            vars: self
                .params
                .iter()
                .map(|p| tape.constant(p.value.clone()))
                .collect(),
        }
    }

    fn block(&self, tape: &mut Tape, bound: &BoundParams, index: usize, input: Var) -> Result<Var> {
        let b = self.config.conv_blocks[index];
        let (kernel, bias) = bound.conv(index);
        let conv = tape.conv2d(input, kernel, b.stride, b.padding())?;
        let biased = tape.channel_bias(conv, bias)?;
        Ok(tape.relu(biased))
    }

    fn tail(&self, tape: &mut Tape, bound: &BoundParams, mut x: Var) -> Result<Var> {
        for i in self.config.drop_layer_index + 1..self.config.conv_blocks.len() {
            x = self.block(tape, bound, i, x)?;
        }
        Ok(x)
    }

    /// Checks an image tensor against the config (`[C, S, S]`).
    pub fn check_image(&self, image: &Tensor) -> Result<()> {
        let c = &self.config;
        let expected = [c.input_channels, c.input_size, c.input_size];
        if image.shape() != expected {
            return Err(Error::shape("forward", image.shape(), &expected));
        }
        Ok(())
    }

    pub fn forward(&self, tape: &mut Tape, bound: &BoundParams, image: Var) -> Result<ForwardBundle> {
        let c = &self.config;
        let expected = [c.input_channels, c.input_size, c.input_size];
        if tape.shape(image) != expected {
            return Err(Error::shape("forward", tape.shape(image), &expected));
        }
        let mut x = image;
        for i in 0..=c.drop_layer_index {
            x = self.block(tape, bound, i, x)?;
        }
        let f_prime = x;
        let f_map = self.tail(tape, bound, f_prime)?;
        let pooled = tape.global_average_pool(f_map)?;
        let logits = tape.linear_no_bias(pooled, bound.head())?;
        Ok(ForwardBundle {
            f_prime,
            f_map,
            pooled,
            logits,
        })
    }

    /// `F_drop`: the tail of the network applied to the masked `F'`,
    /// sharing parameters with the clean path.
    pub fn forward_with_drop(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        f_prime: Var,
        mask: &DropMask,
    ) -> Result<Var> {
        let dropped = apply_mask(tape, f_prime, mask)?;
        self.tail(tape, bound, dropped)
    }

    /// Adds `scale · grad` from one tape into each parameter's buffer.
    pub fn accumulate_grads(&mut self, grads: &Gradients, bound: &BoundParams, scale: f64) {
        for (p, var) in self.params.iter_mut().zip(&bound.vars) {
            let Some(g) = grads.get(*var) else { continue };
            let buf = p.grad.get_or_insert_with(|| vec![0.0; g.len()]);
            buf.iter_mut().zip(g).for_each(|(a, b)| *a += scale * b);
        }
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.grad = None);
    }
}
