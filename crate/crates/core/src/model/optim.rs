use serde::{Deserialize, Serialize};

use super::{Model, ParamGroup};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearningRates {
    pub former: f64,
    pub latter: f64,
}

impl LearningRates {
    pub fn uniform(lr: f64) -> Self {
        LearningRates {
            former: lr,
            latter: lr,
        }
    }

    pub fn for_group(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Former => self.former,
            ParamGroup::Latter => self.latter,
        }
    }
}

/// SGD with momentum and weight decay coupled into the gradient:
/// `g' = g + wd·θ; v = μ·v + g'; θ -= lr·v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(model: &Model, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: model.params().iter().map(|p| vec![0.0; p.value.numel()]).collect(),
        }
    }

    /// Applies one update and clears the gradient buffers.
    pub fn step(&mut self, model: &mut Model, lr: LearningRates) -> Result<()> {
        if let Some(p) = model.params().iter().find(|p| p.grad.is_none()) {
            return Err(Error::invalid(format!("missing gradient for `{}`", p.name)));
        }
        for (p, v) in model.params_mut().iter_mut().zip(&mut self.velocity) {
            let rate = lr.for_group(p.group);
            let grad = p.grad.take().expect("checked above");
            for ((theta, g), vel) in p.value.data_mut().iter_mut().zip(grad).zip(v.iter_mut()) {
                let g = g + self.weight_decay * *theta;
                *vel = self.momentum * *vel + g;
                *theta -= rate * *vel;
            }
        }
        Ok(())
    }
}

/// Rescales all accumulated gradients so their joint L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm(model: &mut Model, max_norm: f64) -> f64 {
    let norm = model
        .params()
        .iter()
        .filter_map(|p| p.grad.as_ref())
        .flat_map(|g| g.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in model.params_mut().iter_mut().filter_map(|p| p.grad.as_mut()) {
            g.iter_mut().for_each(|v| *v *= scale);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ConvBlock, ModelConfig};

    fn single_param_model(theta: f64) -> Model {
        let config = ModelConfig {
            input_channels: 1,
            input_size: 2,
            conv_blocks: vec![ConvBlock { out_channels: 1, kernel: 1, stride: 1 }],
            drop_layer_index: 0,
            num_classes: 1,
            feature_dim: 1,
        };
        let mut m = Model::init(config, 0).unwrap();
        for p in m.params_mut() {
            p.value.data_mut()[0] = theta;
        }
        m
    }

    fn set_grads(m: &mut Model, g: f64) {
        for p in m.params_mut() {
            p.grad = Some(vec![g]);
        }
    }

    #[test]
    fn plain_step() {
        let mut m = single_param_model(1.0);
        let mut opt = Sgd::new(&m, 0.0, 0.0);
        set_grads(&mut m, 0.5);
        opt.step(&mut m, LearningRates::uniform(0.1)).unwrap();
        assert!((m.head_weights().data()[0] - 0.95).abs() < 1e-15);
        assert!(m.params().iter().all(|p| p.grad.is_none()));
    }

    #[test]
    fn weight_decay_step() {
        let mut m = single_param_model(1.0);
        let mut opt = Sgd::new(&m, 0.0, 5e-4);
        set_grads(&mut m, 0.5);
        opt.step(&mut m, LearningRates::uniform(0.1)).unwrap();
        assert!((m.head_weights().data()[0] - 0.94995).abs() < 1e-15);
    }

    #[test]
    fn momentum_recursion() {
        let mut m = single_param_model(0.0);
        let mut opt = Sgd::new(&m, 0.9, 0.0);
        set_grads(&mut m, 1.0);
        opt.step(&mut m, LearningRates::uniform(0.1)).unwrap();
        assert!((m.head_weights().data()[0] + 0.1).abs() < 1e-15);
        set_grads(&mut m, 1.0);
        opt.step(&mut m, LearningRates::uniform(0.1)).unwrap();
        assert!((m.head_weights().data()[0] + 0.29).abs() < 1e-15);
    }

    #[test]
    fn group_rates_apply_per_group() {
        let mut m = single_param_model(1.0);
        let mut opt = Sgd::new(&m, 0.0, 0.0);
        set_grads(&mut m, 1.0);
        opt.step(&mut m, LearningRates { former: 0.0, latter: 0.5 }).unwrap();
        // single block is the last block, so everything is in the latter group
        assert!(m.params().iter().all(|p| (p.value.data()[0] - 0.5).abs() < 1e-15));
    }

    #[test]
    fn clipping_rescales_joint_norm() {
        let mut m = single_param_model(1.0);
        let n = m.params().len() as f64;
        set_grads(&mut m, 3.0);
        let before = clip_grad_norm(&mut m, 1.0);
        assert!((before - 3.0 * n.sqrt()).abs() < 1e-12);
        let after: f64 = m.params().iter().map(|p| p.grad.as_ref().unwrap()[0].powi(2)).sum::<f64>().sqrt();
        assert!((after - 1.0).abs() < 1e-12);
        set_grads(&mut m, 0.1);
        clip_grad_norm(&mut m, 1.0);
        assert!(m.params().iter().all(|p| p.grad.as_ref().unwrap()[0] == 0.1));
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut m = single_param_model(1.0);
        let mut opt = Sgd::new(&m, 0.9, 0.0);
        assert!(opt.step(&mut m, LearningRates::uniform(0.1)).is_err());
    }
}
