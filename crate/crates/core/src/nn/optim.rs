use serde::{Deserialize, Serialize};

use super::dense::{DenseNet, Trace};
use crate::error::{check_dim, check_finite, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale the gradient to this global L2 norm when it is exceeded.
    pub max_grad_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_grad_norm: None,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

/// Adaptive moment estimation state for one parameter vector.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, n_params: usize) -> Self {
        Self {
            config,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn for_net(config: AdamConfig, net: &DenseNet) -> Self {
        Self::new(config, net.param_count())
    }

    /// Descend along `grad`. A non-finite gradient leaves `params` and the
    /// moment estimates untouched.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        check_dim("optimizer parameters", self.m.len(), params.len())?;
        check_dim("optimizer gradient", self.m.len(), grad.len())?;
        check_finite("gradient", grad)?;
        let scale = match self.config.max_grad_norm {
            Some(max) => {
                let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.t += 1;
        let AdamConfig {
            lr, beta1, beta2, eps, ..
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i] * scale;
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Loss {
    /// Mean squared error against a regression target.
    Mse,
    /// The target slot carries dL/d(output) directly.
    OutputGradient,
}

#[derive(Clone, Copy, Debug)]
pub struct Sample<'a> {
    pub input: &'a [f64],
    pub target: &'a [f64],
}

/// Mean parameter gradient over `batch`; also returns the loss for `Mse`.
pub fn batch_gradient(net: &DenseNet, batch: &[Sample<'_>], loss: Loss) -> Result<(Vec<f64>, Option<f64>)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let n = batch.len() as f64;
    let out_dim = net.output_dim();
    let mut grad = vec![0.0; net.param_count()];
    let mut trace = Trace::default();
    let mut total = 0.0;
    let mut out_grad = vec![0.0; out_dim];
    for sample in batch {
        check_dim("training input", net.input_dim(), sample.input.len())?;
        check_dim("training target", out_dim, sample.target.len())?;
        net.forward_trace(sample.input, &mut trace);
        match loss {
            Loss::Mse => {
                for ((g, &y), &t) in out_grad.iter_mut().zip(trace.output()).zip(sample.target) {
                    let e = y - t;
                    total += e * e;
                    *g = 2.0 * e / (n * out_dim as f64);
                }
            }
            Loss::OutputGradient => {
                for (g, &t) in out_grad.iter_mut().zip(sample.target) {
                    *g = t / n;
                }
            }
        }
        net.backward(&trace, &out_grad, Some(&mut grad));
    }
    let loss_value = match loss {
        Loss::Mse => Some(total / (n * out_dim as f64)),
        Loss::OutputGradient => None,
    };
    Ok((grad, loss_value))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    /// Batch loss before the update; only defined for `Loss::Mse`.
    pub loss: Option<f64>,
    pub grad_norm: f64,
}

/// One first-order update of `net` on `batch`.
pub fn train_step(net: &mut DenseNet, batch: &[Sample<'_>], loss: Loss, opt: &mut Adam) -> Result<StepOutcome> {
    if opt.config.lr < 0.0 || !opt.config.lr.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "learning rate must be a finite non-negative number, got {}",
            opt.config.lr
        )));
    }
    let (grad, loss_value) = batch_gradient(net, batch, loss)?;
    let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    opt.step(net.weights_mut(), &grad)?;
    Ok(StepOutcome {
        loss: loss_value,
        grad_norm,
    })
}
