use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::param::ParamStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimKind {
    Adam {
        lr: f64,
        #[serde(default = "beta1")]
        beta1: f64,
        #[serde(default = "beta2")]
        beta2: f64,
        #[serde(default = "adam_eps")]
        eps: f64,
    },
    Sgd {
        lr: f64,
        #[serde(default)]
        momentum: f64,
        #[serde(default)]
        weight_decay: f64,
    },
}

fn beta1() -> f64 {
    0.9
}
fn beta2() -> f64 {
    0.999
}
fn adam_eps() -> f64 {
    1e-8
}

impl OptimKind {
    pub fn adam(lr: f64) -> Self {
        OptimKind::Adam {
            lr,
            beta1: beta1(),
            beta2: beta2(),
            eps: adam_eps(),
        }
    }

    pub fn sgd(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        OptimKind::Sgd { lr, momentum, weight_decay }
    }

    pub fn base_lr(&self) -> f64 {
        match *self {
            OptimKind::Adam { lr, .. } | OptimKind::Sgd { lr, .. } => lr,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Schedule {
    Constant,
    /// `lr · factor^⌊t / every⌋`
    StepDrop { every: u64, factor: f64 },
    /// `lr · (1 − t/total)^power`, zero from `total` on.
    Poly { power: f64, total: u64 },
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule::Constant
    }
}

impl Schedule {
    pub fn factor(&self, step: u64) -> f64 {
        match *self {
            Schedule::Constant => 1.0,
            Schedule::StepDrop { every, factor } => factor.powi((step / every.max(1)) as i32),
            Schedule::Poly { power, total } => {
                if step >= total {
                    0.0
                } else {
                    (1.0 - step as f64 / total as f64).powf(power)
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    #[serde(flatten)]
    pub kind: OptimKind,
    #[serde(default)]
    pub schedule: Schedule,
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let lr = self.kind.base_lr();
        // lr = 0 is allowed as a frozen-model control run.
        if !(lr >= 0.0 && lr.is_finite()) {
            return invalid("optimizer", format!("learning rate {lr} must be finite and non-negative"));
        }
        match self.kind {
            OptimKind::Adam { beta1, beta2, eps, .. } => {
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
                    return invalid("adam", format!("betas ({beta1}, {beta2}) must lie in [0,1) and eps {eps} be positive"));
                }
            }
            OptimKind::Sgd { momentum, weight_decay, .. } => {
                if !(0.0..1.0).contains(&momentum) || weight_decay < 0.0 {
                    return invalid("sgd", format!("momentum {momentum} must lie in [0,1), weight decay {weight_decay} ≥ 0"));
                }
            }
        }
        match self.schedule {
            Schedule::StepDrop { every: 0, .. } => invalid("schedule", "step-drop interval must be positive"),
            Schedule::Poly { total: 0, .. } => invalid("schedule", "poly horizon must be positive"),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Optimizer<T: Scalar> {
    pub config: OptimConfig,
    step: u64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(config: OptimConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        })
    }

    /// Completed update count.
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Learning rate the next update will use.
    pub fn lr(&self) -> f64 {
        self.config.kind.base_lr() * self.config.schedule.factor(self.step)
    }

    /// Applies one update from the gradients held in `store`; returns the lr used.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<f64> {
        if self.first.is_empty() {
            self.first = store.iter().map(|(_, p)| Tensor::zeros(p.value.dims())).collect();
            self.second = self.first.clone();
        }
        if self.first.len() != store.len() {
            return invalid("optimizer", format!("state for {} params, store has {}", self.first.len(), store.len()));
        }
        let lr = self.lr();
        let t = self.step + 1;
        let c = |v: f64| T::from_f64_lossy(v);
        match self.config.kind {
            OptimKind::Adam { beta1, beta2, eps, .. } => {
                let bc1 = 1.0 - beta1.powi(t as i32);
                let bc2 = 1.0 - beta2.powi(t as i32);
                let (b1, b2, e) = (c(beta1), c(beta2), c(eps));
                let (one_b1, one_b2) = (c(1.0 - beta1), c(1.0 - beta2));
                let step_size = c(lr / bc1);
                let root_bc2 = c(bc2.sqrt());
                for (i, p) in store.iter_mut().enumerate() {
                    let m = self.first[i].data_mut();
                    let v = self.second[i].data_mut();
                    let g = p.grad.data().to_vec();
                    for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                        m[j] = b1 * m[j] + one_b1 * g[j];
                        v[j] = b2 * v[j] + one_b2 * g[j] * g[j];
                        *w = *w - step_size * m[j] / (v[j].sqrt() / root_bc2 + e);
                    }
                }
            }
            OptimKind::Sgd { momentum, weight_decay, .. } => {
                let (mu, wd, lr) = (c(momentum), c(weight_decay), c(lr));
                for (i, p) in store.iter_mut().enumerate() {
                    let buf = self.first[i].data_mut();
                    let g = p.grad.data().to_vec();
                    for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                        let d = g[j] + wd * *w;
                        buf[j] = mu * buf[j] + d;
                        *w = *w - lr * buf[j];
                    }
                }
            }
        }
        self.step = t;
        Ok(lr)
    }
}
