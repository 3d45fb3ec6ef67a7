//! Parameterized building blocks holding [`ParamId`]s into a [`ParamStore`].

use crate::error::Result;
use crate::layers::{BatchNormState, ConvSpec, Mode};
use crate::param::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{Dims, Scalar};

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub spec: ConvSpec,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Conv2d {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, spec: ConvSpec) -> Result<Self> {
        spec.validate()?;
        let weight = store.he_uniform(format!("{name}.weight"), spec.weight_dims(), spec.fan_in());
        let bias = spec
            .bias
            .then(|| store.constant(format!("{name}.bias"), Dims::new(1, spec.c_out, 1, 1), T::zero()));
        Ok(Self { spec, weight, bias })
    }

    pub fn forward<T: Scalar>(&self, tape: &Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = self.bias.map(|b| tape.param(store, b));
        tape.conv2d(x, w, b, &self.spec)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d<T: Scalar> {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub state: BatchNormState<T>,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        let d = Dims::new(1, channels, 1, 1);
        Self {
            gamma: store.constant(format!("{name}.gamma"), d, T::one()),
            beta: store.constant(format!("{name}.beta"), d, T::zero()),
            state: BatchNormState::new(channels),
        }
    }

    pub fn forward(&mut self, tape: &Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.batch_norm(x, g, b, &mut self.state)
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.state.mode = mode;
    }
}

/// Channel-wise PReLU, slopes initialized to 1.
#[derive(Debug, Clone)]
pub struct PRelu {
    pub slope: ParamId,
}

impl PRelu {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        Self {
            slope: store.constant(format!("{name}.slope"), Dims::new(1, channels, 1, 1), T::one()),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let a = tape.param(store, self.slope);
        tape.prelu(x, a)
    }
}

/// Conv → BN → optional ReLU, the usual backbone unit.
#[derive(Debug, Clone)]
pub struct ConvBnRelu<T: Scalar> {
    pub conv: Conv2d,
    pub bn: BatchNorm2d<T>,
    pub relu: bool,
}

impl<T: Scalar> ConvBnRelu<T> {
    pub fn new(store: &mut ParamStore<T>, name: &str, spec: ConvSpec, relu: bool) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(store, &format!("{name}.conv"), spec)?,
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), spec.c_out),
            relu,
        })
    }

    pub fn forward(&mut self, tape: &Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(tape, store, x)?;
        let y = self.bn.forward(tape, store, y)?;
        if self.relu {
            tape.relu(y)
        } else {
            Ok(y)
        }
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.bn.set_mode(mode);
    }
}
