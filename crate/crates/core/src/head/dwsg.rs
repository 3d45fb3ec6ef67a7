use crate::error::Result;
use crate::head::config::DwsgConvSpec;
use crate::layers::Mode;
use crate::nn::{BatchNorm2d, Conv2d, PRelu};
use crate::param::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Scalar;

/// Depthwise separable group convolution layer.
///
/// depthwise k×k (stride s) + BN → pointwise group conv (g1) + BN + PReLU
/// (or ReLU) → channel shuffle (g2) → pointwise group conv (g3, widening by
/// `expand`) + BN + ReLU. Convolutions carry no bias since BN follows each.
#[derive(Debug, Clone)]
pub struct DwsgLayer<T: Scalar> {
    pub spec: DwsgConvSpec,
    pub depthwise: Conv2d,
    pub bn_depthwise: BatchNorm2d<T>,
    pub pointwise1: Conv2d,
    pub bn_pointwise1: BatchNorm2d<T>,
    /// `None` selects ReLU.
    pub prelu: Option<PRelu>,
    pub pointwise2: Conv2d,
    pub bn_pointwise2: BatchNorm2d<T>,
}

impl<T: Scalar> DwsgLayer<T> {
    pub fn new(store: &mut ParamStore<T>, name: &str, spec: DwsgConvSpec) -> Result<Self> {
        spec.validate()?;
        let c = spec.c_in;
        Ok(Self {
            spec,
            depthwise: Conv2d::new(store, &format!("{name}.dw"), spec.depthwise())?,
            bn_depthwise: BatchNorm2d::new(store, &format!("{name}.dw_bn"), c),
            pointwise1: Conv2d::new(store, &format!("{name}.pw1"), spec.first_pointwise())?,
            bn_pointwise1: BatchNorm2d::new(store, &format!("{name}.pw1_bn"), c),
            prelu: spec.prelu.then(|| PRelu::new(store, &format!("{name}.prelu"), c)),
            pointwise2: Conv2d::new(store, &format!("{name}.pw2"), spec.second_pointwise())?,
            bn_pointwise2: BatchNorm2d::new(store, &format!("{name}.pw2_bn"), spec.c_out()),
        })
    }

    pub fn forward(&mut self, tape: &Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let y = self.depthwise.forward(tape, store, x)?;
        let y = self.bn_depthwise.forward(tape, store, y)?;
        let y = self.pointwise1.forward(tape, store, y)?;
        let y = self.bn_pointwise1.forward(tape, store, y)?;
        let y = match &self.prelu {
            Some(p) => p.forward(tape, store, y)?,
            None => tape.relu(y)?,
        };
        let y = tape.channel_shuffle(y, self.spec.g2)?;
        let y = self.pointwise2.forward(tape, store, y)?;
        let y = self.bn_pointwise2.forward(tape, store, y)?;
        tape.relu(y)
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.bn_depthwise.set_mode(mode);
        self.bn_pointwise1.set_mode(mode);
        self.bn_pointwise2.set_mode(mode);
    }

    /// Running statistics of the three batch norms, in forward order.
    pub fn batch_norms(&self) -> [&BatchNorm2d<T>; 3] {
        [&self.bn_depthwise, &self.bn_pointwise1, &self.bn_pointwise2]
    }

    pub fn batch_norms_mut(&mut self) -> [&mut BatchNorm2d<T>; 3] {
        [&mut self.bn_depthwise, &mut self.bn_pointwise1, &mut self.bn_pointwise2]
    }
}
