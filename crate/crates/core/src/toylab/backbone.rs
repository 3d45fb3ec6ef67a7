use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{ConvSpec, Mode};
use crate::nn::{BatchNorm2d, ConvBnRelu};
use crate::param::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Scalar;

/// A plain fully convolutional encoder: one stride-2 conv+BN+ReLU per stage,
/// optionally followed by a 1×1 conv+BN+ReLU widening to `out_channels`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyBackboneSpec {
    #[serde(default = "three")]
    pub in_channels: usize,
    /// Output width of each stride-2 stage; the stage count is its length.
    pub widths: Vec<usize>,
    #[serde(default = "three")]
    pub k: usize,
    #[serde(default)]
    pub out_channels: Option<usize>,
}

fn three() -> usize {
    3
}

impl Default for ToyBackboneSpec {
    fn default() -> Self {
        Self {
            in_channels: 3,
            widths: vec![64, 128, 256, 256, 512],
            k: 3,
            out_channels: None,
        }
    }
}

impl ToyBackboneSpec {
    pub fn stages(&self) -> usize {
        self.widths.len()
    }

    pub fn output_stride(&self) -> usize {
        1 << self.stages()
    }

    pub fn feature_channels(&self) -> usize {
        self.out_channels
            .or_else(|| self.widths.last().copied())
            .unwrap_or(self.in_channels)
    }

    /// Feature side for an input side; requires exact division.
    pub fn feature_side(&self, input_side: usize) -> Result<usize> {
        if input_side == 0 || input_side % self.output_stride() != 0 {
            return Err(Error::Config(format!(
                "input side {input_side} is not a multiple of the backbone stride {}",
                self.output_stride()
            )));
        }
        Ok(input_side / self.output_stride())
    }

    /// Stage convolutions in order, including the optional widening conv.
    pub fn conv_specs(&self) -> Vec<ConvSpec> {
        let mut c = self.in_channels;
        let mut specs: Vec<ConvSpec> = self
            .widths
            .iter()
            .map(|&w| {
                let s = ConvSpec::new(c, w, self.k).stride(2);
                c = w;
                s
            })
            .collect();
        if let Some(out) = self.out_channels {
            specs.push(ConvSpec::new(c, out, 1));
        }
        specs
    }
}

#[derive(Debug, Clone)]
pub struct ToyBackbone<T: Scalar> {
    pub spec: ToyBackboneSpec,
    pub blocks: Vec<ConvBnRelu<T>>,
}

impl<T: Scalar> ToyBackbone<T> {
    pub fn new(store: &mut ParamStore<T>, spec: &ToyBackboneSpec) -> Result<Self> {
        let blocks = spec
            .conv_specs()
            .into_iter()
            .enumerate()
            .map(|(i, s)| ConvBnRelu::new(store, &format!("backbone.{i}"), s, true))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            spec: spec.clone(),
            blocks,
        })
    }

    pub fn forward(&mut self, tape: &Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let mut y = x;
        for b in &mut self.blocks {
            y = b.forward(tape, store, y)?;
        }
        Ok(y)
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.blocks.iter_mut().for_each(|b| b.set_mode(mode));
    }

    pub fn batch_norms(&self) -> impl Iterator<Item = &BatchNorm2d<T>> {
        self.blocks.iter().map(|b| &b.bn)
    }

    pub fn batch_norms_mut(&mut self) -> impl Iterator<Item = &mut BatchNorm2d<T>> {
        self.blocks.iter_mut().map(|b| &mut b.bn)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Dims, Tensor};

    #[test]
    fn output_geometry() {
        let spec = ToyBackboneSpec {
            widths: vec![4, 8, 8],
            out_channels: Some(16),
            ..Default::default()
        };
        assert_eq!(spec.output_stride(), 8);
        let mut store = ParamStore::<f64>::new(0);
        let mut bb = ToyBackbone::new(&mut store, &spec).unwrap();
        let tape = Tape::new();
        let x = tape.leaf(Tensor::uniform((2, 3, 32, 32), 1.0, 0));
        let y = bb.forward(&tape, &store, x).unwrap();
        assert_eq!(tape.dims(y), Dims::new(2, 16, 4, 4));
        assert!(spec.feature_side(30).is_err());
    }

    #[test]
    fn default_widths() {
        let spec = ToyBackboneSpec::default();
        assert_eq!(spec.stages(), 5);
        assert_eq!(spec.feature_channels(), 512);
        assert_eq!(spec.feature_side(256).unwrap(), 8);
    }
}
