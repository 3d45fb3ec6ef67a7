use crate::error::{shape_err, Result};
use crate::head::config::{FlattenConfig, PredictorMode};
use crate::head::dwsg::DwsgLayer;
use crate::layers::{ConvSpec, Mode};
use crate::nn::{BatchNorm2d, Conv2d};
use crate::param::ParamStore;
use crate::shuffle::Rearrangement;
use crate::tape::{Tape, Var};
use crate::tensor::{Dims, Scalar};

/// Stacked DWSGConv layers followed by the rearrangement `R`.
#[derive(Debug, Clone)]
pub struct FlatteningModule<T: Scalar> {
    pub config: FlattenConfig,
    pub layers: Vec<DwsgLayer<T>>,
    pub rearrangement: Rearrangement,
}

impl<T: Scalar> FlatteningModule<T> {
    pub fn new(store: &mut ParamStore<T>, config: &FlattenConfig) -> Result<Self> {
        config.validate()?;
        let layers = config
            .layer_specs()
            .into_iter()
            .enumerate()
            .map(|(i, spec)| DwsgLayer::new(store, &format!("head.{i}"), spec))
            .collect::<Result<Vec<_>>>()?;
        let rearrangement = Rearrangement::new(config.rearrange_spec(), config.rearrange, config.rearrange_seed)?;
        Ok(Self {
            config: config.clone(),
            layers,
            rearrangement,
        })
    }

    /// Output of the last DWSGConv layer, descriptors still stacked along channels.
    pub fn forward_stacked(&mut self, tape: &Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let c = tape.dims(x).c;
        if c != self.config.c_in {
            return shape_err("flatten_forward", format!("features have {c} channels, head expects {}", self.config.c_in));
        }
        let mut y = x;
        for layer in &mut self.layers {
            y = layer.forward(tape, store, y)?;
        }
        Ok(y)
    }

    /// Pixelwise descriptors `F̃` at `s2` times the (strided) feature resolution.
    pub fn forward(&mut self, tape: &Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let stacked = self.forward_stacked(tape, store, x)?;
        tape.rearrange(stacked, &self.rearrangement)
    }

    pub fn output_dims(&self, features: Dims) -> Dims {
        let side = |s: usize| self.config.output_side(s);
        Dims::new(features.n, self.config.c_tilde(), side(features.h), side(features.w))
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.layers.iter_mut().for_each(|l| l.set_mode(mode));
    }

    pub fn batch_norms(&self) -> impl Iterator<Item = &BatchNorm2d<T>> {
        self.layers.iter().flat_map(|l| l.batch_norms())
    }

    pub fn batch_norms_mut(&mut self) -> impl Iterator<Item = &mut BatchNorm2d<T>> {
        self.layers.iter_mut().flat_map(|l| l.batch_norms_mut())
    }
}

/// Linear map from `C̃` descriptor channels to `C` outputs, with bias.
///
/// The same weights serve both formulations: a per-pixel affine map on the
/// rearranged descriptors, or a fully-connected map applied to each of the
/// `s2²` stacked descriptor blocks before rearrangement.
#[derive(Debug, Clone)]
pub struct Predictor {
    pub linear: Conv2d,
    pub classes: usize,
    pub c_tilde: usize,
    pub mode: PredictorMode,
}

impl Predictor {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, c_tilde: usize, classes: usize, mode: PredictorMode) -> Result<Self> {
        let spec = ConvSpec::new(c_tilde, classes, 1).with_bias(true);
        Ok(Self {
            linear: Conv2d::new(store, "predictor", spec)?,
            classes,
            c_tilde,
            mode,
        })
    }

    /// `Y_p̃ = affine(F̃)` at every pixel.
    pub fn predict_affine<T: Scalar>(&self, tape: &Tape<T>, store: &ParamStore<T>, descriptors: Var) -> Result<Var> {
        self.linear.forward(tape, store, descriptors)
    }

    /// `P = fc(stacked)`: block `b` of the output holds the `C` predictions for
    /// grid cell `b`, so that the standard rearrangement with `C̃ = C` maps
    /// `P` onto `Y_p̃`.
    pub fn predict_folded<T: Scalar>(
        &self,
        tape: &Tape<T>,
        store: &ParamStore<T>,
        stacked: Var,
        rearrangement: &Rearrangement,
    ) -> Result<Var> {
        let d = tape.dims(stacked);
        let blocks = rearrangement.spec().blocks();
        if d.c != blocks * self.c_tilde {
            return shape_err("predict_folded", format!("{} channels for {blocks} blocks of {}", d.c, self.c_tilde));
        }
        let order = rearrangement.block_order_sources();
        let ordered = if order.iter().enumerate().all(|(i, &s)| i == s) {
            stacked
        } else {
            tape.permute_channels(stacked, &order)?
        };
        let per_block = tape.reshape(ordered, Dims::new(d.n * blocks, self.c_tilde, d.h, d.w))?;
        let out = self.linear.forward(tape, store, per_block)?;
        tape.reshape(out, Dims::new(d.n, blocks * self.classes, d.h, d.w))
    }
}
