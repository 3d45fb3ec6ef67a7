//! Backbone + Flattening Module + predictor, runnable in either formulation.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::head::{FlattenConfig, FlatteningModule, Predictor, PredictorMode, Target};
use crate::layers::{bilinear_upsample, Mode};
use crate::nn::BatchNorm2d;
use crate::param::ParamStore;
use crate::shuffle::Rearrangement;
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};
use crate::toylab::backbone::{ToyBackbone, ToyBackboneSpec};

/// Which of the two equivalent pipelines to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Formulation {
    /// Rearrange descriptors to space, per-pixel affine, loss on grid-resolution targets.
    Unfolded,
    /// Per-block fully-connected predictor, loss on folded targets.
    Folded,
}

impl From<PredictorMode> for Formulation {
    fn from(m: PredictorMode) -> Self {
        match m {
            PredictorMode::AffineAfterR => Formulation::Unfolded,
            PredictorMode::FcBeforeR => Formulation::Folded,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FlatteNet<T: Scalar> {
    pub store: ParamStore<T>,
    /// `None` feeds inputs straight to the head as backbone features.
    pub backbone: Option<ToyBackbone<T>>,
    pub head: FlatteningModule<T>,
    pub predictor: Predictor,
    /// Standard rearrangement on `C` prediction channels: maps `P` onto `Y_p̃`.
    pub output_rearrangement: Rearrangement,
}

impl<T: Scalar> FlatteNet<T> {
    pub fn new(config: &FlattenConfig, backbone: Option<&ToyBackboneSpec>, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new(seed);
        let backbone = match backbone {
            Some(spec) => {
                if spec.feature_channels() != config.c_in {
                    return shape_err(
                        "FlatteNet::new",
                        format!("backbone emits {} channels, head expects {}", spec.feature_channels(), config.c_in),
                    );
                }
                Some(ToyBackbone::new(&mut store, spec)?)
            }
            None => None,
        };
        let head = FlatteningModule::new(&mut store, config)?;
        let classes = config.predictor.classes;
        let predictor = Predictor::new(&mut store, config.c_tilde(), classes, config.predictor.mode)?;
        let output_rearrangement = Rearrangement::standard(config.s2, classes)?;
        Ok(Self {
            store,
            backbone,
            head,
            predictor,
            output_rearrangement,
        })
    }

    pub fn config(&self) -> &FlattenConfig {
        &self.head.config
    }

    pub fn classes(&self) -> usize {
        self.predictor.classes
    }

    pub fn s2(&self) -> usize {
        self.head.config.s2
    }

    pub fn features(&mut self, tape: &Tape<T>, x: Var) -> Result<Var> {
        match &mut self.backbone {
            Some(bb) => bb.forward(tape, &self.store, x),
            None => Ok(x),
        }
    }

    /// `Y_p̃`: predictions on the prediction grid.
    pub fn forward_unfolded(&mut self, tape: &Tape<T>, x: Var) -> Result<Var> {
        let f = self.features(tape, x)?;
        let descriptors = self.head.forward(tape, &self.store, f)?;
        self.predictor.predict_affine(tape, &self.store, descriptors)
    }

    /// `P`: predictions in the folded (stacked) layout.
    pub fn forward_folded(&mut self, tape: &Tape<T>, x: Var) -> Result<Var> {
        let f = self.features(tape, x)?;
        let stacked = self.head.forward_stacked(tape, &self.store, f)?;
        self.predictor
            .predict_folded(tape, &self.store, stacked, &self.head.rearrangement)
    }

    pub fn forward(&mut self, tape: &Tape<T>, x: Var, form: Formulation) -> Result<Var> {
        match form {
            Formulation::Unfolded => self.forward_unfolded(tape, x),
            Formulation::Folded => self.forward_folded(tape, x),
        }
    }

    /// Scalar loss against a target already at prediction-grid resolution.
    /// The folded formulation folds the target with `R⁻¹` itself.
    pub fn loss(&mut self, tape: &Tape<T>, x: Var, grid_target: &Target<T>, form: Formulation) -> Result<Var> {
        let pred = self.forward(tape, x, form)?;
        let classes = self.classes();
        let s2 = self.s2();
        match (form, grid_target) {
            (Formulation::Unfolded, Target::Continuous(t)) => tape.mse(pred, t),
            (Formulation::Unfolded, Target::Discrete(l)) => tape.softmax_ce(pred, l, classes, 1),
            (Formulation::Folded, target) => match target.fold_grid(s2)? {
                Target::Continuous(t) => tape.mse(pred, &t),
                Target::Discrete(l) => tape.softmax_ce(pred, &l, classes, s2),
            },
        }
    }

    /// Full-resolution prediction `Y_p = bilinear(Y_p̃)`.
    pub fn predict_full(&mut self, x: &Tensor<T>, s1: usize) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let y = self.forward_unfolded(&tape, xv)?;
        let out = bilinear_upsample(&tape.value(y), s1)?;
        Ok(out)
    }

    pub fn set_mode(&mut self, mode: Mode) {
        if let Some(bb) = &mut self.backbone {
            bb.set_mode(mode);
        }
        self.head.set_mode(mode);
    }

    pub fn batch_norms(&self) -> Vec<&BatchNorm2d<T>> {
        let mut out: Vec<&BatchNorm2d<T>> = Vec::new();
        if let Some(bb) = &self.backbone {
            out.extend(bb.batch_norms());
        }
        out.extend(self.head.batch_norms());
        out
    }

    pub fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm2d<T>> {
        let mut out: Vec<&mut BatchNorm2d<T>> = Vec::new();
        if let Some(bb) = &mut self.backbone {
            out.extend(bb.batch_norms_mut());
        }
        out.extend(self.head.batch_norms_mut());
        out
    }
}
