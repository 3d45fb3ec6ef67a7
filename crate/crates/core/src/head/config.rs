//! Hyperparameters of the DWSGConv layer and the Flattening Module, plus
//! the JSON config format the shipped tables are encoded in.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_divisible, Error, Result};
use crate::layers::ConvSpec;
use crate::shuffle::{connectivity_check, RearrangeKind, RearrangeSpec};

/// One DWSGConv layer as written in a config (input width is implied by its position).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerConfig {
    pub k: usize,
    #[serde(default = "one")]
    pub s: usize,
    pub g1: usize,
    pub g2: usize,
    pub g3: usize,
    #[serde(default = "one")]
    pub expand: usize,
    #[serde(default = "yes")]
    pub prelu: bool,
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

/// A DWSGConv layer with its input width resolved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DwsgConvSpec {
    pub k: usize,
    pub s: usize,
    pub g1: usize,
    pub g2: usize,
    pub g3: usize,
    pub c_in: usize,
    pub expand: usize,
    pub prelu: bool,
}

impl DwsgConvSpec {
    pub fn from_config(layer: &LayerConfig, c_in: usize) -> Self {
        Self {
            k: layer.k,
            s: layer.s,
            g1: layer.g1,
            g2: layer.g2,
            g3: layer.g3,
            c_in,
            expand: layer.expand,
            prelu: layer.prelu,
        }
    }

    pub fn c_out(&self) -> usize {
        self.expand * self.c_in
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.s == 0 || self.expand == 0 || self.c_in == 0 {
            return Err(Error::Config(format!("k, s, expand and c_in must be positive: {self:?}")));
        }
        ensure_divisible("DWSGConv g1", self.c_in, self.g1)?;
        ensure_divisible("DWSGConv g2", self.c_in, self.g2)?;
        ensure_divisible("DWSGConv g3", self.c_in, self.g3)?;
        ensure_divisible("DWSGConv g3 (c_out)", self.c_out(), self.g3)?;
        Ok(())
    }

    pub fn depthwise(&self) -> ConvSpec {
        ConvSpec::depthwise(self.c_in, self.k).stride(self.s)
    }

    pub fn first_pointwise(&self) -> ConvSpec {
        ConvSpec::pointwise(self.c_in, self.c_in, self.g1)
    }

    pub fn second_pointwise(&self) -> ConvSpec {
        ConvSpec::pointwise(self.c_in, self.c_out(), self.g3)
    }

    /// Whether every output channel depends on every input channel.
    pub fn is_dense(&self) -> Result<bool> {
        connectivity_check(self.g1, self.g2, self.g3, self.c_in)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PredictorMode {
    /// Per-pixel affine map applied after the rearrangement.
    #[serde(rename = "affine-after-R")]
    AffineAfterR,
    /// Shared fully-connected map applied to every descriptor block before it.
    #[serde(rename = "fc-before-R")]
    FcBeforeR,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictorConfig {
    pub classes: usize,
    pub mode: PredictorMode,
}

/// Full head configuration; the on-disk JSON schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlattenConfig {
    #[serde(default)]
    pub name: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub description: String,
    /// Backbone output channels feeding the first layer.
    #[serde(default = "default_c_in")]
    pub c_in: usize,
    pub layers: Vec<LayerConfig>,
    pub s2: usize,
    #[serde(default)]
    pub rearrange: RearrangeKind,
    #[serde(default)]
    pub rearrange_seed: u64,
    pub predictor: PredictorConfig,
    /// Every layer must pass the connectivity check.
    #[serde(default = "yes")]
    pub require_dense: bool,
}

fn default_c_in() -> usize {
    2048
}

impl FlattenConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if cfg.name.is_empty() {
            cfg.name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Resolved layer specs, each with its input width.
    pub fn layer_specs(&self) -> Vec<DwsgConvSpec> {
        let mut c = self.c_in;
        self.layers
            .iter()
            .map(|l| {
                let spec = DwsgConvSpec::from_config(l, c);
                c = spec.c_out();
                spec
            })
            .collect()
    }

    pub fn stacked_channels(&self) -> usize {
        self.layer_specs().last().map_or(self.c_in, DwsgConvSpec::c_out)
    }

    pub fn total_stride(&self) -> usize {
        self.layers.iter().map(|l| l.s).product()
    }

    /// Descriptor channels per prediction-grid pixel: final channels / s2².
    pub fn c_tilde(&self) -> usize {
        self.stacked_channels() / (self.s2 * self.s2).max(1)
    }

    pub fn rearrange_spec(&self) -> RearrangeSpec {
        RearrangeSpec::new(self.s2, self.c_tilde())
    }

    /// Structural validation: divisibility, geometry, density.
    pub fn validate(&self) -> Result<()> {
        if self.s2 == 0 {
            return Err(Error::Config("s2 must be positive".into()));
        }
        if self.predictor.classes == 0 {
            return Err(Error::Config("predictor.classes must be positive".into()));
        }
        for (i, spec) in self.layer_specs().iter().enumerate() {
            spec.validate()
                .map_err(|e| Error::Config(format!("layer {i}: {e}")))?;
        }
        let c = self.stacked_channels();
        let blocks = self.s2 * self.s2;
        if c % blocks != 0 {
            return Err(Error::Config(format!(
                "final channels {c} not divisible by s2^2 = {blocks}"
            )));
        }
        if self.require_dense {
            if let Some(i) = self.first_sparse_layer()? {
                return Err(Error::Config(format!("layer {i} is not dense (connectivity check failed)")));
            }
        }
        Ok(())
    }

    /// Index of the first layer failing the connectivity check.
    pub fn first_sparse_layer(&self) -> Result<Option<usize>> {
        for (i, spec) in self.layer_specs().iter().enumerate() {
            if !spec.is_dense()? {
                return Ok(Some(i));
            }
        }
        Ok(None)
    }

    /// Prediction-grid side for a backbone feature side.
    pub fn output_side(&self, input_side: usize) -> usize {
        let mut side = input_side;
        for l in &self.layers {
            let dw = ConvSpec::depthwise(1, l.k).stride(l.s);
            side = dw.out_hw(side, side).map_or(0, |(h, _)| h);
        }
        side * self.s2
    }

    /// Checks `input × s2 / Π strides == expected` for a backbone feature side.
    pub fn check_geometry(&self, input_side: usize, expected_output_side: usize) -> Result<()> {
        let got = self.output_side(input_side);
        if got != expected_output_side {
            return Err(Error::Config(format!(
                "geometry mismatch: feature side {input_side} through strides {} and s2 {} gives {got}, expected {expected_output_side}",
                self.total_stride(),
                self.s2
            )));
        }
        Ok(())
    }
}

/// Configs encoding the published hyperparameter tables.
pub mod shipped {
    use super::FlattenConfig;

    pub const TABLE1: &str = include_str!("../../configs/table1.json");
    pub const TABLE2_RELU: &str = include_str!("../../configs/table2_relu.json");
    pub const TABLE2_EXPAND8: &str = include_str!("../../configs/table2_expand8.json");
    pub const TABLE2_PS_ONLY: &str = include_str!("../../configs/table2_ps_only.json");
    pub const TABLE2_RANDPERM: &str = include_str!("../../configs/table2_randperm.json");
    pub const TABLE7: &str = include_str!("../../configs/table7.json");
    pub const TABLE9: &str = include_str!("../../configs/table9.json");
    pub const TABLE11_SUB6: &str = include_str!("../../configs/table11_sub6.json");
    pub const TABLE11_SUB7: &str = include_str!("../../configs/table11_sub7.json");

    pub const ALL: &[(&str, &str)] = &[
        ("table1", TABLE1),
        ("table2_relu", TABLE2_RELU),
        ("table2_expand8", TABLE2_EXPAND8),
        ("table2_ps_only", TABLE2_PS_ONLY),
        ("table2_randperm", TABLE2_RANDPERM),
        ("table7", TABLE7),
        ("table9", TABLE9),
        ("table11_sub6", TABLE11_SUB6),
        ("table11_sub7", TABLE11_SUB7),
    ];

    pub fn load(name: &str) -> Option<FlattenConfig> {
        ALL.iter().find(|(n, _)| *n == name).map(|(n, text)| {
            let mut cfg = FlattenConfig::from_json(text).expect("shipped config parses");
            if cfg.name.is_empty() {
                cfg.name = n.to_string();
            }
            cfg
        })
    }

    pub fn all() -> Vec<FlattenConfig> {
        ALL.iter().map(|(n, _)| load(n).unwrap()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_configs_parse_and_validate() {
        for cfg in shipped::all() {
            cfg.validate().unwrap_or_else(|e| panic!("{}: {e}", cfg.name));
            assert!(cfg.c_tilde() >= 1);
        }
    }

    #[test]
    fn derived_descriptor_widths() {
        let c = |n| shipped::load(n).unwrap().c_tilde();
        assert_eq!(c("table1"), 32);
        assert_eq!(c("table7"), 128);
        assert_eq!(c("table9"), 64);
        assert_eq!(c("table11_sub6"), 32);
        assert_eq!(c("table11_sub7"), 32);
    }

    #[test]
    fn geometry_for_default_backbone_features() {
        // 256x256 input: 8x8 features at 1/32, predictions at 1/4
        for name in ["table1", "table11_sub6", "table11_sub7"] {
            shipped::load(name).unwrap().check_geometry(8, 64).unwrap();
        }
        // 480x480 segmentation input: 15x15 features, 120x120 predictions
        shipped::load("table7").unwrap().check_geometry(15, 120).unwrap();
        assert!(shipped::load("table1").unwrap().check_geometry(8, 32).is_err());
    }

    #[test]
    fn g3_must_divide_channels() {
        let mut cfg = shipped::load("table1").unwrap();
        cfg.layers[0].g3 = 48;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn unshuffled_table1_is_not_dense() {
        let mut cfg = shipped::load("table1").unwrap();
        cfg.layers[0].g2 = 1;
        assert_eq!(cfg.first_sparse_layer().unwrap(), Some(0));
        assert!(cfg.validate().is_err());
        cfg.require_dense = false;
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_fields_rejected() {
        let text = r#"{"layers": [], "s2": 1, "predictor": {"classes": 1, "mode": "fc-before-R"}, "bogus": 1}"#;
        assert!(FlattenConfig::from_json(text).is_err());
    }
}
