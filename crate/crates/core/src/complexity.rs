//! Analytic parameter and multiply-add counts over architecture descriptors.
//!
//! Convention: convolution weights (plus bias when declared), BN affine
//! parameters (2 per channel) and channel-wise PReLU slopes count as
//! parameters; BN running statistics do not. Only convolutions contribute
//! MACs; BN, activations, shuffles and pooling count as zero.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_divisible, Error, Result};
use crate::head::FlattenConfig;
use crate::layers::ConvSpec;
use crate::param::ParamStore;
use crate::tensor::Dims;
use crate::toylab::ToyBackboneSpec;

pub const CONVENTION: &str = "conv weights + BN affine + PReLU slopes, BN running stats excluded; MACs from convolutions only";

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

/// One symbolic layer. Channel input widths are implied by position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum LayerDesc {
    Conv {
        c_out: usize,
        k: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default = "one")]
        groups: usize,
        /// Defaults to `k / 2`.
        #[serde(default)]
        padding: Option<usize>,
        #[serde(default)]
        bias: bool,
    },
    BatchNorm,
    Relu,
    Prelu,
    ChannelShuffle {
        groups: usize,
    },
    PixelShuffle {
        r: usize,
    },
    MaxPool {
        k: usize,
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    GlobalAvgPool,
    /// 1×1 → k×k (stride) → 1×1 residual block, each conv followed by BN,
    /// with a strided 1×1 conv + BN projection when the shape changes.
    Bottleneck {
        width: usize,
        c_out: usize,
        #[serde(default = "one")]
        stride: usize,
    },
    /// `blocks` bottlenecks, the first one strided.
    Stage {
        blocks: usize,
        width: usize,
        c_out: usize,
        #[serde(default = "one")]
        stride: usize,
    },
    /// A DWSGConv layer.
    Dwsg {
        k: usize,
        #[serde(default = "one")]
        s: usize,
        g1: usize,
        g2: usize,
        g3: usize,
        #[serde(default = "one")]
        expand: usize,
        #[serde(default = "yes")]
        prelu: bool,
    },
    /// Channel shuffle (`s2²` groups) then pixel shuffle (`s2`).
    Rearrange {
        s2: usize,
    },
}

impl LayerDesc {
    pub fn op_name(&self) -> &'static str {
        match self {
            LayerDesc::Conv { .. } => "conv",
            LayerDesc::BatchNorm => "batch_norm",
            LayerDesc::Relu => "relu",
            LayerDesc::Prelu => "prelu",
            LayerDesc::ChannelShuffle { .. } => "channel_shuffle",
            LayerDesc::PixelShuffle { .. } => "pixel_shuffle",
            LayerDesc::MaxPool { .. } => "max_pool",
            LayerDesc::GlobalAvgPool => "global_avg_pool",
            LayerDesc::Bottleneck { .. } => "bottleneck",
            LayerDesc::Stage { .. } => "stage",
            LayerDesc::Dwsg { .. } => "dwsg",
            LayerDesc::Rearrange { .. } => "rearrange",
        }
    }

    pub fn conv(c_out: usize, k: usize) -> Self {
        LayerDesc::Conv {
            c_out,
            k,
            stride: 1,
            groups: 1,
            padding: None,
            bias: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Geometry {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Geometry {
    pub fn new(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w }
    }
}

impl fmt::Display for Geometry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}×{}×{}", self.c, self.h, self.w)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchDescriptor {
    pub name: String,
    pub input: Geometry,
    pub layers: Vec<LayerDesc>,
}

impl ArchDescriptor {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Appends `other`'s layers; its declared input is ignored.
    pub fn then(mut self, other: &ArchDescriptor) -> Self {
        self.name = format!("{} + {}", self.name, other.name);
        self.layers.extend(other.layers.iter().cloned());
        self
    }

    /// The leaf layers with their input geometry, macros expanded.
    pub fn flatten(&self) -> Result<Vec<(String, LayerDesc, Geometry)>> {
        let mut out = Vec::new();
        let mut g = self.input;
        for (i, layer) in self.layers.iter().enumerate() {
            g = expand(&format!("{i}.{}", layer.op_name()), layer, g, &mut out)?;
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub name: String,
    pub op: String,
    pub input: Geometry,
    pub output: Geometry,
    pub params: u64,
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub name: String,
    pub convention: String,
    pub layers: Vec<LayerReport>,
    pub total_params: u64,
    pub total_macs: u64,
}

impl ComplexityReport {
    pub fn params_m(&self) -> f64 {
        self.total_params as f64 / 1e6
    }

    pub fn gmacs(&self) -> f64 {
        self.total_macs as f64 / 1e9
    }
}

impl fmt::Display for ComplexityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{}", self.name)?;
        writeln!(f, "{:<28} {:>14} {:>14} {:>12} {:>16}", "layer", "input", "output", "params", "MACs")?;
        for l in &self.layers {
            writeln!(
                f,
                "{:<28} {:>14} {:>14} {:>12} {:>16}",
                l.name,
                l.input.to_string(),
                l.output.to_string(),
                l.params,
                l.macs
            )?;
        }
        writeln!(f, "total params {} ({:.2}M)", self.total_params, self.params_m())?;
        writeln!(f, "total MACs   {} ({:.2}G)", self.total_macs, self.gmacs())?;
        write!(f, "convention: {}", self.convention)
    }
}

fn conv_spec(c_in: usize, c_out: usize, k: usize, stride: usize, groups: usize, padding: Option<usize>, bias: bool) -> ConvSpec {
    let mut s = ConvSpec::new(c_in, c_out, k).stride(stride).groups(groups).with_bias(bias);
    if let Some(p) = padding {
        s = s.padding(p);
    }
    s
}

fn geometry_err(name: &str, detail: String) -> Error {
    Error::Shape {
        op: "complexity",
        detail: format!("{name}: {detail}"),
    }
}

/// Expands macros into leaf layers, returning the output geometry.
fn expand(name: &str, layer: &LayerDesc, g: Geometry, out: &mut Vec<(String, LayerDesc, Geometry)>) -> Result<Geometry> {
    let leaf = |out: &mut Vec<(String, LayerDesc, Geometry)>, l: LayerDesc| -> Result<Geometry> {
        let next = leaf_output(name, &l, g)?;
        out.push((name.to_string(), l, g));
        Ok(next)
    };
    match *layer {
        LayerDesc::Bottleneck { width, c_out, stride } => {
            let mut sub = vec![
                LayerDesc::conv(width, 1),
                LayerDesc::BatchNorm,
                LayerDesc::Relu,
                LayerDesc::Conv {
                    c_out: width,
                    k: 3,
                    stride,
                    groups: 1,
                    padding: None,
                    bias: false,
                },
                LayerDesc::BatchNorm,
                LayerDesc::Relu,
                LayerDesc::conv(c_out, 1),
                LayerDesc::BatchNorm,
            ];
            let mut h = g;
            for (j, l) in sub.drain(..).enumerate() {
                h = expand(&format!("{name}.{j}"), &l, h, out)?;
            }
            if stride != 1 || g.c != c_out {
                let proj = LayerDesc::Conv {
                    c_out,
                    k: 1,
                    stride,
                    groups: 1,
                    padding: Some(0),
                    bias: false,
                };
                let p = expand(&format!("{name}.proj"), &proj, g, out)?;
                expand(&format!("{name}.proj_bn"), &LayerDesc::BatchNorm, p, out)?;
                if p != h {
                    return Err(geometry_err(name, format!("projection gives {p}, main path {h}")));
                }
            }
            Ok(h)
        }
        LayerDesc::Stage { blocks, width, c_out, stride } => {
            let mut h = g;
            for b in 0..blocks {
                let block = LayerDesc::Bottleneck {
                    width,
                    c_out,
                    stride: if b == 0 { stride } else { 1 },
                };
                h = expand(&format!("{name}.{b}"), &block, h, out)?;
            }
            Ok(h)
        }
        LayerDesc::Dwsg { k, s, g1, g2, g3, expand: e, prelu } => {
            let c = g.c;
            let sub = [
                LayerDesc::Conv {
                    c_out: c,
                    k,
                    stride: s,
                    groups: c,
                    padding: None,
                    bias: false,
                },
                LayerDesc::BatchNorm,
                LayerDesc::Conv {
                    c_out: c,
                    k: 1,
                    stride: 1,
                    groups: g1,
                    padding: None,
                    bias: false,
                },
                LayerDesc::BatchNorm,
                if prelu { LayerDesc::Prelu } else { LayerDesc::Relu },
                LayerDesc::ChannelShuffle { groups: g2 },
                LayerDesc::Conv {
                    c_out: c * e,
                    k: 1,
                    stride: 1,
                    groups: g3,
                    padding: None,
                    bias: false,
                },
                LayerDesc::BatchNorm,
                LayerDesc::Relu,
            ];
            let names = ["dw", "dw_bn", "pw1", "pw1_bn", "act", "shuffle", "pw2", "pw2_bn", "relu"];
            let mut h = g;
            for (l, n) in sub.iter().zip(names) {
                h = expand(&format!("{name}.{n}"), l, h, out)?;
            }
            Ok(h)
        }
        LayerDesc::Rearrange { s2 } => {
            let h = expand(&format!("{name}.cs"), &LayerDesc::ChannelShuffle { groups: s2 * s2 }, g, out)?;
            expand(&format!("{name}.ps"), &LayerDesc::PixelShuffle { r: s2 }, h, out)
        }
        ref l => leaf(out, l.clone()),
    }
}

fn leaf_output(name: &str, layer: &LayerDesc, g: Geometry) -> Result<Geometry> {
    match *layer {
        LayerDesc::Conv { c_out, k, stride, groups, padding, bias } => {
            let spec = conv_spec(g.c, c_out, k, stride, groups, padding, bias);
            spec.validate()?;
            let (h, w) = spec
                .out_hw(g.h, g.w)
                .ok_or_else(|| geometry_err(name, format!("kernel {k} does not fit {g}")))?;
            Ok(Geometry::new(c_out, h, w))
        }
        LayerDesc::BatchNorm | LayerDesc::Relu | LayerDesc::Prelu => Ok(g),
        LayerDesc::ChannelShuffle { groups } => {
            ensure_divisible("channel_shuffle", g.c, groups)?;
            Ok(g)
        }
        LayerDesc::PixelShuffle { r } => {
            ensure_divisible("pixel_shuffle", g.c, r * r)?;
            Ok(Geometry::new(g.c / (r * r), g.h * r, g.w * r))
        }
        LayerDesc::MaxPool { k, stride, padding } => {
            let span = |x: usize| {
                let p = x + 2 * padding;
                (p >= k && stride > 0).then(|| (p - k) / stride + 1)
            };
            match (span(g.h), span(g.w)) {
                (Some(h), Some(w)) => Ok(Geometry::new(g.c, h, w)),
                _ => Err(geometry_err(name, format!("pool {k}/{stride} does not fit {g}"))),
            }
        }
        LayerDesc::GlobalAvgPool => Ok(Geometry::new(g.c, 1, 1)),
        _ => unreachable!("macros are expanded before reaching leaves"),
    }
}

fn leaf_counts(layer: &LayerDesc, g: Geometry, out: Geometry) -> (u64, u64) {
    match *layer {
        LayerDesc::Conv { c_out, k, stride, groups, padding, bias } => {
            let spec = conv_spec(g.c, c_out, k, stride, groups, padding, bias);
            let w = spec.weight_numel() as u64;
            let b = if bias { c_out as u64 } else { 0 };
            (w + b, w * (out.h * out.w) as u64)
        }
        LayerDesc::BatchNorm => (2 * g.c as u64, 0),
        LayerDesc::Prelu => (g.c as u64, 0),
        _ => (0, 0),
    }
}

/// Per-leaf and total parameter and MAC counts.
pub fn analyze(desc: &ArchDescriptor) -> Result<ComplexityReport> {
    let mut layers = Vec::new();
    for (name, layer, g) in desc.flatten()? {
        let out = leaf_output(&name, &layer, g)?;
        let (params, macs) = leaf_counts(&layer, g, out);
        layers.push(LayerReport {
            name,
            op: layer.op_name().to_string(),
            input: g,
            output: out,
            params,
            macs,
        });
    }
    Ok(ComplexityReport {
        name: desc.name.clone(),
        convention: CONVENTION.to_string(),
        total_params: layers.iter().map(|l| l.params).sum(),
        total_macs: layers.iter().map(|l| l.macs).sum(),
        layers,
    })
}

pub fn count_params(desc: &ArchDescriptor) -> Result<u64> {
    Ok(analyze(desc)?.total_params)
}

pub fn count_macs(desc: &ArchDescriptor) -> Result<u64> {
    Ok(analyze(desc)?.total_macs)
}

/// Brute-force oracle: allocates every parameter tensor the descriptor
/// implies and returns the store.
pub fn instantiate(desc: &ArchDescriptor) -> Result<ParamStore<f32>> {
    let mut store = ParamStore::new(0);
    for (name, layer, g) in desc.flatten()? {
        match layer {
            LayerDesc::Conv { c_out, k, stride, groups, padding, bias } => {
                let spec = conv_spec(g.c, c_out, k, stride, groups, padding, bias);
                store.constant(format!("{name}.weight"), spec.weight_dims(), 0.0);
                if bias {
                    store.constant(format!("{name}.bias"), Dims::new(1, c_out, 1, 1), 0.0);
                }
            }
            LayerDesc::BatchNorm => {
                store.constant(format!("{name}.gamma"), Dims::new(1, g.c, 1, 1), 1.0);
                store.constant(format!("{name}.beta"), Dims::new(1, g.c, 1, 1), 0.0);
            }
            LayerDesc::Prelu => {
                store.constant(format!("{name}.slope"), Dims::new(1, g.c, 1, 1), 1.0);
            }
            _ => {}
        }
    }
    Ok(store)
}

/// The DWSGConv layers and rearrangement of `config` at a feature map of `side × side`.
/// The predictor is not included.
pub fn head_descriptor(config: &FlattenConfig, side: usize) -> ArchDescriptor {
    let mut layers: Vec<LayerDesc> = config
        .layers
        .iter()
        .map(|l| LayerDesc::Dwsg {
            k: l.k,
            s: l.s,
            g1: l.g1,
            g2: l.g2,
            g3: l.g3,
            expand: l.expand,
            prelu: l.prelu,
        })
        .collect();
    layers.push(LayerDesc::Rearrange { s2: config.s2 });
    ArchDescriptor {
        name: if config.name.is_empty() { "head".into() } else { config.name.clone() },
        input: Geometry::new(config.c_in, side, side),
        layers,
    }
}

pub fn toy_descriptor(spec: &ToyBackboneSpec, side: usize) -> ArchDescriptor {
    let mut layers = Vec::new();
    for s in spec.conv_specs() {
        layers.push(LayerDesc::Conv {
            c_out: s.c_out,
            k: s.k,
            stride: s.stride,
            groups: s.groups,
            padding: Some(s.padding),
            bias: s.bias,
        });
        layers.extend([LayerDesc::BatchNorm, LayerDesc::Relu]);
    }
    ArchDescriptor {
        name: "toy".into(),
        input: Geometry::new(spec.in_channels, side, side),
        layers,
    }
}

/// Backbones with shipped descriptors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    Resnet50,
    Resnet101,
    Toy,
}

impl std::str::FromStr for Backbone {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "resnet50" => Ok(Backbone::Resnet50),
            "resnet101" => Ok(Backbone::Resnet101),
            "toy" => Ok(Backbone::Toy),
            other => Err(Error::Config(format!("unknown backbone {other:?} (resnet50, resnet101, toy)"))),
        }
    }
}

impl Backbone {
    /// Descriptor at `side × side` RGB input. ResNets end after the last
    /// stage (no pooling or classifier).
    pub fn descriptor(self, side: usize) -> Result<ArchDescriptor> {
        let mut d = match self {
            Backbone::Resnet50 => ArchDescriptor::from_json(include_str!("../descriptors/resnet50.json"))?,
            Backbone::Resnet101 => ArchDescriptor::from_json(include_str!("../descriptors/resnet101.json"))?,
            Backbone::Toy => toy_descriptor(&ToyBackboneSpec::default(), side),
        };
        d.input = Geometry::new(3, side, side);
        Ok(d)
    }
}

/// Head complexity, optionally stacked on a backbone, for an `h × w` input
/// image (or an `h × w` feature map when there is no backbone).
pub fn describe(config: &FlattenConfig, backbone: Option<Backbone>, input: (usize, usize)) -> Result<ComplexityReport> {
    let (h, w) = input;
    match backbone {
        None => {
            let mut d = head_descriptor(config, h);
            d.input.w = w;
            analyze(&d)
        }
        Some(b) => {
            let mut bd = b.descriptor(h)?;
            bd.input.w = w;
            let out = analyze(&bd)?;
            let feat = out.layers.last().map(|l| l.output).unwrap_or(bd.input);
            if feat.c != config.c_in {
                return Err(Error::Config(format!(
                    "{} emits {} channels, head expects {}",
                    bd.name, feat.c, config.c_in
                )));
            }
            analyze(&bd.then(&head_descriptor(config, feat.h)))
        }
    }
}

/// Reference rows of the DWSGConv ablation on a 2048-channel input.
pub mod baselines {
    use super::*;

    /// Regular 1×1 conv 2048→2048 followed by BN.
    pub fn regular_pointwise(side: usize) -> ArchDescriptor {
        ArchDescriptor {
            name: "regular 1×1 conv + BN".into(),
            input: Geometry::new(2048, side, side),
            layers: vec![LayerDesc::conv(2048, 1), LayerDesc::BatchNorm],
        }
    }

    /// Plain 3×3 conv 2048→4096.
    pub fn naive_conv3x3(side: usize) -> ArchDescriptor {
        ArchDescriptor {
            name: "naive 3×3 conv".into(),
            input: Geometry::new(2048, side, side),
            layers: vec![LayerDesc::conv(4096, 3)],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::head::shipped;

    #[test]
    fn pointwise_macs() {
        let d = ArchDescriptor {
            name: "t".into(),
            input: Geometry::new(2, 4, 4),
            layers: vec![LayerDesc::conv(3, 1)],
        };
        let r = analyze(&d).unwrap();
        assert_eq!((r.total_params, r.total_macs), (6, 96));
    }

    #[test]
    fn table1_head() {
        let cfg = shipped::load("table1").unwrap();
        let r = analyze(&head_descriptor(&cfg, 8)).unwrap();
        assert_eq!(r.total_params, 229_376);
        assert_eq!(r.total_macs, 13_762_560);
        assert_eq!(r.layers.last().unwrap().output, Geometry::new(32, 64, 64));
    }

    #[test]
    fn empty_descriptor_is_zero() {
        let d = ArchDescriptor {
            name: "empty".into(),
            input: Geometry::new(8, 4, 4),
            layers: vec![],
        };
        let r = analyze(&d).unwrap();
        assert_eq!((r.total_params, r.total_macs), (0, 0));
    }

    #[test]
    fn geometry_errors() {
        let d = ArchDescriptor {
            name: "bad".into(),
            input: Geometry::new(6, 4, 4),
            layers: vec![LayerDesc::PixelShuffle { r: 2 }],
        };
        assert!(analyze(&d).is_err());
        let d = ArchDescriptor {
            name: "bad".into(),
            input: Geometry::new(6, 4, 4),
            layers: vec![LayerDesc::Conv {
                c_out: 4,
                k: 1,
                stride: 1,
                groups: 4,
                padding: None,
                bias: false,
            }],
        };
        assert!(analyze(&d).is_err());
    }

    #[test]
    fn descriptor_json() {
        let d = ArchDescriptor::from_json(
            r#"{"name":"x","input":{"c":3,"h":8,"w":8},"layers":[{"op":"conv","c_out":4,"k":3,"stride":2},{"op":"batch_norm"},{"op":"dwsg","k":3,"g1":2,"g2":2,"g3":2}]}"#,
        )
        .unwrap();
        let r = analyze(&d).unwrap();
        assert_eq!(r.layers.last().unwrap().output, Geometry::new(4, 4, 4));
    }
}
