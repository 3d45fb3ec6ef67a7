//! A linear tape for reverse-mode differentiation.
//!
//! Each recorded node stores its forward value, the op that produced it and
//! the input vars. `backward` walks the tape in reverse, calling the op's
//! explicit backward function and accumulating gradients. Leaves registered
//! through [`Tape::param`] push their gradient into the [`ParamStore`].

use std::cell::{Ref, RefCell};
use std::sync::Arc;

use crate::error::{shape_err, Result};
use crate::layers::{activation, conv, loss, norm, upsample};
use crate::layers::{BatchNormState, ConvSpec};
use crate::param::{ParamId, ParamStore};
use crate::shuffle::{self, Rearrangement, RearrangeKind};
use crate::tensor::{Dims, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T: Scalar> {
    Leaf,
    Conv(ConvSpec),
    BatchNorm(norm::BnCache<T>),
    Relu,
    PRelu,
    Permute(Arc<[usize]>),
    PixelShuffle(usize),
    PixelUnshuffle(usize),
    Reshape,
    Upsample(usize),
    Add,
    /// Scalar losses save their gradient at forward time.
    Loss(Tensor<T>),
    WeightedSum(Tensor<T>),
}

impl<T: Scalar> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv(_) => "conv2d",
            Op::BatchNorm(_) => "batch_norm",
            Op::Relu => "relu",
            Op::PRelu => "prelu",
            Op::Permute(_) => "permute_channels",
            Op::PixelShuffle(_) => "pixel_shuffle",
            Op::PixelUnshuffle(_) => "pixel_unshuffle",
            Op::Reshape => "reshape",
            Op::Upsample(_) => "bilinear_upsample",
            Op::Add => "add",
            Op::Loss(_) => "loss",
            Op::WeightedSum(_) => "weighted_sum",
        }
    }
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    inputs: Vec<Var>,
    param: Option<ParamId>,
    /// False for constants and anything computed only from constants.
    needs_grad: bool,
}

pub struct Tape<T: Scalar = f64> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of every tape node with respect to the backward seed.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `dims` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, dims: Dims) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(dims))
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = matches!(op, Op::Leaf) || inputs.iter().any(|v| nodes[v.0].needs_grad);
        nodes.push(Node {
            value,
            op,
            inputs: inputs.to_vec(),
            param: None,
            needs_grad,
        });
        Var(nodes.len() - 1)
    }

    pub fn leaf(&self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, &[])
    }

    /// A leaf no gradient is computed for, e.g. input images.
    pub fn constant(&self, value: Tensor<T>) -> Var {
        let v = self.leaf(value);
        self.nodes.borrow_mut()[v.0].needs_grad = false;
        v
    }

    /// Records a snapshot of a stored parameter as a leaf.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var {
        let v = self.leaf(store.value(id).clone());
        self.nodes.borrow_mut()[v.0].param = Some(id);
        v
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn dims(&self, v: Var) -> Dims {
        self.nodes.borrow()[v.0].value.dims()
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes.borrow()[v.0].op.name()
    }

    fn unary(&self, x: Var, op: Op<T>, f: impl FnOnce(&Tensor<T>) -> Result<Tensor<T>>) -> Result<Var> {
        let out = f(&self.nodes.borrow()[x.0].value)?;
        Ok(self.push(out, op, &[x]))
    }

    pub fn conv2d(&self, x: Var, weight: Var, bias: Option<Var>, spec: &ConvSpec) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let b = bias.map(|b| &nodes[b.0].value);
            conv::conv2d(&nodes[x.0].value, &nodes[weight.0].value, b, spec)?
        };
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        Ok(self.push(out, Op::Conv(*spec), &inputs))
    }

    pub fn batch_norm(&self, x: Var, gamma: Var, beta: Var, state: &mut BatchNormState<T>) -> Result<Var> {
        let (out, cache) = {
            let nodes = self.nodes.borrow();
            norm::batch_norm(&nodes[x.0].value, &nodes[gamma.0].value, &nodes[beta.0].value, state)?
        };
        Ok(self.push(out, Op::BatchNorm(cache), &[x, gamma, beta]))
    }

    pub fn relu(&self, x: Var) -> Result<Var> {
        self.unary(x, Op::Relu, |t| Ok(activation::relu(t)))
    }

    pub fn prelu(&self, x: Var, slope: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            activation::prelu(&nodes[x.0].value, &nodes[slope.0].value)?
        };
        Ok(self.push(out, Op::PRelu, &[x, slope]))
    }

    pub fn permute_channels(&self, x: Var, sources: &[usize]) -> Result<Var> {
        let sources: Arc<[usize]> = sources.into();
        let s = sources.clone();
        self.unary(x, Op::Permute(sources), |t| shuffle::permute_channels(t, &s))
    }

    pub fn channel_shuffle(&self, x: Var, groups: usize) -> Result<Var> {
        let sources = shuffle::channel_shuffle_sources(self.dims(x).c, groups)?;
        self.permute_channels(x, &sources)
    }

    pub fn pixel_shuffle(&self, x: Var, r: usize) -> Result<Var> {
        self.unary(x, Op::PixelShuffle(r), |t| shuffle::pixel_shuffle(t, r))
    }

    pub fn pixel_unshuffle(&self, x: Var, r: usize) -> Result<Var> {
        self.unary(x, Op::PixelUnshuffle(r), |t| shuffle::pixel_unshuffle(t, r))
    }

    /// Applies a rearrangement `R`; its backward is `R⁻¹` on the gradient.
    pub fn rearrange(&self, x: Var, r: &Rearrangement) -> Result<Var> {
        let spec = r.spec();
        let c = self.dims(x).c;
        if c != spec.stacked_channels() {
            return shape_err("rearrange", format!("input has {c} channels, expected {}", spec.stacked_channels()));
        }
        let permuted = match r.kind() {
            RearrangeKind::ChannelShufflePixelShuffle => self.channel_shuffle(x, spec.blocks())?,
            _ => self.permute_channels(x, r.channel_sources())?,
        };
        self.pixel_shuffle(permuted, spec.s2)
    }

    pub fn reshape(&self, x: Var, dims: Dims) -> Result<Var> {
        self.unary(x, Op::Reshape, |t| t.clone().reshape(dims))
    }

    pub fn upsample(&self, x: Var, factor: usize) -> Result<Var> {
        self.unary(x, Op::Upsample(factor), |t| upsample::bilinear_upsample(t, factor))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            if ta.dims() != tb.dims() {
                return shape_err("add", format!("{} vs {}", ta.dims(), tb.dims()));
            }
            let mut out = ta.clone();
            out.add_assign(tb);
            out
        };
        Ok(self.push(out, Op::Add, &[a, b]))
    }

    pub fn mse(&self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        let (l, g) = loss::mse_loss(&self.nodes.borrow()[pred.0].value, target)?;
        Ok(self.push(Tensor::scalar(l), Op::Loss(g), &[pred]))
    }

    pub fn softmax_ce(&self, pred: Var, labels: &Tensor<u32>, classes: usize, block_size: usize) -> Result<Var> {
        let (l, g) = loss::pixel_softmax_ce(&self.nodes.borrow()[pred.0].value, labels, classes, block_size)?;
        Ok(self.push(Tensor::scalar(l), Op::Loss(g), &[pred]))
    }

    /// `Σ weights ⊙ x`, a scalar.
    pub fn weighted_sum(&self, x: Var, weights: Tensor<T>) -> Result<Var> {
        let s = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            if t.dims() != weights.dims() {
                return shape_err("weighted_sum", format!("{} vs {}", t.dims(), weights.dims()));
            }
            t.data().iter().zip(weights.data()).map(|(&a, &b)| a * b).sum()
        };
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum(weights), &[x]))
    }

    /// Backpropagates from a scalar output with seed 1.
    pub fn backward(&self, output: Var, store: &mut ParamStore<T>) -> Result<Gradients<T>> {
        let dims = self.dims(output);
        self.backward_with(output, Tensor::ones(dims), store)
    }

    pub fn backward_with(&self, output: Var, seed: Tensor<T>, store: &mut ParamStore<T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        if seed.dims() != nodes[output.0].value.dims() {
            return shape_err("backward", format!("seed {} for output {}", seed.dims(), nodes[output.0].value.dims()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);
        for id in (0..=output.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let input_grads = local_backward(node, &g, &nodes);
            for (v, ig) in node.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&ig),
                    slot @ None => *slot = Some(ig),
                }
            }
            if let Some(pid) = node.param {
                store.accumulate(pid, &g);
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn local_backward<T: Scalar>(node: &Node<T>, g: &Tensor<T>, nodes: &[Node<T>]) -> Vec<Option<Tensor<T>>> {
    let input = |i: usize| &nodes[node.inputs[i].0].value;
    let needed = |i: usize| nodes[node.inputs[i].0].needs_grad;
    let grads = match &node.op {
        Op::Leaf => Vec::new(),
        Op::Conv(spec) => {
            let (x, w) = (input(0), input(1));
            let mut out = vec![
                needed(0).then(|| conv::conv2d_backward_input(g, w, spec, x.dims())),
                needed(1).then(|| conv::conv2d_backward_weight(g, x, spec)),
            ];
            if node.inputs.len() == 3 {
                out.push(Some(conv::channel_sum(g)));
            }
            return out;
        }
        Op::BatchNorm(cache) => {
            let (gx, gg, gb) = norm::batch_norm_backward(g, input(1), cache);
            vec![gx, gg, gb]
        }
        Op::Relu => vec![activation::relu_backward(g, input(0))],
        Op::PRelu => {
            let (gx, ga) = activation::prelu_backward(g, input(0), input(1));
            vec![gx, ga]
        }
        Op::Permute(sources) => {
            let inv = shuffle::invert_permutation(sources);
            vec![shuffle::permute_channels(g, &inv).expect("permutation dims")]
        }
        Op::PixelShuffle(r) => vec![shuffle::pixel_unshuffle(g, *r).expect("shuffle dims")],
        Op::PixelUnshuffle(r) => vec![shuffle::pixel_shuffle(g, *r).expect("shuffle dims")],
        Op::Reshape => vec![g.clone().reshape(input(0).dims()).expect("reshape dims")],
        Op::Upsample(f) => vec![upsample::bilinear_upsample_backward(g, input(0).dims(), *f)],
        Op::Add => vec![g.clone(), g.clone()],
        Op::Loss(saved) => vec![saved.scale(g.item())],
        Op::WeightedSum(w) => vec![w.scale(g.item())],
    };
    grads.into_iter().map(Some).collect()
}
