//! Reverse-mode differentiation over the fixed operation set used by the
//! model, plus a central-difference gradient checker.
//!
//! A [`Tape`] records every operation in evaluation order, so node inputs
//! always refer to earlier nodes and a single reverse sweep computes all
//! gradients. Parameters can be placed on the tape by reference to avoid
//! copying large weight tensors.

use std::borrow::Cow;

use crate::attention;
use crate::error::{Error, Result};
use crate::shift::ShiftSpec;
use crate::tensor::{self, NormStats, Scalar, Tensor};
use crate::training;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShiftKind {
    First,
    Second,
}

impl ShiftKind {
    fn spec(self) -> ShiftSpec {
        match self {
            ShiftKind::First => ShiftSpec::FIRST,
            ShiftKind::Second => ShiftSpec::SECOND,
        }
    }
}

enum Op<T> {
    Leaf,
    /// Value computed outside the tape; has no backward rule.
    Opaque { inputs: Vec<Var> },
    Affine { x: Var, w: Var, b: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, stats: NormStats<T> },
    Gelu { x: Var },
    Square { x: Var },
    Shift { x: Var, kind: ShiftKind },
    SliceChannels { x: Var, start: usize },
    Add { a: Var, b: Var },
    Scale { x: Var, factor: T },
    ScaleSamples { x: Var, factors: Vec<T> },
    SumTokens { x: Var },
    MeanTokens { x: Var },
    SoftmaxBranches { x: Var, k: usize },
    MixBranches { branches: Vec<Var>, weights: Var },
    Patchify { x: Var, patch: usize },
    SmoothedCrossEntropy { logits: Var, targets: Vec<usize>, eps: T, probs: Vec<T> },
    Dot { x: Var, weights: Tensor<T> },
}

impl<T> Op<T> {
    fn tag(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Opaque { .. } => "opaque",
            Op::Affine { .. } => "affine",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu { .. } => "gelu",
            Op::Square { .. } => "square",
            Op::Shift { .. } => "spatial_shift",
            Op::SliceChannels { .. } => "slice_channels",
            Op::Add { .. } => "add",
            Op::Scale { .. } => "scale",
            Op::ScaleSamples { .. } => "scale_samples",
            Op::SumTokens { .. } => "sum_tokens",
            Op::MeanTokens { .. } => "mean_tokens",
            Op::SoftmaxBranches { .. } => "softmax_branches",
            Op::MixBranches { .. } => "mix_branches",
            Op::Patchify { .. } => "patchify",
            Op::SmoothedCrossEntropy { .. } => "smoothed_cross_entropy",
            Op::Dot { .. } => "dot",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::Opaque { inputs } => inputs.clone(),
            Op::Affine { x, w, b } => vec![*x, *w, *b],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Gelu { x }
            | Op::Square { x }
            | Op::Shift { x, .. }
            | Op::SliceChannels { x, .. }
            | Op::Scale { x, .. }
            | Op::ScaleSamples { x, .. }
            | Op::SumTokens { x }
            | Op::MeanTokens { x }
            | Op::SoftmaxBranches { x, .. }
            | Op::Patchify { x, .. }
            | Op::Dot { x, .. } => vec![*x],
            Op::Add { a, b } => vec![*a, *b],
            Op::MixBranches { branches, weights } => {
                let mut v = branches.clone();
                v.push(*weights);
                v
            }
            Op::SmoothedCrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

struct Node<'a, T: Scalar> {
    op: Op<T>,
    value: Cow<'a, Tensor<T>>,
}

/// Record of a forward computation.
pub struct Tape<'a, T: Scalar = f32> {
    nodes: Vec<Node<'a, T>>,
}

impl<T: Scalar> Default for Tape<'_, T> {
    fn default() -> Self {
        Tape { nodes: Vec::new() }
    }
}

impl<'a, T: Scalar> Tape<'a, T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn op_tag(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.tag()
    }

    pub fn inputs_of(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    fn push(&mut self, op: Op<T>, value: Cow<'a, Tensor<T>>) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    fn push_owned(&mut self, op: Op<T>, value: Tensor<T>) -> Var {
        self.push(op, Cow::Owned(value))
    }

    /// Adds an owned input tensor.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(Op::Leaf, Cow::Owned(value))
    }

    /// Adds a borrowed input tensor (typically a weight).
    pub fn param(&mut self, value: &'a Tensor<T>) -> Var {
        self.push(Op::Leaf, Cow::Borrowed(value))
    }

    /// Records a value derived from `inputs` by code the tape cannot
    /// differentiate. Backpropagating into it is an error.
    pub fn opaque(&mut self, inputs: &[Var], value: Tensor<T>) -> Var {
        self.push_owned(
            Op::Opaque {
                inputs: inputs.to_vec(),
            },
            value,
        )
    }

    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = tensor::affine_raw(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push_owned(Op::Affine { x, w, b }, y))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (y, stats) =
            tensor::layer_norm_with_stats(self.value(x), self.value(gamma), self.value(beta), eps)?;
        Ok(self.push_owned(Op::LayerNorm { x, gamma, beta, stats }, y))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let y = tensor::gelu(self.value(x));
        self.push_owned(Op::Gelu { x }, y)
    }

    /// Elementwise `x * x`.
    pub fn square(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v * v);
        self.push_owned(Op::Square { x }, y)
    }

    pub fn shift(&mut self, x: Var, kind: ShiftKind) -> Result<Var> {
        let y = kind.spec().apply(self.value(x))?;
        Ok(self.push_owned(Op::Shift { x, kind }, y))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let y = tensor::slice_channels(self.value(x), start, len)?;
        Ok(self.push_owned(Op::SliceChannels { x, start }, y))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = tensor::add(self.value(a), self.value(b))?;
        Ok(self.push_owned(Op::Add { a, b }, y))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let y = tensor::scale(self.value(x), factor);
        self.push_owned(Op::Scale { x, factor }, y)
    }

    /// Multiplies each batch element by a constant factor.
    pub fn scale_samples(&mut self, x: Var, factors: Vec<T>) -> Result<Var> {
        let y = tensor::scale_samples(self.value(x), &factors)?;
        Ok(self.push_owned(Op::ScaleSamples { x, factors }, y))
    }

    pub fn sum_tokens(&mut self, x: Var) -> Result<Var> {
        let y = tensor::sum_over_tokens(self.value(x))?;
        Ok(self.push_owned(Op::SumTokens { x }, y))
    }

    pub fn mean_tokens(&mut self, x: Var) -> Result<Var> {
        let y = tensor::mean_over_tokens(self.value(x))?;
        Ok(self.push_owned(Op::MeanTokens { x }, y))
    }

    /// Column softmax of each row of a `(b, k * c)` tensor viewed as `(k, c)`.
    pub fn softmax_branches(&mut self, x: Var, k: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 || k == 0 || !xv.channels().is_multiple_of(k) {
            return Err(Error::shape(format!(
                "branch softmax over {k} branches cannot view dims {:?}",
                xv.dims()
            )));
        }
        let c = xv.channels() / k;
        let y = Tensor::new(xv.dims().to_vec(), tensor::softmax_groups(xv.data(), k, c))?;
        Ok(self.push_owned(Op::SoftmaxBranches { x, k }, y))
    }

    /// Per-channel weighted sum of branch maps; `weights` is `(b, K * c)`.
    pub fn mix_branches(&mut self, branches: &[Var], weights: Var) -> Result<Var> {
        let k = branches.len();
        let values: Vec<&Tensor<T>> = branches.iter().map(|&v| self.value(v)).collect();
        if k == 0 {
            return Err(Error::config("cannot mix zero branches"));
        }
        let c = values[0].channels();
        attention::check_branches(&values, k, c)?;
        let w = self.value(weights);
        if w.dims() != [values[0].batch(), k * c] {
            return Err(Error::shape(format!(
                "branch weights {:?} do not match {k} branches of dims {:?}",
                w.dims(),
                values[0].dims()
            )));
        }
        let y = attention::mix_branches(&values, w);
        Ok(self.push_owned(
            Op::MixBranches {
                branches: branches.to_vec(),
                weights,
            },
            y,
        ))
    }

    pub fn patchify(&mut self, x: Var, patch: usize) -> Result<Var> {
        let y = tensor::patchify(self.value(x), patch)?;
        Ok(self.push_owned(Op::Patchify { x, patch }, y))
    }

    /// Batch-mean label-smoothed cross-entropy of `(b, classes)` logits.
    pub fn smoothed_cross_entropy(&mut self, logits: Var, targets: &[usize], eps: T) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rank() != 2 || lv.batch() != targets.len() {
            return Err(Error::shape(format!(
                "cross-entropy of logits {:?} against {} targets",
                lv.dims(),
                targets.len()
            )));
        }
        let classes = lv.channels();
        let mut total = T::zero();
        let mut probs = Vec::with_capacity(lv.len());
        for (row, &t) in lv.data().chunks(classes).zip(targets) {
            let (loss, p) = training::smoothed_ce_row(row, t, eps)?;
            total += loss;
            probs.extend(p);
        }
        let mean = total / T::from_usize(targets.len());
        Ok(self.push_owned(
            Op::SmoothedCrossEntropy {
                logits,
                targets: targets.to_vec(),
                eps,
                probs,
            },
            Tensor::scalar(mean),
        ))
    }

    /// Scalar `sum(x * weights)`.
    pub fn dot(&mut self, x: Var, weights: Tensor<T>) -> Result<Var> {
        let xv = self.value(x);
        if xv.dims() != weights.dims() {
            return Err(Error::shape(format!(
                "dot of dims {:?} with {:?}",
                xv.dims(),
                weights.dims()
            )));
        }
        let s = xv.data().iter().zip(weights.data()).map(|(&a, &b)| a * b).sum();
        Ok(self.push_owned(Op::Dot { x, weights }, Tensor::scalar(s)))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let ones = self.value(x).map(|_| T::one());
        self.dot(x, ones)
    }

    /// Split-attention fusion built from primitive tape operations.
    pub fn split_attention(
        &mut self,
        branches: &[Var],
        fc1: (Var, Var),
        fc2: (Var, Var),
    ) -> Result<Var> {
        let mut pooled = self.sum_tokens(branches[0])?;
        for &b in &branches[1..] {
            let s = self.sum_tokens(b)?;
            pooled = self.add(pooled, s)?;
        }
        let hidden = self.affine(pooled, fc1.0, fc1.1)?;
        let hidden = self.gelu(hidden);
        let logits = self.affine(hidden, fc2.0, fc2.1)?;
        let weights = self.softmax_branches(logits, branches.len())?;
        self.mix_branches(branches, weights)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, node {} has dims {:?}",
                loss.0,
                self.value(loss).dims()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(self.value(loss).map(|_| T::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let contributions = self.node_backward(i, &g)?;
            grads[i] = Some(g);
            for (input, dg) in contributions {
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, &d) in acc.data_mut().iter_mut().zip(dg.data()) {
                            *a += d;
                        }
                    }
                    slot @ None => *slot = Some(dg),
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn node_backward(&self, i: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[i];
        let out = match &node.op {
            Op::Leaf => Vec::new(),
            Op::Opaque { .. } => {
                return Err(Error::Unsupported(format!(
                    "node {i} was recorded without a backward rule"
                )))
            }
            Op::Affine { x, w, b } => {
                let (gx, gw, gb) = tensor::affine_backward(self.value(*x), self.value(*w), g);
                vec![(*x, gx), (*w, gw), (*b, gb)]
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            } => {
                let (gx, gg, gb) = tensor::layer_norm_backward(stats, self.value(*gamma), g);
                vec![(*x, gx), (*gamma, gg), (*beta, gb)]
            }
            Op::Gelu { x } => {
                let xv = self.value(*x);
                let d = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gv)| gv * tensor::gelu_grad_scalar(v))
                    .collect();
                vec![(*x, Tensor::new(xv.dims().to_vec(), d)?)]
            }
            Op::Square { x } => {
                let xv = self.value(*x);
                let two = T::from_f64(2.0);
                let d = xv.data().iter().zip(g.data()).map(|(&v, &gv)| two * v * gv).collect();
                vec![(*x, Tensor::new(xv.dims().to_vec(), d)?)]
            }
            Op::Shift { x, kind } => vec![(*x, kind.spec().adjoint(g)?)],
            Op::SliceChannels { x, start } => {
                vec![(*x, tensor::unslice_channels(g, self.value(*x).dims(), *start))]
            }
            Op::Add { a, b } => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Scale { x, factor } => vec![(*x, tensor::scale(g, *factor))],
            Op::ScaleSamples { x, factors } => vec![(*x, tensor::scale_samples(g, factors)?)],
            Op::SumTokens { x } => {
                vec![(*x, tensor::broadcast_tokens(g, self.value(*x).dims(), T::one()))]
            }
            Op::MeanTokens { x } => {
                let dims = self.value(*x).dims();
                let n = dims.iter().product::<usize>() / (dims[0] * dims[dims.len() - 1]);
                let s = T::one() / T::from_usize(n);
                vec![(*x, tensor::broadcast_tokens(g, dims, s))]
            }
            Op::SoftmaxBranches { x, k } => {
                let y = &node.value;
                let c = y.channels() / k;
                let d = tensor::softmax_groups_backward(y.data(), g.data(), *k, c);
                vec![(*x, Tensor::new(y.dims().to_vec(), d)?)]
            }
            Op::MixBranches { branches, weights } => {
                let w = self.value(*weights);
                let k = branches.len();
                let first = self.value(branches[0]);
                let (b, c) = (first.batch(), first.channels());
                let per = first.len() / b;
                let mut out = Vec::with_capacity(k + 1);
                let mut gw = vec![T::zero(); b * k * c];
                for (kk, &br) in branches.iter().enumerate() {
                    let xv = self.value(br);
                    let mut gx = vec![T::zero(); xv.len()];
                    for bi in 0..b {
                        let wrow = &w.data()[bi * k * c + kk * c..bi * k * c + (kk + 1) * c];
                        let gwrow = &mut gw[bi * k * c + kk * c..bi * k * c + (kk + 1) * c];
                        let range = bi * per..(bi + 1) * per;
                        for ((grow, xrow), gxrow) in g.data()[range.clone()]
                            .chunks(c)
                            .zip(xv.data()[range.clone()].chunks(c))
                            .zip(gx[range].chunks_mut(c))
                        {
                            for j in 0..c {
                                gxrow[j] = grow[j] * wrow[j];
                                gwrow[j] += grow[j] * xrow[j];
                            }
                        }
                    }
                    out.push((br, Tensor::new(xv.dims().to_vec(), gx)?));
                }
                out.push((*weights, Tensor::new(w.dims().to_vec(), gw)?));
                out
            }
            Op::Patchify { x, patch } => {
                vec![(*x, tensor::patchify_adjoint(g, *patch, self.value(*x).dims())?)]
            }
            Op::SmoothedCrossEntropy {
                logits,
                targets,
                eps,
                probs,
            } => {
                let lv = self.value(*logits);
                let classes = lv.channels();
                let scale = g.data()[0] / T::from_usize(targets.len());
                let mut d = probs.clone();
                for (row, &t) in d.chunks_mut(classes).zip(targets) {
                    let off = *eps / T::from_usize(classes);
                    for (j, v) in row.iter_mut().enumerate() {
                        let q = if j == t { T::one() - *eps + off } else { off };
                        *v = (*v - q) * scale;
                    }
                }
                vec![(*logits, Tensor::new(lv.dims().to_vec(), d)?)]
            }
            Op::Dot { x, weights } => vec![(*x, tensor::scale(weights, g.data()[0]))],
        };
        Ok(out)
    }
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `v`, or `None` when `v` does not
    /// influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Compares the tape gradient of a scalar function against central
/// differences with step `h`. Returns the largest coordinate-wise relative
/// error `|a - n| / max(|a|, |n|, 1e-8)`.
///
/// `f` receives a fresh tape and the variable holding the (perturbed) input
/// and must return a scalar node.
pub fn gradcheck<'a, F>(f: F, x0: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<'a, f64>, Var) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&h) {
        return Err(Error::Contract(format!(
            "finite-difference step {h} outside [1e-6, 1e-3]"
        )));
    }
    let eval = |x: Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.leaf(x);
        let y = f(&mut tape, v)?;
        let out = tape.value(y);
        if out.len() != 1 {
            return Err(Error::Contract(format!(
                "gradcheck function must be scalar, got dims {:?}",
                out.dims()
            )));
        }
        let val = out.data()[0];
        if !val.is_finite() {
            return Err(Error::Numeric(format!("function value {val} is not finite")));
        }
        Ok(val)
    };

    let mut tape = Tape::new();
    let xv = tape.leaf(x0.clone());
    let y = f(&mut tape, xv)?;
    let grads = tape.backward(y)?;
    let analytic = match grads.get(xv) {
        Some(g) => g.clone(),
        None => x0.zeros_like(),
    };

    let mut worst = 0.0f64;
    for i in 0..x0.len() {
        let mut plus = x0.clone();
        plus.data_mut()[i] += h;
        let mut minus = x0.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let a = analytic.data()[i];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}
