//! Dense channels-last tensors and the numeric kernels the model is built from.
//!
//! Feature maps are rank-4 `(batch, width, height, channels)` arrays stored
//! contiguously with the channel axis fastest. Every kernel here is pure: it
//! reads its inputs and returns freshly allocated output.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Highest rank a [`Tensor`] may have.
pub const MAX_RANK: usize = 4;

/// Default epsilon for [`layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-6;

// Below this many multiply-accumulates a contraction runs on the calling thread.
const PAR_THRESHOLD: usize = 1 << 15;

/// Real element type. `f32` is the working precision; `f64` exists for
/// gradient checking.
pub trait Scalar:
    Float
    + Default
    + Debug
    + Display
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + Send
    + Sync
    + 'static
{
    fn erf(self) -> Self;

    fn from_f64(v: f64) -> Self;

    fn as_f64(self) -> f64;

    fn from_usize(n: usize) -> Self {
        Self::from_f64(n as f64)
    }
}

impl Scalar for f32 {
    fn erf(self) -> Self {
        libm::erff(self)
    }

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn erf(self) -> Self {
        libm::erf(self)
    }

    fn from_f64(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense row-major array with up to [`MAX_RANK`] axes.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    dims: Vec<usize>,
    data: Vec<T>,
}

/// A rank-4 `(batch, width, height, channels)` tensor.
pub type FeatureMap<T = f32> = Tensor<T>;

fn check_dims(dims: &[usize]) -> Result<usize> {
    if dims.is_empty() || dims.len() > MAX_RANK {
        return Err(Error::shape(format!(
            "rank must be between 1 and {MAX_RANK}, got {}",
            dims.len()
        )));
    }
    if let Some(axis) = dims.iter().position(|&d| d == 0) {
        return Err(Error::shape(format!(
            "extent of axis {axis} is zero in {dims:?}"
        )));
    }
    Ok(dims.iter().product())
}

impl<T: Scalar> Tensor<T> {
    pub fn new(dims: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let dims = dims.into();
        let len = check_dims(&dims)?;
        if len != data.len() {
            return Err(Error::shape(format!(
                "dims {dims:?} hold {len} values but {} were supplied",
                data.len()
            )));
        }
        Ok(Tensor { dims, data })
    }

    pub fn full(dims: impl Into<Vec<usize>>, value: T) -> Result<Self> {
        let dims = dims.into();
        let len = check_dims(&dims)?;
        Ok(Tensor {
            dims,
            data: vec![value; len],
        })
    }

    pub fn zeros(dims: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(dims, T::zero())
    }

    pub fn ones(dims: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(dims, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            dims: vec![1],
            data: vec![value],
        }
    }

    /// Builds a tensor by evaluating `f` at each flat index.
    pub fn from_fn(dims: impl Into<Vec<usize>>, f: impl FnMut(usize) -> T) -> Result<Self> {
        let dims = dims.into();
        let len = check_dims(&dims)?;
        Ok(Tensor {
            dims,
            data: (0..len).map(f).collect(),
        })
    }

    pub fn zeros_like(&self) -> Self {
        Tensor {
            dims: self.dims.clone(),
            data: vec![T::zero(); self.data.len()],
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Extent of the last (channel) axis.
    pub fn channels(&self) -> usize {
        *self.dims.last().expect("tensor rank is at least one")
    }

    /// Extent of the leading (batch) axis.
    pub fn batch(&self) -> usize {
        self.dims[0]
    }

    /// Number of channel vectors, i.e. all positions across every axis but the last.
    pub fn rows(&self) -> usize {
        self.data.len() / self.channels()
    }

    pub fn reshape(mut self, dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        let len = check_dims(&dims)?;
        if len != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} ({} values) into {dims:?} ({len} values)",
                self.dims,
                self.data.len()
            )));
        }
        self.dims = dims;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    /// Value at a multi-index.
    pub fn at(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.dims.len(), "index rank mismatch");
        index
            .iter()
            .zip(&self.dims)
            .fold(0, |acc, (&i, &d)| {
                assert!(i < d, "index {index:?} out of bounds for {:?}", self.dims);
                acc * d + i
            })
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Requires a rank-4 feature map and returns its `(b, w, h, c)` extents.
    pub fn feature_dims(&self) -> Result<(usize, usize, usize, usize)> {
        match self.dims[..] {
            [b, w, h, c] => Ok((b, w, h, c)),
            _ => Err(Error::shape(format!(
                "expected a (batch, width, height, channels) map, got dims {:?}",
                self.dims
            ))),
        }
    }

    pub(crate) fn from_parts(dims: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Tensor { dims, data }
    }
}

/// Weight and bias of one fully-connected layer acting on the channel axis.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineParams<T = f32> {
    /// `(in_channels, out_channels)`
    pub weight: Tensor<T>,
    /// `(out_channels)`
    pub bias: Tensor<T>,
}

impl<T: Scalar> AffineParams<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        check_affine(&weight, &bias)?;
        Ok(AffineParams { weight, bias })
    }

    pub fn zeros(in_channels: usize, out_channels: usize) -> Result<Self> {
        Ok(AffineParams {
            weight: Tensor::zeros([in_channels, out_channels])?,
            bias: Tensor::zeros([out_channels])?,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn out_channels(&self) -> usize {
        self.bias.len()
    }
}

fn check_affine<T: Scalar>(weight: &Tensor<T>, bias: &Tensor<T>) -> Result<(usize, usize)> {
    let (cin, cout) = match weight.dims() {
        [i, o] => (*i, *o),
        d => {
            return Err(Error::shape(format!(
                "affine weight must be (in, out), got dims {d:?}"
            )))
        }
    };
    if bias.rank() != 1 || bias.len() != cout {
        return Err(Error::shape(format!(
            "affine bias dims {:?} do not match weight output extent {cout}",
            bias.dims()
        )));
    }
    Ok((cin, cout))
}

/// `out[.., j] = sum_i x[.., i] * weight[i, j] + bias[j]` over the channel axis.
pub fn affine<T: Scalar>(x: &Tensor<T>, p: &AffineParams<T>) -> Result<Tensor<T>> {
    affine_raw(x, &p.weight, &p.bias)
}

pub(crate) fn affine_raw<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (cin, cout) = check_affine(weight, bias)?;
    if x.channels() != cin {
        return Err(Error::shape(format!(
            "affine input has {} channels but the weight expects {cin}",
            x.channels()
        )));
    }
    let rows = x.rows();
    let mut out = Vec::with_capacity(rows * cout);
    for _ in 0..rows {
        out.extend_from_slice(bias.data());
    }
    let w = weight.data();
    let kernel = |(xr, or): (&[T], &mut [T])| {
        for (i, &xi) in xr.iter().enumerate() {
            let wr = &w[i * cout..(i + 1) * cout];
            for (o, &wv) in or.iter_mut().zip(wr) {
                *o += xi * wv;
            }
        }
    };
    if rows * cin * cout >= PAR_THRESHOLD {
        x.data()
            .par_chunks(cin)
            .zip(out.par_chunks_mut(cout))
            .for_each(kernel);
    } else {
        x.data().chunks(cin).zip(out.chunks_mut(cout)).for_each(kernel);
    }
    let mut dims = x.dims().to_vec();
    *dims.last_mut().unwrap() = cout;
    Ok(Tensor::from_parts(dims, out))
}

/// Gradients of [`affine`] given the upstream gradient `g` (dims of the output).
/// Returns `(grad_x, grad_weight, grad_bias)`.
pub(crate) fn affine_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    g: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let cin = weight.dims()[0];
    let cout = weight.dims()[1];
    let rows = x.rows();
    let w = weight.data();
    let big = rows * cin * cout >= PAR_THRESHOLD;

    let mut gx = vec![T::zero(); rows * cin];
    let gx_kernel = |(gr, gxr): (&[T], &mut [T])| {
        for (i, slot) in gxr.iter_mut().enumerate() {
            let wr = &w[i * cout..(i + 1) * cout];
            *slot = gr.iter().zip(wr).map(|(&a, &b)| a * b).sum();
        }
    };
    if big {
        g.data()
            .par_chunks(cout)
            .zip(gx.par_chunks_mut(cin))
            .for_each(gx_kernel);
    } else {
        g.data().chunks(cout).zip(gx.chunks_mut(cin)).for_each(gx_kernel);
    }

    let mut gw = vec![T::zero(); cin * cout];
    let xd = x.data();
    let gd = g.data();
    let gw_kernel = |(i, gwr): (usize, &mut [T])| {
        for t in 0..rows {
            let xi = xd[t * cin + i];
            let gr = &gd[t * cout..(t + 1) * cout];
            for (o, &gv) in gwr.iter_mut().zip(gr) {
                *o += xi * gv;
            }
        }
    };
    if big {
        gw.par_chunks_mut(cout).enumerate().for_each(gw_kernel);
    } else {
        gw.chunks_mut(cout).enumerate().for_each(gw_kernel);
    }

    let mut gb = vec![T::zero(); cout];
    for gr in gd.chunks(cout) {
        for (o, &gv) in gb.iter_mut().zip(gr) {
            *o += gv;
        }
    }

    let gx = Tensor::from_parts(x.dims().to_vec(), gx);
    (
        gx,
        Tensor::from_parts(vec![cin, cout], gw),
        Tensor::from_parts(vec![cout], gb),
    )
}

/// Per-row statistics kept by [`layer_norm_with_stats`] for the backward pass.
#[derive(Clone, Debug)]
pub(crate) struct NormStats<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
}

/// Normalizes each channel vector to zero mean and unit (biased) variance,
/// then applies `gamma * xhat + beta`.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    layer_norm_with_stats(x, gamma, beta, eps).map(|(y, _)| y)
}

pub(crate) fn layer_norm_with_stats<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, NormStats<T>)> {
    let c = x.channels();
    if gamma.len() != c || beta.len() != c || gamma.rank() != 1 || beta.rank() != 1 {
        return Err(Error::shape(format!(
            "layer norm over {c} channels given gamma {:?} and beta {:?}",
            gamma.dims(),
            beta.dims()
        )));
    }
    if eps.is_nan() || eps <= T::zero() {
        return Err(Error::Contract("layer norm eps must be positive".into()));
    }
    let n = T::from_usize(c);
    let mut xhat = Vec::with_capacity(x.len());
    let mut inv_std = Vec::with_capacity(x.rows());
    for row in x.data().chunks(c) {
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let r = T::one() / (var + eps).sqrt();
        inv_std.push(r);
        xhat.extend(row.iter().map(|&v| (v - mean) * r));
    }
    let y = xhat
        .chunks(c)
        .flat_map(|row| {
            row.iter()
                .zip(gamma.data().iter().zip(beta.data()))
                .map(|(&v, (&g, &b))| v * g + b)
        })
        .collect();
    Ok((
        Tensor::from_parts(x.dims().to_vec(), y),
        NormStats {
            xhat: Tensor::from_parts(x.dims().to_vec(), xhat),
            inv_std,
        },
    ))
}

/// Returns `(grad_x, grad_gamma, grad_beta)`.
pub(crate) fn layer_norm_backward<T: Scalar>(
    stats: &NormStats<T>,
    gamma: &Tensor<T>,
    g: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let c = gamma.len();
    let n = T::from_usize(c);
    let mut gx = Vec::with_capacity(g.len());
    let mut ggamma = vec![T::zero(); c];
    let mut gbeta = vec![T::zero(); c];
    for ((gr, xr), &r) in g
        .data()
        .chunks(c)
        .zip(stats.xhat.data().chunks(c))
        .zip(&stats.inv_std)
    {
        let mut mean_gy = T::zero();
        let mut mean_gyx = T::zero();
        for j in 0..c {
            let gy = gr[j] * gamma.data()[j];
            mean_gy += gy;
            mean_gyx += gy * xr[j];
            ggamma[j] += gr[j] * xr[j];
            gbeta[j] += gr[j];
        }
        mean_gy = mean_gy / n;
        mean_gyx = mean_gyx / n;
        gx.extend((0..c).map(|j| r * (gr[j] * gamma.data()[j] - mean_gy - xr[j] * mean_gyx)));
    }
    (
        Tensor::from_parts(g.dims().to_vec(), gx),
        Tensor::from_parts(vec![c], ggamma),
        Tensor::from_parts(vec![c], gbeta),
    )
}

/// `x * Phi(x)` with the exact error-function form of the normal CDF.
pub fn gelu_scalar<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    x * half * (T::one() + (x * T::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

/// Derivative of [`gelu_scalar`]: `Phi(x) + x * phi(x)`.
pub fn gelu_grad_scalar<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    let cdf = half * (T::one() + (x * T::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * half).exp() * T::from_f64(0.398_942_280_401_432_7);
    cdf + x * pdf
}

pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(gelu_scalar)
}

/// Softmax down each column of a `(K, c)` matrix.
pub fn softmax_over_branches<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (k, c) = match a.dims() {
        [k, c] => (*k, *c),
        d => {
            return Err(Error::shape(format!(
                "branch softmax expects a (K, c) matrix, got dims {d:?}"
            )))
        }
    };
    let out = softmax_groups(a.data(), k, c);
    Ok(Tensor::from_parts(vec![k, c], out))
}

/// Column softmax applied to consecutive `(k, c)` blocks of `data`.
pub(crate) fn softmax_groups<T: Scalar>(data: &[T], k: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); data.len()];
    for (block, oblock) in data.chunks(k * c).zip(out.chunks_mut(k * c)) {
        for j in 0..c {
            let mut max = T::neg_infinity();
            for b in 0..k {
                max = max.max(block[b * c + j]);
            }
            let mut total = T::zero();
            for b in 0..k {
                let e = (block[b * c + j] - max).exp();
                oblock[b * c + j] = e;
                total += e;
            }
            for b in 0..k {
                oblock[b * c + j] = oblock[b * c + j] / total;
            }
        }
    }
    out
}

/// Jacobian-vector product of [`softmax_groups`]: `y * (g - <g, y>)` per column.
pub(crate) fn softmax_groups_backward<T: Scalar>(y: &[T], g: &[T], k: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); y.len()];
    for ((yb, gb), ob) in y
        .chunks(k * c)
        .zip(g.chunks(k * c))
        .zip(out.chunks_mut(k * c))
    {
        for j in 0..c {
            let dot: T = (0..k).map(|b| yb[b * c + j] * gb[b * c + j]).sum();
            for b in 0..k {
                ob[b * c + j] = yb[b * c + j] * (gb[b * c + j] - dot);
            }
        }
    }
    out
}

fn token_layout<T: Scalar>(x: &Tensor<T>) -> Result<(usize, usize, usize)> {
    if x.rank() < 2 {
        return Err(Error::shape(format!(
            "token reduction needs a batch axis and a channel axis, got dims {:?}",
            x.dims()
        )));
    }
    let b = x.batch();
    let c = x.channels();
    Ok((b, x.len() / (b * c), c))
}

/// Sum over every spatial position, per batch element and channel: `(b, .., c) -> (b, c)`.
pub fn sum_over_tokens<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, n, c) = token_layout(x)?;
    let mut out = vec![T::zero(); b * c];
    for (sample, orow) in x.data().chunks(n * c).zip(out.chunks_mut(c)) {
        for tok in sample.chunks(c) {
            for (o, &v) in orow.iter_mut().zip(tok) {
                *o += v;
            }
        }
    }
    Ok(Tensor::from_parts(vec![b, c], out))
}

/// Arithmetic mean over spatial positions: `(b, .., c) -> (b, c)`.
pub fn mean_over_tokens<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, n, _) = token_layout(x)?;
    let inv = T::one() / T::from_usize(n);
    Ok(sum_over_tokens(x)?.map(|v| v * inv))
}

/// Broadcasts a `(b, c)` gradient back over the spatial positions of `dims`.
pub(crate) fn broadcast_tokens<T: Scalar>(g: &Tensor<T>, dims: &[usize], scale: T) -> Tensor<T> {
    let b = dims[0];
    let c = *dims.last().unwrap();
    let n = dims.iter().product::<usize>() / (b * c);
    let mut out = Vec::with_capacity(b * n * c);
    for grow in g.data().chunks(c) {
        for _ in 0..n {
            out.extend(grow.iter().map(|&v| v * scale));
        }
    }
    Tensor::from_parts(dims.to_vec(), out)
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!(
            "cannot add dims {:?} and {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Ok(Tensor::from_parts(a.dims().to_vec(), data))
}

pub fn scale<T: Scalar>(x: &Tensor<T>, factor: T) -> Tensor<T> {
    x.map(|v| v * factor)
}

/// Multiplies every value of batch element `i` by `factors[i]`.
pub fn scale_samples<T: Scalar>(x: &Tensor<T>, factors: &[T]) -> Result<Tensor<T>> {
    if factors.len() != x.batch() {
        return Err(Error::shape(format!(
            "{} per-sample factors for a batch of {}",
            factors.len(),
            x.batch()
        )));
    }
    let per = x.len() / x.batch();
    let data = x
        .data()
        .chunks(per)
        .zip(factors)
        .flat_map(|(s, &f)| s.iter().map(move |&v| v * f))
        .collect();
    Ok(Tensor::from_parts(x.dims().to_vec(), data))
}

/// Channel range `[start, start + len)` of every position.
pub fn slice_channels<T: Scalar>(x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let c = x.channels();
    if len == 0 || start + len > c {
        return Err(Error::shape(format!(
            "channel slice {start}..{} out of range for {c} channels",
            start + len
        )));
    }
    let data = x
        .data()
        .chunks(c)
        .flat_map(|row| row[start..start + len].iter().copied())
        .collect();
    let mut dims = x.dims().to_vec();
    *dims.last_mut().unwrap() = len;
    Ok(Tensor::from_parts(dims, data))
}

/// Adjoint of [`slice_channels`]: places `g` into a zero tensor of `dims`.
pub(crate) fn unslice_channels<T: Scalar>(g: &Tensor<T>, dims: &[usize], start: usize) -> Tensor<T> {
    let c = *dims.last().unwrap();
    let len = g.channels();
    let mut out = vec![T::zero(); dims.iter().product()];
    for (orow, grow) in out.chunks_mut(c).zip(g.data().chunks(len)) {
        orow[start..start + len].copy_from_slice(grow);
    }
    Tensor::from_parts(dims.to_vec(), out)
}

/// Rearranges non-overlapping `p x p` patches into channel vectors:
/// `(b, W, H, C) -> (b, W/p, H/p, p*p*C)` with floor division, so trailing
/// columns and rows that do not fill a whole patch are dropped (a strided
/// convolution with kernel = stride). Inside a patch the flattened order is
/// width offset, then height offset, then channel.
pub fn patchify<T: Scalar>(x: &Tensor<T>, p: usize) -> Result<Tensor<T>> {
    let (b, w, h, c) = x.feature_dims()?;
    if p == 0 || w < p || h < p {
        return Err(Error::shape(format!(
            "spatial extents {w}x{h} are smaller than patch size {p}"
        )));
    }
    let (wo, ho, co) = (w / p, h / p, p * p * c);
    let mut out = vec![T::zero(); b * wo * ho * co];
    let src = x.data();
    for bi in 0..b {
        for wi in 0..wo * p {
            for hi in 0..ho * p {
                let s = ((bi * w + wi) * h + hi) * c;
                let o = (((bi * wo + wi / p) * ho + hi / p) * co) + ((wi % p) * p + hi % p) * c;
                out[o..o + c].copy_from_slice(&src[s..s + c]);
            }
        }
    }
    Ok(Tensor::from_parts(vec![b, wo, ho, co], out))
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Scalar>(x: &Tensor<T>, p: usize, channels: usize) -> Result<Tensor<T>> {
    let (b, wo, ho, co) = x.feature_dims()?;
    if p == 0 || co != p * p * channels {
        return Err(Error::shape(format!(
            "{co} patch channels cannot be split into {p}x{p} patches of {channels} channels"
        )));
    }
    let (w, h, c) = (wo * p, ho * p, channels);
    let mut out = vec![T::zero(); x.len()];
    let src = x.data();
    for bi in 0..b {
        for wi in 0..w {
            for hi in 0..h {
                let o = ((bi * w + wi) * h + hi) * c;
                let s = (((bi * wo + wi / p) * ho + hi / p) * co) + ((wi % p) * p + hi % p) * c;
                out[o..o + c].copy_from_slice(&src[s..s + c]);
            }
        }
    }
    Ok(Tensor::from_parts(vec![b, w, h, c], out))
}

/// Adjoint of [`patchify`]: scatters patch gradients back into a zero map
/// of the original `input_dims`, leaving dropped trailing positions at zero.
pub fn patchify_adjoint<T: Scalar>(g: &Tensor<T>, p: usize, input_dims: &[usize]) -> Result<Tensor<T>> {
    let (b, wo, ho, co) = g.feature_dims()?;
    let &[ib, w, h, c] = input_dims else {
        return Err(Error::shape(format!("patch input dims {input_dims:?} are not rank 4")));
    };
    if p == 0 || ib != b || w / p != wo || h / p != ho || co != p * p * c {
        return Err(Error::shape(format!(
            "patch gradient {:?} does not match input {input_dims:?} with patch size {p}",
            g.dims()
        )));
    }
    let mut out = vec![T::zero(); b * w * h * c];
    let src = g.data();
    for bi in 0..b {
        for wi in 0..wo * p {
            for hi in 0..ho * p {
                let o = ((bi * w + wi) * h + hi) * c;
                let s = (((bi * wo + wi / p) * ho + hi / p) * co) + ((wi % p) * p + hi % p) * c;
                out[o..o + c].copy_from_slice(&src[s..s + c]);
            }
        }
    }
    Ok(Tensor::from_parts(vec![b, w, h, c], out))
}
