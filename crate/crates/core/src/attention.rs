//! Split-attention fusion of `K` same-shaped branch maps.
//!
//! For each batch element the branches are summed over branches and tokens
//! into a `c`-vector `a`, passed through `GELU(a W1 + b1) W2 + b2` to get a
//! `K*c` vector, reshaped to `(K, c)` and softmaxed down each column. The
//! output is the per-channel weighted sum of the branches.

use crate::error::{Error, Result};
use crate::tensor::{self, AffineParams, Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct SplitAttentionParams<T = f32> {
    /// `c -> c / r`
    pub fc1: AffineParams<T>,
    /// `c / r -> K * c`
    pub fc2: AffineParams<T>,
    pub branches: usize,
}

impl<T: Scalar> SplitAttentionParams<T> {
    pub fn new(fc1: AffineParams<T>, fc2: AffineParams<T>, branches: usize) -> Result<Self> {
        let c = fc1.in_channels();
        if branches == 0 {
            return Err(Error::config("split attention needs at least one branch"));
        }
        if fc2.in_channels() != fc1.out_channels() {
            return Err(Error::shape(format!(
                "attention bottleneck mismatch: fc1 emits {} channels, fc2 expects {}",
                fc1.out_channels(),
                fc2.in_channels()
            )));
        }
        if fc2.out_channels() != branches * c {
            return Err(Error::shape(format!(
                "attention fc2 emits {} channels, expected {branches} x {c}",
                fc2.out_channels()
            )));
        }
        Ok(SplitAttentionParams { fc1, fc2, branches })
    }

    /// All-zero parameters for `c` channels, reduction `r` and `k` branches.
    pub fn zeros(channels: usize, reduction: usize, branches: usize) -> Result<Self> {
        let hidden = bottleneck(channels, reduction)?;
        Self::new(
            AffineParams::zeros(channels, hidden)?,
            AffineParams::zeros(hidden, branches * channels)?,
            branches,
        )
    }

    pub fn channels(&self) -> usize {
        self.fc1.in_channels()
    }
}

/// Bottleneck width `c / r` of the attention MLP.
pub fn bottleneck(channels: usize, reduction: usize) -> Result<usize> {
    if reduction == 0 || channels / reduction == 0 {
        return Err(Error::config(format!(
            "reduction {reduction} leaves no bottleneck channels for width {channels}"
        )));
    }
    Ok(channels / reduction)
}

pub(crate) fn check_branches<T: Scalar>(branches: &[&Tensor<T>], k: usize, c: usize) -> Result<()> {
    if branches.len() != k {
        return Err(Error::config(format!(
            "split attention configured for {k} branches but given {}",
            branches.len()
        )));
    }
    let dims = branches[0].dims();
    if let Some(bad) = branches.iter().find(|b| b.dims() != dims) {
        return Err(Error::shape(format!(
            "branch dims differ: {dims:?} vs {:?}",
            bad.dims()
        )));
    }
    if branches[0].channels() != c {
        return Err(Error::shape(format!(
            "branches have {} channels but attention expects {c}",
            branches[0].channels()
        )));
    }
    branches[0].feature_dims()?;
    Ok(())
}

/// Softmaxed branch weights `(b, K * c)`; row `i` holds sample `i`'s
/// `(K, c)` matrix in row-major order.
pub fn attention_weights<T: Scalar>(
    branches: &[&Tensor<T>],
    p: &SplitAttentionParams<T>,
) -> Result<Tensor<T>> {
    let c = p.channels();
    check_branches(branches, p.branches, c)?;
    let mut pooled = tensor::sum_over_tokens(branches[0])?;
    for b in &branches[1..] {
        pooled = tensor::add(&pooled, &tensor::sum_over_tokens(b)?)?;
    }
    let hidden = tensor::gelu(&tensor::affine(&pooled, &p.fc1)?);
    let logits = tensor::affine(&hidden, &p.fc2)?;
    let weights = tensor::softmax_groups(logits.data(), p.branches, c);
    Tensor::new(logits.dims().to_vec(), weights)
}

/// `out[i, :] = sum_k X_k[i, :] * A[k, :]` with per-sample weights `A`.
pub(crate) fn mix_branches<T: Scalar>(branches: &[&Tensor<T>], weights: &Tensor<T>) -> Tensor<T> {
    let k = branches.len();
    let c = branches[0].channels();
    let b = branches[0].batch();
    let per = branches[0].len() / b;
    let mut out = vec![T::zero(); branches[0].len()];
    for (kk, x) in branches.iter().enumerate() {
        for bi in 0..b {
            let wrow = &weights.data()[bi * k * c + kk * c..bi * k * c + (kk + 1) * c];
            let range = bi * per..(bi + 1) * per;
            for (orow, xrow) in out[range.clone()]
                .chunks_mut(c)
                .zip(x.data()[range].chunks(c))
            {
                for j in 0..c {
                    orow[j] += xrow[j] * wrow[j];
                }
            }
        }
    }
    Tensor::new(branches[0].dims().to_vec(), out).expect("mix output has branch dims")
}

/// Fuses `K` branch maps with split attention.
pub fn split_attention<T: Scalar>(
    branches: &[&Tensor<T>],
    p: &SplitAttentionParams<T>,
) -> Result<Tensor<T>> {
    let weights = attention_weights(branches, p)?;
    Ok(mix_branches(branches, &weights))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_weights_average_the_branches() {
        let xs: Vec<Tensor<f64>> = (0..3)
            .map(|k| Tensor::from_fn([1, 2, 2, 4], |i| (i * (k + 2)) as f64).unwrap())
            .collect();
        let refs: Vec<_> = xs.iter().collect();
        let p = SplitAttentionParams::zeros(4, 4, 3).unwrap();
        let y = split_attention(&refs, &p).unwrap();
        for i in 0..y.len() {
            let mean = (xs[0].data()[i] + xs[1].data()[i] + xs[2].data()[i]) / 3.0;
            assert!((y.data()[i] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn injected_logits_weight_branches() {
        let xs: Vec<Tensor<f64>> = [1.0, 2.0, 4.0]
            .iter()
            .map(|&v| Tensor::full([1, 1, 1, 1], v).unwrap())
            .collect();
        let refs: Vec<_> = xs.iter().collect();
        let mut p = SplitAttentionParams::<f64>::new(
            AffineParams::zeros(1, 1).unwrap(),
            AffineParams::zeros(1, 3).unwrap(),
            3,
        )
        .unwrap();
        p.fc2.bias = Tensor::new([3], vec![0.0, 2.0f64.ln(), 4.0f64.ln()]).unwrap();
        let y = split_attention(&refs, &p).unwrap();
        assert!((y.data()[0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn branch_count_and_dims_are_checked() {
        let a = Tensor::<f32>::zeros([1, 2, 2, 4]).unwrap();
        let b = Tensor::<f32>::zeros([1, 2, 1, 4]).unwrap();
        let p = SplitAttentionParams::zeros(4, 4, 3).unwrap();
        assert!(matches!(split_attention(&[&a, &a], &p), Err(Error::Config(_))));
        assert!(matches!(split_attention(&[&a, &a, &b], &p), Err(Error::Shape(_))));
    }
}
