//! Blocks and the pyramid model.
//!
//! Every operation comes in two forms: a pure function over tensors (used for
//! inference) and a tape form (`*_on_tape`, used for training and gradient
//! checks). Both consume random numbers for DropPath in the same order, so
//! the two routes agree for a given seed.

mod config;

pub use config::{build_config, FusionMode, ModelConfig, Preset, StageConfig, ALL_BRANCHES};

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::archive::WeightArchive;
use crate::attention::{self, SplitAttentionParams};
use crate::autograd::{ShiftKind, Tape, Var};
use crate::error::{Error, Result};
use crate::shift;
use crate::tensor::{self, AffineParams, Scalar, Tensor, LAYER_NORM_EPS};

pub const INIT_STD: f64 = 0.02;

/// Whether DropPath is active; training mode carries its random source.
pub enum Mode<'r> {
    Eval,
    Train(&'r mut ChaCha8Rng),
}

impl Mode<'_> {
    pub fn is_training(&self) -> bool {
        matches!(self, Mode::Train(_))
    }

    /// Per-sample residual factors: 0 for a dropped sample, `1 / (1 - rate)`
    /// otherwise. `None` means the branch passes through untouched.
    pub fn drop_path_factors<T: Scalar>(&mut self, batch: usize, rate: f64) -> Option<Vec<T>> {
        match self {
            Mode::Train(rng) if rate > 0.0 => {
                let keep = 1.0 - rate;
                Some(
                    (0..batch)
                        .map(|_| {
                            if rng.random::<f64>() < rate {
                                T::zero()
                            } else {
                                T::from_f64(1.0 / keep)
                            }
                        })
                        .collect(),
                )
            }
            _ => None,
        }
    }
}

// ---------------------------------------------------------------------------
// Parameter naming and initialization

fn block_prefix(stage: usize, block: usize) -> String {
    format!("stage{stage}/block{block}")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    TruncNormal,
    Zeros,
    Ones,
}

/// Every weight of `cfg` as `(name, dims, init)` in model-definition order.
fn weight_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let mut out = Vec::new();
    let affine = |out: &mut Vec<_>, name: String, cin: usize, cout: usize| {
        out.push((format!("{name}/weight"), vec![cin, cout], Init::TruncNormal));
        out.push((format!("{name}/bias"), vec![cout], Init::Zeros));
    };
    let norm = |out: &mut Vec<_>, name: String, c: usize| {
        out.push((format!("{name}/gamma"), vec![c], Init::Ones));
        out.push((format!("{name}/beta"), vec![c], Init::Zeros));
    };
    let k = cfg.branch_count();
    let mut prev = cfg.in_channels;
    for (s, stage) in cfg.stages.iter().enumerate() {
        let c = stage.hidden_size;
        let p = stage.patch_size;
        affine(&mut out, format!("stage{s}/embed"), p * p * prev, c);
        for b in 0..stage.num_blocks {
            let pre = block_prefix(s, b);
            norm(&mut out, format!("{pre}/ln1"), c);
            affine(&mut out, format!("{pre}/mlp1"), c, k * c);
            if cfg.fusion_mode == FusionMode::SplitAttention {
                let hidden = c / cfg.reduction;
                affine(&mut out, format!("{pre}/sa/fc1"), c, hidden);
                affine(&mut out, format!("{pre}/sa/fc2"), hidden, k * c);
            }
            affine(&mut out, format!("{pre}/mlp2"), c, c);
            norm(&mut out, format!("{pre}/ln2"), c);
            affine(&mut out, format!("{pre}/cm/fc1"), c, cfg.expansion_ratio * c);
            affine(&mut out, format!("{pre}/cm/fc2"), cfg.expansion_ratio * c, c);
        }
        prev = c;
    }
    norm(&mut out, "head/norm".into(), prev);
    affine(&mut out, "head/fc".into(), prev, cfg.num_classes);
    out
}

/// Freshly initialized weights: affine weights from a normal with std 0.02
/// truncated at two standard deviations, zero biases, unit norm scales.
pub fn init_weights(cfg: &ModelConfig, seed: u64) -> Result<WeightArchive> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f64, INIT_STD).expect("valid std");
    let mut archive = WeightArchive::new();
    for (name, dims, init) in weight_layout(cfg) {
        let t = match init {
            Init::Zeros => Tensor::zeros(dims)?,
            Init::Ones => Tensor::ones(dims)?,
            Init::TruncNormal => Tensor::from_fn(dims, |_| loop {
                let v = normal.sample(&mut rng);
                if v.abs() <= 2.0 * INIT_STD {
                    break v as f32;
                }
            })?,
        };
        archive.insert(name, t)?;
    }
    Ok(archive)
}

/// All-zero weights except unit layer-norm scales; every block is then the
/// identity map.
pub fn zero_weights(cfg: &ModelConfig) -> Result<WeightArchive> {
    cfg.validate()?;
    let mut archive = WeightArchive::new();
    for (name, dims, init) in weight_layout(cfg) {
        let t = if init == Init::Ones {
            Tensor::ones(dims)?
        } else {
            Tensor::zeros(dims)?
        };
        archive.insert(name, t)?;
    }
    Ok(archive)
}

/// Names of every weight `cfg` needs, in model-definition order.
pub fn weight_names(cfg: &ModelConfig) -> Vec<String> {
    weight_layout(cfg).into_iter().map(|(n, _, _)| n).collect()
}

/// Checks that `archive` holds every weight of `cfg` with the right dims.
pub fn check_weights<T: Scalar>(archive: &WeightArchive<T>, cfg: &ModelConfig) -> Result<()> {
    for (name, dims, _) in weight_layout(cfg) {
        let t = archive.get(&name)?;
        if t.dims() != dims.as_slice() {
            return Err(Error::Archive(format!(
                "weight {name:?} has dims {:?}, the configuration needs {dims:?}",
                t.dims()
            )));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Block parameters

/// Weights of one residual block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<T = f32> {
    pub ln1_gamma: Tensor<T>,
    pub ln1_beta: Tensor<T>,
    /// `c -> K * c`
    pub mlp1: AffineParams<T>,
    /// Absent under sum pooling.
    pub sa: Option<SplitAttentionParams<T>>,
    pub mlp2: AffineParams<T>,
    pub ln2_gamma: Tensor<T>,
    pub ln2_beta: Tensor<T>,
    /// `c -> rho * c`
    pub cm_fc1: AffineParams<T>,
    /// `rho * c -> c`
    pub cm_fc2: AffineParams<T>,
    pub drop_path_rate: f64,
}

impl<T: Scalar> BlockParams<T> {
    /// Reads block `prefix` (e.g. `stage0/block2`) out of an archive.
    pub fn from_archive(archive: &WeightArchive<T>, prefix: &str, cfg: &ModelConfig) -> Result<Self> {
        let get = |n: &str| archive.get(&format!("{prefix}/{n}")).cloned();
        let aff = |n: &str| AffineParams::new(get(&format!("{n}/weight"))?, get(&format!("{n}/bias"))?);
        let sa = match cfg.fusion_mode {
            FusionMode::SplitAttention => Some(SplitAttentionParams::new(
                aff("sa/fc1")?,
                aff("sa/fc2")?,
                cfg.branch_count(),
            )?),
            FusionMode::SumPooling => None,
        };
        Ok(BlockParams {
            ln1_gamma: get("ln1/gamma")?,
            ln1_beta: get("ln1/beta")?,
            mlp1: aff("mlp1")?,
            sa,
            mlp2: aff("mlp2")?,
            ln2_gamma: get("ln2/gamma")?,
            ln2_beta: get("ln2/beta")?,
            cm_fc1: aff("cm/fc1")?,
            cm_fc2: aff("cm/fc2")?,
            drop_path_rate: cfg.drop_path_rate,
        })
    }

    /// Zero affine layers and unit norm scales for width `c`.
    pub fn zeros(c: usize, cfg: &ModelConfig) -> Result<Self> {
        let k = cfg.branch_count();
        let sa = match cfg.fusion_mode {
            FusionMode::SplitAttention => Some(SplitAttentionParams::zeros(c, cfg.reduction, k)?),
            FusionMode::SumPooling => None,
        };
        let rho = cfg.expansion_ratio;
        Ok(BlockParams {
            ln1_gamma: Tensor::ones([c])?,
            ln1_beta: Tensor::zeros([c])?,
            mlp1: AffineParams::zeros(c, k * c)?,
            sa,
            mlp2: AffineParams::zeros(c, c)?,
            ln2_gamma: Tensor::ones([c])?,
            ln2_beta: Tensor::zeros([c])?,
            cm_fc1: AffineParams::zeros(c, rho * c)?,
            cm_fc2: AffineParams::zeros(rho * c, c)?,
            drop_path_rate: cfg.drop_path_rate,
        })
    }
}

// ---------------------------------------------------------------------------
// Pure forward

/// Projects each non-overlapping `patch x patch` region to one token.
pub fn patch_embed<T: Scalar>(x: &Tensor<T>, p: &AffineParams<T>, patch: usize) -> Result<Tensor<T>> {
    let (_, _, _, c) = x.feature_dims()?;
    if p.in_channels() != patch * patch * c {
        return Err(Error::shape(format!(
            "patch embedding expects {} inputs, a {patch}x{patch} patch of {c} channels has {}",
            p.in_channels(),
            patch * patch * c
        )));
    }
    tensor::affine(&tensor::patchify(x, patch)?, p)
}

fn expanded_width_check(expanded: usize, c: usize, k: usize) -> Result<()> {
    if expanded != k * c {
        return Err(Error::config(format!(
            "mlp1 emits {expanded} channels but {k} branches of width {c} need {}",
            k * c
        )));
    }
    Ok(())
}

/// Expand, split, shift, fuse and project back to `c` channels.
pub fn s2mlpv2_component<T: Scalar>(
    x: &Tensor<T>,
    p: &BlockParams<T>,
    cfg: &ModelConfig,
) -> Result<Tensor<T>> {
    let c = x.channels();
    if !c.is_multiple_of(4) {
        return Err(Error::config(format!("width {c} is not divisible by 4")));
    }
    let k = cfg.branch_count();
    let expanded = tensor::affine(x, &p.mlp1)?;
    expanded_width_check(expanded.channels(), c, k)?;
    let mut branches = Vec::with_capacity(k);
    for (slot, &id) in cfg.active_branches.iter().enumerate() {
        let part = tensor::slice_channels(&expanded, slot * c, c)?;
        branches.push(match id {
            1 => shift::spatial_shift1(&part)?,
            2 => shift::spatial_shift2(&part)?,
            _ => part,
        });
    }
    let refs: Vec<&Tensor<T>> = branches.iter().collect();
    let fused = match cfg.fusion_mode {
        FusionMode::SplitAttention => {
            let sa = p
                .sa
                .as_ref()
                .ok_or_else(|| Error::config("split-attention fusion without attention weights"))?;
            attention::split_attention(&refs, sa)?
        }
        FusionMode::SumPooling => {
            let mut acc = branches[0].clone();
            for b in &branches[1..] {
                acc = tensor::add(&acc, b)?;
            }
            tensor::scale(&acc, T::one() / T::from_usize(k))
        }
    };
    tensor::affine(&fused, &p.mlp2)
}

/// Channel-mixing MLP `fc2(GELU(fc1(x)))`.
pub fn cm_mlp<T: Scalar>(x: &Tensor<T>, p: &BlockParams<T>) -> Result<Tensor<T>> {
    let h = tensor::gelu(&tensor::affine(x, &p.cm_fc1)?);
    tensor::affine(&h, &p.cm_fc2)
}

fn residual<T: Scalar>(x: &Tensor<T>, branch: Tensor<T>, factors: Option<Vec<T>>) -> Result<Tensor<T>> {
    let branch = match factors {
        Some(f) => tensor::scale_samples(&branch, &f)?,
        None => branch,
    };
    tensor::add(&branch, x)
}

/// `Y = DropPath(S2(LN1(X))) + X`, `Z = DropPath(CM(LN2(Y))) + Y`.
pub fn block_forward<T: Scalar>(
    x: &Tensor<T>,
    p: &BlockParams<T>,
    cfg: &ModelConfig,
    mode: &mut Mode,
) -> Result<Tensor<T>> {
    let eps = T::from_f64(LAYER_NORM_EPS);
    let b = x.batch();
    let n1 = tensor::layer_norm(x, &p.ln1_gamma, &p.ln1_beta, eps)?;
    let mixed = s2mlpv2_component(&n1, p, cfg)?;
    let y = residual(x, mixed, mode.drop_path_factors(b, p.drop_path_rate))?;
    let n2 = tensor::layer_norm(&y, &p.ln2_gamma, &p.ln2_beta, eps)?;
    let ch = cm_mlp(&n2, p)?;
    residual(&y, ch, mode.drop_path_factors(b, p.drop_path_rate))
}

fn affine_of<T: Scalar>(w: &WeightArchive<T>, name: &str) -> Result<AffineParams<T>> {
    AffineParams::new(
        w.get(&format!("{name}/weight"))?.clone(),
        w.get(&format!("{name}/bias"))?.clone(),
    )
}

fn check_image<T: Scalar>(image: &Tensor<T>, cfg: &ModelConfig) -> Result<()> {
    cfg.validate()?;
    let (_, w, h, c) = image.feature_dims()?;
    if c != cfg.in_channels {
        return Err(Error::shape(format!(
            "image has {c} channels, the model expects {}",
            cfg.in_channels
        )));
    }
    cfg.stage_grids(w, h)?;
    Ok(())
}

/// Output of [`model_forward_traced`]: logits plus the feature map after each stage.
pub struct ForwardTrace<T> {
    pub logits: Tensor<T>,
    pub stage_outputs: Vec<Tensor<T>>,
}

/// Classifies a batch of `(b, W, H, C)` images; returns `(b, num_classes)` logits.
pub fn model_forward<T: Scalar>(
    image: &Tensor<T>,
    weights: &WeightArchive<T>,
    cfg: &ModelConfig,
    mode: &mut Mode,
) -> Result<Tensor<T>> {
    model_forward_traced(image, weights, cfg, mode).map(|t| t.logits)
}

pub fn model_forward_traced<T: Scalar>(
    image: &Tensor<T>,
    weights: &WeightArchive<T>,
    cfg: &ModelConfig,
    mode: &mut Mode,
) -> Result<ForwardTrace<T>> {
    check_image(image, cfg)?;
    let mut x = image.clone();
    let mut stage_outputs = Vec::with_capacity(cfg.stages.len());
    for (s, stage) in cfg.stages.iter().enumerate() {
        x = patch_embed(&x, &affine_of(weights, &format!("stage{s}/embed"))?, stage.patch_size)?;
        for b in 0..stage.num_blocks {
            let p = BlockParams::from_archive(weights, &block_prefix(s, b), cfg)?;
            x = block_forward(&x, &p, cfg, mode)?;
        }
        stage_outputs.push(x.clone());
    }
    let logits = head(&x, weights)?;
    Ok(ForwardTrace {
        logits,
        stage_outputs,
    })
}

/// Final norm, token mean and classifier.
pub fn head<T: Scalar>(x: &Tensor<T>, weights: &WeightArchive<T>) -> Result<Tensor<T>> {
    let n = tensor::layer_norm(
        x,
        weights.get("head/norm/gamma")?,
        weights.get("head/norm/beta")?,
        T::from_f64(LAYER_NORM_EPS),
    )?;
    tensor::affine(&tensor::mean_over_tokens(&n)?, &affine_of(weights, "head/fc")?)
}

// ---------------------------------------------------------------------------
// Tape forward

/// Weight name to tape variable.
#[derive(Clone, Debug, Default)]
pub struct ParamVars {
    vars: HashMap<String, Var>,
}

impl ParamVars {
    /// Places every archive entry on the tape by reference.
    pub fn bind<'a, T: Scalar>(tape: &mut Tape<'a, T>, archive: &'a WeightArchive<T>) -> Self {
        ParamVars {
            vars: archive
                .iter()
                .map(|(name, t)| (name.to_owned(), tape.param(t)))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Archive(format!("missing weight {name:?}")))
    }

    pub fn insert(&mut self, name: impl Into<String>, v: Var) {
        self.vars.insert(name.into(), v);
    }

    fn affine(&self, name: &str) -> Result<(Var, Var)> {
        Ok((
            self.get(&format!("{name}/weight"))?,
            self.get(&format!("{name}/bias"))?,
        ))
    }
}

pub fn patch_embed_on_tape<T: Scalar>(
    tape: &mut Tape<'_, T>,
    x: Var,
    (w, b): (Var, Var),
    patch: usize,
) -> Result<Var> {
    let c = tape.value(x).feature_dims()?.3;
    let cin = tape.value(w).dims()[0];
    if cin != patch * patch * c {
        return Err(Error::shape(format!(
            "patch embedding expects {cin} inputs, a {patch}x{patch} patch of {c} channels has {}",
            patch * patch * c
        )));
    }
    let p = tape.patchify(x, patch)?;
    tape.affine(p, w, b)
}

pub fn s2mlpv2_component_on_tape<T: Scalar>(
    tape: &mut Tape<'_, T>,
    x: Var,
    vars: &ParamVars,
    prefix: &str,
    cfg: &ModelConfig,
) -> Result<Var> {
    let c = tape.value(x).channels();
    if !c.is_multiple_of(4) {
        return Err(Error::config(format!("width {c} is not divisible by 4")));
    }
    let k = cfg.branch_count();
    let (w1, b1) = vars.affine(&format!("{prefix}/mlp1"))?;
    let expanded = tape.affine(x, w1, b1)?;
    expanded_width_check(tape.value(expanded).channels(), c, k)?;
    let mut branches = Vec::with_capacity(k);
    for (slot, &id) in cfg.active_branches.iter().enumerate() {
        let part = tape.slice_channels(expanded, slot * c, c)?;
        branches.push(match id {
            1 => tape.shift(part, ShiftKind::First)?,
            2 => tape.shift(part, ShiftKind::Second)?,
            _ => part,
        });
    }
    let fused = match cfg.fusion_mode {
        FusionMode::SplitAttention => tape.split_attention(
            &branches,
            vars.affine(&format!("{prefix}/sa/fc1"))?,
            vars.affine(&format!("{prefix}/sa/fc2"))?,
        )?,
        FusionMode::SumPooling => {
            let mut acc = branches[0];
            for &b in &branches[1..] {
                acc = tape.add(acc, b)?;
            }
            tape.scale(acc, T::one() / T::from_usize(k))
        }
    };
    let (w2, b2) = vars.affine(&format!("{prefix}/mlp2"))?;
    tape.affine(fused, w2, b2)
}

pub fn cm_mlp_on_tape<T: Scalar>(tape: &mut Tape<'_, T>, x: Var, vars: &ParamVars, prefix: &str) -> Result<Var> {
    let (w1, b1) = vars.affine(&format!("{prefix}/cm/fc1"))?;
    let (w2, b2) = vars.affine(&format!("{prefix}/cm/fc2"))?;
    let h = tape.affine(x, w1, b1)?;
    let h = tape.gelu(h);
    tape.affine(h, w2, b2)
}

fn residual_on_tape<T: Scalar>(
    tape: &mut Tape<'_, T>,
    x: Var,
    branch: Var,
    factors: Option<Vec<T>>,
) -> Result<Var> {
    let branch = match factors {
        Some(f) => tape.scale_samples(branch, f)?,
        None => branch,
    };
    tape.add(branch, x)
}

pub fn block_forward_on_tape<T: Scalar>(
    tape: &mut Tape<'_, T>,
    x: Var,
    vars: &ParamVars,
    prefix: &str,
    cfg: &ModelConfig,
    mode: &mut Mode,
) -> Result<Var> {
    let eps = T::from_f64(LAYER_NORM_EPS);
    let b = tape.value(x).batch();
    let n1 = tape.layer_norm(
        x,
        vars.get(&format!("{prefix}/ln1/gamma"))?,
        vars.get(&format!("{prefix}/ln1/beta"))?,
        eps,
    )?;
    let mixed = s2mlpv2_component_on_tape(tape, n1, vars, prefix, cfg)?;
    let y = residual_on_tape(tape, x, mixed, mode.drop_path_factors(b, cfg.drop_path_rate))?;
    let n2 = tape.layer_norm(
        y,
        vars.get(&format!("{prefix}/ln2/gamma"))?,
        vars.get(&format!("{prefix}/ln2/beta"))?,
        eps,
    )?;
    let ch = cm_mlp_on_tape(tape, n2, vars, prefix)?;
    residual_on_tape(tape, y, ch, mode.drop_path_factors(b, cfg.drop_path_rate))
}

/// Records the full model on `tape`; returns the `(b, num_classes)` logits.
pub fn model_forward_on_tape<T: Scalar>(
    tape: &mut Tape<'_, T>,
    image: Var,
    vars: &ParamVars,
    cfg: &ModelConfig,
    mode: &mut Mode,
) -> Result<Var> {
    check_image(tape.value(image), cfg)?;
    let mut x = image;
    for (s, stage) in cfg.stages.iter().enumerate() {
        x = patch_embed_on_tape(tape, x, vars.affine(&format!("stage{s}/embed"))?, stage.patch_size)?;
        for b in 0..stage.num_blocks {
            x = block_forward_on_tape(tape, x, vars, &block_prefix(s, b), cfg, mode)?;
        }
    }
    let n = tape.layer_norm(
        x,
        vars.get("head/norm/gamma")?,
        vars.get("head/norm/beta")?,
        T::from_f64(LAYER_NORM_EPS),
    )?;
    let pooled = tape.mean_tokens(n)?;
    let (w, b) = vars.affine("head/fc")?;
    tape.affine(pooled, w, b)
}
