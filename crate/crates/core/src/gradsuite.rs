//! Finite-difference checks for every tape operation and for whole models.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::analysis;
use crate::archive::WeightArchive;
use crate::autograd::{gradcheck, ShiftKind, Tape, Var};
use crate::error::{Error, Result};
use crate::model::{self, Mode, ModelConfig, ParamVars};
use crate::tensor::Tensor;

/// Default finite-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;
/// Default pass threshold on the max relative error.
pub const DEFAULT_TOLERANCE: f64 = 1e-5;
/// Models above this many parameters are refused by [`model_checks`].
pub const MAX_CHECKED_PARAMS: u64 = 100_000;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub seed: u64,
    pub max_rel_error: f64,
    pub passed: bool,
}

fn uniform(rng: &mut ChaCha8Rng, dims: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(dims.to_vec(), |_| rng.random_range(lo..hi)).expect("positive dims")
}

/// Random parameters at a scale where activations stay out of the flat
/// regions of GELU and softmax: weights `N(0, 1 / fan_in)`, small biases,
/// norm scales near one. The split-attention input is a sum over `pooled`
/// token/branch values, so its first layer is further scaled by
/// `1 / sqrt(pooled)`.
pub fn random_weights(cfg: &ModelConfig, seed: u64, pooled: usize) -> Result<WeightArchive<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = model::zero_weights(cfg)?.cast::<f64>();
    for (name, t) in w.iter_mut() {
        let dims = t.dims().to_vec();
        *t = if name.ends_with("/weight") {
            let mut std = 1.0 / (dims[0] as f64).sqrt();
            if name.ends_with("sa/fc1/weight") {
                std /= (pooled.max(1) as f64).sqrt();
            }
            let n = Normal::new(0.0, std).expect("valid std");
            Tensor::from_fn(dims, |_| n.sample(&mut rng))?
        } else if name.ends_with("/gamma") {
            uniform(&mut rng, &dims, 0.8, 1.2)
        } else {
            uniform(&mut rng, &dims, -0.1, 0.1)
        };
    }
    Ok(w)
}

struct Runner {
    seed: u64,
    tol: f64,
    h: f64,
    out: Vec<CheckOutcome>,
}

impl Runner {
    fn check<'a, F>(&mut self, name: impl Into<String>, x0: &Tensor<f64>, f: F) -> Result<()>
    where
        F: Fn(&mut Tape<'a, f64>, Var) -> Result<Var>,
    {
        let err = gradcheck(f, x0, self.h)?;
        self.out.push(CheckOutcome {
            name: name.into(),
            seed: self.seed,
            max_rel_error: err,
            passed: err <= self.tol,
        });
        Ok(())
    }
}

/// Checks each primitive operation on small random inputs.
pub fn op_checks(seed: u64, tol: f64, h: f64) -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = Runner {
        seed,
        tol,
        h,
        out: Vec::new(),
    };
    let map = [2, 3, 4, 8];
    let x = uniform(&mut rng, &map, -1.0, 1.0);
    let probe = uniform(&mut rng, &map, -1.0, 1.0);

    // affine
    let w = uniform(&mut rng, &[8, 5], -0.5, 0.5);
    let b = uniform(&mut rng, &[5], -0.5, 0.5);
    let pr5 = uniform(&mut rng, &[2, 3, 4, 5], -1.0, 1.0);
    r.check("affine/input", &x, |t, v| {
        let (wv, bv) = (t.leaf(w.clone()), t.leaf(b.clone()));
        let y = t.affine(v, wv, bv)?;
        t.dot(y, pr5.clone())
    })?;
    r.check("affine/weight", &w, |t, v| {
        let (xv, bv) = (t.leaf(x.clone()), t.leaf(b.clone()));
        let y = t.affine(xv, v, bv)?;
        t.dot(y, pr5.clone())
    })?;
    r.check("affine/bias", &b, |t, v| {
        let (xv, wv) = (t.leaf(x.clone()), t.leaf(w.clone()));
        let y = t.affine(xv, wv, v)?;
        t.dot(y, pr5.clone())
    })?;

    // layer norm
    let gamma = uniform(&mut rng, &[8], 0.5, 1.5);
    let beta = uniform(&mut rng, &[8], -0.5, 0.5);
    let ln = |t: &mut Tape<'_, f64>, xv: Var, g: Var, bt: Var| -> Result<Var> {
        let y = t.layer_norm(xv, g, bt, 1e-6)?;
        t.dot(y, probe.clone())
    };
    r.check("layer_norm/input", &x, |t, v| {
        let (g, bt) = (t.leaf(gamma.clone()), t.leaf(beta.clone()));
        ln(t, v, g, bt)
    })?;
    r.check("layer_norm/gamma", &gamma, |t, v| {
        let (xv, bt) = (t.leaf(x.clone()), t.leaf(beta.clone()));
        ln(t, xv, v, bt)
    })?;
    r.check("layer_norm/beta", &beta, |t, v| {
        let (xv, g) = (t.leaf(x.clone()), t.leaf(gamma.clone()));
        ln(t, xv, g, v)
    })?;

    r.check("gelu", &x.map(|v| 3.0 * v), |t, v| {
        let y = t.gelu(v);
        t.dot(y, probe.clone())
    })?;

    r.check("square", &x, |t, v| {
        let y = t.square(v);
        t.dot(y, probe.clone())
    })?;

    for (name, kind) in [("spatial_shift1", ShiftKind::First), ("spatial_shift2", ShiftKind::Second)] {
        r.check(name, &x, |t, v| {
            let y = t.shift(v, kind)?;
            let y = t.gelu(y);
            t.dot(y, probe.clone())
        })?;
    }

    let logits = uniform(&mut rng, &[2, 12], -2.0, 2.0);
    let pr12 = uniform(&mut rng, &[2, 12], -1.0, 1.0);
    r.check("softmax_branches", &logits, |t, v| {
        let y = t.softmax_branches(v, 3)?;
        t.dot(y, pr12.clone())
    })?;

    let pr_bc = uniform(&mut rng, &[2, 8], -1.0, 1.0);
    r.check("sum_tokens", &x.map(|v| v / 12.0), |t, v| {
        let y = t.sum_tokens(v)?;
        let y = t.gelu(y);
        t.dot(y, pr_bc.clone())
    })?;
    r.check("mean_over_tokens", &x, |t, v| {
        let y = t.mean_tokens(v)?;
        t.dot(y, pr_bc.clone())
    })?;

    let pr_slice = uniform(&mut rng, &[2, 3, 4, 3], -1.0, 1.0);
    r.check("slice_channels", &x, |t, v| {
        let a = t.slice_channels(v, 2, 3)?;
        let b = t.slice_channels(v, 3, 3)?;
        let s = t.add(a, b)?;
        t.dot(s, pr_slice.clone())
    })?;

    r.check("add_scale", &x, |t, v| {
        let s = t.scale(v, -1.7);
        let g = t.gelu(v);
        let y = t.add(s, g)?;
        let y = t.scale_samples(y, vec![0.5, 2.0])?;
        t.dot(y, probe.clone())
    })?;

    let img = uniform(&mut rng, &[2, 4, 6, 3], -1.0, 1.0);
    let pr_patch = uniform(&mut rng, &[2, 2, 3, 12], -1.0, 1.0);
    r.check("patchify", &img, |t, v| {
        let y = t.patchify(v, 2)?;
        let y = t.gelu(y);
        t.dot(y, pr_patch.clone())
    })?;

    // split attention pieces
    let branches: Vec<Tensor<f64>> = (0..3).map(|_| uniform(&mut rng, &map, -1.0, 1.0)).collect();
    let mix_w = uniform(&mut rng, &[2, 24], 0.0, 1.0);
    r.check("mix_branches/weights", &mix_w, |t, v| {
        let bs: Vec<Var> = branches.iter().map(|b| t.leaf(b.clone())).collect();
        let y = t.mix_branches(&bs, v)?;
        t.dot(y, probe.clone())
    })?;
    r.check("mix_branches/branch", &branches[1], |t, v| {
        let b0 = t.leaf(branches[0].clone());
        let b2 = t.leaf(branches[2].clone());
        let wv = t.leaf(mix_w.clone());
        let y = t.mix_branches(&[b0, v, b2], wv)?;
        t.dot(y, probe.clone())
    })?;

    let fc1w = uniform(&mut rng, &[8, 2], -0.3, 0.3);
    let fc1b = uniform(&mut rng, &[2], -0.3, 0.3);
    let fc2w = uniform(&mut rng, &[2, 24], -1.0, 1.0);
    let fc2b = uniform(&mut rng, &[24], -0.5, 0.5);
    let sa = |t: &mut Tape<'_, f64>, bs: [Var; 3], f1w: Var, f2w: Var| -> Result<Var> {
        let f1b = t.leaf(fc1b.clone());
        let f2b = t.leaf(fc2b.clone());
        let y = t.split_attention(&bs, (f1w, f1b), (f2w, f2b))?;
        t.dot(y, probe.clone())
    };
    r.check("split_attention/branch", &branches[0], |t, v| {
        let b1 = t.leaf(branches[1].clone());
        let b2 = t.leaf(branches[2].clone());
        let (w1, w2) = (t.leaf(fc1w.clone()), t.leaf(fc2w.clone()));
        sa(t, [v, b1, b2], w1, w2)
    })?;
    r.check("split_attention/fc1", &fc1w, |t, v| {
        let bs = [0, 1, 2].map(|i| t.leaf(branches[i].clone()));
        let w2 = t.leaf(fc2w.clone());
        sa(t, bs, v, w2)
    })?;
    r.check("split_attention/fc2", &fc2w, |t, v| {
        let bs = [0, 1, 2].map(|i| t.leaf(branches[i].clone()));
        let w1 = t.leaf(fc1w.clone());
        sa(t, bs, w1, v)
    })?;

    let ce_logits = uniform(&mut rng, &[3, 5], -2.0, 2.0);
    r.check("smoothed_cross_entropy", &ce_logits, |t, v| {
        t.smoothed_cross_entropy(v, &[0, 4, 2], 0.1)
    })?;

    Ok(r.out)
}

/// Checks one residual block (input and every block weight) on a
/// `1 x 4 x 4 x 8` map.
pub fn block_checks(seed: u64, tol: f64, h: f64) -> Result<Vec<CheckOutcome>> {
    let mut cfg = model::Preset::Tiny.config();
    cfg.drop_path_rate = 0.0;
    let weights = random_weights(&cfg, seed, 16 * cfg.branch_count())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb10c);
    let x = uniform(&mut rng, &[1, 4, 4, 8], -1.0, 1.0);
    let probe = uniform(&mut rng, &[1, 4, 4, 8], -1.0, 1.0);
    let mut r = Runner {
        seed,
        tol,
        h,
        out: Vec::new(),
    };
    let prefix = "stage0/block0";
    let loss = |t: &mut Tape<'_, f64>, vars: &ParamVars, xv: Var| -> Result<Var> {
        let y = model::block_forward_on_tape(t, xv, vars, prefix, &cfg, &mut Mode::Eval)?;
        t.dot(y, probe.clone())
    };
    r.check("block/input", &x, |t, v| {
        let vars = ParamVars::bind(t, &weights);
        loss(t, &vars, v)
    })?;
    let names: Vec<String> = weights
        .names()
        .filter(|n| n.starts_with(prefix))
        .map(str::to_owned)
        .collect();
    for name in names {
        r.check(format!("block/{}", &name[prefix.len() + 1..]), weights.get(&name)?, |t, v| {
            let mut vars = ParamVars::bind(t, &weights);
            vars.insert(name.clone(), v);
            let xv = t.leaf(x.clone());
            loss(t, &vars, xv)
        })?;
    }
    Ok(r.out)
}

/// Checks a whole model with respect to its input and every weight tensor,
/// on a batch of two images at the preset's smallest valid resolution.
pub fn model_checks(cfg: &ModelConfig, seed: u64, tol: f64, h: f64) -> Result<Vec<CheckOutcome>> {
    let params = analysis::count_params(cfg)?.total_params;
    if params > MAX_CHECKED_PARAMS {
        return Err(Error::config(format!(
            "{params} parameters is too many for a finite-difference check (limit {MAX_CHECKED_PARAMS})"
        )));
    }
    let mut cfg = cfg.clone();
    cfg.drop_path_rate = 0.0;
    let side = cfg.total_stride() * 2;
    let tokens: usize = cfg.stage_grids(side, side)?.iter().map(|&(w, h)| w * h).sum();
    let weights = random_weights(&cfg, seed, tokens * cfg.branch_count())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0de1);
    let image = uniform(&mut rng, &[2, side, side, cfg.in_channels], -1.0, 1.0);
    let probe = uniform(&mut rng, &[2, cfg.num_classes], -1.0, 1.0);
    let mut r = Runner {
        seed,
        tol,
        h,
        out: Vec::new(),
    };
    let cfg = &cfg;
    let loss = |t: &mut Tape<'_, f64>, vars: &ParamVars, xv: Var| -> Result<Var> {
        let y = model::model_forward_on_tape(t, xv, vars, cfg, &mut Mode::Eval)?;
        t.dot(y, probe.clone())
    };
    r.check("model/input", &image, |t, v| {
        let vars = ParamVars::bind(t, &weights);
        loss(t, &vars, v)
    })?;
    let names: Vec<String> = weights.names().map(str::to_owned).collect();
    for name in names {
        r.check(format!("model/{name}"), weights.get(&name)?, |t, v| {
            let mut vars = ParamVars::bind(t, &weights);
            vars.insert(name.clone(), v);
            let xv = t.leaf(image.clone());
            loss(t, &vars, xv)
        })?;
    }
    Ok(r.out)
}

/// Every op, block and model check for each seed.
pub fn run_gradient_suite(cfg: &ModelConfig, seeds: &[u64], tol: f64, h: f64) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    for &seed in seeds {
        out.extend(op_checks(seed, tol, h)?);
        out.extend(block_checks(seed, tol, h)?);
        out.extend(model_checks(cfg, seed, tol, h)?);
    }
    Ok(out)
}
