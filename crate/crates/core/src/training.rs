//! Desk-scale training: label-smoothed cross-entropy, AdamW, a warmup plus
//! cosine schedule, a procedurally generated toy dataset and the loop that
//! ties them together.

use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::archive::WeightArchive;
use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::model::{self, Mode, ModelConfig, ParamVars};
use crate::tensor::{Scalar, Tensor};

// ---------------------------------------------------------------------------
// Loss

/// Loss and softmax probabilities of one row of logits.
pub(crate) fn smoothed_ce_row<T: Scalar>(logits: &[T], target: usize, eps: T) -> Result<(T, Vec<T>)> {
    let classes = logits.len();
    if target >= classes {
        return Err(Error::Contract(format!(
            "target class {target} out of range for {classes} classes"
        )));
    }
    if !(eps >= T::zero() && eps < T::one()) {
        return Err(Error::Contract(format!("smoothing {eps} outside [0, 1)")));
    }
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<T>().ln();
    let off = eps / T::from_usize(classes);
    let mut loss = T::zero();
    let mut probs = Vec::with_capacity(classes);
    for (j, &l) in logits.iter().enumerate() {
        let logp = l - lse;
        let q = if j == target { T::one() - eps + off } else { off };
        loss -= q * logp;
        probs.push(logp.exp());
    }
    Ok((loss, probs))
}

/// Cross-entropy against `1 - eps + eps / C` on the target and `eps / C`
/// elsewhere.
pub fn label_smoothed_ce<T: Scalar>(logits: &[T], target: usize, eps: T) -> Result<T> {
    smoothed_ce_row(logits, target, eps).map(|(l, _)| l)
}

// ---------------------------------------------------------------------------
// Optimizer

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// Moment estimates for every parameter plus the step counter.
#[derive(Clone, Debug)]
pub struct OptimizerState<T: Scalar = f32> {
    pub config: AdamWConfig,
    pub step: u64,
    m: WeightArchive<T>,
    v: WeightArchive<T>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &WeightArchive<T>, config: AdamWConfig) -> Result<Self> {
        let mut m = WeightArchive::new();
        let mut v = WeightArchive::new();
        for (name, t) in params.iter() {
            m.insert(name, t.zeros_like())?;
            v.insert(name, t.zeros_like())?;
        }
        Ok(OptimizerState { config, step: 0, m, v })
    }

    pub fn first_moment(&self, name: &str) -> Result<&Tensor<T>> {
        self.m.get(name)
    }

    pub fn second_moment(&self, name: &str) -> Result<&Tensor<T>> {
        self.v.get(name)
    }
}

/// One AdamW update: decoupled decay `w *= 1 - lr * wd`, then the
/// bias-corrected Adam step. Refuses (leaving everything untouched) if any
/// gradient is non-finite.
pub fn adamw_step<T: Scalar>(
    params: &mut WeightArchive<T>,
    grads: &WeightArchive<T>,
    state: &mut OptimizerState<T>,
    lr: f64,
) -> Result<()> {
    for (name, p) in params.iter() {
        let g = grads.get(name)?;
        if g.dims() != p.dims() {
            return Err(Error::shape(format!(
                "gradient of {name:?} has dims {:?}, parameter has {:?}",
                g.dims(),
                p.dims()
            )));
        }
        if !g.all_finite() {
            return Err(Error::Numeric(format!("non-finite gradient for {name:?}")));
        }
        state.m.get(name)?;
    }
    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    let decay = T::from_f64(1.0 - lr * c.weight_decay);
    let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
    let (one_b1, one_b2) = (T::from_f64(1.0 - c.beta1), T::from_f64(1.0 - c.beta2));
    let (bc1, bc2) = (T::from_f64(bc1), T::from_f64(bc2));
    let (lr_t, eps) = (T::from_f64(lr), T::from_f64(c.eps));
    for (name, p) in params.iter_mut() {
        let g = grads.get(name)?;
        let m = state.m.get_mut(name)?;
        for (mi, &gi) in m.data_mut().iter_mut().zip(g.data()) {
            *mi = b1 * *mi + one_b1 * gi;
        }
        let v = state.v.get_mut(name)?;
        for (vi, &gi) in v.data_mut().iter_mut().zip(g.data()) {
            *vi = b2 * *vi + one_b2 * gi * gi;
        }
        let m = state.m.get(name)?;
        let v = state.v.get(name)?;
        for ((w, &mi), &vi) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
            let mhat = mi / bc1;
            let vhat = vi / bc2;
            *w = *w * decay - lr_t * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Schedule

/// Linear warmup from 0 to `base_lr` over `warmup_steps`, then cosine decay
/// to `final_lr` at `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, warmup_steps: usize, base_lr: f64, final_lr: f64) -> f64 {
    debug_assert!(warmup_steps < total_steps, "warmup must end before the schedule does");
    let step = step.min(total_steps);
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    let span = total_steps.saturating_sub(warmup_steps).max(1);
    let progress = (step - warmup_steps) as f64 / span as f64;
    final_lr + (base_lr - final_lr) * (1.0 + (PI * progress).cos()) / 2.0
}

// ---------------------------------------------------------------------------
// Toy data

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ToySpec {
    pub size: usize,
    pub classes: usize,
    pub seed: u64,
    /// Image side length.
    pub side: usize,
    pub channels: usize,
    /// Control variant: every image is the same constant, so labels carry no signal.
    pub constant: bool,
}

impl Default for ToySpec {
    fn default() -> Self {
        ToySpec {
            size: 64,
            classes: 4,
            seed: 0,
            side: 8,
            channels: 3,
            constant: false,
        }
    }
}

/// Images whose label is the grid cell holding a bright square.
///
/// The image is divided into a `g x g` grid (`g = ceil(sqrt(classes))`);
/// class `k` places a square of half the cell size somewhere inside cell `k`
/// on a low-amplitude noise background. Position is the only signal, so a
/// model without cross-token communication cannot separate classes that
/// differ only in which token holds the square.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyDataset {
    pub images: Vec<Tensor<f32>>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub seed: u64,
}

pub fn make_toy_dataset(spec: &ToySpec) -> Result<ToyDataset> {
    if spec.classes < 2 {
        return Err(Error::config("a toy dataset needs at least two classes"));
    }
    if spec.size == 0 || spec.channels == 0 {
        return Err(Error::config("toy dataset size and channels must be positive"));
    }
    let grid = (1..).find(|g| g * g >= spec.classes).unwrap();
    if !spec.side.is_multiple_of(grid) {
        return Err(Error::config(format!(
            "image side {} is not divisible by the {grid}x{grid} class grid",
            spec.side
        )));
    }
    let cell = spec.side / grid;
    let square = (cell / 2).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut labels: Vec<usize> = (0..spec.size).map(|i| i % spec.classes).collect();
    labels.shuffle(&mut rng);
    let dims = [1, spec.side, spec.side, spec.channels];
    let mut images = Vec::with_capacity(spec.size);
    for &label in &labels {
        if spec.constant {
            images.push(Tensor::full(dims, 0.5)?);
            continue;
        }
        let mut img = Tensor::from_fn(dims, |_| rng.random_range(-0.1f32..0.1))?;
        let (cw, ch) = (label % grid, label / grid);
        let ow = cw * cell + rng.random_range(0..=cell - square);
        let oh = ch * cell + rng.random_range(0..=cell - square);
        for w in ow..ow + square {
            for h in oh..oh + square {
                for c in 0..spec.channels {
                    let at = img.offset(&[0, w, h, c]);
                    img.data_mut()[at] = 1.0;
                }
            }
        }
        images.push(img);
    }
    Ok(ToyDataset {
        images,
        labels,
        num_classes: spec.classes,
        seed: spec.seed,
    })
}

impl ToyDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Stacks the selected samples into one `(b, W, H, C)` batch.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
        let first = self.images[indices[0]].dims();
        let mut data = Vec::with_capacity(indices.len() * self.images[indices[0]].len());
        for &i in indices {
            data.extend_from_slice(self.images[i].data());
        }
        let dims = [indices.len(), first[1], first[2], first[3]];
        Ok((Tensor::new(dims, data)?, indices.iter().map(|&i| self.labels[i]).collect()))
    }
}

// ---------------------------------------------------------------------------
// Loop

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub final_lr: f64,
    /// `None` means ten epochs.
    pub warmup_steps: Option<usize>,
    pub weight_decay: f64,
    pub label_smoothing: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 16,
            base_lr: 2e-3,
            final_lr: 1e-5,
            warmup_steps: None,
            weight_decay: 0.05,
            label_smoothing: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HistoryEntry {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

pub struct TrainOutcome {
    pub weights: WeightArchive,
    pub history: Vec<HistoryEntry>,
}

/// `step<TAB>lr<TAB>loss` lines.
pub fn format_history(history: &[HistoryEntry]) -> String {
    let mut out = String::new();
    for h in history {
        writeln!(out, "{}\t{:e}\t{:.7}", h.step, h.lr, h.loss).unwrap();
    }
    out
}

/// Trains freshly initialized weights on `data` with AdamW, warmup plus
/// cosine decay, label smoothing and DropPath. Batches are drawn from a
/// seeded shuffle; the run is deterministic for a given seed.
pub fn train_loop(cfg: &ModelConfig, data: &ToyDataset, hyper: &TrainConfig) -> Result<TrainOutcome> {
    if data.is_empty() || hyper.batch_size == 0 || hyper.steps == 0 {
        return Err(Error::config("training needs data, a positive batch size and steps"));
    }
    if let Some(&bad) = data.labels.iter().find(|&&l| l >= cfg.num_classes) {
        return Err(Error::config(format!(
            "label {bad} does not fit a model with {} classes",
            cfg.num_classes
        )));
    }
    let batch_size = hyper.batch_size.min(data.len());
    let steps_per_epoch = data.len().div_ceil(batch_size);
    let warmup = hyper
        .warmup_steps
        .unwrap_or(10 * steps_per_epoch)
        .min(hyper.steps - 1);

    let mut weights = model::init_weights(cfg, hyper.seed)?;
    let mut state = OptimizerState::new(
        &weights,
        AdamWConfig {
            weight_decay: hyper.weight_decay,
            ..AdamWConfig::default()
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed.wrapping_add(0x5eed));
    let mut order: Vec<usize> = Vec::new();
    let mut history = Vec::with_capacity(hyper.steps);

    for step in 0..hyper.steps {
        if order.len() < batch_size {
            order = (0..data.len()).collect();
            order.shuffle(&mut rng);
        }
        let mut idx: Vec<usize> = order.drain(..batch_size).collect();
        idx.sort_unstable();
        let (images, targets) = data.batch(&idx)?;
        let lr = cosine_lr(step, hyper.steps, warmup, hyper.base_lr, hyper.final_lr);

        let (loss, grads) = {
            let mut tape = Tape::new();
            let vars = ParamVars::bind(&mut tape, &weights);
            let x = tape.leaf(images);
            let logits = model::model_forward_on_tape(&mut tape, x, &vars, cfg, &mut Mode::Train(&mut rng))?;
            let loss = tape.smoothed_cross_entropy(logits, &targets, hyper.label_smoothing as f32)?;
            let loss_value = tape.value(loss).data()[0] as f64;
            if !loss_value.is_finite() {
                return Err(Error::Diverged { step, loss: loss_value });
            }
            let mut g = tape.backward(loss)?;
            let mut grads = WeightArchive::new();
            for (name, t) in weights.iter() {
                let v = vars.get(name)?;
                grads.insert(name, g.take(v).unwrap_or_else(|| t.zeros_like()))?;
            }
            (loss_value, grads)
        };
        adamw_step(&mut weights, &grads, &mut state, lr)
            .map_err(|_| Error::Diverged { step, loss })?;
        history.push(HistoryEntry { step, lr, loss });
    }
    Ok(TrainOutcome { weights, history })
}

/// Predicted class per sample (eval mode).
pub fn predict(weights: &WeightArchive, cfg: &ModelConfig, data: &ToyDataset) -> Result<Vec<usize>> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut preds = Vec::with_capacity(data.len());
    for chunk in idx.chunks(64) {
        let (x, _) = data.batch(chunk)?;
        let logits = model::model_forward(&x, weights, cfg, &mut Mode::Eval)?;
        for row in logits.data().chunks(cfg.num_classes) {
            let best = row
                .iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
            preds.push(best.0);
        }
    }
    Ok(preds)
}

pub fn accuracy(weights: &WeightArchive, cfg: &ModelConfig, data: &ToyDataset) -> Result<f64> {
    let preds = predict(weights, cfg, data)?;
    let hits = preds.iter().zip(&data.labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smoothed_ce_examples() {
        let l = label_smoothed_ce(&[0.0f64, 0.0], 1, 0.1).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-15);
        let l = label_smoothed_ce(&[50.0f64, 0.0, 0.0], 0, 0.0).unwrap();
        assert!(l < 1e-20);
        for eps in [0.0, 0.1, 0.7] {
            let l = label_smoothed_ce(&[3.0f64; 10], 4, eps).unwrap();
            assert!((l - 10f64.ln()).abs() < 1e-14);
        }
        assert!(matches!(label_smoothed_ce(&[0.0f64; 3], 3, 0.1), Err(Error::Contract(_))));
        assert!(matches!(label_smoothed_ce(&[0.0f64; 3], 0, 1.0), Err(Error::Contract(_))));
    }

    fn single(w: f64) -> WeightArchive<f64> {
        let mut a = WeightArchive::new();
        a.insert("w", Tensor::scalar(w)).unwrap();
        a
    }

    #[test]
    fn adamw_examples() {
        let mut p = single(1.0);
        let mut s = OptimizerState::new(&p, AdamWConfig { weight_decay: 0.0, ..Default::default() }).unwrap();
        adamw_step(&mut p, &single(0.0), &mut s, 0.1).unwrap();
        assert_eq!(p.get("w").unwrap().data()[0], 1.0);

        let mut p = single(1.0);
        let mut s = OptimizerState::new(&p, AdamWConfig { weight_decay: 0.0, ..Default::default() }).unwrap();
        adamw_step(&mut p, &single(1.0), &mut s, 0.1).unwrap();
        let expect = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((p.get("w").unwrap().data()[0] - expect).abs() < 1e-15);

        let mut p = single(1.0);
        let mut s = OptimizerState::new(&p, AdamWConfig { weight_decay: 0.05, ..Default::default() }).unwrap();
        adamw_step(&mut p, &single(0.0), &mut s, 0.1).unwrap();
        assert!((p.get("w").unwrap().data()[0] - 0.995).abs() < 1e-15);
    }

    #[test]
    fn adamw_refuses_non_finite_gradients() {
        let mut p = single(1.0);
        let mut s = OptimizerState::new(&p, AdamWConfig::default()).unwrap();
        let err = adamw_step(&mut p, &single(f64::NAN), &mut s, 0.1).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
        assert_eq!(s.step, 0);
        assert_eq!(p.get("w").unwrap().data()[0], 1.0);
    }

    #[test]
    fn cosine_schedule_examples() {
        let lr = |s| cosine_lr(s, 110, 10, 2e-3, 1e-5);
        assert_eq!(lr(0), 0.0);
        assert!((lr(5) - 1e-3).abs() < 1e-15);
        assert!((lr(10) - 2e-3).abs() < 1e-15);
        assert!((lr(110) - 1e-5).abs() < 1e-15);
        assert!((lr(60) - 1.005e-3).abs() < 1e-15);
    }

    #[test]
    fn toy_dataset_is_deterministic_and_stratified() {
        let spec = ToySpec { seed: 3, ..Default::default() };
        let a = make_toy_dataset(&spec).unwrap();
        assert_eq!(a, make_toy_dataset(&spec).unwrap());
        for k in 0..4 {
            let n = a.labels.iter().filter(|&&l| l == k).count();
            assert!((n as i64 - 16).abs() <= 1);
        }
        assert!(make_toy_dataset(&ToySpec { side: 9, ..spec }).is_err());
        assert!(make_toy_dataset(&ToySpec { classes: 1, ..spec }).is_err());
    }

    #[test]
    fn toy_bright_square_lies_in_label_cell() {
        let d = make_toy_dataset(&ToySpec::default()).unwrap();
        for (img, &label) in d.images.iter().zip(&d.labels) {
            let (cw, ch) = (label % 2, label / 2);
            for w in 0..8 {
                for h in 0..8 {
                    let bright = img.at(&[0, w, h, 0]) == 1.0;
                    if bright {
                        assert_eq!((w / 4, h / 4), (cw, ch));
                    }
                }
            }
        }
    }

    #[test]
    fn constant_variant_has_no_signal() {
        let d = make_toy_dataset(&ToySpec { constant: true, ..Default::default() }).unwrap();
        assert!(d.images.windows(2).all(|w| w[0] == w[1]));
        let distinct: std::collections::BTreeSet<_> = d.labels.iter().collect();
        assert!(distinct.len() > 1);
    }
}
