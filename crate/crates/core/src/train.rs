//! Training: the joint attribute+object cross-entropy loss, Adam updates
//! over a configurable trainable partition, and a deterministic loop whose
//! batch composition and prompt placements are pure functions of
//! `(seed, step)` — resuming from a checkpoint reproduces the next step
//! bitwise.

use indexmap::IndexMap;
use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::dataset::Dataset;
use crate::error::{MmptError, Result};
use crate::graph::{Graph, Var};
use crate::model::{ForwardMode, MmptModel};
use crate::params::ParamStore;
use crate::render::mix64;
use crate::scalar::Scalar;
use crate::space::{Composition, CompositionSpace};
use crate::tensor::Tensor;

/// Probability floor applied before every log.
pub const LOSS_CLAMP: f64 = 1e-30;

// ── Loss ─────────────────────────────────────────────────────────────────────

pub struct LossVars {
    pub loss: Var,
    /// How many target probabilities hit the clamp floor.
    pub clamped: usize,
}

/// Mean over the batch of `-log rho_a(a) - log rho_o(o)`.
pub fn batch_loss<S: Scalar>(
    g: &mut Graph<S>,
    rho_a: Var,
    rho_o: Var,
    attr_targets: &[usize],
    obj_targets: &[usize],
) -> Result<LossVars> {
    let n = attr_targets.len();
    if n == 0 || obj_targets.len() != n || g.rows(rho_a) != n || g.rows(rho_o) != n {
        return Err(MmptError::invalid(format!(
            "loss needs matching non-empty targets and rows: {} attr, {} obj, {} / {} rows",
            n,
            obj_targets.len(),
            g.rows(rho_a),
            g.rows(rho_o)
        )));
    }
    let (nll_a, clamped_a) = g.nll_sum(rho_a, attr_targets, LOSS_CLAMP);
    let (nll_o, clamped_o) = g.nll_sum(rho_o, obj_targets, LOSS_CLAMP);
    let total = g.add(nll_a, nll_o);
    let loss = g.scale(total, 1.0 / n as f64);
    Ok(LossVars { loss, clamped: clamped_a + clamped_o })
}

/// Plain-number form for score-table rows.
pub fn row_loss(rho_a_row: &[f64], rho_o_row: &[f64], label: Composition) -> f64 {
    let pa = rho_a_row[label.attr].max(LOSS_CLAMP);
    let po = rho_o_row[label.obj].max(LOSS_CLAMP);
    -pa.ln() - po.ln()
}

// ── Trainable partitions ─────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionPreset {
    /// Everything trains — the right default when no pretrained backbone
    /// exists and the encoders must be learned from scratch.
    ToyFull,
    /// Encoders, class tables, and patch machinery frozen; only prompts,
    /// projectors, the pixel prompt, context tokens, and the scoring maps
    /// train.
    PromptTune,
}

impl PartitionPreset {
    pub fn name(self) -> &'static str {
        match self {
            PartitionPreset::ToyFull => "toy_full",
            PartitionPreset::PromptTune => "prompt_tune",
        }
    }

    pub fn apply<S: Scalar>(self, store: &mut ParamStore<S>) {
        match self {
            PartitionPreset::ToyFull => store.set_partition(|_| true),
            PartitionPreset::PromptTune => store.set_partition(|name| {
                name.starts_with("shared.t.")
                    || name.starts_with("proj.")
                    || name == "phi"
                    || name.ends_with(".ctx")
                    || name.starts_with("score.")
            }),
        }
    }
}

// ── Optimizer state ──────────────────────────────────────────────────────────

pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamHyper {
    /// The reference optimizer settings at full scale.
    pub fn full_scale() -> Self {
        AdamHyper { lr: 5e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    /// Same moments, faster learning rate for from-scratch toy runs.
    pub fn toy(lr: f64) -> Self {
        AdamHyper { lr, ..Self::full_scale() }
    }
}

#[derive(Debug, Clone)]
pub struct TrainState<S: Scalar> {
    pub step: usize,
    /// First and second Adam moments, keyed by tensor name.
    pub moments: IndexMap<String, (Tensor<S>, Tensor<S>)>,
    pub clamped_total: u64,
    pub last_loss: Option<f64>,
}

impl<S: Scalar> TrainState<S> {
    pub fn new() -> Self {
        TrainState { step: 0, moments: IndexMap::new(), clamped_total: 0, last_loss: None }
    }
}

impl<S: Scalar> Default for TrainState<S> {
    fn default() -> Self {
        Self::new()
    }
}

// ── Steps ────────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, serde::Serialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub clamped: usize,
}

/// Prompt-placement rng for a given step; pure in `(seed, step)`.
pub fn placement_rng(seed: u64, step: usize) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(mix64(seed ^ mix64(0x9d5c_7a21 ^ step as u64)))
}

/// The sample indices of one step's batch: a per-epoch shuffle sliced into
/// consecutive chunks, so every sample appears once per epoch. Pure in
/// `(seed, step, n, batch)`.
pub fn batch_indices(seed: u64, step: usize, n: usize, batch: usize) -> Vec<usize> {
    assert!(n > 0 && batch > 0, "batching needs samples and a positive batch size");
    let steps_per_epoch = n.div_ceil(batch);
    let epoch = step / steps_per_epoch;
    let slot = step % steps_per_epoch;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(mix64(seed ^ mix64(0x17ab_40f3 ^ epoch as u64)));
    order.shuffle(&mut rng);
    let lo = slot * batch;
    let hi = (lo + batch).min(n);
    order[lo..hi].to_vec()
}

/// One forward/backward/update. Labels must be seen compositions. A
/// non-finite loss or gradient aborts with the model and state untouched.
pub fn train_step<S: Scalar>(
    model: &mut MmptModel<S>,
    state: &mut TrainState<S>,
    images: &[Tensor<S>],
    labels: &[Composition],
    space: &CompositionSpace,
    hyper: &AdamHyper,
    rng: &mut ChaCha12Rng,
) -> Result<StepMetrics> {
    if images.is_empty() || images.len() != labels.len() {
        return Err(MmptError::invalid(format!(
            "train step needs matching non-empty images and labels, got {} and {}",
            images.len(),
            labels.len()
        )));
    }
    for &label in labels {
        if !space.is_seen(label) {
            return Err(MmptError::protocol(format!(
                "training labels must be seen compositions, got {}",
                space.describe(label)
            )));
        }
    }
    let attr_targets: Vec<usize> = labels.iter().map(|c| c.attr).collect();
    let obj_targets: Vec<usize> = labels.iter().map(|c| c.obj).collect();

    let mut fwd = model.forward_batch(images, ForwardMode::Train { rng })?;
    let LossVars { loss, clamped } =
        batch_loss(&mut fwd.graph, fwd.rho_a, fwd.rho_o, &attr_targets, &obj_targets)?;
    let loss_value = fwd.graph.value(loss).item().as_f64();
    if !loss_value.is_finite() {
        return Err(MmptError::non_finite(format!(
            "loss is {loss_value} at step {}; step aborted, state unchanged",
            state.step
        )));
    }
    fwd.graph.backward(loss)?;
    let grads = fwd.graph.param_grads();

    let mut sq_norm = 0.0;
    for (name, grad) in &grads {
        let f = grad.frobenius_sq();
        if !f.is_finite() {
            return Err(MmptError::non_finite(format!(
                "gradient of {name} is non-finite at step {}; step aborted, state unchanged",
                state.step
            )));
        }
        sq_norm += f;
    }

    // All checks passed — commit the Adam update.
    let t = state.step + 1;
    let bc1 = 1.0 - hyper.beta1.powi(t as i32);
    let bc2 = 1.0 - hyper.beta2.powi(t as i32);
    for (name, grad) in &grads {
        let (m, v) = state
            .moments
            .entry(name.clone())
            .or_insert_with(|| (Tensor::zeros(grad.rows(), grad.cols()), Tensor::zeros(grad.rows(), grad.cols())));
        let theta = model.params_mut().get_mut(name);
        let b1 = S::of_f64(hyper.beta1);
        let b2 = S::of_f64(hyper.beta2);
        let one_m_b1 = S::of_f64(1.0 - hyper.beta1);
        let one_m_b2 = S::of_f64(1.0 - hyper.beta2);
        let lr = S::of_f64(hyper.lr);
        let eps = S::of_f64(hyper.eps);
        let ibc1 = S::of_f64(1.0 / bc1);
        let ibc2 = S::of_f64(1.0 / bc2);
        for i in 0..grad.len() {
            let gi = grad.data()[i];
            let mi = b1 * m.data()[i] + one_m_b1 * gi;
            let vi = b2 * v.data()[i] + one_m_b2 * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let m_hat = mi * ibc1;
            let v_hat = vi * ibc2;
            theta.data_mut()[i] = theta.data()[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    state.step = t;
    state.clamped_total += clamped as u64;
    state.last_loss = Some(loss_value);
    Ok(StepMetrics { step: t, loss: loss_value, grad_norm: sq_norm.sqrt(), clamped })
}

// ── Loop ─────────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, serde::Serialize)]
pub struct EvalRecord {
    pub step: usize,
    #[serde(rename = "S")]
    pub s: f64,
    #[serde(rename = "U")]
    pub u: f64,
    #[serde(rename = "HM")]
    pub hm: f64,
    #[serde(rename = "AUC")]
    pub auc: f64,
}

pub struct TrainHistory {
    pub steps: Vec<StepMetrics>,
    pub evals: Vec<EvalRecord>,
}

/// Runs `steps` total optimization steps (continuing from `state.step` when
/// resuming) with an eval hook every `eval_every` steps and always after the
/// final step.
pub fn train_loop<S: Scalar, F>(
    model: &mut MmptModel<S>,
    state: &mut TrainState<S>,
    train: &Dataset,
    space: &CompositionSpace,
    steps: usize,
    batch_size: usize,
    eval_every: usize,
    hyper: &AdamHyper,
    mut eval_hook: F,
) -> Result<TrainHistory>
where
    F: FnMut(&MmptModel<S>, usize) -> Result<Option<EvalRecord>>,
{
    if eval_every == 0 {
        return Err(MmptError::config("eval_every must be at least 1"));
    }
    if train.samples.is_empty() {
        return Err(MmptError::invalid("training dataset is empty"));
    }
    let seed = model.cfg().seed;
    let images: Vec<Tensor<S>> = train
        .samples
        .iter()
        .map(|s| model.image_from_pixels(&s.pixels))
        .collect::<Result<_>>()?;
    let labels: Vec<Composition> = train.samples.iter().map(|s| s.label).collect();

    let mut history = TrainHistory { steps: Vec::new(), evals: Vec::new() };
    while state.step < steps {
        let step = state.step;
        let idx = batch_indices(seed, step, images.len(), batch_size);
        let batch_images: Vec<Tensor<S>> = idx.iter().map(|&i| images[i].clone()).collect();
        let batch_labels: Vec<Composition> = idx.iter().map(|&i| labels[i]).collect();
        let mut rng = placement_rng(seed, step);
        let metrics =
            train_step(model, state, &batch_images, &batch_labels, space, hyper, &mut rng)?;
        history.steps.push(metrics);
        let done = state.step;
        if done % eval_every == 0 || done == steps {
            if let Some(record) = eval_hook(model, done)? {
                history.evals.push(record);
            }
        }
    }
    Ok(history)
}
