//! Dataset splits, learning-rate schedule, optimisation loop, evaluation,
//! the sparsity sweep and gradient checks.

mod gradcheck;
mod sweep;

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dataio::{Segment, SegmentMeta};
use crate::graph::Graph;
use crate::model::{ForwardVars, ModelConfig, ModelError, WdTcn};
use crate::objectives::{example_loss, si_sdr_with, LossBreakdown, LossWeights, MetricOutcome, MetricRegistry, ObjectiveError, SiSdrOptions};
use crate::params::ParamStore;
use crate::selection::{ConvRs, RegularizerConfig, SelectionError, SelectionVector, SelectorConfig};
use crate::tensor::Tensor;

pub use gradcheck::{grad_check, GradCheckReport, GradCheckTarget};
pub use sweep::{gamma_sweep, run_gamma, SweepRow, SweepSetup};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("non-finite {what} at step {step}; batch {metas:?}; components {components:?}")]
    NonFinite { step: usize, what: &'static str, metas: Vec<SegmentMeta>, components: LossBreakdown },
    #[error("subject {subject} has {available} usable trials, split needs more than {needed}")]
    InsufficientTrials { subject: String, available: usize, needed: usize },
    #[error("empty training set")]
    EmptyDataset,
    #[error("invalid training config: {0}")]
    InvalidConfig(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct TrainConfig {
    pub max_lr: f64,
    pub warmup_ratio: f64,
    pub epochs: usize,
    /// Stops after this many optimiser steps when set; the schedule spans
    /// the shorter of this and `epochs`.
    pub max_steps: Option<usize>,
    pub batch_size: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub weights: LossWeights,
    pub reg: RegularizerConfig,
    pub si_sdr: SiSdrOptions,
    /// Global gradient-norm limit; off by default.
    pub grad_clip: Option<f64>,
    /// Validate every this many epochs (and after the last one).
    pub val_every: usize,
    /// Fraction of the steps trained with β = γ = 0 before the ramp.
    pub reg_delay_ratio: f64,
    /// Fraction of the steps over which β and γ then ramp linearly from
    /// zero; 0 applies them in full at once.
    pub reg_warmup_ratio: f64,
    /// Learning-rate multiplier for the selector's parameters.
    pub selector_lr_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_lr: 1e-4,
            warmup_ratio: 0.05,
            epochs: 200,
            max_steps: None,
            batch_size: 8,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            weights: LossWeights::default(),
            reg: RegularizerConfig::default(),
            si_sdr: SiSdrOptions::default(),
            grad_clip: None,
            val_every: 1,
            reg_delay_ratio: 0.0,
            reg_warmup_ratio: 0.0,
            selector_lr_scale: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.warmup_ratio > 0.0 && self.warmup_ratio < 1.0) {
            return Err(TrainError::InvalidConfig("warmup_ratio must lie in (0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be at least 1"));
        }
        if !(self.max_lr >= 0.0 && self.max_lr.is_finite()) {
            return Err(TrainError::InvalidConfig("max_lr must be finite and non-negative"));
        }
        if !self.weights.is_valid() {
            return Err(TrainError::InvalidConfig("loss weights must be finite and non-negative"));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(TrainError::InvalidConfig("grad_clip must be positive"));
        }
        let (d, w) = (self.reg_delay_ratio, self.reg_warmup_ratio);
        if !(d >= 0.0 && w >= 0.0 && d + w < 1.0) {
            return Err(TrainError::InvalidConfig("reg_delay_ratio and reg_warmup_ratio must be non-negative with a sum below 1"));
        }
        if !(self.selector_lr_scale >= 0.0 && self.selector_lr_scale.is_finite()) {
            return Err(TrainError::InvalidConfig("selector_lr_scale must be finite and non-negative"));
        }
        if self.val_every == 0 {
            return Err(TrainError::InvalidConfig("val_every must be at least 1"));
        }
        Ok(())
    }
}

/// Linear warm-up to `max_lr` over the first `warmup_ratio · total_steps`
/// steps, then cosine decay to zero at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> f64 {
    if total_steps == 0 {
        return 0.0;
    }
    let step = step.min(total_steps) as f64;
    let total = total_steps as f64;
    let warmup = cfg.warmup_ratio * total;
    if step < warmup {
        return cfg.max_lr * step / warmup;
    }
    let p = (step - warmup) / (total - warmup);
    cfg.max_lr * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * p))
}

/// Multiplier applied to the selection regularisers at `step`: zero up to
/// `delay · total_steps`, then a linear ramp to one over
/// `ratio · total_steps`.
pub fn reg_ramp(step: usize, total_steps: usize, delay: f64, ratio: f64) -> f64 {
    let start = delay * total_steps as f64;
    let step = step as f64;
    if step <= start && delay > 0.0 {
        return 0.0;
    }
    if ratio <= 0.0 {
        return 1.0;
    }
    ((step - start) / (ratio * total_steps as f64)).min(1.0)
}

#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct SplitSpec {
    pub n_test_trials: usize,
    pub n_val_trials: usize,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { n_test_trials: 5, n_val_trials: 2, seed: 0 }
    }
}

/// A trial as listed in a dataset manifest.
#[derive(Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrialRecord {
    pub subject: String,
    pub trial: String,
    #[cfg_attr(feature = "serde", serde(default))]
    pub excluded: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<TrialRecord>,
    pub val: Vec<TrialRecord>,
    pub test: Vec<TrialRecord>,
}

/// Per subject, draws `n_test` then `n_val` trials at random without
/// replacement; the rest train. Excluded trials are left out entirely.
pub fn split_dataset(trials: &[TrialRecord], spec: &SplitSpec) -> Result<Split, TrainError> {
    let mut by_subject: BTreeMap<&str, Vec<&TrialRecord>> = BTreeMap::new();
    for t in trials.iter().filter(|t| !t.excluded) {
        by_subject.entry(&t.subject).or_default().push(t);
    }
    let needed = spec.n_test_trials + spec.n_val_trials;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut split = Split::default();
    for (subject, mut list) in by_subject {
        if list.len() <= needed {
            return Err(TrainError::InsufficientTrials { subject: subject.into(), available: list.len(), needed });
        }
        list.sort();
        list.shuffle(&mut rng);
        let (test, rest) = list.split_at(spec.n_test_trials);
        let (val, train) = rest.split_at(spec.n_val_trials);
        split.test.extend(test.iter().map(|t| (*t).clone()));
        split.val.extend(val.iter().map(|t| (*t).clone()));
        split.train.extend(train.iter().map(|t| (*t).clone()));
    }
    Ok(split)
}

/// Name prefixes of the two networks inside an [`Extractor`]'s store.
pub const MODEL_PREFIX: &str = "model.";
pub const SELECTOR_PREFIX: &str = "selector.";

/// How EEG channels are gated before the backbone.
#[derive(Clone, Debug, PartialEq)]
pub enum Gate {
    /// EEG passes unchanged.
    Open,
    /// Rows scaled by the learned selection vector.
    Soft,
    /// Rows multiplied by a fixed 0/1 mask.
    Hard(Vec<f64>),
}

/// Backbone plus optional selector sharing one parameter store.
#[derive(Clone, Debug)]
pub struct Extractor {
    pub store: ParamStore,
    model: WdTcn,
    selector: Option<ConvRs>,
    gate: Gate,
}

impl Extractor {
    pub fn new(model_cfg: &ModelConfig, selector_cfg: Option<&SelectorConfig>, seed: u64) -> Result<Self, TrainError> {
        let mut store = ParamStore::new();
        let model = WdTcn::build(model_cfg, &mut store, MODEL_PREFIX, seed)?;
        let selector = match selector_cfg {
            Some(c) => Some(ConvRs::build(c, model_cfg.eeg_in_channels, &mut store, SELECTOR_PREFIX, seed ^ 0x5e1e)?),
            None => None,
        };
        let gate = if selector.is_some() { Gate::Soft } else { Gate::Open };
        Ok(Self { store, model, selector, gate })
    }

    pub fn model(&self) -> &WdTcn {
        &self.model
    }

    pub fn config(&self) -> &ModelConfig {
        self.model.config()
    }

    pub fn selector(&self) -> Option<&ConvRs> {
        self.selector.as_ref()
    }

    pub fn gate(&self) -> &Gate {
        &self.gate
    }

    /// Fixes the EEG gate to keep only `positions`.
    pub fn set_hard_subset(&mut self, positions: &[usize]) {
        let mut mask = vec![0.0; self.config().eeg_in_channels];
        for &p in positions {
            mask[p] = 1.0;
        }
        self.gate = Gate::Hard(mask);
    }

    pub fn set_gate(&mut self, gate: Gate) -> Result<(), TrainError> {
        match &gate {
            Gate::Soft if self.selector.is_none() => {
                return Err(TrainError::InvalidConfig("soft gate needs a selector"));
            }
            Gate::Hard(m) if m.len() != self.config().eeg_in_channels => {
                return Err(TrainError::InvalidConfig("hard gate length must match the EEG channels"));
            }
            _ => {}
        }
        self.gate = gate;
        Ok(())
    }

    /// Forward pass; returns the backbone nodes and the selection node
    /// when the soft gate is active.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        seg: &Segment,
    ) -> Result<(ForwardVars, Option<crate::graph::Var>), TrainError> {
        let x = g.constant(Tensor::row_vector(seg.mixture().samples()));
        let (eeg, sel) = match &self.gate {
            Gate::Open => (g.constant(seg.eeg().clone()), None),
            Gate::Soft => {
                let e = g.constant(seg.eeg().clone());
                let s = self.selector.as_ref().expect("soft gate without selector").forward(g, e)?;
                (g.row_scale(e, s), Some(s))
            }
            Gate::Hard(mask) => {
                let mut e = seg.eeg().clone();
                for (r, &m) in mask.iter().enumerate().take(e.rows()) {
                    e.row_mut(r).iter_mut().for_each(|v| *v *= m);
                }
                (g.constant(e), None)
            }
        };
        Ok((self.model.forward_graph(g, x, eeg)?, sel))
    }

    pub fn estimate(&self, seg: &Segment) -> Result<Vec<f64>, TrainError> {
        let mut g = Graph::new(&self.store);
        let (out, _) = self.forward_graph(&mut g, seg)?;
        Ok(g.value(out.estimate).data().to_vec())
    }

    /// Selection vector for a segment, when a selector exists.
    pub fn selection(&self, seg: &Segment) -> Result<Option<SelectionVector>, TrainError> {
        match &self.selector {
            Some(sel) => Ok(Some(sel.select(&self.store, seg.eeg())?)),
            None => Ok(None),
        }
    }

    pub fn selections(&self, segments: &[Segment]) -> Result<Vec<SelectionVector>, TrainError> {
        segments.iter().filter_map(|s| self.selection(s).transpose()).collect()
    }

    /// Mean SI-SDR of the estimates over `segments`.
    pub fn mean_si_sdr(&self, segments: &[Segment], opts: SiSdrOptions) -> Result<f64, TrainError> {
        if segments.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let mut total = 0.0;
        for seg in segments {
            total += si_sdr_with(&self.estimate(seg)?, seg.target().samples(), opts)?;
        }
        Ok(total / segments.len() as f64)
    }
}

/// Mean SI-SDR of the unprocessed mixtures.
pub fn mixture_si_sdr(segments: &[Segment], opts: SiSdrOptions) -> Result<f64, TrainError> {
    if segments.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut total = 0.0;
    for seg in segments {
        total += si_sdr_with(seg.mixture().samples(), seg.target().samples(), opts)?;
    }
    Ok(total / segments.len() as f64)
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, _, t)| Tensor::zeros(t.rows(), t.cols())).collect();
        Self { beta1, beta2, eps, t: 0, m: zeros.clone(), v: zeros }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f64) {
        self.step_scaled(store, grads, lr, &alloc::vec![1.0; grads.len()]);
    }

    /// Step with the learning rate of tensor `i` multiplied by `scale[i]`.
    pub fn step_scaled(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f64, scale: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - libm::pow(self.beta1, self.t as f64);
        let c2 = 1.0 - libm::pow(self.beta2, self.t as f64);
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let p = store.get_mut(id).data_mut();
            let lr = lr * scale[i];
            let (m, v, g) = (self.m[i].data_mut(), self.v[i].data_mut(), grads[i].data());
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                p[j] -= lr * (m[j] / c1) / (libm::sqrt(v[j] / c2) + self.eps);
            }
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LogRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub si_sdr: f64,
    pub discretization: f64,
    pub cardinality: f64,
    pub val_si_sdr: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub steps: usize,
    pub records: Vec<LogRecord>,
    /// Best validation SI-SDR with the regularisers at full weight, and the
    /// step it was reached at.
    pub best_val: Option<(f64, usize)>,
}

/// Trains `ex` in place. With validation data the store ends at the best
/// validation checkpoint, otherwise at the final step.
pub fn train(
    ex: &mut Extractor,
    train_set: &[Segment],
    val_set: &[Segment],
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&LogRecord),
) -> Result<TrainSummary, TrainError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let mut total = cfg.epochs * per_epoch;
    if let Some(m) = cfg.max_steps {
        total = total.min(m);
    }
    let mut summary = TrainSummary { steps: 0, records: Vec::new(), best_val: None };
    if total == 0 {
        return Ok(summary);
    }
    let normalizer = ex.config().eeg_in_channels as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(&ex.store, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    let lr_scale: Vec<f64> =
        ex.store.iter().map(|(_, name, _)| if name.starts_with(SELECTOR_PREFIX) { cfg.selector_lr_scale } else { 1.0 }).collect();
    let mut best: Option<ParamStore> = None;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut step = 0;

    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for (bi, batch) in order.chunks(cfg.batch_size).enumerate() {
            step += 1;
            let mut grads: Vec<Tensor> = ex.store.iter().map(|(_, _, t)| Tensor::zeros(t.rows(), t.cols())).collect();
            let mut comp = LossBreakdown::default();
            let k = 1.0 / batch.len() as f64;
            let ramp = reg_ramp(step, total, cfg.reg_delay_ratio, cfg.reg_warmup_ratio);
            let weights = LossWeights { beta: ramp * cfg.weights.beta, gamma: ramp * cfg.weights.gamma, ..cfg.weights };
            for &i in batch {
                let seg = &train_set[i];
                let mut g = Graph::new(&ex.store);
                let (out, sel) = ex.forward_graph(&mut g, seg)?;
                let l = example_loss(&mut g, out.estimate, seg.target().samples(), sel, &weights, &cfg.reg, normalizer, cfg.si_sdr);
                comp.total += k * g.value(l.total).get(0, 0);
                comp.si_sdr += k * g.value(l.si_sdr).get(0, 0);
                comp.discretization += k * l.discretization.map_or(0.0, |v| g.value(v).get(0, 0));
                comp.cardinality += k * l.cardinality.map_or(0.0, |v| g.value(v).get(0, 0));
                g.backward(l.total).accumulate_params(&mut grads, k);
            }
            let non_finite = move |what| TrainError::NonFinite {
                step,
                what,
                metas: batch.iter().map(|&i| train_set[i].meta().clone()).collect(),
                components: comp,
            };
            if !comp.total.is_finite() {
                return Err(non_finite("loss"));
            }
            if !grads.iter().all(Tensor::is_finite) {
                return Err(non_finite("gradient"));
            }
            if let Some(limit) = cfg.grad_clip {
                let norm = libm::sqrt(grads.iter().flat_map(|t| t.data()).map(|v| v * v).sum::<f64>());
                if norm > limit {
                    grads.iter_mut().for_each(|t| t.scale_in_place(limit / norm));
                }
            }
            let lr = lr_at(step, total, cfg);
            adam.step_scaled(&mut ex.store, &grads, lr, &lr_scale);
            if !ex.store.is_finite() {
                return Err(non_finite("parameter"));
            }

            let epoch_end = bi + 1 == per_epoch;
            let last = step == total;
            let mut record = LogRecord {
                step,
                epoch,
                lr,
                loss: comp.total,
                si_sdr: comp.si_sdr,
                discretization: comp.discretization,
                cardinality: comp.cardinality,
                val_si_sdr: None,
            };
            if !val_set.is_empty() && (last || (epoch_end && (epoch + 1) % cfg.val_every == 0)) {
                let v = ex.mean_si_sdr(val_set, cfg.si_sdr)?;
                record.val_si_sdr = Some(v);
                // Only parameters trained under the full objective are kept.
                if ramp >= 1.0 && summary.best_val.is_none_or(|(b, _)| v > b) {
                    summary.best_val = Some((v, step));
                    best = Some(ex.store.clone());
                }
            }
            observer(&record);
            summary.records.push(record);
            if last {
                break 'epochs;
            }
        }
    }
    summary.steps = step;
    if let Some(store) = best {
        ex.store = store;
    }
    Ok(summary)
}

/// Per-segment metrics and their SI-SDR means.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<(SegmentMeta, BTreeMap<String, MetricOutcome>)>,
    pub mean_si_sdr: f64,
    /// Mean SI-SDR of the unprocessed mixtures.
    pub mean_input_si_sdr: f64,
}

/// Source of the waveform scored against each target.
#[derive(Clone, Copy)]
pub enum Estimator<'a> {
    Model(&'a Extractor),
    Mixture,
    Reference,
}

pub fn evaluate(segments: &[Segment], estimator: Estimator, registry: &MetricRegistry, opts: SiSdrOptions) -> Result<EvalReport, TrainError> {
    if segments.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut rows = Vec::with_capacity(segments.len());
    let (mut sum, mut input) = (0.0, 0.0);
    for seg in segments {
        let target = seg.target().samples();
        let est = match estimator {
            Estimator::Model(ex) => ex.estimate(seg)?,
            Estimator::Mixture => seg.mixture().samples().to_vec(),
            Estimator::Reference => target.to_vec(),
        };
        sum += si_sdr_with(&est, target, opts)?;
        input += si_sdr_with(seg.mixture().samples(), target, opts)?;
        rows.push((seg.meta().clone(), registry.evaluate(&est, target, seg.mixture().rate_hz())));
    }
    let n = segments.len() as f64;
    Ok(EvalReport { rows, mean_si_sdr: sum / n, mean_input_si_sdr: input / n })
}
