//! Learned soft channel selection over a candidate set, its regularisers,
//! and extraction of a static subset.

use alloc::format;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geometry::{CandidateSet, GeometryError};
use crate::graph::{Graph, Var};
use crate::model::{Conv, DepthConvBlock};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SelectionError {
    #[error("EEG has {found} channels, selector expects {expected}")]
    ChannelMismatch { expected: usize, found: usize },
    #[error("selection vector has length {found}, expected {expected}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("selection value {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("threshold must lie in (0, 1), got {0}")]
    InvalidThreshold(f64),
    #[error("no selection vectors to average")]
    NoData,
    #[error("invalid selector config: {0}")]
    InvalidConfig(&'static str),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Per-example channel weights in `[0, 1]`, one per candidate channel.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectionVector(Vec<f64>);

impl SelectionVector {
    pub fn new(values: Vec<f64>) -> Result<Self, SelectionError> {
        if let Some(&v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(SelectionError::OutOfRange(v));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Constants of the two selection regularisers.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct RegularizerConfig {
    pub k1: f64,
    pub k2: f64,
    /// Offset that puts the minimum of the discretisation loss at zero.
    pub b: f64,
}

impl Default for RegularizerConfig {
    fn default() -> Self {
        Self { k1: 100.0, k2: 0.25, b: 0.25 }
    }
}

/// `k1·(−Σ(s − ½)²/(n·B) + b)` over a `B × n` batch.
pub fn discretization_loss(sel_batch: &Tensor, cfg: &RegularizerConfig, normalizer: f64) -> f64 {
    let b = sel_batch.rows().max(1) as f64;
    let sum: f64 = sel_batch.data().iter().map(|s| (s - 0.5) * (s - 0.5)).sum();
    cfg.k1 * (-sum / (normalizer * b) + cfg.b)
}

/// Gradient of [`discretization_loss`] with respect to the batch.
pub fn discretization_grad(sel_batch: &Tensor, cfg: &RegularizerConfig, normalizer: f64) -> Tensor {
    let b = sel_batch.rows().max(1) as f64;
    sel_batch.map(|s| -2.0 * cfg.k1 * (s - 0.5) / (normalizer * b))
}

/// `k2 · mean_batch ‖s‖²`.
pub fn cardinality_loss(sel_batch: &Tensor, cfg: &RegularizerConfig) -> f64 {
    let b = sel_batch.rows().max(1) as f64;
    cfg.k2 * sel_batch.data().iter().map(|s| s * s).sum::<f64>() / b
}

/// Gradient of [`cardinality_loss`] with respect to the batch.
pub fn cardinality_grad(sel_batch: &Tensor, cfg: &RegularizerConfig) -> Tensor {
    let b = sel_batch.rows().max(1) as f64;
    sel_batch.map(|s| 2.0 * cfg.k2 * s / b)
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct SelectorConfig {
    pub hidden_dim: usize,
    pub block_hidden_dim: usize,
    pub n_blocks: usize,
    pub kernel_size: usize,
    /// Initial bias of the output layer; `sigmoid(output_bias)` is the
    /// starting selection level.
    pub output_bias: f64,
    /// Multiplier on the initial output-layer weights. At zero every
    /// channel starts at exactly `sigmoid(output_bias)`.
    pub output_init_scale: f64,
}

impl Default for SelectorConfig {
    fn default() -> Self {
        Self { hidden_dim: 32, block_hidden_dim: 64, n_blocks: 2, kernel_size: 3, output_bias: 0.0, output_init_scale: 1.0 }
    }
}

/// Selector network: `1×1` projection, residual depthwise-separable blocks,
/// average pooling over time, linear layer and sigmoid.
#[derive(Clone, Debug)]
pub struct ConvRs {
    cfg: SelectorConfig,
    n_channels: usize,
    input: Conv,
    blocks: Vec<DepthConvBlock>,
    output: Conv,
}

impl ConvRs {
    pub fn build(
        cfg: &SelectorConfig,
        n_channels: usize,
        store: &mut ParamStore,
        prefix: &str,
        seed: u64,
    ) -> Result<Self, SelectionError> {
        if n_channels == 0 || cfg.hidden_dim == 0 || cfg.block_hidden_dim == 0 {
            return Err(SelectionError::InvalidConfig("channel counts must be positive"));
        }
        if cfg.kernel_size % 2 == 0 {
            return Err(SelectionError::InvalidConfig("kernel_size must be odd"));
        }
        if !cfg.output_bias.is_finite() {
            return Err(SelectionError::InvalidConfig("output_bias must be finite"));
        }
        if !(cfg.output_init_scale.is_finite() && cfg.output_init_scale >= 0.0) {
            return Err(SelectionError::InvalidConfig("output_init_scale must be finite and non-negative"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let input = Conv::pointwise(store, &format!("{prefix}input"), n_channels, cfg.hidden_dim, rng);
        let blocks = (0..cfg.n_blocks)
            .map(|k| {
                let name = format!("{prefix}block{k}");
                DepthConvBlock::new(store, &name, cfg.hidden_dim, cfg.block_hidden_dim, cfg.kernel_size, 1 << k, rng)
            })
            .collect();
        let output = Conv::pointwise(store, &format!("{prefix}output"), cfg.hidden_dim, n_channels, rng);
        store.get_mut(output.w).scale_in_place(cfg.output_init_scale);
        if let Some(b) = output.b {
            store.get_mut(b).data_mut().iter_mut().for_each(|v| *v = cfg.output_bias);
        }
        Ok(Self { cfg: cfg.clone(), n_channels, input, blocks, output })
    }

    pub fn init(cfg: &SelectorConfig, n_channels: usize, seed: u64) -> Result<(Self, ParamStore), SelectionError> {
        let mut store = ParamStore::new();
        let sel = Self::build(cfg, n_channels, &mut store, "", seed)?;
        Ok((sel, store))
    }

    pub fn n_channels(&self) -> usize {
        self.n_channels
    }

    pub fn config(&self) -> &SelectorConfig {
        &self.cfg
    }

    /// Selection node `|S| × 1` for an `|S| × T_e` EEG node.
    pub fn forward(&self, g: &mut Graph, eeg: Var) -> Result<Var, SelectionError> {
        let found = g.value(eeg).rows();
        if found != self.n_channels {
            return Err(SelectionError::ChannelMismatch { expected: self.n_channels, found });
        }
        let mut h = self.input.forward(g, eeg);
        for block in &self.blocks {
            h = block.forward(g, h);
        }
        let pooled = g.mean_cols(h);
        let z = self.output.forward(g, pooled);
        Ok(g.sigmoid(z))
    }

    /// Selection vector for one EEG segment.
    pub fn select(&self, params: &ParamStore, eeg: &Tensor) -> Result<SelectionVector, SelectionError> {
        let mut g = Graph::new(params);
        let e = g.constant(eeg.clone());
        let s = self.forward(&mut g, e)?;
        SelectionVector::new(g.value(s).data().to_vec())
    }
}

/// Scales row `c` of `eeg` by `sel[c]`.
pub fn apply_selection(eeg: &Tensor, sel: &SelectionVector) -> Result<Tensor, SelectionError> {
    if sel.len() != eeg.rows() {
        return Err(SelectionError::LengthMismatch { expected: eeg.rows(), found: sel.len() });
    }
    let mut out = eeg.clone();
    for (r, &s) in sel.values().iter().enumerate() {
        out.row_mut(r).iter_mut().for_each(|v| *v *= s);
    }
    Ok(out)
}

/// Static subset derived from averaged selection vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectedSubset {
    /// Selected channels as layout indices.
    pub subset: CandidateSet,
    /// Positions of the selected channels within the candidate set.
    pub positions: Vec<usize>,
    /// Mean selection value per candidate channel.
    pub mean: Vec<f64>,
    pub threshold: f64,
    /// True when no channel reached the threshold and the single
    /// highest-mean channel was kept instead.
    pub fallback: bool,
}

/// Averages `selections` and keeps the candidates whose mean reaches
/// `threshold`. An empty result falls back to the best single channel.
pub fn finalize_subset(
    selections: &[SelectionVector],
    candidate: &CandidateSet,
    threshold: f64,
) -> Result<SelectedSubset, SelectionError> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(SelectionError::InvalidThreshold(threshold));
    }
    let first = selections.first().ok_or(SelectionError::NoData)?;
    if first.len() != candidate.len() {
        return Err(SelectionError::LengthMismatch { expected: candidate.len(), found: first.len() });
    }
    let mut mean = alloc::vec![0.0; candidate.len()];
    for s in selections {
        if s.len() != mean.len() {
            return Err(SelectionError::LengthMismatch { expected: mean.len(), found: s.len() });
        }
        for (m, v) in mean.iter_mut().zip(s.values()) {
            *m += v;
        }
    }
    let n = selections.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);

    let mut positions: Vec<usize> = (0..mean.len()).filter(|&i| mean[i] >= threshold).collect();
    let fallback = positions.is_empty();
    if fallback {
        let best = (0..mean.len()).fold(0, |b, i| if mean[i] > mean[b] { i } else { b });
        positions.push(best);
    }
    let subset = candidate.subset(&positions)?;
    Ok(SelectedSubset { subset, positions, mean, threshold, fallback })
}
