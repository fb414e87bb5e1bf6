//! Sparsity sweep: one independent training per γ, then subset extraction
//! and evaluation on the extracted subset.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use super::{train, Extractor, LogRecord, TrainConfig, TrainError};
use crate::dataio::Segment;
use crate::geometry::CandidateSet;
use crate::model::ModelConfig;
use crate::objectives::LossWeights;
use crate::selection::{finalize_subset, SelectedSubset, SelectorConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct SweepSetup {
    pub model: ModelConfig,
    pub selector: SelectorConfig,
    /// Base training config; its γ is replaced per run.
    pub train: TrainConfig,
    pub threshold: f64,
    /// Extra epochs trained with the hard subset gate after extraction.
    pub finetune_epochs: usize,
    pub model_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub gamma: f64,
    pub subset: Option<SelectedSubset>,
    /// Mean SI-SDR with the learned soft selection.
    pub soft_si_sdr: Option<f64>,
    /// Mean SI-SDR with only the extracted subset passed through.
    pub hard_si_sdr: Option<f64>,
    pub error: Option<String>,
}

impl SweepRow {
    pub fn subset_size(&self) -> Option<usize> {
        self.subset.as_ref().map(|s| s.positions.len())
    }
}

/// Trains from scratch with sparsity weight `gamma`, extracts the subset
/// from the validation segments (training segments when there are none)
/// and scores it on the test segments (falling back likewise).
pub fn run_gamma(
    gamma: f64,
    setup: &SweepSetup,
    candidate: &CandidateSet,
    train_set: &[Segment],
    val_set: &[Segment],
    test_set: &[Segment],
    observer: &mut dyn FnMut(&LogRecord),
) -> Result<(SweepRow, Extractor), TrainError> {
    let cfg = TrainConfig { weights: LossWeights { gamma, ..setup.train.weights }, ..setup.train.clone() };
    let mut ex = Extractor::new(&setup.model, Some(&setup.selector), setup.model_seed)?;
    train(&mut ex, train_set, val_set, &cfg, observer)?;

    let select_on = if val_set.is_empty() { train_set } else { val_set };
    let score_on = [test_set, val_set, train_set].into_iter().find(|s| !s.is_empty()).unwrap_or(train_set);
    let subset = finalize_subset(&ex.selections(select_on)?, candidate, setup.threshold)?;
    let soft = ex.mean_si_sdr(score_on, cfg.si_sdr)?;
    ex.set_hard_subset(&subset.positions);
    if setup.finetune_epochs > 0 {
        let ft = TrainConfig { epochs: setup.finetune_epochs, max_steps: None, ..cfg.clone() };
        train(&mut ex, train_set, val_set, &ft, observer)?;
    }
    let hard = ex.mean_si_sdr(score_on, cfg.si_sdr)?;
    let row = SweepRow { gamma, subset: Some(subset), soft_si_sdr: Some(soft), hard_si_sdr: Some(hard), error: None };
    Ok((row, ex))
}

/// [`run_gamma`] for every γ; a failing run becomes a row carrying the error.
pub fn gamma_sweep(
    gammas: &[f64],
    setup: &SweepSetup,
    candidate: &CandidateSet,
    train_set: &[Segment],
    val_set: &[Segment],
    test_set: &[Segment],
    observer: &mut dyn FnMut(f64, &LogRecord),
) -> Vec<SweepRow> {
    gammas
        .iter()
        .map(|&gamma| {
            let mut obs = |r: &LogRecord| observer(gamma, r);
            match run_gamma(gamma, setup, candidate, train_set, val_set, test_set, &mut obs) {
                Ok((row, _)) => row,
                Err(e) => SweepRow { gamma, subset: None, soft_si_sdr: None, hard_si_sdr: None, error: Some(e.to_string()) },
            }
        })
        .collect()
}
