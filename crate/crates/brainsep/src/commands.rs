//! The command implementations behind the `brainsep` binary.

use std::fs;
use std::path::{Path, PathBuf};

use brainsep_core::dataio::{mix_at_snr, segment, synth_layout, synth_trial, PairedTrial, Segment, SegmentMeta, SynthSpec, Waveform};
use brainsep_core::geometry::{CandidateSet, ElectrodeLayout};
use brainsep_core::model::ModelConfig;
use brainsep_core::objectives::{MetricOutcome, MetricRegistry, SI_SDR};
use brainsep_core::selection::finalize_subset;
use brainsep_core::training::{
    evaluate, gamma_sweep, grad_check, train, Estimator, Extractor, GradCheckTarget, LogRecord, SweepSetup,
};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::config::{DataSource, ExperimentConfig};
use crate::dataset::{write_trial, Loader, Manifest, ManifestEntry, SplitName, TrialFiles, MANIFEST_FILE};
use crate::eeg::EegMatrix;
use crate::error::{Error, Result};
use crate::external::ExternalEvaluator;
use crate::report::{sweep_summary, write_sweep_csv, JsonlLog, SubsetReport, SweepCsvRow};
use crate::topomap::emit_topomap;

pub const CHECKPOINT_FILE: &str = "checkpoint.safetensors";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_toml<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &toml::to_string(value).map_err(|e| Error::Data(e.to_string()))?)
}

/// Segments of the three splits.
#[derive(Clone, Debug, Default)]
pub struct Datasets {
    pub train: Vec<Segment>,
    pub val: Vec<Segment>,
    pub test: Vec<Segment>,
}

impl Datasets {
    pub fn get(&self, split: SplitName) -> &[Segment] {
        match split {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }
}

/// A validated config with its layout and candidate set resolved.
pub struct Experiment {
    pub cfg: ExperimentConfig,
    pub layout: ElectrodeLayout,
    pub candidate: CandidateSet,
    pub model: ModelConfig,
}

impl Experiment {
    /// `seed` overrides the config's seed.
    pub fn new(mut cfg: ExperimentConfig, seed: Option<u64>) -> Result<Self> {
        if let Some(s) = seed {
            cfg.seed = s;
        }
        cfg.train.seed = cfg.seed;
        cfg.validate()?;
        let layout = cfg.resolve_layout()?;
        let candidate = cfg.candidate(&layout)?;
        let model = cfg.model_for(&candidate)?;
        cfg.model = model.clone();
        Ok(Self { cfg, layout, candidate, model })
    }

    /// Loads or generates the data, keeping the rows of `candidate`.
    pub fn datasets(&self, candidate: &CandidateSet) -> Result<Datasets> {
        let data = self.load_datasets(candidate)?;
        for seg in data.train.iter().chain(&data.val).chain(&data.test) {
            let (fa, fe) = (seg.mixture().rate_hz(), seg.eeg_rate_hz());
            if fa != self.model.audio_rate_hz || fe != self.model.eeg_rate_hz {
                return Err(Error::Config(format!(
                    "data rates {fa} Hz audio / {fe} Hz EEG differ from the model's {} Hz / {} Hz",
                    self.model.audio_rate_hz, self.model.eeg_rate_hz
                )));
            }
        }
        Ok(data)
    }

    fn load_datasets(&self, candidate: &CandidateSet) -> Result<Datasets> {
        let seg_len = self.cfg.seg_len_s;
        match &self.cfg.data {
            DataSource::Synthetic { spec, n_train, n_val, n_test, .. } => {
                let seed = self.cfg.data_seed();
                let mut out = Datasets::default();
                for k in 0..n_train + n_val + n_test {
                    let paired = synth_paired(spec, seed, k)?;
                    let paired = PairedTrial { eeg: paired.eeg.select_rows(candidate.indices()), ..paired };
                    let segs = segment(&paired, seg_len)?;
                    let dst = if k < *n_train {
                        &mut out.train
                    } else if k < n_train + n_val {
                        &mut out.val
                    } else {
                        &mut out.test
                    };
                    dst.extend(segs);
                }
                Ok(out)
            }
            DataSource::Manifest { path, split, preprocess } => {
                let manifest = Manifest::load(path)?;
                if manifest.layout_id != self.layout.id() {
                    return Err(Error::Config(format!(
                        "manifest uses layout {:?}, config layout is {:?}",
                        manifest.layout_id,
                        self.layout.id()
                    )));
                }
                let root = path.parent().unwrap_or(Path::new(""));
                let [train, val, test] = manifest.split(split)?;
                let loader = Loader { layout: &self.layout, preprocess: preprocess.as_ref(), rows: candidate.indices(), seg_len_s: seg_len };
                Ok(Datasets {
                    train: loader.load_all(root, &train)?,
                    val: loader.load_all(root, &val)?,
                    test: loader.load_all(root, &test)?,
                })
            }
        }
    }

    fn registry(&self, scratch: &Path) -> Result<MetricRegistry> {
        let mut reg = MetricRegistry::new(self.cfg.train.si_sdr);
        if !self.cfg.metrics.is_empty() {
            create_dir(scratch)?;
        }
        for m in &self.cfg.metrics {
            reg.request(m.name.clone());
            reg.register(Box::new(ExternalEvaluator::new(m.clone(), scratch)));
        }
        Ok(reg)
    }
}

/// Generated trial `k`: the pair mixed at the spec's SNR.
fn synth_paired(spec: &SynthSpec, seed: u64, k: usize) -> Result<PairedTrial> {
    let t = synth_trial(spec, seed.wrapping_add(k as u64))?;
    let (mixture, target) = mix_at_snr(&t.target, &t.interferer, spec.snr_db)?;
    Ok(PairedTrial {
        mixture,
        target,
        eeg_rate_hz: t.eeg.rate_hz(),
        eeg: t.eeg.into_data(),
        meta: SegmentMeta { subject: "synthetic".into(), trial: format!("trial{k:03}"), index: 0 },
    })
}

/// Writes `n_train + n_val + n_test` generated trials (or `n_trials`
/// unlabelled ones) with a manifest and the matching layout file.
pub fn cmd_synth(spec: &SynthSpec, counts: SynthCounts, seed: u64, out: &Path) -> Result<Manifest> {
    spec.validate()?;
    create_dir(out)?;
    let layout = synth_layout(spec.n_channels);
    let mut layout_text = String::from("# generated ring layout\n");
    for (name, [x, y]) in layout.names().iter().zip(layout.coords()) {
        layout_text.push_str(&format!("{name},{x},{y}\n"));
    }
    write_text(&out.join(format!("{}.txt", layout.id())), &layout_text)?;

    let mut manifest = Manifest { layout_id: layout.id().to_string(), trials: Vec::new() };
    for k in 0..counts.total() {
        let p = synth_paired(spec, seed, k)?;
        let interferer: Vec<f64> = p.mixture.samples().iter().zip(p.target.samples()).map(|(m, s)| m - s).collect();
        let name = p.meta.trial.clone();
        let files = TrialFiles {
            interferer: Some(Waveform::new(interferer, spec.audio_rate_hz)?),
            mixture: p.mixture,
            target: p.target,
            eeg: EegMatrix { rate_hz: p.eeg_rate_hz, data: p.eeg },
        };
        write_trial(out.join(&name), &files)?;
        manifest.trials.push(ManifestEntry {
            subject: "synthetic".into(),
            trial: name.clone(),
            dir: PathBuf::from(&name),
            excluded: false,
            split: counts.split_of(k),
        });
    }
    manifest.save(out.join(MANIFEST_FILE))?;
    Ok(manifest)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthCounts {
    /// Trials without split labels.
    Unlabelled(usize),
    Split { train: usize, val: usize, test: usize },
}

impl SynthCounts {
    pub fn total(self) -> usize {
        match self {
            SynthCounts::Unlabelled(n) => n,
            SynthCounts::Split { train, val, test } => train + val + test,
        }
    }

    fn split_of(self, k: usize) -> Option<SplitName> {
        match self {
            SynthCounts::Unlabelled(_) => None,
            SynthCounts::Split { train, val, .. } => Some(if k < train {
                SplitName::Train
            } else if k < train + val {
                SplitName::Val
            } else {
                SplitName::Test
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    pub final_loss: Option<f64>,
    pub best_val_si_sdr: Option<f64>,
    pub best_step: Option<usize>,
    pub train_segments: usize,
    pub val_segments: usize,
}

/// Trains from the config and writes the checkpoint, the step log, the
/// resolved config and a summary into `out`.
pub fn cmd_train(exp: &Experiment, out: &Path) -> Result<TrainReport> {
    create_dir(out)?;
    write_text(&out.join("config.toml"), &exp.cfg.to_toml())?;
    let data = exp.datasets(&exp.candidate)?;
    let mut ex = Extractor::new(&exp.model, exp.cfg.selector.as_ref(), exp.cfg.seed)?;
    let mut log = JsonlLog::create(out.join("train.jsonl"))?;
    let mut log_err = None;
    let summary = train(&mut ex, &data.train, &data.val, &exp.cfg.train, &mut |r: &LogRecord| {
        if let Err(e) = log.write(r, None) {
            log_err.get_or_insert(e);
        }
    });
    log.finish()?;
    if let Some(e) = log_err {
        return Err(e);
    }
    let summary = summary?;
    save_checkpoint(out.join(CHECKPOINT_FILE), &Checkpoint { extractor: ex, candidate: exp.candidate.clone() })?;
    let report = TrainReport {
        steps: summary.steps,
        final_loss: summary.records.last().map(|r| r.loss),
        best_val_si_sdr: summary.best_val.map(|b| b.0),
        best_step: summary.best_val.map(|b| b.1),
        train_segments: data.train.len(),
        val_segments: data.val.len(),
    };
    write_toml(&out.join("train_summary.toml"), &report)?;
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalTarget {
    Model,
    Mixture,
    Reference,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub split: SplitName,
    pub segments: usize,
    pub mean_si_sdr: f64,
    pub mean_input_si_sdr: f64,
    pub improvement: f64,
}

/// Scores a split and writes a per-segment table and a summary.
pub fn cmd_eval(exp: &Experiment, checkpoint: Option<&Path>, split: SplitName, target: EvalTarget, out: &Path) -> Result<EvalSummary> {
    create_dir(out)?;
    let ck = match (target, checkpoint) {
        (EvalTarget::Model, None) => return Err(Error::Config("evaluating the model needs --checkpoint".into())),
        (EvalTarget::Model, Some(p)) => Some(load_checkpoint(p)?),
        _ => None,
    };
    let candidate = ck.as_ref().map_or(&exp.candidate, |c| &c.candidate);
    if candidate.layout_id() != exp.layout.id() {
        return Err(Error::Config(format!("checkpoint uses layout {:?}, config layout is {:?}", candidate.layout_id(), exp.layout.id())));
    }
    let data = exp.datasets(candidate)?;
    let segments = data.get(split);
    let registry = exp.registry(&out.join("scratch"))?;
    let estimator = match (&ck, target) {
        (Some(c), _) => Estimator::Model(&c.extractor),
        (None, EvalTarget::Reference) => Estimator::Reference,
        (None, _) => Estimator::Mixture,
    };
    let report = evaluate(segments, estimator, &registry, exp.cfg.train.si_sdr)?;

    let name = format!("eval_{}", split_str(split));
    let table = out.join(format!("{name}.csv"));
    let csv_err = |e: csv::Error| Error::Data(format!("{}: {e}", table.display()));
    let mut w = csv::Writer::from_path(&table).map_err(csv_err)?;
    let metric_names: Vec<String> = report.rows.first().map(|(_, m)| m.keys().cloned().collect()).unwrap_or_default();
    let mut header = vec!["subject".to_string(), "trial".into(), "index".into()];
    header.extend(metric_names.iter().cloned());
    header.push("errors".into());
    w.write_record(&header).map_err(csv_err)?;
    for (meta, metrics) in &report.rows {
        let mut rec = vec![meta.subject.clone(), meta.trial.clone(), meta.index.to_string()];
        let mut errors = Vec::new();
        for n in &metric_names {
            rec.push(match metrics.get(n) {
                Some(MetricOutcome::Score(v)) => v.to_string(),
                Some(MetricOutcome::Failed(m)) => {
                    errors.push(format!("{n}: {m}"));
                    String::new()
                }
                _ => {
                    errors.push(format!("{n}: absent"));
                    String::new()
                }
            });
        }
        rec.push(errors.join("; "));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(&table, e))?;
    let summary = EvalSummary {
        split,
        segments: segments.len(),
        mean_si_sdr: report.mean_si_sdr,
        mean_input_si_sdr: report.mean_input_si_sdr,
        improvement: report.mean_si_sdr - report.mean_input_si_sdr,
    };
    write_toml(&out.join(format!("{name}.toml")), &summary)?;
    debug_assert!(metric_names.iter().any(|n| n == SI_SDR));
    Ok(summary)
}

fn split_str(s: SplitName) -> &'static str {
    match s {
        SplitName::Train => "train",
        SplitName::Val => "val",
        SplitName::Test => "test",
    }
}

/// Independent training per γ; writes `sweep.csv`, `sweep_summary.txt`,
/// the step log and one subset report per successful row.
pub fn cmd_sweep(exp: &Experiment, gammas: &[f64], out: &Path) -> Result<Vec<SweepCsvRow>> {
    if gammas.is_empty() || gammas.iter().any(|g| !(g.is_finite() && *g >= 0.0)) {
        return Err(Error::Config("gammas must be a non-empty list of non-negative numbers".into()));
    }
    create_dir(out)?;
    write_text(&out.join("config.toml"), &exp.cfg.to_toml())?;
    let data = exp.datasets(&exp.candidate)?;
    let setup = SweepSetup {
        model: exp.model.clone(),
        selector: exp.cfg.selector.clone().unwrap_or_default(),
        train: exp.cfg.train.clone(),
        threshold: exp.cfg.threshold,
        finetune_epochs: exp.cfg.sweep.finetune_epochs,
        model_seed: exp.cfg.seed,
    };
    let mut log = JsonlLog::create(out.join("sweep.jsonl"))?;
    let mut log_err = None;
    let rows = gamma_sweep(gammas, &setup, &exp.candidate, &data.train, &data.val, &data.test, &mut |g, r| {
        if let Err(e) = log.write(r, Some(g)) {
            log_err.get_or_insert(e);
        }
    });
    log.finish()?;
    if let Some(e) = log_err {
        return Err(e);
    }
    for row in &rows {
        if let Some(s) = &row.subset {
            SubsetReport::new(&exp.layout, &exp.candidate, s).save(out.join(format!("subset_gamma_{}.toml", row.gamma)))?;
        }
    }
    let table: Vec<SweepCsvRow> = rows.iter().map(|r| SweepCsvRow::new(r, &exp.layout)).collect();
    write_sweep_csv(out.join("sweep.csv"), &table)?;
    write_text(&out.join("sweep_summary.txt"), &sweep_summary(&table))?;
    if let Some(first) = rows.iter().find(|r| r.error.is_some()).filter(|_| rows.iter().all(|r| r.error.is_some())) {
        return Err(Error::Data(format!("every sweep run failed; first error: {}", first.error.as_deref().unwrap_or(""))));
    }
    Ok(table)
}

/// Derives the static subset from a trained selector and renders it.
pub fn cmd_select(exp: &Experiment, checkpoint: &Path, threshold: Option<f64>, split: SplitName, out: &Path) -> Result<SubsetReport> {
    create_dir(out)?;
    let ck = load_checkpoint(checkpoint)?;
    if ck.extractor.selector().is_none() {
        return Err(Error::Config("checkpoint has no selector".into()));
    }
    if ck.candidate.layout_id() != exp.layout.id() {
        return Err(Error::Config(format!("checkpoint uses layout {:?}, config layout is {:?}", ck.candidate.layout_id(), exp.layout.id())));
    }
    let candidate = CandidateSet::new(ck.candidate.indices().to_vec(), exp.layout.id(), exp.layout.len())?;
    let data = exp.datasets(&candidate)?;
    let segments = [data.get(split), &data.val, &data.train].into_iter().find(|s| !s.is_empty()).unwrap_or(&[]);
    let subset = finalize_subset(&ck.extractor.selections(segments)?, &candidate, threshold.unwrap_or(exp.cfg.threshold))?;
    let report = SubsetReport::new(&exp.layout, &candidate, &subset);
    report.save(out.join("subset.toml"))?;
    emit_topomap(&exp.layout, &subset.subset, &candidate, out.join("topomap.svg"))?;
    Ok(report)
}

/// Renders the candidate set, with the channels of a subset report filled
/// (every candidate when none is given).
pub fn cmd_topomap(exp: &Experiment, subset: Option<&Path>, out: &Path) -> Result<PathBuf> {
    create_dir(out)?;
    let selected = match subset {
        Some(p) => {
            let r = SubsetReport::load(p)?;
            if r.layout_id != exp.layout.id() {
                return Err(Error::Config(format!("subset uses layout {:?}, config layout is {:?}", r.layout_id, exp.layout.id())));
            }
            CandidateSet::new(r.selected_indices, exp.layout.id(), exp.layout.len())?
        }
        None => exp.candidate.clone(),
    };
    let svg = out.join("topomap.svg");
    emit_topomap(&exp.layout, &selected, &exp.candidate, &svg)?;
    Ok(svg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub target: String,
    pub probes: usize,
    pub max_rel_err: f64,
    pub tol: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckFile {
    pub seed: u64,
    pub checks: Vec<GradCheckEntry>,
}

/// Tolerance used for each gradient check.
pub const GRADCHECK_TOLERANCES: [(GradCheckTarget, f64); 6] = [
    (GradCheckTarget::Discretization, 1e-6),
    (GradCheckTarget::Cardinality, 1e-6),
    (GradCheckTarget::SiSdr, 1e-4),
    (GradCheckTarget::SeAttention, 1e-3),
    (GradCheckTarget::WdBlock, 1e-3),
    (GradCheckTarget::TinyForward, 1e-3),
];

/// Runs every gradient check, writes `gradcheck.toml` and fails when any
/// check exceeds its tolerance.
pub fn cmd_gradcheck(probes: usize, seed: u64, out: &Path) -> Result<GradCheckFile> {
    create_dir(out)?;
    let checks: Vec<GradCheckEntry> = GRADCHECK_TOLERANCES
        .iter()
        .map(|&(target, tol)| {
            let r = grad_check(target, probes, tol, seed);
            GradCheckEntry { target: format!("{target:?}"), probes: r.probes, max_rel_err: r.max_rel_err, tol, passed: r.passed }
        })
        .collect();
    let file = GradCheckFile { seed, checks };
    write_toml(&out.join("gradcheck.toml"), &file)?;
    if let Some(bad) = file.checks.iter().find(|c| !c.passed) {
        return Err(Error::Numerical(format!("{} gradient error {:.3e} exceeds {:.0e}", bad.target, bad.max_rel_err, bad.tol)));
    }
    Ok(file)
}
