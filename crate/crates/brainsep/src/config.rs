//! Experiment configuration files (TOML).

use std::fs;
use std::path::{Path, PathBuf};

use brainsep_core::dataio::{synth_layout, EegPreprocess, SynthSpec};
use brainsep_core::geometry::{hard_select, CandidateSet, ElectrodeLayout, RegionSpec};
use brainsep_core::model::ModelConfig;
use brainsep_core::selection::SelectorConfig;
use brainsep_core::training::{SplitSpec, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::load_layout;

/// Where training data comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum DataSource {
    /// Generated in memory; trial `k` uses seed `seed + k`, the first
    /// `n_train` trials train, the next `n_val` validate, the rest test.
    Synthetic {
        #[serde(default)]
        spec: SynthSpec,
        n_train: usize,
        n_val: usize,
        n_test: usize,
        /// Defaults to the experiment seed.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
    /// A dataset directory described by a manifest.
    Manifest {
        path: PathBuf,
        #[serde(default)]
        split: SplitSpec,
        /// Applied to the EEG on load; omit for data that is already
        /// preprocessed.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        preprocess: Option<EegPreprocess>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub gammas: Vec<f64>,
    pub finetune_epochs: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { gammas: vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6], finetune_epochs: 0 }
    }
}

/// An extra metric computed by an external program.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExternalMetric {
    pub name: String,
    pub program: PathBuf,
    /// `{estimate}`, `{reference}` and `{rate}` are substituted.
    #[serde(default)]
    pub args: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    /// Layout file; generated data uses its own ring layout when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layout: Option<PathBuf>,
    /// Hard pre-selection; every channel is a candidate when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<RegionSpec>,
    pub data: DataSource,
    #[serde(default = "default_seg_len")]
    pub seg_len_s: f64,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selector: Option<SelectorConfig>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub metrics: Vec<ExternalMetric>,
}

fn default_seg_len() -> f64 {
    2.0
}

fn default_threshold() -> f64 {
    0.5
}

impl ExperimentConfig {
    /// Parses a config file. Relative paths inside it are resolved against
    /// the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = cfg.layout.as_mut() {
            resolve(p);
        }
        if let DataSource::Manifest { path, .. } = &mut cfg.data {
            resolve(path);
        }
        for m in &mut cfg.metrics {
            if m.program.components().count() > 1 {
                resolve(&mut m.program);
            }
        }
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Checks values and that referenced files exist.
    pub fn validate(&self) -> Result<()> {
        if !self.train.weights.is_valid() {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if self.sweep.gammas.iter().any(|g| !(g.is_finite() && *g >= 0.0)) {
            return Err(Error::Config("sweep gammas must be finite and non-negative".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("threshold must lie in (0, 1), got {}", self.threshold)));
        }
        if !(self.seg_len_s > 0.0 && self.seg_len_s.is_finite()) {
            return Err(Error::Config("seg_len_s must be positive".into()));
        }
        self.train.validate()?;
        if let Some(p) = &self.layout {
            if !p.is_file() {
                return Err(Error::Config(format!("layout file {} does not exist", p.display())));
            }
        }
        match &self.data {
            DataSource::Synthetic { spec, n_train, .. } => {
                spec.validate()?;
                if *n_train == 0 {
                    return Err(Error::Config("n_train must be at least 1".into()));
                }
            }
            DataSource::Manifest { path, .. } => {
                if !path.is_file() {
                    return Err(Error::Config(format!("manifest {} does not exist", path.display())));
                }
            }
        }
        for m in &self.metrics {
            if m.name.is_empty() {
                return Err(Error::Config("external metric needs a name".into()));
            }
        }
        Ok(())
    }

    pub fn data_seed(&self) -> u64 {
        match &self.data {
            DataSource::Synthetic { seed, .. } => seed.unwrap_or(self.seed),
            DataSource::Manifest { .. } => self.seed,
        }
    }

    pub fn resolve_layout(&self) -> Result<ElectrodeLayout> {
        match (&self.layout, &self.data) {
            (Some(p), _) => load_layout(p),
            (None, DataSource::Synthetic { spec, .. }) => Ok(synth_layout(spec.n_channels)),
            (None, DataSource::Manifest { .. }) => Err(Error::Config("manifest data needs a layout file".into())),
        }
    }

    pub fn candidate(&self, layout: &ElectrodeLayout) -> Result<CandidateSet> {
        Ok(match &self.region {
            Some(r) => hard_select(layout, r)?,
            None => CandidateSet::full(layout)?,
        })
    }

    /// The model config with its EEG input width set to the candidate size.
    pub fn model_for(&self, candidate: &CandidateSet) -> Result<ModelConfig> {
        let m = ModelConfig { eeg_in_channels: candidate.len(), ..self.model.clone() };
        m.validate()?;
        Ok(m)
    }
}
