//! Trial directories and the dataset manifest.
//!
//! A dataset is a directory holding `manifest.toml` and one directory per
//! trial with `mixture.wav`, `target.wav`, optionally `interferer.wav`, and
//! `eeg.bin`.

use std::fs;
use std::path::{Path, PathBuf};

use brainsep_core::dataio::{segment, EegPreprocess, EegTrial, IdentityFeature, PairedTrial, Segment, SegmentMeta, Waveform};
use brainsep_core::geometry::ElectrodeLayout;
use brainsep_core::training::{split_dataset, SplitSpec, TrialRecord};
use serde::{Deserialize, Serialize};

use crate::audio::{read_wav, write_wav, PcmFormat};
use crate::eeg::{read_eeg, write_eeg, EegMatrix};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.toml";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for SplitName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(SplitName::Train),
            "val" => Ok(SplitName::Val),
            "test" => Ok(SplitName::Test),
            other => Err(format!("unknown split {other:?}, expected train, val or test")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub subject: String,
    pub trial: String,
    /// Trial directory relative to the manifest.
    pub dir: PathBuf,
    #[serde(default)]
    pub excluded: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitName>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub layout_id: String,
    #[serde(default)]
    pub trials: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Parse { path: path.to_path_buf(), line: 0, message: e.to_string() })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = toml::to_string(self).map_err(|e| Error::Data(e.to_string()))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Trials per split: the recorded membership when every usable trial
    /// carries one, otherwise a per-subject random split.
    pub fn split(&self, spec: &SplitSpec) -> Result<[Vec<&ManifestEntry>; 3]> {
        let usable: Vec<&ManifestEntry> = self.trials.iter().filter(|t| !t.excluded).collect();
        let mut out: [Vec<&ManifestEntry>; 3] = Default::default();
        if !usable.is_empty() && usable.iter().all(|t| t.split.is_some()) {
            for t in usable {
                out[t.split.expect("checked above") as usize].push(t);
            }
            return Ok(out);
        }
        let records: Vec<TrialRecord> = self
            .trials
            .iter()
            .map(|t| TrialRecord { subject: t.subject.clone(), trial: t.trial.clone(), excluded: t.excluded })
            .collect();
        let split = split_dataset(&records, spec)?;
        let find = |r: &TrialRecord| {
            self.trials.iter().find(|t| t.subject == r.subject && t.trial == r.trial).expect("record comes from manifest")
        };
        for (i, part) in [&split.train, &split.val, &split.test].into_iter().enumerate() {
            out[i] = part.iter().map(find).collect();
        }
        Ok(out)
    }
}

/// Audio and EEG of one trial on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct TrialFiles {
    pub mixture: Waveform,
    pub target: Waveform,
    pub interferer: Option<Waveform>,
    pub eeg: EegMatrix,
}

pub fn write_trial(dir: impl AsRef<Path>, trial: &TrialFiles) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_wav(dir.join("mixture.wav"), &trial.mixture, PcmFormat::Float32)?;
    write_wav(dir.join("target.wav"), &trial.target, PcmFormat::Float32)?;
    if let Some(i) = &trial.interferer {
        write_wav(dir.join("interferer.wav"), i, PcmFormat::Float32)?;
    }
    write_eeg(dir.join("eeg.bin"), &trial.eeg)
}

pub fn read_trial(dir: impl AsRef<Path>) -> Result<TrialFiles> {
    let dir = dir.as_ref();
    let interferer_path = dir.join("interferer.wav");
    Ok(TrialFiles {
        mixture: read_wav(dir.join("mixture.wav"))?,
        target: read_wav(dir.join("target.wav"))?,
        interferer: if interferer_path.exists() { Some(read_wav(interferer_path)?) } else { None },
        eeg: read_eeg(dir.join("eeg.bin"))?,
    })
}

/// How trials are turned into model inputs.
pub struct Loader<'a> {
    pub layout: &'a ElectrodeLayout,
    pub preprocess: Option<&'a EegPreprocess>,
    /// Layout rows kept after preprocessing (the candidate set).
    pub rows: &'a [usize],
    pub seg_len_s: f64,
}

impl Loader<'_> {
    pub fn load(&self, root: &Path, entry: &ManifestEntry) -> Result<Vec<Segment>> {
        let files = read_trial(root.join(&entry.dir))?;
        if files.eeg.data.rows() != self.layout.len() {
            return Err(Error::Data(format!(
                "trial {}/{}: EEG has {} channels, layout {} has {}",
                entry.subject,
                entry.trial,
                files.eeg.data.rows(),
                self.layout.id(),
                self.layout.len()
            )));
        }
        let mut eeg = EegTrial::new(files.eeg.data, files.eeg.rate_hz, self.layout.id())?;
        if let Some(p) = self.preprocess {
            eeg = p.apply(&eeg, self.layout, &IdentityFeature)?;
        }
        let paired = PairedTrial {
            mixture: files.mixture,
            target: files.target,
            eeg_rate_hz: eeg.rate_hz(),
            eeg: eeg.into_data().select_rows(self.rows),
            meta: SegmentMeta { subject: entry.subject.clone(), trial: entry.trial.clone(), index: 0 },
        };
        Ok(segment(&paired, self.seg_len_s)?)
    }

    pub fn load_all(&self, root: &Path, entries: &[&ManifestEntry]) -> Result<Vec<Segment>> {
        let mut out = Vec::new();
        for e in entries {
            out.extend(self.load(root, e)?);
        }
        Ok(out)
    }
}
