//! Run outputs: JSON-lines training log, sweep table and subset report.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use brainsep_core::geometry::{CandidateSet, ElectrodeLayout};
use brainsep_core::selection::SelectedSubset;
use brainsep_core::training::{LogRecord, SweepRow};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Appends one JSON object per training step.
pub struct JsonlLog {
    out: BufWriter<File>,
    path: std::path::PathBuf,
}

impl JsonlLog {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self { out: BufWriter::new(f), path })
    }

    /// Writes `record`, tagged with `gamma` inside a sweep.
    pub fn write(&mut self, record: &LogRecord, gamma: Option<f64>) -> Result<()> {
        let mut v = serde_json::to_value(record).map_err(|e| Error::Data(e.to_string()))?;
        if let (Some(g), Some(obj)) = (gamma, v.as_object_mut()) {
            obj.insert("gamma".into(), g.into());
        }
        writeln!(self.out, "{v}").map_err(|e| Error::io(&self.path, e))
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub fn read_jsonl_log(path: impl AsRef<Path>) -> Result<Vec<LogRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Parse { path: path.to_path_buf(), line: i + 1, message: e.to_string() }))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelScore {
    pub label: String,
    pub index: usize,
    pub mean_selection: f64,
    pub selected: bool,
}

/// Channels kept by the selector, in layout terms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetReport {
    pub layout_id: String,
    pub threshold: f64,
    pub fallback: bool,
    pub candidate_size: usize,
    pub selected: Vec<String>,
    pub selected_indices: Vec<usize>,
    pub channels: Vec<ChannelScore>,
}

impl SubsetReport {
    pub fn new(layout: &ElectrodeLayout, candidate: &CandidateSet, subset: &SelectedSubset) -> Self {
        let channels = candidate
            .indices()
            .iter()
            .zip(&subset.mean)
            .map(|(&index, &mean_selection)| ChannelScore {
                label: layout.names()[index].clone(),
                index,
                mean_selection,
                selected: subset.subset.contains(index),
            })
            .collect();
        Self {
            layout_id: layout.id().to_string(),
            threshold: subset.threshold,
            fallback: subset.fallback,
            candidate_size: candidate.len(),
            selected: subset.subset.labels(layout).into_iter().map(str::to_string).collect(),
            selected_indices: subset.subset.indices().to_vec(),
            channels,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = toml::to_string(self).map_err(|e| Error::Data(e.to_string()))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Parse { path: path.to_path_buf(), line: 0, message: e.to_string() })
    }
}

/// One line of the sweep table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCsvRow {
    pub gamma: f64,
    pub subset_size: Option<usize>,
    pub soft_si_sdr: Option<f64>,
    pub hard_si_sdr: Option<f64>,
    /// Selected labels separated by `;`.
    pub selected: String,
    pub error: String,
}

impl SweepCsvRow {
    pub fn new(row: &SweepRow, layout: &ElectrodeLayout) -> Self {
        Self {
            gamma: row.gamma,
            subset_size: row.subset_size(),
            soft_si_sdr: row.soft_si_sdr,
            hard_si_sdr: row.hard_si_sdr,
            selected: row.subset.as_ref().map(|s| s.subset.labels(layout).join(";")).unwrap_or_default(),
            error: row.error.clone().unwrap_or_default(),
        }
    }
}

pub fn write_sweep_csv(path: impl AsRef<Path>, rows: &[SweepCsvRow]) -> Result<()> {
    let path = path.as_ref();
    let csv_err = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_sweep_csv(path: impl AsRef<Path>) -> Result<Vec<SweepCsvRow>> {
    let path = path.as_ref();
    let csv_err = |e: csv::Error| Error::Parse { path: path.to_path_buf(), line: 0, message: e.to_string() };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

/// Plain-text summary of a sweep.
pub fn sweep_summary(rows: &[SweepCsvRow]) -> String {
    let mut out = String::from("gamma  channels  soft SI-SDR  hard SI-SDR\n");
    for r in rows {
        let f = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.2} dB"));
        match (&r.error, r.subset_size) {
            (e, _) if !e.is_empty() => out.push_str(&format!("{:<6} failed: {e}\n", r.gamma)),
            (_, n) => out.push_str(&format!(
                "{:<6} {:<9} {:<12} {}\n",
                r.gamma,
                n.map_or("-".into(), |n| n.to_string()),
                f(r.soft_si_sdr),
                f(r.hard_si_sdr)
            )),
        }
    }
    out
}
