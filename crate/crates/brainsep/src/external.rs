//! Metrics computed by an external program.
//!
//! The estimate and reference are written as 32-bit float WAV files into a
//! scratch directory and the program is run with `{estimate}`,
//! `{reference}` and `{rate}` substituted in its arguments. The last
//! non-empty line of its standard output must be the score.

use std::path::PathBuf;
use std::process::Command;
use std::sync::atomic::{AtomicUsize, Ordering};

use brainsep_core::dataio::Waveform;
use brainsep_core::objectives::Evaluator;

use crate::audio::{write_wav, PcmFormat};
use crate::config::ExternalMetric;

pub struct ExternalEvaluator {
    spec: ExternalMetric,
    scratch: PathBuf,
    counter: AtomicUsize,
}

impl ExternalEvaluator {
    /// `scratch` must exist; files are created there and removed after
    /// each call.
    pub fn new(spec: ExternalMetric, scratch: impl Into<PathBuf>) -> Self {
        Self { spec, scratch: scratch.into(), counter: AtomicUsize::new(0) }
    }

    fn run(&self, estimate: &[f64], reference: &[f64], rate_hz: f64) -> Result<f64, String> {
        let k = self.counter.fetch_add(1, Ordering::Relaxed);
        let est_path = self.scratch.join(format!("{}-{k}-estimate.wav", self.spec.name));
        let ref_path = self.scratch.join(format!("{}-{k}-reference.wav", self.spec.name));
        let wave = |x: &[f64]| Waveform::new(x.to_vec(), rate_hz).map_err(|e| e.to_string());
        write_wav(&est_path, &wave(estimate)?, PcmFormat::Float32).map_err(|e| e.to_string())?;
        write_wav(&ref_path, &wave(reference)?, PcmFormat::Float32).map_err(|e| e.to_string())?;
        let args: Vec<String> = self
            .spec
            .args
            .iter()
            .map(|a| {
                a.replace("{estimate}", &est_path.to_string_lossy())
                    .replace("{reference}", &ref_path.to_string_lossy())
                    .replace("{rate}", &rate_hz.to_string())
            })
            .collect();
        let output = Command::new(&self.spec.program).args(&args).output();
        let _ = std::fs::remove_file(&est_path);
        let _ = std::fs::remove_file(&ref_path);
        let output = output.map_err(|e| format!("cannot run {}: {e}", self.spec.program.display()))?;
        if !output.status.success() {
            let stderr = String::from_utf8_lossy(&output.stderr);
            return Err(format!("{} exited with {}: {}", self.spec.program.display(), output.status, stderr.trim()));
        }
        let stdout = String::from_utf8_lossy(&output.stdout);
        let last = stdout.lines().map(str::trim).filter(|l| !l.is_empty()).last().ok_or("no output")?;
        let v: f64 = last.parse().map_err(|_| format!("cannot parse score from {last:?}"))?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(format!("non-finite score {v}"))
        }
    }
}

impl Evaluator for ExternalEvaluator {
    fn name(&self) -> &str {
        &self.spec.name
    }

    fn evaluate(&self, estimate: &[f64], reference: &[f64], rate_hz: f64) -> Result<f64, String> {
        self.run(estimate, reference, rate_hz)
    }
}
