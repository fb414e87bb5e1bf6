#![allow(dead_code)]

use std::path::Path;

use brainsep::config::{DataSource, ExperimentConfig, SweepConfig};
use brainsep_core::dataio::SynthSpec;
use brainsep_core::model::ModelConfig;
use brainsep_core::selection::SelectorConfig;
use brainsep_core::training::TrainConfig;

/// Short, low-rate generated data matched to a tiny model.
pub fn small_spec(n_channels: usize) -> SynthSpec {
    SynthSpec {
        n_channels,
        informative: vec![0, 1],
        duration_s: 2.0,
        audio_rate_hz: 1000.0,
        eeg_rate_hz: 32.0,
        band_hz: (50.0, 400.0),
        ..SynthSpec::default()
    }
}

pub fn small_config(n_channels: usize) -> ExperimentConfig {
    let model = ModelConfig { audio_rate_hz: 1000.0, eeg_rate_hz: 32.0, ..ModelConfig::tiny(n_channels) };
    ExperimentConfig {
        out_dir: None,
        seed: 3,
        layout: None,
        region: None,
        data: DataSource::Synthetic { spec: small_spec(n_channels), n_train: 2, n_val: 1, n_test: 1, seed: None },
        seg_len_s: 0.5,
        model,
        selector: Some(SelectorConfig { hidden_dim: 4, block_hidden_dim: 6, n_blocks: 1, ..SelectorConfig::default() }),
        train: TrainConfig { max_lr: 1e-2, epochs: 2, batch_size: 4, ..TrainConfig::default() },
        threshold: 0.5,
        sweep: SweepConfig { gammas: vec![0.0, 0.3, 0.6], finetune_epochs: 0 },
        metrics: Vec::new(),
    }
}

pub fn write_config(dir: &Path, cfg: &ExperimentConfig) -> std::path::PathBuf {
    let p = dir.join("experiment.toml");
    std::fs::write(&p, cfg.to_toml()).unwrap();
    p
}
