//! File formats, experiment configuration and commands for EEG-assisted
//! target speaker extraction built on `brainsep-core`.

pub mod audio;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod eeg;
pub mod error;
pub mod external;
pub mod layout;
pub mod report;
pub mod topomap;

pub use error::{Error, ErrorKind, Result};
