use std::path::{Path, PathBuf};
use std::process::ExitCode;

use brainsep::commands::{
    cmd_eval, cmd_gradcheck, cmd_select, cmd_sweep, cmd_synth, cmd_topomap, cmd_train, EvalTarget, Experiment, SynthCounts,
};
use brainsep::config::{DataSource, ExperimentConfig};
use brainsep::dataset::SplitName;
use brainsep::{Error, Result};
use brainsep_core::dataio::SynthSpec;
use clap::{Args, Parser, Subcommand, ValueEnum};

/// EEG-assisted target speaker extraction with geometry-constrained
/// channel selection.
#[derive(Parser)]
#[command(name = "brainsep", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config file (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides `out_dir` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with planted informative EEG channels.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Number of unlabelled trials; by default the split sizes of a
        /// synthetic config are used.
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Train a model (and selector, when configured).
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Score a split and write a per-segment table.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: SplitName,
        /// What to score: the model output, the unprocessed mixture, or the
        /// reference itself.
        #[arg(long, value_enum, default_value_t = Target::Model)]
        estimate: Target,
    },
    /// Train one model per sparsity weight and tabulate the subsets.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated weights; defaults to the config's list.
        #[arg(long, value_delimiter = ',')]
        gammas: Option<Vec<f64>>,
    },
    /// Derive the static channel subset from a trained selector.
    Select {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long, default_value = "val")]
        split: SplitName,
    },
    /// Compare analytic gradients with finite differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 30)]
        probes: usize,
    },
    /// Draw the candidate set and, optionally, a selected subset.
    Topomap {
        #[command(flatten)]
        common: Common,
        /// Subset report written by `select`.
        #[arg(long)]
        subset: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Target {
    Model,
    Mixture,
    Reference,
}

fn load_config(common: &Common) -> Result<Option<ExperimentConfig>> {
    common.config.as_ref().map(ExperimentConfig::load).transpose()
}

fn out_dir(common: &Common, cfg: Option<&ExperimentConfig>) -> Result<PathBuf> {
    common
        .out
        .clone()
        .or_else(|| cfg.and_then(|c| c.out_dir.clone()))
        .ok_or_else(|| Error::Config("no output directory: pass --out or set out_dir".into()))
}

fn experiment(common: &Common) -> Result<(Experiment, PathBuf)> {
    let cfg = load_config(common)?.ok_or_else(|| Error::Config("this command needs --config".into()))?;
    let out = out_dir(common, Some(&cfg))?;
    Ok((Experiment::new(cfg, common.seed)?, out))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { common, trials } => {
            let cfg = load_config(&common)?;
            let out = out_dir(&common, cfg.as_ref())?;
            let seed = common.seed.or(cfg.as_ref().map(|c| c.data_seed())).unwrap_or(0);
            let (spec, counts) = match (cfg.map(|c| c.data), trials) {
                (Some(DataSource::Synthetic { spec, n_train, n_val, n_test, .. }), None) => {
                    (spec, SynthCounts::Split { train: n_train, val: n_val, test: n_test })
                }
                (Some(DataSource::Synthetic { spec, .. }), Some(n)) => (spec, SynthCounts::Unlabelled(n)),
                (None, Some(n)) => (SynthSpec::default(), SynthCounts::Unlabelled(n)),
                (None, None) => return Err(Error::Config("pass --trials or a synthetic config".into())),
                (Some(DataSource::Manifest { .. }), _) => {
                    return Err(Error::Config("synth needs a synthetic data source".into()))
                }
            };
            let m = cmd_synth(&spec, counts, seed, &out)?;
            println!("wrote {} trials to {}", m.trials.len(), out.display());
        }
        Command::Train { common } => {
            let (exp, out) = experiment(&common)?;
            let r = cmd_train(&exp, &out)?;
            match r.best_val_si_sdr {
                Some(v) => println!("trained {} steps; best validation SI-SDR {v:.2} dB", r.steps),
                None => println!("trained {} steps", r.steps),
            }
        }
        Command::Eval { common, checkpoint, split, estimate } => {
            let (exp, out) = experiment(&common)?;
            let target = match estimate {
                Target::Model => EvalTarget::Model,
                Target::Mixture => EvalTarget::Mixture,
                Target::Reference => EvalTarget::Reference,
            };
            let s = cmd_eval(&exp, checkpoint.as_deref(), split, target, &out)?;
            println!(
                "{} segments: SI-SDR {:.2} dB, input {:.2} dB, improvement {:.2} dB",
                s.segments, s.mean_si_sdr, s.mean_input_si_sdr, s.improvement
            );
        }
        Command::Sweep { common, gammas } => {
            let (exp, out) = experiment(&common)?;
            let gammas = gammas.unwrap_or_else(|| exp.cfg.sweep.gammas.clone());
            let rows = cmd_sweep(&exp, &gammas, &out)?;
            print!("{}", brainsep::report::sweep_summary(&rows));
        }
        Command::Select { common, checkpoint, threshold, split } => {
            let (exp, out) = experiment(&common)?;
            let r = cmd_select(&exp, &checkpoint, threshold, split, &out)?;
            println!("selected {} of {} channels: {}", r.selected.len(), r.candidate_size, r.selected.join(" "));
        }
        Command::Gradcheck { common, probes } => {
            let cfg = load_config(&common)?;
            let out = out_dir(&common, cfg.as_ref())?;
            let seed = common.seed.or(cfg.map(|c| c.seed)).unwrap_or(0);
            let r = cmd_gradcheck(probes, seed, &out);
            if let Ok(f) = &r {
                for c in &f.checks {
                    println!("{:<15} max rel. error {:.3e} (tol {:.0e})", c.target, c.max_rel_err, c.tol);
                }
            }
            r?;
        }
        Command::Topomap { common, subset } => {
            let (exp, out) = experiment(&common)?;
            let svg = cmd_topomap(&exp, subset.as_deref(), &out)?;
            println!("wrote {}", svg.display());
        }
    }
    Ok(())
}

fn error_record(e: &Error) -> String {
    let kind = e.kind();
    serde_json::json!({ "error": { "kind": kind.name(), "exit_code": kind.exit_code(), "message": e.to_string() } }).to_string()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let out = match &cli.command {
        Command::Synth { common, .. }
        | Command::Train { common }
        | Command::Eval { common, .. }
        | Command::Sweep { common, .. }
        | Command::Select { common, .. }
        | Command::Gradcheck { common, .. }
        | Command::Topomap { common, .. } => common.out.clone(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let record = error_record(&e);
            eprintln!("{record}");
            if let Some(dir) = out.as_deref().filter(|d| Path::new(d).is_dir()) {
                let _ = std::fs::write(dir.join("error.json"), format!("{record}\n"));
            }
            ExitCode::from(e.kind().exit_code() as u8)
        }
    }
}
