//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any fails.

use std::process::ExitCode;
use std::time::Instant;

use brainsep::layout::{default_layout, headphone_30};
use brainsep_core::dataio::{synth_segments, SynthSpec};
use brainsep_core::geometry::{hard_select, CandidateSet};
use brainsep_core::graph::Graph;
use brainsep_core::model::{param_count, ModelConfig, WdBlock, WdTcn};
use brainsep_core::objectives::{si_sdr, si_sdr_with, SiSdrOptions};
use brainsep_core::params::ParamStore;
use brainsep_core::selection::{
    discretization_loss, finalize_subset, ConvRs, RegularizerConfig, SelectedSubset, SelectorConfig,
};
use brainsep_core::tensor::Tensor;
use brainsep_core::training::{
    gamma_sweep, grad_check, lr_at, mixture_si_sdr, train, Extractor, GradCheckTarget, SweepRow, SweepSetup,
    TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()
}

fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::from_vec(r, c, rand_vec(rng, r * c))
}

fn loss_constants() -> Outcome {
    let reg = RegularizerConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst_binary = 0.0f64;
    for n in [1, 4, 12, 30] {
        let bits: Vec<f64> = (0..3 * n).map(|_| if rng.random::<bool>() { 1.0 } else { 0.0 }).collect();
        worst_binary = worst_binary.max(discretization_loss(&Tensor::from_vec(3, n, bits), &reg, n as f64).abs());
    }
    let half = discretization_loss(&Tensor::full(2, 12, 0.5), &reg, 12.0);
    outcome(worst_binary <= 1e-9 && (half - 25.0).abs() <= 1e-9, format!("binary {worst_binary:.1e}, all-0.5 {half}"))
}

fn scale_invariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let s = rand_vec(&mut rng, 400);
        let e = rand_vec(&mut rng, 400);
        let base = si_sdr(&e, &s).unwrap();
        for a in [0.1, 3.0, 100.0] {
            let scaled: Vec<f64> = e.iter().map(|v| a * v).collect();
            worst = worst.max((si_sdr(&scaled, &s).unwrap() - base).abs());
        }
    }
    outcome(worst < 1e-6, format!("max deviation {worst:.2e} dB"))
}

fn hand_oracle() -> Outcome {
    let v = si_sdr_with(&[1.0, 1.0], &[1.0, 0.0], SiSdrOptions::default()).unwrap();
    outcome(v == 0.0, format!("{v} dB"))
}

fn gradient_suite() -> Outcome {
    let checks = [
        (GradCheckTarget::Discretization, 1e-6),
        (GradCheckTarget::Cardinality, 1e-6),
        (GradCheckTarget::SiSdr, 1e-4),
        (GradCheckTarget::SeAttention, 1e-3),
        (GradCheckTarget::WdBlock, 1e-3),
        (GradCheckTarget::TinyForward, 1e-3),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (target, tol) in checks {
        let r = grad_check(target, 30, tol, 11);
        pass &= r.passed && r.max_rel_err < tol;
        parts.push(format!("{target:?} {:.1e}", r.max_rel_err));
    }
    outcome(pass, parts.join(", "))
}

fn degeneracy() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut mismatches = 0;
    for k in 0..20 {
        let mut store = ParamStore::new();
        let block = WdBlock::new(&mut store, "b", 8, 12, 3, &[1 << (k % 4)], 4, &mut rng);
        let standard = block.as_standard().unwrap();
        let x = rand_tensor(&mut rng, 8, 40 + k);
        let mut g = Graph::new(&store);
        let xv = g.constant(x);
        let y = block.forward(&mut g, xv);
        let z = standard.forward(&mut g, xv);
        if g.value(y) != g.value(z) {
            mismatches += 1;
        }
    }
    outcome(mismatches == 0, format!("{mismatches}/20 inputs differ"))
}

fn shape_length() -> Outcome {
    let cfg = ModelConfig::default();
    let (model, store) = WdTcn::init(&cfg, 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut bad = Vec::new();
    for len in [1600, 2000, 4096, 16000] {
        let x = rand_vec(&mut rng, len);
        let e = rand_tensor(&mut rng, cfg.eeg_in_channels, cfg.eeg_len_for(len));
        let mut g = Graph::new(&store);
        let (xv, ev) = (g.constant(Tensor::row_vector(&x)), g.constant(e));
        let out = model.forward_graph(&mut g, xv, ev).unwrap();
        let m = g.value(out.mask);
        let out_len = g.value(out.estimate).cols();
        if out_len != len || m.min() < 0.0 || m.max() > 1.0 {
            bad.push(format!("T={len}: len {out_len}, mask [{}, {}]", m.min(), m.max()));
        }
    }
    outcome(bad.is_empty(), if bad.is_empty() { "T in {1600, 2000, 4096, 16000}".into() } else { bad.join("; ") })
}

fn overfit() -> Outcome {
    let spec = SynthSpec { duration_s: 1.0, ..SynthSpec::default() };
    let data = synth_segments(&spec, 700, 8, 1.0).unwrap();
    let mut ex = Extractor::new(&ModelConfig::desk(12), None, 7).unwrap();
    let cfg = TrainConfig { max_lr: 3e-2, epochs: 300, max_steps: Some(300), batch_size: 8, seed: 7, ..TrainConfig::default() };
    let summary = train(&mut ex, &data, &[], &cfg, &mut |_| {}).unwrap();
    let opts = cfg.si_sdr;
    let before = mixture_si_sdr(&data, opts).unwrap();
    let after = ex.mean_si_sdr(&data, opts).unwrap();
    let gain = after - before;
    outcome(summary.steps <= 300 && gain >= 10.0, format!("{} steps, {before:.2} -> {after:.2} dB (+{gain:.2})", summary.steps))
}

/// Every subset produced anywhere in this run, with its candidate set.
#[derive(Default)]
struct SubsetLog(Vec<(CandidateSet, CandidateSet)>);

impl SubsetLog {
    fn record(&mut self, candidate: &CandidateSet, s: &SelectedSubset) {
        self.0.push((candidate.clone(), s.subset.clone()));
    }
}

fn headphone_selections(log: &mut SubsetLog) {
    let layout = default_layout();
    let candidate = hard_select(&layout, &headphone_30()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let cfg = SelectorConfig::default();
    for seed in 0..5 {
        let (sel, store) = ConvRs::init(&cfg, candidate.len(), seed).unwrap();
        let sels: Vec<_> = (0..4).map(|_| sel.select(&store, &rand_tensor(&mut rng, candidate.len(), 64)).unwrap()).collect();
        for t in [0.01, 0.3, 0.5, 0.7, 0.99] {
            log.record(&candidate, &finalize_subset(&sels, &candidate, t).unwrap());
        }
    }
}

fn geometry_invariant(log: &SubsetLog) -> Outcome {
    let violations = log.0.iter().filter(|(c, s)| !s.is_subset_of(c)).count();
    outcome(log.0.len() > 0 && violations == 0, format!("{} subsets, {violations} violations", log.0.len()))
}

const INFORMATIVE: [usize; 4] = [0, 1, 2, 3];
const SEEDS: [u64; 3] = [1, 2, 3];
const GAMMAS: [f64; 3] = [0.0, 0.3, 0.6];
/// γ whose runs are scored for channel recovery.
const RECOVERY_GAMMA: usize = 1;

fn selection_setup(seed: u64) -> SweepSetup {
    SweepSetup {
        model: ModelConfig::desk(12),
        selector: SelectorConfig::default(),
        train: TrainConfig {
            max_lr: 1e-2,
            epochs: 400,
            max_steps: Some(400),
            batch_size: 8,
            seed,
            val_every: usize::MAX,
            reg_warmup_ratio: 0.5,
            ..TrainConfig::default()
        },
        threshold: 0.5,
        finetune_epochs: 0,
        model_seed: seed,
    }
}

fn selection_runs(log: &mut SubsetLog) -> Vec<(u64, Vec<SweepRow>)> {
    let spec = SynthSpec { informative: INFORMATIVE.to_vec(), duration_s: 8.0, ..SynthSpec::default() };
    let candidate = CandidateSet::new((0..12).collect(), "synthetic", 12).unwrap();
    SEEDS
        .iter()
        .map(|&seed| {
            let train_set = synth_segments(&spec, seed * 100, 8, 1.0).unwrap();
            let val_set = synth_segments(&spec, seed * 100 + 50, 2, 1.0).unwrap();
            let rows = gamma_sweep(&GAMMAS, &selection_setup(seed), &candidate, &train_set, &val_set, &[], &mut |_, _| {});
            for r in &rows {
                if let Some(s) = &r.subset {
                    log.record(&candidate, s);
                }
            }
            (seed, rows)
        })
        .collect()
}

/// Informative channels are in the top 6 when each one has at most 5
/// other channels with a mean at least as high.
fn recovery(mean: &[f64], positions: &[usize]) -> (bool, f64) {
    let top6 = INFORMATIVE.iter().all(|&c| mean.iter().enumerate().filter(|&(j, &m)| j != c && m >= mean[c]).count() <= 5);
    let hits = INFORMATIVE.iter().filter(|c| positions.contains(c)).count();
    (top6, hits as f64 / INFORMATIVE.len() as f64)
}

fn channel_recovery(runs: &[(u64, Vec<SweepRow>)]) -> Outcome {
    let mut ok = 0;
    let mut parts = Vec::new();
    for (seed, rows) in runs {
        match &rows[RECOVERY_GAMMA].subset {
            Some(s) => {
                let (top6, recall) = recovery(&s.mean, &s.positions);
                ok += usize::from(top6 && recall >= 0.75);
                parts.push(format!("seed {seed}: top6 {top6}, recall {recall:.2}, S={:?}", s.positions));
            }
            None => parts.push(format!("seed {seed}: {}", rows[RECOVERY_GAMMA].error.as_deref().unwrap_or("no subset"))),
        }
    }
    outcome(ok >= 2, format!("{ok}/3 seeds at gamma {}; {}", GAMMAS[RECOVERY_GAMMA], parts.join("; ")))
}

fn sparsity_trend(runs: &[(u64, Vec<SweepRow>)]) -> Outcome {
    let mut ok = 0;
    let mut parts = Vec::new();
    for (seed, rows) in runs {
        let sizes: Vec<Option<usize>> = rows.iter().map(SweepRow::subset_size).collect();
        let monotone = sizes.iter().all(Option::is_some) && sizes.windows(2).all(|w| w[1] <= w[0]);
        ok += usize::from(monotone);
        parts.push(format!("seed {seed}: {sizes:?}"));
    }
    outcome(ok >= 2, format!("{ok}/3 seeds non-increasing; {}", parts.join("; ")))
}

fn calibration() -> Outcome {
    let n = param_count(&ModelConfig::default()).unwrap();
    outcome((620_000..=760_000).contains(&n), format!("{n} parameters"))
}

fn schedule() -> Outcome {
    let cfg = TrainConfig::default();
    let total = 1000;
    let warm = (cfg.warmup_ratio * total as f64) as usize;
    let mid = warm + (total - warm) / 2;
    let at_warm = lr_at(warm, total, &cfg);
    let at_mid = lr_at(mid, total, &cfg);
    let at_end = lr_at(total, total, &cfg);
    // The warm-up piece is linear, so one step of extrapolation gives its
    // limit at the boundary; the cosine piece starts at the boundary.
    let left = 2.0 * lr_at(warm - 1, total, &cfg) - lr_at(warm - 2, total, &cfg);
    let gap = (left - at_warm).abs();
    let tol = 1e-12 * cfg.max_lr;
    let pass = (at_warm - 1e-4).abs() < tol && (at_mid - 5e-5).abs() < tol && at_end == 0.0 && gap < tol;
    outcome(pass, format!("warm-up end {at_warm:e}, midpoint {at_mid:e}, end {at_end:e}, boundary gap {gap:.1e}"))
}

fn main() -> ExitCode {
    let start = Instant::now();
    let mut log = SubsetLog::default();
    let mut results: Vec<(usize, &str, Outcome, f64)> = Vec::new();
    let mut run = |id: usize, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let o = f();
        let secs = t.elapsed().as_secs_f64();
        println!("{} {id:>2} {name}: {} ({secs:.1}s)", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((id, name, o, secs));
    };
    run(1, "loss constants", &mut loss_constants);
    run(2, "SI-SDR scale invariance", &mut scale_invariance);
    run(3, "SI-SDR hand oracle", &mut hand_oracle);
    run(4, "gradient suite", &mut gradient_suite);
    run(5, "single-dilation degeneracy", &mut degeneracy);
    run(6, "shape and length", &mut shape_length);
    run(7, "overfit sanity", &mut overfit);
    let t = Instant::now();
    let runs = selection_runs(&mut log);
    println!("     selection runs: {:.1}s", t.elapsed().as_secs_f64());
    headphone_selections(&mut log);
    run(8, "geometry invariant", &mut || geometry_invariant(&log));
    run(9, "oracle channel recovery", &mut || channel_recovery(&runs));
    run(10, "sparsity trend", &mut || sparsity_trend(&runs));
    run(11, "parameter calibration", &mut calibration);
    run(12, "learning-rate schedule", &mut schedule);
    let failed = results.iter().filter(|r| !r.2.pass).count();
    println!("acceptance: {}/{} passed in {:.0}s", results.len() - failed, results.len(), start.elapsed().as_secs_f64());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
