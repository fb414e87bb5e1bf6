//! SI-SDR, the combined training objective and pluggable evaluation metrics.

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use thiserror::Error;

use crate::graph::{Graph, SiSdrParts, Var};
use crate::selection::{cardinality_loss, discretization_loss, RegularizerConfig};
use crate::tensor::Tensor;

/// Guard added to both energies of the SI-SDR ratio.
pub const SI_SDR_EPS: f64 = 1e-12;

/// Name under which SI-SDR appears in metric maps.
pub const SI_SDR: &str = "si_sdr";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObjectiveError {
    #[error("estimate has {estimate} samples but the reference has {reference}")]
    LengthMismatch { estimate: usize, reference: usize },
    #[error("reference signal is identically zero")]
    ZeroReference,
    #[error("batch of {estimates} estimates, {references} references and {selections} selection rows")]
    BatchMismatch { estimates: usize, references: usize, selections: usize },
    #[error("empty batch")]
    EmptyBatch,
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct SiSdrOptions {
    pub eps: f64,
    /// Remove the means of both signals before projecting.
    pub center: bool,
}

impl Default for SiSdrOptions {
    fn default() -> Self {
        Self { eps: SI_SDR_EPS, center: false }
    }
}

/// `10·log10((‖x_t‖² + ε‖ŝ‖²)/(‖x_t − ŝ‖² + ε‖ŝ‖²))` with `x_t` the projection
/// of the estimate onto the reference. A perfect estimate caps near
/// `10·log10(1/ε)` and a silent one scores 0 dB.
pub fn si_sdr(estimate: &[f64], reference: &[f64]) -> Result<f64, ObjectiveError> {
    si_sdr_with(estimate, reference, SiSdrOptions::default())
}

pub fn si_sdr_with(estimate: &[f64], reference: &[f64], opts: SiSdrOptions) -> Result<f64, ObjectiveError> {
    check_pair(estimate, reference)?;
    let parts = SiSdrParts::new(estimate, reference, opts.center, opts.eps);
    if parts.ref_energy == 0.0 {
        return Err(ObjectiveError::ZeroReference);
    }
    Ok(parts.value())
}

/// Gradient of [`si_sdr_with`] with respect to the estimate.
pub fn si_sdr_grad(estimate: &[f64], reference: &[f64], opts: SiSdrOptions) -> Result<Vec<f64>, ObjectiveError> {
    check_pair(estimate, reference)?;
    let parts = SiSdrParts::new(estimate, reference, opts.center, opts.eps);
    if parts.ref_energy == 0.0 {
        return Err(ObjectiveError::ZeroReference);
    }
    Ok(parts.gradient())
}

fn check_pair(estimate: &[f64], reference: &[f64]) -> Result<(), ObjectiveError> {
    if estimate.len() != reference.len() {
        return Err(ObjectiveError::LengthMismatch { estimate: estimate.len(), reference: reference.len() });
    }
    if reference.iter().all(|&v| v == 0.0) {
        return Err(ObjectiveError::ZeroReference);
    }
    Ok(())
}

/// Weights of the SI-SDR, discretisation and cardinality terms.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 0.5, beta: 0.5, gamma: 0.0 }
    }
}

impl LossWeights {
    pub fn with_gamma(gamma: f64) -> Self {
        Self { gamma, ..Self::default() }
    }

    pub fn is_valid(&self) -> bool {
        [self.alpha, self.beta, self.gamma].iter().all(|w| w.is_finite() && *w >= 0.0)
    }
}

/// Components of one evaluation of the objective.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    /// Batch mean SI-SDR in dB.
    pub si_sdr: f64,
    pub discretization: f64,
    pub cardinality: f64,
}

/// `−α·SI-SDR + β·L_d + γ·L_reg`, averaged over the batch. With no
/// selection rows both regularisers are zero.
pub fn total_loss(
    estimates: &[&[f64]],
    references: &[&[f64]],
    sel_batch: Option<&Tensor>,
    weights: &LossWeights,
    reg: &RegularizerConfig,
    normalizer: f64,
    opts: SiSdrOptions,
) -> Result<LossBreakdown, ObjectiveError> {
    let b = estimates.len();
    let rows = sel_batch.map_or(b, Tensor::rows);
    if b == 0 {
        return Err(ObjectiveError::EmptyBatch);
    }
    if references.len() != b || rows != b {
        return Err(ObjectiveError::BatchMismatch { estimates: b, references: references.len(), selections: rows });
    }
    let mut sdr = 0.0;
    for (e, r) in estimates.iter().zip(references) {
        sdr += si_sdr_with(e, r, opts)?;
    }
    sdr /= b as f64;
    let (ld, lreg) = match sel_batch {
        Some(s) => (discretization_loss(s, reg, normalizer), cardinality_loss(s, reg)),
        None => (0.0, 0.0),
    };
    Ok(LossBreakdown {
        total: -weights.alpha * sdr + weights.beta * ld + weights.gamma * lreg,
        si_sdr: sdr,
        discretization: ld,
        cardinality: lreg,
    })
}

/// Nodes of one example's objective.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub si_sdr: Var,
    pub discretization: Option<Var>,
    pub cardinality: Option<Var>,
}

/// Per-example objective inside a graph. Averaging these over a batch
/// gives [`total_loss`].
#[allow(clippy::too_many_arguments)]
pub fn example_loss(
    g: &mut Graph,
    estimate: Var,
    reference: &[f64],
    selection: Option<Var>,
    weights: &LossWeights,
    reg: &RegularizerConfig,
    normalizer: f64,
    opts: SiSdrOptions,
) -> LossVars {
    let si_sdr = g.si_sdr(estimate, reference, opts.center, opts.eps);
    let mut terms = alloc::vec![(si_sdr, -weights.alpha)];
    let (mut discretization, mut cardinality) = (None, None);
    if let Some(s) = selection {
        let ld = g.discretization(s, normalizer, reg.k1, reg.b);
        let norm = g.sq_norm(s);
        let lreg = g.scale(norm, reg.k2);
        terms.push((ld, weights.beta));
        terms.push((lreg, weights.gamma));
        discretization = Some(ld);
        cardinality = Some(lreg);
    }
    let total = g.weighted_sum(&terms);
    LossVars { total, si_sdr, discretization, cardinality }
}

/// A named quality metric.
pub trait Evaluator: Send + Sync {
    fn name(&self) -> &str;
    fn evaluate(&self, estimate: &[f64], reference: &[f64], rate_hz: f64) -> Result<f64, String>;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct SiSdrEvaluator {
    pub opts: SiSdrOptions,
}

impl Evaluator for SiSdrEvaluator {
    fn name(&self) -> &str {
        SI_SDR
    }

    fn evaluate(&self, estimate: &[f64], reference: &[f64], _rate_hz: f64) -> Result<f64, String> {
        si_sdr_with(estimate, reference, self.opts).map_err(|e| e.to_string())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum MetricOutcome {
    Score(f64),
    Failed(String),
    /// Requested but no evaluator is registered under that name.
    Absent,
}

impl MetricOutcome {
    pub fn score(&self) -> Option<f64> {
        match self {
            Self::Score(v) => Some(*v),
            _ => None,
        }
    }
}

/// Evaluators to run, plus metric names that were asked for without an
/// implementation. SI-SDR is always present.
pub struct MetricRegistry {
    evaluators: Vec<Box<dyn Evaluator>>,
    requested: Vec<String>,
}

impl Default for MetricRegistry {
    fn default() -> Self {
        Self::new(SiSdrOptions::default())
    }
}

impl MetricRegistry {
    pub fn new(opts: SiSdrOptions) -> Self {
        Self { evaluators: alloc::vec![Box::new(SiSdrEvaluator { opts })], requested: Vec::new() }
    }

    /// Adds an evaluator, replacing any with the same name.
    pub fn register(&mut self, evaluator: Box<dyn Evaluator>) {
        self.evaluators.retain(|e| e.name() != evaluator.name());
        self.evaluators.push(evaluator);
    }

    /// Marks `name` as wanted; it is reported as absent unless registered.
    pub fn request(&mut self, name: impl Into<String>) {
        let name = name.into();
        if !self.requested.contains(&name) {
            self.requested.push(name);
        }
    }

    pub fn names(&self) -> Vec<&str> {
        self.evaluators.iter().map(|e| e.name()).collect()
    }

    pub fn evaluate(&self, estimate: &[f64], reference: &[f64], rate_hz: f64) -> BTreeMap<String, MetricOutcome> {
        let mut out = BTreeMap::new();
        for name in &self.requested {
            out.insert(name.clone(), MetricOutcome::Absent);
        }
        for e in &self.evaluators {
            let outcome = match e.evaluate(estimate, reference, rate_hz) {
                Ok(v) => MetricOutcome::Score(v),
                Err(msg) => MetricOutcome::Failed(msg),
            };
            out.insert(e.name().to_string(), outcome);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{mix_at_snr, synth_trial, SynthSpec};
    use crate::params::ParamStore;
    use alloc::vec;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hand_example_is_zero_db() {
        assert_eq!(si_sdr(&[1.0, 1.0], &[1.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn perfect_estimate_hits_finite_ceiling() {
        let s = [0.5, -1.0, 2.0];
        let want = 10.0 * libm::log10((1.0 + SI_SDR_EPS) / SI_SDR_EPS);
        assert!((si_sdr(&s, &s).unwrap() - want).abs() < 1e-9);
        let loud = s.map(|v| v * 1e3);
        assert!((si_sdr(&loud, &loud).unwrap() - want).abs() < 1e-9);
    }

    #[test]
    fn degenerate_inputs() {
        assert_eq!(si_sdr(&[1.0, 2.0], &[0.0, 0.0]), Err(ObjectiveError::ZeroReference));
        assert!(matches!(si_sdr(&[1.0], &[1.0, 2.0]), Err(ObjectiveError::LengthMismatch { .. })));
        assert_eq!(si_sdr(&[0.0, 0.0], &[1.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn centering_knob_removes_offsets() {
        let s = [1.0, -1.0, 2.0, -2.0];
        let shifted: Vec<f64> = s.iter().map(|v| v + 3.0).collect();
        let opts = SiSdrOptions { center: true, ..SiSdrOptions::default() };
        assert!(si_sdr_with(&shifted, &s, opts).unwrap() > 100.0);
        assert!(si_sdr(&shifted, &s).unwrap() < 10.0);
    }

    proptest! {
        #[test]
        fn scale_invariance(seed in 0u64..500, k in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s: Vec<f64> = (0..64).map(|_| rng.random::<f64>() - 0.5).collect();
            let e: Vec<f64> = s.iter().map(|v| v + 0.3 * (rng.random::<f64>() - 0.5)).collect();
            let scaled: Vec<f64> = e.iter().map(|v| v * k).collect();
            prop_assert!((si_sdr(&scaled, &s).unwrap() - si_sdr(&e, &s).unwrap()).abs() < 1e-6);
            let noise: Vec<f64> = (0..64).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            let noisy: Vec<f64> = noise.iter().map(|v| v * k).collect();
            prop_assert!((si_sdr(&noisy, &s).unwrap() - si_sdr(&noise, &s).unwrap()).abs() < 1e-9);
        }

        #[test]
        fn orthogonal_equal_energy_noise_is_zero_db(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s: Vec<f64> = (0..32).map(|_| rng.random::<f64>() - 0.5).collect();
            let raw: Vec<f64> = (0..32).map(|_| rng.random::<f64>() - 0.5).collect();
            let ss: f64 = s.iter().map(|v| v * v).sum();
            let proj: f64 = raw.iter().zip(&s).map(|(a, b)| a * b).sum::<f64>() / ss;
            let n: Vec<f64> = raw.iter().zip(&s).map(|(a, b)| a - proj * b).collect();
            let nn: f64 = n.iter().map(|v| v * v).sum();
            let k = libm::sqrt(ss / nn);
            let est: Vec<f64> = s.iter().zip(&n).map(|(a, b)| a + k * b).collect();
            prop_assert!(si_sdr(&est, &s).unwrap().abs() < 1e-9);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for center in [false, true] {
            let opts = SiSdrOptions { center, ..SiSdrOptions::default() };
            let s: Vec<f64> = (0..16).map(|_| rng.random::<f64>() - 0.5).collect();
            let e: Vec<f64> = (0..16).map(|_| rng.random::<f64>() - 0.5).collect();
            let g = si_sdr_grad(&e, &s, opts).unwrap();
            for i in 0..16 {
                let h = 1e-6;
                let (mut p, mut m) = (e.clone(), e.clone());
                p[i] += h;
                m[i] -= h;
                let num = (si_sdr_with(&p, &s, opts).unwrap() - si_sdr_with(&m, &s, opts).unwrap()) / (2.0 * h);
                assert!((g[i] - num).abs() / g[i].abs().max(num.abs()).max(1e-6) < 1e-4);
            }
        }
    }

    #[test]
    fn total_loss_reductions() {
        let reg = RegularizerConfig::default();
        let w = LossWeights::default();
        let (s, e) = (vec![1.0, 0.0, 0.5], vec![0.9, 0.2, 0.4]);
        let binary = Tensor::from_vec(1, 4, vec![1.0, 0.0, 0.0, 1.0]);
        let l = total_loss(&[&e], &[&s], Some(&binary), &w, &reg, 4.0, SiSdrOptions::default()).unwrap();
        assert!((l.total + 0.5 * si_sdr(&e, &s).unwrap()).abs() < 1e-12);

        let half = Tensor::full(1, 4, 0.5);
        let l = total_loss(&[&s], &[&s], Some(&half), &w, &reg, 4.0, SiSdrOptions::default()).unwrap();
        let ceiling = si_sdr(&s, &s).unwrap();
        assert!((l.total - (-0.5 * ceiling + 0.5 * 25.0)).abs() < 1e-9);

        for gamma in [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6] {
            assert!(LossWeights::with_gamma(gamma).is_valid());
        }
        assert!(!LossWeights::with_gamma(-0.1).is_valid());
        assert!(matches!(
            total_loss(&[&e], &[&s, &s], None, &w, &reg, 4.0, SiSdrOptions::default()),
            Err(ObjectiveError::BatchMismatch { .. })
        ));
    }

    #[test]
    fn graph_loss_matches_batch_formula_and_gradients() {
        let reg = RegularizerConfig::default();
        let w = LossWeights::with_gamma(0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let refs: Vec<Vec<f64>> = (0..2).map(|_| (0..12).map(|_| rng.random::<f64>() - 0.5).collect()).collect();
        let ests: Vec<Vec<f64>> = (0..2).map(|_| (0..12).map(|_| rng.random::<f64>() - 0.5).collect()).collect();
        let sels: Vec<Vec<f64>> = (0..2).map(|_| (0..5).map(|_| rng.random::<f64>()).collect()).collect();

        let store = ParamStore::new();
        let eval = |ests: &[Vec<f64>], sels: &[Vec<f64>]| {
            let mut total = 0.0;
            let mut grads = Vec::new();
            for i in 0..2 {
                let mut g = Graph::new(&store);
                let e = g.input(Tensor::row_vector(&ests[i]));
                let s = g.input(Tensor::column(&sels[i]));
                let l = example_loss(&mut g, e, &refs[i], Some(s), &w, &reg, 5.0, SiSdrOptions::default());
                total += g.value(l.total).get(0, 0) / 2.0;
                let gr = g.backward(l.total);
                grads.push((gr.wrt(e).unwrap().clone(), gr.wrt(s).unwrap().clone()));
            }
            (total, grads)
        };
        let (total, grads) = eval(&ests, &sels);
        let sel_batch = Tensor::from_rows(&sels);
        let e_refs: Vec<&[f64]> = ests.iter().map(|v| v.as_slice()).collect();
        let r_refs: Vec<&[f64]> = refs.iter().map(|v| v.as_slice()).collect();
        let batch = total_loss(&e_refs, &r_refs, Some(&sel_batch), &w, &reg, 5.0, SiSdrOptions::default()).unwrap();
        assert!((total - batch.total).abs() < 1e-9);

        let h = 1e-6;
        for i in 0..2 {
            for j in 0..5 {
                let (mut p, mut m) = (sels.clone(), sels.clone());
                p[i][j] += h;
                m[i][j] -= h;
                let num = (eval(&ests, &p).0 - eval(&ests, &m).0) / (2.0 * h);
                let a = grads[i].1.data()[j] / 2.0;
                assert!((a - num).abs() / a.abs().max(num.abs()).max(1e-6) < 1e-4);
            }
            for j in 0..12 {
                let (mut p, mut m) = (ests.clone(), ests.clone());
                p[i][j] += h;
                m[i][j] -= h;
                let num = (eval(&p, &sels).0 - eval(&m, &sels).0) / (2.0 * h);
                let a = grads[i].0.data()[j] / 2.0;
                assert!((a - num).abs() / a.abs().max(num.abs()).max(1e-6) < 1e-4);
            }
        }
    }

    #[test]
    fn descending_sisdr_only_loss_raises_sisdr() {
        let store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s: Vec<f64> = (0..32).map(|_| rng.random::<f64>() - 0.5).collect();
        let mut e: Vec<f64> = (0..32).map(|_| rng.random::<f64>() - 0.5).collect();
        let w = LossWeights { alpha: 0.5, beta: 0.0, gamma: 0.0 };
        let mut last = si_sdr(&e, &s).unwrap();
        for _ in 0..20 {
            let mut g = Graph::new(&store);
            let ev = g.input(Tensor::row_vector(&e));
            let l = example_loss(&mut g, ev, &s, None, &w, &RegularizerConfig::default(), 1.0, SiSdrOptions::default());
            let grad = g.backward(l.total).wrt(ev).unwrap().clone();
            e.iter_mut().zip(grad.data()).for_each(|(v, d)| *v -= 1e-3 * d);
            let now = si_sdr(&e, &s).unwrap();
            assert!(now > last);
            last = now;
        }
    }

    struct Failing;

    impl Evaluator for Failing {
        fn name(&self) -> &str {
            "pesq"
        }

        fn evaluate(&self, _: &[f64], _: &[f64], _: f64) -> Result<f64, String> {
            Err("tool not found".into())
        }
    }

    #[test]
    fn registry_reports_scores_failures_and_absence() {
        let s = [1.0, -0.5, 0.25];
        let reg = MetricRegistry::default();
        let m = reg.evaluate(&s, &s, 8000.0);
        assert_eq!(m.len(), 1);
        assert!(m[SI_SDR].score().is_some());

        let mut reg = MetricRegistry::default();
        reg.request("stoi");
        reg.register(Box::new(Failing));
        let m = reg.evaluate(&s, &s, 8000.0);
        assert_eq!(m["pesq"], MetricOutcome::Failed("tool not found".into()));
        assert_eq!(m["stoi"], MetricOutcome::Absent);
        assert!(m[SI_SDR].score().is_some());
    }

    #[test]
    fn unprocessed_mixture_scores_near_zero_db() {
        let spec = SynthSpec { duration_s: 2.0, ..SynthSpec::default() };
        for seed in 0..10 {
            let t = synth_trial(&spec, seed).unwrap();
            let (mix, target) = mix_at_snr(&t.target, &t.interferer, 0.0).unwrap();
            let v = si_sdr(mix.samples(), target.samples()).unwrap();
            assert!(v.abs() < 0.5, "seed {seed}: {v} dB");
        }
    }
}
