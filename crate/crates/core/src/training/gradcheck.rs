//! Finite-difference verification of analytic gradients.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Extractor;
use crate::dataio::{Segment, SegmentMeta, Waveform};
use crate::graph::{Graph, Var};
use crate::model::{ModelConfig, SeAttention, WdBlock};
use crate::objectives::{example_loss, si_sdr, LossWeights, SiSdrOptions};
use crate::params::ParamStore;
use crate::selection::{cardinality_loss, discretization_loss, RegularizerConfig, SelectorConfig};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradCheckTarget {
    /// Discretisation loss with respect to the selection vector.
    Discretization,
    /// Cardinality loss with respect to the selection vector.
    Cardinality,
    /// SI-SDR with respect to the estimate.
    SiSdr,
    /// Squeeze-excitation branch weights, through a random projection.
    SeAttention,
    /// Multi-dilation block output, through a random projection.
    WdBlock,
    /// Full objective of a tiny extractor with respect to its parameters.
    TinyForward,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub target: GradCheckTarget,
    pub probes: usize,
    pub max_rel_err: f64,
    pub tol: f64,
    pub passed: bool,
}

/// Smallest magnitude used in the relative-error denominator.
const REL_FLOOR: f64 = 1e-4;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Compares analytic gradients with central differences at `probes`
/// random coordinates and reports the largest relative error.
pub fn grad_check(target: GradCheckTarget, probes: usize, tol: f64, seed: u64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let errs = match target {
        GradCheckTarget::Discretization => check_discretization(&mut rng, probes),
        GradCheckTarget::Cardinality => check_cardinality(&mut rng, probes),
        GradCheckTarget::SiSdr => check_si_sdr(&mut rng, probes),
        GradCheckTarget::SeAttention => check_se(&mut rng, probes),
        GradCheckTarget::WdBlock => check_wd_block(&mut rng, probes),
        GradCheckTarget::TinyForward => check_tiny_forward(&mut rng, probes),
    };
    let max_rel_err = errs.iter().copied().fold(0.0, f64::max);
    GradCheckReport { target, probes: errs.len(), max_rel_err, tol, passed: max_rel_err < tol }
}

fn central(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

fn check_discretization(rng: &mut ChaCha8Rng, probes: usize) -> Vec<f64> {
    let reg = RegularizerConfig::default();
    let n = 8;
    let s: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let v = g.input(Tensor::column(&s));
    let l = g.discretization(v, n as f64, reg.k1, reg.b);
    let grad = g.backward(l).wrt(v).expect("selection gradient").clone();
    (0..probes)
        .map(|_| {
            let i = rng.random_range(0..n);
            let f = |x: f64| {
                let mut t = s.clone();
                t[i] = x;
                discretization_loss(&Tensor::row_vector(&t), &reg, n as f64)
            };
            rel_err(grad.data()[i], central(f, s[i], 1e-5))
        })
        .collect()
}

fn check_cardinality(rng: &mut ChaCha8Rng, probes: usize) -> Vec<f64> {
    let reg = RegularizerConfig::default();
    let n = 8;
    let s: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let v = g.input(Tensor::column(&s));
    let norm = g.sq_norm(v);
    let l = g.scale(norm, reg.k2);
    let grad = g.backward(l).wrt(v).expect("selection gradient").clone();
    (0..probes)
        .map(|_| {
            let i = rng.random_range(0..n);
            let f = |x: f64| {
                let mut t = s.clone();
                t[i] = x;
                cardinality_loss(&Tensor::row_vector(&t), &reg)
            };
            rel_err(grad.data()[i], central(f, s[i], 1e-5))
        })
        .collect()
}

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect())
}

/// Scalar `Σ y ∘ r` for a fixed random `r`.
fn project(g: &mut Graph, y: Var, r: &Tensor) -> Var {
    let (rows, cols) = r.shape();
    let r = g.constant(r.clone());
    let p = g.mul(y, r);
    let m = g.mean_cols(p);
    let ones = g.constant(Tensor::full(1, rows, cols as f64));
    g.matmul(ones, m)
}

/// Probes both the input and the parameters of a store-backed component.
fn check_component(
    rng: &mut ChaCha8Rng,
    probes: usize,
    store: &ParamStore,
    x: &Tensor,
    f: impl Fn(&mut Graph, Var) -> Var,
) -> Vec<f64> {
    let eval = |store: &ParamStore, x: &Tensor| {
        let mut g = Graph::new(store);
        let v = g.input(x.clone());
        let l = f(&mut g, v);
        g.value(l).get(0, 0)
    };
    let mut g = Graph::new(store);
    let v = g.input(x.clone());
    let l = f(&mut g, v);
    let grads = g.backward(l);
    let gx = grads.wrt(v).expect("input gradient").clone();
    let ids: Vec<_> = store.ids().collect();
    let h = 1e-6;
    (0..probes)
        .map(|k| {
            if k % 2 == 0 || ids.is_empty() {
                let j = rng.random_range(0..x.len());
                let (mut plus, mut minus) = (x.clone(), x.clone());
                plus.data_mut()[j] += h;
                minus.data_mut()[j] -= h;
                rel_err(gx.data()[j], (eval(store, &plus) - eval(store, &minus)) / (2.0 * h))
            } else {
                let id = ids[rng.random_range(0..ids.len())];
                let j = rng.random_range(0..store.get(id).len());
                let analytic = grads.param(id).map_or(0.0, |t| t.data()[j]);
                let (mut plus, mut minus) = (store.clone(), store.clone());
                plus.get_mut(id).data_mut()[j] += h;
                minus.get_mut(id).data_mut()[j] -= h;
                rel_err(analytic, (eval(&plus, x) - eval(&minus, x)) / (2.0 * h))
            }
        })
        .collect()
}

fn check_se(rng: &mut ChaCha8Rng, probes: usize) -> Vec<f64> {
    let (channels, len, n) = (8, 20, 3);
    let mut store = ParamStore::new();
    let se = SeAttention::new(&mut store, "se", channels, 2, rng);
    let x = random_tensor(rng, channels, len);
    let offsets: Vec<Tensor> = (0..n).map(|_| random_tensor(rng, channels, len)).collect();
    let r = random_tensor(rng, n, 1);
    check_component(rng, probes, &store, &x, |g, v| {
        let parts: Vec<Var> = offsets
            .iter()
            .enumerate()
            .map(|(i, o)| {
                let scaled = g.scale(v, (i + 1) as f64);
                let o = g.constant(o.clone());
                g.add(scaled, o)
            })
            .collect();
        let w = se.weights(g, &parts);
        project(g, w, &r)
    })
}

fn check_wd_block(rng: &mut ChaCha8Rng, probes: usize) -> Vec<f64> {
    let (channels, len) = (6, 24);
    let mut store = ParamStore::new();
    let block = WdBlock::new(&mut store, "wd", channels, 8, 3, &[1, 2, 4], 2, rng);
    let x = random_tensor(rng, channels, len);
    let r = random_tensor(rng, channels, len);
    check_component(rng, probes, &store, &x, |g, v| {
        let y = block.forward(g, v);
        project(g, y, &r)
    })
}

fn check_si_sdr(rng: &mut ChaCha8Rng, probes: usize) -> Vec<f64> {
    let n = 64;
    let r: Vec<f64> = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
    let e: Vec<f64> = r.iter().map(|v| v + 0.5 * (rng.random::<f64>() - 0.5)).collect();
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let v = g.input(Tensor::row_vector(&e));
    let l = g.si_sdr(v, &r, false, SiSdrOptions::default().eps);
    let grad = g.backward(l).wrt(v).expect("estimate gradient").clone();
    (0..probes)
        .map(|_| {
            let i = rng.random_range(0..n);
            let f = |x: f64| {
                let mut t = e.clone();
                t[i] = x;
                si_sdr(&t, &r).expect("non-zero reference")
            };
            rel_err(grad.data()[i], central(f, e[i], 1e-6))
        })
        .collect()
}

pub(super) fn tiny_segment(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Segment {
    let len = 64;
    let wave = |rng: &mut ChaCha8Rng| Waveform::new((0..len).map(|_| rng.random::<f64>() - 0.5).collect(), cfg.audio_rate_hz);
    let mixture = wave(rng).expect("finite samples");
    let target = wave(rng).expect("finite samples");
    let te = cfg.eeg_len_for(len);
    let eeg = Tensor::from_vec(cfg.eeg_in_channels, te, (0..cfg.eeg_in_channels * te).map(|_| rng.random::<f64>() - 0.5).collect());
    Segment::new(mixture, target, eeg, cfg.eeg_rate_hz, SegmentMeta::default()).expect("aligned segment")
}

fn check_tiny_forward(rng: &mut ChaCha8Rng, probes: usize) -> Vec<f64> {
    let cfg = ModelConfig::tiny(4);
    let sel_cfg = SelectorConfig { hidden_dim: 4, block_hidden_dim: 6, n_blocks: 1, ..SelectorConfig::default() };
    let ex = Extractor::new(&cfg, Some(&sel_cfg), rng.random()).expect("valid tiny config");
    let seg = tiny_segment(&cfg, rng);
    let weights = LossWeights::with_gamma(0.3);
    let reg = RegularizerConfig::default();
    let loss = |store: &ParamStore| -> (f64, Option<Vec<Tensor>>) {
        let probe = Extractor { store: store.clone(), ..ex.clone() };
        let mut g = Graph::new(&probe.store);
        let (out, sel) = probe.forward_graph(&mut g, &seg).expect("tiny forward");
        let l = example_loss(&mut g, out.estimate, seg.target().samples(), sel, &weights, &reg, 4.0, SiSdrOptions::default());
        let value = g.value(l.total).get(0, 0);
        let mut grads: Vec<Tensor> = store.iter().map(|(_, _, t)| Tensor::zeros(t.rows(), t.cols())).collect();
        g.backward(l.total).accumulate_params(&mut grads, 1.0);
        (value, Some(grads))
    };
    let (_, grads) = loss(&ex.store);
    let grads = grads.expect("gradients");
    let ids: Vec<_> = ex.store.ids().collect();
    (0..probes)
        .map(|_| {
            let id = ids[rng.random_range(0..ids.len())];
            let j = rng.random_range(0..ex.store.get(id).len());
            let h = 1e-6;
            let mut plus = ex.store.clone();
            plus.get_mut(id).data_mut()[j] += h;
            let mut minus = ex.store.clone();
            minus.get_mut(id).data_mut()[j] -= h;
            let numeric = (loss(&plus).0 - loss(&minus).0) / (2.0 * h);
            rel_err(grads[id.index()].data()[j], numeric)
        })
        .collect()
}
