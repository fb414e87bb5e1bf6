use super::*;
use crate::graph::Graph;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny() -> ModelConfig {
    ModelConfig::tiny(3)
}

fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::from_vec(r, c, (0..r * c).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect())
}

fn example(cfg: &ModelConfig, len: usize, seed: u64) -> (Vec<f64>, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = (0..len).map(|_| rng.random::<f64>() - 0.5).collect();
    let e = rand_tensor(&mut rng, cfg.eeg_in_channels, cfg.eeg_len_for(len));
    (x, e)
}

#[test]
fn frame_counts() {
    let cfg = ModelConfig::default();
    assert_eq!(cfg.n_frames(16), Some(1));
    assert_eq!(cfg.n_frames(2000), Some(249));
    assert_eq!(cfg.n_frames(15), None);

    let (model, store) = WdTcn::init(&tiny(), 1).unwrap();
    let mut g = Graph::new(&store);
    let x = g.constant(Tensor::row_vector(&[0.1; 4]));
    let w_x = model.audio_encode(&mut g, x).unwrap();
    assert_eq!(g.value(w_x).shape(), (8, 1));
    let short = g.constant(Tensor::row_vector(&[0.1; 3]));
    assert_eq!(model.audio_encode(&mut g, short), Err(ModelError::TooShort { len: 3, kernel: 4 }));
}

#[test]
fn zero_audio_gives_zero_preactivation() {
    let (model, store) = WdTcn::init(&tiny(), 1).unwrap();
    let mut g = Graph::new(&store);
    let x = g.constant(Tensor::zeros(1, 40));
    let y = model.audio_encode_linear(&mut g, x).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn eeg_levels_and_lengths() {
    let cfg = ModelConfig { eeg_in_channels: 30, eeg_n_blocks: 1, ..tiny() };
    let (model, store) = WdTcn::init(&cfg, 2).unwrap();
    let mut g = Graph::new(&store);
    let e = g.constant(Tensor::zeros(30, 256));
    let levels = model.eeg_encode(&mut g, e).unwrap();
    assert_eq!(levels.len(), 1);
    assert_eq!(g.value(levels[0]).shape(), (4, 128));

    let wrong = g.constant(Tensor::zeros(29, 256));
    assert_eq!(model.eeg_encode(&mut g, wrong), Err(ModelError::ChannelMismatch { expected: 30, found: 29 }));

    let (model, store) = WdTcn::init(&tiny(), 2).unwrap();
    let mut g = Graph::new(&store);
    let e = g.constant(Tensor::zeros(3, 17));
    let levels = model.eeg_encode(&mut g, e).unwrap();
    assert_eq!(levels.len(), 2);
    assert!(levels.iter().all(|&l| g.value(l).shape() == (4, 9)));
}

#[test]
fn eeg_levels_are_residual() {
    let cfg = tiny();
    let (model, store) = WdTcn::init(&cfg, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut g = Graph::new(&store);
    let e = g.constant(rand_tensor(&mut rng, 3, 16));
    let levels = model.eeg_encode(&mut g, e).unwrap();
    let direct = model.eeg_blocks[1].forward(&mut g, levels[0]);
    assert_eq!(g.value(direct), g.value(levels[1]));
}

/// Straight-line reference of the blocks, using plain loops over the raw
/// parameter tensors.
mod reference {
    use crate::tensor::Tensor;

    pub fn pointwise(w: &Tensor, b: &Tensor, x: &Tensor) -> Tensor {
        let mut y = Tensor::zeros(w.rows(), x.cols());
        for o in 0..w.rows() {
            for t in 0..x.cols() {
                let mut acc = b.get(o, 0);
                for i in 0..w.cols() {
                    acc += w.get(o, i) * x.get(i, t);
                }
                y.set(o, t, acc);
            }
        }
        y
    }

    pub fn prelu(a: f64, x: &Tensor) -> Tensor {
        x.map(|v| if v > 0.0 { v } else { a * v })
    }

    pub fn gln(x: &Tensor) -> Tensor {
        let n = x.len() as f64;
        let mean = x.sum() / n;
        let var = x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        x.map(|v| (v - mean) / (var + 1e-8).sqrt())
    }

    pub fn depthwise(w: &Tensor, b: &Tensor, d: usize, x: &Tensor) -> Tensor {
        let k = w.cols();
        let pad = (d * (k - 1) / 2) as isize;
        let mut y = Tensor::zeros(x.rows(), x.cols());
        for c in 0..x.rows() {
            for t in 0..x.cols() {
                let mut acc = b.get(c, 0);
                for j in 0..k {
                    let src = t as isize + (j * d) as isize - pad;
                    if src >= 0 && (src as usize) < x.cols() {
                        acc += w.get(c, j) * x.get(c, src as usize);
                    }
                }
                y.set(c, t, acc);
            }
        }
        y
    }

    pub fn mean_cols(x: &Tensor) -> Tensor {
        Tensor::from_vec(x.rows(), 1, (0..x.rows()).map(|r| x.row(r).iter().sum::<f64>() / x.cols() as f64).collect())
    }
}

#[test]
fn wd_block_matches_straight_line_reference() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let block = WdBlock::new(&mut store, "b", 4, 6, 3, &[1, 2], 2, &mut rng);
    let x = rand_tensor(&mut rng, 4, 16);

    let mut g = Graph::new(&store);
    let xv = g.constant(x.clone());
    let y = block.forward(&mut g, xv);
    let got = g.value(y).clone();

    let p = |name: &str| store.get(store.find(name).unwrap()).clone();
    let a = |name: &str| p(name).get(0, 0);
    let h = reference::pointwise(&p("b.in.weight"), &p("b.in.bias"), &x);
    let h = reference::gln(&reference::prelu(a("b.act1.slope"), &h));
    let y0 = reference::depthwise(&p("b.dw0.weight"), &p("b.dw0.bias"), 1, &h);
    let y1 = reference::depthwise(&p("b.dw1.weight"), &p("b.dw1.bias"), 2, &h);
    let score = |y: &Tensor| {
        let z = reference::pointwise(&p("b.se.fc1.weight"), &p("b.se.fc1.bias"), &reference::mean_cols(y));
        reference::pointwise(&p("b.se.fc2.weight"), &p("b.se.fc2.bias"), &z.map(|v| v.max(0.0))).get(0, 0)
    };
    let (s0, s1) = (score(&y0), score(&y1));
    let m = s0.max(s1);
    let (e0, e1) = ((s0 - m).exp(), (s1 - m).exp());
    let (w0, w1) = (e0 / (e0 + e1), e1 / (e0 + e1));
    let mut comb = y0.map(|v| v * w0);
    comb.add_assign(&y1.map(|v| v * w1));
    let comb = reference::gln(&reference::prelu(a("b.act2.slope"), &comb));
    let mut want = reference::pointwise(&p("b.out.weight"), &p("b.out.bias"), &comb);
    want.add_assign(&x);

    for (u, v) in got.data().iter().zip(want.data()) {
        assert!((u - v).abs() < 1e-10, "{u} vs {v}");
    }
}

#[test]
fn single_branch_equals_standard_block() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let block = WdBlock::new(&mut store, "b", 4, 6, 3, &[2], 2, &mut rng);
    let standard = block.as_standard().unwrap();
    let x = rand_tensor(&mut rng, 4, 16);
    let mut g = Graph::new(&store);
    let xv = g.constant(x);
    let (y, w) = block.forward_with_weights(&mut g, xv);
    let z = standard.forward(&mut g, xv);
    assert_eq!(g.value(w).data(), &[1.0]);
    assert_eq!(g.value(y), g.value(z));
}

#[test]
fn zeroed_block_is_identity() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let block = WdBlock::new(&mut store, "b", 4, 6, 3, &[1, 2], 2, &mut rng);
    for name in ["b.dw0.weight", "b.dw0.bias", "b.dw1.weight", "b.dw1.bias", "b.out.weight", "b.out.bias"] {
        let id = store.find(name).unwrap();
        store.get_mut(id).scale_in_place(0.0);
    }
    let x = rand_tensor(&mut rng, 4, 16);
    let mut g = Graph::new(&store);
    let xv = g.constant(x.clone());
    let y = block.forward(&mut g, xv);
    assert_eq!(g.value(y), &x);
}

#[test]
fn se_weights_on_simplex() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let se = SeAttention::new(&mut store, "se", 4, 2, &mut rng);
    let a = rand_tensor(&mut rng, 4, 8);
    let b = rand_tensor(&mut rng, 4, 8);
    let mut g = Graph::new(&store);
    let (av, bv) = (g.constant(a.clone()), g.constant(b));
    let single = se.weights(&mut g, &[av]);
    assert_eq!(g.value(single).data(), &[1.0]);
    let pair = se.weights(&mut g, &[av, bv]);
    let w = g.value(pair).data();
    assert!(w.iter().all(|&v| v >= 0.0) && (w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    let same = g.constant(a);
    let tied = se.weights(&mut g, &[av, same, av]);
    assert!(g.value(tied).data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
}

#[test]
fn se_weights_gradient_matches_finite_differences() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let se = SeAttention::new(&mut store, "se", 4, 2, &mut rng);
    let inputs = [rand_tensor(&mut rng, 4, 8), rand_tensor(&mut rng, 4, 8)];
    let proj = [0.3, -1.1];
    let eval = |inputs: &[Tensor]| {
        let mut g = Graph::new(&store);
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let w = se.weights(&mut g, &vars);
        let p = g.constant(Tensor::from_vec(1, 2, proj.to_vec()));
        let s = g.matmul(p, w);
        (g.value(s).get(0, 0), g.backward(s), vars)
    };
    let (_, grads, vars) = eval(&inputs);
    let h = 1e-6;
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var).unwrap().clone();
        for j in 0..inputs[i].len() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= h;
            let numeric = (eval(&plus).0 - eval(&minus).0) / (2.0 * h);
            let a = analytic.data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(rel < 1e-4, "input {i}[{j}]: {a} vs {numeric}");
        }
    }
}

#[test]
fn cmca_with_zero_levels_adds_constant() {
    let cfg = tiny();
    let (model, store) = WdTcn::init(&cfg, 13).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut g = Graph::new(&store);
    let a = g.constant(rand_tensor(&mut rng, 6, 20));
    let levels = vec![g.constant(Tensor::zeros(4, 5)), g.constant(Tensor::zeros(4, 5))];
    let (fused, _) = model.cmca_fuse(&mut g, a, &levels);
    let (f, av) = (g.value(fused), g.value(a));
    for r in 0..6 {
        let d0 = f.get(r, 0) - av.get(r, 0);
        for t in 1..20 {
            assert!((f.get(r, t) - av.get(r, t) - d0).abs() < 1e-12);
        }
    }
}

#[test]
fn cmca_attention_is_normalised() {
    let cfg = ModelConfig { attention_window: 0, ..tiny() };
    let (model, store) = WdTcn::init(&cfg, 14).unwrap();
    let (x, e) = example(&cfg, 4, 14);
    let mut g = Graph::new(&store);
    let (xv, ev) = (g.constant(Tensor::row_vector(&x)), g.constant(e.slice_cols(0, 1)));
    let out = model.forward_graph(&mut g, xv, ev).unwrap();
    assert_eq!(g.attention_weights(out.attention[0], 0).unwrap(), &[1.0]);

    for window in [0, 3] {
        let cfg = ModelConfig { attention_window: window, ..tiny() };
        let (model, store) = WdTcn::init(&cfg, 15).unwrap();
        let (x, e) = example(&cfg, 96, 15);
        let mut g = Graph::new(&store);
        let (xv, ev) = (g.constant(Tensor::row_vector(&x)), g.constant(e));
        let out = model.forward_graph(&mut g, xv, ev).unwrap();
        let frames = g.value(out.embedding).cols();
        for &att in &out.attention {
            for t in 0..frames {
                let w = g.attention_weights(att, t).unwrap();
                assert!(w.iter().all(|&v| v >= 0.0));
                assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn mask_range_and_shape() {
    let cfg = ModelConfig { audio_rate_hz: 8000.0, eeg_rate_hz: 128.0, ..tiny() };
    let (model, store) = WdTcn::init(&cfg, 16).unwrap();
    for len in [1600, 2000, 4096] {
        let (x, e) = example(&cfg, len, len as u64);
        let mut g = Graph::new(&store);
        let (xv, ev) = (g.constant(Tensor::row_vector(&x)), g.constant(e));
        let out = model.forward_graph(&mut g, xv, ev).unwrap();
        let m = g.value(out.mask);
        assert_eq!(m.shape(), g.value(out.embedding).shape());
        assert!(m.min() >= 0.0 && m.max() <= 1.0);
        assert_eq!(g.value(out.estimate).cols(), len);
    }
}

#[test]
fn decode_identity_and_zero_masks() {
    let cfg = tiny();
    let (model, store) = WdTcn::init(&cfg, 17).unwrap();
    let (x, _) = example(&cfg, 37, 17);
    let mut g = Graph::new(&store);
    let xv = g.constant(Tensor::row_vector(&x));
    let w_x = model.audio_encode(&mut g, xv).unwrap();
    let shape = g.value(w_x).shape();
    let ones = g.constant(Tensor::full(shape.0, shape.1, 1.0));
    let zeros = g.constant(Tensor::zeros(shape.0, shape.1));
    let y1 = model.decode(&mut g, w_x, ones, 37).unwrap();
    let w = g.param(model.decoder);
    let raw = g.conv_transpose1d(w_x, w, 1, cfg.enc_stride);
    let raw = g.fit_cols(raw, 37);
    assert_eq!(g.value(y1), g.value(raw));
    let y0 = model.decode(&mut g, w_x, zeros, 37).unwrap();
    assert!(g.value(y0).data().iter().all(|&v| v == 0.0));
    let bad = g.constant(Tensor::zeros(shape.0, shape.1 + 1));
    assert!(matches!(model.decode(&mut g, w_x, bad, 37), Err(ModelError::ShapeMismatch { .. })));
}

#[test]
fn forward_preserves_length_and_is_deterministic() {
    let cfg = tiny();
    let (model, store) = WdTcn::init(&cfg, 18).unwrap();
    for len in [4, 5, 33, 64, 129] {
        let (x, e) = example(&cfg, len, 18);
        let e = if e.cols() == 0 { Tensor::zeros(3, 1) } else { e };
        let a = model.forward(&store, &x, &e).unwrap();
        assert_eq!(a.len(), len);
        assert_eq!(a, model.forward(&store, &x, &e).unwrap());
    }
}

#[test]
fn forward_rejects_misaligned_eeg() {
    let cfg = tiny();
    let (model, store) = WdTcn::init(&cfg, 19).unwrap();
    let (x, _) = example(&cfg, 64, 19);
    assert!(matches!(model.forward(&store, &x, &Tensor::zeros(3, 20)), Err(ModelError::Alignment { .. })));
    assert!(matches!(
        model.forward(&store, &x, &Tensor::zeros(2, 8)),
        Err(ModelError::ChannelMismatch { expected: 3, found: 2 })
    ));
}

fn sisdr_loss(model: &WdTcn, store: &ParamStore, x: &[f64], e: &Tensor, target: &[f64]) -> f64 {
    let mut g = Graph::new(store);
    let (xv, ev) = (g.constant(Tensor::row_vector(x)), g.constant(e.clone()));
    let out = model.forward_graph(&mut g, xv, ev).unwrap();
    let s = g.si_sdr(out.estimate, target, false, 1e-12);
    -g.value(s).get(0, 0)
}

#[test]
fn forward_gradient_matches_finite_differences() {
    let cfg = tiny();
    let (model, store) = WdTcn::init(&cfg, 20).unwrap();
    let (x, e) = example(&cfg, 64, 20);
    let (target, _) = example(&cfg, 64, 21);

    let mut g = Graph::new(&store);
    let (xv, ev) = (g.constant(Tensor::row_vector(&x)), g.constant(e.clone()));
    let out = model.forward_graph(&mut g, xv, ev).unwrap();
    let s = g.si_sdr(out.estimate, &target, false, 1e-12);
    let loss = g.scale(s, -1.0);
    let grads = g.backward(loss);

    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let h = 1e-6;
    let mut checked = 0;
    for (id, name, value) in store.iter() {
        let j = rng.random_range(0..value.len());
        let analytic = grads.param(id).map_or(0.0, |t| t.data()[j]);
        let mut plus = store.clone();
        plus.get_mut(id).data_mut()[j] += h;
        let mut minus = store.clone();
        minus.get_mut(id).data_mut()[j] -= h;
        let numeric =
            (sisdr_loss(&model, &plus, &x, &e, &target) - sisdr_loss(&model, &minus, &x, &e, &target)) / (2.0 * h);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4);
        assert!(rel < 1e-3, "{name}[{j}]: analytic {analytic} numeric {numeric}");
        checked += 1;
    }
    assert_eq!(checked, store.len());
}

#[test]
fn gradients_stay_finite_on_random_inputs() {
    let cfg = tiny();
    for trial in 0..100u64 {
        let (model, store) = WdTcn::init(&cfg, trial).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial);
        let len = rng.random_range(8..80);
        let (x, e) = example(&cfg, len, trial);
        let e = if e.cols() == 0 { Tensor::zeros(3, 1) } else { e };
        let (target, _) = example(&cfg, len, trial + 7);
        let mut g = Graph::new(&store);
        let (xv, ev) = (g.constant(Tensor::row_vector(&x)), g.constant(e));
        let out = model.forward_graph(&mut g, xv, ev).unwrap();
        let s = g.si_sdr(out.estimate, &target, false, 1e-12);
        let grads = g.backward(s);
        for id in store.ids() {
            if let Some(t) = grads.param(id) {
                assert!(t.is_finite(), "trial {trial}: {}", store.name(id));
            }
        }
    }
}

#[test]
fn param_counts() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    Conv::pointwise(&mut store, "c", 4, 4, &mut rng);
    assert_eq!(store.n_scalars(), 20);

    let cfg = ModelConfig::default();
    let n = param_count(&cfg).unwrap();
    assert!((620_000..=760_000).contains(&n), "default config has {n} parameters");
    let doubled = ModelConfig { n_repeats: 4, ..cfg };
    assert!(param_count(&doubled).unwrap() > n);
}

#[test]
fn config_validation() {
    let bad = [
        ModelConfig { feat_dim: 0, ..tiny() },
        ModelConfig { kernel_size: 4, ..tiny() },
        ModelConfig { dilation_set_per_block: vec![vec![]], ..tiny() },
        ModelConfig { dilation_set_per_block: vec![vec![1], vec![2]], ..tiny() },
    ];
    for cfg in bad {
        assert!(matches!(WdTcn::init(&cfg, 0), Err(ModelError::InvalidConfig(_))));
    }
    assert_eq!(default_dilations(4), vec![vec![1, 2], vec![1, 4], vec![1, 8], vec![1, 16]]);
}
