//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation of one forward pass. Calling
//! [`Graph::backward`] on a scalar node walks the record in reverse and
//! returns the gradient of that scalar with respect to every node that
//! depends on a parameter or a differentiable input.
//!
//! Shape mismatches are programming errors and panic; user-facing checks
//! happen in the model layer before nodes are built.

use alloc::vec;
use alloc::vec::Vec;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{add_into, axpy, dot, gemm, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Stride, dilation and zero padding of a 1-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub dilation: usize,
    pub pad_left: usize,
    pub pad_right: usize,
}

impl ConvSpec {
    pub const fn plain(stride: usize) -> Self {
        Self { stride, dilation: 1, pad_left: 0, pad_right: 0 }
    }

    /// Length-preserving padding for an odd kernel at unit stride.
    pub const fn same(kernel: usize, dilation: usize) -> Self {
        let pad = dilation * (kernel - 1) / 2;
        Self { stride: 1, dilation, pad_left: pad, pad_right: pad }
    }

    pub fn output_len(&self, input_len: usize, kernel: usize) -> Option<usize> {
        let padded = input_len + self.pad_left + self.pad_right;
        let span = self.dilation * (kernel - 1) + 1;
        if padded < span {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }

    fn is_pointwise(&self, kernel: usize) -> bool {
        kernel == 1 && self.stride == 1 && self.pad_left == 0 && self.pad_right == 0
    }
}

const GLN_EPS: f64 = 1e-8;

enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    RowScale(Var, Var),
    WeightedSum(Vec<(Var, f64)>),
    Relu(Var),
    Sigmoid(Var),
    Prelu(Var, Var),
    Conv { x: Var, w: Var, b: Option<Var>, spec: ConvSpec },
    Depthwise { x: Var, w: Var, b: Option<Var>, spec: ConvSpec },
    ConvTranspose { x: Var, w: Var, stride: usize },
    GlobalNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: f64 },
    MeanCols(Var),
    MatMul(Var, Var),
    Softmax(Var),
    Pick(Var, usize),
    Interp { x: Var, taps: Vec<(usize, usize, f64)> },
    Attention { q: Var, k: Var, v: Var, window: Option<usize>, weights: Vec<f64>, offsets: Vec<usize> },
    SiSdr { est: Var, reference: Vec<f64>, center: bool, eps: f64 },
    Discretize { s: Var, normalizer: f64, k1: f64 },
    SqNorm(Var),
    FitCols { x: Var },
    ConcatRows(Vec<Var>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Tape of one forward pass over a fixed parameter set.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self { params, nodes: Vec::new(), param_vars: vec![None; params.len()] }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable input; its gradient is available from [`Gradients::wrt`].
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// The node holding parameter `id`, created on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let v = self.push(self.params.get(id).clone(), Op::Leaf, true);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "add: shape mismatch");
        let mut out = ta.clone();
        add_into(out.data_mut(), tb.data());
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "mul: shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_vec(ta.rows(), ta.cols(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|x| x * k);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, k), ng)
    }

    /// `x · s` for a `1 × 1` node `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Var {
        assert_eq!(self.value(s).shape(), (1, 1), "scale_by: expected scalar");
        let k = self.value(s).get(0, 0);
        let out = self.value(x).map(|v| v * k);
        let ng = self.ng(x) || self.ng(s);
        self.push(out, Op::ScaleBy(x, s), ng)
    }

    /// Row `r` of `x` multiplied by `s[r]`, `s` being `rows × 1`.
    pub fn row_scale(&mut self, x: Var, s: Var) -> Var {
        let (tx, ts) = (self.value(x), self.value(s));
        assert_eq!(ts.shape(), (tx.rows(), 1), "row_scale: gate shape mismatch");
        let mut out = tx.clone();
        for r in 0..tx.rows() {
            let k = ts.get(r, 0);
            out.row_mut(r).iter_mut().for_each(|v| *v *= k);
        }
        let ng = self.ng(x) || self.ng(s);
        self.push(out, Op::RowScale(x, s), ng)
    }

    /// `Σ k_i · x_i` over same-shape nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        assert!(!terms.is_empty(), "weighted_sum: no terms");
        let shape = self.value(terms[0].0).shape();
        let mut out = Tensor::zeros(shape.0, shape.1);
        let mut ng = false;
        for &(v, k) in terms {
            let t = self.value(v);
            assert_eq!(t.shape(), shape, "weighted_sum: shape mismatch");
            axpy(out.data_mut(), k, t.data());
            ng |= self.ng(v);
        }
        self.push(out, Op::WeightedSum(terms.to_vec()), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let ng = self.ng(x);
        self.push(out, Op::Relu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let ng = self.ng(x);
        self.push(out, Op::Sigmoid(x), ng)
    }

    /// Parametric ReLU with a single learnable slope `a` (`1 × 1`).
    pub fn prelu(&mut self, x: Var, a: Var) -> Var {
        let slope = self.value(a).get(0, 0);
        let out = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        let ng = self.ng(x) || self.ng(a);
        self.push(out, Op::Prelu(x, a), ng)
    }

    /// Dense 1-D convolution. `x` is `C_in × T`, `w` is `C_out × (C_in·K)`
    /// laid out as `[c_out][c_in][k]`, `b` is `C_out × 1`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Var {
        let (tx, tw) = (self.value(x), self.value(w));
        let (cin, t) = tx.shape();
        let cout = tw.rows();
        assert!(cin > 0 && tw.cols() % cin == 0, "conv1d: weight/input channel mismatch");
        let kernel = tw.cols() / cin;
        let tout = spec.output_len(t, kernel).expect("conv1d: input shorter than kernel span");
        let mut out = Tensor::zeros(cout, tout);
        if spec.is_pointwise(kernel) {
            gemm(cout, cin, tout, tw.data(), false, tx.data(), false, out.data_mut(), 0.0);
        } else {
            let col = im2col(tx, kernel, spec, tout);
            gemm(cout, cin * kernel, tout, tw.data(), false, &col, false, out.data_mut(), 0.0);
        }
        if let Some(b) = b {
            add_row_bias(&mut out, self.value(b));
        }
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(out, Op::Conv { x, w, b, spec }, ng)
    }

    /// Per-channel 1-D convolution. `x` is `C × T`, `w` is `C × K`.
    pub fn depthwise_conv1d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Var {
        let (tx, tw) = (self.value(x), self.value(w));
        let (c, t) = tx.shape();
        assert_eq!(tw.rows(), c, "depthwise_conv1d: channel mismatch");
        let kernel = tw.cols();
        let tout = spec.output_len(t, kernel).expect("depthwise_conv1d: input shorter than kernel span");
        let mut out = Tensor::zeros(c, tout);
        for ch in 0..c {
            let xr = tx.row(ch);
            let wr = tw.row(ch);
            let yr = out.row_mut(ch);
            for (k, &wk) in wr.iter().enumerate() {
                let off = (k * spec.dilation) as isize - spec.pad_left as isize;
                let (lo, hi) = valid_range(off, spec.stride, t, tout);
                if lo == hi {
                    continue;
                }
                if spec.stride == 1 {
                    let src = &xr[(lo as isize + off) as usize..(hi as isize + off) as usize];
                    axpy(&mut yr[lo..hi], wk, src);
                } else {
                    for (to, y) in yr.iter_mut().enumerate().take(hi).skip(lo) {
                        *y += wk * xr[(to as isize * spec.stride as isize + off) as usize];
                    }
                }
            }
        }
        if let Some(b) = b {
            add_row_bias(&mut out, self.value(b));
        }
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(out, Op::Depthwise { x, w, b, spec }, ng)
    }

    /// Transposed convolution without padding. `x` is `C_in × F`, `w` is
    /// `C_in × (C_out·K)` laid out as `[c_in][c_out][k]`; output length is
    /// `(F − 1)·stride + K`.
    pub fn conv_transpose1d(&mut self, x: Var, w: Var, out_channels: usize, stride: usize) -> Var {
        let (tx, tw) = (self.value(x), self.value(w));
        let (cin, f) = tx.shape();
        assert_eq!(tw.rows(), cin, "conv_transpose1d: channel mismatch");
        assert!(out_channels > 0 && tw.cols() % out_channels == 0);
        let kernel = tw.cols() / out_channels;
        let tout = if f == 0 { 0 } else { (f - 1) * stride + kernel };
        let ck = out_channels * kernel;
        let mut cols = vec![0.0; ck * f];
        gemm(ck, cin, f, tw.data(), true, tx.data(), false, &mut cols, 0.0);
        let mut out = Tensor::zeros(out_channels, tout);
        for co in 0..out_channels {
            let yr = out.row_mut(co);
            for k in 0..kernel {
                let cr = &cols[(co * kernel + k) * f..(co * kernel + k + 1) * f];
                for (t, &v) in cr.iter().enumerate() {
                    yr[t * stride + k] += v;
                }
            }
        }
        let ng = self.ng(x) || self.ng(w);
        self.push(out, Op::ConvTranspose { x, w, stride }, ng)
    }

    /// Global layer normalisation over all entries of a `C × T` node with
    /// per-channel gain and bias (`C × 1` each).
    pub fn global_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let tx = self.value(x);
        let (c, t) = tx.shape();
        let n = tx.len() as f64;
        let mean = tx.sum() / n;
        let var = tx.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv_std = 1.0 / libm::sqrt(var + GLN_EPS);
        let xhat: Vec<f64> = tx.data().iter().map(|v| (v - mean) * inv_std).collect();
        let (tg, tb) = (self.value(gain), self.value(bias));
        assert_eq!(tg.shape(), (c, 1), "global_norm: gain shape");
        assert_eq!(tb.shape(), (c, 1), "global_norm: bias shape");
        let mut out = Tensor::zeros(c, t);
        for ch in 0..c {
            let (g, b) = (tg.get(ch, 0), tb.get(ch, 0));
            for (y, xh) in out.row_mut(ch).iter_mut().zip(&xhat[ch * t..(ch + 1) * t]) {
                *y = g * xh + b;
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        self.push(out, Op::GlobalNorm { x, gain, bias, xhat, inv_std }, ng)
    }

    /// Mean over columns: `R × T → R × 1`.
    pub fn mean_cols(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let t = tx.cols().max(1) as f64;
        let data = (0..tx.rows()).map(|r| tx.row(r).iter().sum::<f64>() / t).collect();
        let out = Tensor::from_vec(tx.rows(), 1, data);
        let ng = self.ng(x);
        self.push(out, Op::MeanCols(x), ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.cols(), tb.rows(), "matmul: inner dimension mismatch");
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = Tensor::zeros(m, n);
        gemm(m, k, n, ta.data(), false, tb.data(), false, out.data_mut(), 0.0);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    /// Softmax over every entry of `x`.
    pub fn softmax(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let out = Tensor::from_vec(tx.rows(), tx.cols(), softmax(tx.data()));
        let ng = self.ng(x);
        self.push(out, Op::Softmax(x), ng)
    }

    /// Entry `index` (row-major) of `x` as a `1 × 1` node.
    pub fn pick(&mut self, x: Var, index: usize) -> Var {
        let out = Tensor::scalar(self.value(x).data()[index]);
        let ng = self.ng(x);
        self.push(out, Op::Pick(x, index), ng)
    }

    /// Linear interpolation along columns. Output column `j` reads the
    /// fractional input column `positions[j]`, clamped to the valid range.
    pub fn interp_cols(&mut self, x: Var, positions: &[f64]) -> Var {
        let tx = self.value(x);
        let (r, t) = tx.shape();
        assert!(t > 0, "interp_cols: empty input");
        let taps: Vec<(usize, usize, f64)> = positions
            .iter()
            .map(|&p| {
                let p = p.clamp(0.0, (t - 1) as f64);
                let i0 = libm::floor(p) as usize;
                let i1 = (i0 + 1).min(t - 1);
                (i0, i1, p - i0 as f64)
            })
            .collect();
        let mut out = Tensor::zeros(r, taps.len());
        for row in 0..r {
            let xr = tx.row(row);
            for (y, &(i0, i1, frac)) in out.row_mut(row).iter_mut().zip(&taps) {
                *y = (1.0 - frac) * xr[i0] + frac * xr[i1];
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::Interp { x, taps }, ng)
    }

    /// Scaled dot-product attention along time. `q` is `D × Tq`, `k` is
    /// `D × Tk`, `v` is `Dv × Tk`; output is `Dv × Tq`. With `window = Some(w)`
    /// query `t` sees keys `t−w ..= t+w` (requires `Tq == Tk`).
    pub fn attention(&mut self, q: Var, k: Var, v: Var, window: Option<usize>) -> Var {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let d = tq.rows();
        assert_eq!(tk.rows(), d, "attention: key dim mismatch");
        assert_eq!(tk.cols(), tv.cols(), "attention: key/value length mismatch");
        assert!(tk.cols() > 0, "attention: no keys");
        if window.is_some() {
            assert_eq!(tq.cols(), tk.cols(), "attention: windowed attention needs aligned sequences");
        }
        let (nq, nk, dv) = (tq.cols(), tk.cols(), tv.rows());
        let scale = 1.0 / libm::sqrt(d as f64);
        let (qt, kt, vt) = (tq.transpose(), tk.transpose(), tv.transpose());
        let mut offsets = Vec::with_capacity(nq + 1);
        let mut weights = Vec::new();
        let mut out_t = vec![0.0; nq * dv];
        let mut scores = Vec::new();
        for t in 0..nq {
            offsets.push(weights.len());
            let (lo, hi) = key_range(t, nk, window);
            let qr = &qt.data()[t * d..(t + 1) * d];
            scores.clear();
            scores.extend((lo..hi).map(|j| dot(qr, &kt.data()[j * d..(j + 1) * d]) * scale));
            let a = softmax(&scores);
            let orow = &mut out_t[t * dv..(t + 1) * dv];
            for (idx, j) in (lo..hi).enumerate() {
                axpy(orow, a[idx], &vt.data()[j * dv..(j + 1) * dv]);
            }
            weights.extend_from_slice(&a);
        }
        offsets.push(weights.len());
        let out = Tensor::from_vec(nq, dv, out_t).transpose();
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(out, Op::Attention { q, k, v, window, weights, offsets }, ng)
    }

    /// Attention weights of query `t` recorded by an [`attention`](Self::attention) node.
    pub fn attention_weights(&self, node: Var, t: usize) -> Option<&[f64]> {
        match &self.nodes[node.0].op {
            Op::Attention { weights, offsets, .. } => offsets.get(t + 1).map(|&end| &weights[offsets[t]..end]),
            _ => None,
        }
    }

    /// Scale-invariant SDR in dB of `est` (flattened) against a fixed
    /// reference, as a `1 × 1` node: `10·log10((‖x_t‖² + ε‖ŝ‖²)/(‖x_t − ŝ‖² + ε‖ŝ‖²))`.
    pub fn si_sdr(&mut self, est: Var, reference: &[f64], center: bool, eps: f64) -> Var {
        let te = self.value(est);
        assert_eq!(te.len(), reference.len(), "si_sdr: length mismatch");
        let parts = SiSdrParts::new(te.data(), reference, center, eps);
        assert!(parts.ref_energy > 0.0, "si_sdr: zero reference");
        let out = Tensor::scalar(parts.value());
        let ng = self.ng(est);
        self.push(out, Op::SiSdr { est, reference: reference.to_vec(), center, eps }, ng)
    }

    /// `k1·(−Σ(s − ½)²/normalizer + bias)` as a `1 × 1` node.
    pub fn discretization(&mut self, s: Var, normalizer: f64, k1: f64, bias: f64) -> Var {
        let sum: f64 = self.value(s).data().iter().map(|v| (v - 0.5) * (v - 0.5)).sum();
        let out = Tensor::scalar(k1 * (-sum / normalizer + bias));
        let ng = self.ng(s);
        self.push(out, Op::Discretize { s, normalizer, k1 }, ng)
    }

    /// `Σ s²` as a `1 × 1` node.
    pub fn sq_norm(&mut self, s: Var) -> Var {
        let out = Tensor::scalar(self.value(s).data().iter().map(|v| v * v).sum());
        let ng = self.ng(s);
        self.push(out, Op::SqNorm(s), ng)
    }

    /// First `len` columns of `x`, zero-padded when `x` is shorter.
    pub fn fit_cols(&mut self, x: Var, len: usize) -> Var {
        let tx = self.value(x);
        let keep = len.min(tx.cols());
        let mut out = Tensor::zeros(tx.rows(), len);
        for r in 0..tx.rows() {
            out.row_mut(r)[..keep].copy_from_slice(&tx.row(r)[..keep]);
        }
        let ng = self.ng(x);
        self.push(out, Op::FitCols { x }, ng)
    }

    /// Stacks same-width nodes vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows: no parts");
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        let mut ng = false;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols(), cols, "concat_rows: width mismatch");
            data.extend_from_slice(t.data());
            rows += t.rows();
            ng |= self.ng(p);
        }
        self.push(Tensor::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), ng)
    }

    /// Gradient of the scalar node `root` with respect to every node.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).shape(), (1, 1), "backward: root must be a scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));
        for i in (0..=root.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.backprop_node(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        Gradients { grads, param_vars: self.param_vars.clone() }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn accumulate_with(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut Tensor)) {
        if !self.ng(v) {
            return;
        }
        let (r, c) = self.value(v).shape();
        let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(r, c));
        f(slot);
    }

    fn backprop_node(&self, i: usize, gy: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gy.clone());
                self.accumulate(grads, *b, gy.clone());
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                self.accumulate_with(grads, *a, |g| {
                    for ((d, gyv), bv) in g.data_mut().iter_mut().zip(gy.data()).zip(tb.data()) {
                        *d += gyv * bv;
                    }
                });
                self.accumulate_with(grads, *b, |g| {
                    for ((d, gyv), av) in g.data_mut().iter_mut().zip(gy.data()).zip(ta.data()) {
                        *d += gyv * av;
                    }
                });
            }
            Op::Scale(a, k) => self.accumulate_with(grads, *a, |g| axpy(g.data_mut(), *k, gy.data())),
            Op::ScaleBy(x, s) => {
                let k = self.value(*s).get(0, 0);
                self.accumulate_with(grads, *x, |g| axpy(g.data_mut(), k, gy.data()));
                let ds = dot(gy.data(), self.value(*x).data());
                self.accumulate_with(grads, *s, |g| g.data_mut()[0] += ds);
            }
            Op::RowScale(x, s) => {
                let (tx, ts) = (self.value(*x), self.value(*s));
                self.accumulate_with(grads, *x, |g| {
                    for r in 0..tx.rows() {
                        axpy(g.row_mut(r), ts.get(r, 0), gy.row(r));
                    }
                });
                self.accumulate_with(grads, *s, |g| {
                    for r in 0..tx.rows() {
                        g.data_mut()[r] += dot(gy.row(r), tx.row(r));
                    }
                });
            }
            Op::WeightedSum(terms) => {
                for &(v, k) in terms {
                    self.accumulate_with(grads, v, |g| axpy(g.data_mut(), k, gy.data()));
                }
            }
            Op::Relu(x) => {
                self.accumulate_with(grads, *x, |g| {
                    for ((d, gyv), yv) in g.data_mut().iter_mut().zip(gy.data()).zip(y.data()) {
                        if *yv > 0.0 {
                            *d += gyv;
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                self.accumulate_with(grads, *x, |g| {
                    for ((d, gyv), yv) in g.data_mut().iter_mut().zip(gy.data()).zip(y.data()) {
                        *d += gyv * yv * (1.0 - yv);
                    }
                });
            }
            Op::Prelu(x, a) => {
                let tx = self.value(*x);
                let slope = self.value(*a).get(0, 0);
                self.accumulate_with(grads, *x, |g| {
                    for ((d, gyv), xv) in g.data_mut().iter_mut().zip(gy.data()).zip(tx.data()) {
                        *d += if *xv > 0.0 { *gyv } else { slope * gyv };
                    }
                });
                let da: f64 = tx.data().iter().zip(gy.data()).filter(|(xv, _)| **xv <= 0.0).map(|(xv, g)| xv * g).sum();
                self.accumulate_with(grads, *a, |g| g.data_mut()[0] += da);
            }
            Op::Conv { x, w, b, spec } => self.backprop_conv(*x, *w, *b, *spec, gy, grads),
            Op::Depthwise { x, w, b, spec } => self.backprop_depthwise(*x, *w, *b, *spec, gy, grads),
            Op::ConvTranspose { x, w, stride } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (cin, f) = tx.shape();
                let cout = gy.rows();
                let kernel = tw.cols() / cout;
                let ck = cout * kernel;
                let mut dcols = vec![0.0; ck * f];
                for co in 0..cout {
                    let gr = gy.row(co);
                    for k in 0..kernel {
                        let row = &mut dcols[(co * kernel + k) * f..(co * kernel + k + 1) * f];
                        for (t, d) in row.iter_mut().enumerate() {
                            *d = gr[t * stride + k];
                        }
                    }
                }
                self.accumulate_with(grads, *w, |g| gemm(cin, f, ck, tx.data(), false, &dcols, true, g.data_mut(), 1.0));
                self.accumulate_with(grads, *x, |g| gemm(cin, ck, f, tw.data(), false, &dcols, false, g.data_mut(), 1.0));
            }
            Op::GlobalNorm { x, gain, bias, xhat, inv_std } => {
                let (c, t) = y.shape();
                let tg = self.value(*gain);
                let n = (c * t) as f64;
                self.accumulate_with(grads, *gain, |g| {
                    for ch in 0..c {
                        g.data_mut()[ch] += dot(gy.row(ch), &xhat[ch * t..(ch + 1) * t]);
                    }
                });
                self.accumulate_with(grads, *bias, |g| {
                    for ch in 0..c {
                        g.data_mut()[ch] += gy.row(ch).iter().sum::<f64>();
                    }
                });
                if self.ng(*x) {
                    let mut gx = vec![0.0; c * t];
                    for ch in 0..c {
                        let k = tg.get(ch, 0);
                        for (d, gyv) in gx[ch * t..(ch + 1) * t].iter_mut().zip(gy.row(ch)) {
                            *d = gyv * k;
                        }
                    }
                    let mean_g = gx.iter().sum::<f64>() / n;
                    let mean_gx = dot(&gx, xhat) / n;
                    self.accumulate_with(grads, *x, |g| {
                        for ((d, gv), xh) in g.data_mut().iter_mut().zip(&gx).zip(xhat) {
                            *d += inv_std * (gv - mean_g - xh * mean_gx);
                        }
                    });
                }
            }
            Op::MeanCols(x) => {
                let t = self.value(*x).cols();
                let inv = 1.0 / t.max(1) as f64;
                self.accumulate_with(grads, *x, |g| {
                    for r in 0..g.rows() {
                        let k = gy.get(r, 0) * inv;
                        g.row_mut(r).iter_mut().for_each(|d| *d += k);
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                self.accumulate_with(grads, *a, |g| gemm(m, n, k, gy.data(), false, tb.data(), true, g.data_mut(), 1.0));
                self.accumulate_with(grads, *b, |g| gemm(k, m, n, ta.data(), true, gy.data(), false, g.data_mut(), 1.0));
            }
            Op::Softmax(x) => {
                let s = dot(gy.data(), y.data());
                self.accumulate_with(grads, *x, |g| {
                    for ((d, gyv), yv) in g.data_mut().iter_mut().zip(gy.data()).zip(y.data()) {
                        *d += yv * (gyv - s);
                    }
                });
            }
            Op::Pick(x, index) => {
                let k = gy.get(0, 0);
                self.accumulate_with(grads, *x, |g| g.data_mut()[*index] += k);
            }
            Op::Interp { x, taps } => {
                self.accumulate_with(grads, *x, |g| {
                    for r in 0..g.rows() {
                        let gr = gy.row(r);
                        let dr = g.row_mut(r);
                        for (gyv, &(i0, i1, frac)) in gr.iter().zip(taps) {
                            dr[i0] += (1.0 - frac) * gyv;
                            dr[i1] += frac * gyv;
                        }
                    }
                });
            }
            Op::Attention { q, k, v, window, weights, offsets } => {
                self.backprop_attention(*q, *k, *v, *window, weights, offsets, gy, grads);
            }
            Op::SiSdr { est, reference, center, eps } => {
                let te = self.value(*est);
                let parts = SiSdrParts::new(te.data(), reference, *center, *eps);
                let scale = gy.get(0, 0);
                let ge = parts.gradient();
                self.accumulate_with(grads, *est, |g| axpy(g.data_mut(), scale, &ge));
            }
            Op::Discretize { s, normalizer, k1 } => {
                let k = gy.get(0, 0) * -2.0 * k1 / normalizer;
                let ts = self.value(*s);
                self.accumulate_with(grads, *s, |g| {
                    for (d, sv) in g.data_mut().iter_mut().zip(ts.data()) {
                        *d += k * (sv - 0.5);
                    }
                });
            }
            Op::SqNorm(s) => {
                let k = 2.0 * gy.get(0, 0);
                let ts = self.value(*s);
                self.accumulate_with(grads, *s, |g| axpy(g.data_mut(), k, ts.data()));
            }
            Op::FitCols { x } => {
                self.accumulate_with(grads, *x, |g| {
                    let keep = g.cols().min(gy.cols());
                    for r in 0..g.rows() {
                        add_into(&mut g.row_mut(r)[..keep], &gy.row(r)[..keep]);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    self.accumulate_with(grads, p, |g| add_into(g.data_mut(), &gy.data()[start..start + n]));
                    start += n;
                }
            }
        }
    }

    fn backprop_conv(&self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec, gy: &Tensor, grads: &mut [Option<Tensor>]) {
        let (tx, tw) = (self.value(x), self.value(w));
        let (cin, t) = tx.shape();
        let cout = tw.rows();
        let kernel = tw.cols() / cin;
        let tout = gy.cols();
        if let Some(b) = b {
            self.accumulate_with(grads, b, |g| {
                for co in 0..cout {
                    g.data_mut()[co] += gy.row(co).iter().sum::<f64>();
                }
            });
        }
        let ck = cin * kernel;
        if spec.is_pointwise(kernel) {
            self.accumulate_with(grads, w, |g| gemm(cout, tout, cin, gy.data(), false, tx.data(), true, g.data_mut(), 1.0));
            self.accumulate_with(grads, x, |g| gemm(cin, cout, tout, tw.data(), true, gy.data(), false, g.data_mut(), 1.0));
            return;
        }
        if self.ng(w) {
            let col = im2col(tx, kernel, spec, tout);
            self.accumulate_with(grads, w, |g| gemm(cout, tout, ck, gy.data(), false, &col, true, g.data_mut(), 1.0));
        }
        if self.ng(x) {
            let mut dcol = vec![0.0; ck * tout];
            gemm(ck, cout, tout, tw.data(), true, gy.data(), false, &mut dcol, 0.0);
            self.accumulate_with(grads, x, |g| {
                for ci in 0..cin {
                    let dr = g.row_mut(ci);
                    for k in 0..kernel {
                        let off = (k * spec.dilation) as isize - spec.pad_left as isize;
                        let (lo, hi) = valid_range(off, spec.stride, t, tout);
                        let src = &dcol[(ci * kernel + k) * tout..(ci * kernel + k + 1) * tout];
                        for to in lo..hi {
                            dr[(to as isize * spec.stride as isize + off) as usize] += src[to];
                        }
                    }
                }
            });
        }
    }

    fn backprop_depthwise(&self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec, gy: &Tensor, grads: &mut [Option<Tensor>]) {
        let (tx, tw) = (self.value(x), self.value(w));
        let (c, t) = tx.shape();
        let kernel = tw.cols();
        let tout = gy.cols();
        if let Some(b) = b {
            self.accumulate_with(grads, b, |g| {
                for ch in 0..c {
                    g.data_mut()[ch] += gy.row(ch).iter().sum::<f64>();
                }
            });
        }
        let s = spec.stride as isize;
        self.accumulate_with(grads, w, |g| {
            for ch in 0..c {
                let (xr, gr) = (tx.row(ch), gy.row(ch));
                for k in 0..kernel {
                    let off = (k * spec.dilation) as isize - spec.pad_left as isize;
                    let (lo, hi) = valid_range(off, spec.stride, t, tout);
                    let acc = if lo == hi {
                        0.0
                    } else if spec.stride == 1 {
                        dot(&gr[lo..hi], &xr[(lo as isize + off) as usize..(hi as isize + off) as usize])
                    } else {
                        (lo..hi).map(|to| gr[to] * xr[(to as isize * s + off) as usize]).sum()
                    };
                    g.row_mut(ch)[k] += acc;
                }
            }
        });
        self.accumulate_with(grads, x, |g| {
            for ch in 0..c {
                let (wr, gr) = (tw.row(ch), gy.row(ch));
                let dr = g.row_mut(ch);
                for (k, &wk) in wr.iter().enumerate() {
                    let off = (k * spec.dilation) as isize - spec.pad_left as isize;
                    let (lo, hi) = valid_range(off, spec.stride, t, tout);
                    if lo == hi {
                        continue;
                    }
                    if spec.stride == 1 {
                        axpy(&mut dr[(lo as isize + off) as usize..(hi as isize + off) as usize], wk, &gr[lo..hi]);
                    } else {
                        for to in lo..hi {
                            dr[(to as isize * s + off) as usize] += wk * gr[to];
                        }
                    }
                }
            }
        });
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        window: Option<usize>,
        weights: &[f64],
        offsets: &[usize],
        gy: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (d, nq) = tq.shape();
        let (dv, nk) = tv.shape();
        let scale = 1.0 / libm::sqrt(d as f64);
        let (qt, kt, vt) = (tq.transpose(), tk.transpose(), tv.transpose());
        let gt = gy.transpose();
        let mut dq = vec![0.0; nq * d];
        let mut dk = vec![0.0; nk * d];
        let mut dvt = vec![0.0; nk * dv];
        let mut da = Vec::new();
        for t in 0..nq {
            let (lo, hi) = key_range(t, nk, window);
            let a = &weights[offsets[t]..offsets[t + 1]];
            let gr = &gt.data()[t * dv..(t + 1) * dv];
            da.clear();
            da.extend((lo..hi).map(|j| dot(gr, &vt.data()[j * dv..(j + 1) * dv])));
            for (idx, j) in (lo..hi).enumerate() {
                axpy(&mut dvt[j * dv..(j + 1) * dv], a[idx], gr);
            }
            let mix = dot(a, &da);
            let qr = &qt.data()[t * d..(t + 1) * d];
            for (idx, j) in (lo..hi).enumerate() {
                let ds = a[idx] * (da[idx] - mix) * scale;
                if ds == 0.0 {
                    continue;
                }
                axpy(&mut dq[t * d..(t + 1) * d], ds, &kt.data()[j * d..(j + 1) * d]);
                axpy(&mut dk[j * d..(j + 1) * d], ds, qr);
            }
        }
        self.accumulate(grads, q, Tensor::from_vec(nq, d, dq).transpose());
        self.accumulate(grads, k, Tensor::from_vec(nk, d, dk).transpose());
        self.accumulate(grads, v, Tensor::from_vec(nk, dv, dvt).transpose());
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    param_vars: Vec<Option<Var>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.param_vars.get(id.0).copied().flatten().and_then(|v| self.wrt(v))
    }

    /// Adds `scale ·` every parameter gradient into `acc` (indexed by [`ParamId`]).
    pub fn accumulate_params(&self, acc: &mut [Tensor], scale: f64) {
        for (i, slot) in acc.iter_mut().enumerate() {
            if let Some(g) = self.param(ParamId(i)) {
                axpy(slot.data_mut(), scale, g.data());
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

pub(crate) fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = x.iter().map(|v| libm::exp(v - m)).collect();
    let s: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= s);
    out
}

fn key_range(t: usize, nk: usize, window: Option<usize>) -> (usize, usize) {
    match window {
        Some(w) => (t.saturating_sub(w), (t + w + 1).min(nk)),
        None => (0, nk),
    }
}

/// Output positions `lo..hi` whose input index `to·stride + off` lies in `0..t`.
fn valid_range(off: isize, stride: usize, t: usize, tout: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
    let last = t as isize - 1 - off;
    let hi = if last < 0 { 0 } else { last / s + 1 };
    let lo = (lo as usize).min(tout);
    let hi = (hi as usize).min(tout).max(lo);
    (lo, hi)
}

fn im2col(x: &Tensor, kernel: usize, spec: ConvSpec, tout: usize) -> Vec<f64> {
    let (cin, t) = x.shape();
    let mut col = vec![0.0; cin * kernel * tout];
    let s = spec.stride as isize;
    for ci in 0..cin {
        let xr = x.row(ci);
        for k in 0..kernel {
            let off = (k * spec.dilation) as isize - spec.pad_left as isize;
            let (lo, hi) = valid_range(off, spec.stride, t, tout);
            let dst = &mut col[(ci * kernel + k) * tout..(ci * kernel + k + 1) * tout];
            for to in lo..hi {
                dst[to] = xr[(to as isize * s + off) as usize];
            }
        }
    }
    col
}

fn add_row_bias(out: &mut Tensor, bias: &Tensor) {
    assert_eq!(bias.shape(), (out.rows(), 1), "bias shape mismatch");
    for r in 0..out.rows() {
        let b = bias.get(r, 0);
        out.row_mut(r).iter_mut().for_each(|v| *v += b);
    }
}

/// Projection quantities shared by the SI-SDR value and its gradient.
pub(crate) struct SiSdrParts {
    est: Vec<f64>,
    target_proj: Vec<f64>,
    residual: Vec<f64>,
    pub(crate) ref_energy: f64,
    num: f64,
    den: f64,
    /// ε scaled by the estimate energy, added to both energies.
    floor: f64,
    center: bool,
}

impl SiSdrParts {
    pub(crate) fn new(est: &[f64], reference: &[f64], center: bool, eps: f64) -> Self {
        let (e, r) = if center { (centered(est), centered(reference)) } else { (est.to_vec(), reference.to_vec()) };
        let ref_energy = dot(&r, &r);
        let alpha = if ref_energy > 0.0 { dot(&e, &r) / ref_energy } else { 0.0 };
        let target_proj: Vec<f64> = r.iter().map(|v| alpha * v).collect();
        let residual: Vec<f64> = target_proj.iter().zip(&e).map(|(t, s)| t - s).collect();
        let num = dot(&target_proj, &target_proj);
        let den = dot(&residual, &residual);
        let floor = eps * dot(&e, &e);
        Self { est: e, target_proj, residual, ref_energy, num, den, floor, center }
    }

    fn silent(&self) -> bool {
        self.num + self.floor == 0.0 || self.den + self.floor == 0.0
    }

    /// 0 dB for a silent estimate.
    pub(crate) fn value(&self) -> f64 {
        if self.silent() {
            return 0.0;
        }
        10.0 * libm::log10((self.num + self.floor) / (self.den + self.floor))
    }

    pub(crate) fn gradient(&self) -> Vec<f64> {
        if self.silent() {
            return vec![0.0; self.est.len()];
        }
        let c = 10.0 / core::f64::consts::LN_10;
        let (kn, kd) = (2.0 * c / (self.num + self.floor), 2.0 * c / (self.den + self.floor));
        let ke = if self.floor > 0.0 { (kn - kd) * self.floor / dot(&self.est, &self.est) } else { 0.0 };
        let mut g: Vec<f64> = self
            .target_proj
            .iter()
            .zip(&self.residual)
            .zip(&self.est)
            .map(|((t, r), e)| kn * t + kd * r + ke * e)
            .collect();
        if self.center {
            let m = g.iter().sum::<f64>() / g.len().max(1) as f64;
            g.iter_mut().for_each(|v| *v -= m);
        }
        g
    }
}

fn centered(x: &[f64]) -> Vec<f64> {
    let m = x.iter().sum::<f64>() / x.len().max(1) as f64;
    x.iter().map(|v| v - m).collect()
}
