//! Depthwise-separable residual blocks.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use super::layers::{Conv, Depthwise, Entry, Exit};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;

/// Standard residual depthwise-separable block:
/// `x + 1×1(gLN(PReLU(dw_d(gLN(PReLU(1×1(x)))))))`.
#[derive(Clone, Debug)]
pub struct DepthConvBlock {
    pub(crate) entry: Entry,
    pub(crate) dw: Depthwise,
    pub(crate) exit: Exit,
}

impl DepthConvBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        hidden: usize,
        kernel: usize,
        dilation: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            entry: Entry::new(store, name, channels, hidden, rng),
            dw: Depthwise::new(store, &format!("{name}.dw"), hidden, kernel, dilation, rng),
            exit: Exit::new(store, name, hidden, channels, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.entry.forward(g, x);
        let h = self.dw.forward(g, h);
        self.exit.forward(g, x, h)
    }
}

/// Squeeze-and-excite scorer: each branch is pooled over time, passed
/// through a shared `C → C/r → 1` bottleneck, and the scores are
/// softmax-normalised across branches.
#[derive(Clone, Debug)]
pub struct SeAttention {
    pub(crate) squeeze: Conv,
    pub(crate) excite: Conv,
}

impl SeAttention {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, channels: usize, reduction: usize, rng: &mut R) -> Self {
        let mid = (channels / reduction).max(1);
        Self {
            squeeze: Conv::pointwise(store, &format!("{name}.fc1"), channels, mid, rng),
            excite: Conv::pointwise(store, &format!("{name}.fc2"), mid, 1, rng),
        }
    }

    /// Branch weights as an `n_branches × 1` node on the simplex.
    pub fn weights(&self, g: &mut Graph, branches: &[Var]) -> Var {
        let scores: Vec<Var> = branches
            .iter()
            .map(|&y| {
                let d = g.mean_cols(y);
                let z = self.squeeze.forward(g, d);
                let z = g.relu(z);
                self.excite.forward(g, z)
            })
            .collect();
        let z = g.concat_rows(&scores);
        g.softmax(z)
    }
}

/// Weighted multi-dilation block: the single depthwise convolution of a
/// [`DepthConvBlock`] is replaced by parallel branches with different
/// dilations, mixed by [`SeAttention`] weights.
#[derive(Clone, Debug)]
pub struct WdBlock {
    pub(crate) entry: Entry,
    pub(crate) branches: Vec<Depthwise>,
    pub(crate) se: SeAttention,
    pub(crate) exit: Exit,
}

impl WdBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        hidden: usize,
        kernel: usize,
        dilations: &[usize],
        se_reduction: usize,
        rng: &mut R,
    ) -> Self {
        assert!(!dilations.is_empty(), "WdBlock needs at least one dilation");
        let entry = Entry::new(store, name, channels, hidden, rng);
        let branches = dilations
            .iter()
            .enumerate()
            .map(|(i, &d)| Depthwise::new(store, &format!("{name}.dw{i}"), hidden, kernel, d, rng))
            .collect();
        let se = SeAttention::new(store, &format!("{name}.se"), hidden, se_reduction, rng);
        let exit = Exit::new(store, name, hidden, channels, rng);
        Self { entry, branches, se, exit }
    }

    pub fn dilations(&self) -> Vec<usize> {
        self.branches.iter().map(|b| b.dilation).collect()
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        self.forward_with_weights(g, x).0
    }

    /// Output and the branch-weight node.
    pub fn forward_with_weights(&self, g: &mut Graph, x: Var) -> (Var, Var) {
        let h = self.entry.forward(g, x);
        let ys: Vec<Var> = self.branches.iter().map(|b| b.forward(g, h)).collect();
        let w = self.se.weights(g, &ys);
        let weighted: Vec<Var> = ys
            .iter()
            .enumerate()
            .map(|(i, &y)| {
                let wi = g.pick(w, i);
                g.scale_by(y, wi)
            })
            .collect();
        let mut combined = weighted[0];
        for &y in &weighted[1..] {
            combined = g.add(combined, y);
        }
        (self.exit.forward(g, x, combined), w)
    }

    /// The standard block sharing this block's parameters, when there is a
    /// single branch.
    pub fn as_standard(&self) -> Option<DepthConvBlock> {
        match self.branches.as_slice() {
            [dw] => Some(DepthConvBlock { entry: self.entry.clone(), dw: dw.clone(), exit: self.exit.clone() }),
            _ => None,
        }
    }
}
