//! Parameterised building blocks shared by the backbone and the selector.

use alloc::format;

use rand::Rng;

use crate::graph::{ConvSpec, Graph, Var};
use crate::params::{uniform, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Dense 1-D convolution `C_in → C_out` with kernel `K`.
#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub spec: ConvSpec,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        spec: ConvSpec,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / libm::sqrt((cin * kernel) as f64);
        let w = store.add(format!("{name}.weight"), uniform(rng, cout, cin * kernel, bound));
        let b = bias.then(|| store.add(format!("{name}.bias"), uniform(rng, cout, 1, bound)));
        Self { w, b, spec }
    }

    /// `1 × 1` convolution with bias.
    pub fn pointwise<R: Rng>(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut R) -> Self {
        Self::new(store, name, cin, cout, 1, ConvSpec::plain(1), true, rng)
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.w);
        let b = self.b.map(|b| g.param(b));
        g.conv1d(x, w, b, self.spec)
    }
}

/// Length-preserving per-channel convolution with bias.
#[derive(Clone, Debug)]
pub struct Depthwise {
    pub w: ParamId,
    pub b: ParamId,
    pub dilation: usize,
}

impl Depthwise {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        kernel: usize,
        dilation: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / libm::sqrt(kernel as f64);
        let w = store.add(format!("{name}.weight"), uniform(rng, channels, kernel, bound));
        let b = store.add(format!("{name}.bias"), uniform(rng, channels, 1, bound));
        Self { w, b, dilation }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let kernel = g.params().get(self.w).cols();
        let (w, b) = (g.param(self.w), g.param(self.b));
        g.depthwise_conv1d(x, w, Some(b), ConvSpec::same(kernel, self.dilation))
    }
}

/// Global layer norm with per-channel affine parameters.
#[derive(Clone, Debug)]
pub struct GlobalNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl GlobalNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Tensor::full(channels, 1, 1.0));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(channels, 1));
        Self { gain, bias }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let (gain, bias) = (g.param(self.gain), g.param(self.bias));
        g.global_norm(x, gain, bias)
    }
}

/// PReLU with one shared slope.
#[derive(Clone, Debug)]
pub struct Prelu {
    pub a: ParamId,
}

impl Prelu {
    pub fn new(store: &mut ParamStore, name: &str) -> Self {
        Self { a: store.add(format!("{name}.slope"), Tensor::scalar(0.25)) }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let a = g.param(self.a);
        g.prelu(x, a)
    }
}

/// Pointwise entry stage of a depthwise-separable block:
/// `1×1 conv → PReLU → gLN`.
#[derive(Clone, Debug)]
pub(crate) struct Entry {
    pub conv: Conv,
    pub act: Prelu,
    pub norm: GlobalNorm,
}

impl Entry {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, cin: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            conv: Conv::pointwise(store, &format!("{name}.in"), cin, hidden, rng),
            act: Prelu::new(store, &format!("{name}.act1")),
            norm: GlobalNorm::new(store, &format!("{name}.norm1"), hidden),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.conv.forward(g, x);
        let h = self.act.forward(g, h);
        self.norm.forward(g, h)
    }
}

/// Exit stage: `PReLU → gLN → 1×1 conv`, then the residual add.
#[derive(Clone, Debug)]
pub(crate) struct Exit {
    pub act: Prelu,
    pub norm: GlobalNorm,
    pub conv: Conv,
}

impl Exit {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, hidden: usize, cout: usize, rng: &mut R) -> Self {
        Self {
            act: Prelu::new(store, &format!("{name}.act2")),
            norm: GlobalNorm::new(store, &format!("{name}.norm2"), hidden),
            conv: Conv::pointwise(store, &format!("{name}.out"), hidden, cout, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, residual: Var, h: Var) -> Var {
        let h = self.act.forward(g, h);
        let h = self.norm.forward(g, h);
        let y = self.conv.forward(g, h);
        g.add(residual, y)
    }
}
