//! Time-domain extraction backbone: audio encoder, EEG encoder, cross-modal
//! attention fusion, weighted multi-dilation separator and decoder.

mod blocks;
mod layers;

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::graph::{ConvSpec, Graph, Var};
use crate::params::{uniform, ParamId, ParamStore};
use crate::tensor::Tensor;

pub use blocks::{DepthConvBlock, SeAttention, WdBlock};
pub use layers::{Conv, Depthwise, GlobalNorm, Prelu};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("input of {len} samples is shorter than the encoder kernel ({kernel})")]
    TooShort { len: usize, kernel: usize },
    #[error("EEG has {found} channels, model expects {expected}")]
    ChannelMismatch { expected: usize, found: usize },
    #[error("EEG spans {eeg_s:.4} s but audio spans {audio_s:.4} s")]
    Alignment { audio_s: f64, eeg_s: f64 },
    #[error("mask shape {mask:?} does not match embedding shape {embedding:?}")]
    ShapeMismatch { embedding: (usize, usize), mask: (usize, usize) },
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct ModelConfig {
    pub enc_kernel: usize,
    pub enc_stride: usize,
    /// Embedding channels of the audio encoder.
    pub feat_dim: usize,
    /// Channels of the separator stack.
    pub bottleneck_dim: usize,
    /// Hidden channels inside each separator block.
    pub hidden_dim: usize,
    pub kernel_size: usize,
    pub n_blocks: usize,
    pub n_repeats: usize,
    /// Dilations of block `b` within a repeat; one list per block.
    pub dilation_set_per_block: Vec<Vec<usize>>,
    pub se_reduction: usize,
    pub eeg_in_channels: usize,
    pub eeg_feat_dim: usize,
    pub eeg_hidden_dim: usize,
    pub eeg_n_blocks: usize,
    pub eeg_down_stride: usize,
    /// Attention radius in audio frames; 0 attends over the whole segment.
    pub attention_window: usize,
    pub audio_rate_hz: f64,
    pub eeg_rate_hz: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let n_blocks = 4;
        Self {
            enc_kernel: 16,
            enc_stride: 8,
            feat_dim: 128,
            bottleneck_dim: 64,
            hidden_dim: 320,
            kernel_size: 3,
            n_blocks,
            n_repeats: 2,
            dilation_set_per_block: default_dilations(n_blocks),
            se_reduction: 4,
            eeg_in_channels: 30,
            eeg_feat_dim: 64,
            eeg_hidden_dim: 128,
            eeg_n_blocks: 3,
            eeg_down_stride: 2,
            attention_window: 32,
            audio_rate_hz: 14_700.0,
            eeg_rate_hz: 128.0,
        }
    }
}

impl ModelConfig {
    /// Small profile for desk-scale runs: 8 kHz audio, 32 embedding channels.
    pub fn desk(eeg_in_channels: usize) -> Self {
        let n_blocks = 3;
        Self {
            feat_dim: 32,
            bottleneck_dim: 32,
            hidden_dim: 64,
            n_blocks,
            n_repeats: 1,
            dilation_set_per_block: default_dilations(n_blocks),
            eeg_in_channels,
            eeg_feat_dim: 16,
            eeg_hidden_dim: 32,
            eeg_n_blocks: 2,
            attention_window: 16,
            audio_rate_hz: 8000.0,
            ..Self::default()
        }
    }

    /// Minimal profile for gradient checks.
    pub fn tiny(eeg_in_channels: usize) -> Self {
        Self {
            enc_kernel: 4,
            enc_stride: 2,
            feat_dim: 8,
            bottleneck_dim: 6,
            hidden_dim: 8,
            kernel_size: 3,
            n_blocks: 1,
            n_repeats: 1,
            dilation_set_per_block: vec![vec![1, 2]],
            se_reduction: 2,
            eeg_in_channels,
            eeg_feat_dim: 4,
            eeg_hidden_dim: 6,
            eeg_n_blocks: 2,
            eeg_down_stride: 2,
            attention_window: 3,
            audio_rate_hz: 256.0,
            eeg_rate_hz: 32.0,
        }
    }
}

/// `{1, 2^b}` for blocks `b = 1..=n_blocks`.
pub fn default_dilations(n_blocks: usize) -> Vec<Vec<usize>> {
    (1..=n_blocks).map(|b| vec![1, 1 << b]).collect()
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.into()));
        let dims = [
            self.enc_kernel,
            self.enc_stride,
            self.feat_dim,
            self.bottleneck_dim,
            self.hidden_dim,
            self.kernel_size,
            self.n_blocks,
            self.n_repeats,
            self.se_reduction,
            self.eeg_in_channels,
            self.eeg_feat_dim,
            self.eeg_hidden_dim,
            self.eeg_n_blocks,
            self.eeg_down_stride,
        ];
        if dims.contains(&0) {
            return bad("all dimensions and counts must be positive");
        }
        if self.kernel_size % 2 == 0 {
            return bad("kernel_size must be odd");
        }
        if self.dilation_set_per_block.len() != self.n_blocks {
            return bad("dilation_set_per_block needs one list per block");
        }
        if self.dilation_set_per_block.iter().any(|d| d.is_empty() || d.contains(&0)) {
            return bad("dilation lists must be non-empty and positive");
        }
        if !(self.audio_rate_hz > 0.0 && self.eeg_rate_hz > 0.0) {
            return bad("rates must be positive");
        }
        Ok(())
    }

    /// Encoder frames for `len` input samples.
    pub fn n_frames(&self, len: usize) -> Option<usize> {
        (len >= self.enc_kernel).then(|| (len - self.enc_kernel) / self.enc_stride + 1)
    }

    /// EEG samples matching `audio_len` audio samples.
    pub fn eeg_len_for(&self, audio_len: usize) -> usize {
        libm::round(audio_len as f64 * self.eeg_rate_hz / self.audio_rate_hz) as usize
    }

    /// EEG feature frames after the strided input convolution.
    pub fn eeg_frames(&self, eeg_len: usize) -> usize {
        eeg_len.div_ceil(self.eeg_down_stride)
    }

    /// Fractional EEG-feature frame read by each audio frame, matching the
    /// centre time of the audio frame.
    pub fn alignment_positions(&self, n_frames: usize, eeg_frames: usize) -> Vec<f64> {
        let half = (self.enc_kernel - 1) as f64 / 2.0;
        let scale = self.eeg_rate_hz / (self.audio_rate_hz * self.eeg_down_stride as f64);
        let last = eeg_frames.saturating_sub(1) as f64;
        (0..n_frames).map(|i| ((i * self.enc_stride) as f64 + half) * scale).map(|p| p.clamp(0.0, last)).collect()
    }

    /// Checks that audio and EEG of these lengths can be aligned.
    pub fn check_alignment(&self, audio_len: usize, eeg_len: usize) -> Result<(), ModelError> {
        let audio_s = audio_len as f64 / self.audio_rate_hz;
        let eeg_s = eeg_len as f64 / self.eeg_rate_hz;
        if eeg_len == 0 || (audio_s - eeg_s).abs() > 1.0 / self.eeg_rate_hz + 1e-9 {
            return Err(ModelError::Alignment { audio_s, eeg_s });
        }
        Ok(())
    }
}

/// Nodes produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    /// Audio embedding `w_x`, `feat_dim × frames`.
    pub embedding: Var,
    /// EEG feature levels at the EEG feature rate.
    pub eeg_levels: Vec<Var>,
    /// Output of the fusion stage, `bottleneck_dim × frames`.
    pub fused: Var,
    pub mask: Var,
    /// Reconstructed waveform, `1 × T`.
    pub estimate: Var,
    /// One attention node per EEG level.
    pub attention: Vec<Var>,
}

/// Cross-modal attention for one EEG level.
#[derive(Clone, Debug)]
struct CrossAttention {
    query: Conv,
    key: Conv,
    value: Conv,
}

/// Parameter handles of the backbone inside a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct WdTcn {
    cfg: ModelConfig,
    encoder: Conv,
    sep_norm: GlobalNorm,
    bottleneck: Conv,
    eeg_down: Conv,
    eeg_blocks: Vec<DepthConvBlock>,
    cross: Vec<CrossAttention>,
    blocks: Vec<WdBlock>,
    mask_act: Prelu,
    mask_conv: Conv,
    decoder: ParamId,
}

impl WdTcn {
    /// Registers all parameters under `prefix` in `store`.
    pub fn build(cfg: &ModelConfig, store: &mut ParamStore, prefix: &str, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let p = |s: &str| format!("{prefix}{s}");
        let (n, bn, e) = (cfg.feat_dim, cfg.bottleneck_dim, cfg.eeg_feat_dim);

        let encoder = Conv::new(store, &p("encoder"), 1, n, cfg.enc_kernel, ConvSpec::plain(cfg.enc_stride), false, rng);
        let sep_norm = GlobalNorm::new(store, &p("separator.norm"), n);
        let bottleneck = Conv::pointwise(store, &p("separator.bottleneck"), n, bn, rng);

        let down = ConvSpec { stride: cfg.eeg_down_stride, dilation: 1, pad_left: 1, pad_right: 1 };
        let eeg_down = Conv::new(store, &p("eeg.down"), cfg.eeg_in_channels, e, 3, down, true, rng);
        let eeg_blocks = (0..cfg.eeg_n_blocks)
            .map(|k| DepthConvBlock::new(store, &p(&format!("eeg.block{k}")), e, cfg.eeg_hidden_dim, 3, 1 << k, rng))
            .collect();
        let cross = (0..cfg.eeg_n_blocks)
            .map(|l| CrossAttention {
                query: Conv::pointwise(store, &p(&format!("cmca{l}.query")), bn, bn, rng),
                key: Conv::pointwise(store, &p(&format!("cmca{l}.key")), e, bn, rng),
                value: Conv::pointwise(store, &p(&format!("cmca{l}.value")), e, bn, rng),
            })
            .collect();

        let mut blocks = Vec::with_capacity(cfg.n_repeats * cfg.n_blocks);
        for r in 0..cfg.n_repeats {
            for (b, dilations) in cfg.dilation_set_per_block.iter().enumerate() {
                let name = p(&format!("separator.r{r}b{b}"));
                blocks.push(WdBlock::new(store, &name, bn, cfg.hidden_dim, cfg.kernel_size, dilations, cfg.se_reduction, rng));
            }
        }
        let mask_act = Prelu::new(store, &p("separator.mask_act"));
        let mask_conv = Conv::pointwise(store, &p("separator.mask"), bn, n, rng);
        let bound = 1.0 / libm::sqrt(cfg.enc_kernel as f64);
        let decoder = store.add(p("decoder.weight"), uniform(rng, n, cfg.enc_kernel, bound));
        Ok(Self {
            cfg: cfg.clone(),
            encoder,
            sep_norm,
            bottleneck,
            eeg_down,
            eeg_blocks,
            cross,
            blocks,
            mask_act,
            mask_conv,
            decoder,
        })
    }

    /// A model in a fresh store.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamStore), ModelError> {
        let mut store = ParamStore::new();
        let model = Self::build(cfg, &mut store, "", seed)?;
        Ok((model, store))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn blocks(&self) -> &[WdBlock] {
        &self.blocks
    }

    /// `w_x = ReLU(conv(x))` for a `1 × T` input.
    pub fn audio_encode(&self, g: &mut Graph, x: Var) -> Result<Var, ModelError> {
        let len = g.value(x).cols();
        if len < self.cfg.enc_kernel {
            return Err(ModelError::TooShort { len, kernel: self.cfg.enc_kernel });
        }
        let y = self.encoder.forward(g, x);
        Ok(g.relu(y))
    }

    /// Pre-activation of the audio encoder.
    pub fn audio_encode_linear(&self, g: &mut Graph, x: Var) -> Result<Var, ModelError> {
        let len = g.value(x).cols();
        if len < self.cfg.enc_kernel {
            return Err(ModelError::TooShort { len, kernel: self.cfg.enc_kernel });
        }
        Ok(self.encoder.forward(g, x))
    }

    /// Multi-level EEG features, one per encoder block.
    pub fn eeg_encode(&self, g: &mut Graph, eeg: Var) -> Result<Vec<Var>, ModelError> {
        let found = g.value(eeg).rows();
        if found != self.cfg.eeg_in_channels {
            return Err(ModelError::ChannelMismatch { expected: self.cfg.eeg_in_channels, found });
        }
        let mut level = self.eeg_down.forward(g, eeg);
        let mut levels = Vec::with_capacity(self.eeg_blocks.len());
        for block in &self.eeg_blocks {
            level = block.forward(g, level);
            levels.push(level);
        }
        Ok(levels)
    }

    /// Audio pathway `a = 1×1(gLN(w_x))`.
    pub fn audio_pathway(&self, g: &mut Graph, w_x: Var) -> Var {
        let h = self.sep_norm.forward(g, w_x);
        self.bottleneck.forward(g, h)
    }

    /// Fuses the audio pathway with each EEG level: queries from audio,
    /// keys and values from the EEG level interpolated to the audio frames,
    /// level outputs averaged and added to `a`. Returns the fused node and
    /// the attention nodes.
    pub fn cmca_fuse(&self, g: &mut Graph, a: Var, levels: &[Var]) -> (Var, Vec<Var>) {
        let frames = g.value(a).cols();
        let window = (self.cfg.attention_window > 0).then_some(self.cfg.attention_window);
        let mut terms = vec![(a, 1.0)];
        let mut attention = Vec::with_capacity(levels.len());
        let k = 1.0 / levels.len().max(1) as f64;
        for (cross, &level) in self.cross.iter().zip(levels) {
            let positions = self.cfg.alignment_positions(frames, g.value(level).cols());
            let q = cross.query.forward(g, a);
            let key = cross.key.forward(g, level);
            let key = g.interp_cols(key, &positions);
            let value = cross.value.forward(g, level);
            let value = g.interp_cols(value, &positions);
            let att = g.attention(q, key, value, window);
            attention.push(att);
            terms.push((att, k));
        }
        (g.weighted_sum(&terms), attention)
    }

    /// Mask from the fused features: separator stack, PReLU, `1×1`, sigmoid.
    pub fn mask_head(&self, g: &mut Graph, fused: Var) -> Var {
        let mut h = fused;
        for block in &self.blocks {
            h = block.forward(g, h);
        }
        let h = self.mask_act.forward(g, h);
        let m = self.mask_conv.forward(g, h);
        g.sigmoid(m)
    }

    /// Mask for an embedding and its EEG levels.
    pub fn separate(&self, g: &mut Graph, w_x: Var, levels: &[Var]) -> Var {
        let a = self.audio_pathway(g, w_x);
        let (fused, _) = self.cmca_fuse(g, a, levels);
        self.mask_head(g, fused)
    }

    /// Transposed-convolution reconstruction of `w_x ⊙ m`, cut or
    /// zero-padded to `out_len` samples.
    pub fn decode(&self, g: &mut Graph, w_x: Var, mask: Var, out_len: usize) -> Result<Var, ModelError> {
        let (embedding, m) = (g.value(w_x).shape(), g.value(mask).shape());
        if embedding != m {
            return Err(ModelError::ShapeMismatch { embedding, mask: m });
        }
        let masked = g.mul(w_x, mask);
        let w = g.param(self.decoder);
        let y = g.conv_transpose1d(masked, w, 1, self.cfg.enc_stride);
        Ok(g.fit_cols(y, out_len))
    }

    /// Full pass for a `1 × T` mixture and `eeg_in_channels × T_e` EEG.
    pub fn forward_graph(&self, g: &mut Graph, mixture: Var, eeg: Var) -> Result<ForwardVars, ModelError> {
        let len = g.value(mixture).cols();
        self.cfg.check_alignment(len, g.value(eeg).cols())?;
        let embedding = self.audio_encode(g, mixture)?;
        let eeg_levels = self.eeg_encode(g, eeg)?;
        let a = self.audio_pathway(g, embedding);
        let (fused, attention) = self.cmca_fuse(g, a, &eeg_levels);
        let mask = self.mask_head(g, fused);
        let estimate = self.decode(g, embedding, mask, len)?;
        Ok(ForwardVars { embedding, eeg_levels, fused, mask, estimate, attention })
    }

    /// Estimated target waveform.
    pub fn forward(&self, params: &ParamStore, mixture: &[f64], eeg: &Tensor) -> Result<Vec<f64>, ModelError> {
        let mut g = Graph::new(params);
        let x = g.constant(Tensor::row_vector(mixture));
        let e = g.constant(eeg.clone());
        let out = self.forward_graph(&mut g, x, e)?;
        Ok(g.value(out.estimate).data().to_vec())
    }
}

/// Number of trainable scalars of a backbone with this config.
pub fn param_count(cfg: &ModelConfig) -> Result<usize, ModelError> {
    let (_, store) = WdTcn::init(cfg, 0)?;
    Ok(store.n_scalars())
}

#[cfg(test)]
mod tests;
