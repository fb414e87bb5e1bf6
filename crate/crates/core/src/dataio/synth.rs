//! Synthetic paired audio/EEG with planted informative channels.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{
    mix_at_snr, rms, segment, zero_phase_bandpass, zero_phase_lowpass, DataError, EegTrial, PairedTrial, Segment,
    SegmentMeta, Waveform,
};
use crate::geometry::ElectrodeLayout;
use crate::tensor::Tensor;

/// Layout id attached to generated EEG.
pub const SYNTH_LAYOUT_ID: &str = "synthetic";

/// Amplitude between bursts, relative to a full-scale burst.
const BURST_FLOOR: f64 = 0.01;
const BURST_LEN_S: (f64, f64) = (0.05, 0.2);

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct SynthSpec {
    pub n_channels: usize,
    /// Channels whose signal follows the target envelope.
    pub informative: Vec<usize>,
    /// Target-to-interferer ratio used when the pair is mixed.
    pub snr_db: f64,
    pub duration_s: f64,
    pub audio_rate_hz: f64,
    pub eeg_rate_hz: f64,
    /// Correlation of the noise shared across channels, in `[0, 1)`.
    pub noise_corr: f64,
    /// Pass band of the talker carrier noise.
    pub band_hz: (f64, f64),
    /// Mean burst rate of the talker amplitude modulation.
    pub syllable_rate_hz: f64,
    /// Scale of the target-envelope weight on informative channels.
    pub eeg_gain: f64,
    /// Bound of the interferer-envelope weight on every channel.
    pub leak_gain: f64,
    pub envelope_cutoff_hz: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_channels: 12,
            informative: vec![0, 1, 2, 3],
            snr_db: 0.0,
            duration_s: 10.0,
            audio_rate_hz: 8000.0,
            eeg_rate_hz: 128.0,
            noise_corr: 0.0,
            band_hz: (150.0, 3000.0),
            syllable_rate_hz: 3.0,
            eeg_gain: 1.5,
            leak_gain: 0.1,
            envelope_cutoff_hz: 8.0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let fail = |m| Err(DataError::InvalidSynthSpec(m));
        if self.n_channels == 0 {
            return fail("n_channels must be positive");
        }
        if self.informative.iter().any(|&c| c >= self.n_channels) {
            return fail("informative channel out of range");
        }
        if !(self.duration_s > 0.0) || !self.duration_s.is_finite() {
            return fail("duration_s must be positive");
        }
        if !(self.audio_rate_hz > 0.0) || !(self.eeg_rate_hz > 0.0) || self.eeg_rate_hz > self.audio_rate_hz {
            return fail("rates must be positive with eeg_rate_hz <= audio_rate_hz");
        }
        if !(0.0..1.0).contains(&self.noise_corr) {
            return fail("noise_corr must lie in [0, 1)");
        }
        let (lo, hi) = self.band_hz;
        if !(lo > 0.0 && lo < hi && hi < self.audio_rate_hz / 2.0) {
            return fail("band_hz must satisfy 0 < lo < hi < audio_rate_hz/2");
        }
        if !(self.envelope_cutoff_hz > 0.0 && self.envelope_cutoff_hz < self.eeg_rate_hz / 2.0) {
            return fail("envelope_cutoff_hz must lie below the EEG Nyquist rate");
        }
        if !(self.syllable_rate_hz > 0.0) || !self.snr_db.is_finite() {
            return fail("syllable_rate_hz must be positive and snr_db finite");
        }
        if !self.eeg_gain.is_finite() || !self.leak_gain.is_finite() {
            return fail("gains must be finite");
        }
        Ok(())
    }

    pub fn audio_len(&self) -> usize {
        libm::round(self.duration_s * self.audio_rate_hz) as usize
    }

    pub fn eeg_len(&self) -> usize {
        libm::round(self.duration_s * self.eeg_rate_hz) as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthTrial {
    pub target: Waveform,
    pub interferer: Waveform,
    pub eeg: EegTrial,
}

/// Envelope of `x` at the EEG rate: rectify, average within each EEG
/// sample period, zero-phase low-pass, then standardise to zero mean and
/// unit variance.
pub fn speech_envelope(x: &[f64], audio_rate_hz: f64, eeg_rate_hz: f64, cutoff_hz: f64) -> Vec<f64> {
    let n_out = libm::round(x.len() as f64 * eeg_rate_hz / audio_rate_hz) as usize;
    let mut env = vec![0.0; n_out];
    for (j, e) in env.iter_mut().enumerate() {
        let a = ((j as f64 * audio_rate_hz / eeg_rate_hz) as usize).min(x.len());
        let b = ((((j + 1) as f64) * audio_rate_hz / eeg_rate_hz) as usize).min(x.len());
        if b > a {
            *e = x[a..b].iter().map(|v| v.abs()).sum::<f64>() / (b - a) as f64;
        }
    }
    let env = zero_phase_lowpass(&env, cutoff_hz, eeg_rate_hz);
    standardize(env)
}

/// Generates a target talker, an interferer and EEG whose informative
/// channels follow the target envelope. Deterministic in `seed`.
pub fn synth_trial(spec: &SynthSpec, seed: u64) -> Result<SynthTrial, DataError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = spec.audio_len();
    let target = talker(spec, n, &mut rng);
    let interferer = talker(spec, n, &mut rng);
    let env_t = speech_envelope(&target, spec.audio_rate_hz, spec.eeg_rate_hz, spec.envelope_cutoff_hz);
    let env_i = speech_envelope(&interferer, spec.audio_rate_hz, spec.eeg_rate_hz, spec.envelope_cutoff_hz);
    let ne = env_t.len();

    let common: Vec<f64> = (0..ne).map(|_| rng.sample(StandardNormal)).collect();
    let (wc, wi) = (libm::sqrt(spec.noise_corr), libm::sqrt(1.0 - spec.noise_corr));
    let mut data = Tensor::zeros(spec.n_channels, ne);
    for c in 0..spec.n_channels {
        let a = if spec.informative.contains(&c) { spec.eeg_gain * rng.random_range(0.75..1.25) } else { 0.0 };
        let b = spec.leak_gain * rng.random_range(-1.0..1.0);
        for (t, v) in data.row_mut(c).iter_mut().enumerate() {
            let own: f64 = rng.sample(StandardNormal);
            *v = a * env_t[t] + b * env_i[t] + wc * common[t] + wi * own;
        }
    }
    Ok(SynthTrial {
        target: Waveform::new(target, spec.audio_rate_hz)?,
        interferer: Waveform::new(interferer, spec.audio_rate_hz)?,
        eeg: EegTrial::new(data, spec.eeg_rate_hz, SYNTH_LAYOUT_ID)?,
    })
}

/// Mixes `n_trials` generated trials (seeds `seed`, `seed + 1`, ...) at
/// the spec's SNR and cuts them into segments of `seg_len_s` seconds.
pub fn synth_segments(spec: &SynthSpec, seed: u64, n_trials: usize, seg_len_s: f64) -> Result<Vec<Segment>, DataError> {
    let mut out = Vec::new();
    for k in 0..n_trials {
        let trial = synth_trial(spec, seed.wrapping_add(k as u64))?;
        let (mixture, target) = mix_at_snr(&trial.target, &trial.interferer, spec.snr_db)?;
        let paired = PairedTrial {
            mixture,
            target,
            eeg_rate_hz: trial.eeg.rate_hz(),
            eeg: trial.eeg.into_data(),
            meta: SegmentMeta { subject: "synthetic".into(), trial: alloc::format!("trial{k:03}"), index: 0 },
        };
        out.extend(segment(&paired, seg_len_s)?);
    }
    Ok(out)
}

/// Layout for generated EEG: `n_channels` electrodes labelled `E00`,
/// `E01`, ... evenly spaced on a ring of radius 0.85, starting at the
/// left ear and running clockwise over the vertex.
pub fn synth_layout(n_channels: usize) -> ElectrodeLayout {
    let names = (0..n_channels).map(|i| alloc::format!("E{i:02}")).collect();
    let coords = (0..n_channels)
        .map(|i| {
            let a = core::f64::consts::PI - 2.0 * core::f64::consts::PI * i as f64 / n_channels as f64;
            [0.85 * libm::cos(a), 0.85 * libm::sin(a)]
        })
        .collect();
    ElectrodeLayout::new(SYNTH_LAYOUT_ID, names, coords, None).expect("ring layout is valid")
}

/// Band-limited noise carrier under a bursty, syllable-like envelope,
/// scaled to unit RMS.
fn talker(spec: &SynthSpec, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let fs = spec.audio_rate_hz;
    let carrier: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let carrier = zero_phase_bandpass(&carrier, spec.band_hz.0, spec.band_hz.1, fs);

    let mut gain = vec![BURST_FLOOR; n];
    let mut t = 0.0;
    loop {
        // Exponential inter-onset gaps give Poisson-distributed bursts.
        let u: f64 = rng.random_range(f64::EPSILON..1.0);
        t += -libm::log(u) / spec.syllable_rate_hz;
        let len_s: f64 = rng.random_range(BURST_LEN_S.0..BURST_LEN_S.1);
        let amp: f64 = rng.random_range(0.5..1.0);
        let start = (t * fs) as usize;
        if start >= n {
            break;
        }
        let len = ((len_s * fs) as usize).max(2);
        for k in 0..len.min(n - start) {
            let w = 0.5 - 0.5 * libm::cos(2.0 * core::f64::consts::PI * k as f64 / (len - 1) as f64);
            gain[start + k] += amp * w;
        }
    }
    let mut x: Vec<f64> = carrier.iter().zip(&gain).map(|(c, g)| c * g).collect();
    let r = rms(&x);
    if r > 0.0 {
        x.iter_mut().for_each(|v| *v /= r);
    }
    x
}

fn standardize(mut x: Vec<f64>) -> Vec<f64> {
    if x.is_empty() {
        return x;
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    x.iter_mut().for_each(|v| *v -= mean);
    let sd = rms(&x);
    if sd > 0.0 {
        x.iter_mut().for_each(|v| *v /= sd);
    }
    x
}
