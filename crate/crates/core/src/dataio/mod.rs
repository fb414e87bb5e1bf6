//! Audio/EEG data model, preprocessing, mixing and segmentation.

mod filter;
mod resample;
mod synth;

use alloc::string::String;
use alloc::vec::Vec;

use thiserror::Error;

use crate::geometry::ElectrodeLayout;
use crate::tensor::Tensor;

pub use filter::{butterworth, filtfilt, zero_phase_bandpass, zero_phase_lowpass, Biquad, Edge, BUTTERWORTH_ORDER};
pub use resample::{resample_slice, resampled_len};
pub use synth::{speech_envelope, synth_layout, synth_segments, synth_trial, SynthSpec, SynthTrial, SYNTH_LAYOUT_ID};

/// EEG pass band used by the preprocessing chain.
pub const EEG_BAND_HZ: (f64, f64) = (0.1, 45.0);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("sample rate must be positive and finite, got {0}")]
    InvalidRate(f64),
    #[error("signal contains non-finite values")]
    NonFinite,
    #[error("invalid band ({lo} Hz, {hi} Hz) for sample rate {rate} Hz")]
    InvalidBand { lo: f64, hi: f64, rate: f64 },
    #[error("layout has no mastoid channels")]
    MissingMastoids,
    #[error("EEG has {rows} rows but the layout has {expected} channels")]
    ChannelMismatch { rows: usize, expected: usize },
    #[error("signal has zero energy")]
    ZeroEnergy,
    #[error("length mismatch: {0} vs {1} samples")]
    LengthMismatch(usize, usize),
    #[error("rate mismatch: {0} Hz vs {1} Hz")]
    RateMismatch(f64, f64),
    #[error("EEG duration {eeg_s:.4} s does not match audio duration {audio_s:.4} s")]
    DurationMismatch { audio_s: f64, eeg_s: f64 },
    #[error("SNR must be finite, got {0}")]
    InvalidSnr(f64),
    #[error("segment length must be positive, got {0}")]
    InvalidSegmentLength(f64),
    #[error("invalid synthesis spec: {0}")]
    InvalidSynthSpec(&'static str),
}

/// Mono audio.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    rate_hz: f64,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, rate_hz: f64) -> Result<Self, DataError> {
        check_rate(rate_hz)?;
        if !samples.iter().all(|v| v.is_finite()) {
            return Err(DataError::NonFinite);
        }
        Ok(Self { samples, rate_hz })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn rate_hz(&self) -> f64 {
        self.rate_hz
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.rate_hz
    }

    pub fn rms(&self) -> f64 {
        rms(&self.samples)
    }

    /// Zero-phase Butterworth band-pass.
    pub fn bandpass(&self, lo_hz: f64, hi_hz: f64) -> Result<Self, DataError> {
        check_band(lo_hz, hi_hz, self.rate_hz)?;
        Ok(Self { samples: zero_phase_bandpass(&self.samples, lo_hz, hi_hz, self.rate_hz), rate_hz: self.rate_hz })
    }

    /// Band-limited resampling; the length becomes `floor(len·out/in)`.
    pub fn resample(&self, out_rate_hz: f64) -> Result<Self, DataError> {
        check_rate(out_rate_hz)?;
        Ok(Self { samples: resample_slice(&self.samples, self.rate_hz, out_rate_hz), rate_hz: out_rate_hz })
    }

    fn slice(&self, start: usize, end: usize) -> Self {
        Self { samples: self.samples[start..end].to_vec(), rate_hz: self.rate_hz }
    }
}

/// Multichannel EEG, `channels × time`.
#[derive(Clone, Debug, PartialEq)]
pub struct EegTrial {
    data: Tensor,
    rate_hz: f64,
    layout_id: String,
}

impl EegTrial {
    pub fn new(data: Tensor, rate_hz: f64, layout_id: impl Into<String>) -> Result<Self, DataError> {
        check_rate(rate_hz)?;
        if !data.is_finite() {
            return Err(DataError::NonFinite);
        }
        Ok(Self { data, rate_hz, layout_id: layout_id.into() })
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn into_data(self) -> Tensor {
        self.data
    }

    pub fn rate_hz(&self) -> f64 {
        self.rate_hz
    }

    pub fn layout_id(&self) -> &str {
        &self.layout_id
    }

    pub fn channels(&self) -> usize {
        self.data.rows()
    }

    pub fn len(&self) -> usize {
        self.data.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.data.cols() == 0
    }

    pub fn duration_s(&self) -> f64 {
        self.data.cols() as f64 / self.rate_hz
    }

    pub fn bandpass(&self, lo_hz: f64, hi_hz: f64) -> Result<Self, DataError> {
        check_band(lo_hz, hi_hz, self.rate_hz)?;
        Ok(self.map_rows(self.rate_hz, |r| zero_phase_bandpass(r, lo_hz, hi_hz, self.rate_hz)))
    }

    pub fn resample(&self, out_rate_hz: f64) -> Result<Self, DataError> {
        check_rate(out_rate_hz)?;
        Ok(self.map_rows(out_rate_hz, |r| resample_slice(r, self.rate_hz, out_rate_hz)))
    }

    /// Subtracts, per time sample, the mean of the two mastoid channels from
    /// every channel. The channel count is unchanged.
    pub fn rereference_mastoid(&self, layout: &ElectrodeLayout) -> Result<Self, DataError> {
        if self.channels() != layout.len() {
            return Err(DataError::ChannelMismatch { rows: self.channels(), expected: layout.len() });
        }
        let (a, b) = layout.mastoid_indices().ok_or(DataError::MissingMastoids)?;
        let reference: Vec<f64> =
            self.data.row(a).iter().zip(self.data.row(b)).map(|(x, y)| 0.5 * (x + y)).collect();
        let mut data = self.data.clone();
        for r in 0..data.rows() {
            for (v, m) in data.row_mut(r).iter_mut().zip(&reference) {
                *v -= m;
            }
        }
        Ok(Self { data, rate_hz: self.rate_hz, layout_id: self.layout_id.clone() })
    }

    fn map_rows(&self, rate_hz: f64, f: impl Fn(&[f64]) -> Vec<f64>) -> Self {
        let rows: Vec<Vec<f64>> = (0..self.channels()).map(|r| f(self.data.row(r))).collect();
        let cols = rows.first().map_or(0, Vec::len);
        let data = if rows.is_empty() { Tensor::zeros(0, cols) } else { Tensor::from_rows(&rows) };
        Self { data, rate_hz, layout_id: self.layout_id.clone() }
    }
}

/// Feature extraction applied to preprocessed EEG before it reaches the
/// network. The default passes the band-passed signal through unchanged.
pub trait EegFeature {
    fn extract(&self, eeg: &EegTrial) -> EegTrial;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityFeature;

impl EegFeature for IdentityFeature {
    fn extract(&self, eeg: &EegTrial) -> EegTrial {
        eeg.clone()
    }
}

/// EEG preprocessing chain: resample, band-pass, optional mastoid
/// re-referencing, then the feature hook.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct EegPreprocess {
    pub rate_hz: f64,
    pub band_hz: (f64, f64),
    pub rereference: bool,
}

impl Default for EegPreprocess {
    fn default() -> Self {
        Self { rate_hz: 128.0, band_hz: EEG_BAND_HZ, rereference: true }
    }
}

impl EegPreprocess {
    pub fn apply(
        &self,
        eeg: &EegTrial,
        layout: &ElectrodeLayout,
        feature: &dyn EegFeature,
    ) -> Result<EegTrial, DataError> {
        let mut out = eeg.resample(self.rate_hz)?;
        out = out.bandpass(self.band_hz.0, self.band_hz.1)?;
        if self.rereference && layout.mastoid_indices().is_some() {
            out = out.rereference_mastoid(layout)?;
        }
        Ok(feature.extract(&out))
    }
}

/// Normalises both signals to unit RMS, scales the interferer so that the
/// target-to-interferer power ratio equals `snr_db`, and returns
/// `(mixture, normalised target)`.
pub fn mix_at_snr(target: &Waveform, interferer: &Waveform, snr_db: f64) -> Result<(Waveform, Waveform), DataError> {
    if !snr_db.is_finite() {
        return Err(DataError::InvalidSnr(snr_db));
    }
    if target.len() != interferer.len() {
        return Err(DataError::LengthMismatch(target.len(), interferer.len()));
    }
    if target.rate_hz() != interferer.rate_hz() {
        return Err(DataError::RateMismatch(target.rate_hz(), interferer.rate_hz()));
    }
    let (rt, ri) = (target.rms(), interferer.rms());
    if !(rt > 0.0) || !(ri > 0.0) {
        return Err(DataError::ZeroEnergy);
    }
    let gain = libm::pow(10.0, -snr_db / 20.0) / ri;
    let target_norm: Vec<f64> = target.samples().iter().map(|v| v / rt).collect();
    let mixture: Vec<f64> = target_norm.iter().zip(interferer.samples()).map(|(t, i)| t + gain * i).collect();
    let rate = target.rate_hz();
    Ok((Waveform { samples: mixture, rate_hz: rate }, Waveform { samples: target_norm, rate_hz: rate }))
}

/// `10·log10(‖target‖² / ‖mixture − target‖²)`.
pub fn measured_snr_db(mixture: &[f64], target: &[f64]) -> f64 {
    let num: f64 = target.iter().map(|t| t * t).sum();
    let den: f64 = mixture.iter().zip(target).map(|(m, t)| (m - t) * (m - t)).sum();
    10.0 * libm::log10(num / den)
}

/// Identifiers carried by every segment.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SegmentMeta {
    pub subject: String,
    pub trial: String,
    pub index: usize,
}

/// A full trial: mixture, supervision target and the matching EEG.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedTrial {
    pub mixture: Waveform,
    pub target: Waveform,
    pub eeg: Tensor,
    pub eeg_rate_hz: f64,
    pub meta: SegmentMeta,
}

/// One training or evaluation example.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    mixture: Waveform,
    target: Waveform,
    eeg: Tensor,
    eeg_rate_hz: f64,
    meta: SegmentMeta,
}

impl Segment {
    /// Checks that audio lengths and rates agree and that the EEG spans the
    /// same duration within one EEG sample period.
    pub fn new(
        mixture: Waveform,
        target: Waveform,
        eeg: Tensor,
        eeg_rate_hz: f64,
        meta: SegmentMeta,
    ) -> Result<Self, DataError> {
        check_pair(&mixture, &target, &eeg, eeg_rate_hz)?;
        Ok(Self { mixture, target, eeg, eeg_rate_hz, meta })
    }

    pub fn mixture(&self) -> &Waveform {
        &self.mixture
    }

    pub fn target(&self) -> &Waveform {
        &self.target
    }

    pub fn eeg(&self) -> &Tensor {
        &self.eeg
    }

    pub fn eeg_rate_hz(&self) -> f64 {
        self.eeg_rate_hz
    }

    pub fn meta(&self) -> &SegmentMeta {
        &self.meta
    }

    /// The same segment keeping only EEG rows `rows`, in order.
    pub fn with_eeg_rows(&self, rows: &[usize]) -> Self {
        Self { eeg: self.eeg.select_rows(rows), ..self.clone() }
    }
}

impl PairedTrial {
    pub fn validate(&self) -> Result<(), DataError> {
        check_pair(&self.mixture, &self.target, &self.eeg, self.eeg_rate_hz)
    }
}

/// Cuts a trial into consecutive, non-overlapping segments of `seg_len_s`
/// seconds. Audio and EEG boundaries are the rounded multiples of the
/// segment length at their own rates; the trailing remainder is dropped.
pub fn segment(trial: &PairedTrial, seg_len_s: f64) -> Result<Vec<Segment>, DataError> {
    if !(seg_len_s > 0.0) || !seg_len_s.is_finite() {
        return Err(DataError::InvalidSegmentLength(seg_len_s));
    }
    trial.validate()?;
    let fa = trial.mixture.rate_hz();
    let fe = trial.eeg_rate_hz;
    let bound = |i: usize, rate: f64| libm::round(i as f64 * seg_len_s * rate) as usize;
    let mut out = Vec::new();
    let mut i = 0;
    loop {
        let (a0, a1) = (bound(i, fa), bound(i + 1, fa));
        let (e0, e1) = (bound(i, fe), bound(i + 1, fe));
        if a1 > trial.mixture.len() || e1 > trial.eeg.cols() || a1 == a0 {
            break;
        }
        let meta = SegmentMeta { index: i, ..trial.meta.clone() };
        out.push(Segment {
            mixture: trial.mixture.slice(a0, a1),
            target: trial.target.slice(a0, a1),
            eeg: trial.eeg.slice_cols(e0, e1),
            eeg_rate_hz: fe,
            meta,
        });
        i += 1;
    }
    Ok(out)
}

pub(crate) fn rms(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    libm::sqrt(x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64)
}

fn check_rate(rate_hz: f64) -> Result<(), DataError> {
    if rate_hz > 0.0 && rate_hz.is_finite() {
        Ok(())
    } else {
        Err(DataError::InvalidRate(rate_hz))
    }
}

fn check_band(lo: f64, hi: f64, rate: f64) -> Result<(), DataError> {
    if lo > 0.0 && lo < hi && hi < rate / 2.0 {
        Ok(())
    } else {
        Err(DataError::InvalidBand { lo, hi, rate })
    }
}

fn check_pair(mixture: &Waveform, target: &Waveform, eeg: &Tensor, eeg_rate_hz: f64) -> Result<(), DataError> {
    check_rate(eeg_rate_hz)?;
    if mixture.len() != target.len() {
        return Err(DataError::LengthMismatch(mixture.len(), target.len()));
    }
    if mixture.rate_hz() != target.rate_hz() {
        return Err(DataError::RateMismatch(mixture.rate_hz(), target.rate_hz()));
    }
    if !eeg.is_finite() {
        return Err(DataError::NonFinite);
    }
    let audio_s = mixture.duration_s();
    let eeg_s = eeg.cols() as f64 / eeg_rate_hz;
    if (audio_s - eeg_s).abs() > 1.0 / eeg_rate_hz + 1e-9 {
        return Err(DataError::DurationMismatch { audio_s, eeg_s });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use alloc::vec;
    use core::f64::consts::PI;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn sine(freq: f64, rate: f64, n: usize) -> Vec<f64> {
        (0..n).map(|i| libm::sin(2.0 * PI * freq * i as f64 / rate)).collect()
    }

    /// Magnitude of the DFT of `x` at `freq`, computed directly.
    fn dft_mag(x: &[f64], freq: f64, rate: f64) -> f64 {
        let (mut re, mut im) = (0.0, 0.0);
        for (i, v) in x.iter().enumerate() {
            let ph = 2.0 * PI * freq * i as f64 / rate;
            re += v * libm::cos(ph);
            im -= v * libm::sin(ph);
        }
        libm::sqrt(re * re + im * im)
    }

    #[test]
    fn bandpass_removes_dc() {
        let w = Waveform::new(vec![1.0; 128 * 20], 128.0).unwrap();
        let y = w.bandpass(0.1, 45.0).unwrap();
        let trim = 128 * 2;
        let mid = &y.samples()[trim..y.len() - trim];
        assert!(mid.iter().all(|v| v.abs() < 1e-3));
    }

    #[test]
    fn bandpass_passes_ten_hz() {
        let x = sine(10.0, 128.0, 128 * 20);
        let y = Waveform::new(x.clone(), 128.0).unwrap().bandpass(0.1, 45.0).unwrap();
        let r = 128 * 5..128 * 15;
        let gain_db = 20.0 * libm::log10(rms(&y.samples()[r.clone()]) / rms(&x[r]));
        assert!(gain_db.abs() < 1.0, "gain {gain_db} dB");
    }

    #[test]
    fn bandpass_attenuates_sixty_hz() {
        let x = sine(60.0, 128.0, 128 * 20);
        let y = Waveform::new(x.clone(), 128.0).unwrap().bandpass(0.1, 45.0).unwrap();
        let r = 128 * 5..128 * 15;
        let att_db = 20.0 * libm::log10(dft_mag(&y.samples()[r.clone()], 60.0, 128.0) / dft_mag(&x[r], 60.0, 128.0));
        assert!(att_db <= -20.0, "attenuation {att_db} dB");
    }

    #[test]
    fn bandpass_rejects_bad_band() {
        let w = Waveform::new(vec![0.0; 10], 128.0).unwrap();
        assert!(matches!(w.bandpass(0.0, 45.0), Err(DataError::InvalidBand { .. })));
        assert!(matches!(w.bandpass(10.0, 5.0), Err(DataError::InvalidBand { .. })));
        assert!(matches!(w.bandpass(0.1, 64.0), Err(DataError::InvalidBand { .. })));
    }

    fn layout4(mastoids: Option<(usize, usize)>) -> ElectrodeLayout {
        let names = ["A", "B", "M1", "M2"].iter().map(|s| s.to_string()).collect();
        ElectrodeLayout::new("l4", names, vec![[0.0, 0.0], [0.1, 0.0], [-1.1, -0.3], [1.1, -0.3]], mastoids).unwrap()
    }

    #[test]
    fn rereference_constant_channels() {
        let data = Tensor::from_rows(&[vec![5.0; 8], vec![7.0; 8], vec![2.0; 8], vec![2.0; 8]]);
        let eeg = EegTrial::new(data, 128.0, "l4").unwrap();
        let out = eeg.rereference_mastoid(&layout4(Some((2, 3)))).unwrap();
        assert!(out.data().row(0).iter().all(|&v| v == 3.0));
        assert!(out.data().row(1).iter().all(|&v| v == 5.0));
        assert_eq!(eeg.rereference_mastoid(&layout4(None)), Err(DataError::MissingMastoids));
    }

    #[test]
    fn rereference_identical_rows_vanish() {
        let row: Vec<f64> = (0..8).map(|i| i as f64 * 0.3 - 1.0).collect();
        let data = Tensor::from_rows(&[row.clone(), row.clone(), row.clone(), row]);
        let out = EegTrial::new(data, 128.0, "l4").unwrap().rereference_mastoid(&layout4(Some((2, 3)))).unwrap();
        assert!(out.data().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rereference_matches_bruteforce() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data = Tensor::from_vec(4, 8, (0..32).map(|_| rng.random::<f64>()).collect());
        let out = EegTrial::new(data.clone(), 128.0, "l4").unwrap().rereference_mastoid(&layout4(Some((2, 3)))).unwrap();
        for c in 0..4 {
            for t in 0..8 {
                let m = (data.get(2, t) + data.get(3, t)) / 2.0;
                assert_eq!(out.data().get(c, t), data.get(c, t) - m);
            }
        }
    }

    #[test]
    fn resample_identity_and_lengths() {
        let x: Vec<f64> = (0..512).map(|i| (i as f64).sqrt()).collect();
        let w = Waveform::new(x.clone(), 512.0).unwrap();
        assert_eq!(w.resample(512.0).unwrap().samples(), &x[..]);
        assert_eq!(w.resample(128.0).unwrap().len(), 128);
    }

    #[test]
    fn resample_keeps_slow_sinusoid() {
        let w = Waveform::new(sine(5.0, 512.0, 512), 512.0).unwrap();
        let y = w.resample(128.0).unwrap();
        let reference = sine(5.0, 128.0, 128);
        let corr = pearson(y.samples(), &reference);
        assert!(corr > 0.99, "correlation {corr}");
    }

    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma) * (x - ma)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb) * (y - mb)).sum();
        cov / libm::sqrt(va * vb)
    }

    fn noise(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
    }

    #[test]
    fn mixing_at_zero_db_balances_rms() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = Waveform::new(noise(&mut rng, 4000).iter().map(|v| 3.0 * v).collect(), 8000.0).unwrap();
        let i = Waveform::new(noise(&mut rng, 4000), 8000.0).unwrap();
        let (mix, tn) = mix_at_snr(&t, &i, 0.0).unwrap();
        let scaled: Vec<f64> = mix.samples().iter().zip(tn.samples()).map(|(m, t)| m - t).collect();
        assert!((tn.rms() - rms(&scaled)).abs() < 1e-9);
        assert!((tn.rms() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mixing_scale_follows_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let raw_t = noise(&mut rng, 2000);
        let raw_i = noise(&mut rng, 2000);
        let unit = |x: Vec<f64>| {
            let r = rms(&x);
            Waveform::new(x.iter().map(|v| v / r).collect(), 8000.0).unwrap()
        };
        let (t, i) = (unit(raw_t), unit(raw_i));
        let (mix, tn) = mix_at_snr(&t, &i, 6.0).unwrap();
        let k = (mix.samples()[7] - tn.samples()[7]) / i.samples()[7];
        assert!((k - libm::pow(10.0, -6.0 / 20.0)).abs() < 1e-12);
        assert!((k - 0.501).abs() < 1e-3);
    }

    #[test]
    fn mixing_errors_and_extremes() {
        let z = Waveform::new(vec![0.0; 10], 8000.0).unwrap();
        let o = Waveform::new(vec![1.0; 10], 8000.0).unwrap();
        assert_eq!(mix_at_snr(&z, &o, 0.0), Err(DataError::ZeroEnergy));
        assert_eq!(mix_at_snr(&o, &o, f64::INFINITY), Err(DataError::InvalidSnr(f64::INFINITY)));
        for snr in [200.0, -200.0] {
            let (mix, tn) = mix_at_snr(&o, &Waveform::new(vec![-1.0; 10], 8000.0).unwrap(), snr).unwrap();
            assert!((measured_snr_db(mix.samples(), tn.samples()) - snr).abs() < 1e-6);
        }
    }

    proptest! {
        #[test]
        fn mixing_hits_requested_snr(seed in 0u64..1000, snr in -30.0f64..30.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = Waveform::new(noise(&mut rng, 256), 8000.0).unwrap();
            let i = Waveform::new(noise(&mut rng, 256), 8000.0).unwrap();
            let (mix, tn) = mix_at_snr(&t, &i, snr).unwrap();
            prop_assert!((measured_snr_db(mix.samples(), tn.samples()) - snr).abs() < 1e-6);
        }

        #[test]
        fn segments_concatenate_to_prefix(dur in 0.5f64..8.0, seg in 0.3f64..3.0) {
            let trial = test_trial(dur);
            let segs = segment(&trial, seg).unwrap();
            let joined: Vec<f64> = segs.iter().flat_map(|s| s.mixture().samples().to_vec()).collect();
            prop_assert_eq!(&joined[..], &trial.mixture.samples()[..joined.len()]);
            let eeg_cols: usize = segs.iter().map(|s| s.eeg().cols()).sum();
            for s in &segs {
                let e0: usize = segs[..s.meta().index].iter().map(|p| p.eeg().cols()).sum();
                prop_assert_eq!(s.eeg().row(0), &trial.eeg.row(0)[e0..e0 + s.eeg().cols()]);
            }
            prop_assert!(eeg_cols <= trial.eeg.cols());
            prop_assert_eq!(segs.len(), libm::floor(dur / seg + 1e-9) as usize);
        }
    }

    fn test_trial(dur: f64) -> PairedTrial {
        let fa = 1000.0;
        let fe = 128.0;
        let na = libm::round(dur * fa) as usize;
        let ne = libm::round(dur * fe) as usize;
        let audio: Vec<f64> = (0..na).map(|i| i as f64).collect();
        PairedTrial {
            mixture: Waveform::new(audio.clone(), fa).unwrap(),
            target: Waveform::new(audio, fa).unwrap(),
            eeg: Tensor::from_vec(2, ne, (0..2 * ne).map(|i| i as f64).collect()),
            eeg_rate_hz: fe,
            meta: SegmentMeta { subject: "s".into(), trial: "t".into(), index: 0 },
        }
    }

    #[test]
    fn segment_counts() {
        assert_eq!(segment(&test_trial(60.0), 2.0).unwrap().len(), 30);
        assert_eq!(segment(&test_trial(60.0), 20.0).unwrap().len(), 3);
        assert_eq!(segment(&test_trial(3.5), 2.0).unwrap().len(), 1);
        assert!(segment(&test_trial(1.5), 2.0).unwrap().is_empty());
        assert!(segment(&test_trial(1.5), 0.0).is_err());
    }

    #[test]
    fn segment_rejects_misaligned_eeg() {
        let mut t = test_trial(2.0);
        t.eeg = t.eeg.slice_cols(0, 200);
        assert!(matches!(segment(&t, 1.0), Err(DataError::DurationMismatch { .. })));
    }
}
