//! Butterworth biquad cascades with forward-backward (zero-phase) filtering.

use alloc::vec::Vec;
use core::f64::consts::PI;

/// Order of each Butterworth edge (high-pass and low-pass side).
pub const BUTTERWORTH_ORDER: usize = 4;

/// Second-order section, `a0` normalised to one.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Biquad {
    b0: f64,
    b1: f64,
    b2: f64,
    a1: f64,
    a2: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Edge {
    LowPass,
    HighPass,
}

impl Biquad {
    /// Bilinear-transform section with pre-warped cutoff (RBJ form).
    pub fn new(edge: Edge, cutoff_hz: f64, rate_hz: f64, q: f64) -> Self {
        let w0 = 2.0 * PI * cutoff_hz / rate_hz;
        let (sin, cos) = (libm::sin(w0), libm::cos(w0));
        let alpha = sin / (2.0 * q);
        let a0 = 1.0 + alpha;
        let (b0, b1, b2) = match edge {
            Edge::LowPass => ((1.0 - cos) / 2.0, 1.0 - cos, (1.0 - cos) / 2.0),
            Edge::HighPass => ((1.0 + cos) / 2.0, -(1.0 + cos), (1.0 + cos) / 2.0),
        };
        Self { b0: b0 / a0, b1: b1 / a0, b2: b2 / a0, a1: -2.0 * cos / a0, a2: (1.0 - alpha) / a0 }
    }

    fn dc_gain(&self) -> f64 {
        (self.b0 + self.b1 + self.b2) / (1.0 + self.a1 + self.a2)
    }

    /// Direct-form-II-transposed state that is stationary for a constant
    /// input `u`.
    fn steady_state(&self, u: f64) -> [f64; 2] {
        let y = self.dc_gain() * u;
        let z2 = self.b2 * u - self.a2 * y;
        let z1 = self.b1 * u - self.a1 * y + z2;
        [z1, z2]
    }

    fn run(&self, x: &mut [f64], mut z: [f64; 2]) {
        for v in x.iter_mut() {
            let input = *v;
            let y = self.b0 * input + z[0];
            z[0] = self.b1 * input - self.a1 * y + z[1];
            z[1] = self.b2 * input - self.a2 * y;
            *v = y;
        }
    }
}

/// Sections of an even-order Butterworth edge filter.
pub fn butterworth(edge: Edge, order: usize, cutoff_hz: f64, rate_hz: f64) -> Vec<Biquad> {
    debug_assert!(order % 2 == 0 && order > 0);
    (0..order / 2)
        .map(|k| {
            let theta = PI * (2 * k + 1) as f64 / (2 * order) as f64;
            Biquad::new(edge, cutoff_hz, rate_hz, 1.0 / (2.0 * libm::cos(theta)))
        })
        .collect()
}

fn run_cascade(sections: &[Biquad], x: &mut [f64]) {
    let Some(&first) = x.first() else { return };
    let mut level = first;
    for s in sections {
        let z = s.steady_state(level);
        s.run(x, z);
        level *= s.dc_gain();
    }
}

/// Forward-backward filtering with odd-reflection padding and steady-state
/// initial conditions, so the output has no phase shift and constant inputs
/// produce no start-up transient.
pub fn filtfilt(sections: &[Biquad], x: &[f64]) -> Vec<f64> {
    let n = x.len();
    if n == 0 {
        return Vec::new();
    }
    let pad = (3 * (2 * sections.len() + 1)).min(n - 1);
    let (first, last) = (x[0], x[n - 1]);
    let mut ext = Vec::with_capacity(n + 2 * pad);
    ext.extend((1..=pad).rev().map(|k| 2.0 * first - x[k]));
    ext.extend_from_slice(x);
    ext.extend((1..=pad).map(|k| 2.0 * last - x[n - 1 - k]));
    run_cascade(sections, &mut ext);
    ext.reverse();
    run_cascade(sections, &mut ext);
    ext.reverse();
    ext[pad..pad + n].to_vec()
}

pub fn zero_phase_bandpass(x: &[f64], lo_hz: f64, hi_hz: f64, rate_hz: f64) -> Vec<f64> {
    let mut sections = butterworth(Edge::HighPass, BUTTERWORTH_ORDER, lo_hz, rate_hz);
    sections.extend(butterworth(Edge::LowPass, BUTTERWORTH_ORDER, hi_hz, rate_hz));
    filtfilt(&sections, x)
}

pub fn zero_phase_lowpass(x: &[f64], cutoff_hz: f64, rate_hz: f64) -> Vec<f64> {
    filtfilt(&butterworth(Edge::LowPass, BUTTERWORTH_ORDER, cutoff_hz, rate_hz), x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn butterworth_lowpass_has_minus_three_db_at_cutoff() {
        let sections = butterworth(Edge::LowPass, 4, 100.0, 1000.0);
        // |H(e^{jw})| at the cutoff, evaluated directly from the coefficients.
        let w = 2.0 * PI * 100.0 / 1000.0;
        let mut mag = 1.0;
        for s in &sections {
            let (c1, s1, c2, s2) = (libm::cos(w), libm::sin(w), libm::cos(2.0 * w), libm::sin(2.0 * w));
            let nr = s.b0 + s.b1 * c1 + s.b2 * c2;
            let ni = -(s.b1 * s1 + s.b2 * s2);
            let dr = 1.0 + s.a1 * c1 + s.a2 * c2;
            let di = -(s.a1 * s1 + s.a2 * s2);
            mag *= libm::sqrt((nr * nr + ni * ni) / (dr * dr + di * di));
        }
        assert!((20.0 * libm::log10(mag) + 3.0103).abs() < 1e-3);
    }

    #[test]
    fn filtfilt_keeps_constants_for_lowpass() {
        let y = zero_phase_lowpass(&[2.5; 64], 10.0, 128.0);
        assert!(y.iter().all(|v| (v - 2.5).abs() < 1e-9));
    }

    #[test]
    fn short_inputs_do_not_panic() {
        assert!(filtfilt(&butterworth(Edge::LowPass, 4, 10.0, 128.0), &[]).is_empty());
        assert_eq!(zero_phase_bandpass(&[1.0], 0.1, 45.0, 128.0).len(), 1);
        assert_eq!(zero_phase_bandpass(&[1.0, 2.0, 3.0], 0.1, 45.0, 128.0).len(), 3);
    }
}
