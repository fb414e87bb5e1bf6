//! Band-limited resampling with a Blackman-windowed sinc kernel.

use alloc::vec::Vec;
use core::f64::consts::PI;

/// Zero crossings of the sinc kept on each side of the kernel centre.
const ZERO_CROSSINGS: f64 = 16.0;
/// Anti-aliasing cutoff as a fraction of the lower Nyquist rate.
const ROLLOFF: f64 = 0.97;

/// Number of output samples for `len` input samples: `floor(len·out/in)`.
pub fn resampled_len(len: usize, in_rate: f64, out_rate: f64) -> usize {
    libm::floor(len as f64 * out_rate / in_rate + 1e-9) as usize
}

/// Resamples `x` from `in_rate` to `out_rate`. Equal rates return a copy.
pub fn resample_slice(x: &[f64], in_rate: f64, out_rate: f64) -> Vec<f64> {
    if in_rate == out_rate || x.is_empty() {
        return x.to_vec();
    }
    let out_len = resampled_len(x.len(), in_rate, out_rate);
    let ratio = in_rate / out_rate;
    let cutoff = ROLLOFF * (out_rate / in_rate).min(1.0);
    let half_width = ZERO_CROSSINGS / cutoff;
    let n = x.len() as isize;
    let sample = |k: isize| -> f64 {
        // Odd reflection about the end points keeps smooth signals smooth.
        if k < 0 {
            let m = (-k).min(n - 1);
            2.0 * x[0] - x[m as usize]
        } else if k >= n {
            let m = (2 * (n - 1) - k).max(0);
            2.0 * x[(n - 1) as usize] - x[m as usize]
        } else {
            x[k as usize]
        }
    };
    (0..out_len)
        .map(|i| {
            let pos = i as f64 * ratio;
            let lo = libm::ceil(pos - half_width) as isize;
            let hi = libm::floor(pos + half_width) as isize;
            let (mut acc, mut norm) = (0.0, 0.0);
            for k in lo..=hi {
                let h = kernel(pos - k as f64, cutoff, half_width);
                acc += h * sample(k);
                norm += h;
            }
            acc / norm
        })
        .collect()
}

fn kernel(u: f64, cutoff: f64, half_width: f64) -> f64 {
    if u.abs() > half_width {
        return 0.0;
    }
    let arg = PI * cutoff * u;
    let sinc = if arg.abs() < 1e-12 { 1.0 } else { libm::sin(arg) / arg };
    let phase = PI * u / half_width;
    let window = 0.42 + 0.5 * libm::cos(phase) + 0.08 * libm::cos(2.0 * phase);
    cutoff * sinc * window
}
