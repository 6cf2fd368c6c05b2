use super::{stft, AudioBuffer, SpectroConfig};
use crate::error::{invalid, Result};
use ndarray::Array2;

/// Power floor applied before the logarithm.
pub const LOG_MEL_FLOOR: f32 = 1e-10;

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filterbank `[n_mels × n_bins]`, each row normalised to
/// unit sum so a flat power spectrum maps to a flat mel profile. Rows that
/// cover no FFT bin are all zero.
pub fn mel_filterbank(n_mels: usize, cfg: &SpectroConfig) -> Array2<f32> {
    let n_bins = cfg.n_bins();
    let nyquist = cfg.sample_rate as f64 / 2.0;
    let (lo, hi) = (hz_to_mel(0.0), hz_to_mel(nyquist));
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bin_hz = |k: usize| k as f64 * cfg.sample_rate as f64 / cfg.fft_size as f64;
    let mut fb = Array2::<f32>::zeros((n_mels, n_bins));
    for m in 0..n_mels {
        let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
        let mut row_sum = 0.0;
        for k in 0..n_bins {
            let f = bin_hz(k);
            let w = if f > left && f <= center {
                (f - left) / (center - left)
            } else if f > center && f < right {
                (right - f) / (right - center)
            } else {
                0.0
            };
            fb[[m, k]] = w as f32;
            row_sum += w;
        }
        if row_sum > 0.0 {
            fb.row_mut(m).mapv_inplace(|w| (w as f64 / row_sum) as f32);
        }
    }
    fb
}

/// Log-mel features `[n_mels × T]` on the causal frame grid of `cfg`.
pub fn log_mel(audio: &AudioBuffer, n_mels: usize, cfg: &SpectroConfig) -> Result<Array2<f32>> {
    if n_mels == 0 {
        return invalid("n_mels must be positive");
    }
    let spec = stft(audio, cfg)?;
    let mut power = spec.real.mapv(|r| r * r);
    power.zip_mut_with(&spec.imag, |p, &i| *p += i * i);
    let fb = mel_filterbank(n_mels, cfg);
    Ok(fb.dot(&power).mapv(|v| v.max(LOG_MEL_FLOOR).ln()))
}
