use super::{AudioBuffer, SpectroConfig};
use crate::error::{invalid, Result};
use ndarray::Array2;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

/// How frames were placed relative to the signal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FramePadding {
    /// No padding; frame `t` starts at sample `t * hop`.
    Causal,
}

/// One-sided complex spectrogram, `[bins × frames]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrogram {
    pub real: Array2<f32>,
    pub imag: Array2<f32>,
    pub padding: FramePadding,
}

impl ComplexSpectrogram {
    pub fn zeros(bins: usize, frames: usize) -> Self {
        Self {
            real: Array2::zeros((bins, frames)),
            imag: Array2::zeros((bins, frames)),
            padding: FramePadding::Causal,
        }
    }

    pub fn bins(&self) -> usize {
        self.real.nrows()
    }

    pub fn frames(&self) -> usize {
        self.real.ncols()
    }

    pub fn magnitude(&self) -> Array2<f32> {
        let mut out = self.real.clone();
        out.zip_mut_with(&self.imag, |r, &i| *r = (*r * *r + i * i).sqrt());
        out
    }

    /// Frames `[start, start + len)`.
    pub fn slice_frames(&self, start: usize, len: usize) -> Self {
        use ndarray::s;
        Self {
            real: self.real.slice(s![.., start..start + len]).to_owned(),
            imag: self.imag.slice(s![.., start..start + len]).to_owned(),
            padding: self.padding,
        }
    }
}

/// Short-time Fourier transform with causal framing.
pub fn stft(audio: &AudioBuffer, cfg: &SpectroConfig) -> Result<ComplexSpectrogram> {
    cfg.validate()?;
    if audio.sample_rate != cfg.sample_rate {
        return invalid(format!(
            "audio sample rate {} does not match configured {}",
            audio.sample_rate, cfg.sample_rate
        ));
    }
    let win_len = cfg.win_len();
    let hop = cfg.hop_len();
    if audio.len() < win_len {
        return invalid(format!(
            "audio of {} samples is shorter than one window ({win_len})",
            audio.len()
        ));
    }
    let frames = cfg.num_frames(audio.len());
    let bins = cfg.n_bins();
    let window = cfg.window.coefficients(win_len);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.fft_size);
    let mut buf = vec![Complex64::new(0.0, 0.0); cfg.fft_size];
    let mut spec = ComplexSpectrogram::zeros(bins, frames);
    for t in 0..frames {
        let start = t * hop;
        buf.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
        for (n, w) in window.iter().enumerate() {
            buf[n].re = audio.samples[start + n] as f64 * w;
        }
        fft.process(&mut buf);
        for k in 0..bins {
            spec.real[[k, t]] = buf[k].re as f32;
            spec.imag[[k, t]] = buf[k].im as f32;
        }
    }
    Ok(spec)
}

/// Sum of squared synthesis windows at each output sample for `frames` frames.
pub fn synthesis_envelope(cfg: &SpectroConfig, frames: usize) -> Vec<f64> {
    let win_len = cfg.win_len();
    let hop = cfg.hop_len();
    let window = cfg.window.coefficients(win_len);
    let len = if frames == 0 {
        0
    } else {
        (frames - 1) * hop + win_len
    };
    let mut env = vec![0.0; len];
    for t in 0..frames {
        for (n, w) in window.iter().enumerate() {
            env[t * hop + n] += w * w;
        }
    }
    env
}

/// Inverse STFT by weighted overlap-add normalised by the squared-window
/// envelope. Output length is `(T - 1) * hop + win`. Samples where the
/// envelope vanishes (the very first sample for Hann-type windows) are zero.
pub fn istft(spec: &ComplexSpectrogram, cfg: &SpectroConfig) -> Result<AudioBuffer> {
    cfg.validate()?;
    if spec.bins() != cfg.n_bins() {
        return invalid(format!(
            "spectrogram has {} bins, configuration expects {}",
            spec.bins(),
            cfg.n_bins()
        ));
    }
    let frames = spec.frames();
    if frames == 0 {
        return invalid("spectrogram has no frames");
    }
    let win_len = cfg.win_len();
    let hop = cfg.hop_len();
    let n_fft = cfg.fft_size;
    let window = cfg.window.coefficients(win_len);
    let ifft = FftPlanner::<f64>::new().plan_fft_inverse(n_fft);
    let env = synthesis_envelope(cfg, frames);
    let mut out = vec![0.0f64; env.len()];
    let mut buf = vec![Complex64::new(0.0, 0.0); n_fft];
    let bins = cfg.n_bins();
    for t in 0..frames {
        for k in 0..bins {
            buf[k] = Complex64::new(spec.real[[k, t]] as f64, spec.imag[[k, t]] as f64);
        }
        // Hermitian completion; DC and Nyquist imaginary parts are dropped.
        buf[0].im = 0.0;
        buf[n_fft / 2].im = 0.0;
        for k in 1..n_fft / 2 {
            buf[n_fft - k] = buf[k].conj();
        }
        ifft.process(&mut buf);
        for (n, w) in window.iter().enumerate() {
            out[t * hop + n] += buf[n].re / n_fft as f64 * w;
        }
    }
    let samples = out
        .iter()
        .zip(&env)
        .map(|(&x, &e)| if e > 1e-8 { (x / e) as f32 } else { 0.0 })
        .collect();
    AudioBuffer::new(samples, cfg.sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(n: usize, seed: u64) -> AudioBuffer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AudioBuffer::new((0..n).map(|_| rng.random_range(-0.5..0.5)).collect(), 16_000).unwrap()
    }

    #[test]
    fn zero_second_gives_98_zero_frames() {
        let cfg = SpectroConfig::default();
        let spec = stft(&AudioBuffer::zeros(16_000, 16_000), &cfg).unwrap();
        assert_eq!(spec.frames(), 98);
        assert_eq!(spec.bins(), 257);
        assert!(spec.real.iter().chain(spec.imag.iter()).all(|&v| v == 0.0));
    }

    #[test]
    fn one_khz_sine_peaks_at_bin_32() {
        let cfg = SpectroConfig::default();
        let samples = (0..16_000)
            .map(|n| (2.0 * std::f64::consts::PI * 1000.0 * n as f64 / 16_000.0).sin() as f32)
            .collect();
        let spec = stft(&AudioBuffer::new(samples, 16_000).unwrap(), &cfg).unwrap();
        let mag = spec.magnitude();
        for t in 0..spec.frames() {
            let col = mag.column(t);
            let peak = (0..col.len())
                .max_by(|&a, &b| col[a].total_cmp(&col[b]))
                .unwrap();
            assert_eq!(peak, 32, "frame {t}");
        }
    }

    #[test]
    fn shorter_than_window_is_an_error() {
        let cfg = SpectroConfig::default();
        assert!(stft(&AudioBuffer::zeros(399, 16_000), &cfg).is_err());
    }

    #[test]
    fn sample_rate_mismatch_is_an_error() {
        let cfg = SpectroConfig::default();
        assert!(stft(&AudioBuffer::zeros(16_000, 8_000), &cfg).is_err());
    }

    #[test]
    fn round_trip_interior_error() {
        let cfg = SpectroConfig::default();
        let x = noise(16_000, 3);
        let y = istft(&stft(&x, &cfg).unwrap(), &cfg).unwrap();
        let win = cfg.win_len();
        let end = y.len() - win;
        let (mut num, mut den) = (0.0f64, 0.0f64);
        for n in win..end {
            num += ((y.samples[n] - x.samples[n]) as f64).powi(2);
            den += (x.samples[n] as f64).powi(2);
        }
        assert!((num / den).sqrt() <= 1e-4, "rel err {}", (num / den).sqrt());
    }

    #[test]
    fn zero_spectrogram_inverts_to_zero() {
        let cfg = SpectroConfig::default();
        let y = istft(&ComplexSpectrogram::zeros(257, 5), &cfg).unwrap();
        assert!(y.samples.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn single_frame_inverts_to_window_length() {
        let cfg = SpectroConfig::default();
        let y = istft(&ComplexSpectrogram::zeros(257, 1), &cfg).unwrap();
        assert_eq!(y.len(), 400);
    }

    #[test]
    fn linearity() {
        let cfg = SpectroConfig::default();
        let x = noise(4_000, 1);
        let y = noise(4_000, 2);
        let (a, b) = (0.7f32, -1.3f32);
        let mix = AudioBuffer::new(
            x.samples.iter().zip(&y.samples).map(|(p, q)| a * p + b * q).collect(),
            16_000,
        )
        .unwrap();
        let (sx, sy, sm) = (
            stft(&x, &cfg).unwrap(),
            stft(&y, &cfg).unwrap(),
            stft(&mix, &cfg).unwrap(),
        );
        let scale = sm.magnitude().iter().fold(0.0f32, |m, &v| m.max(v));
        for ((m, p), q) in sm.real.iter().zip(&sx.real).zip(&sy.real) {
            assert!((m - (a * p + b * q)).abs() / scale < 1e-6);
        }
        for ((m, p), q) in sm.imag.iter().zip(&sx.imag).zip(&sy.imag) {
            assert!((m - (a * p + b * q)).abs() / scale < 1e-6);
        }
    }

    #[test]
    fn deterministic() {
        let cfg = SpectroConfig::default();
        let x = noise(3_000, 9);
        assert_eq!(stft(&x, &cfg).unwrap(), stft(&x, &cfg).unwrap());
    }
}
