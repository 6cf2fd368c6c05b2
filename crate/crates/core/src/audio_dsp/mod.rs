//! Signal front-end: framing, STFT analysis/synthesis, log-mel features and
//! WAV I/O.
//!
//! Framing is causal: frame `t` covers samples `[t*hop, t*hop + win)` and no
//! padding is added at either end, so `T = 1 + (N - win) / hop`.

mod mel;
mod stft;
mod wav;

pub use mel::{log_mel, mel_filterbank, LOG_MEL_FLOOR};
pub use stft::{istft, stft, synthesis_envelope, ComplexSpectrogram, FramePadding};
pub use wav::{read_wav, write_wav};

use crate::error::{invalid, Error, Result};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Default corpus sample rate in Hz.
pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

/// Mono audio with a sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return invalid("sample rate must be positive");
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return invalid(format!("non-finite sample at index {i}"));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn zeros(len: usize, sample_rate: u32) -> Self {
        Self {
            samples: vec![0.0; len],
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Mean power over all samples.
    pub fn power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|&s| (s as f64).powi(2)).sum::<f64>() / self.samples.len() as f64
    }
}

/// Analysis window family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WindowKind {
    /// Square root of the periodic Hann window; analysis and synthesis
    /// windows multiply to a Hann window.
    SqrtHann,
    /// Periodic Hann window.
    Hann,
}

impl WindowKind {
    pub fn coefficients(self, len: usize) -> Vec<f64> {
        let hann = |n: usize| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / len as f64).cos();
        match self {
            WindowKind::SqrtHann => (0..len).map(|n| hann(n).max(0.0).sqrt()).collect(),
            WindowKind::Hann => (0..len).map(hann).collect(),
        }
    }
}

impl fmt::Display for WindowKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WindowKind::SqrtHann => "sqrt_hann",
            WindowKind::Hann => "hann",
        })
    }
}

impl FromStr for WindowKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sqrt_hann" => Ok(WindowKind::SqrtHann),
            "hann" => Ok(WindowKind::Hann),
            other => Err(Error::Config(format!("unknown window `{other}`"))),
        }
    }
}

/// Framing and transform settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectroConfig {
    pub sample_rate: u32,
    pub win_ms: f64,
    pub hop_ms: f64,
    pub fft_size: usize,
    pub window: WindowKind,
}

impl Default for SpectroConfig {
    fn default() -> Self {
        Self {
            sample_rate: DEFAULT_SAMPLE_RATE,
            win_ms: 25.0,
            hop_ms: 10.0,
            fft_size: 512,
            window: WindowKind::SqrtHann,
        }
    }
}

impl SpectroConfig {
    /// Reduced-resolution front-end used by the toy configuration: 1.6 kHz
    /// audio, 32-point FFT, 16 bins after the DC bin is dropped, 100 frames/s.
    pub fn toy() -> Self {
        Self {
            sample_rate: 1_600,
            win_ms: 20.0,
            hop_ms: 10.0,
            fft_size: 32,
            window: WindowKind::SqrtHann,
        }
    }

    fn ms_to_samples(&self, ms: f64, what: &str) -> Result<usize> {
        let exact = ms * self.sample_rate as f64 / 1000.0;
        let n = exact.round();
        if (exact - n).abs() > 1e-6 || n < 1.0 {
            return Err(Error::Config(format!(
                "{what} of {ms} ms is not a whole number of samples at {} Hz",
                self.sample_rate
            )));
        }
        Ok(n as usize)
    }

    pub fn win_len(&self) -> usize {
        (self.win_ms * self.sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn hop_len(&self) -> usize {
        (self.hop_ms * self.sample_rate as f64 / 1000.0).round() as usize
    }

    /// Number of one-sided FFT bins, including DC and Nyquist.
    pub fn n_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Bins seen by the encoder (DC dropped).
    pub fn encoder_bins(&self) -> usize {
        self.fft_size / 2
    }

    pub fn frames_per_second(&self) -> f64 {
        self.sample_rate as f64 / self.hop_len() as f64
    }

    /// Number of causal frames for a signal of `n` samples.
    pub fn num_frames(&self, n: usize) -> usize {
        let win = self.win_len();
        if n < win {
            0
        } else {
            1 + (n - win) / self.hop_len()
        }
    }

    /// Checks framing consistency and the overlap-add reconstruction
    /// condition (the squared-window envelope never vanishes).
    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 {
            return Err(Error::Config("sample_rate must be positive".into()));
        }
        let win = self.ms_to_samples(self.win_ms, "window")?;
        let hop = self.ms_to_samples(self.hop_ms, "hop")?;
        if !self.fft_size.is_power_of_two() || self.fft_size < 4 {
            return Err(Error::Config(format!(
                "fft_size {} must be a power of two >= 4",
                self.fft_size
            )));
        }
        if win > self.fft_size {
            return Err(Error::Config(format!(
                "window of {win} samples exceeds fft_size {}",
                self.fft_size
            )));
        }
        if hop > win {
            return Err(Error::Config(format!(
                "hop {hop} exceeds window {win}: overlap-add cannot reconstruct"
            )));
        }
        let w = self.window.coefficients(win);
        // steady-state envelope of the squared window over one hop period
        let min_env = (0..hop)
            .map(|n| {
                let mut acc = 0.0;
                let mut k = n;
                while k < win {
                    acc += w[k] * w[k];
                    k += hop;
                }
                acc
            })
            .fold(f64::INFINITY, f64::min);
        if min_env < 1e-6 {
            return Err(Error::Config(format!(
                "window `{}` with hop {hop} violates the overlap-add reconstruction condition",
                self.window
            )));
        }
        Ok(())
    }
}
