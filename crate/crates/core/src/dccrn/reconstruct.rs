use super::complex::ComplexTensor;
use crate::audio_dsp::{synthesis_envelope, SpectroConfig};
use crate::error::{shape_err, Result};
use crate::nn::layers::pad_zeros;
use candle_core::{DType, Device, Tensor};

/// Differentiable inverse STFT matching [`crate::audio_dsp::istft`].
#[derive(Debug, Clone)]
pub struct Reconstructor {
    cfg: SpectroConfig,
    basis_re: Tensor,
    basis_im: Tensor,
}

impl Reconstructor {
    pub fn new(cfg: &SpectroConfig, dtype: DType, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.fft_size;
        let bins = cfg.n_bins();
        let win = cfg.window.coefficients(cfg.win_len());
        let mut re = Vec::with_capacity(bins * win.len());
        let mut im = Vec::with_capacity(bins * win.len());
        for k in 0..bins {
            let c = if k == 0 || k == n / 2 { 1.0 } else { 2.0 };
            for (s, w) in win.iter().enumerate() {
                let phase = 2.0 * std::f64::consts::PI * (k * s % n) as f64 / n as f64;
                re.push(c * phase.cos() * w / n as f64);
                // imaginary parts of DC and Nyquist are dropped
                let si = if k == 0 || k == n / 2 { 0.0 } else { phase.sin() };
                im.push(-c * si * w / n as f64);
            }
        }
        let shape = (bins, win.len());
        Ok(Self {
            cfg: cfg.clone(),
            basis_re: Tensor::from_vec(re, shape, device)?.to_dtype(dtype)?,
            basis_im: Tensor::from_vec(im, shape, device)?.to_dtype(dtype)?,
        })
    }

    /// `real`, `imag`: `[B, T, bins]` full-band spectra. Returns `[B, N]`
    /// waveforms with `N = (T - 1) * hop + win`.
    pub fn istft(&self, real: &Tensor, imag: &Tensor) -> Result<Tensor> {
        let (b, t, bins) = real.dims3()?;
        if bins != self.cfg.n_bins() || imag.dims() != real.dims() {
            return shape_err("istft input [B, T, bins]", &[b, t, self.cfg.n_bins()], imag.dims());
        }
        let win = self.cfg.win_len();
        let hop = self.cfg.hop_len();
        let flat = |x: &Tensor| x.reshape((b * t, bins));
        let frames = (flat(real)?.matmul(&self.basis_re)? + flat(imag)?.matmul(&self.basis_im)?)?;
        let chunks = win.div_ceil(hop);
        let frames = pad_zeros(&frames, 1, 0, chunks * hop - win)?.reshape((b, t, chunks, hop))?;
        let mut acc: Option<Tensor> = None;
        for i in 0..chunks {
            let part = frames.narrow(2, i, 1)?.squeeze(2)?;
            let part = pad_zeros(&part, 1, i, chunks - 1 - i)?;
            acc = Some(match acc {
                None => part,
                Some(a) => (a + part)?,
            });
        }
        let out_len = (t - 1) * hop + win;
        let ola = acc
            .expect("at least one chunk")
            .reshape((b, (t + chunks - 1) * hop))?
            .narrow(1, 0, out_len)?;
        let inv: Vec<f64> = synthesis_envelope(&self.cfg, t)
            .into_iter()
            .map(|e| if e > 1e-8 { 1.0 / e } else { 0.0 })
            .collect();
        let inv = Tensor::from_vec(inv, out_len, real.device())?.to_dtype(real.dtype())?;
        Ok(ola.broadcast_mul(&inv)?)
    }
}

/// Multiplies the noisy full-band spectrum `[B, T, bins, 2]` by a mask over
/// the encoder bins `[B, T, bins - 1, 2]` in the complex field. The DC bin
/// reuses the mask of the lowest retained bin.
pub fn apply_mask(mask: &ComplexTensor, noisy: &Tensor) -> Result<(Tensor, Tensor)> {
    let (b, t, bins, two) = noisy.dims4()?;
    if two != 2 || mask.data.dims() != [b, t, bins - 1, 2] {
        return shape_err("mask for noisy spectrum", &[b, t, bins - 1, 2], mask.data.dims());
    }
    let full = Tensor::cat(&[&mask.data.narrow(2, 0, 1)?, &mask.data], 2)?;
    let (mr, mi) = (full.narrow(3, 0, 1)?.squeeze(3)?, full.narrow(3, 1, 1)?.squeeze(3)?);
    let (nr, ni) = (noisy.narrow(3, 0, 1)?.squeeze(3)?, noisy.narrow(3, 1, 1)?.squeeze(3)?);
    let er = ((&mr * &nr)? - (&mi * &ni)?)?;
    let ei = ((&mr * &ni)? + (&mi * &nr)?)?;
    Ok((er, ei))
}

#[cfg(test)]
mod tests {
    use super::super::complex::spectrogram_batch;
    use super::*;
    use crate::audio_dsp::{istft, stft, AudioBuffer};
    use rand::{Rng, SeedableRng};

    fn noise(n: usize, rate: u32) -> AudioBuffer {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        AudioBuffer::new((0..n).map(|_| rng.random_range(-0.5..0.5)).collect(), rate).unwrap()
    }

    fn check_matches_reference(cfg: &SpectroConfig, n: usize) {
        let audio = noise(n, cfg.sample_rate);
        let spec = stft(&audio, cfg).unwrap();
        let reference = istft(&spec, cfg).unwrap();
        let x = spectrogram_batch(&[&spec], false, DType::F64, &Device::Cpu).unwrap();
        let r = Reconstructor::new(cfg, DType::F64, &Device::Cpu).unwrap();
        let y = r
            .istft(&x.narrow(3, 0, 1).unwrap().squeeze(3).unwrap(), &x.narrow(3, 1, 1).unwrap().squeeze(3).unwrap())
            .unwrap()
            .squeeze(0)
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        assert_eq!(y.len(), reference.len());
        for (a, b) in y.iter().zip(&reference.samples) {
            assert!((a - *b as f64).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn matches_reference_istft_full_config() {
        check_matches_reference(&SpectroConfig::default(), 4000);
    }

    #[test]
    fn matches_reference_istft_toy_config() {
        check_matches_reference(&SpectroConfig::toy(), 800);
    }

    #[test]
    fn identity_and_zero_masks() {
        let cfg = SpectroConfig::toy();
        let audio = noise(800, cfg.sample_rate);
        let spec = stft(&audio, &cfg).unwrap();
        let x = spectrogram_batch(&[&spec], false, DType::F64, &Device::Cpu).unwrap();
        let (b, t, bins, _) = x.dims4().unwrap();
        let ones = Tensor::ones((b, t, bins - 1, 1), DType::F64, &Device::Cpu).unwrap();
        let zeros = ones.zeros_like().unwrap();
        let ident = ComplexTensor::from_parts(&ones, &zeros).unwrap();
        let (er, ei) = apply_mask(&ident, &x).unwrap();
        let r = Reconstructor::new(&cfg, DType::F64, &Device::Cpu).unwrap();
        let y = r.istft(&er, &ei).unwrap().squeeze(0).unwrap().to_vec1::<f64>().unwrap();
        let reference = istft(&spec, &cfg).unwrap();
        for (a, b) in y.iter().zip(&reference.samples) {
            assert!((a - *b as f64).abs() < 1e-5);
        }
        let zero = ComplexTensor::from_parts(&zeros, &zeros).unwrap();
        let (er, ei) = apply_mask(&zero, &x).unwrap();
        let y = r.istft(&er, &ei).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn complex_multiplication_in_mask() {
        let dev = Device::Cpu;
        // noisy bins: DC = 1+0j, bin1 = 1+2j; mask bin1 = 3+4j
        let noisy = Tensor::new(&[[[[1f64, 0.0], [1.0, 2.0]]]], &dev).unwrap();
        let mask = ComplexTensor::new(Tensor::new(&[[[[3f64, 4.0]]]], &dev).unwrap()).unwrap();
        let (er, ei) = apply_mask(&mask, &noisy).unwrap();
        assert_eq!(er.flatten_all().unwrap().to_vec1::<f64>().unwrap(), vec![3.0, -5.0]);
        assert_eq!(ei.flatten_all().unwrap().to_vec1::<f64>().unwrap(), vec![4.0, 10.0]);
    }
}
