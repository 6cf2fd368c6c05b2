use crate::audio_dsp::ComplexSpectrogram;
use crate::error::{invalid, shape_err, Result};
use candle_core::{DType, Device, Tensor};

/// Complex feature map in channel-last layout `[B, T, F, 2C]`: the first `C`
/// channels hold real parts, the last `C` the matching imaginary parts.
#[derive(Debug, Clone)]
pub struct ComplexTensor {
    pub data: Tensor,
}

impl ComplexTensor {
    pub fn new(data: Tensor) -> Result<Self> {
        let dims = data.dims();
        if dims.len() != 4 || !dims[3].is_multiple_of(2) {
            return shape_err("complex tensor [B, T, F, 2C]", &[0, 0, 0, 2], dims);
        }
        Ok(Self { data })
    }

    /// Builds from separate `[B, T, F, C]` real and imaginary parts.
    pub fn from_parts(real: &Tensor, imag: &Tensor) -> Result<Self> {
        if real.dims() != imag.dims() {
            return shape_err("complex parts", real.dims(), imag.dims());
        }
        Self::new(Tensor::cat(&[real, imag], 3)?)
    }

    pub fn batch(&self) -> usize {
        self.data.dims()[0]
    }

    pub fn frames(&self) -> usize {
        self.data.dims()[1]
    }

    pub fn freq(&self) -> usize {
        self.data.dims()[2]
    }

    /// Number of complex channels.
    pub fn pairs(&self) -> usize {
        self.data.dims()[3] / 2
    }

    pub fn real(&self) -> Result<Tensor> {
        Ok(self.data.narrow(3, 0, self.pairs())?)
    }

    pub fn imag(&self) -> Result<Tensor> {
        Ok(self.data.narrow(3, self.pairs(), self.pairs())?)
    }

    /// Multiplication by the imaginary unit: `(r, i) -> (-i, r)`.
    pub fn mul_j(&self) -> Result<Self> {
        Self::from_parts(&self.imag()?.neg()?, &self.real()?)
    }

    /// Complex channel concatenation (reals with reals, imaginaries with
    /// imaginaries).
    pub fn cat_channels(&self, other: &ComplexTensor) -> Result<Self> {
        let real = Tensor::cat(&[self.real()?, other.real()?], 3)?;
        let imag = Tensor::cat(&[self.imag()?, other.imag()?], 3)?;
        Self::from_parts(&real, &imag)
    }

    /// Per-part flattening to `[B, T, C*F]`, channel-major and
    /// frequency-minor.
    pub fn flatten_parts(&self) -> Result<(Tensor, Tensor)> {
        let (b, t, f, c) = (self.batch(), self.frames(), self.freq(), self.pairs());
        let flat = |x: Tensor| -> Result<Tensor> {
            Ok(x.permute((0, 1, 3, 2))?.contiguous()?.reshape((b, t, c * f))?)
        };
        Ok((flat(self.real()?)?, flat(self.imag()?)?))
    }

    /// Inverse of [`ComplexTensor::flatten_parts`].
    pub fn unflatten_parts(real: &Tensor, imag: &Tensor, pairs: usize, freq: usize) -> Result<Self> {
        let (b, t, d) = real.dims3()?;
        if d != pairs * freq {
            return shape_err("unflatten", &[b, t, pairs * freq], real.dims());
        }
        let unflat = |x: &Tensor| -> Result<Tensor> {
            Ok(x.reshape((b, t, pairs, freq))?.permute((0, 1, 3, 2))?.contiguous()?)
        };
        Self::from_parts(&unflat(real)?, &unflat(imag)?)
    }

    pub fn narrow_frames(&self, start: usize, len: usize) -> Result<Self> {
        Self::new(self.data.narrow(1, start, len)?)
    }
}

/// Stacks spectrograms into a `[B, T, F, 2]` model input. With `drop_dc`
/// the DC bin is removed so the encoder sees `fft_size / 2` bins.
pub fn spectrogram_batch(
    specs: &[&ComplexSpectrogram],
    drop_dc: bool,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let Some(first) = specs.first() else {
        return invalid("empty spectrogram batch");
    };
    let frames = first.frames();
    let start = usize::from(drop_dc);
    let bins = first.bins() - start;
    let mut data = Vec::with_capacity(specs.len() * frames * bins * 2);
    for spec in specs {
        if spec.frames() != frames || spec.bins() != first.bins() {
            return invalid("spectrograms in a batch must share their shape");
        }
        for t in 0..frames {
            for k in start..spec.bins() {
                data.push(spec.real[[k, t]]);
            }
            for k in start..spec.bins() {
                data.push(spec.imag[[k, t]]);
            }
        }
    }
    // built as [B, T, 2, F] then moved to channel-last
    let t = Tensor::from_vec(data, (specs.len(), frames, 2, bins), device)?
        .permute((0, 1, 3, 2))?
        .contiguous()?
        .to_dtype(dtype)?;
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mul_j_swaps_parts() {
        let dev = Device::Cpu;
        let r = Tensor::new(&[[[[1f32]]]], &dev).unwrap();
        let i = Tensor::new(&[[[[2f32]]]], &dev).unwrap();
        let z = ComplexTensor::from_parts(&r, &i).unwrap().mul_j().unwrap();
        assert_eq!(z.data.flatten_all().unwrap().to_vec1::<f32>().unwrap(), vec![-2.0, 1.0]);
    }

    #[test]
    fn flatten_round_trip() {
        let dev = Device::Cpu;
        let x = Tensor::arange(0f32, 48.0, &dev).unwrap().reshape((1, 2, 4, 6)).unwrap();
        let ct = ComplexTensor::new(x.clone()).unwrap();
        let (r, i) = ct.flatten_parts().unwrap();
        assert_eq!(r.dims(), &[1, 2, 12]);
        // channel-major: element (c=1, f=0) of frame 0 is at flat index 4
        assert_eq!(r.to_vec3::<f32>().unwrap()[0][0][4], 1.0);
        let back = ComplexTensor::unflatten_parts(&r, &i, 3, 4).unwrap();
        assert_eq!(
            back.data.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            x.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
    }

    #[test]
    fn spectrogram_batch_drops_dc() {
        let mut spec = ComplexSpectrogram::zeros(5, 3);
        spec.real[[0, 1]] = 9.0;
        spec.real[[1, 1]] = 1.0;
        spec.imag[[4, 2]] = 2.0;
        let t = spectrogram_batch(&[&spec], true, DType::F32, &Device::Cpu).unwrap();
        assert_eq!(t.dims(), &[1, 3, 4, 2]);
        let v = t.squeeze(0).unwrap().to_vec3::<f32>().unwrap();
        assert_eq!(v[1][0], vec![1.0, 0.0]);
        assert_eq!(v[2][3], vec![0.0, 2.0]);
    }
}
