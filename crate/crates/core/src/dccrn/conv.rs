use super::complex::ComplexTensor;
use crate::error::{invalid, shape_err, Result};
use crate::nn::layers::{im2col_indices, leaky_relu, pad_zeros};
use crate::nn::{BatchNorm, Init, ParamStore};
use candle_core::Tensor;

/// Geometry of one complex convolution. The time extent is always two
/// frames (current and previous), so every layer is causal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ComplexConvSpec {
    pub in_pairs: usize,
    pub out_pairs: usize,
    pub kernel_f: usize,
    /// Frequency stride (encoder) or upsampling factor (decoder).
    pub stride_f: usize,
    pub transposed: bool,
}

impl ComplexConvSpec {
    pub fn out_freq(&self, in_freq: usize) -> usize {
        if self.transposed {
            in_freq * self.stride_f
        } else {
            in_freq.div_ceil(self.stride_f)
        }
    }
}

/// Complex 2-D convolution over (frequency, time) with kernel
/// `[out, in, kernel_f, 2]`; time index 1 is the current frame and index 0
/// the previous one.
///
/// `y_r = W_r * x_r - W_i * x_i`, `y_i = W_r * x_i + W_i * x_r`, plus a
/// complex bias.
#[derive(Debug, Clone)]
pub struct ComplexConv2d {
    pub w_real: Tensor,
    pub w_imag: Tensor,
    pub b_real: Tensor,
    pub b_imag: Tensor,
    pub spec: ComplexConvSpec,
}

impl ComplexConv2d {
    pub fn new(store: &mut ParamStore, name: &str, spec: ComplexConvSpec) -> Result<Self> {
        if spec.kernel_f.is_multiple_of(2) || spec.stride_f == 0 {
            return invalid(format!(
                "{name}: frequency kernel must be odd and stride positive, got {} / {}",
                spec.kernel_f, spec.stride_f
            ));
        }
        let fan_in = (spec.in_pairs * spec.kernel_f * 2 * 2) as f64;
        let bound = 1.0 / fan_in.sqrt();
        let shape = [spec.out_pairs, spec.in_pairs, spec.kernel_f, 2];
        Ok(Self {
            w_real: store.param(&format!("{name}.w_real"), &shape, Init::Uniform(bound))?,
            w_imag: store.param(&format!("{name}.w_imag"), &shape, Init::Uniform(bound))?,
            b_real: store.param(&format!("{name}.b_real"), &[spec.out_pairs], Init::Zeros)?,
            b_imag: store.param(&format!("{name}.b_imag"), &[spec.out_pairs], Init::Zeros)?,
            spec,
        })
    }

    /// Real matrix `[kernel_f * 4 * in, 2 * out]` acting on im2col rows
    /// laid out as (tap, [x_r(t), x_i(t), x_r(t-1), x_i(t-1)]).
    fn kernel_matrix(&self) -> Result<Tensor> {
        let tap = |w: &Tensor, t: usize| -> Result<Tensor> {
            // [out, in, kf] -> [kf, in, out]
            Ok(w.narrow(3, t, 1)?.squeeze(3)?.permute((2, 1, 0))?)
        };
        let (wr_c, wi_c) = (tap(&self.w_real, 1)?, tap(&self.w_imag, 1)?);
        let (wr_p, wi_p) = (tap(&self.w_real, 0)?, tap(&self.w_imag, 0)?);
        let real_cols = Tensor::cat(&[&wr_c, &wi_c.neg()?, &wr_p, &wi_p.neg()?], 1)?;
        let imag_cols = Tensor::cat(&[&wi_c, &wr_c, &wi_p, &wr_p], 1)?;
        let k = Tensor::cat(&[real_cols, imag_cols], 2)?;
        let rows = self.spec.kernel_f * 4 * self.spec.in_pairs;
        Ok(k.reshape((rows, 2 * self.spec.out_pairs))?)
    }

    /// Convolution before normalisation/activation.
    ///
    /// `prev` is the last input frame of the preceding chunk `[B, 1, F, 2C]`
    /// (zeros when absent). Returns the output and this chunk's last input
    /// frame for the next call.
    pub fn pre_activation(&self, x: &ComplexTensor, prev: Option<&Tensor>) -> Result<(Tensor, Tensor)> {
        let (b, t, f, c) = (x.batch(), x.frames(), x.freq(), x.pairs());
        if c != self.spec.in_pairs {
            return shape_err(
                "complex conv input pairs",
                &[b, t, f, 2 * self.spec.in_pairs],
                x.data.dims(),
            );
        }
        if t == 0 {
            return invalid("complex conv input has no frames");
        }
        let history = match prev {
            Some(p) => {
                if p.dims() != [b, 1, f, 2 * c] {
                    return shape_err("complex conv history", &[b, 1, f, 2 * c], p.dims());
                }
                p.clone()
            }
            None => Tensor::zeros((b, 1, f, 2 * c), x.data.dtype(), x.data.device())?,
        };
        let shifted = if t == 1 {
            history
        } else {
            Tensor::cat(&[&history, &x.data.narrow(1, 0, t - 1)?], 1)?
        };
        let last = x.data.narrow(1, t - 1, 1)?;
        let mut cols = Tensor::cat(&[&x.data, &shifted], 3)?; // [B, T, F, 4C]
        let mut len = f;
        let stride = if self.spec.transposed {
            // zero insertion: input sample i lands at position stride * i
            let zeros = cols.zeros_like()?;
            let mut parts = vec![cols.unsqueeze(3)?];
            for _ in 1..self.spec.stride_f {
                parts.push(zeros.unsqueeze(3)?);
            }
            len = f * self.spec.stride_f;
            cols = Tensor::cat(&parts, 3)?.reshape((b, t, len, 4 * c))?;
            1
        } else {
            self.spec.stride_f
        };
        let pad = self.spec.kernel_f / 2;
        let padded = pad_zeros(&cols, 2, pad, pad)?;
        let out_f = self.spec.out_freq(f);
        let idx = im2col_indices(out_f, self.spec.kernel_f, stride, 1, len + 2 * pad, x.data.device())?;
        let patches = padded
            .index_select(&idx, 2)?
            .reshape((b * t * out_f, self.spec.kernel_f * 4 * c))?;
        let bias = Tensor::cat(&[&self.b_real, &self.b_imag], 0)?;
        let y = patches
            .matmul(&self.kernel_matrix()?)?
            .broadcast_add(&bias)?
            .reshape((b, t, out_f, 2 * self.spec.out_pairs))?;
        Ok((y, last))
    }
}

/// Complex convolution followed by optional batch norm and leaky rectifier.
#[derive(Debug, Clone)]
pub struct ComplexConvBlock {
    pub conv: ComplexConv2d,
    pub norm: Option<BatchNorm>,
    pub leaky_slope: Option<f64>,
}

impl ComplexConvBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        spec: ComplexConvSpec,
        norm_and_activation: bool,
        leaky_slope: f64,
    ) -> Result<Self> {
        let conv = ComplexConv2d::new(store, &format!("{name}.conv"), spec)?;
        let (norm, leaky_slope) = if norm_and_activation {
            (
                Some(BatchNorm::new(store, &format!("{name}.bn"), 2 * spec.out_pairs)?),
                Some(leaky_slope),
            )
        } else {
            (None, None)
        };
        Ok(Self {
            conv,
            norm,
            leaky_slope,
        })
    }

    pub fn forward(&self, x: &ComplexTensor, prev: Option<&Tensor>, train: bool) -> Result<(ComplexTensor, Tensor)> {
        let (mut y, last) = self.conv.pre_activation(x, prev)?;
        if let Some(bn) = &self.norm {
            y = bn.forward(&y, train)?;
        }
        if let Some(slope) = self.leaky_slope {
            y = leaky_relu(&y, slope)?;
        }
        Ok((ComplexTensor::new(y)?, last))
    }
}
