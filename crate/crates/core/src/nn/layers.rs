use super::params::{Init, ParamStore};
use crate::error::{shape_err, Result};
use candle_core::{DType, Tensor, Var, D};

/// Dense layer with weight stored `[in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    in_dim: usize,
    out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = store.param(&format!("{name}.weight"), &[in_dim, out_dim], Init::Uniform(bound))?;
        let bias = if bias {
            Some(store.param(&format!("{name}.bias"), &[out_dim], Init::Uniform(bound))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    /// Applies the layer over the last axis of `x`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let last = *dims.last().unwrap_or(&0);
        if last != self.in_dim {
            let mut expected = dims.clone();
            *expected.last_mut().unwrap() = self.in_dim;
            return shape_err("linear input", &expected, &dims);
        }
        let rows = x.elem_count() / self.in_dim;
        let mut y = x.reshape((rows, self.in_dim))?.matmul(&self.weight)?;
        if let Some(b) = &self.bias {
            y = y.broadcast_add(b)?;
        }
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.out_dim;
        Ok(y.reshape(out_dims)?)
    }
}

/// Batch normalisation over every axis but the last (channel-last layout).
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    running_mean: Var,
    running_var: Var,
    channels: usize,
    eps: f64,
    momentum: f64,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.param(&format!("{name}.gamma"), &[channels], Init::Ones)?,
            beta: store.param(&format!("{name}.beta"), &[channels], Init::Zeros)?,
            running_mean: store.buffer(&format!("{name}.running_mean"), &[channels], Init::Zeros)?,
            running_var: store.buffer(&format!("{name}.running_var"), &[channels], Init::Ones)?,
            channels,
            eps: 1e-5,
            momentum: 0.1,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        if dims.last() != Some(&self.channels) {
            return shape_err("batch norm channels", &[self.channels], &dims);
        }
        let rows = x.elem_count() / self.channels;
        let flat = x.reshape((rows, self.channels))?;
        let (mean, var) = if train {
            let mean = flat.mean_keepdim(0)?;
            let centered = flat.broadcast_sub(&mean)?;
            let var = centered.sqr()?.mean_keepdim(0)?;
            let m = self.momentum;
            let unbiased = if rows > 1 {
                (var.detach() * (rows as f64 / (rows as f64 - 1.0)))?
            } else {
                var.detach()
            };
            let new_mean = ((self.running_mean.as_tensor() * (1.0 - m))? + (mean.detach().squeeze(0)? * m)?)?;
            let new_var = ((self.running_var.as_tensor() * (1.0 - m))? + (unbiased.squeeze(0)? * m)?)?;
            self.running_mean.set(&new_mean)?;
            self.running_var.set(&new_var)?;
            (mean, var)
        } else {
            (
                self.running_mean.as_tensor().detach().unsqueeze(0)?,
                self.running_var.as_tensor().detach().unsqueeze(0)?,
            )
        };
        let inv_std = (var + self.eps)?.sqrt()?.recip()?;
        let y = flat
            .broadcast_sub(&mean)?
            .broadcast_mul(&inv_std)?
            .broadcast_mul(&self.gamma)?
            .broadcast_add(&self.beta)?;
        Ok(y.reshape(dims)?)
    }
}

pub fn relu(x: &Tensor) -> Result<Tensor> {
    Ok(x.relu()?)
}

/// `max(x, 0) + slope * min(x, 0)`.
pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok((x.relu()? - (x.neg()?.relu()? * slope)?)?)
}

/// Logistic function via `tanh`, which keeps gradients finite for large
/// negative inputs.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((((x * 0.5)?.tanh()? + 1.0)? * 0.5)?)
}

/// Softmax over the last axis.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

/// Index tensor selecting the im2col columns of a 1-D convolution along an
/// axis of (already padded) length `padded_len`: output position `o`, tap
/// `k` reads `o * stride + k * dilation`. Order is position-major.
pub fn im2col_indices(
    out_len: usize,
    kernel: usize,
    stride: usize,
    dilation: usize,
    padded_len: usize,
    device: &candle_core::Device,
) -> Result<Tensor> {
    let mut idx = Vec::with_capacity(out_len * kernel);
    for o in 0..out_len {
        for k in 0..kernel {
            let i = o * stride + k * dilation;
            debug_assert!(i < padded_len);
            idx.push(i as u32);
        }
    }
    Ok(Tensor::from_vec(idx, out_len * kernel, device)?)
}

/// Zero padding along `dim`.
pub fn pad_zeros(x: &Tensor, dim: usize, left: usize, right: usize) -> Result<Tensor> {
    if left == 0 && right == 0 {
        return Ok(x.clone());
    }
    let mut parts = Vec::with_capacity(3);
    let mut shape = x.dims().to_vec();
    if left > 0 {
        shape[dim] = left;
        parts.push(Tensor::zeros(shape.as_slice(), x.dtype(), x.device())?);
    }
    parts.push(x.clone());
    if right > 0 {
        shape[dim] = right;
        parts.push(Tensor::zeros(shape.as_slice(), x.dtype(), x.device())?);
    }
    Ok(Tensor::cat(&parts, dim)?)
}

/// 1-D convolution over the time axis of a channel-last `[B, T, C]` input.
/// Weight is stored `[kernel * in, out]` with tap-major rows.
#[derive(Debug, Clone)]
pub struct Conv1d {
    pub weight: Tensor,
    pub bias: Tensor,
    kernel: usize,
    dilation: usize,
    in_dim: usize,
}

impl Conv1d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        kernel: usize,
        dilation: usize,
    ) -> Result<Self> {
        let bound = 1.0 / ((in_dim * kernel) as f64).sqrt();
        Ok(Self {
            weight: store.param(&format!("{name}.weight"), &[kernel * in_dim, out_dim], Init::Uniform(bound))?,
            bias: store.param(&format!("{name}.bias"), &[out_dim], Init::Uniform(bound))?,
            kernel,
            dilation,
            in_dim,
        })
    }

    /// Total receptive-field padding `(kernel - 1) * dilation`.
    pub fn span(&self) -> usize {
        (self.kernel - 1) * self.dilation
    }

    /// Symmetric "same" convolution: output length equals input length.
    pub fn forward_same(&self, x: &Tensor) -> Result<Tensor> {
        let span = self.span();
        self.forward_padded(x, span / 2, span - span / 2)
    }

    pub fn forward_padded(&self, x: &Tensor, left: usize, right: usize) -> Result<Tensor> {
        let (b, t, c) = x.dims3()?;
        if c != self.in_dim {
            return shape_err("conv1d input channels", &[b, t, self.in_dim], x.dims());
        }
        if self.kernel == 1 {
            return Ok(x
                .reshape((b * t, c))?
                .matmul(&self.weight)?
                .broadcast_add(&self.bias)?
                .reshape((b, t, ()))?);
        }
        let padded = pad_zeros(x, 1, left, right)?;
        let len = t + left + right;
        let out_len = len - self.span();
        let idx = im2col_indices(out_len, self.kernel, 1, self.dilation, len, x.device())?;
        let cols = padded.index_select(&idx, 1)?.reshape((b * out_len, self.kernel * c))?;
        Ok(cols
            .matmul(&self.weight)?
            .broadcast_add(&self.bias)?
            .reshape((b, out_len, ()))?)
    }
}

/// Convenience scalar tensor in a given dtype.
pub fn scalar(v: f64, dtype: DType, device: &candle_core::Device) -> Result<Tensor> {
    Ok(Tensor::new(v, device)?.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn conv1d_matches_direct_sum() {
        let mut store = ParamStore::new(DType::F64, 2);
        let conv = Conv1d::new(&mut store, "c", 2, 3, 3, 2).unwrap();
        let x = Tensor::randn(0f64, 1.0, (1, 7, 2), &Device::Cpu).unwrap();
        let y = conv.forward_same(&x).unwrap().squeeze(0).unwrap().to_vec2::<f64>().unwrap();
        let xv = x.squeeze(0).unwrap().to_vec2::<f64>().unwrap();
        let w = conv.weight.to_vec2::<f64>().unwrap();
        let bias = conv.bias.to_vec1::<f64>().unwrap();
        for t in 0..7 {
            for o in 0..3 {
                let mut acc = bias[o];
                for k in 0..3 {
                    let src = t as i64 + (k as i64) * 2 - 2;
                    if (0..7).contains(&src) {
                        for c in 0..2 {
                            acc += w[k * 2 + c][o] * xv[src as usize][c];
                        }
                    }
                }
                assert!((acc - y[t][o]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linear_shapes() {
        let mut store = ParamStore::new(DType::F32, 0);
        let l = Linear::new(&mut store, "l", 4, 3, true).unwrap();
        let x = Tensor::zeros((2, 5, 4), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(l.forward(&x).unwrap().dims(), &[2, 5, 3]);
        let bad = Tensor::zeros((2, 5), DType::F32, &Device::Cpu).unwrap();
        assert!(l.forward(&bad).is_err());
    }

    #[test]
    fn batchnorm_train_normalises_and_updates_stats() {
        let mut store = ParamStore::new(DType::F64, 0);
        let bn = BatchNorm::new(&mut store, "bn", 2).unwrap();
        let x = Tensor::new(&[[1.0f64, 10.0], [3.0, 30.0]], &Device::Cpu).unwrap();
        let y = bn.forward(&x, true).unwrap().to_vec2::<f64>().unwrap();
        assert!((y[0][0] + y[1][0]).abs() < 1e-12);
        assert!((y[1][0] - 1.0).abs() < 1e-5);
        let rm = store.get("bn.running_mean").unwrap().to_vec1::<f64>().unwrap();
        assert!((rm[0] - 0.2).abs() < 1e-12 && (rm[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn sigmoid_and_leaky() {
        let x = Tensor::new(&[-200.0f32, 0.0, 3.0], &Device::Cpu).unwrap();
        let s = sigmoid(&x).unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(s[0], 0.0);
        assert_eq!(s[1], 0.5);
        let l = leaky_relu(&x, 0.1).unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(l, vec![-20.0, 0.0, 3.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::new(&[[1.0f32, 2.0, 3.0], [-50.0, 0.0, 50.0]], &Device::Cpu).unwrap();
        for row in softmax_last(&x).unwrap().to_vec2::<f32>().unwrap() {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }
}
