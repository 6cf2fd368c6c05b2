use super::complex::ComplexTensor;
use super::conv::{ComplexConvBlock, ComplexConvSpec};
use crate::error::{shape_err, Error, Result};
use crate::nn::ParamStore;
use candle_core::Tensor;
use serde::{Deserialize, Serialize};

/// Encoder geometry. `channels` are total real feature maps per layer
/// (real + imaginary), so complex pairs are half of each entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input_bins: usize,
    pub channels: Vec<usize>,
    pub kernel_f: usize,
    pub stride_f: usize,
    pub leaky_slope: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_bins: 256,
            channels: vec![16, 32, 64, 128, 256, 256],
            kernel_f: 5,
            stride_f: 2,
            leaky_slope: 0.01,
        }
    }
}

/// Output geometry of one encoder layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    /// Total real feature maps.
    pub channels: usize,
    pub pairs: usize,
    pub freq: usize,
}

impl LayerShape {
    /// Per-part flattened size `pairs * freq`.
    pub fn flat_per_part(&self) -> usize {
        self.pairs * self.freq
    }

    /// Real-valued flattened size per frame (both parts).
    pub fn flat_total(&self) -> usize {
        2 * self.flat_per_part()
    }
}

impl EncoderConfig {
    /// Per-layer output shapes; fails if any layer cannot be realised.
    pub fn shape_ledger(&self) -> Result<Vec<LayerShape>> {
        if self.channels.is_empty() {
            return Err(Error::Config("encoder needs at least one layer".into()));
        }
        let mut freq = self.input_bins;
        let mut out = Vec::with_capacity(self.channels.len());
        for (i, &ch) in self.channels.iter().enumerate() {
            if ch == 0 || ch % 2 != 0 {
                return Err(Error::Config(format!(
                    "encoder layer {} has {ch} feature maps; must be a positive even count",
                    i + 1
                )));
            }
            if !freq.is_multiple_of(self.stride_f) || freq < self.stride_f {
                return Err(Error::Config(format!(
                    "encoder layer {} cannot stride {} bins by {}",
                    i + 1,
                    freq,
                    self.stride_f
                )));
            }
            freq /= self.stride_f;
            out.push(LayerShape {
                channels: ch,
                pairs: ch / 2,
                freq,
            });
        }
        Ok(out)
    }
}

/// Per-stream causal state: the last input frame seen by every layer.
#[derive(Debug, Clone, Default)]
pub struct EncoderState {
    pub prev: Vec<Option<Tensor>>,
}

/// Outputs of every encoder layer, shallowest first.
#[derive(Debug, Clone)]
pub struct EncoderFeatureStack {
    pub layers: Vec<ComplexTensor>,
}

impl EncoderFeatureStack {
    pub fn last(&self) -> &ComplexTensor {
        self.layers.last().expect("non-empty stack")
    }

    pub fn frames(&self) -> usize {
        self.last().frames()
    }
}

/// Complex convolutional encoder shared by the enhancement decoder and the
/// keyword branch.
#[derive(Debug, Clone)]
pub struct Encoder {
    blocks: Vec<ComplexConvBlock>,
    shapes: Vec<LayerShape>,
    cfg: EncoderConfig,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &EncoderConfig) -> Result<Self> {
        let shapes = cfg.shape_ledger()?;
        let mut blocks = Vec::with_capacity(shapes.len());
        let mut in_pairs = 1;
        for (i, s) in shapes.iter().enumerate() {
            blocks.push(ComplexConvBlock::new(
                store,
                &format!("{name}.{i}"),
                ComplexConvSpec {
                    in_pairs,
                    out_pairs: s.pairs,
                    kernel_f: cfg.kernel_f,
                    stride_f: cfg.stride_f,
                    transposed: false,
                },
                true,
                cfg.leaky_slope,
            )?);
            in_pairs = s.pairs;
        }
        Ok(Self {
            blocks,
            shapes,
            cfg: cfg.clone(),
        })
    }

    pub fn shapes(&self) -> &[LayerShape] {
        &self.shapes
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// `spec`: `[B, T, F, 2]` with `F = input_bins`. When `state` is given,
    /// frames are treated as the continuation of the previous call.
    pub fn forward(&self, spec: &Tensor, train: bool, state: Option<&mut EncoderState>) -> Result<EncoderFeatureStack> {
        let dims = spec.dims();
        if dims.len() != 4 || dims[2] != self.cfg.input_bins || dims[3] != 2 {
            return shape_err(
                "encoder input [B, T, F, 2]",
                &[dims.first().copied().unwrap_or(0), dims.get(1).copied().unwrap_or(0), self.cfg.input_bins, 2],
                dims,
            );
        }
        let mut x = ComplexTensor::new(spec.clone())?;
        let mut layers = Vec::with_capacity(self.blocks.len());
        let mut fresh = EncoderState::default();
        let st = match state {
            Some(s) => s,
            None => &mut fresh,
        };
        if st.prev.len() != self.blocks.len() {
            st.prev = vec![None; self.blocks.len()];
        }
        for (i, block) in self.blocks.iter().enumerate() {
            let (y, last) = block.forward(&x, st.prev[i].as_ref(), train)?;
            st.prev[i] = Some(last.detach());
            layers.push(y.clone());
            x = y;
        }
        Ok(EncoderFeatureStack { layers })
    }
}

/// Frame-level energy of a layer: `m_t = Σ_c Σ_f sqrt(re² + im²)`.
/// Returns `[B, T]`.
pub fn frame_energy(layer: &ComplexTensor) -> Result<Tensor> {
    let mag = (layer.real()?.sqr()? + layer.imag()?.sqr()?)?.sqrt()?;
    Ok(mag.sum(3)?.sum(2)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn default_ledger_matches_published_geometry() {
        let shapes = EncoderConfig::default().shape_ledger().unwrap();
        let freq: Vec<_> = shapes.iter().map(|s| s.freq).collect();
        let ch: Vec<_> = shapes.iter().map(|s| s.channels).collect();
        let flat: Vec<_> = shapes.iter().map(|s| s.flat_total()).collect();
        assert_eq!(freq, vec![128, 64, 32, 16, 8, 4]);
        assert_eq!(ch, vec![16, 32, 64, 128, 256, 256]);
        assert_eq!(flat, vec![2048, 2048, 2048, 2048, 2048, 1024]);
    }

    #[test]
    fn odd_channel_count_is_construction_error() {
        let cfg = EncoderConfig {
            channels: vec![16, 31],
            ..Default::default()
        };
        let mut st = ParamStore::new(DType::F32, 0);
        assert!(Encoder::new(&mut st, "enc", &cfg).is_err());
    }

    #[test]
    fn wrong_bins_rejected_at_runtime() {
        let cfg = EncoderConfig {
            input_bins: 16,
            channels: vec![4, 8],
            ..Default::default()
        };
        let mut st = ParamStore::new(DType::F32, 0);
        let enc = Encoder::new(&mut st, "enc", &cfg).unwrap();
        let x = Tensor::zeros((1, 3, 17, 2), DType::F32, &Device::Cpu).unwrap();
        assert!(enc.forward(&x, false, None).is_err());
    }

    #[test]
    fn energy_examples() {
        let dev = Device::Cpu;
        // [1, 2 frames, 1 freq, 2 pairs]: frame 0 holds (3,4) and (0,0)
        let data = Tensor::new(&[[[[3f32, 0.0, 4.0, 0.0]], [[1.0, 0.0, 0.0, 1.0]]]], &dev).unwrap();
        let m = frame_energy(&ComplexTensor::new(data).unwrap()).unwrap();
        assert_eq!(m.to_vec2::<f32>().unwrap(), vec![vec![5.0, 2.0]]);
        let z = Tensor::zeros((1, 4, 3, 4), DType::F32, &dev).unwrap();
        let m = frame_energy(&ComplexTensor::new(z).unwrap()).unwrap();
        assert!(m.to_vec2::<f32>().unwrap()[0].iter().all(|&v| v == 0.0));
    }
}
