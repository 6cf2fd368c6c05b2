use super::complex::ComplexTensor;
use super::conv::{ComplexConvBlock, ComplexConvSpec};
use super::encoder::{EncoderConfig, EncoderFeatureStack, LayerShape};
use super::lstm::{ComplexLinear, ComplexLstm};
use crate::error::{shape_err, Result};
use crate::nn::ParamStore;
use serde::{Deserialize, Serialize};

/// Recurrent bottleneck sizes, per part (real or imaginary).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BottleneckConfig {
    pub hidden: usize,
    pub layers: usize,
    pub proj: usize,
}

impl Default for BottleneckConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            layers: 2,
            proj: 128,
        }
    }
}

/// Enhancement branch: complex LSTM over the flattened final encoder layer,
/// a complex linear back to the encoder output size, then mirrored
/// upsampling complex convolutions with skip connections producing a
/// one-channel complex mask.
#[derive(Debug, Clone)]
pub struct Decoder {
    lstm: ComplexLstm,
    expand: ComplexLinear,
    blocks: Vec<ComplexConvBlock>,
    shapes: Vec<LayerShape>,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, name: &str, enc: &EncoderConfig, bottleneck: &BottleneckConfig) -> Result<Self> {
        let shapes = enc.shape_ledger()?;
        let last = *shapes.last().expect("ledger is non-empty");
        let lstm = ComplexLstm::new(
            store,
            &format!("{name}.lstm"),
            last.flat_per_part(),
            bottleneck.hidden,
            bottleneck.layers,
            bottleneck.proj,
        )?;
        let expand = ComplexLinear::new(store, &format!("{name}.expand"), bottleneck.proj, last.flat_per_part())?;
        let mut blocks = Vec::with_capacity(shapes.len());
        for i in (0..shapes.len()).rev() {
            let out_pairs = if i == 0 { 1 } else { shapes[i - 1].pairs };
            blocks.push(ComplexConvBlock::new(
                store,
                &format!("{name}.up{i}"),
                ComplexConvSpec {
                    in_pairs: 2 * shapes[i].pairs,
                    out_pairs,
                    kernel_f: enc.kernel_f,
                    stride_f: enc.stride_f,
                    transposed: true,
                },
                i != 0,
                enc.leaky_slope,
            )?);
        }
        Ok(Self {
            lstm,
            expand,
            blocks,
            shapes,
        })
    }

    /// Complex mask `[B, T, F, 2]` for the encoder input bins.
    pub fn forward(&self, stack: &EncoderFeatureStack, train: bool) -> Result<ComplexTensor> {
        if stack.layers.len() != self.shapes.len() {
            return shape_err("decoder skip stack depth", &[self.shapes.len()], &[stack.layers.len()]);
        }
        let last = stack.last();
        let shape = *self.shapes.last().expect("ledger is non-empty");
        let (xr, xi) = last.flatten_parts()?;
        let (yr, yi, _) = self.lstm.forward(&xr, &xi, None)?;
        let (er, ei) = self.expand.forward(&yr, &yi)?;
        let mut x = ComplexTensor::unflatten_parts(&er, &ei, shape.pairs, shape.freq)?;
        for (block, skip) in self.blocks.iter().zip(stack.layers.iter().rev()) {
            let input = x.cat_channels(skip)?;
            x = block.forward(&input, None, train)?.0;
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::super::encoder::Encoder;
    use super::*;
    use candle_core::{DType, Device, Tensor};

    #[test]
    fn mask_matches_input_geometry() {
        let enc_cfg = EncoderConfig {
            input_bins: 16,
            channels: vec![4, 8],
            ..Default::default()
        };
        let mut st = ParamStore::new(DType::F32, 1);
        let enc = Encoder::new(&mut st, "enc", &enc_cfg).unwrap();
        let dec = Decoder::new(
            &mut st,
            "dec",
            &enc_cfg,
            &BottleneckConfig {
                hidden: 8,
                layers: 1,
                proj: 8,
            },
        )
        .unwrap();
        let x = Tensor::randn(0f32, 1.0, (2, 5, 16, 2), &Device::Cpu).unwrap();
        let stack = enc.forward(&x, true, None).unwrap();
        let mask = dec.forward(&stack, true).unwrap();
        assert_eq!(mask.data.dims(), &[2, 5, 16, 2]);
    }
}
