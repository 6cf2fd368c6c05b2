//! Learnable weighted aggregation of every encoder layer into one per-frame
//! feature of the final layer's size.

use crate::dccrn::{ComplexTensor, EncoderFeatureStack, LayerShape};
use crate::error::{invalid, shape_err, Result};
use crate::nn::{Init, ParamStore};
use candle_core::Tensor;

/// Weights are rejected when their absolute sum falls to or below this.
pub const MERGE_EPS: f64 = 1e-8;

/// Per-part flattening followed by averaging of `factor` adjacent values.
/// `factor == 1` returns the flattened layer untouched.
pub fn downsample_layer(layer: &ComplexTensor, factor: usize) -> Result<(Tensor, Tensor)> {
    let (r, i) = layer.flatten_parts()?;
    if factor == 1 {
        return Ok((r, i));
    }
    let (b, t, d) = r.dims3()?;
    if factor == 0 || d % factor != 0 {
        return invalid(format!("cannot downsample {d} values by {factor}"));
    }
    let pool = |x: Tensor| -> Result<Tensor> { Ok(x.reshape((b, t, d / factor, factor))?.mean(3)?) };
    Ok((pool(r)?, pool(i)?))
}

/// Merge weights `w` over the encoder layers; the merged feature is
/// `Σ w_i D_i / Σ |w_i|` where `D_i` is the downsampled layer `i`.
#[derive(Debug, Clone)]
pub struct FeatureMerge {
    pub weights: Tensor,
    factors: Vec<usize>,
    target: usize,
}

impl FeatureMerge {
    /// Weights start at zero except the deepest layer, which starts at one.
    pub fn new(store: &mut ParamStore, name: &str, shapes: &[LayerShape]) -> Result<Self> {
        let Some(last) = shapes.last() else {
            return invalid("feature merge needs at least one layer");
        };
        let target = last.flat_per_part();
        let mut factors = Vec::with_capacity(shapes.len());
        for (i, s) in shapes.iter().enumerate() {
            let d = s.flat_per_part();
            if d % target != 0 {
                return invalid(format!(
                    "layer {} flattens to {d} per part, not a multiple of the final {target}",
                    i + 1
                ));
            }
            factors.push(d / target);
        }
        let mut init = vec![0.0; shapes.len()];
        init[shapes.len() - 1] = 1.0;
        let weights = store.param(&format!("{name}.w"), &[shapes.len()], Init::Values(init))?;
        Ok(Self {
            weights,
            factors,
            target,
        })
    }

    /// Output size per part.
    pub fn part_dim(&self) -> usize {
        self.target
    }

    pub fn weight_values(&self) -> Result<Vec<f64>> {
        Ok(self.weights.to_dtype(candle_core::DType::F64)?.to_vec1::<f64>()?)
    }

    /// Returns `(real, imag)`, each `[B, T, part_dim]`.
    pub fn forward(&self, stack: &EncoderFeatureStack) -> Result<(Tensor, Tensor)> {
        if stack.layers.len() != self.factors.len() {
            return shape_err("feature merge layers", &[self.factors.len()], &[stack.layers.len()]);
        }
        let norm = self.weights.abs()?.sum_all()?;
        let norm_value = norm.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
        if !(norm_value > MERGE_EPS) {
            return invalid(format!("feature merge weights sum to {norm_value} in magnitude"));
        }
        let mut acc: Option<(Tensor, Tensor)> = None;
        for (l, (layer, &factor)) in stack.layers.iter().zip(&self.factors).enumerate() {
            let (r, i) = downsample_layer(layer, factor)?;
            let w = self.weights.narrow(0, l, 1)?;
            let (r, i) = (r.broadcast_mul(&w)?, i.broadcast_mul(&w)?);
            acc = Some(match acc {
                None => (r, i),
                Some((ar, ai)) => ((ar + r)?, (ai + i)?),
            });
        }
        let (r, i) = acc.expect("non-empty stack");
        Ok((r.broadcast_div(&norm)?, i.broadcast_div(&norm)?))
    }
}

/// Merged-feature analogue of the layer energy: `Σ_d sqrt(re_d² + im_d²)`
/// per frame. Returns `[B, T]`.
pub fn merged_energy(real: &Tensor, imag: &Tensor) -> Result<Tensor> {
    Ok((real.sqr()? + imag.sqr()?)?.sqrt()?.sum(2)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dccrn::{Encoder, EncoderConfig};
    use candle_core::{DType, Device};

    fn layer_from(values: Vec<f32>, t: usize, f: usize, pairs: usize) -> ComplexTensor {
        ComplexTensor::new(Tensor::from_vec(values, (1, t, f, 2 * pairs), &Device::Cpu).unwrap()).unwrap()
    }

    #[test]
    fn factor_one_is_plain_flatten() {
        let layer = layer_from((0..24).map(|v| v as f32).collect(), 1, 3, 4);
        let (r, _) = downsample_layer(&layer, 1).unwrap();
        let (fr, _) = layer.flatten_parts().unwrap();
        assert_eq!(r.to_vec3::<f32>().unwrap(), fr.to_vec3::<f32>().unwrap());
    }

    #[test]
    fn constants_survive_downsampling() {
        let layer = layer_from(vec![0.25; 2 * 4 * 8], 2, 4, 4);
        let (r, i) = downsample_layer(&layer, 2).unwrap();
        assert_eq!(r.dims(), &[1, 2, 8]);
        for v in r.flatten_all().unwrap().to_vec1::<f32>().unwrap() {
            assert_eq!(v, 0.25);
        }
        for v in i.flatten_all().unwrap().to_vec1::<f32>().unwrap() {
            assert_eq!(v, 0.25);
        }
    }

    #[test]
    fn alternating_values_average_to_midpoint() {
        // one pair, 8 bins: real part alternates a, b along frequency
        let (a, b) = (1.5f32, -0.5f32);
        let mut v = Vec::new();
        for f in 0..8 {
            v.push(if f % 2 == 0 { a } else { b });
            v.push(0.0);
        }
        let layer = layer_from(v, 1, 8, 1);
        let (r, _) = downsample_layer(&layer, 2).unwrap();
        for x in r.flatten_all().unwrap().to_vec1::<f32>().unwrap() {
            assert_eq!(x, (a + b) / 2.0);
        }
    }

    fn toy_stack() -> (ParamStore, FeatureMerge, EncoderFeatureStack) {
        let cfg = EncoderConfig {
            input_bins: 16,
            channels: vec![4, 8, 8],
            ..Default::default()
        };
        let mut st = ParamStore::new(DType::F32, 4);
        let enc = Encoder::new(&mut st, "enc", &cfg).unwrap();
        let merge = FeatureMerge::new(&mut st, "merge", enc.shapes()).unwrap();
        let x = Tensor::randn(0f32, 1.0, (2, 6, 16, 2), &Device::Cpu).unwrap();
        let stack = enc.forward(&x, false, None).unwrap();
        (st, merge, stack)
    }

    #[test]
    fn initial_weights_are_identity_on_last_layer() {
        let (_st, merge, stack) = toy_stack();
        assert_eq!(merge.weight_values().unwrap(), vec![0.0, 0.0, 1.0]);
        let (r, i) = merge.forward(&stack).unwrap();
        let (fr, fi) = stack.last().flatten_parts().unwrap();
        assert_eq!(r.to_vec3::<f32>().unwrap(), fr.to_vec3::<f32>().unwrap());
        assert_eq!(i.to_vec3::<f32>().unwrap(), fi.to_vec3::<f32>().unwrap());
    }

    #[test]
    fn zero_weights_are_rejected() {
        let (st, merge, stack) = toy_stack();
        st.get("merge.w").unwrap().set(&Tensor::zeros(3, DType::F32, &Device::Cpu).unwrap()).unwrap();
        assert!(merge.forward(&stack).is_err());
    }

    #[test]
    fn equal_layers_give_convex_identity() {
        let layer = layer_from((0..32).map(|v| v as f32 * 0.1).collect(), 1, 4, 4);
        let stack = EncoderFeatureStack {
            layers: vec![layer.clone(), layer.clone()],
        };
        let shapes = vec![
            LayerShape {
                channels: 8,
                pairs: 4,
                freq: 4,
            };
            2
        ];
        let mut st = ParamStore::new(DType::F32, 0);
        let merge = FeatureMerge::new(&mut st, "m", &shapes).unwrap();
        st.get("m.w").unwrap().set(&Tensor::new(&[1f32, 1.0], &Device::Cpu).unwrap()).unwrap();
        let (r, _) = merge.forward(&stack).unwrap();
        let (fr, _) = layer.flatten_parts().unwrap();
        assert_eq!(r.to_vec3::<f32>().unwrap(), fr.to_vec3::<f32>().unwrap());
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(32))]
        #[test]
        fn positive_weight_scale_leaves_output_unchanged(
            w in proptest::collection::vec(-2.0f64..2.0, 3),
            k in 0.01f64..100.0,
        ) {
            proptest::prop_assume!(w.iter().map(|v| v.abs()).sum::<f64>() > 0.1);
            let (st, merge, stack) = toy_stack();
            let var = st.get("merge.w").unwrap();
            let out = |scale: f64| {
                let v: Vec<f64> = w.iter().map(|x| x * scale).collect();
                var.set(&Tensor::new(v.as_slice(), &Device::Cpu).unwrap().to_dtype(DType::F32).unwrap()).unwrap();
                let (r, _) = merge.forward(&stack).unwrap();
                r.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1::<f64>().unwrap()
            };
            let a = out(1.0);
            let b = out(k);
            for (x, y) in a.iter().zip(&b) {
                proptest::prop_assert!((x - y).abs() <= 1e-5 * x.abs().max(1.0), "{x} vs {y}");
            }
        }
    }
}
