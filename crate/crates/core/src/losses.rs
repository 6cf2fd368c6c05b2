//! Training objectives and the learning-rate schedule.

use crate::error::{invalid, shape_err, Result};
use crate::simulate::{FrameLabel, LabelTrack};
use candle_core::{DType, Tensor};

pub const SI_SNR_EPS: f64 = 1e-8;
pub const BCE_CLAMP: f64 = 1e-7;

/// Scale-invariant SNR in dB between an estimate and a reference, both
/// zero-meaned first.
pub fn si_snr(estimate: &[f32], reference: &[f32]) -> Result<f64> {
    if estimate.len() != reference.len() || estimate.is_empty() {
        return invalid(format!(
            "si-snr needs equal non-empty lengths, got {} and {}",
            estimate.len(),
            reference.len()
        ));
    }
    let n = estimate.len() as f64;
    let me = estimate.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mr = reference.iter().map(|&v| v as f64).sum::<f64>() / n;
    let e: Vec<f64> = estimate.iter().map(|&v| v as f64 - me).collect();
    let r: Vec<f64> = reference.iter().map(|&v| v as f64 - mr).collect();
    let dot: f64 = e.iter().zip(&r).map(|(a, b)| a * b).sum();
    let rr: f64 = r.iter().map(|v| v * v).sum();
    let scale = dot / (rr + SI_SNR_EPS);
    let mut target = 0.0;
    let mut noise = 0.0;
    for (a, b) in e.iter().zip(&r) {
        let t = scale * b;
        target += t * t;
        noise += (a - t) * (a - t);
    }
    Ok(10.0 * ((target + SI_SNR_EPS) / (noise + SI_SNR_EPS)).log10())
}

/// Per-row SI-SNR `[B]` for `[B, N]` tensors.
pub fn si_snr_tensor(estimate: &Tensor, reference: &Tensor) -> Result<Tensor> {
    if estimate.rank() != 2 || estimate.dims() != reference.dims() {
        return shape_err("si-snr operands", estimate.dims(), reference.dims());
    }
    let e = estimate.broadcast_sub(&estimate.mean_keepdim(1)?)?;
    let r = reference.broadcast_sub(&reference.mean_keepdim(1)?)?;
    let dot = (&e * &r)?.sum_keepdim(1)?;
    let rr = (r.sqr()?.sum_keepdim(1)? + SI_SNR_EPS)?;
    let target = r.broadcast_mul(&(dot / rr)?)?;
    let noise = (&e - &target)?;
    let tp = (target.sqr()?.sum(1)? + SI_SNR_EPS)?;
    let np = (noise.sqr()?.sum(1)? + SI_SNR_EPS)?;
    Ok(((tp / np)?.log()? * (10.0 / std::f64::consts::LN_10))?)
}

/// Label codes to a `(targets, mask)` pair of `[B, T]` tensors; frames
/// marked ignore get mask 0.
pub fn label_tensors(labels: &[&LabelTrack], frames: usize, post: &Tensor) -> Result<(Tensor, Tensor)> {
    let mut tgt = Vec::with_capacity(labels.len() * frames);
    let mut mask = Vec::with_capacity(labels.len() * frames);
    for l in labels {
        if l.labels.len() < frames {
            return invalid(format!("label track has {} frames, need {frames}", l.labels.len()));
        }
        for f in &l.labels[..frames] {
            let (t, m) = match f {
                FrameLabel::Positive => (1.0, 1.0),
                FrameLabel::Negative => (0.0, 1.0),
                FrameLabel::Ignore => (0.0, 0.0),
            };
            tgt.push(t);
            mask.push(m);
        }
    }
    let shape = (labels.len(), frames);
    Ok((
        Tensor::from_vec(tgt, shape, post.device())?.to_dtype(post.dtype())?,
        Tensor::from_vec(mask, shape, post.device())?.to_dtype(post.dtype())?,
    ))
}

/// Binary cross-entropy averaged over unmasked frames. `post` holds
/// keyword probabilities `[B, T]`.
pub fn bce_masked(post: &Tensor, targets: &Tensor, mask: &Tensor) -> Result<Tensor> {
    if post.dims() != targets.dims() || post.dims() != mask.dims() {
        return shape_err("bce operands", post.dims(), targets.dims());
    }
    let p = post.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP)?;
    let pos = (targets * p.log()?)?;
    let neg = ((1.0 - targets)? * (1.0 - &p)?.log()?)?;
    let per = ((pos + neg)? * mask)?.neg()?;
    let count = mask.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if count == 0.0 {
        return invalid("every frame is masked");
    }
    Ok((per.sum_all()? / count)?)
}

/// Plain-slice reference for [`bce_masked`].
pub fn bce_masked_ref(post: &[f64], labels: &[FrameLabel]) -> Result<f64> {
    if post.len() != labels.len() {
        return invalid("bce lengths differ");
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (&p, l) in post.iter().zip(labels) {
        let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
        match l {
            FrameLabel::Positive => sum -= p.ln(),
            FrameLabel::Negative => sum -= (1.0 - p).ln(),
            FrameLabel::Ignore => continue,
        }
        n += 1;
    }
    if n == 0 {
        return invalid("every frame is masked");
    }
    Ok(sum / n as f64)
}

/// Multi-task objective: negated mean SI-SNR plus the keyword BCE. The
/// enhancement term is dropped when `enhanced` is `None`.
pub fn total_loss(
    enhanced: Option<(&Tensor, &Tensor)>,
    post: &Tensor,
    targets: &Tensor,
    mask: &Tensor,
) -> Result<(Tensor, LossParts)> {
    let bce = bce_masked(post, targets, mask)?;
    let bce_v = bce.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    match enhanced {
        Some((est, reference)) => {
            let n = est.dims()[1].min(reference.dims()[1]);
            let s = si_snr_tensor(&est.narrow(1, 0, n)?, &reference.narrow(1, 0, n)?)?.mean_all()?;
            let s_v = s.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            let total = (bce - s)?;
            Ok((total, LossParts { si_snr_db: Some(s_v), bce: bce_v }))
        }
        None => Ok((bce, LossParts { si_snr_db: None, bce: bce_v })),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub si_snr_db: Option<f64>,
    pub bce: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.bce - self.si_snr_db.unwrap_or(0.0)
    }
}

/// Noam schedule: `factor * d_model^-0.5 * min(step^-0.5, step * warmup^-1.5)`
/// with `step` counted from 1.
pub fn noam_lr(step: usize, factor: f64, d_model: usize, warmup: usize) -> Result<f64> {
    if step == 0 || warmup == 0 || d_model == 0 {
        return invalid("noam schedule needs step, warmup and d_model >= 1");
    }
    let s = step as f64;
    Ok(factor * (d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * (warmup as f64).powf(-1.5)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn si_snr_of_scaled_copy_is_large() {
        let r: Vec<f32> = (0..400).map(|i| ((i as f32) * 0.37).sin()).collect();
        let e: Vec<f32> = r.iter().map(|v| 0.5 * v).collect();
        assert!(si_snr(&e, &r).unwrap() > 60.0);
    }

    #[test]
    fn si_snr_known_value() {
        // orthogonal unit-power noise at a quarter of the target power: 10 log10(4)
        let r: Vec<f32> = (0..1000).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let n: Vec<f32> = (0..1000).map(|i| if (i / 2) % 2 == 0 { 0.5 } else { -0.5 }).collect();
        let e: Vec<f32> = r.iter().zip(&n).map(|(a, b)| a + b).collect();
        let v = si_snr(&e, &r).unwrap();
        assert!((v - 10.0 * 4f64.log10()).abs() < 1e-4, "{v}");
    }

    #[test]
    fn tensor_matches_slice() {
        let r: Vec<f32> = (0..300).map(|i| ((i as f32) * 0.21).sin() + 0.1).collect();
        let e: Vec<f32> = (0..300).map(|i| ((i as f32) * 0.21).sin() + 0.3 * ((i as f32) * 1.7).cos()).collect();
        let want = si_snr(&e, &r).unwrap();
        let rt = Tensor::from_vec(r, (1, 300), &Device::Cpu).unwrap();
        let et = Tensor::from_vec(e, (1, 300), &Device::Cpu).unwrap();
        let got = si_snr_tensor(&et, &rt).unwrap().to_vec1::<f32>().unwrap()[0] as f64;
        assert!((got - want).abs() < 1e-3, "{got} vs {want}");
    }

    #[test]
    fn bce_matches_reference_and_ignores_masked() {
        let labels = LabelTrack {
            labels: vec![FrameLabel::Positive, FrameLabel::Negative, FrameLabel::Ignore, FrameLabel::Negative],
        };
        let p = [0.8f64, 0.3, 0.99, 0.0];
        let want = bce_masked_ref(&p, &labels.labels).unwrap();
        let expect = -(0.8f64.ln() + 0.7f64.ln() + (1.0 - BCE_CLAMP).ln()) / 3.0;
        assert!((want - expect).abs() < 1e-12);
        let post = Tensor::from_vec(p.to_vec(), (1, 4), &Device::Cpu).unwrap();
        let (t, m) = label_tensors(&[&labels], 4, &post).unwrap();
        let got = bce_masked(&post, &t, &m).unwrap().to_scalar::<f64>().unwrap();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn noam_peaks_at_warmup() {
        let at = |s| noam_lr(s, 5.0, 128, 1000).unwrap();
        assert!(at(500) < at(1000));
        assert!(at(2000) < at(1000));
        assert!((at(1000) - 5.0 / 128f64.sqrt() / 1000f64.sqrt()).abs() < 1e-12);
        assert!(noam_lr(0, 5.0, 128, 1000).is_err());
    }

    proptest::proptest! {
        #[test]
        fn si_snr_ignores_estimate_scale(seed in 0u64..1000, k in 0.1f32..100.0) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let r: Vec<f32> = (0..2000).map(|_| rng.random_range(-1.0..1.0)).collect();
            let e: Vec<f32> = r.iter().map(|v| v + rng.random_range(-0.5f32..0.5)).collect();
            let scaled: Vec<f32> = e.iter().map(|v| v * k).collect();
            let a = si_snr(&e, &r).unwrap();
            let b = si_snr(&scaled, &r).unwrap();
            // f32 rounding of the scaled copy dominates the difference
            proptest::prop_assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }

        #[test]
        fn noam_rises_then_falls(warmup in 1usize..5000, step in 1usize..20_000) {
            let at = |s| noam_lr(s, 5.0, 128, warmup).unwrap();
            let peak = at(warmup);
            proptest::prop_assert!(at(step) <= peak);
            if step < warmup {
                proptest::prop_assert!(at(step) < at(step + 1));
            } else {
                proptest::prop_assert!(at(step + 1) < at(step));
            }
        }
    }
}
