//! Keyword branch: projection of the merged encoder feature (plain, with the
//! bias embedding, or complex context linear), the dilated temporal
//! convolution stack and the per-frame decision rule.

use crate::error::{invalid, shape_err, Error, Result};
use crate::nn::layers::{pad_zeros, relu, softmax_last};
use crate::nn::{BatchNorm, Init, Linear, ParamStore};
use candle_core::Tensor;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionMode {
    Plain,
    BiasConcat,
    Ccl,
}

impl ProjectionMode {
    pub fn uses_bias(self) -> bool {
        self != ProjectionMode::Plain
    }
}

impl fmt::Display for ProjectionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProjectionMode::Plain => "plain",
            ProjectionMode::BiasConcat => "bias",
            ProjectionMode::Ccl => "ccl",
        })
    }
}

impl FromStr for ProjectionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(ProjectionMode::Plain),
            "bias" | "bias_concat" => Ok(ProjectionMode::BiasConcat),
            "ccl" => Ok(ProjectionMode::Ccl),
            other => Err(Error::Config(format!(
                "unknown projection `{other}` (expected plain, bias or ccl)"
            ))),
        }
    }
}

/// Keyword-branch geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KwsConfig {
    /// Merged feature size per part (real or imaginary).
    pub part_dim: usize,
    pub bias_dim: usize,
    pub kws_dim: usize,
    pub context: usize,
    pub blocks: usize,
    pub kernel: usize,
    pub dilation_cycle: Vec<usize>,
}

impl Default for KwsConfig {
    fn default() -> Self {
        Self {
            part_dim: 512,
            bias_dim: crate::context_bias::EMBEDDING_DIM,
            kws_dim: 128,
            context: 3,
            blocks: 16,
            kernel: 5,
            dilation_cycle: vec![1, 2, 4, 8],
        }
    }
}

impl KwsConfig {
    pub fn dilations(&self) -> Vec<usize> {
        (0..self.blocks)
            .map(|i| self.dilation_cycle[i % self.dilation_cycle.len()])
            .collect()
    }

    /// Frames of past context seen by the DTC stack, including the current.
    pub fn receptive_field(&self) -> usize {
        1 + self.dilations().iter().map(|d| (self.kernel - 1) * d).sum::<usize>()
    }

    pub fn validate(&self) -> Result<()> {
        if !self.kws_dim.is_multiple_of(2) || !self.bias_dim.is_multiple_of(2) {
            return Err(Error::Config("kws and bias dimensions must be even".into()));
        }
        if self.context == 0 || self.kernel == 0 || self.dilation_cycle.is_empty() {
            return Err(Error::Config("context, kernel and dilations must be non-empty".into()));
        }
        Ok(())
    }
}

/// `[B, T, D]` delayed by `k` frames with zeros (or `history`, the last `k`
/// frames of the previous chunk) shifted in.
fn delay(x: &Tensor, k: usize, history: Option<&Tensor>) -> Result<Tensor> {
    if k == 0 {
        return Ok(x.clone());
    }
    let t = x.dims()[1];
    let padded = match history {
        Some(h) => Tensor::cat(&[h, x], 1)?,
        None => pad_zeros(x, 1, k, 0)?,
    };
    let len = padded.dims()[1];
    Ok(padded.narrow(1, len - t - k, t)?)
}

fn tail(x: &Tensor, n: usize) -> Result<Tensor> {
    let t = x.dims()[1];
    Ok(x.narrow(1, t - n, n)?)
}

#[derive(Debug, Clone)]
struct CclBranch {
    real: Linear,
    imag: Linear,
}

#[derive(Debug, Clone)]
enum ProjectionKind {
    Dense(Linear),
    Ccl(Vec<CclBranch>),
}

/// Merged feature (and bias) to the keyword-module input.
#[derive(Debug, Clone)]
pub struct Projection {
    pub mode: ProjectionMode,
    kind: ProjectionKind,
    cfg: KwsConfig,
}

impl Projection {
    pub fn new(store: &mut ParamStore, name: &str, mode: ProjectionMode, cfg: &KwsConfig) -> Result<Self> {
        cfg.validate()?;
        let feat = 2 * cfg.part_dim;
        let kind = match mode {
            ProjectionMode::Plain => ProjectionKind::Dense(Linear::new(store, &format!("{name}.fc"), feat, cfg.kws_dim, true)?),
            ProjectionMode::BiasConcat => ProjectionKind::Dense(Linear::new(
                store,
                &format!("{name}.fc"),
                feat + cfg.bias_dim,
                cfg.kws_dim,
                true,
            )?),
            ProjectionMode::Ccl => {
                let input = cfg.part_dim + cfg.bias_dim / 2;
                let mut branches = Vec::with_capacity(cfg.context);
                for k in 0..cfg.context {
                    branches.push(CclBranch {
                        real: Linear::new(store, &format!("{name}.ccl{k}.real"), input, cfg.kws_dim / 2, true)?,
                        imag: Linear::new(store, &format!("{name}.ccl{k}.imag"), input, cfg.kws_dim / 2, true)?,
                    });
                }
                ProjectionKind::Ccl(branches)
            }
        };
        Ok(Self {
            mode,
            kind,
            cfg: cfg.clone(),
        })
    }

    /// Weight matrix shapes `[in, out]` in registration order.
    pub fn weight_shapes(&self) -> Vec<(usize, usize)> {
        match &self.kind {
            ProjectionKind::Dense(l) => vec![(l.in_dim(), l.out_dim())],
            ProjectionKind::Ccl(bs) => bs
                .iter()
                .flat_map(|b| [(b.real.in_dim(), b.real.out_dim()), (b.imag.in_dim(), b.imag.out_dim())])
                .collect(),
        }
    }

    pub fn weight_count(&self) -> usize {
        self.weight_shapes().iter().map(|(i, o)| i * o).sum()
    }

    pub fn bias_count(&self) -> usize {
        self.weight_shapes().iter().map(|(_, o)| o).sum()
    }

    /// Frames of merged-feature history needed for streaming.
    pub fn history_len(&self) -> usize {
        match self.mode {
            ProjectionMode::Ccl => self.cfg.context - 1,
            _ => 0,
        }
    }

    /// Pre-activation output `[B, T, kws_dim]`. `real`, `imag`: `[B, T,
    /// part_dim]`; `bias`: `[bias_dim]`; `history`: the previous chunk's
    /// last `history_len` frames of `(real, imag)`.
    pub fn pre_activation(
        &self,
        real: &Tensor,
        imag: &Tensor,
        bias: Option<&Tensor>,
        history: Option<&(Tensor, Tensor)>,
    ) -> Result<Tensor> {
        let (b, t, d) = real.dims3()?;
        if d != self.cfg.part_dim || imag.dims() != real.dims() {
            return shape_err("projection input part", &[b, t, self.cfg.part_dim], imag.dims());
        }
        let bias = match (self.mode.uses_bias(), bias) {
            (true, None) => return invalid(format!("{} projection requires a bias embedding", self.mode)),
            (false, Some(_)) => return invalid("plain projection takes no bias embedding"),
            (_, b) => b,
        };
        if let Some(e) = bias {
            if e.dims() != [self.cfg.bias_dim] {
                return shape_err("bias embedding", &[self.cfg.bias_dim], e.dims());
            }
        }
        let expand = |v: &Tensor| -> Result<Tensor> {
            let n = v.dims()[0];
            Ok(v.reshape((1, 1, n))?.broadcast_as((b, t, n))?.contiguous()?)
        };
        match &self.kind {
            ProjectionKind::Dense(l) => {
                let mut parts = vec![real.clone(), imag.clone()];
                if let Some(e) = bias {
                    parts.push(expand(e)?);
                }
                l.forward(&Tensor::cat(&parts, 2)?)
            }
            ProjectionKind::Ccl(branches) => {
                let e = bias.expect("checked above");
                let half = self.cfg.bias_dim / 2;
                let br = expand(&e.narrow(0, 0, half)?)?;
                let bi = expand(&e.narrow(0, half, half)?)?;
                let mut acc: Option<Tensor> = None;
                for (k, branch) in branches.iter().enumerate() {
                    let hr = history.map(|h| tail(&h.0, k)).transpose()?;
                    let hi = history.map(|h| tail(&h.1, k)).transpose()?;
                    let xr = delay(real, k, hr.as_ref())?;
                    let xi = delay(imag, k, hi.as_ref())?;
                    let u = branch.real.forward(&Tensor::cat(&[&xr, &br], 2)?)?;
                    let v = branch.imag.forward(&Tensor::cat(&[&xi, &bi], 2)?)?;
                    let y = Tensor::cat(&[u, v], 2)?;
                    acc = Some(match acc {
                        None => y,
                        Some(a) => (a + y)?,
                    });
                }
                Ok(acc.expect("context >= 1"))
            }
        }
    }

    pub fn forward(
        &self,
        real: &Tensor,
        imag: &Tensor,
        bias: Option<&Tensor>,
        history: Option<&(Tensor, Tensor)>,
    ) -> Result<Tensor> {
        relu(&self.pre_activation(real, imag, bias, history)?)
    }
}

/// Causal depthwise convolution with weight `[kernel, C]`.
#[derive(Debug, Clone)]
struct DepthwiseConv {
    weight: Tensor,
    bias: Tensor,
    kernel: usize,
    dilation: usize,
}

impl DepthwiseConv {
    fn span(&self) -> usize {
        (self.kernel - 1) * self.dilation
    }

    fn forward(&self, x: &Tensor, history: Option<&Tensor>) -> Result<(Tensor, Tensor)> {
        let t = x.dims()[1];
        let span = self.span();
        let padded = match history {
            Some(h) => Tensor::cat(&[h, x], 1)?,
            None => pad_zeros(x, 1, span, 0)?,
        };
        let mut acc: Option<Tensor> = None;
        for j in 0..self.kernel {
            let term = padded
                .narrow(1, j * self.dilation, t)?
                .broadcast_mul(&self.weight.narrow(0, j, 1)?.squeeze(0)?)?;
            acc = Some(match acc {
                None => term,
                Some(a) => (a + term)?,
            });
        }
        let y = acc.expect("kernel >= 1").broadcast_add(&self.bias)?;
        let len = padded.dims()[1];
        Ok((y, padded.narrow(1, len - span, span)?))
    }
}

#[derive(Debug, Clone)]
struct DtcBlock {
    depthwise: DepthwiseConv,
    bn0: BatchNorm,
    pw1: Linear,
    bn1: BatchNorm,
    pw2: Linear,
    bn2: BatchNorm,
}

impl DtcBlock {
    fn forward(&self, x: &Tensor, history: Option<&Tensor>, train: bool) -> Result<(Tensor, Tensor)> {
        let (h, hist) = self.depthwise.forward(x, history)?;
        let h = relu(&self.bn0.forward(&h, train)?)?;
        let h = relu(&self.bn1.forward(&self.pw1.forward(&h)?, train)?)?;
        let h = self.bn2.forward(&self.pw2.forward(&h)?, train)?;
        Ok((relu(&(h + x)?)?, hist))
    }
}

/// Stack of dilated temporal convolution blocks and the two-class output.
#[derive(Debug, Clone)]
pub struct Dtc {
    blocks: Vec<DtcBlock>,
    out: Linear,
    dim: usize,
}

/// Per-stream histories of every DTC block.
#[derive(Debug, Clone, Default)]
pub struct DtcState {
    pub histories: Vec<Option<Tensor>>,
}

impl Dtc {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &KwsConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.kws_dim;
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for (i, d) in cfg.dilations().into_iter().enumerate() {
            let bound = 1.0 / (cfg.kernel as f64).sqrt();
            blocks.push(DtcBlock {
                depthwise: DepthwiseConv {
                    weight: store.param(&format!("{name}.{i}.dw.weight"), &[cfg.kernel, c], Init::Uniform(bound))?,
                    bias: store.param(&format!("{name}.{i}.dw.bias"), &[c], Init::Zeros)?,
                    kernel: cfg.kernel,
                    dilation: d,
                },
                bn0: BatchNorm::new(store, &format!("{name}.{i}.bn0"), c)?,
                pw1: Linear::new(store, &format!("{name}.{i}.pw1"), c, c, true)?,
                bn1: BatchNorm::new(store, &format!("{name}.{i}.bn1"), c)?,
                pw2: Linear::new(store, &format!("{name}.{i}.pw2"), c, c, true)?,
                bn2: BatchNorm::new(store, &format!("{name}.{i}.bn2"), c)?,
            });
        }
        Ok(Self {
            blocks,
            out: Linear::new(store, &format!("{name}.out"), c, 2, true)?,
            dim: c,
        })
    }

    pub fn dilations(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.depthwise.dilation).collect()
    }

    /// Class probabilities `[B, T, 2]`; index 1 is the keyword class.
    pub fn forward(&self, x: &Tensor, train: bool, state: Option<&mut DtcState>) -> Result<Tensor> {
        let (b, t, d) = x.dims3()?;
        if d != self.dim {
            return shape_err("dtc input", &[b, t, self.dim], x.dims());
        }
        let mut fresh = DtcState::default();
        let st = state.unwrap_or(&mut fresh);
        if st.histories.len() != self.blocks.len() {
            st.histories = vec![None; self.blocks.len()];
        }
        let mut h = x.clone();
        for (block, hist) in self.blocks.iter().zip(st.histories.iter_mut()) {
            let (y, new_hist) = block.forward(&h, hist.as_ref(), train)?;
            *hist = Some(new_hist.detach());
            h = y;
        }
        softmax_last(&self.out.forward(&h)?)
    }
}

/// Keyword posterior per frame from class probabilities `[B, T, 2]`.
pub fn keyword_posterior(probs: &Tensor) -> Result<Tensor> {
    Ok(probs.narrow(2, 1, 1)?.squeeze(2)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub frame: usize,
    pub score: f32,
    pub threshold: f32,
}

/// Moving average over the past `win` frames (fewer at the start).
pub fn smooth(post: &[f32], win: usize) -> Vec<f32> {
    let win = win.max(1);
    let mut out = Vec::with_capacity(post.len());
    let mut sum = 0.0f64;
    for (t, &p) in post.iter().enumerate() {
        sum += p as f64;
        if t >= win {
            sum -= post[t - win] as f64;
        }
        out.push((sum / (t + 1).min(win) as f64) as f32);
    }
    out
}

/// Triggers whenever the smoothed score is at or above `threshold` while
/// armed; a trigger disarms detection for `refractory` frames.
pub fn smooth_and_decide(post: &[f32], threshold: f32, smooth_win: usize, refractory: usize) -> Vec<Detection> {
    let s = smooth(post, smooth_win);
    let mut out = Vec::new();
    let mut armed_from = 0usize;
    for (t, &v) in s.iter().enumerate() {
        if t >= armed_from && v >= threshold {
            out.push(Detection {
                frame: t,
                score: v,
                threshold,
            });
            armed_from = t + refractory.max(1);
        }
    }
    out
}

/// Utterance score: maximum smoothed posterior.
pub fn utterance_score(post: &[f32], smooth_win: usize) -> f32 {
    smooth(post, smooth_win).into_iter().fold(0.0, f32::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};
    use proptest::prelude::*;

    fn proj(mode: ProjectionMode) -> (ParamStore, Projection) {
        let mut st = ParamStore::new(DType::F32, 1);
        let p = Projection::new(&mut st, "proj", mode, &KwsConfig::default()).unwrap();
        (st, p)
    }

    #[test]
    fn projection_shapes() {
        assert_eq!(proj(ProjectionMode::Plain).1.weight_shapes(), vec![(1024, 128)]);
        assert_eq!(proj(ProjectionMode::BiasConcat).1.weight_shapes(), vec![(1216, 128)]);
        let ccl = proj(ProjectionMode::Ccl).1;
        assert_eq!(ccl.weight_shapes(), vec![(608, 64); 6]);
        assert_eq!(ccl.weight_count(), 233_472);
        assert_eq!(ccl.bias_count(), 384);
    }

    #[test]
    fn bias_requirements() {
        let dev = Device::Cpu;
        let x = Tensor::zeros((1, 2, 512), DType::F32, &dev).unwrap();
        let e = Tensor::zeros(192, DType::F32, &dev).unwrap();
        assert!(proj(ProjectionMode::Plain).1.forward(&x, &x, Some(&e), None).is_err());
        assert!(proj(ProjectionMode::Ccl).1.forward(&x, &x, None, None).is_err());
        assert!(proj(ProjectionMode::BiasConcat).1.forward(&x, &x, None, None).is_err());
    }

    #[test]
    fn zero_input_gives_activation_of_bias_term() {
        let dev = Device::Cpu;
        let (_st, p) = proj(ProjectionMode::Plain);
        let x = Tensor::zeros((1, 3, 512), DType::F32, &dev).unwrap();
        let y = p.forward(&x, &x, None, None).unwrap().to_vec3::<f32>().unwrap();
        let ProjectionKind::Dense(l) = &p.kind else { unreachable!() };
        let b = l.bias.as_ref().unwrap().to_vec1::<f32>().unwrap();
        for frame in &y[0] {
            for (v, bb) in frame.iter().zip(&b) {
                assert_eq!(*v, bb.max(0.0));
            }
        }
    }

    #[test]
    fn ccl_zero_inputs_and_zero_biases_give_zero() {
        let dev = Device::Cpu;
        let (st, p) = proj(ProjectionMode::Ccl);
        for (name, var) in st.trainable() {
            if name.ends_with(".bias") {
                var.set(&var.zeros_like().unwrap()).unwrap();
            }
        }
        let x = Tensor::zeros((1, 4, 512), DType::F32, &dev).unwrap();
        let e = Tensor::zeros(192, DType::F32, &dev).unwrap();
        let y = p.pre_activation(&x, &x, Some(&e), None).unwrap();
        assert!(y.flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ccl_uses_three_context_frames() {
        let dev = Device::Cpu;
        let (_st, p) = proj(ProjectionMode::Ccl);
        let e = Tensor::randn(0f32, 1.0, 192, &dev).unwrap();
        let x = Tensor::randn(0f32, 1.0, (1, 6, 512), &dev).unwrap();
        let y0 = p.pre_activation(&x, &x, Some(&e), None).unwrap().to_vec3::<f32>().unwrap();
        // perturb frame 2: outputs 2, 3, 4 change, 0, 1 and 5 do not
        let mut v = x.to_vec3::<f32>().unwrap();
        v[0][2][7] += 1.0;
        let x2 = Tensor::new(v, &dev).unwrap();
        let y1 = p.pre_activation(&x2, &x2, Some(&e), None).unwrap().to_vec3::<f32>().unwrap();
        for t in 0..6 {
            let changed = y0[0][t] != y1[0][t];
            assert_eq!(changed, (2..=4).contains(&t), "frame {t}");
        }
    }

    #[test]
    fn dilation_schedule() {
        let cfg = KwsConfig::default();
        assert_eq!(cfg.dilations(), [1, 2, 4, 8].repeat(4));
        assert_eq!(cfg.receptive_field(), 1 + 4 * 4 * 15);
    }

    fn small_dtc() -> (ParamStore, Dtc) {
        let cfg = KwsConfig {
            kws_dim: 8,
            blocks: 4,
            ..Default::default()
        };
        let mut st = ParamStore::new(DType::F32, 2);
        let d = Dtc::new(&mut st, "dtc", &cfg).unwrap();
        (st, d)
    }

    #[test]
    fn dtc_softmax_and_causality() {
        let dev = Device::Cpu;
        let (_st, dtc) = small_dtc();
        let x = Tensor::randn(0f32, 1.0, (1, 20, 8), &dev).unwrap();
        let p = dtc.forward(&x, false, None).unwrap();
        for frame in p.squeeze(0).unwrap().to_vec2::<f32>().unwrap() {
            assert!((frame[0] + frame[1] - 1.0).abs() < 1e-6);
        }
        let mut v = x.to_vec3::<f32>().unwrap();
        v[0][11][3] += 5.0;
        let p2 = dtc.forward(&Tensor::new(v, &dev).unwrap(), false, None).unwrap();
        let (a, b) = (p.to_vec3::<f32>().unwrap(), p2.to_vec3::<f32>().unwrap());
        for t in 0..11 {
            assert_eq!(a[0][t], b[0][t]);
        }
        assert_ne!(a[0][11], b[0][11]);
    }

    #[test]
    fn dtc_streaming_matches_offline() {
        let dev = Device::Cpu;
        let (_st, dtc) = small_dtc();
        let x = Tensor::randn(0f32, 1.0, (1, 30, 8), &dev).unwrap();
        let whole = dtc.forward(&x, false, None).unwrap().to_vec3::<f32>().unwrap();
        let mut state = DtcState::default();
        for t in 0..30 {
            let p = dtc
                .forward(&x.narrow(1, t, 1).unwrap(), false, Some(&mut state))
                .unwrap()
                .to_vec3::<f32>()
                .unwrap();
            for c in 0..2 {
                assert!((p[0][0][c] - whole[0][t][c]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn wrong_dtc_input_rejected() {
        let (_st, dtc) = small_dtc();
        let x = Tensor::zeros((1, 3, 9), DType::F32, &Device::Cpu).unwrap();
        assert!(dtc.forward(&x, false, None).is_err());
    }

    #[test]
    fn decisions() {
        assert!(smooth_and_decide(&[0.0; 500], 0.5, 30, 100).is_empty());
        let mut step = vec![0.0f32; 50];
        step.extend(vec![1.0f32; 450]);
        let d = smooth_and_decide(&step, 0.5, 30, 100);
        // smoothed crosses 0.5 once 15 of the last 30 frames are 1
        assert_eq!(d[0].frame, 64);
        assert_eq!(d.len(), 5);
        assert!(d.windows(2).all(|w| w[1].frame - w[0].frame >= 100));
        assert_eq!(utterance_score(&step, 30), 1.0);
    }

    proptest! {
        #[test]
        fn higher_threshold_never_detects_more(
            post in proptest::collection::vec(0.0f32..1.0, 1..400),
            a in 0.0f32..1.0,
            b in 0.0f32..1.0,
        ) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let n_lo = smooth_and_decide(&post, lo, 30, 100).len();
            let n_hi = smooth_and_decide(&post, hi, 30, 100).len();
            prop_assert!(n_hi <= n_lo);
        }
    }
}
