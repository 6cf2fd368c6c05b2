//! Keyword audio embeddings that bias the keyword branch: a reduced
//! ECAPA-style extractor, bias-list selection modes and the cached mean.

use crate::audio_dsp::{log_mel, AudioBuffer, SpectroConfig};
use crate::error::{invalid, Error, Result};
use crate::nn::layers::{relu, sigmoid};
use crate::nn::{BatchNorm, Conv1d, Init, Linear, ParamStore};
use crate::simulate::{Manifest, ManifestEntry, UttKind};
use candle_core::{DType, Device, Tensor, D};
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::cell::RefCell;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

pub const EMBEDDING_DIM: usize = 192;
pub const MAX_LIST_SIZE: usize = 50;
/// Reserved checkpoint tensor holding the cached inference embedding.
pub const CACHED_EMBEDDING_TENSOR: &str = "bias.cached_embedding";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasMode {
    Fixed,
    Varied,
    SpeakerDependent,
    Learnable,
}

impl fmt::Display for BiasMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BiasMode::Fixed => "fixed",
            BiasMode::Varied => "varied",
            BiasMode::SpeakerDependent => "speaker",
            BiasMode::Learnable => "learnable",
        })
    }
}

impl FromStr for BiasMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(BiasMode::Fixed),
            "varied" => Ok(BiasMode::Varied),
            "speaker" | "speaker_dependent" => Ok(BiasMode::SpeakerDependent),
            "learnable" => Ok(BiasMode::Learnable),
            other => Err(Error::Config(format!(
                "unknown bias mode `{other}` (expected fixed, varied, speaker or learnable)"
            ))),
        }
    }
}

/// Reduced ECAPA-style extractor geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractorConfig {
    pub n_mels: usize,
    pub channels: usize,
    pub dilations: Vec<usize>,
    pub se_ratio: usize,
    pub attention: usize,
    pub min_duration_s: f64,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            n_mels: 64,
            channels: 128,
            dilations: vec![2, 3, 4],
            se_ratio: 4,
            attention: 64,
            min_duration_s: 0.5,
        }
    }
}

impl ExtractorConfig {
    pub fn toy() -> Self {
        Self {
            n_mels: 16,
            channels: 32,
            attention: 16,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone)]
struct SeBlock {
    conv: Conv1d,
    bn: BatchNorm,
    squeeze: Linear,
    excite: Linear,
}

impl SeBlock {
    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let h = self.bn.forward(&relu(&self.conv.forward_same(x)?)?, train)?;
        let s = h.mean_keepdim(1)?;
        let s = sigmoid(&self.excite.forward(&relu(&self.squeeze.forward(&s)?)?)?)?;
        Ok((x + h.broadcast_mul(&s)?)?)
    }
}

/// Log-mel frontend, a 5-tap conv, dilated squeeze-excitation residual
/// blocks, multi-layer aggregation, attentive statistics pooling and a
/// linear map to the embedding.
#[derive(Debug, Clone)]
pub struct BiasExtractor {
    cfg: ExtractorConfig,
    front: Conv1d,
    front_bn: BatchNorm,
    blocks: Vec<SeBlock>,
    aggregate: Conv1d,
    attn_hidden: Conv1d,
    attn_out: Conv1d,
    out: Linear,
}

impl BiasExtractor {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &ExtractorConfig) -> Result<Self> {
        let c = cfg.channels;
        if c == 0 || cfg.dilations.is_empty() || cfg.se_ratio == 0 || c < cfg.se_ratio {
            return Err(Error::Config("bias extractor needs channels, dilations and an SE ratio".into()));
        }
        let mut blocks = Vec::with_capacity(cfg.dilations.len());
        for (i, &d) in cfg.dilations.iter().enumerate() {
            blocks.push(SeBlock {
                conv: Conv1d::new(store, &format!("{name}.block{i}.conv"), c, c, 3, d)?,
                bn: BatchNorm::new(store, &format!("{name}.block{i}.bn"), c)?,
                squeeze: Linear::new(store, &format!("{name}.block{i}.se1"), c, c / cfg.se_ratio, true)?,
                excite: Linear::new(store, &format!("{name}.block{i}.se2"), c / cfg.se_ratio, c, true)?,
            });
        }
        let agg = c * cfg.dilations.len();
        Ok(Self {
            cfg: cfg.clone(),
            front: Conv1d::new(store, &format!("{name}.front"), cfg.n_mels, c, 5, 1)?,
            front_bn: BatchNorm::new(store, &format!("{name}.front_bn"), c)?,
            blocks,
            aggregate: Conv1d::new(store, &format!("{name}.mfa"), agg, agg, 1, 1)?,
            attn_hidden: Conv1d::new(store, &format!("{name}.asp1"), agg, cfg.attention, 1, 1)?,
            attn_out: Conv1d::new(store, &format!("{name}.asp2"), cfg.attention, agg, 1, 1)?,
            out: Linear::new(store, &format!("{name}.fc"), 2 * agg, EMBEDDING_DIM, true)?,
        })
    }

    pub fn config(&self) -> &ExtractorConfig {
        &self.cfg
    }

    /// Mean-normalised log-mel features `[T, n_mels]` for one clip.
    pub fn features(&self, audio: &AudioBuffer, spectro: &SpectroConfig, dtype: DType, device: &Device) -> Result<Tensor> {
        if audio.duration_s() < self.cfg.min_duration_s {
            return invalid(format!(
                "bias clip of {:.3} s is shorter than the {:.3} s minimum",
                audio.duration_s(),
                self.cfg.min_duration_s
            ));
        }
        let mel = log_mel(audio, self.cfg.n_mels, spectro)?;
        let (m, t) = mel.dim();
        let mut data = Vec::with_capacity(m * t);
        for f in 0..t {
            for k in 0..m {
                data.push(mel[[k, f]]);
            }
        }
        let x = Tensor::from_vec(data, (t, m), device)?.to_dtype(dtype)?;
        Ok(x.broadcast_sub(&x.mean_keepdim(0)?)?)
    }

    /// Embedding `[192]` of one clip's features `[T, n_mels]`.
    pub fn embed(&self, feats: &Tensor, train: bool) -> Result<Tensor> {
        let x = feats.unsqueeze(0)?;
        let mut h = self.front_bn.forward(&relu(&self.front.forward_same(&x)?)?, train)?;
        let mut outs = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            h = block.forward(&h, train)?;
            outs.push(h.clone());
        }
        let h = relu(&self.aggregate.forward_same(&Tensor::cat(&outs, 2)?)?)?;
        let logits = self.attn_out.forward_same(&self.attn_hidden.forward_same(&h)?.tanh()?)?;
        // softmax over time, per channel
        let max = logits.max_keepdim(1)?.detach();
        let e = logits.broadcast_sub(&max)?.exp()?;
        let alpha = e.broadcast_div(&e.sum_keepdim(1)?)?;
        let mean = (&alpha * &h)?.sum(1)?;
        let second = (&alpha * h.sqr()?)?.sum(1)?;
        let std = ((second - mean.sqr()?)?.relu()? + 1e-6)?.sqrt()?;
        let pooled = Tensor::cat(&[mean, std], D::Minus1)?;
        Ok(self.out.forward(&pooled)?.squeeze(0)?)
    }
}

/// A selection of keyword clips whose embeddings are averaged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasList {
    pub mode: BiasMode,
    pub seed: u64,
    pub entries: Vec<String>,
}

impl BiasList {
    /// Selects up to `size` keyword entries. Fixed and varied lists draw from
    /// every keyword clip; speaker-dependent lists draw from one speaker
    /// (`speaker` or, when absent, the first speaker in sorted order).
    pub fn select(
        mode: BiasMode,
        manifest: &Manifest,
        size: usize,
        seed: u64,
        speaker: Option<&str>,
    ) -> Result<Self> {
        if size > MAX_LIST_SIZE {
            return invalid(format!("bias list size {size} exceeds {MAX_LIST_SIZE}"));
        }
        if mode == BiasMode::Learnable {
            return Ok(Self {
                mode,
                seed,
                entries: Vec::new(),
            });
        }
        let mut pool: Vec<&ManifestEntry> = manifest.of_kind(UttKind::Keyword);
        if mode == BiasMode::SpeakerDependent {
            let chosen = match speaker {
                Some(s) => s.to_string(),
                None => {
                    let mut speakers: Vec<&str> = pool.iter().filter_map(|e| e.speaker.as_deref()).collect();
                    speakers.sort_unstable();
                    match speakers.first() {
                        Some(s) => s.to_string(),
                        None => return invalid("no keyword entry carries a speaker id"),
                    }
                }
            };
            pool.retain(|e| e.speaker.as_deref() == Some(chosen.as_str()));
        }
        if pool.is_empty() || size == 0 {
            return invalid(format!("empty {mode} bias list"));
        }
        let entries = sample_ids(&pool, size, seed);
        Ok(Self { mode, seed, entries })
    }

    /// Entries for a training step: varied lists are redrawn from `pool`
    /// with a seed derived from `(seed, step)`; other modes keep their list.
    pub fn for_step(&self, manifest: &Manifest, step: u64) -> Vec<String> {
        if self.mode != BiasMode::Varied {
            return self.entries.clone();
        }
        let pool = manifest.of_kind(UttKind::Keyword);
        let seed = self.seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        sample_ids(&pool, self.entries.len().max(1), seed)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let list: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if list.entries.len() > MAX_LIST_SIZE {
            return invalid(format!("bias list holds {} entries, limit is {MAX_LIST_SIZE}", list.entries.len()));
        }
        Ok(list)
    }
}

fn sample_ids(pool: &[&ManifestEntry], size: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids: Vec<String> = pool
        .choose_multiple(&mut rng, size.min(pool.len()))
        .map(|e| e.id.clone())
        .collect();
    ids.sort();
    ids
}

/// Source of the bias embedding inside the model.
#[derive(Debug)]
pub struct ContextBias {
    pub mode: BiasMode,
    extractor: Option<BiasExtractor>,
    learnable: Option<Tensor>,
    cache: RefCell<Option<Tensor>>,
}

impl Clone for ContextBias {
    fn clone(&self) -> Self {
        Self {
            mode: self.mode,
            extractor: self.extractor.clone(),
            learnable: self.learnable.clone(),
            cache: RefCell::new(self.cache.borrow().clone()),
        }
    }
}

impl ContextBias {
    pub fn new(store: &mut ParamStore, name: &str, mode: BiasMode, cfg: &ExtractorConfig) -> Result<Self> {
        let (extractor, learnable) = if mode == BiasMode::Learnable {
            (
                None,
                Some(store.param(&format!("{name}.learnable"), &[EMBEDDING_DIM], Init::Normal(0.01))?),
            )
        } else {
            (Some(BiasExtractor::new(store, &format!("{name}.ecapa"), cfg)?), None)
        };
        Ok(Self {
            mode,
            extractor,
            learnable,
            cache: RefCell::new(None),
        })
    }

    pub fn extractor(&self) -> Option<&BiasExtractor> {
        self.extractor.as_ref()
    }

    /// Mean embedding of the given clip features (`[T_i, n_mels]` each).
    /// Clips are averaged in the order given; callers pass them sorted by
    /// id so that the result does not depend on list order.
    pub fn mean_embedding(&self, clips: &[Tensor], train: bool) -> Result<Tensor> {
        if let Some(l) = &self.learnable {
            return Ok(l.clone());
        }
        let extractor = self.extractor.as_ref().expect("non-learnable modes own an extractor");
        if clips.is_empty() {
            return invalid(format!("empty {} bias list", self.mode));
        }
        let mut sum: Option<Tensor> = None;
        for c in clips {
            let e = extractor.embed(c, train)?;
            sum = Some(match sum {
                None => e,
                Some(s) => (s + e)?,
            });
        }
        Ok((sum.expect("non-empty") / clips.len() as f64)?)
    }

    /// Computes the inference embedding once (evaluation mode) and keeps it.
    pub fn cache_embedding(&self, clips: &[Tensor]) -> Result<Tensor> {
        let e = self.mean_embedding(clips, false)?.detach();
        *self.cache.borrow_mut() = Some(e.clone());
        Ok(e)
    }

    pub fn set_cached(&self, embedding: Option<Tensor>) {
        *self.cache.borrow_mut() = embedding;
    }

    pub fn cached(&self) -> Option<Tensor> {
        if let Some(l) = &self.learnable {
            return Some(l.detach());
        }
        self.cache.borrow().clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    fn tone(freq: f64, secs: f64, rate: u32) -> AudioBuffer {
        let n = (secs * rate as f64) as usize;
        AudioBuffer::new(
            (0..n)
                .map(|i| (0.3 * (2.0 * std::f64::consts::PI * freq * i as f64 / rate as f64).sin()) as f32)
                .collect(),
            rate,
        )
        .unwrap()
    }

    fn setup(mode: BiasMode) -> (ParamStore, ContextBias) {
        let mut st = ParamStore::new(DType::F32, 9);
        let cb = ContextBias::new(&mut st, "bias", mode, &ExtractorConfig::toy()).unwrap();
        (st, cb)
    }

    fn feats(cb: &ContextBias, freq: f64) -> Tensor {
        cb.extractor()
            .unwrap()
            .features(&tone(freq, 0.6, 1600), &SpectroConfig::toy(), DType::F32, &Device::Cpu)
            .unwrap()
    }

    #[test]
    fn embedding_dim_and_determinism() {
        let (_st, cb) = setup(BiasMode::Fixed);
        let f = feats(&cb, 300.0);
        let a = cb.extractor().unwrap().embed(&f, false).unwrap();
        let b = cb.extractor().unwrap().embed(&f, false).unwrap();
        assert_eq!(a.dims(), &[EMBEDDING_DIM]);
        assert_eq!(a.to_vec1::<f32>().unwrap(), b.to_vec1::<f32>().unwrap());
        let long = cb
            .extractor()
            .unwrap()
            .features(&tone(300.0, 2.0, 1600), &SpectroConfig::toy(), DType::F32, &Device::Cpu)
            .unwrap();
        assert_eq!(cb.extractor().unwrap().embed(&long, false).unwrap().dims(), &[EMBEDDING_DIM]);
    }

    #[test]
    fn short_clip_rejected() {
        let (_st, cb) = setup(BiasMode::Fixed);
        let r = cb
            .extractor()
            .unwrap()
            .features(&tone(300.0, 0.4, 1600), &SpectroConfig::toy(), DType::F32, &Device::Cpu);
        assert!(r.is_err());
    }

    #[test]
    fn mean_of_one_and_two() {
        let (_st, cb) = setup(BiasMode::Fixed);
        let (fa, fb) = (feats(&cb, 250.0), feats(&cb, 450.0));
        let ex = cb.extractor().unwrap();
        let a = ex.embed(&fa, false).unwrap().to_vec1::<f32>().unwrap();
        let b = ex.embed(&fb, false).unwrap().to_vec1::<f32>().unwrap();
        let one = cb.mean_embedding(std::slice::from_ref(&fa), false).unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(one, a);
        let two = cb.mean_embedding(&[fa, fb], false).unwrap().to_vec1::<f32>().unwrap();
        for k in 0..EMBEDDING_DIM {
            assert!((two[k] - (a[k] + b[k]) / 2.0).abs() < 1e-6);
        }
    }

    #[test]
    fn cache_matches_recomputation() {
        let (_st, cb) = setup(BiasMode::Fixed);
        let clips = vec![feats(&cb, 250.0), feats(&cb, 350.0)];
        let cached = cb.cache_embedding(&clips).unwrap();
        let fresh = cb.mean_embedding(&clips, false).unwrap();
        assert_eq!(cached.to_vec1::<f32>().unwrap(), fresh.to_vec1::<f32>().unwrap());
        assert_eq!(cb.cached().unwrap().to_vec1::<f32>().unwrap(), fresh.to_vec1::<f32>().unwrap());
    }

    #[test]
    fn learnable_mode_is_192_scalars_without_extractor() {
        let (st, cb) = setup(BiasMode::Learnable);
        assert!(cb.extractor().is_none());
        assert_eq!(st.count_with_prefix("bias."), EMBEDDING_DIM);
        assert_eq!(cb.mean_embedding(&[], true).unwrap().dims(), &[EMBEDDING_DIM]);
    }

    #[test]
    fn empty_list_is_error() {
        let (_st, cb) = setup(BiasMode::Varied);
        assert!(cb.mean_embedding(&[], true).is_err());
    }

    fn manifest() -> Manifest {
        let mut entries = Vec::new();
        for i in 0..12 {
            entries.push(ManifestEntry {
                id: format!("kw{i:02}"),
                path: PathBuf::from(format!("kw{i:02}.wav")),
                kind: UttKind::Keyword,
                speaker: Some(format!("spk{}", i % 3)),
                keyword_end_s: Some(0.7),
            });
        }
        Manifest::new(entries).unwrap()
    }

    #[test]
    fn fixed_selection_is_seeded_and_sorted() {
        let m = manifest();
        let a = BiasList::select(BiasMode::Fixed, &m, 5, 11, None).unwrap();
        let b = BiasList::select(BiasMode::Fixed, &m, 5, 11, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.entries.len(), 5);
        let mut sorted = a.entries.clone();
        sorted.sort();
        assert_eq!(sorted, a.entries);
        assert_eq!(a.for_step(&m, 3), a.entries);
    }

    #[test]
    fn varied_lists_change_per_step() {
        let m = manifest();
        let l = BiasList::select(BiasMode::Varied, &m, 4, 1, None).unwrap();
        let steps: Vec<_> = (0..5).map(|s| l.for_step(&m, s)).collect();
        assert!(steps.windows(2).any(|w| w[0] != w[1]));
        assert_eq!(l.for_step(&m, 2), l.for_step(&m, 2));
    }

    #[test]
    fn speaker_lists_share_speaker() {
        let m = manifest();
        let l = BiasList::select(BiasMode::SpeakerDependent, &m, 50, 1, Some("spk1")).unwrap();
        assert_eq!(l.entries.len(), 4);
        for id in &l.entries {
            assert_eq!(m.get(id).unwrap().speaker.as_deref(), Some("spk1"));
        }
        assert!(BiasList::select(BiasMode::Fixed, &m, 51, 1, None).is_err());
    }

    #[test]
    fn list_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let l = BiasList::select(BiasMode::Fixed, &manifest(), 3, 2, None).unwrap();
        let p = dir.path().join("bias.json");
        l.save(&p).unwrap();
        assert_eq!(BiasList::load(&p).unwrap(), l);
    }
}
