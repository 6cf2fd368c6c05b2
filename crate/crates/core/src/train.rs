//! On-the-fly training loop, checkpointing and resume.

use crate::audio_dsp::{stft, AudioBuffer};
use crate::context_bias::{BiasList, BiasMode, CACHED_EMBEDDING_TENSOR};
use crate::error::{invalid, Error, Result};
use crate::losses::{bce_masked, label_tensors, noam_lr, si_snr_tensor, LossParts};
use crate::model::{DccrnKws, ModelConfig, RunMode};
use crate::nn::{Adam, AdamConfig, Checkpoint, NamedTensor, ParamStore};
use crate::simulate::{Example, FrameLabel, LabelTrack, Manifest, SimConfig, Simulator, UttKind};
use candle_core::{DType, Device, Tensor};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;

pub const META_TRAIN_CONFIG: &str = "cfg.train";
pub const META_BIAS_LIST: &str = "cfg.bias_list";
/// Checkpoint name prefix for the training-time copies of state buffers.
pub const LIVE_BUFFER_PREFIX: &str = "live.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub sim: SimConfig,
    pub iterations: usize,
    pub batch_size: usize,
    /// Positive and negative utterance shares of each batch.
    pub batch_ratio: (usize, usize),
    pub noam_factor: f64,
    pub warmup: usize,
    pub d_model: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub bias_list_size: usize,
    pub checkpoint_every: usize,
    /// Batches over which normalisation statistics are re-estimated with
    /// the current weights before a checkpoint is written (0 disables).
    pub norm_batches: usize,
}

impl TrainConfig {
    pub fn full() -> Self {
        Self {
            model: ModelConfig::full(),
            sim: SimConfig::default(),
            iterations: 17_500,
            batch_size: 16,
            batch_ratio: (1, 1),
            noam_factor: 5.0,
            warmup: 1000,
            d_model: 128,
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            adam_eps: 1e-9,
            seed: 1,
            bias_list_size: 10,
            checkpoint_every: 1000,
            norm_batches: 50,
        }
    }

    pub fn toy() -> Self {
        Self {
            model: ModelConfig::toy(),
            iterations: 2000,
            batch_size: 8,
            bias_list_size: 4,
            checkpoint_every: 500,
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.sim.validate()?;
        if self.iterations == 0 || self.warmup == 0 || self.d_model == 0 {
            return Err(Error::Config("iterations, warmup and d_model must be at least 1".into()));
        }
        let (p, n) = self.batch_ratio;
        if p + n == 0 || self.batch_size == 0 {
            return Err(Error::Config("batch needs at least one utterance".into()));
        }
        if !self.batch_size.is_multiple_of(p + n) {
            return Err(Error::Config(format!(
                "batch size {} is not a multiple of the {p}:{n} ratio",
                self.batch_size
            )));
        }
        if self.model.uses_bias() && self.model.bias_mode != BiasMode::Learnable && self.bias_list_size == 0 {
            return Err(Error::Config("bias list size must be positive".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    pub fn positives_per_batch(&self) -> usize {
        let (p, n) = self.batch_ratio;
        self.batch_size / (p + n) * p
    }

    pub fn lr(&self, step: usize) -> Result<f64> {
        noam_lr(step, self.noam_factor, self.d_model, self.warmup)
    }
}

/// RNG for everything drawn at `iteration`; depends only on `(seed, iteration)`.
pub fn iteration_rng(seed: u64, iteration: usize) -> ChaCha8Rng {
    let mut z = seed ^ (iteration as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

/// Model inputs for a set of examples, zero-padded to a common length.
#[derive(Debug, Clone)]
pub struct Batch {
    pub full: Tensor,
    pub targets: Tensor,
    pub mask: Tensor,
    /// Clean targets `[B, N]`, zero-padded.
    pub clean: Tensor,
    pub lengths: Vec<usize>,
    pub ids: Vec<String>,
}

pub fn make_batch(examples: &[Example], model: &DccrnKws, dtype: DType, device: &Device) -> Result<Batch> {
    let Some(n) = examples.iter().map(|e| e.pair.noisy.len()).max() else {
        return invalid("empty batch");
    };
    let spectro = &model.cfg.spectro;
    let frames = spectro.num_frames(n);
    let pad = |a: &AudioBuffer| -> AudioBuffer {
        let mut s = a.samples.clone();
        s.resize(n, 0.0);
        AudioBuffer { samples: s, sample_rate: a.sample_rate }
    };
    let mut specs = Vec::with_capacity(examples.len());
    let mut clean = Vec::with_capacity(examples.len() * n);
    let mut tracks = Vec::with_capacity(examples.len());
    for e in examples {
        specs.push(stft(&pad(&e.pair.noisy), spectro)?);
        clean.extend(pad(&e.pair.target).samples);
        let mut labels = e.labels.labels.clone();
        labels.resize(frames, FrameLabel::Ignore);
        tracks.push(LabelTrack { labels });
    }
    let refs: Vec<_> = specs.iter().collect();
    let full = model.spectra(&refs, dtype, device)?;
    let frames = full.dims()[1];
    let post_like = Tensor::zeros((examples.len(), frames), dtype, device)?;
    let track_refs: Vec<&LabelTrack> = tracks.iter().collect();
    let (targets, mask) = label_tensors(&track_refs, frames, &post_like)?;
    Ok(Batch {
        full,
        targets,
        mask,
        clean: Tensor::from_vec(clean, (examples.len(), n), device)?.to_dtype(dtype)?,
        lengths: examples.iter().map(|e| e.pair.noisy.len()).collect(),
        ids: examples.iter().map(|e| e.pair.meta.speech_id.clone()).collect(),
    })
}

/// Multi-task loss on a batch: negated mean SI-SNR over each clip's own
/// length plus the masked BCE.
pub fn batch_loss(model: &DccrnKws, batch: &Batch, bias: Option<&Tensor>, train: bool) -> Result<(Tensor, LossParts)> {
    let out = model.forward_train(&batch.full, bias, train)?;
    let bce = bce_masked(&out.posterior, &batch.targets, &batch.mask)?;
    let bce_v = bce.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    let Some(enhanced) = out.enhanced else {
        return Ok((bce, LossParts { si_snr_db: None, bce: bce_v }));
    };
    let mut terms = Vec::with_capacity(batch.lengths.len());
    for (b, &len) in batch.lengths.iter().enumerate() {
        let len = len.min(enhanced.dims()[1]);
        let est = enhanced.narrow(0, b, 1)?.narrow(1, 0, len)?;
        let reference = batch.clean.narrow(0, b, 1)?.narrow(1, 0, len)?;
        terms.push(si_snr_tensor(&est, &reference)?);
    }
    let si = Tensor::cat(&terms, 0)?.mean_all()?;
    let si_v = si.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    Ok(((bce - si)?, LossParts { si_snr_db: Some(si_v), bce: bce_v }))
}

/// Fraction of labelled frames classified correctly at threshold 0.5.
pub fn frame_accuracy(model: &DccrnKws, batch: &Batch, bias: Option<&Tensor>) -> Result<(usize, usize)> {
    let post = model.posterior(&batch.full, bias, false, None)?.to_dtype(DType::F32)?;
    let post = post.to_vec2::<f32>()?;
    let tgt = batch.targets.to_dtype(DType::F32)?.to_vec2::<f32>()?;
    let mask = batch.mask.to_dtype(DType::F32)?.to_vec2::<f32>()?;
    let mut right = 0;
    let mut total = 0;
    for ((p, t), m) in post.iter().zip(&tgt).zip(&mask) {
        for ((&p, &t), &m) in p.iter().zip(t).zip(m) {
            if m > 0.0 {
                total += 1;
                if (p >= 0.5) == (t > 0.5) {
                    right += 1;
                }
            }
        }
    }
    Ok((right, total))
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub store: ParamStore,
    pub model: DccrnKws,
    pub sim: Simulator,
    pub bias_list: Option<BiasList>,
    adam: Adam,
    feats: HashMap<String, Tensor>,
    /// Completed iterations.
    pub iteration: usize,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, manifest: Manifest, bias_list: Option<BiasList>, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        if manifest.of_kind(UttKind::Keyword).is_empty() || manifest.of_kind(UttKind::Negative).is_empty() {
            return invalid("training manifest needs keyword and negative utterances");
        }
        let mut store = ParamStore::new(dtype, cfg.seed);
        let model = DccrnKws::new(&mut store, &cfg.model, RunMode::Train)?;
        let bias_list = match (cfg.model.uses_bias(), bias_list) {
            (false, _) => None,
            (true, Some(l)) => {
                if l.mode != cfg.model.bias_mode {
                    return Err(Error::Config(format!(
                        "bias list was made for {} mode, model uses {}",
                        l.mode, cfg.model.bias_mode
                    )));
                }
                Some(l)
            }
            (true, None) => Some(BiasList::select(
                cfg.model.bias_mode,
                &manifest,
                cfg.bias_list_size,
                cfg.seed,
                None,
            )?),
        };
        let sim = Simulator::new(manifest, cfg.sim.clone(), cfg.model.spectro.clone())?;
        let adam = Adam::new(&store, cfg.adam())?;
        Ok(Self {
            cfg,
            store,
            model,
            sim,
            bias_list,
            adam,
            feats: HashMap::new(),
            iteration: 0,
        })
    }

    /// Restores parameters, optimizer state and the iteration counter.
    pub fn resume(manifest: Manifest, ckpt: &Checkpoint, dtype: DType) -> Result<Self> {
        let cfg = train_config_of(ckpt)?;
        if cfg.model.hash() != ckpt.config_hash {
            return Err(Error::Checkpoint("configuration hash does not match the checkpoint".into()));
        }
        let list = bias_list_of(ckpt)?;
        let mut t = Self::new(cfg, manifest, list, dtype)?;
        t.store.load(ckpt, |_| false)?;
        for (name, var) in t.store.buffers() {
            if let Some(nt) = ckpt.tensor(&format!("{LIVE_BUFFER_PREFIX}{name}")) {
                var.set(&nt.to_tensor(t.store.device(), var.dtype())?)?;
            }
        }
        t.adam.import(&t.store, ckpt)?;
        t.iteration = ckpt.iteration as usize;
        Ok(t)
    }

    fn speaker_for(&self, rng: &mut ChaCha8Rng) -> Option<String> {
        if self.cfg.model.bias_mode != BiasMode::SpeakerDependent || !self.cfg.model.uses_bias() {
            return None;
        }
        let mut speakers: Vec<&str> = self
            .sim
            .manifest
            .of_kind(UttKind::Keyword)
            .iter()
            .filter_map(|e| e.speaker.as_deref())
            .collect();
        speakers.sort_unstable();
        speakers.dedup();
        speakers.choose(rng).map(|s| s.to_string())
    }

    /// Utterance ids, mixing seeds and (speaker-dependent mode) speaker for
    /// `iteration`.
    pub fn plan(&self, iteration: usize) -> (Vec<(String, u64)>, Option<String>) {
        let mut rng = iteration_rng(self.cfg.seed, iteration);
        let speaker = self.speaker_for(&mut rng);
        let pick = |kind: UttKind| -> Vec<&str> {
            let all = self.sim.manifest.of_kind(kind);
            let same: Vec<&str> = all
                .iter()
                .filter(|e| speaker.is_none() || e.speaker == speaker)
                .map(|e| e.id.as_str())
                .collect();
            if same.is_empty() {
                all.iter().map(|e| e.id.as_str()).collect()
            } else {
                same
            }
        };
        let pos = pick(UttKind::Keyword);
        let neg = pick(UttKind::Negative);
        let n_pos = self.cfg.positives_per_batch();
        let mut out = Vec::with_capacity(self.cfg.batch_size);
        for i in 0..self.cfg.batch_size {
            let pool = if i < n_pos { &pos } else { &neg };
            let id = pool[rng.random_range(0..pool.len())].to_string();
            out.push((id, rng.random()));
        }
        (out, speaker)
    }

    pub fn examples(&self, iteration: usize) -> Result<(Vec<Example>, Option<String>)> {
        let (plan, speaker) = self.plan(iteration);
        let ex = plan
            .iter()
            .map(|(id, seed)| self.sim.example(id, *seed, None))
            .collect::<Result<Vec<_>>>()?;
        Ok((ex, speaker))
    }

    fn clip_features(&mut self, ids: &[String]) -> Result<Vec<Tensor>> {
        let extractor = self.model.bias.as_ref().and_then(|b| b.extractor()).cloned();
        let Some(extractor) = extractor else {
            return Ok(Vec::new());
        };
        let mut sorted = ids.to_vec();
        sorted.sort();
        let mut out = Vec::with_capacity(sorted.len());
        for id in &sorted {
            if !self.feats.contains_key(id) {
                let entry = self
                    .sim
                    .manifest
                    .get(id)
                    .ok_or_else(|| Error::InvalidInput(format!("bias entry {id} is not in the manifest")))?;
                let audio = self.sim.audio(entry)?;
                let f = extractor.features(&audio, &self.cfg.model.spectro, self.store.dtype(), self.store.device())?;
                self.feats.insert(id.clone(), f);
            }
            out.push(self.feats[id].clone());
        }
        Ok(out)
    }

    /// Bias embedding used at `iteration` (training graph).
    pub fn bias_embedding(&mut self, iteration: usize, speaker: Option<&str>, train: bool) -> Result<Option<Tensor>> {
        let Some(list) = self.bias_list.clone() else {
            return Ok(None);
        };
        let ids = match (list.mode, speaker) {
            (BiasMode::SpeakerDependent, Some(s)) => {
                BiasList::select(list.mode, &self.sim.manifest, list.entries.len().max(1), list.seed, Some(s))?.entries
            }
            _ => list.for_step(&self.sim.manifest, iteration as u64),
        };
        let clips = self.clip_features(&ids)?;
        let bias = self.model.bias.as_ref().expect("bias model");
        Ok(Some(bias.mean_embedding(&clips, train)?))
    }

    /// Loss of `iteration`'s batch under the current parameters, without
    /// updating anything.
    pub fn probe_loss(&mut self, iteration: usize) -> Result<LossParts> {
        let (ex, speaker) = self.examples(iteration)?;
        let bias = self.bias_embedding(iteration, speaker.as_deref(), false)?;
        let batch = make_batch(&ex, &self.model, self.store.dtype(), self.store.device())?;
        Ok(batch_loss(&self.model, &batch, bias.as_ref(), false)?.1)
    }

    /// Runs the next iteration.
    pub fn step(&mut self) -> Result<LossParts> {
        let it = self.iteration + 1;
        let lr = self.cfg.lr(it)?;
        let (ex, speaker) = self.examples(it)?;
        let bias = self.bias_embedding(it, speaker.as_deref(), true)?;
        let batch = make_batch(&ex, &self.model, self.store.dtype(), self.store.device())?;
        let (loss, parts) = batch_loss(&self.model, &batch, bias.as_ref(), true)?;
        if !parts.total().is_finite() {
            return Err(Error::Diverged {
                iteration: it,
                lr,
                batch_ids: batch.ids.clone(),
            });
        }
        let grads = loss.backward()?;
        self.adam.step(&self.store, &grads, lr)?;
        self.iteration = it;
        Ok(parts)
    }

    /// Embedding for inference: the list mean in evaluation mode (or the
    /// learnable vector).
    pub fn inference_embedding(&mut self) -> Result<Option<Tensor>> {
        let Some(list) = self.bias_list.clone() else {
            return Ok(None);
        };
        let clips = self.clip_features(&list.entries)?;
        let bias = self.model.bias.as_ref().expect("bias model");
        if list.mode == BiasMode::Learnable {
            return Ok(bias.cached());
        }
        Ok(Some(bias.cache_embedding(&clips)?))
    }

    /// Re-estimates every normalisation running statistic with the current
    /// weights by forwarding the next `norm_batches` training batches in
    /// training mode. The moving averages kept during training mix in
    /// statistics of older weights, which the final model never sees.
    fn recalibrate_norm(&mut self) -> Result<()> {
        for k in 1..=self.cfg.norm_batches {
            let it = self.iteration + k;
            let (ex, speaker) = self.examples(it)?;
            let bias = self.bias_embedding(it, speaker.as_deref(), true)?;
            let batch = make_batch(&ex, &self.model, self.store.dtype(), self.store.device())?;
            self.model.forward_train(&batch.full, bias.as_ref(), true)?;
        }
        Ok(())
    }

    /// Checkpoint of the current state. Its buffers hold recalibrated
    /// normalisation statistics for inference; the training-time values are
    /// stored under [`LIVE_BUFFER_PREFIX`] and restored, so training and
    /// resuming are unaffected.
    pub fn checkpoint(&mut self) -> Result<Checkpoint> {
        let live = self
            .store
            .buffers()
            .iter()
            .map(|(n, v)| Ok((n.clone(), v.as_tensor().copy()?)))
            .collect::<Result<Vec<_>>>()?;
        self.recalibrate_norm()?;
        let ckpt = self.export();
        for (name, t) in &live {
            self.store.get(name).expect("registered buffer").set(t)?;
        }
        let mut ckpt = ckpt?;
        for (name, t) in &live {
            ckpt.set_tensor(NamedTensor::from_tensor(&format!("{LIVE_BUFFER_PREFIX}{name}"), t)?);
        }
        Ok(ckpt)
    }

    fn export(&mut self) -> Result<Checkpoint> {
        let mut ckpt = Checkpoint {
            config_hash: self.cfg.model.hash(),
            iteration: self.iteration as u64,
            meta: vec![(META_TRAIN_CONFIG.into(), serde_json::to_string(&self.cfg)?)],
            tensors: self.store.named_tensors()?,
        };
        if let Some(list) = &self.bias_list {
            ckpt.meta.push((META_BIAS_LIST.into(), serde_json::to_string(list)?));
        }
        if let Some(e) = self.inference_embedding()? {
            ckpt.set_tensor(NamedTensor::from_tensor(CACHED_EMBEDDING_TENSOR, &e)?);
        }
        self.adam.export(&self.store, &mut ckpt)?;
        Ok(ckpt)
    }

    /// Trains to the configured iteration count, writing `ckpt_<it>.bin`
    /// and `latest.bin` into `out_dir` when given. `log` sees every
    /// iteration's losses.
    pub fn run(&mut self, out_dir: Option<&Path>, mut log: impl FnMut(usize, &LossParts)) -> Result<()> {
        if let Some(d) = out_dir {
            std::fs::create_dir_all(d)?;
        }
        while self.iteration < self.cfg.iterations {
            let parts = self.step()?;
            log(self.iteration, &parts);
            let last = self.iteration == self.cfg.iterations;
            if let Some(d) = out_dir {
                if last || self.iteration.is_multiple_of(self.cfg.checkpoint_every.max(1)) {
                    let ckpt = self.checkpoint()?;
                    ckpt.save(d.join(format!("ckpt_{:06}.bin", self.iteration)))?;
                    ckpt.save(d.join("latest.bin"))?;
                }
            }
        }
        Ok(())
    }
}

pub fn train_config_of(ckpt: &Checkpoint) -> Result<TrainConfig> {
    let raw = ckpt
        .meta(META_TRAIN_CONFIG)
        .ok_or_else(|| Error::Checkpoint("checkpoint carries no training configuration".into()))?;
    Ok(serde_json::from_str(raw)?)
}

pub fn bias_list_of(ckpt: &Checkpoint) -> Result<Option<BiasList>> {
    ckpt.meta(META_BIAS_LIST)
        .map(|raw| Ok(serde_json::from_str(raw)?))
        .transpose()
}

/// A model restored from a checkpoint.
pub struct LoadedModel {
    pub cfg: TrainConfig,
    pub store: ParamStore,
    pub model: DccrnKws,
    pub bias_list: Option<BiasList>,
    pub checkpoint: Checkpoint,
}

impl LoadedModel {
    /// Builds the graph for `mode` and copies the checkpoint tensors into
    /// it. In inference mode the enhancement branch is neither built nor
    /// loaded.
    pub fn load(path: impl AsRef<Path>, mode: RunMode) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::load(path)?, mode)
    }

    pub fn from_checkpoint(ckpt: Checkpoint, mode: RunMode) -> Result<Self> {
        let cfg = train_config_of(&ckpt)?;
        if cfg.model.hash() != ckpt.config_hash {
            return Err(Error::Checkpoint("configuration hash does not match the checkpoint".into()));
        }
        let mut store = ParamStore::new(DType::F32, cfg.seed);
        let model = DccrnKws::new(&mut store, &cfg.model, mode)?;
        store.load(&ckpt, |_| false)?;
        if let Some(bias) = &model.bias {
            if let Some(nt) = ckpt.tensor(CACHED_EMBEDDING_TENSOR) {
                bias.set_cached(Some(nt.to_tensor(store.device(), store.dtype())?));
            }
        }
        Ok(Self {
            bias_list: bias_list_of(&ckpt)?,
            cfg,
            store,
            model,
            checkpoint: ckpt,
        })
    }

    /// Inference bias embedding: the cached one unless `clips` (features of
    /// a replacement list) are given.
    pub fn bias(&self, clips: Option<&[Tensor]>) -> Result<Option<Tensor>> {
        let Some(b) = &self.model.bias else {
            return Ok(None);
        };
        if let Some(c) = clips {
            return Ok(Some(b.cache_embedding(c)?));
        }
        b.cached()
            .map(Some)
            .ok_or_else(|| Error::Checkpoint("checkpoint has no cached bias embedding".into()))
    }

    /// Features of the clips on `list`, sorted by id, taken from `manifest`.
    pub fn list_features(&self, list: &BiasList, manifest: &Manifest) -> Result<Vec<Tensor>> {
        let extractor = self
            .model
            .bias
            .as_ref()
            .and_then(|b| b.extractor())
            .ok_or_else(|| Error::InvalidInput("this model has no bias extractor".into()))?;
        let mut ids = list.entries.clone();
        ids.sort();
        ids.iter()
            .map(|id| {
                let e = manifest
                    .get(id)
                    .ok_or_else(|| Error::InvalidInput(format!("bias entry {id} is not in the manifest")))?;
                let audio = crate::audio_dsp::read_wav(&e.path, Some(self.cfg.model.spectro.sample_rate))?;
                extractor.features(&audio, &self.cfg.model.spectro, self.store.dtype(), self.store.device())
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_ratio_must_divide() {
        let mut c = TrainConfig::toy();
        c.batch_size = 7;
        assert!(c.validate().is_err());
        c.batch_size = 8;
        c.batch_ratio = (1, 3);
        c.validate().unwrap();
        assert_eq!(c.positives_per_batch(), 2);
    }

    #[test]
    fn iteration_rng_is_pure() {
        let a: u64 = iteration_rng(3, 10).random();
        let b: u64 = iteration_rng(3, 10).random();
        let c: u64 = iteration_rng(3, 11).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn config_round_trips_through_json() {
        let c = TrainConfig::toy();
        let back: TrainConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }
}
