//! On-the-fly generation of reverberant noisy mixtures with frame labels.

mod labels;
mod manifest;
mod mix;
mod rir;
pub mod toy;

pub use labels::{keyword_end_frame, label_frames, FrameLabel, LabelTrack, POSITIVE_WINDOW};
pub use manifest::{check_disjoint, Manifest, ManifestEntry, UttKind};
pub use mix::{
    active_mask, clip_negative, measure_snr_db, mix_utterance, MixtureMeta, MixturePair, MixtureSpec,
    ACTIVE_THRESHOLD_DBFS, MAX_NOISE_TYPES, PEAK_LIMIT,
};
pub use rir::{
    direct_path, fft_convolve, image_method_rir, reverberate, schroeder_curve_db, schroeder_t60, RoomSpec,
    SPEED_OF_SOUND,
};

use crate::audio_dsp::{read_wav, AudioBuffer, SpectroConfig};
use crate::error::{invalid, Result};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::sync::{Arc, Mutex};

/// Mixing distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub snr_range_db: (f64, f64),
    pub rt60_range_s: (f64, f64),
    /// Probability that a mixture is reverberated.
    pub reverb_prob: f64,
    pub noise_types: (usize, usize),
    pub clip_negatives: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            snr_range_db: (0.0, 15.0),
            rt60_range_s: (0.05, 0.95),
            reverb_prob: 1.0,
            noise_types: (1, 4),
            clip_negatives: true,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.snr_range_db;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return invalid("snr range must be finite and ordered");
        }
        let (lo, hi) = self.rt60_range_s;
        if !(lo > 0.0 && lo <= hi) {
            return invalid("rt60 range must be positive and ordered");
        }
        let (lo, hi) = self.noise_types;
        if lo == 0 || lo > hi || hi > MAX_NOISE_TYPES {
            return invalid(format!("noise type count must lie in 1..={MAX_NOISE_TYPES}"));
        }
        if !(0.0..=1.0).contains(&self.reverb_prob) {
            return invalid("reverb probability must be in [0, 1]");
        }
        Ok(())
    }
}

/// Samples a room that can realise `rt60`: dimensions are drawn, then
/// shrunk if the Sabine bound would exceed 80% of the target.
pub fn sample_room(rng: &mut impl Rng, rt60: f64) -> RoomSpec {
    let mut dims = [
        rng.random_range(3.0..8.0),
        rng.random_range(3.0..6.0),
        rng.random_range(2.5..3.5),
    ];
    let probe = RoomSpec {
        dimensions: dims,
        source_pos: [0.0; 3],
        mic_pos: [0.0; 3],
        rt60_s: rt60,
    };
    let bound = probe.sabine_bound_s();
    if bound > 0.8 * rt60 {
        let scale = 0.8 * rt60 / bound;
        dims.iter_mut().for_each(|d| *d *= scale);
    }
    let mut pos = || -> [f64; 3] {
        let mut p = [0.0; 3];
        for (i, d) in dims.iter().enumerate() {
            let margin = (0.3f64).min(0.2 * d);
            p[i] = rng.random_range(margin..d - margin);
        }
        p
    };
    let source_pos = pos();
    let mic_pos = pos();
    RoomSpec {
        dimensions: dims,
        source_pos,
        mic_pos,
        rt60_s: rt60,
    }
}

/// Loads and caches manifest audio. Shared between data workers.
#[derive(Debug, Clone, Default)]
pub struct AudioCache {
    inner: Arc<Mutex<HashMap<String, Arc<AudioBuffer>>>>,
}

impl AudioCache {
    pub fn get(&self, entry: &ManifestEntry, rate: u32) -> Result<Arc<AudioBuffer>> {
        if let Some(a) = self.inner.lock().expect("cache lock").get(&entry.id) {
            return Ok(a.clone());
        }
        let audio = Arc::new(read_wav(&entry.path, Some(rate))?);
        self.inner
            .lock()
            .expect("cache lock")
            .insert(entry.id.clone(), audio.clone());
        Ok(audio)
    }
}

/// A labelled training or test example.
#[derive(Debug, Clone)]
pub struct Example {
    pub pair: MixturePair,
    pub labels: LabelTrack,
}

/// Draws mixtures for manifest utterances; the output depends only on the
/// manifest, the configuration and the seed.
#[derive(Debug, Clone)]
pub struct Simulator {
    pub manifest: Manifest,
    pub cfg: SimConfig,
    pub spectro: SpectroConfig,
    cache: AudioCache,
}

impl Simulator {
    pub fn new(manifest: Manifest, cfg: SimConfig, spectro: SpectroConfig) -> Result<Self> {
        cfg.validate()?;
        if manifest.of_kind(UttKind::Noise).is_empty() {
            return invalid("manifest has no noise entries");
        }
        Ok(Self {
            manifest,
            cfg,
            spectro,
            cache: AudioCache::default(),
        })
    }

    pub fn audio(&self, entry: &ManifestEntry) -> Result<Arc<AudioBuffer>> {
        self.cache.get(entry, self.spectro.sample_rate)
    }

    /// Mixture spec drawn from the configured distribution.
    pub fn draw_spec(&self, rng: &mut ChaCha8Rng) -> MixtureSpec {
        let noises = self.manifest.of_kind(UttKind::Noise);
        let (lo, hi) = self.cfg.noise_types;
        let k = rng.random_range(lo..=hi).min(noises.len());
        let noise_ids = noises.choose_multiple(rng, k).map(|e| e.id.clone()).collect();
        let (slo, shi) = self.cfg.snr_range_db;
        let snr_db = if slo == shi { slo } else { rng.random_range(slo..shi) };
        let room = if rng.random_bool(self.cfg.reverb_prob) {
            let (rlo, rhi) = self.cfg.rt60_range_s;
            let rt60 = if rlo == rhi { rlo } else { rng.random_range(rlo..rhi) };
            Some(sample_room(rng, rt60))
        } else {
            None
        };
        MixtureSpec {
            snr_db,
            noise_ids,
            room,
            seed: rng.random(),
        }
    }

    /// Mixes `speech_id` with a spec drawn from `seed`; `snr_override` pins
    /// the SNR (used for fixed-SNR test conditions).
    pub fn example(&self, speech_id: &str, seed: u64, snr_override: Option<f64>) -> Result<Example> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entry = self
            .manifest
            .get(speech_id)
            .ok_or_else(|| crate::Error::InvalidInput(format!("unknown utterance {speech_id}")))?;
        if entry.kind == UttKind::Noise {
            return invalid(format!("{speech_id} is a noise entry"));
        }
        let mut speech = (*self.audio(entry)?).clone();
        if entry.kind == UttKind::Negative && self.cfg.clip_negatives {
            match clip_negative(&speech, &mut rng) {
                Some(c) => speech = c,
                None => return invalid(format!("negative clip {speech_id} is shorter than 1 s")),
            }
        }
        let mut spec = self.draw_spec(&mut rng);
        if let Some(snr) = snr_override {
            spec.snr_db = snr;
        }
        let rir = match &spec.room {
            Some(room) => Some(image_method_rir(room, self.spectro.sample_rate, self.cfg.rt60_range_s)?),
            None => None,
        };
        let mut noises = Vec::with_capacity(spec.noise_ids.len());
        for id in &spec.noise_ids {
            let e = self.manifest.get(id).expect("noise ids come from the manifest");
            noises.push((*self.audio(e)?).clone());
        }
        let kw_end = if entry.kind == UttKind::Keyword {
            entry.keyword_end_s
        } else {
            None
        };
        let pair = mix_utterance(speech_id, &speech, rir.as_ref(), &noises, &spec, kw_end)?;
        let frames = self.spectro.num_frames(pair.noisy.len());
        let end = kw_end.map(|s| keyword_end_frame(s, &self.spectro, frames));
        let labels = label_frames(end, frames, POSITIVE_WINDOW)?;
        Ok(Example { pair, labels })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampled_rooms_are_feasible() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for i in 0..200 {
            let rt60 = (0.05 + 0.9 * (i as f64 / 199.0)).min(0.95);
            let room = sample_room(&mut rng, rt60);
            room.validate((0.05, 0.95)).unwrap();
        }
    }
}
