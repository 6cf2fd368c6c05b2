use super::rir::reverberate;
use super::RoomSpec;
use crate::audio_dsp::AudioBuffer;
use crate::error::{invalid, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Samples whose surrounding 10 ms block is below this level are excluded
/// from power measurements.
pub const ACTIVE_THRESHOLD_DBFS: f64 = -60.0;
pub const PEAK_LIMIT: f32 = 0.95;
pub const MAX_NOISE_TYPES: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub snr_db: f64,
    /// Noise manifest ids, one per noise type (1 to 4).
    pub noise_ids: Vec<String>,
    pub room: Option<RoomSpec>,
    pub seed: u64,
}

impl MixtureSpec {
    pub fn n_noise_types(&self) -> usize {
        self.noise_ids.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureMeta {
    pub speech_id: String,
    pub spec: MixtureSpec,
    pub keyword_end_s: Option<f64>,
    /// Gain applied to both signals by peak normalisation.
    pub peak_gain: f32,
}

/// Noisy input and the reverberant clean target at the same gain.
#[derive(Debug, Clone, PartialEq)]
pub struct MixturePair {
    pub noisy: AudioBuffer,
    pub target: AudioBuffer,
    pub meta: MixtureMeta,
}

impl MixturePair {
    /// SNR recomputed from the stored components.
    pub fn measured_snr_db(&self) -> Result<f64> {
        let noise: Vec<f32> = self
            .noisy
            .samples
            .iter()
            .zip(&self.target.samples)
            .map(|(n, t)| n - t)
            .collect();
        measure_snr_db(&self.target.samples, &noise, self.target.sample_rate)
    }
}

/// Mask of samples in 10 ms blocks whose level exceeds
/// [`ACTIVE_THRESHOLD_DBFS`].
pub fn active_mask(x: &[f32], rate: u32) -> Vec<bool> {
    let block = ((rate as usize) / 100).max(1);
    let threshold = 10f64.powf(ACTIVE_THRESHOLD_DBFS / 10.0);
    let mut mask = vec![false; x.len()];
    for (chunk, m) in x.chunks(block).zip(mask.chunks_mut(block)) {
        let p = chunk.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / chunk.len() as f64;
        if p > threshold {
            m.iter_mut().for_each(|b| *b = true);
        }
    }
    mask
}

fn masked_power(x: &[f32], mask: &[bool]) -> f64 {
    let (sum, n) = x
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .fold((0.0, 0usize), |(s, n), (&v, _)| (s + (v as f64).powi(2), n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// `10 log10(P_speech / P_noise)` over the speech-active region.
pub fn measure_snr_db(speech: &[f32], noise: &[f32], rate: u32) -> Result<f64> {
    if speech.len() != noise.len() {
        return invalid("speech and noise lengths differ");
    }
    let mask = active_mask(speech, rate);
    let ps = masked_power(speech, &mask);
    let pn = masked_power(noise, &mask);
    if ps <= 0.0 {
        return invalid("speech is silent");
    }
    if pn <= 0.0 {
        return invalid("noise has zero power over the speech-active region");
    }
    Ok(10.0 * (ps / pn).log10())
}

/// Loops `noise` from a random offset to cover `len` samples.
fn fit_noise(noise: &AudioBuffer, len: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let n = noise.len();
    let offset = rng.random_range(0..n);
    (0..len).map(|i| noise.samples[(offset + i) % n]).collect()
}

/// Reverberates the speech, adds the summed noises at the requested SNR and
/// peak-normalises both outputs with one gain. Each noise type is brought to
/// unit power before summation so types contribute equally.
pub fn mix_utterance(
    speech_id: &str,
    speech: &AudioBuffer,
    rir: Option<&AudioBuffer>,
    noises: &[AudioBuffer],
    spec: &MixtureSpec,
    keyword_end_s: Option<f64>,
) -> Result<MixturePair> {
    if noises.is_empty() || noises.len() > MAX_NOISE_TYPES {
        return invalid(format!("between 1 and {MAX_NOISE_TYPES} noises required, got {}", noises.len()));
    }
    if noises.len() != spec.noise_ids.len() {
        return invalid("noise buffers and noise ids disagree");
    }
    if !spec.snr_db.is_finite() {
        return invalid("snr must be finite");
    }
    let rate = speech.sample_rate;
    if noises.iter().any(|n| n.sample_rate != rate || n.is_empty()) {
        return invalid("noises must be non-empty and share the speech sample rate");
    }
    if speech.power() <= 0.0 {
        return invalid("speech is silent");
    }
    let reverberant = match rir {
        Some(h) => reverberate(speech, h)?,
        None => speech.clone(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let len = speech.len();
    let mut noise = vec![0.0f64; len];
    for n in noises {
        let fitted = fit_noise(n, len, &mut rng);
        let p = fitted.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / len as f64;
        if p <= 0.0 {
            return invalid("noise has zero power");
        }
        let g = p.sqrt().recip();
        noise.iter_mut().zip(&fitted).for_each(|(acc, &v)| *acc += v as f64 * g);
    }
    // The active region is defined on the final, peak-normalised target, and
    // the normalising gain depends on the noise level chosen over that region.
    // Iterate until the region stops changing.
    let mut gain;
    let mut mask = active_mask(&reverberant.samples, rate);
    let mut mixed;
    let mut rounds = 0;
    loop {
        let ps = masked_power(&reverberant.samples, &mask);
        let active = mask.iter().filter(|&&m| m).count();
        let pn = noise
            .iter()
            .zip(&mask)
            .filter(|(_, &m)| m)
            .map(|(&v, _)| v * v)
            .sum::<f64>()
            / active.max(1) as f64;
        if ps <= 0.0 {
            return invalid("reverberant speech is silent");
        }
        if pn <= 0.0 {
            return invalid("noise has zero power over the speech-active region");
        }
        let noise_gain = (ps / (pn * 10f64.powf(spec.snr_db / 10.0))).sqrt();
        mixed = reverberant
            .samples
            .iter()
            .zip(&noise)
            .map(|(&s, &n)| s as f64 + n * noise_gain)
            .collect::<Vec<f64>>();
        let peak = mixed.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        gain = if peak > PEAK_LIMIT as f64 {
            PEAK_LIMIT as f64 / peak
        } else {
            1.0
        };
        let scaled: Vec<f32> = reverberant.samples.iter().map(|&s| (s as f64 * gain) as f32).collect();
        let next = active_mask(&scaled, rate);
        rounds += 1;
        if next == mask || rounds == 8 {
            break;
        }
        mask = next;
    }
    let target = reverberant.samples.iter().map(|&s| (s as f64 * gain) as f32).collect();
    let noisy = mixed.iter().map(|&v| (v * gain) as f32).collect();
    Ok(MixturePair {
        noisy: AudioBuffer::new(noisy, rate)?,
        target: AudioBuffer::new(target, rate)?,
        meta: MixtureMeta {
            speech_id: speech_id.to_string(),
            spec: spec.clone(),
            keyword_end_s,
            peak_gain: gain as f32,
        },
    })
}

/// Uniformly drawn contiguous segment of 1 to 3 s. Clips shorter than 1 s
/// yield `None` and a warning; a 1 s clip is returned unchanged.
pub fn clip_negative(audio: &AudioBuffer, rng: &mut impl Rng) -> Option<AudioBuffer> {
    let rate = audio.sample_rate as usize;
    if audio.len() < rate {
        log::warn!(
            "negative clip of {:.3} s is shorter than 1 s; dropped",
            audio.duration_s()
        );
        return None;
    }
    let max_len = audio.len().min(3 * rate);
    let len = if max_len == rate {
        rate
    } else {
        rng.random_range(rate..=max_len)
    };
    let start = rng.random_range(0..=audio.len() - len);
    Some(AudioBuffer {
        samples: audio.samples[start..start + len].to_vec(),
        sample_rate: audio.sample_rate,
    })
}
