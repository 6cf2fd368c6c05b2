//! Synthetic tone-sequence corpus used by the toy configuration. The
//! "keyword" is a three-tone glide pattern; negatives are other tone
//! sequences, including near-misses that share a prefix with the keyword.

use super::{Manifest, ManifestEntry, UttKind};
use crate::audio_dsp::{write_wav, AudioBuffer};
use crate::error::{invalid, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;

pub const KEYWORD_TONES: [f64; 3] = [200.0, 500.0, 300.0];
const NEGATIVE_TONES: [f64; 5] = [200.0, 300.0, 400.0, 500.0, 600.0];

#[derive(Debug, Clone, PartialEq)]
pub struct ToyCorpusConfig {
    pub sample_rate: u32,
    pub train_positives: usize,
    pub train_negatives: usize,
    pub test_positives: usize,
    pub test_negatives: usize,
    pub train_speakers: usize,
    pub test_speakers: usize,
    pub noise_seconds: f64,
    pub seed: u64,
}

impl Default for ToyCorpusConfig {
    fn default() -> Self {
        Self {
            sample_rate: 1_600,
            train_positives: 20,
            train_negatives: 20,
            test_positives: 40,
            test_negatives: 40,
            train_speakers: 4,
            test_speakers: 2,
            noise_seconds: 8.0,
            seed: 7,
        }
    }
}

/// Per-speaker voice: pitch scale, speaking-rate scale and level.
#[derive(Debug, Clone, Copy)]
struct Voice {
    pitch: f64,
    tempo: f64,
    level: f64,
}

fn voice(rng: &mut ChaCha8Rng) -> Voice {
    Voice {
        pitch: rng.random_range(0.92..1.08),
        tempo: rng.random_range(0.85..1.15),
        level: rng.random_range(0.2..0.4),
    }
}

/// Appends a tone with raised-cosine onsets and a weaker second harmonic
/// when it fits below Nyquist.
fn push_tone(out: &mut Vec<f32>, freq: f64, secs: f64, level: f64, rate: u32) {
    let n = (secs * rate as f64) as usize;
    let ramp = (0.02 * rate as f64) as usize;
    let fs = rate as f64;
    let phase0 = out.len() as f64;
    for i in 0..n {
        let t = (phase0 + i as f64) / fs;
        let mut v = (2.0 * std::f64::consts::PI * freq * t).sin();
        if 2.0 * freq < 0.45 * fs {
            v += 0.3 * (2.0 * std::f64::consts::PI * 2.0 * freq * t).sin();
        }
        let edge = i.min(n - 1 - i);
        let env = if edge < ramp {
            0.5 - 0.5 * (std::f64::consts::PI * edge as f64 / ramp as f64).cos()
        } else {
            1.0
        };
        out.push((level * env * v / 1.3) as f32);
    }
}

fn push_silence(out: &mut Vec<f32>, secs: f64, rate: u32) {
    out.extend(std::iter::repeat_n(0.0, (secs * rate as f64) as usize));
}

/// Keyword clip and its end time in seconds.
fn keyword_clip(rng: &mut ChaCha8Rng, v: Voice, rate: u32) -> (AudioBuffer, f64) {
    let mut s = Vec::new();
    push_silence(&mut s, rng.random_range(0.2..0.6), rate);
    for f in KEYWORD_TONES {
        let dur = v.tempo * rng.random_range(0.12..0.17);
        push_tone(&mut s, f * v.pitch * rng.random_range(0.98..1.02), dur, v.level, rate);
    }
    let end = s.len() as f64 / rate as f64;
    push_silence(&mut s, rng.random_range(0.15..0.35), rate);
    (AudioBuffer { samples: s, sample_rate: rate }, end)
}

fn contains_keyword(seq: &[f64]) -> bool {
    seq.windows(3).any(|w| w == KEYWORD_TONES)
}

/// Negative clip of 1.2 to 3 s: tone sequences that never contain the
/// keyword pattern, half of them starting with the keyword's first two
/// tones.
fn negative_clip(rng: &mut ChaCha8Rng, v: Voice, rate: u32) -> AudioBuffer {
    let target = rng.random_range(1.2..3.0);
    let mut s = Vec::new();
    push_silence(&mut s, rng.random_range(0.05..0.3), rate);
    let mut seq: Vec<f64> = Vec::new();
    if rng.random_bool(0.5) {
        seq.extend_from_slice(&KEYWORD_TONES[..2]);
    }
    while (s.len() as f64 / rate as f64) < target {
        if seq.is_empty() || rng.random_bool(0.7) {
            loop {
                let f = NEGATIVE_TONES[rng.random_range(0..NEGATIVE_TONES.len())];
                seq.push(f);
                if !contains_keyword(&seq) {
                    break;
                }
                seq.pop();
            }
        }
        let f = *seq.last().expect("non-empty");
        let dur = v.tempo * rng.random_range(0.1..0.2);
        push_tone(&mut s, f * v.pitch, dur, v.level, rate);
        if rng.random_bool(0.3) {
            push_silence(&mut s, rng.random_range(0.05..0.2), rate);
            seq.clear();
        }
    }
    s.truncate((target * rate as f64) as usize);
    AudioBuffer { samples: s, sample_rate: rate }
}

/// Four noise families: white, brown, harmonic hum and tone babble.
fn noise_clip(kind: usize, rng: &mut ChaCha8Rng, secs: f64, rate: u32) -> AudioBuffer {
    let n = (secs * rate as f64) as usize;
    let fs = rate as f64;
    let mut s = vec![0.0f64; n];
    match kind {
        0 => s.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0)),
        1 => {
            let mut acc = 0.0;
            for v in s.iter_mut() {
                acc = 0.98 * acc + rng.random_range(-1.0..1.0);
                *v = acc;
            }
        }
        2 => {
            let base = rng.random_range(50.0..70.0);
            for (i, v) in s.iter_mut().enumerate() {
                let t = i as f64 / fs;
                *v = (1..6)
                    .map(|k| (2.0 * std::f64::consts::PI * base * k as f64 * t).sin() / k as f64)
                    .sum::<f64>()
                    + 0.1 * rng.random_range(-1.0..1.0);
            }
        }
        _ => {
            let mut i = 0;
            while i < n {
                let len = ((rng.random_range(0.05..0.3)) * fs) as usize;
                let f = rng.random_range(150.0..700.0);
                let a = rng.random_range(0.2..1.0);
                for j in 0..len.min(n - i) {
                    s[i + j] += a * (2.0 * std::f64::consts::PI * f * (i + j) as f64 / fs).sin();
                }
                i += len / 2;
            }
        }
    }
    let peak = s.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    AudioBuffer {
        samples: s.iter().map(|v| (0.5 * v / peak) as f32).collect(),
        sample_rate: rate,
    }
}

#[derive(Debug, Clone)]
pub struct ToyCorpus {
    pub train: Manifest,
    pub test: Manifest,
}

/// Writes WAVs under `dir/{train,test}` and manifests `dir/train.jsonl`,
/// `dir/test.jsonl`. Speakers and noise recordings are disjoint between the
/// partitions.
pub fn write_toy_corpus(dir: &Path, cfg: &ToyCorpusConfig) -> Result<ToyCorpus> {
    if cfg.train_speakers == 0 || cfg.test_speakers == 0 {
        return invalid("toy corpus needs speakers in both partitions");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let build = |part: &str, speakers: usize, pos: usize, neg: usize, rng: &mut ChaCha8Rng| -> Result<Manifest> {
        let sub = dir.join(part);
        std::fs::create_dir_all(&sub)?;
        let voices: Vec<Voice> = (0..speakers).map(|_| voice(rng)).collect();
        let mut entries = Vec::new();
        for i in 0..pos {
            let spk = i % speakers;
            let (audio, end) = keyword_clip(rng, voices[spk], cfg.sample_rate);
            let id = format!("{part}_kw{i:03}");
            let path = sub.join(format!("{id}.wav"));
            write_wav(&path, &audio)?;
            entries.push(ManifestEntry {
                id,
                path,
                kind: UttKind::Keyword,
                speaker: Some(format!("{part}_spk{spk}")),
                keyword_end_s: Some(end),
            });
        }
        for i in 0..neg {
            let spk = i % speakers;
            let audio = negative_clip(rng, voices[spk], cfg.sample_rate);
            let id = format!("{part}_neg{i:03}");
            let path = sub.join(format!("{id}.wav"));
            write_wav(&path, &audio)?;
            entries.push(ManifestEntry {
                id,
                path,
                kind: UttKind::Negative,
                speaker: Some(format!("{part}_spk{spk}")),
                keyword_end_s: None,
            });
        }
        for kind in 0..4 {
            let audio = noise_clip(kind, rng, cfg.noise_seconds, cfg.sample_rate);
            let id = format!("{part}_noise{kind}");
            let path = sub.join(format!("{id}.wav"));
            write_wav(&path, &audio)?;
            entries.push(ManifestEntry {
                id,
                path,
                kind: UttKind::Noise,
                speaker: None,
                keyword_end_s: None,
            });
        }
        let m = Manifest::new(entries)?;
        m.save(dir.join(format!("{part}.jsonl")))?;
        Ok(m)
    };
    let train = build("train", cfg.train_speakers, cfg.train_positives, cfg.train_negatives, &mut rng)?;
    let test = build("test", cfg.test_speakers, cfg.test_positives, cfg.test_negatives, &mut rng)?;
    super::check_disjoint(&train, &test)?;
    Ok(ToyCorpus { train, test })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn negatives_never_contain_the_keyword() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let mut seq = vec![200.0, 500.0];
            seq.push(300.0);
            assert!(contains_keyword(&seq));
            let v = voice(&mut rng);
            let clip = negative_clip(&mut rng, v, 1600);
            assert!((1.2..=3.0).contains(&clip.duration_s()));
        }
    }

    #[test]
    fn corpus_layout() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ToyCorpusConfig {
            train_positives: 3,
            train_negatives: 3,
            test_positives: 2,
            test_negatives: 2,
            noise_seconds: 2.0,
            ..Default::default()
        };
        let c = write_toy_corpus(dir.path(), &cfg).unwrap();
        assert_eq!(c.train.of_kind(UttKind::Keyword).len(), 3);
        assert_eq!(c.test.of_kind(UttKind::Noise).len(), 4);
        let loaded = Manifest::load(dir.path().join("train.jsonl")).unwrap();
        loaded.check_files().unwrap();
        assert_eq!(loaded, c.train);
        let kw = &c.train.of_kind(UttKind::Keyword)[0];
        let audio = crate::audio_dsp::read_wav(&kw.path, Some(1600)).unwrap();
        assert!(kw.keyword_end_s.unwrap() < audio.duration_s());
    }
}
