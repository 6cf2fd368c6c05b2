//! Utterance scoring, ROC and wake-up accuracy, energy export, plots and
//! real-time-factor measurement.

use crate::audio_dsp::{read_wav, stft, AudioBuffer, SpectroConfig};
use crate::context_bias::BiasMode;
use crate::error::{invalid, Result};
use crate::kws_head::{smooth_and_decide, utterance_score, ProjectionMode};
use crate::simulate::{Manifest, SimConfig, Simulator, UttKind};
use crate::model::{Backbone, DccrnKws, ModelConfig, RunMode, StreamState};
use crate::nn::ParamStore;
use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::time::Instant;

pub const DEFAULT_SMOOTH_WIN: usize = 30;
pub const DEFAULT_REFRACTORY: usize = 100;

/// Per-frame keyword posterior for one clip, computed offline.
pub fn clip_posterior(model: &DccrnKws, audio: &AudioBuffer, bias: Option<&Tensor>) -> Result<Vec<f32>> {
    let spec = stft(audio, &model.cfg.spectro)?;
    let full = model.spectra(&[&spec], DType::F32, &Device::Cpu)?;
    let post = model.posterior(&full, bias, false, None)?;
    Ok(post.squeeze(0)?.to_dtype(DType::F32)?.to_vec1::<f32>()?)
}

/// Test clips of one kind for an evaluation condition: the clean recordings
/// when `snr_db` is `None`, otherwise mixtures with the manifest's noises
/// at that SNR (negatives are kept whole).
pub fn condition_clips(
    manifest: &Manifest,
    kind: UttKind,
    snr_db: Option<f64>,
    seed: u64,
    sim: &SimConfig,
    spectro: &SpectroConfig,
) -> Result<Vec<AudioBuffer>> {
    let entries = manifest.of_kind(kind);
    let Some(db) = snr_db else {
        return entries.iter().map(|e| read_wav(&e.path, Some(spectro.sample_rate))).collect();
    };
    let mut cfg = sim.clone();
    cfg.clip_negatives = false;
    let sim = Simulator::new(manifest.clone(), cfg, spectro.clone())?;
    entries
        .iter()
        .enumerate()
        .map(|(i, e)| Ok(sim.example(&e.id, seed.wrapping_add(i as u64), Some(db))?.pair.noisy))
        .collect()
}

/// Utterance scores (maximum smoothed posterior) for a set of clips.
pub fn score_clips(
    model: &DccrnKws,
    clips: &[AudioBuffer],
    bias: Option<&Tensor>,
    smooth_win: usize,
) -> Result<Vec<f32>> {
    clips
        .iter()
        .map(|a| Ok(utterance_score(&clip_posterior(model, a, bias)?, smooth_win)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f32,
    pub false_reject_rate: f64,
    pub false_alarm_rate: f64,
    /// Set when the negative material's duration is known.
    pub false_alarms_per_hour: Option<f64>,
}

/// Threshold sweep over every distinct score plus one threshold above the
/// maximum. `FR(θ) = #{pos < θ} / #pos`, `FA(θ) = #{neg >= θ} / #neg`.
pub fn roc_curve(pos: &[f32], neg: &[f32], negative_hours: Option<f64>) -> Result<Vec<RocPoint>> {
    if pos.is_empty() || neg.is_empty() {
        return invalid("roc needs positive and negative scores");
    }
    if pos.iter().chain(neg).any(|v| !v.is_finite()) {
        return invalid("scores must be finite");
    }
    let mut thresholds: Vec<f32> = pos.iter().chain(neg).copied().collect();
    thresholds.sort_by(f32::total_cmp);
    thresholds.dedup();
    let top = *thresholds.last().expect("non-empty");
    thresholds.push(top.next_up());
    Ok(thresholds
        .into_iter()
        .map(|th| {
            let fr = pos.iter().filter(|&&p| p < th).count() as f64 / pos.len() as f64;
            let fa_count = neg.iter().filter(|&&n| n >= th).count();
            RocPoint {
                threshold: th,
                false_reject_rate: fr,
                false_alarm_rate: fa_count as f64 / neg.len() as f64,
                false_alarms_per_hour: negative_hours.map(|h| fa_count as f64 / h),
            }
        })
        .collect())
}

/// Area under the ROC: probability that a positive outscores a negative,
/// ties counted half.
pub fn auc(pos: &[f32], neg: &[f32]) -> Result<f64> {
    if pos.is_empty() || neg.is_empty() {
        return invalid("auc needs positive and negative scores");
    }
    let mut wins = 0.0;
    for &p in pos {
        for &n in neg {
            if p > n {
                wins += 1.0;
            } else if p == n {
                wins += 0.5;
            }
        }
    }
    Ok(wins / (pos.len() * neg.len()) as f64)
}

/// Allowed false alarms for `hours` of negative audio: one per ten hours,
/// rounded down, at least one.
pub fn fa_budget(hours: f64) -> usize {
    ((hours / 10.0).floor() as usize).max(1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WakeReport {
    pub threshold: f32,
    pub accuracy: f64,
    pub false_alarms: usize,
    pub budget: usize,
    pub negative_hours: f64,
    /// False when no threshold meets the budget; the strictest threshold is
    /// reported instead.
    pub budget_met: bool,
}

/// Wake-up accuracy at the lowest threshold whose trigger count on the
/// negative streams stays within [`fa_budget`]. `pos_scores` are utterance
/// scores; `neg_streams` are raw posterior tracks.
pub fn wake_accuracy(
    pos_scores: &[f32],
    neg_streams: &[Vec<f32>],
    negative_hours: f64,
    smooth_win: usize,
    refractory: usize,
) -> Result<WakeReport> {
    if pos_scores.is_empty() {
        return invalid("wake accuracy needs positive scores");
    }
    if !(negative_hours > 0.0) {
        return invalid("negative stream duration must be positive");
    }
    let budget = fa_budget(negative_hours);
    let alarms = |th: f32| -> usize {
        neg_streams
            .iter()
            .map(|s| smooth_and_decide(s, th, smooth_win, refractory).len())
            .sum()
    };
    let mut candidates: Vec<f32> = pos_scores.to_vec();
    for s in neg_streams {
        candidates.extend(crate::kws_head::smooth(s, smooth_win));
    }
    candidates.sort_by(f32::total_cmp);
    candidates.dedup();
    let top = *candidates.last().expect("non-empty");
    candidates.push(top.next_up());
    // trigger counts never increase with the threshold
    let (mut lo, mut hi) = (0usize, candidates.len() - 1);
    if alarms(candidates[hi]) > budget {
        let th = candidates[hi];
        return Ok(WakeReport {
            threshold: th,
            accuracy: pos_scores.iter().filter(|&&p| p >= th).count() as f64 / pos_scores.len() as f64,
            false_alarms: alarms(th),
            budget,
            negative_hours,
            budget_met: false,
        });
    }
    while lo < hi {
        let mid = (lo + hi) / 2;
        if alarms(candidates[mid]) <= budget {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    let th = candidates[lo];
    Ok(WakeReport {
        threshold: th,
        accuracy: pos_scores.iter().filter(|&&p| p >= th).count() as f64 / pos_scores.len() as f64,
        false_alarms: alarms(th),
        budget,
        negative_hours,
        budget_met: true,
    })
}

/// Frame energies: one row per encoder layer then the merged feature.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyTable {
    pub rows: Vec<(String, Vec<f64>)>,
}

impl EnergyTable {
    pub fn from_model(model: &DccrnKws, audio: &AudioBuffer) -> Result<Self> {
        let raw = model.energy_table(audio, DType::F32, &Device::Cpu)?;
        let n = raw.len();
        let rows = raw
            .into_iter()
            .enumerate()
            .map(|(i, r)| {
                let name = if i + 1 == n { "merged".to_string() } else { format!("layer{}", i + 1) };
                (name, r)
            })
            .collect();
        Ok(Self { rows })
    }

    pub fn frames(&self) -> usize {
        self.rows.first().map_or(0, |r| r.1.len())
    }

    /// Long format: `frame\trow\tenergy`, one line per row and frame.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("frame\trow\tenergy\n");
        for t in 0..self.frames() {
            for (name, vals) in &self.rows {
                let _ = writeln!(out, "{t}\t{name}\t{:.6e}", vals[t]);
            }
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut rows: Vec<(String, Vec<f64>)> = Vec::new();
        for (i, line) in text.lines().enumerate().skip(1) {
            let parts: Vec<&str> = line.split('\t').collect();
            let [frame, name, value] = parts[..] else {
                return invalid(format!("energy table line {} has {} fields", i + 1, parts.len()));
            };
            let frame: usize = frame
                .parse()
                .map_err(|_| crate::Error::InvalidInput(format!("bad frame index on line {}", i + 1)))?;
            let value: f64 = value
                .parse()
                .map_err(|_| crate::Error::InvalidInput(format!("bad energy on line {}", i + 1)))?;
            let row = match rows.iter_mut().find(|r| r.0 == name) {
                Some(r) => r,
                None => {
                    rows.push((name.to_string(), Vec::new()));
                    rows.last_mut().expect("pushed")
                }
            };
            if row.1.len() != frame {
                return invalid(format!("energy table frames out of order on line {}", i + 1));
            }
            row.1.push(value);
        }
        Ok(Self { rows })
    }

    /// Mean of `row` inside and outside the frame span `[start, end)`.
    pub fn span_means(&self, row: &str, start: usize, end: usize) -> Option<(f64, f64)> {
        let vals = &self.rows.iter().find(|r| r.0 == row)?.1;
        let end = end.min(vals.len());
        if start >= end || end - start == vals.len() {
            return None;
        }
        let inside: f64 = vals[start..end].iter().sum::<f64>() / (end - start) as f64;
        let outside: f64 =
            (vals[..start].iter().sum::<f64>() + vals[end..].iter().sum::<f64>()) / (vals.len() - (end - start)) as f64;
        Some((inside, outside))
    }
}

const PANEL_W: f64 = 640.0;
const PANEL_H: f64 = 70.0;

fn polyline(vals: &[f64], x0: f64, y0: f64, w: f64, h: f64) -> String {
    let max = vals.iter().cloned().fold(f64::MIN, f64::max);
    let min = vals.iter().cloned().fold(f64::MAX, f64::min);
    let span = (max - min).max(1e-12);
    let n = vals.len().max(2) - 1;
    vals.iter()
        .enumerate()
        .map(|(i, v)| {
            format!(
                "{:.1},{:.1}",
                x0 + w * i as f64 / n as f64,
                y0 + h - h * (v - min) / span
            )
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Stacked per-row energy panels; `span` shades a frame range.
pub fn energy_svg(table: &EnergyTable, span: Option<(usize, usize)>) -> String {
    let rows = table.rows.len();
    let height = 20.0 + rows as f64 * (PANEL_H + 20.0);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{height}\" font-family=\"sans-serif\" font-size=\"11\">\n",
        PANEL_W + 100.0
    );
    let frames = table.frames().max(1);
    for (i, (name, vals)) in table.rows.iter().enumerate() {
        let y = 20.0 + i as f64 * (PANEL_H + 20.0);
        if let Some((a, b)) = span {
            let x = 80.0 + PANEL_W * a as f64 / frames as f64;
            let w = PANEL_W * (b.saturating_sub(a)) as f64 / frames as f64;
            let _ = writeln!(s, "<rect x=\"{x:.1}\" y=\"{y}\" width=\"{w:.1}\" height=\"{PANEL_H}\" fill=\"#fde0c5\"/>");
        }
        let _ = writeln!(s, "<rect x=\"80\" y=\"{y}\" width=\"{PANEL_W}\" height=\"{PANEL_H}\" fill=\"none\" stroke=\"#999\"/>");
        let _ = writeln!(s, "<text x=\"4\" y=\"{:.1}\">{name}</text>", y + PANEL_H / 2.0);
        let _ = writeln!(
            s,
            "<polyline fill=\"none\" stroke=\"#1f5f99\" stroke-width=\"1.2\" points=\"{}\"/>",
            polyline(vals, 80.0, y, PANEL_W, PANEL_H)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// ROC curves (false alarm rate on x, false reject rate on y).
pub fn roc_svg(curves: &[(String, Vec<RocPoint>)]) -> String {
    let (w, h, x0, y0) = (420.0, 320.0, 60.0, 20.0);
    let colours = ["#1f5f99", "#c0392b", "#27ae60", "#8e44ad", "#d35400"];
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" font-family=\"sans-serif\" font-size=\"11\">\n",
        w + x0 + 160.0,
        h + y0 + 40.0
    );
    let _ = writeln!(s, "<rect x=\"{x0}\" y=\"{y0}\" width=\"{w}\" height=\"{h}\" fill=\"none\" stroke=\"#999\"/>");
    let _ = writeln!(s, "<text x=\"{}\" y=\"{}\">false alarm rate</text>", x0 + w / 2.0 - 40.0, y0 + h + 30.0);
    let _ = writeln!(s, "<text x=\"4\" y=\"{}\">FR</text>", y0 + h / 2.0);
    for (i, (name, pts)) in curves.iter().enumerate() {
        let c = colours[i % colours.len()];
        let mut sorted = pts.clone();
        sorted.sort_by(|a, b| a.false_alarm_rate.total_cmp(&b.false_alarm_rate));
        let line: Vec<String> = sorted
            .iter()
            .map(|p| format!("{:.1},{:.1}", x0 + w * p.false_alarm_rate, y0 + h - h * p.false_reject_rate))
            .collect();
        let _ = writeln!(s, "<polyline fill=\"none\" stroke=\"{c}\" stroke-width=\"1.5\" points=\"{}\"/>", line.join(" "));
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" fill=\"{c}\">{name}</text>", x0 + w + 10.0, y0 + 14.0 * (i + 1) as f64);
    }
    s.push_str("</svg>\n");
    s
}

/// Causal detector fed with arbitrary-sized sample chunks.
pub struct StreamingDetector<'a> {
    model: &'a DccrnKws,
    bias: Option<Tensor>,
    state: StreamState,
    pending: Vec<f32>,
    frames: usize,
}

impl<'a> StreamingDetector<'a> {
    pub fn new(model: &'a DccrnKws, bias: Option<Tensor>) -> Self {
        Self {
            model,
            bias,
            state: StreamState::default(),
            pending: Vec::new(),
            frames: 0,
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    /// Posteriors for every frame completed by `samples`.
    pub fn push(&mut self, samples: &[f32]) -> Result<Vec<f32>> {
        self.pending.extend_from_slice(samples);
        let spectro = &self.model.cfg.spectro;
        let n = spectro.num_frames(self.pending.len());
        if n == 0 {
            return Ok(Vec::new());
        }
        let hop = spectro.hop_len();
        let used = (n - 1) * hop + spectro.win_len();
        let chunk = AudioBuffer {
            samples: self.pending[..used].to_vec(),
            sample_rate: spectro.sample_rate,
        };
        let spec = stft(&chunk, spectro)?;
        let full = self.model.spectra(&[&spec], DType::F32, &Device::Cpu)?;
        let post = self
            .model
            .posterior(&full, self.bias.as_ref(), false, Some(&mut self.state))?;
        self.pending.drain(..n * hop);
        self.frames += n;
        Ok(post.squeeze(0)?.to_dtype(DType::F32)?.to_vec1::<f32>()?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RtfReport {
    pub name: String,
    pub audio_s: f64,
    pub elapsed_s: f64,
    pub rtf: f64,
}

/// Streams `audio` through the inference graph in `chunk_ms` pieces after
/// running `warmup_s` seconds untimed. Candle's CPU kernels are limited to
/// one thread by the caller (see [`force_single_thread`]).
pub fn rtf_benchmark(
    name: &str,
    model: &DccrnKws,
    bias: Option<Tensor>,
    audio: &AudioBuffer,
    warmup_s: f64,
    chunk_ms: f64,
) -> Result<RtfReport> {
    let rate = audio.sample_rate as f64;
    let chunk = ((chunk_ms / 1000.0) * rate).round().max(1.0) as usize;
    let warm = ((warmup_s * rate) as usize).min(audio.len());
    let mut det = StreamingDetector::new(model, bias.clone());
    for c in audio.samples[..warm].chunks(chunk) {
        det.push(c)?;
    }
    let mut det = StreamingDetector::new(model, bias);
    let start = Instant::now();
    for c in audio.samples.chunks(chunk) {
        det.push(c)?;
    }
    let elapsed = start.elapsed().as_secs_f64();
    let audio_s = audio.duration_s();
    Ok(RtfReport {
        name: name.to_string(),
        audio_s,
        elapsed_s: elapsed,
        rtf: elapsed / audio_s,
    })
}

/// The five benchmark variants, from the keyword-only baseline to the
/// complete model: `kws_only`, `dccrn_kws` (plain projection, no merge),
/// `audio_bias` (fixed bias concatenation), `feature_merge` and `ccl`.
pub fn rtf_suite(base: &ModelConfig) -> Vec<(String, ModelConfig)> {
    let mut plain = base.clone();
    plain.backbone = Backbone::Dccrn;
    plain.projection = ProjectionMode::Plain;
    plain.feature_merge = false;
    plain.bias_mode = BiasMode::Fixed;
    let mut kws = plain.clone();
    kws.backbone = Backbone::KwsOnly;
    let mut bias = plain.clone();
    bias.projection = ProjectionMode::BiasConcat;
    let mut fm = bias.clone();
    fm.feature_merge = true;
    let mut ccl = fm.clone();
    ccl.projection = ProjectionMode::Ccl;
    vec![
        ("kws_only".into(), kws),
        ("dccrn_kws".into(), plain),
        ("audio_bias".into(), bias),
        ("feature_merge".into(), fm),
        ("ccl".into(), ccl),
    ]
}

/// Inference model for `cfg` with seeded random weights and, when the
/// model takes a bias, a random cached embedding.
pub fn random_inference_model(cfg: &ModelConfig, seed: u64) -> Result<(ParamStore, DccrnKws, Option<Tensor>)> {
    let mut store = ParamStore::new(DType::F32, seed);
    let model = DccrnKws::new(&mut store, cfg, RunMode::Inference)?;
    let bias = match &model.bias {
        Some(b) => {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0xB1A5);
            let v: Vec<f32> = (0..crate::context_bias::EMBEDDING_DIM)
                .map(|_| rng.sample(rand_distr::StandardNormal))
                .collect();
            let e = Tensor::from_vec(v, crate::context_bias::EMBEDDING_DIM, &Device::Cpu)?;
            b.set_cached(Some(e.clone()));
            Some(e)
        }
        None => None,
    };
    Ok((store, model, bias))
}

/// Restricts the tensor kernels to one thread. Must run before the first
/// tensor operation of the process.
pub fn force_single_thread() {
    std::env::set_var("RAYON_NUM_THREADS", "1");
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roc_hand_example() {
        let roc = roc_curve(&[0.9, 0.8], &[0.1], None).unwrap();
        // θ = 0.5 behaves like the first threshold above 0.1
        let p = roc.iter().find(|p| p.threshold > 0.1 && p.threshold <= 0.8).unwrap();
        assert_eq!(p.false_reject_rate, 0.0);
        assert_eq!(p.false_alarm_rate, 0.0);
        assert!(roc_curve(&[], &[0.1], None).is_err());
    }

    #[test]
    fn roc_is_monotone() {
        let roc = roc_curve(&[0.2, 0.5, 0.5, 0.9], &[0.1, 0.5, 0.7], Some(2.0)).unwrap();
        for w in roc.windows(2) {
            assert!(w[1].false_reject_rate >= w[0].false_reject_rate);
            assert!(w[1].false_alarm_rate <= w[0].false_alarm_rate);
        }
        assert_eq!(roc.last().unwrap().false_alarm_rate, 0.0);
        assert_eq!(roc.last().unwrap().false_reject_rate, 1.0);
        assert_eq!(roc[0].false_alarms_per_hour, Some(1.5));
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.9, 0.8], &[0.1]).unwrap(), 1.0);
        assert_eq!(auc(&[0.5], &[0.5]).unwrap(), 0.5);
        assert_eq!(auc(&[0.1], &[0.9]).unwrap(), 0.0);
    }

    #[test]
    fn budget_scaling() {
        assert_eq!(fa_budget(1.0), 1);
        assert_eq!(fa_budget(25.0), 2);
    }

    #[test]
    fn wake_with_silent_negatives() {
        let r = wake_accuracy(&[0.3, 0.6, 0.9], &[vec![0.0; 500]], 1.0, 30, 100).unwrap();
        assert!(r.budget_met);
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.false_alarms, 0);
    }

    #[test]
    fn wake_respects_budget() {
        let mut neg = vec![0.0f32; 1000];
        for t in (100..1000).step_by(200) {
            for v in &mut neg[t..t + 40] {
                *v = 0.7;
            }
        }
        let r = wake_accuracy(&[0.5, 0.8, 0.95], &[neg], 1.0, 1, 10).unwrap();
        assert!(r.false_alarms <= 1);
        assert!(r.threshold > 0.7);
        assert!((r.accuracy - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn energy_table_round_trip_and_span() {
        let t = EnergyTable {
            rows: vec![
                ("layer1".into(), vec![1.0, 2.0, 3.0, 4.0]),
                ("merged".into(), vec![0.0, 5.0, 5.0, 0.0]),
            ],
        };
        assert_eq!(EnergyTable::from_tsv(&t.to_tsv()).unwrap(), t);
        assert_eq!(t.span_means("merged", 1, 3), Some((5.0, 0.0)));
        assert!(energy_svg(&t, Some((1, 3))).contains("polyline"));
    }
}
