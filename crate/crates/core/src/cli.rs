//! Command-line front end.
//!
//! Usage errors (unknown subcommand or flag, bad config key) exit with 2;
//! other failures print one `error\t<kind>\t<message>` line and exit with 1.

use crate::audio_dsp::{read_wav, write_wav, AudioBuffer};
use crate::config::RunConfig;
use crate::context_bias::{BiasList, BiasMode};
use crate::error::{Error, Result};
use crate::evaluate::{
    auc, condition_clips, energy_svg, force_single_thread, random_inference_model, roc_curve, roc_svg, rtf_benchmark, rtf_suite,
    score_clips, wake_accuracy, EnergyTable, RocPoint, RtfReport, StreamingDetector, DEFAULT_REFRACTORY,
    DEFAULT_SMOOTH_WIN,
};
use crate::kws_head::{smooth_and_decide, ProjectionMode};
use crate::model::{ModelConfig, RunMode};
use crate::simulate::toy::{write_toy_corpus, ToyCorpusConfig};
use crate::simulate::{Manifest, Simulator, UttKind};
use crate::train::{LoadedModel, Trainer};
use candle_core::{DType, Tensor};
use clap::{Parser, Subcommand};
use std::fmt::Write as _;
use std::io::Read;
use std::path::{Path, PathBuf};

#[derive(Debug, Parser)]
#[command(name = "dccrn-kws", version, about = "Joint denoising and keyword spotting with audio context bias")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate noisy/clean mixtures with frame label sidecars.
    Simulate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Fix the SNR instead of drawing it.
        #[arg(long, allow_hyphen_values = true)]
        snr: Option<f64>,
        /// Run configuration supplying the front-end and mixing ranges.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Select the keyword clips whose embeddings form the bias.
    MakeBiasList {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "fixed")]
        mode: BiasMode,
        #[arg(long, default_value_t = 10)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        speaker: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        projection: Option<ProjectionMode>,
        #[arg(long)]
        bias_mode: Option<BiasMode>,
        #[arg(long, value_parser = parse_on_off)]
        feature_merge: Option<bool>,
        #[arg(long)]
        train_manifest: Option<PathBuf>,
        /// Checkpoint directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        bias_list: Option<PathBuf>,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// ROC over keyword and negative test clips.
    EvalRoc {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Mix at this SNR; clean clips when absent.
        #[arg(long, allow_hyphen_values = true)]
        snr: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_SMOOTH_WIN)]
        smooth: usize,
        /// Recompute the bias from this list instead of the cached one.
        #[arg(long)]
        bias_list: Option<PathBuf>,
        /// ROC table (TSV).
        #[arg(long)]
        out: PathBuf,
        /// Machine-readable summary (JSON); defaults to `<out>.json`.
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Wake-up accuracy under the false-alarm budget at several SNRs.
    EvalWake {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "-5,0,5", allow_hyphen_values = true)]
        snrs: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_SMOOTH_WIN)]
        smooth: usize,
        #[arg(long, default_value_t = DEFAULT_REFRACTORY)]
        refractory: usize,
        #[arg(long)]
        bias_list: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Causal detection over a WAV file or raw s16le PCM on stdin.
    Stream {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input WAV; reads PCM from stdin when absent.
        #[arg(long)]
        wav: Option<PathBuf>,
        #[arg(long, default_value_t = 0.5)]
        threshold: f32,
        #[arg(long, default_value_t = DEFAULT_SMOOTH_WIN)]
        smooth: usize,
        #[arg(long, default_value_t = DEFAULT_REFRACTORY)]
        refractory: usize,
        #[arg(long, default_value_t = 100.0)]
        chunk_ms: f64,
    },
    /// Single-threaded real-time factor of the inference graph.
    BenchRtf {
        /// Benchmark this checkpoint only; otherwise the five-variant suite.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "full")]
        preset: String,
        #[arg(long)]
        wav: Option<PathBuf>,
        #[arg(long, default_value_t = 60.0)]
        seconds: f64,
        #[arg(long, default_value_t = 5.0)]
        warmup: f64,
        #[arg(long, default_value_t = 100.0)]
        chunk_ms: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-layer and merged-feature frame energies of one clip.
    ExportEnergy {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        wav: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render an energy table or ROC tables to SVG.
    Plot {
        #[arg(long, conflicts_with = "roc")]
        energy: Option<PathBuf>,
        /// Frame span `start:end` to shade on the energy plot.
        #[arg(long)]
        span: Option<String>,
        #[arg(long, num_args = 1..)]
        roc: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the synthetic tone corpus used by the toy configuration.
    ToyCorpus {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

fn parse_on_off(s: &str) -> std::result::Result<bool, String> {
    match s {
        "on" | "true" => Ok(true),
        "off" | "false" => Ok(false),
        _ => Err(format!("expected on or off, got `{s}`")),
    }
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            let msg = e.to_string().replace(['\n', '\t'], " ");
            eprintln!("error\t{}\t{msg}", e.kind());
            if matches!(e, Error::ConfigKey { .. }) {
                2
            } else {
                1
            }
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Simulate {
            manifest,
            out_dir,
            count,
            seed,
            snr,
            config,
        } => simulate(&manifest, &out_dir, count, seed, snr, config.as_deref()),
        Command::MakeBiasList {
            manifest,
            mode,
            size,
            seed,
            speaker,
            out,
        } => {
            let m = Manifest::load(&manifest)?;
            let list = BiasList::select(mode, &m, size, seed, speaker.as_deref())?;
            list.save(&out)?;
            println!("{}\t{}", list.mode, list.entries.join(","));
            Ok(())
        }
        Command::Train {
            config,
            projection,
            bias_mode,
            feature_merge,
            train_manifest,
            out_dir,
            iterations,
            seed,
            bias_list,
            resume,
        } => {
            let mut rc = match &config {
                Some(p) => RunConfig::load(p)?,
                None => RunConfig::preset("toy")?,
            };
            let m = &mut rc.train.model;
            if let Some(p) = projection {
                m.projection = p;
            }
            if let Some(b) = bias_mode {
                m.bias_mode = b;
            }
            if let Some(f) = feature_merge {
                m.feature_merge = f;
            }
            if let Some(n) = iterations {
                rc.train.iterations = n;
            }
            if let Some(s) = seed {
                rc.train.seed = s;
            }
            if train_manifest.is_some() {
                rc.train_manifest = train_manifest;
            }
            if out_dir.is_some() {
                rc.out_dir = out_dir;
            }
            rc.resolve();
            train(rc, bias_list.as_deref(), resume.as_deref())
        }
        Command::EvalRoc {
            checkpoint,
            manifest,
            snr,
            seed,
            smooth,
            bias_list,
            out,
            summary,
        } => eval_roc(&checkpoint, &manifest, snr, seed, smooth, bias_list.as_deref(), &out, summary),
        Command::EvalWake {
            checkpoint,
            manifest,
            snrs,
            seed,
            smooth,
            refractory,
            bias_list,
            out,
        } => eval_wake(&checkpoint, &manifest, &snrs, seed, smooth, refractory, bias_list.as_deref(), &out),
        Command::Stream {
            checkpoint,
            wav,
            threshold,
            smooth,
            refractory,
            chunk_ms,
        } => stream(&checkpoint, wav.as_deref(), threshold, smooth, refractory, chunk_ms),
        Command::BenchRtf {
            checkpoint,
            preset,
            wav,
            seconds,
            warmup,
            chunk_ms,
            out,
        } => bench(checkpoint.as_deref(), &preset, wav.as_deref(), seconds, warmup, chunk_ms, out.as_deref()),
        Command::ExportEnergy { checkpoint, wav, out } => {
            let loaded = LoadedModel::load(&checkpoint, RunMode::Inference)?;
            let audio = read_wav(&wav, Some(loaded.cfg.model.spectro.sample_rate))?;
            let table = EnergyTable::from_model(&loaded.model, &audio)?;
            std::fs::write(&out, table.to_tsv())?;
            write_resolved(&loaded, &out)?;
            if let Some(m) = loaded.model.merge() {
                let w = m.weight_values()?;
                println!(
                    "merge_weights\t{}",
                    w.iter().map(|v| format!("{v:.6}")).collect::<Vec<_>>().join(",")
                );
            }
            println!("frames\t{}", table.frames());
            Ok(())
        }
        Command::Plot { energy, span, roc, out } => plot(energy.as_deref(), span.as_deref(), &roc, &out),
        Command::ToyCorpus { out_dir, seed } => {
            let corpus = write_toy_corpus(
                &out_dir,
                &ToyCorpusConfig {
                    seed,
                    ..ToyCorpusConfig::default()
                },
            )?;
            println!(
                "train\t{}\ttest\t{}",
                corpus.train.entries.len(),
                corpus.test.entries.len()
            );
            Ok(())
        }
    }
}

fn simulate(manifest: &Path, out_dir: &Path, count: usize, seed: u64, snr: Option<f64>, config: Option<&Path>) -> Result<()> {
    let rc = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::preset("toy")?,
    };
    let m = Manifest::load(manifest)?;
    let speech: Vec<String> = m
        .entries
        .iter()
        .filter(|e| e.kind != UttKind::Noise)
        .map(|e| e.id.clone())
        .collect();
    if speech.is_empty() {
        return Err(Error::InvalidInput("manifest has no speech entries".into()));
    }
    let sim = Simulator::new(m, rc.train.sim.clone(), rc.train.model.spectro.clone())?;
    std::fs::create_dir_all(out_dir)?;
    let mut index = String::new();
    for i in 0..count {
        let id = &speech[i % speech.len()];
        let ex_seed = seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
        let ex = sim.example(id, ex_seed, snr)?;
        let stem = format!("mix{i:05}");
        write_wav(out_dir.join(format!("{stem}_noisy.wav")), &ex.pair.noisy)?;
        write_wav(out_dir.join(format!("{stem}_target.wav")), &ex.pair.target)?;
        ex.labels.save(out_dir.join(format!("{stem}.labels")))?;
        let meta = serde_json::json!({
            "id": stem,
            "speech_id": id,
            "seed": ex_seed,
            "snr_db": ex.pair.meta.spec.snr_db,
            "noise_ids": ex.pair.meta.spec.noise_ids,
            "rt60_s": ex.pair.meta.spec.room.as_ref().map(|r| r.rt60_s),
            "keyword_end_s": ex.pair.meta.keyword_end_s,
            "peak_gain": ex.pair.meta.peak_gain,
        });
        index.push_str(&meta.to_string());
        index.push('\n');
    }
    std::fs::write(out_dir.join("mixtures.jsonl"), index)?;
    std::fs::write(out_dir.join("resolved.conf"), rc.to_text())?;
    println!("mixtures\t{count}");
    Ok(())
}

fn train(rc: RunConfig, bias_list: Option<&Path>, resume: Option<&Path>) -> Result<()> {
    let manifest_path = rc
        .train_manifest
        .clone()
        .ok_or_else(|| Error::Config("no training manifest (config key train_manifest or --train-manifest)".into()))?;
    let manifest = Manifest::load(&manifest_path)?;
    let mut trainer = match resume {
        Some(p) => Trainer::resume(manifest, &crate::nn::Checkpoint::load(p)?, DType::F32)?,
        None => {
            let list = bias_list.map(BiasList::load).transpose()?;
            Trainer::new(rc.train.clone(), manifest, list, DType::F32)?
        }
    };
    if resume.is_some() {
        trainer.cfg.iterations = rc.train.iterations.max(trainer.iteration);
    }
    if let Some(d) = &rc.out_dir {
        std::fs::create_dir_all(d)?;
        std::fs::write(d.join("resolved.conf"), rc.to_text())?;
    }
    let start = std::time::Instant::now();
    trainer.run(rc.out_dir.as_deref(), |it, p| {
        if it % 50 == 0 || it == 1 {
            println!(
                "iter\t{it}\tloss\t{:.5}\tbce\t{:.5}\tsi_snr_db\t{}\telapsed_s\t{:.1}",
                p.total(),
                p.bce,
                p.si_snr_db.map_or("-".into(), |v| format!("{v:.3}")),
                start.elapsed().as_secs_f64()
            );
        }
    })?;
    println!("done\t{}", trainer.iteration);
    Ok(())
}

/// Writes the configuration a checkpoint was trained with next to an
/// evaluation output, so the run can be reproduced from it.
fn write_resolved(loaded: &LoadedModel, out: &Path) -> Result<()> {
    let preset = if loaded.cfg.model.spectro == crate::audio_dsp::SpectroConfig::toy() { "toy" } else { "full" };
    let rc = RunConfig {
        train: loaded.cfg.clone(),
        ..RunConfig::preset(preset)?
    };
    let name = format!(
        "{}.resolved.conf",
        out.file_stem().map_or("run".into(), |s| s.to_string_lossy().into_owned())
    );
    std::fs::write(out.with_file_name(name), rc.to_text())?;
    Ok(())
}

fn inference_bias(loaded: &LoadedModel, list: Option<&Path>, manifest: &Manifest) -> Result<Option<Tensor>> {
    match list {
        Some(p) => {
            let l = BiasList::load(p)?;
            let feats = loaded.list_features(&l, manifest)?;
            loaded.bias(Some(&feats))
        }
        None => loaded.bias(None),
    }
}

fn test_clips(loaded: &LoadedModel, manifest: &Manifest, kind: UttKind, snr: Option<f64>, seed: u64) -> Result<Vec<AudioBuffer>> {
    condition_clips(manifest, kind, snr, seed, &loaded.cfg.sim, &loaded.cfg.model.spectro)
}

#[allow(clippy::too_many_arguments)]
fn eval_roc(
    checkpoint: &Path,
    manifest: &Path,
    snr: Option<f64>,
    seed: u64,
    smooth: usize,
    list: Option<&Path>,
    out: &Path,
    summary: Option<PathBuf>,
) -> Result<()> {
    let loaded = LoadedModel::load(checkpoint, RunMode::Inference)?;
    let m = Manifest::load(manifest)?;
    let bias = inference_bias(&loaded, list, &m)?;
    let pos_clips = test_clips(&loaded, &m, UttKind::Keyword, snr, seed)?;
    let neg_clips = test_clips(&loaded, &m, UttKind::Negative, snr, seed ^ 0x5EED)?;
    let pos = score_clips(&loaded.model, &pos_clips, bias.as_ref(), smooth)?;
    let neg = score_clips(&loaded.model, &neg_clips, bias.as_ref(), smooth)?;
    let hours = neg_clips.iter().map(|a| a.duration_s()).sum::<f64>() / 3600.0;
    let roc = roc_curve(&pos, &neg, Some(hours))?;
    std::fs::write(out, roc_tsv(&roc))?;
    write_resolved(&loaded, out)?;
    let area = auc(&pos, &neg)?;
    let summary_path = summary.unwrap_or_else(|| out.with_extension("json"));
    let s = serde_json::json!({
        "checkpoint": checkpoint,
        "manifest": manifest,
        "snr_db": snr,
        "seed": seed,
        "smooth_win": smooth,
        "positives": pos.len(),
        "negatives": neg.len(),
        "negative_hours": hours,
        "auc": area,
        "fa_axis": "per_utterance",
    });
    std::fs::write(&summary_path, serde_json::to_string_pretty(&s)? + "\n")?;
    println!("auc\t{area:.6}\tpositives\t{}\tnegatives\t{}", pos.len(), neg.len());
    Ok(())
}

pub fn roc_tsv(roc: &[RocPoint]) -> String {
    let mut s = String::from("threshold\tfalse_reject_rate\tfalse_alarm_rate\tfalse_alarms_per_hour\n");
    for p in roc {
        let _ = writeln!(
            s,
            "{}\t{:.6}\t{:.6}\t{}",
            p.threshold,
            p.false_reject_rate,
            p.false_alarm_rate,
            p.false_alarms_per_hour.map_or("-".into(), |v| format!("{v:.4}"))
        );
    }
    s
}

pub fn roc_from_tsv(text: &str) -> Result<Vec<RocPoint>> {
    text.lines()
        .skip(1)
        .enumerate()
        .map(|(i, l)| {
            let f: Vec<&str> = l.split('\t').collect();
            let bad = || Error::InvalidInput(format!("roc table line {} is malformed", i + 2));
            if f.len() != 4 {
                return Err(bad());
            }
            Ok(RocPoint {
                threshold: f[0].parse().map_err(|_| bad())?,
                false_reject_rate: f[1].parse().map_err(|_| bad())?,
                false_alarm_rate: f[2].parse().map_err(|_| bad())?,
                false_alarms_per_hour: if f[3] == "-" { None } else { Some(f[3].parse().map_err(|_| bad())?) },
            })
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn eval_wake(
    checkpoint: &Path,
    manifest: &Path,
    snrs: &str,
    seed: u64,
    smooth: usize,
    refractory: usize,
    list: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let loaded = LoadedModel::load(checkpoint, RunMode::Inference)?;
    let m = Manifest::load(manifest)?;
    let bias = inference_bias(&loaded, list, &m)?;
    let snrs: Vec<f64> = snrs
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::InvalidInput(format!("bad SNR `{s}`")))
        })
        .collect::<Result<_>>()?;
    let mut reports = Vec::new();
    for &snr in &snrs {
        let pos_clips = test_clips(&loaded, &m, UttKind::Keyword, Some(snr), seed)?;
        let neg_clips = test_clips(&loaded, &m, UttKind::Negative, Some(snr), seed ^ 0x5EED)?;
        let pos = score_clips(&loaded.model, &pos_clips, bias.as_ref(), smooth)?;
        // the negatives form one continuous stream
        let stream: Vec<f32> = neg_clips.iter().flat_map(|a| a.samples.iter().copied()).collect();
        let stream = AudioBuffer::new(stream, loaded.cfg.model.spectro.sample_rate)?;
        let post = crate::evaluate::clip_posterior(&loaded.model, &stream, bias.as_ref())?;
        let hours = stream.duration_s() / 3600.0;
        let r = wake_accuracy(&pos, &[post], hours, smooth, refractory)?;
        println!(
            "snr_db\t{snr}\taccuracy\t{:.4}\tthreshold\t{:.4}\tfalse_alarms\t{}\tbudget\t{}\tbudget_met\t{}",
            r.accuracy, r.threshold, r.false_alarms, r.budget, r.budget_met
        );
        reports.push(serde_json::json!({ "snr_db": snr, "report": r }));
    }
    let s = serde_json::json!({
        "checkpoint": checkpoint,
        "manifest": manifest,
        "seed": seed,
        "smooth_win": smooth,
        "refractory": refractory,
        "conditions": reports,
    });
    std::fs::write(out, serde_json::to_string_pretty(&s)? + "\n")?;
    write_resolved(&loaded, out)?;
    Ok(())
}

fn stream(checkpoint: &Path, wav: Option<&Path>, threshold: f32, smooth: usize, refractory: usize, chunk_ms: f64) -> Result<()> {
    let loaded = LoadedModel::load(checkpoint, RunMode::Inference)?;
    let spectro = &loaded.cfg.model.spectro;
    let rate = spectro.sample_rate;
    let samples = match wav {
        Some(p) => read_wav(p, Some(rate))?.samples,
        None => {
            let mut raw = Vec::new();
            std::io::stdin().read_to_end(&mut raw)?;
            raw.chunks_exact(2)
                .map(|b| i16::from_le_bytes([b[0], b[1]]) as f32 / 32768.0)
                .collect()
        }
    };
    let mut det = StreamingDetector::new(&loaded.model, loaded.bias(None)?);
    let chunk = ((chunk_ms / 1000.0) * rate as f64).round().max(1.0) as usize;
    let mut post = Vec::new();
    let mut reported = 0usize;
    let fps = spectro.frames_per_second();
    for c in samples.chunks(chunk) {
        post.extend(det.push(c)?);
        // detections are causal, so earlier ones never change
        let dets = smooth_and_decide(&post, threshold, smooth, refractory);
        for d in &dets[reported..] {
            println!("{}\t{:.3}\t{:.4}", d.frame, d.frame as f64 / fps, d.score);
        }
        reported = dets.len();
    }
    Ok(())
}

fn bench(
    checkpoint: Option<&Path>,
    preset: &str,
    wav: Option<&Path>,
    seconds: f64,
    warmup: f64,
    chunk_ms: f64,
    out: Option<&Path>,
) -> Result<()> {
    force_single_thread();
    let mut runs: Vec<(String, ModelConfig, Option<LoadedModel>)> = Vec::new();
    match checkpoint {
        Some(p) => {
            let l = LoadedModel::load(p, RunMode::Inference)?;
            runs.push(("checkpoint".into(), l.cfg.model.clone(), Some(l)));
        }
        None => {
            let base = RunConfig::preset(preset)?.train.model;
            for (n, c) in rtf_suite(&base) {
                runs.push((n, c, None));
            }
        }
    }
    let mut reports: Vec<RtfReport> = Vec::new();
    for (name, cfg, loaded) in runs {
        let rate = cfg.spectro.sample_rate;
        let audio = match wav {
            Some(p) => read_wav(p, Some(rate))?,
            None => bench_audio(rate, seconds),
        };
        let r = match loaded {
            Some(l) => rtf_benchmark(&name, &l.model, l.bias(None)?, &audio, warmup, chunk_ms)?,
            None => {
                let (_store, model, bias) = random_inference_model(&cfg, 0)?;
                rtf_benchmark(&name, &model, bias, &audio, warmup, chunk_ms)?
            }
        };
        println!("{}\trtf\t{:.5}\taudio_s\t{:.1}\telapsed_s\t{:.3}", r.name, r.rtf, r.audio_s, r.elapsed_s);
        reports.push(r);
    }
    if let Some(p) = out {
        std::fs::write(p, serde_json::to_string_pretty(&reports)? + "\n")?;
    }
    Ok(())
}

/// Deterministic benchmark signal: low-level noise with tone bursts.
pub fn bench_audio(rate: u32, seconds: f64) -> AudioBuffer {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
    let n = (seconds * rate as f64) as usize;
    let samples = (0..n)
        .map(|i| {
            let t = i as f64 / rate as f64;
            let burst = if (t % 2.0) < 0.6 { 0.3 * (2.0 * std::f64::consts::PI * 300.0 * t).sin() } else { 0.0 };
            (burst + 0.02 * rng.random_range(-1.0..1.0)) as f32
        })
        .collect();
    AudioBuffer { samples, sample_rate: rate }
}

fn plot(energy: Option<&Path>, span: Option<&str>, roc: &[PathBuf], out: &Path) -> Result<()> {
    let svg = match energy {
        Some(p) => {
            let table = EnergyTable::from_tsv(&std::fs::read_to_string(p)?)?;
            let span = span
                .map(|s| {
                    let (a, b) = s
                        .split_once(':')
                        .ok_or_else(|| Error::InvalidInput("span must be start:end".into()))?;
                    let parse = |v: &str| {
                        v.parse::<usize>()
                            .map_err(|_| Error::InvalidInput(format!("bad span bound `{v}`")))
                    };
                    Ok::<_, Error>((parse(a)?, parse(b)?))
                })
                .transpose()?;
            energy_svg(&table, span)
        }
        None => {
            if roc.is_empty() {
                return Err(Error::InvalidInput("plot needs --energy or --roc".into()));
            }
            let curves = roc
                .iter()
                .map(|p| {
                    let name = p.file_stem().map_or("roc".into(), |s| s.to_string_lossy().into_owned());
                    Ok((name, roc_from_tsv(&std::fs::read_to_string(p)?)?))
                })
                .collect::<Result<Vec<_>>>()?;
            roc_svg(&curves)
        }
    };
    std::fs::write(out, svg)?;
    Ok(())
}
