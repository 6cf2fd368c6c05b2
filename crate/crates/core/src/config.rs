//! Flat `key = value` run configuration with typed values.
//!
//! Lines are `key = value`; `#` starts a comment. `preset` (`toy` or
//! `full`) is applied first wherever it appears, then every other key
//! overrides it. Unknown keys and malformed values are rejected with the
//! offending line. Paths are resolved against the file's directory.

use crate::context_bias::BiasMode;
use crate::error::{Error, Result};
use crate::kws_head::ProjectionMode;
use crate::model::Backbone;
use crate::train::TrainConfig;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

/// Directory searched for relative config paths that do not exist in the
/// working directory.
pub const CONFIG_DIR_ENV: &str = "DCCRN_KWS_CONFIG_DIR";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub preset: String,
    pub train: TrainConfig,
    pub train_manifest: Option<PathBuf>,
    pub test_manifest: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let train = match name {
            "toy" => TrainConfig::toy(),
            "full" => TrainConfig::full(),
            other => return Err(Error::Config(format!("unknown preset `{other}` (expected toy or full)"))),
        };
        Ok(Self {
            preset: name.to_string(),
            train,
            train_manifest: None,
            test_manifest: None,
            out_dir: None,
        })
    }

    /// Locates a config path, falling back to [`CONFIG_DIR_ENV`].
    pub fn locate(path: &Path) -> PathBuf {
        if path.exists() || path.is_absolute() {
            return path.to_path_buf();
        }
        match std::env::var_os(CONFIG_DIR_ENV) {
            Some(dir) => {
                let alt = Path::new(&dir).join(path);
                if alt.exists() {
                    alt
                } else {
                    path.to_path_buf()
                }
            }
            None => path.to_path_buf(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let path = Self::locate(path);
        let text = std::fs::read_to_string(&path)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &path, &base)
    }

    pub fn parse(text: &str, path: &Path, base: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::ConfigKey {
                    path: path.to_path_buf(),
                    line: i + 1,
                    key: line.to_string(),
                    message: "expected `key = value`".into(),
                });
            };
            entries.push((i + 1, k.trim().to_string(), v.trim().to_string()));
        }
        let preset = match entries.iter().filter(|e| e.1 == "preset").collect::<Vec<_>>()[..] {
            [] => "toy".to_string(),
            [(_, _, v)] => v.clone(),
            [_, (line, _, _), ..] => {
                return Err(Error::ConfigKey {
                    path: path.to_path_buf(),
                    line: *line,
                    key: "preset".into(),
                    message: "preset given twice".into(),
                })
            }
        };
        let preset_line = entries.iter().find(|e| e.1 == "preset").map_or(0, |e| e.0);
        let mut cfg = Self::preset(&preset).map_err(|e| Error::ConfigKey {
            path: path.to_path_buf(),
            line: preset_line,
            key: "preset".into(),
            message: e.to_string(),
        })?;
        let mut seen = std::collections::HashSet::new();
        for (line, key, value) in &entries {
            let wrap = |message: String| Error::ConfigKey {
                path: path.to_path_buf(),
                line: *line,
                key: key.clone(),
                message,
            };
            if !seen.insert(key.clone()) {
                return Err(wrap("key given twice".into()));
            }
            if key == "preset" {
                continue;
            }
            cfg.set(key, value, base).map_err(wrap)?;
        }
        cfg.resolve();
        cfg.train.validate()?;
        Ok(cfg)
    }

    /// Derives the sizes that follow from others (encoder input bins and
    /// the keyword head's part size).
    pub fn resolve(&mut self) {
        let m = &mut self.train.model;
        m.encoder.input_bins = m.spectro.encoder_bins();
        if let Ok(shapes) = m.encoder.shape_ledger() {
            if let Some(last) = shapes.last() {
                m.kws.part_dim = last.flat_per_part();
            }
        }
    }

    fn set(&mut self, key: &str, value: &str, base: &Path) -> std::result::Result<(), String> {
        let t = &mut self.train;
        let m = &mut t.model;
        match key {
            "iterations" => t.iterations = num(value)?,
            "batch_size" => t.batch_size = num(value)?,
            "batch_ratio" => {
                let (p, n) = value.split_once(':').ok_or("expected `positives:negatives`")?;
                t.batch_ratio = (num(p.trim())?, num(n.trim())?);
            }
            "noam_factor" => t.noam_factor = num(value)?,
            "warmup" => t.warmup = num(value)?,
            "d_model" => t.d_model = num(value)?,
            "adam_beta1" => t.adam_beta1 = num(value)?,
            "adam_beta2" => t.adam_beta2 = num(value)?,
            "adam_eps" => t.adam_eps = num(value)?,
            "seed" => t.seed = num(value)?,
            "bias_list_size" => t.bias_list_size = num(value)?,
            "checkpoint_every" => t.checkpoint_every = num(value)?,
            "norm_batches" => t.norm_batches = num(value)?,
            "snr_min_db" => t.sim.snr_range_db.0 = num(value)?,
            "snr_max_db" => t.sim.snr_range_db.1 = num(value)?,
            "rt60_min_s" => t.sim.rt60_range_s.0 = num(value)?,
            "rt60_max_s" => t.sim.rt60_range_s.1 = num(value)?,
            "reverb_prob" => t.sim.reverb_prob = num(value)?,
            "noise_types_min" => t.sim.noise_types.0 = num(value)?,
            "noise_types_max" => t.sim.noise_types.1 = num(value)?,
            "clip_negatives" => t.sim.clip_negatives = flag(value)?,
            "sample_rate" => m.spectro.sample_rate = num(value)?,
            "win_ms" => m.spectro.win_ms = num(value)?,
            "hop_ms" => m.spectro.hop_ms = num(value)?,
            "fft_size" => m.spectro.fft_size = num(value)?,
            "backbone" => {
                m.backbone = match value {
                    "dccrn" => Backbone::Dccrn,
                    "kws_only" => Backbone::KwsOnly,
                    _ => return Err("expected dccrn or kws_only".into()),
                }
            }
            "encoder_channels" => m.encoder.channels = list(value)?,
            "encoder_kernel" => m.encoder.kernel_f = num(value)?,
            "lstm_hidden" => m.bottleneck.hidden = num(value)?,
            "lstm_layers" => m.bottleneck.layers = num(value)?,
            "lstm_proj" => m.bottleneck.proj = num(value)?,
            "kws_dim" => m.kws.kws_dim = num(value)?,
            "kws_blocks" => m.kws.blocks = num(value)?,
            "kws_kernel" => m.kws.kernel = num(value)?,
            "kws_context" => m.kws.context = num(value)?,
            "dilation_cycle" => m.kws.dilation_cycle = list(value)?,
            "projection" => m.projection = ProjectionMode::from_str(value).map_err(|e| e.to_string())?,
            "bias_mode" => m.bias_mode = BiasMode::from_str(value).map_err(|e| e.to_string())?,
            "feature_merge" => m.feature_merge = flag(value)?,
            "ecapa_mels" => m.extractor.n_mels = num(value)?,
            "ecapa_channels" => m.extractor.channels = num(value)?,
            "ecapa_attention" => m.extractor.attention = num(value)?,
            "train_manifest" => self.train_manifest = Some(base.join(value)),
            "test_manifest" => self.test_manifest = Some(base.join(value)),
            "out_dir" => self.out_dir = Some(base.join(value)),
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    /// Every key with its resolved value, loadable by [`RunConfig::parse`].
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let m = &t.model;
        let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let onoff = |b: bool| if b { "on" } else { "off" };
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("preset", self.preset.clone());
        kv("iterations", t.iterations.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("batch_ratio", format!("{}:{}", t.batch_ratio.0, t.batch_ratio.1));
        kv("noam_factor", t.noam_factor.to_string());
        kv("warmup", t.warmup.to_string());
        kv("d_model", t.d_model.to_string());
        kv("adam_beta1", t.adam_beta1.to_string());
        kv("adam_beta2", t.adam_beta2.to_string());
        kv("adam_eps", t.adam_eps.to_string());
        kv("seed", t.seed.to_string());
        kv("bias_list_size", t.bias_list_size.to_string());
        kv("checkpoint_every", t.checkpoint_every.to_string());
        kv("norm_batches", t.norm_batches.to_string());
        kv("snr_min_db", t.sim.snr_range_db.0.to_string());
        kv("snr_max_db", t.sim.snr_range_db.1.to_string());
        kv("rt60_min_s", t.sim.rt60_range_s.0.to_string());
        kv("rt60_max_s", t.sim.rt60_range_s.1.to_string());
        kv("reverb_prob", t.sim.reverb_prob.to_string());
        kv("noise_types_min", t.sim.noise_types.0.to_string());
        kv("noise_types_max", t.sim.noise_types.1.to_string());
        kv("clip_negatives", onoff(t.sim.clip_negatives).into());
        kv("sample_rate", m.spectro.sample_rate.to_string());
        kv("win_ms", m.spectro.win_ms.to_string());
        kv("hop_ms", m.spectro.hop_ms.to_string());
        kv("fft_size", m.spectro.fft_size.to_string());
        kv(
            "backbone",
            match m.backbone {
                Backbone::Dccrn => "dccrn",
                Backbone::KwsOnly => "kws_only",
            }
            .into(),
        );
        kv("encoder_channels", join(&m.encoder.channels));
        kv("encoder_kernel", m.encoder.kernel_f.to_string());
        kv("lstm_hidden", m.bottleneck.hidden.to_string());
        kv("lstm_layers", m.bottleneck.layers.to_string());
        kv("lstm_proj", m.bottleneck.proj.to_string());
        kv("kws_dim", m.kws.kws_dim.to_string());
        kv("kws_blocks", m.kws.blocks.to_string());
        kv("kws_kernel", m.kws.kernel.to_string());
        kv("kws_context", m.kws.context.to_string());
        kv("dilation_cycle", join(&m.kws.dilation_cycle));
        kv("projection", m.projection.to_string());
        kv("bias_mode", m.bias_mode.to_string());
        kv("feature_merge", onoff(m.feature_merge).into());
        kv("ecapa_mels", m.extractor.n_mels.to_string());
        kv("ecapa_channels", m.extractor.channels.to_string());
        kv("ecapa_attention", m.extractor.attention.to_string());
        for (k, p) in [
            ("train_manifest", &self.train_manifest),
            ("test_manifest", &self.test_manifest),
            ("out_dir", &self.out_dir),
        ] {
            if let Some(p) = p {
                kv(k, p.display().to_string());
            }
        }
        s
    }
}

fn num<T: FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse `{v}` as {}", std::any::type_name::<T>()))
}

fn flag(v: &str) -> std::result::Result<bool, String> {
    match v {
        "on" | "true" | "yes" | "1" => Ok(true),
        "off" | "false" | "no" | "0" => Ok(false),
        _ => Err(format!("expected on/off, got `{v}`")),
    }
}

fn list(v: &str) -> std::result::Result<Vec<usize>, String> {
    v.split(',').map(|x| num(x.trim())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfig> {
        RunConfig::parse(text, Path::new("run.conf"), Path::new("/data"))
    }

    #[test]
    fn overrides_apply_over_preset() {
        let c = parse("# toy run\niterations = 50\nprojection = plain\nfeature_merge = off\ntrain_manifest = a/train.jsonl\npreset = toy\n").unwrap();
        assert_eq!(c.train.iterations, 50);
        assert_eq!(c.train.model.projection, ProjectionMode::Plain);
        assert!(!c.train.model.feature_merge);
        assert_eq!(c.train_manifest.unwrap(), PathBuf::from("/data/a/train.jsonl"));
    }

    #[test]
    fn unknown_key_names_line() {
        let err = parse("iterations = 5\n\nlearning_rate = 3\n").unwrap_err();
        match &err {
            Error::ConfigKey { line, key, .. } => {
                assert_eq!(*line, 3);
                assert_eq!(key, "learning_rate");
            }
            other => panic!("{other:?}"),
        }
        assert!(err.to_string().contains("run.conf:3"));
    }

    #[test]
    fn bad_value_and_duplicate_rejected() {
        assert!(matches!(parse("warmup = soon\n"), Err(Error::ConfigKey { line: 1, .. })));
        assert!(matches!(parse("seed = 1\nseed = 2\n"), Err(Error::ConfigKey { line: 2, .. })));
        assert!(parse("no equals sign\n").is_err());
    }

    #[test]
    fn resolved_text_round_trips() {
        let mut c = parse("encoder_channels = 8,8,8\n").unwrap();
        assert_eq!(c.train.model.kws.part_dim, 8);
        c.out_dir = Some(PathBuf::from("/data/out"));
        let again = parse(&c.to_text()).unwrap();
        assert_eq!(again, c);
    }
}
