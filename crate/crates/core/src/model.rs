//! The assembled multi-task network and its configuration presets.

use crate::audio_dsp::{stft, AudioBuffer, ComplexSpectrogram, SpectroConfig};
use crate::context_bias::{BiasMode, ContextBias, ExtractorConfig};
use crate::dccrn::{
    apply_mask, frame_energy, spectrogram_batch, BottleneckConfig, Decoder, Encoder, EncoderConfig,
    EncoderFeatureStack, EncoderState, Reconstructor,
};
use crate::error::{invalid, shape_err, Error, Result};
use crate::feature_merge::FeatureMerge;
use crate::kws_head::{keyword_posterior, Dtc, DtcState, KwsConfig, Projection, ProjectionMode};
use crate::nn::layers::relu;
use crate::nn::{Linear, ParamStore};
use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Front-end feeding the keyword head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    /// Shared complex encoder (with the enhancement decoder in training).
    Dccrn,
    /// Baseline keyword spotter on log power spectra, without the encoder.
    KwsOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub spectro: SpectroConfig,
    pub backbone: Backbone,
    pub encoder: EncoderConfig,
    pub bottleneck: BottleneckConfig,
    pub kws: KwsConfig,
    pub projection: ProjectionMode,
    pub bias_mode: BiasMode,
    pub extractor: ExtractorConfig,
    pub feature_merge: bool,
}

impl ModelConfig {
    /// Published geometry at 16 kHz.
    pub fn full() -> Self {
        Self {
            spectro: SpectroConfig::default(),
            backbone: Backbone::Dccrn,
            encoder: EncoderConfig::default(),
            bottleneck: BottleneckConfig::default(),
            kws: KwsConfig::default(),
            projection: ProjectionMode::Ccl,
            bias_mode: BiasMode::Fixed,
            extractor: ExtractorConfig::default(),
            feature_merge: true,
        }
    }

    /// Reduced model on the 1.6 kHz toy front-end (16 encoder bins).
    pub fn toy() -> Self {
        Self {
            spectro: SpectroConfig::toy(),
            backbone: Backbone::Dccrn,
            encoder: EncoderConfig {
                input_bins: 16,
                channels: vec![8, 8],
                ..EncoderConfig::default()
            },
            bottleneck: BottleneckConfig {
                hidden: 16,
                layers: 1,
                proj: 16,
            },
            kws: KwsConfig {
                part_dim: 16,
                kws_dim: 32,
                blocks: 8,
                ..KwsConfig::default()
            },
            projection: ProjectionMode::Ccl,
            bias_mode: BiasMode::Fixed,
            extractor: ExtractorConfig::toy(),
            feature_merge: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.spectro.validate()?;
        self.kws.validate()?;
        if self.encoder.input_bins != self.spectro.encoder_bins() {
            return Err(Error::Config(format!(
                "encoder expects {} bins, front-end yields {}",
                self.encoder.input_bins,
                self.spectro.encoder_bins()
            )));
        }
        if self.backbone == Backbone::Dccrn {
            let shapes = self.encoder.shape_ledger()?;
            let part = shapes.last().expect("non-empty").flat_per_part();
            if part != self.kws.part_dim {
                return Err(Error::Config(format!(
                    "final encoder layer flattens to {part} per part, keyword head expects {}",
                    self.kws.part_dim
                )));
            }
        }
        if self.kws.bias_dim != crate::context_bias::EMBEDDING_DIM {
            return Err(Error::Config("bias dimension must match the embedding size".into()));
        }
        Ok(())
    }

    /// Short stable digest of the configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialises");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn uses_bias(&self) -> bool {
        self.projection.uses_bias()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMode {
    Train,
    Inference,
}

/// Per-stream causal state.
#[derive(Debug, Clone, Default)]
pub struct StreamState {
    pub encoder: EncoderState,
    pub projection: Option<(Tensor, Tensor)>,
    pub dtc: DtcState,
    pub frames: usize,
}

/// Training-mode forward results.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    /// Keyword posterior `[B, T]`.
    pub posterior: Tensor,
    /// Enhanced waveform `[B, N]`.
    pub enhanced: Option<Tensor>,
}

#[derive(Debug, Clone)]
pub struct DccrnKws {
    pub cfg: ModelConfig,
    pub mode: RunMode,
    encoder: Option<Encoder>,
    decoder: Option<Decoder>,
    reconstructor: Option<Reconstructor>,
    merge: Option<FeatureMerge>,
    pub bias: Option<ContextBias>,
    baseline_input: Option<Linear>,
    projection: Option<Projection>,
    dtc: Dtc,
}

impl DccrnKws {
    /// Builds the network, registering parameters in `store`. In inference
    /// mode the enhancement branch is not constructed.
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, mode: RunMode) -> Result<Self> {
        cfg.validate()?;
        let bias = if cfg.uses_bias() {
            Some(ContextBias::new(store, "bias", cfg.bias_mode, &cfg.extractor)?)
        } else {
            None
        };
        let (encoder, decoder, reconstructor, merge, baseline_input, projection) = match cfg.backbone {
            Backbone::Dccrn => {
                let encoder = Encoder::new(store, "encoder", &cfg.encoder)?;
                let (decoder, reconstructor) = if mode == RunMode::Train {
                    (
                        Some(Decoder::new(store, "decoder", &cfg.encoder, &cfg.bottleneck)?),
                        Some(Reconstructor::new(&cfg.spectro, store.dtype(), store.device())?),
                    )
                } else {
                    (None, None)
                };
                let merge = if cfg.feature_merge {
                    Some(FeatureMerge::new(store, "merge", encoder.shapes())?)
                } else {
                    None
                };
                let projection = Projection::new(store, "proj", cfg.projection, &cfg.kws)?;
                (Some(encoder), decoder, reconstructor, merge, None, Some(projection))
            }
            Backbone::KwsOnly => {
                let lin = Linear::new(store, "baseline_in", cfg.encoder.input_bins, cfg.kws.kws_dim, true)?;
                (None, None, None, None, Some(lin), None)
            }
        };
        let dtc = Dtc::new(store, "dtc", &cfg.kws)?;
        Ok(Self {
            cfg: cfg.clone(),
            mode,
            encoder,
            decoder,
            reconstructor,
            merge,
            bias,
            baseline_input,
            projection,
            dtc,
        })
    }

    pub fn encoder(&self) -> Option<&Encoder> {
        self.encoder.as_ref()
    }

    pub fn merge(&self) -> Option<&FeatureMerge> {
        self.merge.as_ref()
    }

    pub fn projection(&self) -> Option<&Projection> {
        self.projection.as_ref()
    }

    pub fn dtc(&self) -> &Dtc {
        &self.dtc
    }

    /// Full-band spectrogram batch `[B, T, bins, 2]` for the given clips.
    pub fn spectra(&self, specs: &[&ComplexSpectrogram], dtype: DType, device: &Device) -> Result<Tensor> {
        spectrogram_batch(specs, false, dtype, device)
    }

    fn encoder_input(full: &Tensor) -> Result<Tensor> {
        let bins = full.dims()[2];
        Ok(full.narrow(2, 1, bins - 1)?.contiguous()?)
    }

    /// Encoder stack for a full-band spectrum.
    pub fn encode(&self, full: &Tensor, train: bool, state: Option<&mut EncoderState>) -> Result<EncoderFeatureStack> {
        let enc = self
            .encoder
            .as_ref()
            .ok_or_else(|| Error::InvalidInput("keyword-only baseline has no encoder".into()))?;
        enc.forward(&Self::encoder_input(full)?, train, state)
    }

    /// Merged (or final-layer) feature `(real, imag)`, each `[B, T, part]`.
    pub fn merged_feature(&self, stack: &EncoderFeatureStack) -> Result<(Tensor, Tensor)> {
        match &self.merge {
            Some(m) => m.forward(stack),
            None => stack.last().flatten_parts(),
        }
    }

    fn check_bias(&self, bias: Option<&Tensor>) -> Result<()> {
        match (self.cfg.uses_bias(), bias) {
            (true, None) => invalid("this model needs a bias embedding"),
            (false, Some(_)) => invalid("this model takes no bias embedding"),
            _ => Ok(()),
        }
    }

    fn head_from_stack(
        &self,
        stack: &EncoderFeatureStack,
        bias: Option<&Tensor>,
        train: bool,
        state: Option<&mut StreamState>,
    ) -> Result<Tensor> {
        let (r, i) = self.merged_feature(stack)?;
        let proj = self.projection.as_ref().expect("dccrn backbone has a projection");
        match state {
            Some(st) => {
                let x = proj.forward(&r, &i, bias, st.projection.as_ref())?;
                let need = proj.history_len();
                if need > 0 {
                    let (hr, hi) = match st.projection.take() {
                        Some((hr, hi)) => (Tensor::cat(&[&hr, &r], 1)?, Tensor::cat(&[&hi, &i], 1)?),
                        None => {
                            let (b, _, d) = r.dims3()?;
                            let z = Tensor::zeros((b, need, d), r.dtype(), r.device())?;
                            (Tensor::cat(&[&z, &r], 1)?, Tensor::cat(&[&z, &i], 1)?)
                        }
                    };
                    let len = hr.dims()[1];
                    st.projection = Some((
                        hr.narrow(1, len - need, need)?.detach(),
                        hi.narrow(1, len - need, need)?.detach(),
                    ));
                }
                keyword_posterior(&self.dtc.forward(&x, train, Some(&mut st.dtc))?)
            }
            None => {
                let x = proj.forward(&r, &i, bias, None)?;
                keyword_posterior(&self.dtc.forward(&x, train, None)?)
            }
        }
    }

    fn baseline_posterior(&self, full: &Tensor, train: bool, state: Option<&mut StreamState>) -> Result<Tensor> {
        let x = Self::encoder_input(full)?;
        let power = (x.narrow(3, 0, 1)?.sqr()? + x.narrow(3, 1, 1)?.sqr()?)?.squeeze(3)?;
        let feats = (power + 1e-8)?.log()?;
        let h = relu(&self.baseline_input.as_ref().expect("baseline input").forward(&feats)?)?;
        keyword_posterior(&self.dtc.forward(&h, train, state.map(|s| &mut s.dtc))?)
    }

    /// Keyword posterior `[B, T]`. With `state`, the chunk continues the
    /// stream held there.
    pub fn posterior(
        &self,
        full: &Tensor,
        bias: Option<&Tensor>,
        train: bool,
        mut state: Option<&mut StreamState>,
    ) -> Result<Tensor> {
        self.check_bias(bias)?;
        if let Some(st) = state.as_deref_mut() {
            st.frames += full.dims()[1];
        }
        match self.cfg.backbone {
            Backbone::KwsOnly => self.baseline_posterior(full, train, state),
            Backbone::Dccrn => {
                let stack = match state.as_deref_mut() {
                    Some(st) => self.encode(full, train, Some(&mut st.encoder))?,
                    None => self.encode(full, train, None)?,
                };
                self.head_from_stack(&stack, bias, train, state)
            }
        }
    }

    /// Enhancement mask applied to the noisy spectrum and resynthesised,
    /// `[B, N]`. Unavailable in inference mode.
    pub fn enhance(&self, stack: &EncoderFeatureStack, full: &Tensor, train: bool) -> Result<Tensor> {
        let (Some(dec), Some(rec)) = (&self.decoder, &self.reconstructor) else {
            return Err(Error::InferenceMode("the enhancement decoder is not part of the inference graph"));
        };
        let mask = dec.forward(stack, train)?;
        let (er, ei) = apply_mask(&mask, full)?;
        rec.istft(&er, &ei)
    }

    /// Both branches for training.
    pub fn forward_train(&self, full: &Tensor, bias: Option<&Tensor>, train: bool) -> Result<TrainOutput> {
        self.check_bias(bias)?;
        match self.cfg.backbone {
            Backbone::KwsOnly => Ok(TrainOutput {
                posterior: self.baseline_posterior(full, train, None)?,
                enhanced: None,
            }),
            Backbone::Dccrn => {
                let stack = self.encode(full, train, None)?;
                let enhanced = if self.mode == RunMode::Train {
                    Some(self.enhance(&stack, full, train)?)
                } else {
                    None
                };
                Ok(TrainOutput {
                    posterior: self.head_from_stack(&stack, bias, train, None)?,
                    enhanced,
                })
            }
        }
    }

    /// Per-layer frame energies and the merged-feature energy for one clip:
    /// rows are layers (shallowest first) then the merged feature.
    pub fn energy_table(&self, audio: &AudioBuffer, dtype: DType, device: &Device) -> Result<Vec<Vec<f64>>> {
        let spec = stft(audio, &self.cfg.spectro)?;
        let full = self.spectra(&[&spec], dtype, device)?;
        let stack = self.encode(&full, false, None)?;
        let mut rows = Vec::with_capacity(stack.layers.len() + 1);
        for layer in &stack.layers {
            rows.push(to_f64_row(&frame_energy(layer)?)?);
        }
        let (r, i) = self.merged_feature(&stack)?;
        rows.push(to_f64_row(&crate::feature_merge::merged_energy(&r, &i)?)?);
        Ok(rows)
    }
}

fn to_f64_row(t: &Tensor) -> Result<Vec<f64>> {
    let v = t.to_dtype(DType::F64)?.squeeze(0)?.to_vec1::<f64>()?;
    Ok(v)
}

/// `[B, T]` posterior tensor to per-clip vectors.
pub fn posterior_rows(post: &Tensor) -> Result<Vec<Vec<f32>>> {
    if post.rank() != 2 {
        return shape_err("posterior [B, T]", &[0, 0], post.dims());
    }
    Ok(post.to_dtype(DType::F32)?.to_vec2::<f32>()?)
}
