//! Python bindings: loss and schedule helpers, toy data generation and a
//! keyword detector backed by a trained checkpoint.

use candle_core::Tensor;
use dccrn_kws::audio_dsp::AudioBuffer;
use dccrn_kws::evaluate::{clip_posterior, StreamingDetector, DEFAULT_REFRACTORY, DEFAULT_SMOOTH_WIN};
use dccrn_kws::kws_head::smooth_and_decide;
use dccrn_kws::losses;
use dccrn_kws::model::RunMode;
use dccrn_kws::simulate::toy::{write_toy_corpus, ToyCorpusConfig};
use dccrn_kws::simulate::{label_frames, measure_snr_db, POSITIVE_WINDOW};
use dccrn_kws::train::LoadedModel;
use dccrn_kws::Error;
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use std::path::PathBuf;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::InvalidInput(_) | Error::Shape { .. } | Error::Config(_) | Error::ConfigKey { .. } => {
            PyValueError::new_err(e.to_string())
        }
        Error::Io(_) => PyOSError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// SI-SNR in dB of `estimate` against `reference`.
#[pyfunction]
fn si_snr(estimate: Vec<f32>, reference: Vec<f32>) -> PyResult<f64> {
    losses::si_snr(&estimate, &reference).map_err(to_py)
}

/// Noam learning rate at `step` (counted from 1).
#[pyfunction]
#[pyo3(signature = (step, factor = 5.0, d_model = 128, warmup = 1000))]
fn noam_lr(step: usize, factor: f64, d_model: usize, warmup: usize) -> PyResult<f64> {
    losses::noam_lr(step, factor, d_model, warmup).map_err(to_py)
}

/// SNR in dB over the speech-active region.
#[pyfunction]
fn snr_db(speech: Vec<f32>, noise: Vec<f32>, sample_rate: u32) -> PyResult<f64> {
    measure_snr_db(&speech, &noise, sample_rate).map_err(to_py)
}

/// Frame label codes (1 positive, 0 negative, -1 ignore) for a clip of
/// `frames` frames whose keyword ends at `end_frame` (`None` for a negative).
#[pyfunction]
#[pyo3(signature = (frames, end_frame = None))]
fn frame_labels(frames: usize, end_frame: Option<usize>) -> PyResult<Vec<i8>> {
    let track = label_frames(end_frame, frames, POSITIVE_WINDOW).map_err(to_py)?;
    Ok(track.labels.iter().map(|l| l.code()).collect())
}

/// Writes the synthetic toy corpus and returns `(train_manifest, test_manifest)`.
#[pyfunction]
#[pyo3(signature = (out_dir, seed = 7))]
fn toy_corpus(out_dir: PathBuf, seed: u64) -> PyResult<(PathBuf, PathBuf)> {
    let cfg = ToyCorpusConfig {
        seed,
        ..ToyCorpusConfig::default()
    };
    write_toy_corpus(&out_dir, &cfg).map_err(to_py)?;
    Ok((out_dir.join("train.jsonl"), out_dir.join("test.jsonl")))
}

/// Inference graph of a trained checkpoint.
#[pyclass(unsendable)]
struct Detector {
    loaded: LoadedModel,
    bias: Option<Tensor>,
}

#[pymethods]
impl Detector {
    #[new]
    fn new(checkpoint: PathBuf) -> PyResult<Self> {
        let loaded = LoadedModel::load(&checkpoint, RunMode::Inference).map_err(to_py)?;
        let bias = loaded.bias(None).map_err(to_py)?;
        Ok(Self { loaded, bias })
    }

    #[getter]
    fn sample_rate(&self) -> u32 {
        self.loaded.cfg.model.spectro.sample_rate
    }

    /// Per-frame keyword posterior of a whole clip.
    fn posterior(&self, samples: Vec<f32>) -> PyResult<Vec<f32>> {
        let audio = AudioBuffer::new(samples, self.sample_rate()).map_err(to_py)?;
        clip_posterior(&self.loaded.model, &audio, self.bias.as_ref()).map_err(to_py)
    }

    /// The same posterior computed causally, `chunk` samples at a time.
    fn stream_posterior(&self, samples: Vec<f32>, chunk: usize) -> PyResult<Vec<f32>> {
        if chunk == 0 {
            return Err(PyValueError::new_err("chunk must be at least one sample"));
        }
        let mut det = StreamingDetector::new(&self.loaded.model, self.bias.clone());
        let mut out = Vec::new();
        for c in samples.chunks(chunk) {
            out.extend(det.push(c).map_err(to_py)?);
        }
        Ok(out)
    }

    /// Detections as `(frame, smoothed_score)` pairs.
    #[pyo3(signature = (samples, threshold = 0.5, smooth = DEFAULT_SMOOTH_WIN, refractory = DEFAULT_REFRACTORY))]
    fn detect(&self, samples: Vec<f32>, threshold: f32, smooth: usize, refractory: usize) -> PyResult<Vec<(usize, f32)>> {
        let post = self.posterior(samples)?;
        Ok(smooth_and_decide(&post, threshold, smooth, refractory)
            .into_iter()
            .map(|d| (d.frame, d.score))
            .collect())
    }
}

#[pymodule]
fn dccrn_kws_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(si_snr, m)?)?;
    m.add_function(wrap_pyfunction!(noam_lr, m)?)?;
    m.add_function(wrap_pyfunction!(snr_db, m)?)?;
    m.add_function(wrap_pyfunction!(frame_labels, m)?)?;
    m.add_function(wrap_pyfunction!(toy_corpus, m)?)?;
    m.add_class::<Detector>()?;
    Ok(())
}
