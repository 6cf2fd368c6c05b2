//! Helpers shared by the integration tests.
#![allow(dead_code)]

use candle_core::{DType, Device, Tensor};
use dccrn_kws::audio_dsp::AudioBuffer;
use dccrn_kws::nn::ParamStore;
use dccrn_kws::simulate::toy::{write_toy_corpus, ToyCorpus, ToyCorpusConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Uniform random tensor of `shape` in `dtype`.
pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], dtype: DType) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(uniform(rng, n), shape, &Device::Cpu)
        .unwrap()
        .to_dtype(dtype)
        .unwrap()
}

pub fn noise_audio(rng: &mut ChaCha8Rng, samples: usize, rate: u32) -> AudioBuffer {
    AudioBuffer {
        samples: (0..samples).map(|_| rng.random_range(-0.5f32..0.5)).collect(),
        sample_rate: rate,
    }
}

/// Toy corpus in a fresh temporary directory (kept alive by the handle).
pub fn toy_corpus(seed: u64) -> (tempfile::TempDir, ToyCorpus) {
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_toy_corpus(
        dir.path(),
        &ToyCorpusConfig {
            seed,
            ..ToyCorpusConfig::default()
        },
    )
    .unwrap();
    (dir, corpus)
}

/// Worst finite-difference disagreement over the audited coordinates.
#[derive(Debug, Clone)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub worst: String,
    pub checked: usize,
}

/// `|a - n| / max(|a|, |n|, floor)`. The floor sits well above the
/// central-difference round-off (about `eps * |loss| / h`), so gradients
/// that are zero in exact arithmetic do not count as mismatches.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Gradient magnitude below which finite differences cannot resolve a
/// relative error, for a loss of magnitude `loss`.
pub fn fd_floor(loss: f64) -> f64 {
    1e-5 * loss.abs().max(1.0)
}

/// Central-difference audit of the gradient of `loss` with respect to
/// every trainable tensor whose name starts with one of `prefixes`
/// (all tensors when empty), `per_tensor` coordinates each. The store must
/// be f64.
pub fn fd_audit(
    store: &ParamStore,
    prefixes: &[&str],
    per_tensor: usize,
    seed: u64,
    loss: &dyn Fn() -> dccrn_kws::Result<Tensor>,
) -> FdReport {
    assert_eq!(store.dtype(), DType::F64, "finite differences need f64");
    let h = 1e-6;
    let l0 = loss().unwrap();
    let floor = fd_floor(l0.to_scalar::<f64>().unwrap());
    let grads = l0.backward().unwrap();
    let mut r = rng(seed);
    let mut report = FdReport {
        max_rel_err: 0.0,
        worst: String::new(),
        checked: 0,
    };
    for (name, var) in store.trainable() {
        if !prefixes.is_empty() && !prefixes.iter().any(|p| name.starts_with(p)) {
            continue;
        }
        let dims = var.dims().to_vec();
        let base: Vec<f64> = var.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
        let analytic: Vec<f64> = match grads.get(var.as_tensor()) {
            Some(g) => g.flatten_all().unwrap().to_vec1().unwrap(),
            None => vec![0.0; base.len()],
        };
        let eval_at = |v: &[f64]| -> f64 {
            var.set(&Tensor::from_vec(v.to_vec(), dims.as_slice(), &Device::Cpu).unwrap())
                .unwrap();
            loss().unwrap().to_scalar::<f64>().unwrap()
        };
        for _ in 0..per_tensor.min(base.len()) {
            let i = r.random_range(0..base.len());
            let mut v = base.clone();
            v[i] = base[i] + h;
            let plus = eval_at(&v);
            v[i] = base[i] - h;
            let minus = eval_at(&v);
            let numeric = (plus - minus) / (2.0 * h);
            let e = rel_err(analytic[i], numeric, floor);
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst = format!("{name}[{i}] analytic {:.6e} numeric {numeric:.6e}", analytic[i]);
            }
            report.checked += 1;
        }
        eval_at(&base);
    }
    report
}

/// Names of trainable tensors whose gradient is missing or identically zero.
pub fn tensors_without_gradient(store: &ParamStore, loss: &Tensor) -> Vec<String> {
    let grads = loss.backward().unwrap();
    store
        .trainable()
        .iter()
        .filter(|(_, v)| match grads.get(v.as_tensor()) {
            None => true,
            Some(g) => {
                let s = g.abs().unwrap().sum_all().unwrap().to_dtype(DType::F64).unwrap();
                s.to_scalar::<f64>().unwrap() == 0.0
            }
        })
        .map(|(n, _)| n.clone())
        .collect()
}
