use crate::error::{Error, Result};
use crate::nn::checkpoint::{Checkpoint, NamedTensor};
use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::collections::HashMap;

/// Parameter initialisation schemes.
#[derive(Debug, Clone)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `[-bound, bound]`.
    Uniform(f64),
    Normal(f64),
    Values(Vec<f64>),
}

/// Named registry of trainable variables and non-trainable state buffers.
///
/// Insertion order is preserved; it fixes the tensor order of checkpoints.
pub struct ParamStore {
    device: Device,
    dtype: DType,
    trainable: Vec<(String, Var)>,
    buffers: Vec<(String, Var)>,
    index: HashMap<String, (bool, usize)>,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            device: Device::Cpu,
            dtype,
            trainable: Vec::new(),
            buffers: Vec::new(),
            index: HashMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    fn values(&mut self, n: usize, init: &Init) -> Result<Vec<f64>> {
        Ok(match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Uniform(b) => (0..n).map(|_| self.rng.random_range(-*b..=*b)).collect(),
            Init::Normal(std) => {
                let dist = Normal::new(0.0, *std)
                    .map_err(|e| Error::Config(format!("normal init: {e}")))?;
                (0..n).map(|_| dist.sample(&mut self.rng)).collect()
            }
            Init::Values(v) => {
                if v.len() != n {
                    return Err(Error::Config(format!(
                        "init values have {} elements, shape needs {n}",
                        v.len()
                    )));
                }
                v.clone()
            }
        })
    }

    fn make_var(&mut self, name: &str, shape: &[usize], init: &Init) -> Result<Var> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let n = shape.iter().product();
        let values = self.values(n, init)?;
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        Ok(Var::from_tensor(&t)?)
    }

    /// Registers a trainable tensor and returns a handle sharing its storage.
    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let var = self.make_var(name, shape, &init)?;
        let t = var.as_tensor().clone();
        self.index
            .insert(name.to_string(), (true, self.trainable.len()));
        self.trainable.push((name.to_string(), var));
        Ok(t)
    }

    /// Registers a non-trainable state buffer.
    pub fn buffer(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        let var = self.make_var(name, shape, &init)?;
        self.index
            .insert(name.to_string(), (false, self.buffers.len()));
        self.buffers.push((name.to_string(), var.clone()));
        Ok(var)
    }

    pub fn trainable(&self) -> &[(String, Var)] {
        &self.trainable
    }

    pub fn buffers(&self) -> &[(String, Var)] {
        &self.buffers
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.index.get(name).map(|&(trainable, i)| {
            if trainable {
                &self.trainable[i].1
            } else {
                &self.buffers[i].1
            }
        })
    }

    pub fn num_trainable_scalars(&self) -> usize {
        self.trainable.iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Trainable scalar count for parameters whose name starts with `prefix`.
    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.trainable
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, v)| v.elem_count())
            .sum()
    }

    /// Snapshot of every trainable parameter and buffer as f32.
    pub fn named_tensors(&self) -> Result<Vec<NamedTensor>> {
        self.trainable
            .iter()
            .chain(self.buffers.iter())
            .map(|(name, var)| NamedTensor::from_tensor(name, var.as_tensor()))
            .collect()
    }

    /// Copies matching tensors from a checkpoint. Every registered tensor
    /// whose name is not skipped by `skip` must be present with the same shape.
    pub fn load(&self, ckpt: &Checkpoint, skip: impl Fn(&str) -> bool) -> Result<()> {
        for (name, var) in self.trainable.iter().chain(self.buffers.iter()) {
            if skip(name) {
                continue;
            }
            let nt = ckpt
                .tensor(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if nt.shape != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?} in checkpoint, model expects {:?}",
                    nt.shape,
                    var.dims()
                )));
            }
            var.set(&nt.to_tensor(&self.device, self.dtype)?)?;
        }
        Ok(())
    }
}
