//! Checkpoint file format.
//!
//! ```text
//! DCCRN-KWS-CHECKPOINT 1
//! config_hash <hex>
//! iteration <n>
//! meta <key> <value...>
//! tensor <name> f32 <d0>x<d1>... <byte offset> <byte length>
//! end
//! <raw little-endian f32 payloads, concatenated in table order>
//! ```
//!
//! Offsets are relative to the first payload byte. Writing the same
//! checkpoint twice produces identical bytes.

use crate::error::{Error, Result};
use candle_core::{DType, Device, Tensor};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

const MAGIC: &str = "DCCRN-KWS-CHECKPOINT 1";

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn from_tensor(name: &str, t: &Tensor) -> Result<Self> {
        Ok(Self {
            name: name.to_string(),
            shape: t.dims().to_vec(),
            data: t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?,
        })
    }

    pub fn to_tensor(&self, device: &Device, dtype: DType) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.data.clone(), self.shape.as_slice(), device)?.to_dtype(dtype)?)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub config_hash: String,
    pub iteration: u64,
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn set_tensor(&mut self, nt: NamedTensor) {
        match self.tensors.iter_mut().find(|t| t.name == nt.name) {
            Some(slot) => *slot = nt,
            None => self.tensors.push(nt),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = String::new();
        header.push_str(MAGIC);
        header.push('\n');
        header.push_str(&format!("config_hash {}\n", self.config_hash));
        header.push_str(&format!("iteration {}\n", self.iteration));
        for (k, v) in &self.meta {
            if k.contains(char::is_whitespace) || v.contains('\n') {
                return Err(Error::Checkpoint(format!("unencodable meta entry `{k}`")));
            }
            header.push_str(&format!("meta {k} {v}\n"));
        }
        let mut offset = 0usize;
        for t in &self.tensors {
            if t.name.contains(char::is_whitespace) {
                return Err(Error::Checkpoint(format!("tensor name `{}` has whitespace", t.name)));
            }
            let expected: usize = t.shape.iter().product();
            if expected != t.data.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` has {} values for shape {:?}",
                    t.name,
                    t.data.len(),
                    t.shape
                )));
            }
            let shape = if t.shape.is_empty() {
                "scalar".to_string()
            } else {
                t.shape
                    .iter()
                    .map(|d| d.to_string())
                    .collect::<Vec<_>>()
                    .join("x")
            };
            let len = t.data.len() * 4;
            header.push_str(&format!("tensor {} f32 {shape} {offset} {len}\n", t.name));
            offset += len;
        }
        header.push_str("end\n");
        let mut bytes = header.into_bytes();
        bytes.reserve(offset);
        for t in &self.tensors {
            for v in &t.data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(bytes)
    }

    pub fn from_reader(reader: impl Read) -> Result<Self> {
        let mut reader = BufReader::new(reader);
        let mut line = String::new();
        let mut next_line = |reader: &mut BufReader<_>| -> Result<String> {
            line.clear();
            if reader.read_line(&mut line)? == 0 {
                return Err(Error::Checkpoint("unexpected end of header".into()));
            }
            Ok(line.trim_end_matches('\n').to_string())
        };
        if next_line(&mut reader)? != MAGIC {
            return Err(Error::Checkpoint("bad magic line".into()));
        }
        let mut ckpt = Checkpoint::default();
        let mut table: Vec<(String, Vec<usize>, usize, usize)> = Vec::new();
        loop {
            let l = next_line(&mut reader)?;
            if l == "end" {
                break;
            }
            let (kind, rest) = l
                .split_once(' ')
                .ok_or_else(|| Error::Checkpoint(format!("malformed header line `{l}`")))?;
            match kind {
                "config_hash" => ckpt.config_hash = rest.to_string(),
                "iteration" => {
                    ckpt.iteration = rest
                        .parse()
                        .map_err(|_| Error::Checkpoint(format!("bad iteration `{rest}`")))?
                }
                "meta" => {
                    let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                    ckpt.meta.push((k.to_string(), v.to_string()));
                }
                "tensor" => {
                    let parts: Vec<&str> = rest.split(' ').collect();
                    if parts.len() != 5 || parts[1] != "f32" {
                        return Err(Error::Checkpoint(format!("malformed tensor entry `{l}`")));
                    }
                    let shape = if parts[2] == "scalar" {
                        Vec::new()
                    } else {
                        parts[2]
                            .split('x')
                            .map(|d| d.parse::<usize>())
                            .collect::<std::result::Result<Vec<_>, _>>()
                            .map_err(|_| Error::Checkpoint(format!("bad shape in `{l}`")))?
                    };
                    let off = parts[3]
                        .parse()
                        .map_err(|_| Error::Checkpoint(format!("bad offset in `{l}`")))?;
                    let len = parts[4]
                        .parse()
                        .map_err(|_| Error::Checkpoint(format!("bad length in `{l}`")))?;
                    table.push((parts[0].to_string(), shape, off, len));
                }
                other => return Err(Error::Checkpoint(format!("unknown header entry `{other}`"))),
            }
        }
        let mut payload = Vec::new();
        reader.read_to_end(&mut payload)?;
        for (name, shape, off, len) in table {
            if off + len > payload.len() || len % 4 != 0 {
                return Err(Error::Checkpoint(format!("tensor `{name}` exceeds payload")));
            }
            let data: Vec<f32> = payload[off..off + len]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if data.len() != shape.iter().product::<usize>() {
                return Err(Error::Checkpoint(format!("tensor `{name}` size mismatch")));
            }
            ckpt.tensors.push(NamedTensor { name, shape, data });
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path.as_ref())
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.as_ref().display())))?;
        Self::from_reader(f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            config_hash: "abc123".into(),
            iteration: 42,
            meta: vec![("sample_rate".into(), "16000".into())],
            tensors: vec![
                NamedTensor {
                    name: "a.w".into(),
                    shape: vec![2, 3],
                    data: vec![1.0, -2.0, 3.5, f32::MIN_POSITIVE, 0.0, -0.0],
                },
                NamedTensor {
                    name: "s".into(),
                    shape: vec![],
                    data: vec![7.0],
                },
            ],
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let bytes = sample().to_bytes().unwrap();
        let back = Checkpoint::from_reader(bytes.as_slice()).unwrap();
        assert_eq!(back, sample());
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn rejects_bad_magic() {
        assert!(Checkpoint::from_reader(&b"nope\nend\n"[..]).is_err());
    }

    proptest! {
        #[test]
        fn arbitrary_payload_round_trips(data in proptest::collection::vec(any::<f32>(), 0..64)) {
            let ck = Checkpoint {
                tensors: vec![NamedTensor { name: "x".into(), shape: vec![data.len()], data }],
                ..Default::default()
            };
            let bytes = ck.to_bytes().unwrap();
            let back = Checkpoint::from_reader(bytes.as_slice()).unwrap();
            prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        }
    }
}
