//! Versioned checkpoint container.
//!
//! Layout: 8-byte magic, little-endian `u32` header length, UTF-8 JSON header,
//! then raw little-endian tensor payloads at the byte offsets the header
//! declares (offsets are relative to the start of the payload section).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"AUSCKPT\0";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
    offset: usize,
    nbytes: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    schema_version: u32,
    hyperparameters: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub dtype: DType,
    pub shape: Vec<usize>,
    bytes: Vec<u8>,
}

/// In-memory checkpoint: hyperparameters plus an ordered tensor directory.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub hyperparameters: serde_json::Value,
    tensors: Vec<(String, StoredTensor)>,
}

impl Checkpoint {
    pub fn new(hyperparameters: serde_json::Value) -> Self {
        Self {
            hyperparameters,
            tensors: Vec::new(),
        }
    }

    fn put(&mut self, name: &str, t: StoredTensor) {
        if let Some(slot) = self.tensors.iter_mut().find(|(n, _)| n == name) {
            slot.1 = t;
        } else {
            self.tensors.push((name.to_string(), t));
        }
    }

    pub fn insert<T: Scalar>(&mut self, name: &str, t: &Tensor<T>) {
        let mut bytes = Vec::with_capacity(t.len() * T::DTYPE.size_bytes());
        for &v in t.data() {
            v.write_le(&mut bytes);
        }
        self.put(
            name,
            StoredTensor {
                dtype: T::DTYPE,
                shape: t.shape().to_vec(),
                bytes,
            },
        );
    }

    pub fn insert_i64(&mut self, name: &str, shape: &[usize], values: &[i64]) {
        let bytes = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        self.put(
            name,
            StoredTensor {
                dtype: DType::I64,
                shape: shape.to_vec(),
                bytes,
            },
        );
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.iter().any(|(n, _)| n == name)
    }

    pub fn entry(&self, name: &str) -> Result<&StoredTensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| TensorError::MissingTensor(name.to_string()))
    }

    /// Reads a floating tensor, converting precision if the stored dtype differs.
    pub fn get<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        let e = self.entry(name)?;
        let data: Vec<T> = match e.dtype {
            DType::F32 => e
                .bytes
                .chunks_exact(4)
                .map(|c| T::lit(f32::read_le(c) as f64))
                .collect(),
            DType::F64 => e
                .bytes
                .chunks_exact(8)
                .map(|c| T::lit(f64::read_le(c)))
                .collect(),
            DType::I64 => {
                return Err(TensorError::Checkpoint(format!(
                    "tensor `{name}` is integer, expected float"
                )))
            }
        };
        Tensor::new(&e.shape, data)
    }

    pub fn get_i64(&self, name: &str) -> Result<(Vec<usize>, Vec<i64>)> {
        let e = self.entry(name)?;
        if e.dtype != DType::I64 {
            return Err(TensorError::Checkpoint(format!(
                "tensor `{name}` is not integer"
            )));
        }
        let v = e
            .bytes
            .chunks_exact(8)
            .map(|c| i64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok((e.shape.clone(), v))
    }

    /// Stores every parameter and buffer of `store` under its own name.
    pub fn insert_store<T: Scalar>(&mut self, store: &ParamStore<T>) {
        for (_, p) in store.params() {
            self.insert(&p.name, &p.value);
        }
        for (name, t) in store.buffers() {
            self.insert(name, t);
        }
    }

    /// Loads every parameter and buffer of `store` from the checkpoint. Any
    /// name the store declares but the checkpoint lacks is an error.
    pub fn load_into_store<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        let ids: Vec<_> = store.params().map(|(id, p)| (id, p.name.clone())).collect();
        for (id, name) in ids {
            let t = self.get::<T>(&name)?;
            let p = store.param_mut(id);
            if t.shape() != p.value.shape() {
                return Err(TensorError::TensorShape {
                    name,
                    found: t.shape().to_vec(),
                    expected: p.value.shape().to_vec(),
                });
            }
            p.value = t;
        }
        let bufs: Vec<String> = store.buffers().map(|(n, _)| n.to_string()).collect();
        for name in bufs {
            let t = self.get::<T>(&name)?;
            let id = store.buffer_id(&name).expect("listed buffer");
            if t.shape() != store.buffer(id).shape() {
                return Err(TensorError::TensorShape {
                    name,
                    found: t.shape().to_vec(),
                    expected: store.buffer(id).shape().to_vec(),
                });
            }
            *store.buffer_mut(id) = t;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                dtype: t.dtype,
                shape: t.shape.clone(),
                offset,
                nbytes: t.bytes.len(),
            });
            offset += t.bytes.len();
        }
        let header = serde_json::to_vec_pretty(&Header {
            schema_version: SCHEMA_VERSION,
            hyperparameters: self.hyperparameters.clone(),
            tensors: entries,
        })?;
        let hlen = u32::try_from(header.len())
            .map_err(|_| TensorError::Checkpoint("header larger than 4 GiB".into()))?;
        let mut out = Vec::with_capacity(12 + header.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&hlen.to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &self.tensors {
            out.extend_from_slice(&t.bytes);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(TensorError::Checkpoint("bad magic".into()));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let Some(hbytes) = bytes.get(12..12 + hlen) else {
            return Err(TensorError::Checkpoint("truncated header".into()));
        };
        let header: Header = serde_json::from_slice(hbytes)?;
        if header.schema_version != SCHEMA_VERSION {
            return Err(TensorError::SchemaVersion {
                found: header.schema_version,
                expected: SCHEMA_VERSION,
            });
        }
        let payload = &bytes[12 + hlen..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let count: usize = e.shape.iter().product();
            let end = e.offset.checked_add(e.nbytes);
            if count * e.dtype.size_bytes() != e.nbytes || end.is_none_or(|end| end > payload.len())
            {
                return Err(TensorError::Truncated {
                    name: e.name,
                    offset: e.offset,
                    len: e.nbytes,
                    payload: payload.len(),
                });
            }
            tensors.push((
                e.name,
                StoredTensor {
                    dtype: e.dtype,
                    shape: e.shape,
                    bytes: payload[e.offset..e.offset + e.nbytes].to_vec(),
                },
            ));
        }
        Ok(Self {
            hyperparameters: header.hyperparameters,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
