//! Binary tensor container.
//!
//! Layout: the 8-byte magic `DDPMCD1\0`, a little-endian `u64` header length,
//! a UTF-8 JSON header, then every tensor as raw little-endian `f32` in header
//! order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffusion::ScheduleSpec;
use crate::error::{Error, Result};
use crate::nn::Module;
use crate::tensor::{Element, Tensor};

pub const MAGIC: &[u8; 8] = b"DDPMCD1\0";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Header {
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub schedule: Option<ScheduleSpec>,
    /// Architecture config of the model the tensors belong to.
    #[serde(default)]
    pub config: Option<serde_json::Value>,
    #[serde(default)]
    pub step: u64,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    data: Vec<Vec<f32>>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self {
            header: Header::default(),
            data: Vec::new(),
        }
    }

    /// Every parameter of `model`, in visit order.
    pub fn from_module<E: Element, M: Module<E> + ?Sized>(model: &M) -> Self {
        let mut ck = Self::new();
        model.visit(&mut |p| ck.push(p.name(), p.value()));
        ck
    }

    pub fn push<E: Element>(&mut self, name: &str, t: &Tensor<E>) {
        self.header.tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype: "f32".into(),
        });
        self.data.push(t.data().iter().map(|v| v.as_f64() as f32).collect());
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn tensor<E: Element>(&self, name: &str) -> Option<Tensor<E>> {
        let i = self.header.tensors.iter().position(|e| e.name == name)?;
        Some(self.tensor_at(i))
    }

    pub fn tensor_at<E: Element>(&self, i: usize) -> Tensor<E> {
        let data = self.data[i].iter().map(|v| E::from_f64(f64::from(*v))).collect();
        Tensor::new(self.header.tensors[i].shape.clone(), data).expect("validated on construction")
    }

    /// Copies stored values into `model`. Names and shapes must match the
    /// model's parameters exactly and in order.
    pub fn load_into<E: Element, M: Module<E> + ?Sized>(&self, model: &mut M) -> Result<()> {
        let expected = model.parameters().len();
        if expected != self.len() {
            return Err(Error::Data(format!(
                "checkpoint holds {} tensors, model has {expected} parameters",
                self.len()
            )));
        }
        let mut idx = 0;
        let mut failure = None;
        model.visit_mut(&mut |p| {
            if failure.is_some() {
                return;
            }
            let entry = &self.header.tensors[idx];
            if entry.name != p.name() || entry.shape != p.shape() {
                failure = Some(Error::Data(format!(
                    "checkpoint tensor {} {:?} does not match parameter {} {:?}",
                    entry.name,
                    entry.shape,
                    p.name(),
                    p.shape()
                )));
                return;
            }
            let values: Vec<E> = self.data[idx].iter().map(|v| E::from_f64(f64::from(*v))).collect();
            if let Err(e) = p.assign(&values) {
                failure = Some(e);
            }
            idx += 1;
        });
        failure.map_or(Ok(()), Err)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header).map_err(|e| Error::Data(format!("checkpoint header: {e}")))?;
        let payload: usize = self.data.iter().map(|d| d.len() * 4).sum();
        let mut out = Vec::with_capacity(16 + header.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for buf in &self.data {
            for v in buf {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Data("not a checkpoint: bad magic".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = &bytes[16..];
        if hlen > body.len() {
            return Err(Error::Data(format!("checkpoint header length {hlen} exceeds file size")));
        }
        let header: Header =
            serde_json::from_slice(&body[..hlen]).map_err(|e| Error::Data(format!("checkpoint header: {e}")))?;
        let mut rest = &body[hlen..];
        let mut data = Vec::with_capacity(header.tensors.len());
        for entry in &header.tensors {
            if entry.dtype != "f32" {
                return Err(Error::Data(format!("tensor {}: unsupported dtype {}", entry.name, entry.dtype)));
            }
            if entry.shape.is_empty() || entry.shape.contains(&0) {
                return Err(Error::Data(format!("tensor {}: invalid shape {:?}", entry.name, entry.shape)));
            }
            let n: usize = entry.shape.iter().product();
            if rest.len() < n * 4 {
                return Err(Error::Data(format!("tensor {}: truncated payload", entry.name)));
            }
            let (chunk, tail) = rest.split_at(n * 4);
            data.push(
                chunk
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                    .collect(),
            );
            rest = tail;
        }
        if !rest.is_empty() {
            return Err(Error::Data(format!("{} trailing bytes after checkpoint payload", rest.len())));
        }
        Ok(Self { header, data })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

impl Default for Checkpoint {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.push("a", &Tensor::<f32>::new(vec![2, 2], vec![1.5, -0.0, f32::MIN_POSITIVE, 3e38]).unwrap());
        ck.push("b", &Tensor::<f32>::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap());
        ck.header.step = 42;
        ck.header.schedule = Some(ScheduleSpec::standard());
        ck.header.meta.insert("kind".into(), "test".into());
        ck
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        let a = back.tensor::<f32>("a").unwrap();
        assert_eq!(a.data()[1].to_bits(), (-0.0f32).to_bits());
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let mut bytes = sample().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Data(_))));
    }
}
