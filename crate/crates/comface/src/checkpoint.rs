//! Checkpoint archive.
//!
//! Layout: the 8 magic bytes `CFCKPT01`, a little-endian `u32` header length,
//! a UTF-8 JSON header, then raw little-endian `f32` data. The header lists
//! every parameter tensor (name, shape, element offset) followed by the Adam
//! first and second moments of each optimized tensor. Offsets count `f32`
//! elements from the start of the data section.

use std::path::Path;

use comface_core::config::PretrainConfig;
use comface_core::model::{ComFaceModel, ModelConfig};
use comface_core::nn::Module;
use comface_core::optim::{Adam, Moments};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;

pub const MAGIC: &[u8; 8] = b"CFCKPT01";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct MomentEntry {
    name: String,
    len: usize,
    m_offset: usize,
    v_offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AdamHeader {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    moments: Vec<MomentEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    dtype: String,
    model: ModelConfig,
    tensors: Vec<TensorEntry>,
    adam: AdamHeader,
    training: TrainingInfo,
}

/// Where a checkpoint sits in its run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingInfo {
    /// Last completed epoch.
    pub epoch: u32,
    pub global_step: u64,
    /// Root seed; with `epoch` it fixes every later random draw.
    pub seed: u64,
    pub best_val: Option<f64>,
    pub pretrain: Option<PretrainConfig>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ComFaceModel<f32>,
    pub adam: Adam<f32>,
    pub training: TrainingInfo,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut data: Vec<f32> = Vec::new();
        let mut tensors = Vec::new();
        self.model.visit("", &mut |name, p| {
            tensors.push(TensorEntry { name: name.to_string(), shape: p.shape.clone(), offset: data.len() });
            data.extend_from_slice(&p.value);
        });
        let mut moments = Vec::new();
        for (name, mo) in &self.adam.moments {
            let m_offset = data.len();
            data.extend_from_slice(&mo.m);
            let v_offset = data.len();
            data.extend_from_slice(&mo.v);
            moments.push(MomentEntry { name: name.clone(), len: mo.m.len(), m_offset, v_offset });
        }
        let header = Header {
            dtype: "f32".into(),
            model: self.model.config.clone(),
            tensors,
            adam: AdamHeader { beta1: self.adam.beta1, beta2: self.adam.beta2, eps: self.adam.eps, step: self.adam.step, moments },
            training: self.training.clone(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(12 + json.len() + 4 * data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |m: &str| Error::checkpoint(path, m);
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let json = bytes.get(12..12 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(json).map_err(|e| Error::checkpoint(path, e))?;
        if header.dtype != "f32" {
            return Err(bad("unsupported dtype"));
        }
        let raw = &bytes[12 + hlen..];
        if raw.len() % 4 != 0 {
            return Err(bad("data section is not a whole number of f32 values"));
        }
        let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        let slice = |offset: usize, len: usize| data.get(offset..offset + len).ok_or_else(|| bad("tensor out of bounds"));

        let mut model = ComFaceModel::<f32>::new(&header.model, 0)?;
        let mut entries = header.tensors.iter();
        let mut failure = None;
        model.visit_mut("", &mut |name, p| {
            if failure.is_some() {
                return;
            }
            match entries.next() {
                Some(e) if e.name == name && e.shape == p.shape => match slice(e.offset, p.len()) {
                    Ok(s) => p.value.copy_from_slice(s),
                    Err(err) => failure = Some(err),
                },
                Some(e) => failure = Some(bad(&format!("tensor {} does not match model parameter {name}", e.name))),
                None => failure = Some(bad(&format!("missing tensor {name}"))),
            }
        });
        if let Some(err) = failure {
            return Err(err);
        }
        if entries.next().is_some() {
            return Err(bad("extra tensors in checkpoint"));
        }
        let mut adam = Adam::<f32> { beta1: header.adam.beta1, beta2: header.adam.beta2, eps: header.adam.eps, step: header.adam.step, ..Adam::new() };
        for m in &header.adam.moments {
            adam.moments.insert(m.name.clone(), Moments { m: slice(m.m_offset, m.len)?.to_vec(), v: slice(m.v_offset, m.len)?.to_vec() });
        }
        Ok(Self { model, adam, training: header.training })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_bytes(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use comface_core::nn::BackboneConfig;

    fn sample() -> Checkpoint {
        let cfg = ModelConfig { input_size: [16, 16], backbone: BackboneConfig::plain(&[4, 8]), projection_hidden: 8, projection_dim: 4 };
        let mut model = ComFaceModel::<f32>::new(&cfg, 11).unwrap();
        model.visit_mut("", &mut |_, p| p.grad.iter_mut().enumerate().for_each(|(i, g)| *g = (i as f32).sin()));
        let mut adam = Adam::new();
        adam.step(&mut model, 1e-3, &comface_core::optim::all);
        model.zero_grad();
        Checkpoint {
            model,
            adam,
            training: TrainingInfo { epoch: 3, global_step: 42, seed: 9, best_val: Some(1.5), pretrain: None },
        }
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let ck = sample();
        let p = dir.path().join("x.ckpt");
        ck.save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), ck.to_bytes());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let p = Path::new("mem");
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(b"garbage!garbage!", p).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 2], p).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 400], p).is_err());
    }
}
