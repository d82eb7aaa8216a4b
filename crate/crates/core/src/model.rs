//! Trainable parameter container and its checkpoint file.
//!
//! A checkpoint is one binary file: the tensor magic and version, a `K`
//! marker, a length-prefixed JSON header (config and class ids) and a
//! count-prefixed list of named tensor records. All integers little-endian.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::encoder::{self, EncoderParams, HeadOutput};
use crate::error::{Error, Result};
use crate::losses::ClassifierHead;
use crate::numerics::{read_tensor, write_tensor, Image, RngStream, Tensor, TENSOR_MAGIC, TENSOR_VERSION};
use crate::qcb::QcbParams;

const CHECKPOINT_MARKER: u8 = b'K';
pub const HEAD_WEIGHT: &str = "head.weight";

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: TrainConfig,
    /// dataset class id behind each classifier column
    pub classes: Vec<u32>,
    pub encoder: EncoderParams,
    pub qcb: Option<QcbParams>,
    pub head: ClassifierHead,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    classes: Vec<u32>,
}

impl Model {
    /// Fresh parameters. Each block draws from its own stream so enabling
    /// the compensation block leaves the encoder and head untouched.
    pub fn init(config: &TrainConfig, classes: Vec<u32>) -> Result<Self> {
        config.validate()?;
        let seed = config.seed;
        let encoder = EncoderParams::init(config.d, &mut RngStream::derive(seed, "init-encoder"));
        let qcb = config
            .qcb_enabled
            .then(|| QcbParams::init(&mut RngStream::derive(seed, "init-qcb")));
        let head = ClassifierHead::init(config.d, classes.len(), &mut RngStream::derive(seed, "init-head"))?;
        Ok(Model {
            config: config.clone(),
            classes,
            encoder,
            qcb,
            head,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Model {
            config: self.config.clone(),
            classes: self.classes.clone(),
            encoder: self.encoder.zeros_like(),
            qcb: self.qcb.as_ref().map(QcbParams::zeros_like),
            head: ClassifierHead {
                weight: Tensor::zeros(self.head.weight.shape()),
            },
        }
    }

    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        let mut out = self.encoder.named();
        if let Some(q) = &self.qcb {
            out.extend(q.named());
        }
        out.push((HEAD_WEIGHT, &self.head.weight));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        let mut out = self.encoder.named_mut();
        if let Some(q) = &mut self.qcb {
            out.extend(q.named_mut());
        }
        out.push((HEAD_WEIGHT, &mut self.head.weight));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// Single-scale descriptor through the compensation block when present.
    pub fn describe(&self, image: &Image) -> Result<HeadOutput> {
        encoder::describe(image, &self.encoder, self.qcb.as_ref())
    }

    pub fn multiscale_descriptor(&self, image: &Image) -> Result<Vec<f64>> {
        encoder::multiscale_descriptor(image, &self.encoder, self.qcb.as_ref(), &self.config.scales)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let header = serde_json::to_vec(&Header {
            config: self.config.clone(),
            classes: self.classes.clone(),
        })?;
        let io = |e| Error::Format(format!("checkpoint write failed: {e}"));
        w.write_all(TENSOR_MAGIC).map_err(io)?;
        w.write_all(&[TENSOR_VERSION, CHECKPOINT_MARKER]).map_err(io)?;
        w.write_all(&(header.len() as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&header).map_err(io)?;
        let named = self.named();
        w.write_all(&(named.len() as u32).to_le_bytes()).map_err(io)?;
        for (name, t) in named {
            w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io)?;
            w.write_all(name.as_bytes()).map_err(io)?;
            write_tensor(w, t).map_err(io)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut prefix = [0u8; 6];
        read_exact(r, &mut prefix)?;
        if &prefix[..4] != TENSOR_MAGIC || prefix[4] != TENSOR_VERSION || prefix[5] != CHECKPOINT_MARKER {
            return Err(Error::Format(format!("not a version-{TENSOR_VERSION} checkpoint (prefix {prefix:?})")));
        }
        let mut len8 = [0u8; 8];
        read_exact(r, &mut len8)?;
        let mut header = vec![0u8; u64::from_le_bytes(len8) as usize];
        read_exact(r, &mut header)?;
        let header: Header = serde_json::from_slice(&header)?;
        let mut model = Model::init(&header.config, header.classes)?;

        let mut len4 = [0u8; 4];
        read_exact(r, &mut len4)?;
        let count = u32::from_le_bytes(len4) as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            read_exact(r, &mut len4)?;
            let mut name = vec![0u8; u32::from_le_bytes(len4) as usize];
            read_exact(r, &mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let t = read_tensor(r)?;
            if tensors.insert(name.clone(), t).is_some() {
                return Err(Error::Format(format!("tensor {name} appears twice")));
            }
        }
        for (name, slot) in model.named_mut() {
            let t = tensors
                .remove(name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {name}")))?;
            if t.shape() != slot.shape() {
                return Err(Error::Format(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Format(format!("unexpected tensor {extra} in checkpoint")));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut bytes.as_slice())
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::Format(format!("truncated checkpoint: {e}")))
}
