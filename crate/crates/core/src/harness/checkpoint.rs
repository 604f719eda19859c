//! Binary checkpoint container.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header, then every tensor's values as little-endian `f64` in header order.
//! All integers are little-endian.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::segnet::SegModel;

pub const MAGIC: &[u8; 8] = b"SCLCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub config_hash: String,
    /// Number of optimizer steps taken.
    pub step: u64,
    pub params: ParamStore,
    pub buffers: ParamStore,
    /// SGD momentum, aligned with `params`.
    pub momentum: Vec<Tensor>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: String,
    config_hash: String,
    step: u64,
    tensors: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    group: Group,
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize, Clone, Copy, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
enum Group {
    Param,
    Buffer,
    Momentum,
}

impl Checkpoint {
    /// Rebuilds the model described by the stored config and loads its state.
    pub fn model(&self) -> Result<SegModel> {
        let cfg = &self.config;
        let mut model = SegModel::new(&cfg.model, cfg.n_classes(), cfg.loss.loss_position, cfg.seed)?;
        model.params.load(self.params.names(), self.params.values().to_vec())?;
        model
            .buffers
            .load(self.buffers.names(), self.buffers.values().to_vec())?;
        Ok(model)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        if self.momentum.len() != self.params.len() {
            return Err(Error::Checkpoint("momentum does not match parameters".into()));
        }
        let mut tensors = Vec::new();
        let mut data: Vec<&Tensor> = Vec::new();
        for (name, t) in self.params.iter() {
            tensors.push(Entry {
                group: Group::Param,
                name: name.into(),
                shape: t.shape().to_vec(),
            });
            data.push(t);
        }
        for (name, t) in self.buffers.iter() {
            tensors.push(Entry {
                group: Group::Buffer,
                name: name.into(),
                shape: t.shape().to_vec(),
            });
            data.push(t);
        }
        for ((name, _), t) in self.params.iter().zip(&self.momentum) {
            tensors.push(Entry {
                group: Group::Momentum,
                name: name.into(),
                shape: t.shape().to_vec(),
            });
            data.push(t);
        }
        let header = Header {
            config: self.config.to_toml()?,
            config_hash: self.config_hash.clone(),
            step: self.step,
            tensors,
        };
        let header = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        let mut buf = Vec::new();
        for t in data {
            buf.clear();
            buf.extend(t.data().iter().flat_map(|v| v.to_le_bytes()));
            w.write_all(&buf)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        Self::read_inner(r).map_err(|e| match e {
            Error::Io(io) if io.kind() == std::io::ErrorKind::UnexpectedEof => {
                Error::Checkpoint("truncated checkpoint".into())
            }
            e => e,
        })
    }

    fn read_inner<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        let version = u32::from_le_bytes(word);
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let len = u64::from_le_bytes(len) as usize;
        if len > 1 << 30 {
            return Err(Error::Checkpoint("header too large".into()));
        }
        let mut header = vec![0u8; len];
        r.read_exact(&mut header)?;
        let header: Header = serde_json::from_slice(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let config = RunConfig::from_toml(&header.config)?;
        if config.hash()? != header.config_hash {
            return Err(Error::Checkpoint("config hash does not match the stored config".into()));
        }
        let mut params = ParamStore::new();
        let mut buffers = ParamStore::new();
        let mut momentum = Vec::new();
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let mut bytes = vec![0u8; n * 8];
            r.read_exact(&mut bytes)?;
            let values = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let t = Tensor::new(e.shape, values)?;
            match e.group {
                Group::Param => {
                    params.add(e.name, t);
                }
                Group::Buffer => {
                    buffers.add(e.name, t);
                }
                Group::Momentum => momentum.push(t),
            }
        }
        if momentum.len() != params.len() {
            return Err(Error::Checkpoint("momentum does not match parameters".into()));
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Checkpoint("trailing bytes after tensor data".into()));
        }
        Ok(Self {
            config,
            config_hash: header.config_hash,
            step: header.step,
            params,
            buffers,
            momentum,
        })
    }

    /// Writes atomically via a temporary file in the same directory.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        let tmp = path.with_extension("tmp");
        {
            let f = std::fs::File::create(&tmp)?;
            self.write_to(std::io::BufWriter::new(f))?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segnet::ModelSpec;

    fn sample() -> Checkpoint {
        let mut config = RunConfig::default();
        config.model = ModelSpec {
            stem_channels: 4,
            channels: [4, 4, 4, 4],
            embedding_dim: 4,
        };
        let model = SegModel::new(&config.model, config.n_classes(), config.loss.loss_position, 0).unwrap();
        let momentum = model
            .params
            .values()
            .iter()
            .map(|t| Tensor::full(t.shape(), 0.25))
            .collect();
        Checkpoint {
            config_hash: config.hash().unwrap(),
            config,
            step: 17,
            params: model.params,
            buffers: model.buffers,
            momentum,
        }
    }

    #[test]
    fn round_trip_in_memory() {
        let c = sample();
        let mut bytes = Vec::new();
        c.write_to(&mut bytes).unwrap();
        let back = Checkpoint::read_from(bytes.as_slice()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.model().unwrap().params, c.params);
    }

    #[test]
    fn rejects_corruption() {
        let c = sample();
        let mut bytes = Vec::new();
        c.write_to(&mut bytes).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            Checkpoint::read_from(bad.as_slice()),
            Err(Error::Checkpoint(_))
        ));
        for cut in [3, 8, 20, bytes.len() - 3] {
            assert!(matches!(
                Checkpoint::read_from(&bytes[..cut]),
                Err(Error::Checkpoint(_))
            ));
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::read_from(extra.as_slice()).is_err());
    }
}
