//! Versioned binary checkpoints and cross-task transfer.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "DVCMCKPT" | u32 version | u8 task | u32 len + config JSON
//! u32 entry count | per entry: u32 len + name, u8 group, u32 rank,
//!                   u64 dims..., f64 values...
//! 32-byte SHA-256 of everything above
//! ```

use std::path::Path;

use denviscom_tensor::Tensor;
use sha2::{Digest, Sha256};

use crate::config::ModelConfig;
use crate::error::{io_err, Error, Result};
use crate::heads::Task;
use crate::model::Model;
use crate::nn::{ParamEntry, ParamGroup};

pub const MAGIC: &[u8; 8] = b"DVCMCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub task: Task,
    pub config: ModelConfig,
    pub entries: Vec<ParamEntry>,
}

fn task_tag(task: Task) -> u8 {
    match task {
        Task::Flow => 0,
        Task::Disparity => 1,
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Input(format!("checkpoint truncated at byte {}", self.pos)));
        };
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Input("checkpoint string is not UTF-8".into()))
    }
}

impl Checkpoint {
    pub fn from_model(model: &Model, task: Task) -> Self {
        Self {
            task,
            config: model.config().clone(),
            entries: model.params.entries().to_vec(),
        }
    }

    /// Rebuilds the model the checkpoint describes.
    pub fn to_model(&self) -> Result<Model> {
        let mut model = Model::new(&self.config, 0)?;
        self.check_parameters(&model)?;
        model
            .params
            .load_values(self.entries.iter().map(|e| (e.name.as_str(), &e.value)))?;
        Ok(model)
    }

    /// Every parameter the config implies is present once, in the right group.
    fn check_parameters(&self, model: &Model) -> Result<()> {
        let expected = model.params.entries();
        if expected.len() != self.entries.len() {
            return Err(Error::Input(format!(
                "checkpoint has {} parameters, configuration implies {}",
                self.entries.len(),
                expected.len()
            )));
        }
        for (want, got) in expected.iter().zip(&self.entries) {
            if want.name != got.name || want.group != got.group || want.value.shape() != got.value.shape() {
                return Err(Error::Input(format!(
                    "parameter {} ({:?}, {:?}) does not match expected {} ({:?}, {:?})",
                    got.name,
                    got.group,
                    got.value.shape(),
                    want.name,
                    want.group,
                    want.value.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(task_tag(self.task));
        let cfg = self.config.to_json();
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(cfg.as_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.group.tag());
            out.extend_from_slice(&(e.value.rank() as u32).to_le_bytes());
            for &d in e.value.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in e.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 32 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Input("not a checkpoint (bad magic)".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Checksum);
        }
        let mut r = Reader {
            bytes: body,
            pos: MAGIC.len(),
        };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Input(format!("unsupported checkpoint version {version}")));
        }
        let task = match r.u8()? {
            0 => Task::Flow,
            1 => Task::Disparity,
            t => return Err(Error::Input(format!("unknown task tag {t}"))),
        };
        let config = ModelConfig::from_json(&r.string()?)?;
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let name = r.string()?;
            let tag = r.u8()?;
            let group = ParamGroup::from_tag(tag).ok_or_else(|| Error::Input(format!("unknown group tag {tag}")))?;
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Input("parameter too large".into()))?)?;
            let data = raw.chunks(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            entries.push(ParamEntry {
                name,
                group,
                value: Tensor::new(&dims, data)?,
            });
        }
        if r.pos != body.len() {
            return Err(Error::Input(format!("{} trailing bytes in checkpoint", body.len() - r.pos)));
        }
        Ok(Self { task, config, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(io_err(path))?)
    }

    /// Fails with every differing key when `other` describes another trunk.
    pub fn check_compatible(&self, other: &ModelConfig) -> Result<()> {
        let diff = self.config.diff(other);
        if diff.is_empty() {
            Ok(())
        } else {
            Err(Error::ConfigMismatch(diff))
        }
    }

    /// Same parameters for another task. Heads carry no parameters, so this
    /// only rewrites the task; `target` optionally pins the expected config.
    pub fn transfer(&self, task: Task, target: Option<&ModelConfig>) -> Result<Self> {
        if let Some(cfg) = target {
            self.check_compatible(cfg)?;
        }
        Ok(Self {
            task,
            ..self.clone()
        })
    }
}
