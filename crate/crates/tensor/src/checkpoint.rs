//! The MGRD checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MGRD"            4 bytes
//! version           u32
//! entry count       u32
//! per entry:
//!   name length     u32
//!   name            UTF-8 bytes
//!   rank            u32
//!   extents         u64 × rank
//!   payload         f32 × product(extents)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::module::Module;
use crate::tensor::{numel, Tensor};

pub const MAGIC: &[u8; 4] = b"MGRD";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Ordered list of named f32 arrays.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<Entry>,
}

fn ckpt_err(msg: impl Into<String>) -> TensorError {
    TensorError::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<f32>) {
        let name = name.into();
        self.entries.retain(|e| e.name != name);
        self.entries.push(Entry {
            name,
            shape: shape.to_vec(),
            data,
        });
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Stores every parameter of `module` under `namespace/`.
    pub fn insert_module(&mut self, namespace: &str, module: &dyn Module) {
        module.visit(namespace, &mut |name, t| self.insert(name, t.shape(), t.to_vec()));
    }

    /// Loads every parameter of `module` from `namespace/`, checking extents.
    pub fn load_module(&self, namespace: &str, module: &mut dyn Module) -> Result<()> {
        let mut failure = None;
        module.visit_mut(namespace, &mut |name, t| {
            if failure.is_some() {
                return;
            }
            match self.get(&name) {
                None => failure = Some(ckpt_err(format!("missing entry `{name}`"))),
                Some(e) if e.shape != t.shape() => {
                    failure = Some(TensorError::CheckpointShape {
                        name: name.clone(),
                        expected: t.shape().to_vec(),
                        found: e.shape.clone(),
                    })
                }
                Some(e) => {
                    let trainable = t.requires_grad();
                    *t = Tensor::leaf(e.data.clone(), &e.shape, trainable).expect("validated extents");
                }
            }
        });
        failure.map_or(Ok(()), Err)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for &d in &e.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| ckpt_err("truncated header"))?;
        if &magic != MAGIC {
            return Err(ckpt_err(format!("bad magic {magic:?}")));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(ckpt_err(format!("unsupported version {version}")));
        }
        let count = read_u32(&mut r)? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = read_u32(&mut r)? as usize;
            if len > r.len() {
                return Err(ckpt_err("truncated entry name"));
            }
            let (name, rest) = r.split_at(len);
            let name = String::from_utf8(name.to_vec()).map_err(|_| ckpt_err("entry name is not UTF-8"))?;
            r = rest;
            let rank = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut b = [0u8; 8];
                r.read_exact(&mut b).map_err(|_| ckpt_err("truncated extents"))?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let n = numel(&shape);
            if n.checked_mul(4).is_none_or(|b| b > r.len()) {
                return Err(ckpt_err(format!("truncated payload for `{name}`")));
            }
            let (payload, rest) = r.split_at(n * 4);
            r = rest;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            entries.push(Entry { name, shape, data });
        }
        if !r.is_empty() {
            return Err(ckpt_err(format!("{} trailing bytes", r.len())));
        }
        Ok(Checkpoint { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| ckpt_err("truncated integer"))?;
    Ok(u32::from_le_bytes(b))
}
