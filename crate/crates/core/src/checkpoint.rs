//! MTCK checkpoints: magic `MTCK`, `u8` version 1, `u32` entry count,
//! then per entry a `u16` name length, the UTF-8 name and a BTSR tensor.
//! All integers are little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Btsr, Tensor};

const MAGIC: &[u8; 4] = b"MTCK";
const VERSION: u8 = 1;

/// Named tensors in file order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_stores<'a>(stores: impl IntoIterator<Item = &'a ParamStore>) -> Self {
        let mut entries: Vec<(String, Tensor)> = stores
            .into_iter()
            .flat_map(|s| s.iter().map(|(n, t)| (n.clone(), t.clone())))
            .collect();
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        Checkpoint { entries }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            t.write_btsr(&mut out).expect("write to Vec");
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let fail = |pos: usize, msg: &str| Error::load(path, format!("{msg} at byte {pos}"));
        if bytes.len() < 9 {
            return Err(fail(bytes.len(), "truncated MTCK header"));
        }
        if &bytes[..4] != MAGIC {
            return Err(fail(0, "bad MTCK magic"));
        }
        if bytes[4] != VERSION {
            return Err(fail(4, &format!("unsupported MTCK version {}", bytes[4])));
        }
        let count = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        let mut pos = 9;
        let mut entries = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            if pos + 2 > bytes.len() {
                return Err(fail(pos, "truncated entry name length"));
            }
            let len = u16::from_le_bytes([bytes[pos], bytes[pos + 1]]) as usize;
            pos += 2;
            if pos + len > bytes.len() {
                return Err(fail(pos, "truncated entry name"));
            }
            let name = std::str::from_utf8(&bytes[pos..pos + len])
                .map_err(|_| fail(pos, "entry name is not UTF-8"))?
                .to_string();
            pos += len;
            if entries.iter().any(|(n, _): &(String, Tensor)| *n == name) {
                return Err(fail(pos, &format!("duplicate entry {name}")));
            }
            let mut rest = &bytes[pos..];
            let before = rest.len();
            let t = match Btsr::read(&mut rest, path) {
                Ok(Btsr::F64(t)) => t,
                Ok(Btsr::U8 { .. }) => return Err(fail(pos, &format!("entry {name} is not f64"))),
                Err(Error::Load { message, .. }) => {
                    return Err(fail(pos, &format!("entry {name}: {message}")))
                }
                Err(e) => return Err(e),
            };
            pos += before - rest.len();
            entries.push((name, t));
        }
        if pos != bytes.len() {
            return Err(fail(pos, "trailing bytes after last entry"));
        }
        Ok(Checkpoint { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Fills a copy of `template` from the entries under `prefix`. Shapes
    /// must match; with `strict`, entries under `prefix` that the template
    /// does not know are rejected.
    pub fn extract(&self, prefix: &str, template: &ParamStore, strict: bool) -> Result<ParamStore> {
        let mut out = template.clone();
        for (name, t) in &self.entries {
            if !name.starts_with(prefix) {
                continue;
            }
            match out.get_mut(name) {
                Some(slot) if slot.shape() == t.shape() => *slot = t.clone(),
                Some(slot) => {
                    return Err(Error::dim(format!(
                        "checkpoint tensor {name} has shape {:?}, model expects {:?}",
                        t.shape(),
                        slot.shape()
                    )))
                }
                None if strict => {
                    return Err(Error::usage(format!("unknown checkpoint entry {name}")))
                }
                None => {}
            }
        }
        for (name, _) in template.iter() {
            if self.get(name).is_none() {
                return Err(Error::usage(format!("checkpoint lacks tensor {name}")));
            }
        }
        Ok(out)
    }

    /// Names whose tensors differ (or exist on one side only).
    pub fn diff(&self, other: &Checkpoint) -> Vec<String> {
        let mut names: Vec<&str> = self.names().chain(other.names()).collect();
        names.sort_unstable();
        names.dedup();
        names
            .into_iter()
            .filter(|n| self.get(n) != other.get(n))
            .map(str::to_string)
            .collect()
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    ckpt.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path)
}
