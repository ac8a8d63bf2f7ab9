//! NCKP: a named collection of NTSR tensors in one file (checkpoints).
//!
//! Layout: magic "NCKP", version u8 (= 1), entry count u32 little-endian,
//! then per entry: name length u16 LE, UTF-8 name bytes, embedded NTSR
//! blob. Names are unique; entry order is preserved.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

use super::ntsr;

pub const NCKP_MAGIC: &[u8; 4] = b"NCKP";
pub const NCKP_VERSION: u8 = 1;

#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl Checkpoint {
    pub fn new() -> Checkpoint {
        Checkpoint::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!(
                "duplicate checkpoint entry `{name}`"
            )));
        }
        if name.len() > u16::MAX as usize {
            return Err(Error::invalid(format!(
                "checkpoint entry name of {} bytes exceeds format limit",
                name.len()
            )));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::invalid(format!("checkpoint is missing entry `{name}`")))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(NCKP_MAGIC);
        out.push(NCKP_VERSION);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, tensor) in &self.entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&ntsr::to_bytes(tensor));
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], source: &str) -> Result<Checkpoint> {
        let err = |offset: usize, detail: String| Error::format(source, offset as u64, detail);
        if bytes.len() < 9 {
            return Err(err(bytes.len(), "truncated header".into()));
        }
        if &bytes[0..4] != NCKP_MAGIC {
            return Err(err(0, format!("bad magic {:?}", &bytes[0..4])));
        }
        if bytes[4] != NCKP_VERSION {
            return Err(err(4, format!("unsupported version {}", bytes[4])));
        }
        let count = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        let mut ckpt = Checkpoint::new();
        let mut pos = 9usize;
        for i in 0..count {
            if bytes.len() < pos + 2 {
                return Err(err(pos, format!("truncated name length of entry {i}")));
            }
            let name_len = u16::from_le_bytes(bytes[pos..pos + 2].try_into().unwrap()) as usize;
            pos += 2;
            if bytes.len() < pos + name_len {
                return Err(err(pos, format!("truncated name of entry {i}")));
            }
            let name = std::str::from_utf8(&bytes[pos..pos + name_len])
                .map_err(|e| err(pos, format!("entry {i} name is not UTF-8: {e}")))?
                .to_string();
            pos += name_len;
            let (tensor, used) = ntsr::from_bytes_at(&bytes[pos..], source, pos as u64)?;
            pos += used;
            ckpt.insert(name, tensor)
                .map_err(|e| err(pos, e.to_string()))?;
        }
        if pos != bytes.len() {
            return Err(err(pos, format!("{} trailing bytes", bytes.len() - pos)));
        }
        Ok(ckpt)
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        super::write_atomic(path, &self.to_bytes())
    }

    pub fn read_file(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path)?;
        Checkpoint::from_bytes(&bytes, &path.display().to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_names_and_order() {
        let mut c = Checkpoint::new();
        c.insert("model.group1.block1.qkv_w", Tensor::from_f32(&[2, 2], vec![1.0; 4]).unwrap())
            .unwrap();
        c.insert("bridge.1.scale", Tensor::from_f64(&[1], vec![0.5]).unwrap())
            .unwrap();
        c.insert("labels", Tensor::from_u8(&[3], vec![0, 1, 2]).unwrap())
            .unwrap();
        let back = Checkpoint::from_bytes(&c.to_bytes(), "mem").unwrap();
        assert_eq!(
            back.names().collect::<Vec<_>>(),
            c.names().collect::<Vec<_>>()
        );
        for (name, t) in c.iter() {
            assert!(back.get(name).unwrap().bits_eq(t), "{name}");
        }
    }

    #[test]
    fn duplicate_names_rejected_on_write() {
        let mut c = Checkpoint::new();
        c.insert("x", Tensor::scalar_f32(1.0)).unwrap();
        assert!(c.insert("x", Tensor::scalar_f32(2.0)).is_err());
    }

    #[test]
    fn truncation_names_offset() {
        let mut c = Checkpoint::new();
        c.insert("x", Tensor::from_f32(&[4], vec![0.0; 4]).unwrap())
            .unwrap();
        let mut bytes = c.to_bytes();
        bytes.truncate(bytes.len() - 2);
        assert!(matches!(
            Checkpoint::from_bytes(&bytes, "mem"),
            Err(Error::Format { .. })
        ));
    }
}
