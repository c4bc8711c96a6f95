use std::path::Path;

use super::{Result, TrainError};
use crate::model::{Meant, ModelConfig};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MEAN";
pub const CHECKPOINT_VERSION: u32 = 1;

/// `MEAN`, version, config JSON, parameter blobs in store order, CRC32 of
/// everything before the footer. Integers are little-endian.
pub fn encode_checkpoint(model: &Meant) -> Result<Vec<u8>> {
    let config = serde_json::to_vec(&serde_json::to_value(model.config())?)?;
    let mut out = Vec::with_capacity(64 + config.len() + 8 * model.num_params());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(&config);
    out.extend_from_slice(&(model.store.len() as u32).to_le_bytes());
    for (_, name, t) in model.store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.len() as u64).to_le_bytes());
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| TrainError::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Meant> {
    if bytes.len() < 16 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(TrainError::Checkpoint("missing MEAN header".into()));
    }
    let (body, footer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(footer.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(TrainError::Checkpoint("checksum mismatch".into()));
    }
    let mut r = Reader { bytes: body, pos: 4 };
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(TrainError::Checkpoint(format!(
            "unsupported version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let len = r.u32()? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(len)?)?;
    let mut model = Meant::new(config)?;
    let count = r.u32()? as usize;
    if count != model.store.len() {
        return Err(TrainError::Mismatch(format!(
            "checkpoint holds {count} tensors, configuration builds {}",
            model.store.len()
        )));
    }
    let mut seen = vec![false; count];
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|_| TrainError::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let id = model
            .store
            .id(&name)
            .ok_or_else(|| TrainError::Mismatch(format!("unknown parameter {name}")))?;
        let elems = r.u64()? as usize;
        let t = model.store.get_mut(id);
        if elems != t.len() {
            return Err(TrainError::Mismatch(format!(
                "{name} has {elems} values, configuration expects {}",
                t.len()
            )));
        }
        if std::mem::replace(&mut seen[id.index()], true) {
            return Err(TrainError::Checkpoint(format!("duplicate parameter {name}")));
        }
        let raw = r.take(elems * 8)?;
        for (dst, chunk) in t.data_mut().iter_mut().zip(raw.chunks_exact(8)) {
            *dst = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
    }
    if r.pos != body.len() {
        return Err(TrainError::Checkpoint("trailing bytes after parameters".into()));
    }
    Ok(model)
}

pub fn save_checkpoint(model: &Meant, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Meant> {
    decode_checkpoint(&std::fs::read(path)?)
}
