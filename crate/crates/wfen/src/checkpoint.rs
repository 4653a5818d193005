//! `WFEN1` checkpoint format.
//!
//! Layout (all integers u64 little-endian):
//!
//! ```text
//! "WFEN1"
//! config_len, config bytes (UTF-8 run-config JSON)
//! entry_count
//! per entry: name_len, name bytes, rank, rank × extent, numel × f32 LE
//! ```
//!
//! Anything short of or beyond that layout is rejected.

use std::path::Path;

use wfen_core::nn::ParameterStore;
use wfen_core::Tensor;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"WFEN1";

/// Decoded checkpoint: config text plus named tensors in file order.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub entries: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn from_store(config: impl Into<String>, store: &ParameterStore<f32>) -> Self {
        Checkpoint {
            config: config.into(),
            entries: store.iter().map(|(_, n, t)| (n.to_string(), t.clone())).collect(),
        }
    }

    /// Collects the entries into a store tagged with `seed`.
    pub fn to_store(&self, seed: u64) -> Result<ParameterStore<f32>> {
        let mut s = ParameterStore::new(seed);
        for (name, t) in &self.entries {
            s.insert(name.clone(), t.clone())?;
        }
        Ok(s)
    }

    /// Copies every entry into `store`, which must hold exactly the same names and shapes.
    pub fn load_into(&self, store: &mut ParameterStore<f32>) -> Result<()> {
        if self.entries.len() != store.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, model expects {}",
                self.entries.len(),
                store.len()
            )));
        }
        for (name, t) in &self.entries {
            if store.get(name).is_none() {
                return Err(Error::Format(format!("checkpoint tensor `{name}` is not part of the model")));
            }
            store.set(name, t.clone())?;
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put(&mut out, self.config.len() as u64);
        out.extend_from_slice(self.config.as_bytes());
        put(&mut out, self.entries.len() as u64);
        for (name, t) in &self.entries {
            put(&mut out, name.len() as u64);
            out.extend_from_slice(name.as_bytes());
            put(&mut out, t.rank() as u64);
            for &e in t.shape() {
                put(&mut out, e as u64);
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len(), "magic")? != MAGIC {
            return Err(Error::Format("checkpoint: bad magic (expected WFEN1)".into()));
        }
        let config_len = r.len("config length")?;
        let config = String::from_utf8(r.take(config_len, "config")?.to_vec())
            .map_err(|_| Error::Format("checkpoint: config is not UTF-8".into()))?;
        let count = r.len("entry count")?;
        let mut entries = Vec::new();
        for i in 0..count {
            let name_len = r.len("name length")?;
            let name = String::from_utf8(r.take(name_len, "name")?.to_vec())
                .map_err(|_| Error::Format(format!("checkpoint: entry {i} name is not UTF-8")))?;
            let rank = r.len("rank")?;
            if rank > 4 {
                return Err(Error::Format(format!("checkpoint: `{name}` has rank {rank}")));
            }
            let shape = (0..rank).map(|_| r.len("extent")).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e));
            let bytes_needed = numel.and_then(|n| n.checked_mul(4)).ok_or_else(|| {
                Error::Format(format!("checkpoint: `{name}` extents {shape:?} overflow"))
            })?;
            let raw = r.take(bytes_needed, "values")?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            entries.push((name, Tensor::new(&shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("checkpoint: {} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { config, entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode()).map_err(Error::io(path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(Error::io(path))?;
        Self::decode(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

fn put(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!("checkpoint: truncated while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        let b = self.take(8, what)?;
        let v = u64::from_le_bytes(b.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| Error::Format(format!("checkpoint: {what} {v} too large")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            config: "{\"model\":{}}".into(),
            entries: vec![
                ("a.weight".into(), Tensor::from_fn(&[2, 3], |i| i as f32 * 0.5 - 1.0)),
                ("b".into(), Tensor::new(&[1], vec![f32::MIN_POSITIVE]).unwrap()),
                ("scalar".into(), Tensor::scalar(3.0)),
            ],
        }
    }

    #[test]
    fn round_trip_and_truncation() {
        let ck = sample();
        let bytes = ck.encode();
        assert_eq!(Checkpoint::decode(&bytes).unwrap(), ck);
        for cut in 0..bytes.len() {
            assert!(Checkpoint::decode(&bytes[..cut]).is_err(), "cut {cut}");
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::decode(&extra).is_err());
        let mut bad = bytes;
        bad[0] = b'X';
        assert!(Checkpoint::decode(&bad).unwrap_err().to_string().contains("magic"));
    }
}
