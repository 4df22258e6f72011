//! Binary parameter checkpoints: magic `UPCCCKPT`, `u32` version, `u32`
//! record count, then per record `u32` name length, UTF-8 name, `u32` rows,
//! `u32` cols and row-major little-endian `f32` data.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::Mat;

const MAGIC: &[u8; 8] = b"UPCCCKPT";
const VERSION: u32 = 1;

pub fn checkpoint_bytes(store: &ParamStore, ids: &[ParamId]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * store.numel(ids));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(ids.len() as u32).to_le_bytes());
    for &id in ids {
        let name = store.name(id).as_bytes();
        let value = store.get(id);
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        out.extend_from_slice(&(value.nrows() as u32).to_le_bytes());
        out.extend_from_slice(&(value.ncols() as u32).to_le_bytes());
        for &v in value.iter() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

/// SHA-256 of the checkpoint encoding of `ids`, hex encoded.
pub fn params_hash(store: &ParamStore, ids: &[ParamId]) -> String {
    hex::encode(Sha256::digest(checkpoint_bytes(store, ids)))
}

pub fn write_checkpoint(store: &ParamStore, ids: &[ParamId], path: &Path) -> Result<()> {
    fs::write(path, checkpoint_bytes(store, ids))?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Mat)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32()? as usize;
    let mut records = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Format("checkpoint name is not UTF-8".into()))?;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Format("checkpoint block too large".into()))?;
        let data = r.take(n.checked_mul(4).ok_or_else(|| Error::Format("checkpoint block too large".into()))?)?;
        let values = data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        let m = Array2::from_shape_vec((rows, cols), values).expect("checked block size");
        records.push((name, m));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    Ok(records)
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Mat)>> {
    parse_checkpoint(&fs::read(path)?)
}

/// Copies records into same-named blocks. Every block in `ids` must be
/// present with a matching shape.
pub fn restore(store: &mut ParamStore, ids: &[ParamId], records: Vec<(String, Mat)>) -> Result<()> {
    let mut by_name: std::collections::HashMap<String, Mat> = records.into_iter().collect();
    for &id in ids {
        let name = store.name(id).to_owned();
        let value = by_name
            .remove(&name)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks block {name}")))?;
        if value.dim() != store.get(id).dim() {
            return Err(Error::Format(format!(
                "block {name}: checkpoint shape {:?}, model shape {:?}",
                value.dim(),
                store.get(id).dim()
            )));
        }
        *store.get_mut(id) = value;
    }
    if let Some(name) = by_name.keys().next() {
        return Err(Error::Format(format!("checkpoint has unexpected block {name}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn store() -> (ParamStore, Vec<ParamId>) {
        let mut s = ParamStore::new();
        let a = s.add("a", array![[1.5, -2.25], [0.1, 4.0]]);
        let b = s.add("b.bias", array![[3.0, 0.0, -1.0]]);
        (s, vec![a, b])
    }

    #[test]
    fn round_trip_equals_f32_rounded_values() {
        let (mut s, ids) = store();
        s.round_to_f32();
        let bytes = checkpoint_bytes(&s, &ids);
        let records = parse_checkpoint(&bytes).unwrap();
        let mut t = s.clone();
        t.get_mut(ids[0]).fill(0.0);
        restore(&mut t, &ids, records).unwrap();
        assert_eq!(t.get(ids[0]), s.get(ids[0]));
        assert_eq!(checkpoint_bytes(&t, &ids), bytes);
    }

    #[test]
    fn truncated_and_bad_magic_are_format_errors() {
        let (s, ids) = store();
        let bytes = checkpoint_bytes(&s, &ids);
        assert!(matches!(parse_checkpoint(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(parse_checkpoint(&bad), Err(Error::Format(_))));
    }

    #[test]
    fn shape_and_name_mismatch_rejected() {
        let (s, ids) = store();
        let mut records = parse_checkpoint(&checkpoint_bytes(&s, &ids)).unwrap();
        let mut t = s.clone();
        records[0].1 = Mat::zeros((1, 1));
        assert!(restore(&mut t, &ids, records).is_err());
        let records = parse_checkpoint(&checkpoint_bytes(&s, &ids[..1])).unwrap();
        assert!(restore(&mut t, &ids, records).is_err());
    }

    #[test]
    fn hash_tracks_values() {
        let (mut s, ids) = store();
        let h = params_hash(&s, &ids);
        assert_eq!(h, params_hash(&s, &ids));
        s.get_mut(ids[1])[[0, 0]] = 2.0;
        assert_ne!(h, params_hash(&s, &ids));
    }
}
