//! Versioned flat binary checkpoint container.
//!
//! Layout: 8-byte magic `INFOCONS`, u32 format version, u32 entry count,
//! then per entry a u32 name length, the UTF-8 name, u32 ndim, u32 dims, and
//! the payload as little-endian 32-bit floats. A human-readable `.meta`
//! sidecar (key=value lines) travels next to every checkpoint.

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"INFOCONS";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: not a checkpoint (bad magic)")]
    BadMagic { path: PathBuf },
    #[error("{path}: unsupported checkpoint version {found} (expected {VERSION})")]
    BadVersion { path: PathBuf, found: u32 },
    #[error("{path}: truncated or corrupt checkpoint ({msg})")]
    Corrupt { path: PathBuf, msg: String },
    #[error("checkpoint missing entry `{0}`")]
    MissingEntry(String),
    #[error("checkpoint missing metadata key `{0}`")]
    MissingMeta(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

/// Write named tensors (f64 in memory, f32 on disk) plus the metadata
/// sidecar at `<path>.meta`.
pub fn save(path: &Path, entries: &[(String, &Tensor)], meta: &[(String, String)]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        let nb = name.as_bytes();
        buf.extend_from_slice(&(nb.len() as u32).to_le_bytes());
        buf.extend_from_slice(nb);
        let dims = [t.rows() as u32, t.cols() as u32];
        buf.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for d in dims {
            buf.extend_from_slice(&d.to_le_bytes());
        }
        for &v in t.iter() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;

    let mut side = String::new();
    for (k, v) in meta {
        side.push_str(&format!("{k}={v}\n"));
    }
    fs::write(meta_path(path), side)?;
    Ok(())
}

/// Read all entries back (f32 payload widened to f64) and the sidecar.
#[allow(clippy::type_complexity)]
pub fn load(path: &Path) -> Result<(Vec<(String, Tensor)>, Vec<(String, String)>)> {
    let mut f = fs::File::open(path)?;
    let mut buf = Vec::new();
    f.read_to_end(&mut buf)?;
    let corrupt = |msg: &str| CheckpointError::Corrupt {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    if buf.len() < 16 {
        return Err(corrupt("shorter than header"));
    }
    if &buf[0..8] != MAGIC {
        return Err(CheckpointError::BadMagic {
            path: path.to_path_buf(),
        });
    }
    let version = u32::from_le_bytes(buf[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(CheckpointError::BadVersion {
            path: path.to_path_buf(),
            found: version,
        });
    }
    let count = u32::from_le_bytes(buf[12..16].try_into().unwrap()) as usize;
    let mut off = 16;
    let mut take = |n: usize| -> Result<&[u8]> {
        if off + n > buf.len() {
            return Err(corrupt("unexpected end of file"));
        }
        let s = &buf[off..off + n];
        off += n;
        Ok(s)
    };
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(name_len)?.to_vec())
            .map_err(|_| corrupt("entry name is not UTF-8"))?;
        let ndim = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        if ndim != 2 {
            return Err(corrupt(&format!("entry `{name}`: expected 2 dims, got {ndim}")));
        }
        let rows = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let payload = take(rows * cols * 4)?;
        let data: Vec<f64> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        entries.push((name, Tensor::from_vec(rows, cols, data)));
    }
    let meta = match fs::read_to_string(meta_path(path)) {
        Ok(text) => crate::shapes::parse_kv(&text),
        Err(_) => Vec::new(),
    };
    Ok((entries, meta))
}

pub fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".meta");
    PathBuf::from(s)
}

pub fn find<'a>(entries: &'a [(String, Tensor)], name: &str) -> Result<&'a Tensor> {
    entries
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t)
        .ok_or_else(|| CheckpointError::MissingEntry(name.to_string()))
}

pub fn meta_value<'a>(meta: &'a [(String, String)], key: &str) -> Result<&'a str> {
    meta.iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| CheckpointError::MissingMeta(key.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn round_trip_preserves_f32_precision() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut rng = Rng::new(1);
        let a = Tensor::random_uniform(4, 7, -2.0, 2.0, &mut rng);
        let b = Tensor::random_uniform(1, 3, -1.0, 1.0, &mut rng);
        save(
            &path,
            &[("alpha".into(), &a), ("beta".into(), &b)],
            &[("kind".into(), "test".into())],
        )
        .unwrap();
        let (entries, meta) = load(&path).unwrap();
        assert_eq!(entries.len(), 2);
        let a2 = find(&entries, "alpha").unwrap();
        assert_eq!(a2.shape(), (4, 7));
        for (x, y) in a.iter().zip(a2.iter()) {
            assert_eq!(*x as f32, *y as f32);
        }
        assert_eq!(meta_value(&meta, "kind").unwrap(), "test");
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"NOTMAGIC42424242").unwrap();
        assert!(matches!(load(&path), Err(CheckpointError::BadMagic { .. })));
    }

    #[test]
    fn truncated_payload_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        let a = Tensor::zeros(8, 8);
        save(&path, &[("w".into(), &a)], &[]).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 10);
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load(&path), Err(CheckpointError::Corrupt { .. })));
    }
}
