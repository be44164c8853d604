//! Binary parameter checkpoints.
//!
//! Layout (little-endian): `b"PGAP"`, `u32` version, `u32` tensor count, then
//! per tensor `u32` name length, UTF-8 name, kind byte, `u64` rows, `u64`
//! cols and `rows·cols` `f64` values in row-major order.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::objectives::{ParamKind, ParamSet};

pub const MAGIC: &[u8; 4] = b"PGAP";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode(params: &ParamSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + params.num_scalars() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params.iter() {
        let name = p.name().as_bytes();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        out.push(p.kind().to_byte());
        out.extend_from_slice(&(p.tensor.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(p.tensor.cols() as u64).to_le_bytes());
        for v in p.tensor.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Corrupt(format!(
                "file truncated while reading {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<ParamSet> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(4, "magic").map_err(|_| {
        Error::Format(format!("missing magic bytes; expected {:?}", "PGAP"))
    })?;
    if magic != MAGIC {
        return Err(Error::Format(format!(
            "bad magic bytes {magic:?}; expected {:?}",
            "PGAP"
        )));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}; expected {FORMAT_VERSION}"
        )));
    }
    let count = r.u32("tensor count")?;
    let mut params = ParamSet::new();
    for t in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Corrupt(format!("tensor {t} name is not UTF-8")))?
            .to_string();
        let kind_byte = r.take(1, "kind")?[0];
        let kind = ParamKind::from_byte(kind_byte)
            .ok_or_else(|| Error::Corrupt(format!("tensor {name:?} has unknown kind {kind_byte}")))?;
        let rows = r.u64("rows")?;
        let cols = r.u64("cols")?;
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(8))
            .and_then(|n| usize::try_from(n).ok())
            .ok_or_else(|| Error::Corrupt(format!("tensor {name:?} has absurd shape {rows}x{cols}")))?;
        let payload = r.take(n, "tensor payload")?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let tensor = Matrix::from_vec(rows as usize, cols as usize, data)?;
        params
            .push(name, tensor, kind)
            .map_err(|e| Error::Corrupt(e.to_string()))?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Corrupt(format!(
            "{} trailing bytes after the last tensor",
            bytes.len() - r.pos
        )));
    }
    Ok(params)
}

/// Writes `bytes` to a sibling temporary file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty());
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("{} is not a file path", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(".tmp");
    let tmp = match dir {
        Some(d) => d.join(&tmp_name),
        None => tmp_name.into(),
    };
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn checkpoint_save(params: &ParamSet, path: &Path) -> Result<()> {
    write_atomic(path, &encode(params))
}

pub fn checkpoint_load(path: &Path) -> Result<ParamSet> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        Error::Corrupt(m) => Error::Corrupt(format!("{}: {m}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamSet {
        ParamSet::new()
            .with(
                "w",
                Matrix::from_rows(&[[1.0, -0.0, f64::MIN_POSITIVE], [3.5, 1e300, -2.25]]),
                ParamKind::MatrixSubspace,
            )
            .with("b", Matrix::column(&[0.1]), ParamKind::Dense)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let p = sample();
        let q = decode(&encode(&p)).unwrap();
        assert!(p.bit_eq(&q));
        assert_eq!(q.entry(0).kind(), ParamKind::MatrixSubspace);
    }

    #[test]
    fn truncation_is_detected() {
        let bytes = encode(&sample());
        for cut in [3, 10, 13, 30, bytes.len() - 1] {
            let err = decode(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::Corrupt(_) | Error::Format(_)), "{cut}: {err}");
        }
    }

    #[test]
    fn wrong_magic_names_expected() {
        let mut bytes = encode(&sample());
        bytes[0] = b'X';
        let err = decode(&bytes).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
        assert!(err.to_string().contains("PGAP"));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        checkpoint_save(&sample(), &path).unwrap();
        assert!(checkpoint_load(&path).unwrap().bit_eq(&sample()));
        let missing = checkpoint_load(&dir.path().join("nope.ckpt")).unwrap_err();
        assert!(matches!(missing, Error::Io { .. }));
    }
}
