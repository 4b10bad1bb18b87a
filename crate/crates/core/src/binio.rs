//! Little-endian binary helpers shared by the checkpoint and knowledge-base
//! file formats.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{D2kError, Result};
use crate::numeric::{ParamStore, Tensor2};

/// Writes `data` to a sibling temporary file, syncs it and renames it over
/// `path`, so readers never observe a partially written file.
pub(crate) fn write_atomic(path: &Path, data: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| D2kError::config(format!("{} is not a file path", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(format!(".{}.tmp", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(data)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

pub(crate) struct ByteWriter {
    pub buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new() -> Self {
        Self { buf: Vec::new() }
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u16(&mut self, v: u16) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn f32(&mut self, v: f32) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }
}

/// Cursor over a byte slice; every failure reports the offset it occurred at.
pub(crate) struct ByteReader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        Self { data, pos: 0 }
    }

    pub fn pos(&self) -> u64 {
        self.pos as u64
    }

    pub fn remaining(&self) -> usize {
        self.data.len() - self.pos
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(D2kError::format(
                self.pos as u64,
                format!("truncated {what}: need {n} bytes, {} left", self.remaining()),
            ));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub fn expect_magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let at = self.pos as u64;
        let got = self.take(4, "magic")?;
        if got != magic {
            return Err(D2kError::format(
                at,
                format!("bad magic {:?}, expected {:?}", String::from_utf8_lossy(got), String::from_utf8_lossy(magic)),
            ));
        }
        Ok(())
    }

    pub fn expect_end(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(D2kError::format(self.pos as u64, format!("{} trailing bytes", self.remaining())));
        }
        Ok(())
    }
}

/// Checkpoint layout shared by model files:
/// magic (4), u32 version, 32-byte schema hash, u32 config length + config
/// JSON, u32 parameter count, then per parameter in store order: u32 rows,
/// u32 cols, rows·cols f64 values.
pub(crate) fn write_checkpoint(magic: &[u8; 4], version: u32, schema_hash: &[u8; 32], config_json: &str, params: &ParamStore) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.bytes(magic);
    w.u32(version);
    w.bytes(schema_hash);
    w.u32(config_json.len() as u32);
    w.bytes(config_json.as_bytes());
    w.u32(params.len() as u32);
    for (_, _, t) in params.iter() {
        w.u32(t.rows() as u32);
        w.u32(t.cols() as u32);
        for &v in t.data() {
            w.f64(v);
        }
    }
    w.buf
}

#[derive(Debug)]
pub(crate) struct CheckpointData {
    pub schema_hash: [u8; 32],
    pub config_json: String,
    pub tensors: Vec<Tensor2>,
}

pub(crate) fn read_checkpoint(data: &[u8], magic: &[u8; 4], version: u32) -> Result<CheckpointData> {
    let mut r = ByteReader::new(data);
    r.expect_magic(magic)?;
    let at = r.pos();
    let v = r.u32("version")?;
    if v != version {
        return Err(D2kError::format(at, format!("unsupported version {v}")));
    }
    let schema_hash: [u8; 32] = r.take(32, "schema hash")?.try_into().unwrap();
    let len = r.u32("config length")? as usize;
    let at = r.pos();
    let config_json = String::from_utf8(r.take(len, "config")?.to_vec())
        .map_err(|_| D2kError::format(at, "config is not UTF-8"))?;
    let n = r.u32("parameter count")? as usize;
    let mut tensors = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        let rows = r.u32("tensor rows")? as usize;
        let cols = r.u32("tensor cols")? as usize;
        let count = rows
            .checked_mul(cols)
            .filter(|c| c.checked_mul(8).is_some_and(|b| b <= r.remaining()))
            .ok_or_else(|| D2kError::format(r.pos(), format!("truncated tensor {rows}x{cols}")))?;
        let mut vals = Vec::with_capacity(count);
        for _ in 0..count {
            vals.push(r.f64("tensor value")?);
        }
        tensors.push(Tensor2::from_vec(rows, cols, vals));
    }
    r.expect_end()?;
    Ok(CheckpointData {
        schema_hash,
        config_json,
        tensors,
    })
}

/// Copies checkpoint tensors into a freshly built store with the same layout.
pub(crate) fn restore_params(params: &mut ParamStore, tensors: Vec<Tensor2>) -> Result<()> {
    if tensors.len() != params.len() {
        return Err(D2kError::format(0, format!("{} tensors for {} parameters", tensors.len(), params.len())));
    }
    for (id, t) in tensors.into_iter().enumerate() {
        if params.get(id).shape() != t.shape() {
            return Err(D2kError::format(
                0,
                format!("parameter {} has shape {:?}, file has {:?}", params.name(id), params.get(id).shape(), t.shape()),
            ));
        }
        *params.get_mut(id) = t;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip() {
        let mut p = ParamStore::new();
        p.add("a", Tensor2::from_vec(2, 2, vec![1.0, -2.5, 0.1, f64::MIN_POSITIVE]));
        p.add("b", Tensor2::zeros(1, 3));
        let bytes = write_checkpoint(b"TEST", 1, &[7; 32], "{\"x\":1}", &p);
        let back = read_checkpoint(&bytes, b"TEST", 1).unwrap();
        assert_eq!(back.schema_hash, [7; 32]);
        assert_eq!(back.config_json, "{\"x\":1}");
        assert_eq!(back.tensors[0], *p.get(0));
        assert_eq!(back.tensors[1], *p.get(1));
    }

    #[test]
    fn checkpoint_errors_carry_offsets() {
        let mut p = ParamStore::new();
        p.add("a", Tensor2::zeros(2, 2));
        let bytes = write_checkpoint(b"TEST", 1, &[0; 32], "{}", &p);
        let err = read_checkpoint(&bytes, b"NOPE", 1).unwrap_err();
        assert!(matches!(err, D2kError::Format { offset: 0, .. }));
        let err = read_checkpoint(&bytes, b"TEST", 2).unwrap_err();
        assert!(matches!(err, D2kError::Format { offset: 4, .. }));
        for cut in [3, 10, bytes.len() - 1] {
            assert!(matches!(read_checkpoint(&bytes[..cut], b"TEST", 1), Err(D2kError::Format { .. })));
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(read_checkpoint(&long, b"TEST", 1).is_err());
    }
}
