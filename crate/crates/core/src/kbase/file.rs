//! Binary layout: magic `D2K1`, u32 version, u32 vector width, u64 entry
//! count, 32-byte schema hash, then entries in ascending key order, each
//! three u16 field indices, three u32 value IDs and `width` f32 values, all
//! little-endian.

use std::fs;
use std::path::Path;

use super::base::KnowledgeBase;
use super::key::TernaryKey;
use crate::binio::{write_atomic, ByteReader, ByteWriter};
use crate::error::{D2kError, Result};

pub const KB_MAGIC: &[u8; 4] = b"D2K1";
pub const KB_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 8 + 32;

pub(crate) fn serialized_len(entries: usize, dim: usize) -> usize {
    HEADER_LEN + entries * entry_len(dim)
}

fn entry_len(dim: usize) -> usize {
    3 * 2 + 3 * 4 + dim * 4
}

impl KnowledgeBase {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.buf.reserve(serialized_len(self.len(), self.dim()));
        w.bytes(KB_MAGIC);
        w.u32(KB_VERSION);
        w.u32(self.dim() as u32);
        w.u64(self.len() as u64);
        w.bytes(self.schema_hash());
        for (k, v) in self.sorted() {
            k.fields.iter().for_each(|&f| w.u16(f));
            k.values.iter().for_each(|&x| w.u32(x));
            v.iter().for_each(|&x| w.f32(x));
        }
        w.buf
    }

    /// Parses a serialized base. Nothing is returned unless the whole input
    /// is valid.
    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(data);
        r.expect_magic(KB_MAGIC)?;
        let at = r.pos();
        let version = r.u32("version")?;
        if version != KB_VERSION {
            return Err(D2kError::format(at, format!("unsupported version {version}")));
        }
        let at = r.pos();
        let dim = r.u32("vector width")? as usize;
        if dim == 0 {
            return Err(D2kError::format(at, "vector width is zero"));
        }
        let at = r.pos();
        let count = r.u64("entry count")?;
        let hash: [u8; 32] = r.take(32, "schema hash")?.try_into().unwrap();
        let expected = (count as u128) * entry_len(dim) as u128;
        if expected != r.remaining() as u128 {
            return Err(D2kError::format(
                at,
                format!("{count} entries need {expected} bytes, file holds {}", r.remaining()),
            ));
        }
        let mut kb = KnowledgeBase::new(dim, hash);
        let mut prev: Option<TernaryKey> = None;
        let mut vec = vec![0f32; dim];
        for _ in 0..count {
            let at = r.pos();
            let fields = [r.u16("field index")?, r.u16("field index")?, r.u16("field index")?];
            let values = [r.u32("value id")?, r.u32("value id")?, r.u32("value id")?];
            let key = TernaryKey::new(fields, values);
            if prev.is_some_and(|p| p >= key) {
                return Err(D2kError::format(at, "entries are not in ascending key order"));
            }
            for x in vec.iter_mut() {
                *x = r.f32("vector")?;
            }
            kb.insert(key, &vec)?;
            prev = Some(key);
        }
        r.expect_end()?;
        Ok(kb)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
