//! Binary checkpoints for a [`ParamStore`].
//!
//! Layout (little-endian): magic `FFLD`, version `u32`, block count `u32`,
//! then per block: name length `u16`, UTF-8 name, value count `u64`, values
//! as `f32`. Values are stored at `f32` precision by design; loading widens
//! them back to `f64`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::store::ParamStore;
use super::DiffError;

const MAGIC: [u8; 4] = *b"FFLD";
const VERSION: u32 = 1;

pub fn save_checkpoint(store: &ParamStore, path: &Path) -> Result<(), DiffError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let count = store.block_ids().count() as u32;
    w.write_all(&count.to_le_bytes())?;
    for (id, name) in store.block_ids() {
        let bytes = name.as_bytes();
        if bytes.len() > u16::MAX as usize {
            return Err(DiffError::Checkpoint(format!(
                "block name '{:.32}...' too long",
                name
            )));
        }
        w.write_all(&(bytes.len() as u16).to_le_bytes())?;
        w.write_all(bytes)?;
        let vals = store.block(id);
        w.write_all(&(vals.len() as u64).to_le_bytes())?;
        for &v in vals {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore, DiffError> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    let mut r = Reader { bytes: &bytes, pos: 0 };

    if r.take(4)? != MAGIC {
        return Err(DiffError::Checkpoint("bad magic, not a checkpoint".into()));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
    if version != VERSION {
        return Err(DiffError::Checkpoint(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let count = u32::from_le_bytes(r.take(4)?.try_into().unwrap());

    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| DiffError::Checkpoint("block name is not UTF-8".into()))?
            .to_string();
        if store.block_id(&name).is_some() {
            return Err(DiffError::Checkpoint(format!("duplicate block '{name}'")));
        }
        let n = u64::from_le_bytes(r.take(8)?.try_into().unwrap()) as usize;
        if n == 0 {
            return Err(DiffError::Checkpoint(format!("block '{name}' is empty")));
        }
        let raw = r.take(n * 4)?;
        let mut vals = Vec::with_capacity(n);
        for c in raw.chunks_exact(4) {
            let v = f32::from_le_bytes(c.try_into().unwrap());
            if !v.is_finite() {
                return Err(DiffError::Checkpoint(format!(
                    "non-finite value in block '{name}'"
                )));
            }
            vals.push(v as f64);
        }
        store.register(&name, vals);
    }
    if r.pos != bytes.len() {
        return Err(DiffError::Checkpoint(format!(
            "{} trailing bytes after last block",
            bytes.len() - r.pos
        )));
    }
    Ok(store)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DiffError> {
        if self.pos + n > self.bytes.len() {
            return Err(DiffError::Checkpoint("file is truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}
