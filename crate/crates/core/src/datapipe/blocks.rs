//! Length-prefixed little-endian tensor blocks.
//!
//! ```text
//! file   := magic "PSEX" | version u32 | count u32 | block* | sha256(preceding bytes)
//! block  := name_len u32 | name utf-8 | dtype u8 | ndim u8 | dim u32 * ndim | payload
//! dtype  := 1 (f32) | 2 (u32); the payload holds product(dims) values
//! ```

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use super::DataError;

const MAGIC: &[u8; 4] = b"PSEX";
pub const BLOCK_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub enum BlockData {
    F32(Vec<f32>),
    U32(Vec<u32>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub dims: Vec<usize>,
    pub data: BlockData,
}

#[derive(Default)]
pub struct BlockWriter {
    count: u32,
    body: Vec<u8>,
}

impl BlockWriter {
    fn header(&mut self, name: &str, dtype: u8, dims: &[usize]) {
        self.count += 1;
        self.body.extend_from_slice(&(name.len() as u32).to_le_bytes());
        self.body.extend_from_slice(name.as_bytes());
        self.body.push(dtype);
        self.body.push(dims.len() as u8);
        for &d in dims {
            self.body.extend_from_slice(&(d as u32).to_le_bytes());
        }
    }

    pub fn f32(&mut self, name: &str, dims: &[usize], values: impl IntoIterator<Item = f64>) {
        self.header(name, 1, dims);
        for v in values {
            self.body.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }

    pub fn u32(&mut self, name: &str, dims: &[usize], values: impl IntoIterator<Item = u32>) {
        self.header(name, 2, dims);
        for v in values {
            self.body.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn finish(self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.body.len() + 12 + DIGEST_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&BLOCK_VERSION.to_le_bytes());
        out.extend_from_slice(&self.count.to_le_bytes());
        out.extend_from_slice(&self.body);
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DataError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| DataError::Corrupt("block file is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, DataError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, DataError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }
}

pub fn read_blocks(bytes: &[u8]) -> Result<BTreeMap<String, Block>, DataError> {
    if bytes.len() < 12 + DIGEST_LEN || &bytes[..4] != MAGIC {
        return Err(DataError::Corrupt("not a tensor block file".into()));
    }
    let (content, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(content).as_slice() != digest {
        return Err(DataError::Corrupt("checksum mismatch".into()));
    }
    let mut cur = Cursor { bytes: content, pos: 4 };
    let version = cur.u32()?;
    if version != BLOCK_VERSION {
        return Err(DataError::Schema { found: version, expected: BLOCK_VERSION });
    }
    let count = cur.u32()?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let name_len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| DataError::Corrupt("block name is not utf-8".into()))?
            .to_string();
        let dtype = cur.u8()?;
        let ndim = cur.u8()? as usize;
        let dims: Vec<usize> = (0..ndim).map(|_| cur.u32().map(|d| d as usize)).collect::<Result<_, _>>()?;
        let numel = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel.ok_or_else(|| DataError::Corrupt(format!("block `{name}` is too large")))?;
        let raw = cur.take(numel.checked_mul(4).ok_or_else(|| DataError::Corrupt("block size overflow".into()))?)?;
        let words = raw.chunks_exact(4).map(|c| <[u8; 4]>::try_from(c).expect("four bytes"));
        let data = match dtype {
            1 => BlockData::F32(words.map(f32::from_le_bytes).collect()),
            2 => BlockData::U32(words.map(u32::from_le_bytes).collect()),
            d => return Err(DataError::Corrupt(format!("block `{name}` has unknown dtype {d}"))),
        };
        if out.insert(name.clone(), Block { dims, data }).is_some() {
            return Err(DataError::Corrupt(format!("duplicate block `{name}`")));
        }
    }
    if cur.pos != content.len() {
        return Err(DataError::Corrupt("trailing bytes after the last block".into()));
    }
    Ok(out)
}

/// Typed access to a decoded block map.
pub struct Blocks(pub BTreeMap<String, Block>);

impl Blocks {
    fn get(&self, name: &str) -> Result<&Block, DataError> {
        self.0.get(name).ok_or_else(|| DataError::Corrupt(format!("missing block `{name}`")))
    }

    pub fn f32(&self, name: &str, dims: &[usize]) -> Result<Vec<f64>, DataError> {
        let b = self.get(name)?;
        match &b.data {
            BlockData::F32(v) if b.dims == dims => Ok(v.iter().map(|&x| x as f64).collect()),
            _ => Err(DataError::Corrupt(format!("block `{name}` is not f32 {dims:?}"))),
        }
    }

    /// A `u32` block with the given rank; returns its dims too.
    pub fn u32(&self, name: &str, rank: usize) -> Result<(Vec<usize>, &[u32]), DataError> {
        let b = self.get(name)?;
        match &b.data {
            BlockData::U32(v) if b.dims.len() == rank => Ok((b.dims.clone(), v)),
            _ => Err(DataError::Corrupt(format!("block `{name}` is not rank-{rank} u32"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<u8> {
        let mut w = BlockWriter::default();
        w.f32("a", &[2, 2], [1.0, 2.0, 3.5, -1.0]);
        w.u32("b", &[3], [7, 8, 9]);
        w.u32("empty", &[0, 2], []);
        w.finish()
    }

    #[test]
    fn round_trip() {
        let blocks = Blocks(read_blocks(&sample()).unwrap());
        assert_eq!(blocks.f32("a", &[2, 2]).unwrap(), vec![1.0, 2.0, 3.5, -1.0]);
        assert_eq!(blocks.u32("b", 1).unwrap().1, &[7, 8, 9]);
        assert_eq!(blocks.u32("empty", 2).unwrap().0, vec![0, 2]);
        assert!(blocks.f32("a", &[4]).is_err());
    }

    #[test]
    fn damage_is_detected() {
        let good = sample();
        let mut flipped = good.clone();
        flipped[20] ^= 0x40;
        assert!(matches!(read_blocks(&flipped), Err(DataError::Corrupt(_))));
        assert!(read_blocks(&good[..good.len() - 5]).is_err());
        assert!(read_blocks(b"nope").is_err());
    }
}
