//! Binary weight file.
//!
//! Little-endian throughout:
//!
//! ```text
//! magic      4 bytes  "RPLW"
//! version    u32
//! tensors    u32      tensor count
//! metadata   u32      entry count, then per entry: key (u32 len + utf8), value (u32 len + utf8)
//! per tensor name (u32 len + utf8), rank u32, dims u64 x rank, values f64 x product(dims)
//! ```
//!
//! Trailing bytes are rejected, so `encode(decode(b)) == b` for every valid `b`.

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"RPLW";
pub const FORMAT_VERSION: u32 = 1;

const MAX_STRING: usize = 1 << 16;
const MAX_RANK: usize = 8;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightFile {
    pub metadata: Vec<(String, String)>,
    pub tensors: Vec<NamedTensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl WeightFile {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn tensor(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

pub fn encode(file: &WeightFile) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(file.tensors.len() as u32).to_le_bytes());
    out.extend_from_slice(&(file.metadata.len() as u32).to_le_bytes());
    for (k, v) in &file.metadata {
        put_str(&mut out, k);
        put_str(&mut out, v);
    }
    for t in &file.tensors {
        put_str(&mut out, &t.name);
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &t.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format("weight file", format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        if len > MAX_STRING {
            return Err(Error::format("weight file", format!("string of {len} bytes")));
        }
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::format("weight file", "string is not UTF-8"))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

pub fn decode(bytes: &[u8]) -> Result<WeightFile> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::format("weight file", "bad magic"));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::format("weight file", format!("unsupported version {version}")));
    }
    let tensor_count = r.u32()? as usize;
    let meta_count = r.u32()? as usize;
    // Each entry needs at least 8 bytes; reject counts the input cannot hold.
    if meta_count > r.remaining() / 8 || tensor_count > r.remaining() / 8 {
        return Err(Error::format("weight file", "entry count exceeds file size"));
    }
    let mut metadata = Vec::with_capacity(meta_count);
    for _ in 0..meta_count {
        metadata.push((r.string()?, r.string()?));
    }
    let mut tensors = Vec::with_capacity(tensor_count);
    for _ in 0..tensor_count {
        let name = r.string()?;
        let rank = r.u32()? as usize;
        if rank == 0 || rank > MAX_RANK {
            return Err(Error::format("weight file", format!("tensor `{name}` has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut count: usize = 1;
        for _ in 0..rank {
            let d = usize::try_from(r.u64()?)
                .map_err(|_| Error::format("weight file", "dimension overflow"))?;
            if d == 0 {
                return Err(Error::format("weight file", format!("tensor `{name}` has a zero dimension")));
            }
            count = count
                .checked_mul(d)
                .ok_or_else(|| Error::format("weight file", "dimension overflow"))?;
            shape.push(d);
        }
        if count > r.remaining() / 8 {
            return Err(Error::format("weight file", format!("tensor `{name}` is truncated")));
        }
        let raw = r.take(count * 8)?;
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::format("weight file", format!("tensor `{name}` has non-finite values")));
        }
        tensors.push(NamedTensor { name, shape, values });
    }
    if r.remaining() != 0 {
        return Err(Error::format("weight file", format!("{} trailing bytes", r.remaining())));
    }
    Ok(WeightFile { metadata, tensors })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> WeightFile {
        WeightFile {
            metadata: vec![("hidden".into(), "64".into())],
            tensors: vec![NamedTensor {
                name: "w".into(),
                shape: vec![2, 2],
                values: vec![1.0, -2.0, 0.5, 3.25],
            }],
        }
    }

    #[test]
    fn layout_is_little_endian() {
        let bytes = encode(&sample());
        assert_eq!(&bytes[..4], b"RPLW");
        assert_eq!(&bytes[4..8], &[1, 0, 0, 0]);
        assert_eq!(&bytes[8..12], &[1, 0, 0, 0]);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = encode(&sample());
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode(&extra).is_err());
        let mut bad = bytes;
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip(values in prop::collection::vec(-1e6f64..1e6, 1..40), key in "[a-z]{1,8}") {
            let f = WeightFile {
                metadata: vec![(key, "v".into())],
                tensors: vec![NamedTensor { name: "t".into(), shape: vec![values.len()], values }],
            };
            let bytes = encode(&f);
            let back = decode(&bytes).unwrap();
            prop_assert_eq!(&back, &f);
            prop_assert_eq!(encode(&back), bytes);
        }

        #[test]
        fn decode_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..256)) {
            let _ = decode(&bytes);
        }
    }
}
