//! Keyed feature container.
//!
//! ```text
//! "SXF1" | version u16 | record count u32 |
//! index: count x ( key_len u16 | key bytes | offset u64 | length u64 )
//! payloads, each: T u32 | D u32 | span count u16 | spans (gloss u32, start u32, end u32) |
//!                 T*D f32 row-major
//! ```
//!
//! Integers and floats are little-endian; offsets are absolute file positions.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use crate::error::{Error, Result};

use super::GlossSpan;

pub const MAGIC: &[u8; 4] = b"SXF1";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub key: String,
    pub rows: usize,
    pub cols: usize,
    pub spans: Vec<GlossSpan>,
    pub data: Vec<f32>,
}

impl Record {
    pub fn new(key: impl Into<String>, rows: usize, cols: usize, spans: Vec<GlossSpan>, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Format(format!(
                "record payload has {} values for {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self {
            key: key.into(),
            rows,
            cols,
            spans,
            data,
        })
    }

    pub fn from_f64(key: impl Into<String>, rows: usize, cols: usize, spans: Vec<GlossSpan>, data: &[f64]) -> Result<Self> {
        Self::new(key, rows, cols, spans, data.iter().map(|&v| v as f32).collect())
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    fn payload(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(10 + 12 * self.spans.len() + 4 * self.data.len());
        out.extend_from_slice(&to_u32(self.rows)?.to_le_bytes());
        out.extend_from_slice(&to_u32(self.cols)?.to_le_bytes());
        let n = u16::try_from(self.spans.len()).map_err(|_| Error::Format("too many spans".into()))?;
        out.extend_from_slice(&n.to_le_bytes());
        for s in &self.spans {
            out.extend_from_slice(&to_u32(s.gloss)?.to_le_bytes());
            out.extend_from_slice(&to_u32(s.start)?.to_le_bytes());
            out.extend_from_slice(&to_u32(s.end)?.to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }
}

fn to_u32(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))
}

pub fn encode(records: &[Record]) -> Result<Vec<u8>> {
    let mut seen = HashSet::new();
    for r in records {
        if !seen.insert(r.key.as_str()) {
            return Err(Error::Format(format!("duplicate key {}", r.key)));
        }
    }
    let payloads = records.iter().map(Record::payload).collect::<Result<Vec<_>>>()?;
    let index_len: usize = records.iter().map(|r| 2 + r.key.len() + 16).sum();
    let mut offset = (4 + 2 + 4 + index_len) as u64;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&to_u32(records.len())?.to_le_bytes());
    for (r, p) in records.iter().zip(&payloads) {
        let kl = u16::try_from(r.key.len()).map_err(|_| Error::Format("key too long".into()))?;
        out.extend_from_slice(&kl.to_le_bytes());
        out.extend_from_slice(r.key.as_bytes());
        out.extend_from_slice(&offset.to_le_bytes());
        out.extend_from_slice(&(p.len() as u64).to_le_bytes());
        offset += p.len() as u64;
    }
    for p in payloads {
        out.extend_from_slice(&p);
    }
    Ok(out)
}

pub fn container_write(path: &Path, records: &[Record]) -> Result<()> {
    std::fs::write(path, encode(records)?)?;
    Ok(())
}

/// In-memory view of a container with random access by key.
#[derive(Debug)]
pub struct Container {
    bytes: Vec<u8>,
    keys: Vec<String>,
    index: HashMap<String, (usize, usize)>,
}

fn truncated() -> Error {
    Error::Format("truncated container".into())
}

fn read_at<const N: usize>(b: &[u8], pos: usize) -> Result<[u8; N]> {
    b.get(pos..pos + N)
        .map(|s| s.try_into().unwrap())
        .ok_or_else(truncated)
}

impl Container {
    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self> {
        if bytes.len() < 10 || &bytes[..4] != MAGIC {
            return Err(Error::Format("bad container magic".into()));
        }
        let version = u16::from_le_bytes(read_at(&bytes, 4)?);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported container version {version}")));
        }
        let count = u32::from_le_bytes(read_at(&bytes, 6)?) as usize;
        let mut pos = 10;
        let mut keys = Vec::with_capacity(count.min(1 << 20));
        let mut index = HashMap::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let kl = u16::from_le_bytes(read_at(&bytes, pos)?) as usize;
            pos += 2;
            let key = bytes.get(pos..pos + kl).ok_or_else(truncated)?;
            let key = String::from_utf8(key.to_vec()).map_err(|e| Error::Format(e.to_string()))?;
            pos += kl;
            let off = u64::from_le_bytes(read_at(&bytes, pos)?) as usize;
            let len = u64::from_le_bytes(read_at(&bytes, pos + 8)?) as usize;
            pos += 16;
            if off.checked_add(len).is_none_or(|end| end > bytes.len()) {
                return Err(truncated());
            }
            if index.insert(key.clone(), (off, len)).is_some() {
                return Err(Error::Format(format!("duplicate key {key}")));
            }
            keys.push(key);
        }
        Ok(Self { bytes, keys, index })
    }

    pub fn open(path: &Path) -> Result<Self> {
        Self::from_bytes(std::fs::read(path)?)
    }

    /// Keys in file order.
    pub fn keys(&self) -> &[String] {
        &self.keys
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn contains(&self, key: &str) -> bool {
        self.index.contains_key(key)
    }

    pub fn get(&self, key: &str) -> Result<Record> {
        let &(off, len) = self
            .index
            .get(key)
            .ok_or_else(|| Error::NotFound(key.to_string()))?;
        let p = &self.bytes[off..off + len];
        let rows = u32::from_le_bytes(read_at(p, 0)?) as usize;
        let cols = u32::from_le_bytes(read_at(p, 4)?) as usize;
        let ns = u16::from_le_bytes(read_at(p, 8)?) as usize;
        let mut pos = 10;
        let mut spans = Vec::with_capacity(ns);
        for _ in 0..ns {
            let g = u32::from_le_bytes(read_at(p, pos)?) as usize;
            let s = u32::from_le_bytes(read_at(p, pos + 4)?) as usize;
            let e = u32::from_le_bytes(read_at(p, pos + 8)?) as usize;
            spans.push(GlossSpan::new(g, s, e));
            pos += 12;
        }
        let n = rows * cols;
        if p.len() != pos + 4 * n {
            return Err(Error::Format(format!("record {key} payload length mismatch")));
        }
        let data = p[pos..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Record::new(key, rows, cols, spans, data)
    }

    pub fn records(&self) -> Result<Vec<Record>> {
        self.keys.iter().map(|k| self.get(k)).collect()
    }
}

pub fn container_read(path: &Path) -> Result<Vec<Record>> {
    Container::open(path)?.records()
}

/// Orders keys of the form `"{i}_{j}"` numerically; other keys sort lexically after.
pub fn sort_fold_keys(records: &mut [Record]) {
    fn parse(k: &str) -> Option<(u64, u64)> {
        let (a, b) = k.split_once('_')?;
        Some((a.parse().ok()?, b.parse().ok()?))
    }
    records.sort_by(|a, b| match (parse(&a.key), parse(&b.key)) {
        (Some(x), Some(y)) => x.cmp(&y),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.key.cmp(&b.key),
    });
}

/// Groups keys by their prefix before `sep`.
pub fn group_by_prefix(keys: &[String], sep: char) -> BTreeMap<&str, Vec<&str>> {
    let mut out: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for k in keys {
        let prefix = k.split(sep).next().unwrap_or(k);
        out.entry(prefix).or_default().push(k);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(key: &str, rows: usize, cols: usize) -> Record {
        let data = (0..rows * cols).map(|i| i as f32 * 0.5 - 1.0).collect();
        Record::new(key, rows, cols, vec![GlossSpan::new(4, 0, rows - 1)], data).unwrap()
    }

    #[test]
    fn empty_container_is_valid() {
        let bytes = encode(&[]).unwrap();
        assert_eq!(bytes.len(), 10);
        let c = Container::from_bytes(bytes).unwrap();
        assert!(c.is_empty());
    }

    #[test]
    fn absent_key_is_not_found() {
        let c = Container::from_bytes(encode(&[rec("0_0", 2, 3)]).unwrap()).unwrap();
        assert!(matches!(c.get("9_9"), Err(Error::NotFound(_))));
    }

    #[test]
    fn duplicate_keys_rejected() {
        assert!(matches!(
            encode(&[rec("a", 1, 1), rec("a", 1, 1)]),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn corruption_detected() {
        let bytes = encode(&[rec("k", 3, 2)]).unwrap();
        let mut bad = bytes.clone();
        bad[1] = b'Z';
        assert!(Container::from_bytes(bad).is_err());
        assert!(Container::from_bytes(bytes[..bytes.len() - 3].to_vec()).is_err());
        let mut v = bytes;
        v[4] = 2;
        assert!(Container::from_bytes(v).is_err());
    }

    #[test]
    fn layout_of_single_record() {
        let r = Record::new("ab", 1, 2, vec![GlossSpan::new(5, 0, 0)], vec![1.0, 2.0]).unwrap();
        let b = encode(&[r]).unwrap();
        // header 10 + index (2 + 2 + 16) = 30, payload 4 + 4 + 2 + 12 + 8 = 30
        assert_eq!(b.len(), 60);
        assert_eq!(u64::from_le_bytes(b[14..22].try_into().unwrap()), 30);
        assert_eq!(u64::from_le_bytes(b[22..30].try_into().unwrap()), 30);
        assert_eq!(f32::from_le_bytes(b[56..60].try_into().unwrap()), 2.0);
    }

    proptest! {
        #[test]
        fn round_trip_bit_exact(
            shapes in proptest::collection::vec((1usize..5, 1usize..6), 0..6),
            seed in any::<u32>(),
        ) {
            let records: Vec<Record> = shapes
                .iter()
                .enumerate()
                .map(|(i, &(r, c))| {
                    let data = (0..r * c)
                        .map(|k| f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add(k as u32 * 7919) & 0x7f7f_ffff))
                        .collect();
                    Record::new(format!("{i}_{}", i * 3), r, c, vec![GlossSpan::new(i, 0, r - 1)], data).unwrap()
                })
                .collect();
            let back = Container::from_bytes(encode(&records).unwrap()).unwrap().records().unwrap();
            prop_assert_eq!(back.len(), records.len());
            for (a, b) in back.iter().zip(&records) {
                prop_assert_eq!(&a.key, &b.key);
                prop_assert_eq!(&a.spans, &b.spans);
                let bits_a: Vec<u32> = a.data.iter().map(|v| v.to_bits()).collect();
                let bits_b: Vec<u32> = b.data.iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(bits_a, bits_b);
            }
        }
    }
}
