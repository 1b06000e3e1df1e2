//! Checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SXCK" | version u16 | count u32 |
//!   count x ( name_len u16 | name bytes | rank u8 | rank x extent u32 | f64 payload )
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

use super::params::ParamStore;
use super::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SXCK";
pub const VERSION: u16 = 1;

pub fn encode(named: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&u32::try_from(named.len()).map_err(fmt_err)?.to_le_bytes());
    for (name, t) in named {
        let nb = name.as_bytes();
        out.extend_from_slice(&u16::try_from(nb.len()).map_err(fmt_err)?.to_le_bytes());
        out.extend_from_slice(nb);
        out.push(u8::try_from(t.rank()).map_err(fmt_err)?);
        for &e in t.shape() {
            out.extend_from_slice(&u32::try_from(e).map_err(fmt_err)?.to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn fmt_err<E: std::fmt::Display>(e: E) -> Error {
    Error::Format(e.to_string())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format(format!(
                "truncated checkpoint at byte {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(buf: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = c.u16()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = c.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = c.u16()? as usize;
        let name = String::from_utf8(c.take(len)?.to_vec()).map_err(fmt_err)?;
        let rank = c.u8()? as usize;
        let shape = (0..rank)
            .map(|_| c.u32().map(|e| e as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| c.f64()).collect::<Result<Vec<_>>>()?;
        let t = Tensor::new(&shape, data).map_err(|e| Error::Format(e.to_string()))?;
        out.push((name, t));
    }
    if c.pos != buf.len() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    Ok(out)
}

pub fn write_checkpoint(path: &Path, store: &ParamStore) -> Result<()> {
    let bytes = encode(&store.named_tensors())?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    decode(&buf)
}

/// Loads a checkpoint into an already-constructed store of the same architecture.
pub fn load_into(path: &Path, store: &mut ParamStore) -> Result<()> {
    let named = read_checkpoint(path)?;
    store.load_named(&named)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<(String, Tensor)> {
        vec![
            ("a.w".to_string(), Tensor::new(&[2, 3], vec![1.0, -2.5, 3.0, 0.0, 1e-300, 7.0]).unwrap()),
            ("b".to_string(), Tensor::vector(vec![f64::MIN_POSITIVE])),
        ]
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&sample()).unwrap();
        assert_eq!(&bytes[..4], b"SXCK");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
        assert_eq!(u32::from_le_bytes(bytes[6..10].try_into().unwrap()), 2);
        // first entry: name length 3, "a.w", rank 2, extents 2 and 3
        assert_eq!(u16::from_le_bytes([bytes[10], bytes[11]]), 3);
        assert_eq!(&bytes[12..15], b"a.w");
        assert_eq!(bytes[15], 2);
        let expected_len = 10 + (2 + 3 + 1 + 8 + 48) + (2 + 1 + 1 + 4 + 8);
        assert_eq!(bytes.len(), expected_len);
    }

    #[test]
    fn round_trip_is_exact() {
        let s = sample();
        assert_eq!(decode(&encode(&s).unwrap()).unwrap(), s);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = encode(&sample()).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Format(_))));
        assert!(matches!(decode(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
        let mut wrong_version = bytes;
        wrong_version[4] = 9;
        assert!(matches!(decode(&wrong_version), Err(Error::Format(_))));
    }
}
