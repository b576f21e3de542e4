//! Flat binary container for named arrays.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "DCGLRCKP"
//! version  u32
//! n_meta   u32, then n_meta × (u32 key len, key, u32 value len, value)
//! n_array  u32, then n_array × (u32 name len, name, u32 rank,
//!                               rank × u64 dims, prod(dims) × f64)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"DCGLRCKP";
pub const VERSION: u32 = 1;

const MAX_NAME: usize = 1 << 16;
const MAX_RANK: usize = 8;

/// Metadata strings plus named arrays, in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    pub meta: Vec<(String, String)>,
    pub arrays: Vec<(String, Tensor)>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl ToString) {
        let key = key.into();
        let value = value.to_string();
        match self.meta.iter_mut().find(|(k, _)| *k == key) {
            Some(entry) => entry.1 = value,
            None => self.meta.push((key, value)),
        }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    /// Parsed metadata value; missing or malformed keys are format errors.
    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self
            .meta(key)
            .ok_or_else(|| Error::Format(format!("missing metadata key {key}")))?;
        raw.parse()
            .map_err(|_| Error::Format(format!("bad value {raw:?} for metadata key {key}")))
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.arrays.push((name.into(), t));
    }

    pub fn array(&self, name: &str) -> Option<&Tensor> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn take_array(&mut self, name: &str) -> Result<Tensor> {
        let pos = self
            .arrays
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::Format(format!("missing array {name}")))?;
        Ok(self.arrays.remove(pos).1)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.meta.len() as u32).to_le_bytes())?;
        for (k, v) in &self.meta {
            write_str(w, k)?;
            write_str(w, v)?;
        }
        w.write_all(&(self.arrays.len() as u32).to_le_bytes())?;
        for (name, t) in &self.arrays {
            write_str(w, name)?;
            w.write_all(&(t.rank() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        read_exact(r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let mut out = Archive::new();
        for _ in 0..read_u32(r)? {
            let k = read_str(r)?;
            let v = read_str(r)?;
            out.meta.push((k, v));
        }
        for _ in 0..read_u32(r)? {
            let name = read_str(r)?;
            let rank = read_u32(r)? as usize;
            if rank > MAX_RANK {
                return Err(Error::Format(format!(
                    "array {name}: rank {rank} too large"
                )));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut b = [0u8; 8];
                read_exact(r, &mut b)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("array {name}: size overflow")))?;
            let mut data = Vec::with_capacity(n.min(1 << 24));
            for _ in 0..n {
                let mut b = [0u8; 8];
                read_exact(r, &mut b)?;
                data.push(f64::from_le_bytes(b));
            }
            out.arrays.push((name, Tensor::new(shape, data)?));
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("truncated checkpoint".into()),
        _ => Error::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let len = read_u32(r)? as usize;
    if len > MAX_NAME {
        return Err(Error::Format(format!("string of {len} bytes too long")));
    }
    let mut b = vec![0u8; len];
    read_exact(r, &mut b)?;
    String::from_utf8(b).map_err(|_| Error::Format("string is not UTF-8".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Archive {
        let mut a = Archive::new();
        a.set_meta("kind", "test");
        a.set_meta("seed", 42);
        a.push(
            "w",
            Tensor::new(vec![2, 2], vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap(),
        );
        a.push("s", Tensor::scalar(std::f64::consts::PI));
        a
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let a = sample();
        let mut buf = Vec::new();
        a.write_to(&mut buf).unwrap();
        let b = Archive::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(a.meta, b.meta);
        for ((na, ta), (nb, tb)) in a.arrays.iter().zip(&b.arrays) {
            assert_eq!(na, nb);
            assert_eq!(ta.shape(), tb.shape());
            let bits_a: Vec<u64> = ta.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = tb.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
        assert_eq!(b.meta_parse::<u64>("seed").unwrap(), 42);
    }

    #[test]
    fn truncation_and_bad_magic_are_format_errors() {
        let mut buf = Vec::new();
        sample().write_to(&mut buf).unwrap();
        for cut in [0, 5, 12, buf.len() - 1] {
            assert!(matches!(
                Archive::read_from(&mut &buf[..cut]),
                Err(Error::Format(_))
            ));
        }
        buf[0] = b'X';
        assert!(matches!(
            Archive::read_from(&mut buf.as_slice()),
            Err(Error::Format(_))
        ));
    }
}
