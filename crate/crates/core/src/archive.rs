//! Versioned binary archive of named `f32` tensors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes   b"PGANCKPT"
//! version      u32
//! count        u32       number of entries
//! entry*       name_len u32, name (utf-8), rank u32, dims u32 * rank,
//!              data f32 * prod(dims)
//! ```
//!
//! Integers and `f64` values that must survive exactly are split into
//! `f32`-representable pieces (see [`encode_u64`], [`encode_f64`]).

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 8] = b"PGANCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    entries: Vec<(String, Tensor<f32>)>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<f32>) {
        self.entries.push((name.into(), tensor));
    }

    pub fn entries(&self) -> &[(String, Tensor<f32>)] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<f32>> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Checkpoint(format!("missing entry '{name}'")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.iter().any(|(n, _)| n == name)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, t) in &self.entries {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.rank() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(t.len() * 4);
            for &x in t.data() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic, "magic")?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&magic),
                String::from_utf8_lossy(MAGIC)
            )));
        }
        let version = read_u32(&mut r, "version")?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version}, this build reads version {VERSION}"
            )));
        }
        let count = read_u32(&mut r, "entry count")? as usize;
        let mut entries = Vec::with_capacity(count.min(4096));
        for i in 0..count {
            let len = read_u32(&mut r, "name length")? as usize;
            if len > r.len() {
                return Err(Error::Checkpoint(format!("entry {i}: truncated name")));
            }
            let mut name = vec![0u8; len];
            read_exact(&mut r, &mut name, "name")?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Checkpoint(format!("entry {i}: name is not utf-8")))?;
            let rank = read_u32(&mut r, "rank")? as usize;
            if rank == 0 || rank > 8 {
                return Err(Error::Checkpoint(format!("entry '{name}': invalid rank {rank}")));
            }
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(read_u32(&mut r, "dimension")? as usize);
            }
            let count: usize = dims.iter().product();
            if count.checked_mul(4).map_or(true, |b| b > r.len()) {
                return Err(Error::Checkpoint(format!("entry '{name}': truncated data")));
            }
            let data: Vec<f32> = r[..count * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            r = &r[count * 4..];
            let t = Tensor::new(&dims, data)
                .map_err(|e| Error::Checkpoint(format!("entry '{name}': {e}")))?;
            entries.push((name, t));
        }
        if !r.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes after last entry", r.len())));
        }
        Ok(Archive { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8], what: &str) -> Result<()> {
    if r.len() < buf.len() {
        return Err(Error::Checkpoint(format!("truncated file while reading {what}")));
    }
    buf.copy_from_slice(&r[..buf.len()]);
    *r = &r[buf.len()..];
    Ok(())
}

fn read_u32(r: &mut &[u8], what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

/// Four 16-bit limbs, each exact in `f32`.
pub fn encode_u64(x: u64) -> Vec<f32> {
    (0..4).map(|i| ((x >> (16 * i)) & 0xFFFF) as f32).collect()
}

pub fn decode_u64(limbs: &[f32]) -> Result<u64> {
    if limbs.len() != 4 {
        return Err(Error::Checkpoint("u64 needs 4 limbs".into()));
    }
    let mut x = 0u64;
    for (i, &l) in limbs.iter().enumerate() {
        if l < 0.0 || l > 65535.0 || l.fract() != 0.0 {
            return Err(Error::Checkpoint(format!("invalid integer limb {l}")));
        }
        x |= (l as u64) << (16 * i);
    }
    Ok(x)
}

pub fn encode_u128(x: u128) -> Vec<f32> {
    let mut v = encode_u64(x as u64);
    v.extend(encode_u64((x >> 64) as u64));
    v
}

pub fn decode_u128(limbs: &[f32]) -> Result<u128> {
    if limbs.len() != 8 {
        return Err(Error::Checkpoint("u128 needs 8 limbs".into()));
    }
    Ok(decode_u64(&limbs[..4])? as u128 | (decode_u64(&limbs[4..])? as u128) << 64)
}

/// Splits each `f64` into its 64 bits as four 16-bit limbs.
pub fn encode_f64(values: &[f64]) -> Vec<f32> {
    values.iter().flat_map(|v| encode_u64(v.to_bits())).collect()
}

pub fn decode_f64(limbs: &[f32]) -> Result<Vec<f64>> {
    if limbs.len() % 4 != 0 {
        return Err(Error::Checkpoint("f64 payload length is not a multiple of 4".into()));
    }
    limbs.chunks(4).map(|c| decode_u64(c).map(f64::from_bits)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Archive {
        let mut a = Archive::new();
        a.push("w", Tensor::from_f64(&[2, 3], &[1.0, -2.0, 3.5, 0.0, 1e-3, 7.0]).unwrap());
        a.push("meta/seed", Tensor::new(&[4], encode_u64(0xDEAD_BEEF_1234_5678)).unwrap());
        a
    }

    #[test]
    fn bytes_round_trip() {
        let a = sample();
        let b = Archive::from_bytes(&a.to_bytes()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_eq!(decode_u64(b.get("meta/seed").unwrap().data()).unwrap(), 0xDEAD_BEEF_1234_5678);
    }

    #[test]
    fn tampered_magic_is_rejected() {
        let mut bytes = sample().to_bytes();
        bytes[0] = b'X';
        let err = Archive::from_bytes(&bytes).unwrap_err().to_string();
        assert!(err.contains("magic"), "{err}");
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let mut bytes = sample().to_bytes();
        bytes[8] = 99;
        let err = Archive::from_bytes(&bytes).unwrap_err().to_string();
        assert!(err.contains("version 99"), "{err}");
    }

    #[test]
    fn truncation_is_rejected() {
        let bytes = sample().to_bytes();
        assert!(Archive::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn wide_values_survive_exactly() {
        let x = u128::MAX - 12345;
        assert_eq!(decode_u128(&encode_u128(x)).unwrap(), x);
        let v = [std::f64::consts::PI, -1e-300, 123456789.123456789];
        assert_eq!(decode_f64(&encode_f64(&v)).unwrap(), v);
    }
}
