//! MVGF feature files.
//!
//! Layout, all little-endian:
//!
//! | bytes       | field                                |
//! |-------------|--------------------------------------|
//! | 4           | magic `MVGF`                         |
//! | 2           | format version (`u16`, currently 1)  |
//! | 1           | dtype code (`1` = `f32`)             |
//! | 4           | rank (`u32`)                         |
//! | 4 * rank    | dims (`u32` each)                    |
//! | 4 * ∏ dims  | row-major `f32` payload              |
//!
//! Values are stored as `f32`; tensors whose entries are already
//! `f32`-representable round-trip bitwise.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MVGF";
pub const VERSION: u16 = 1;
pub const DTYPE_F32: u8 = 1;

pub fn encode(tensor: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(11 + 4 * tensor.shape().len() + 4 * tensor.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(DTYPE_F32);
    out.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
    for &d in tensor.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in tensor.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let rest = self.bytes.len() - self.pos;
        if rest < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                message: format!("truncated {what}: expected {n} bytes, found {rest}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad magic {magic:?}, expected \"MVGF\""),
        });
    }
    let version = u16::from_le_bytes(r.take(2, "version")?.try_into().expect("2 bytes"));
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            message: format!("unsupported version {version}"),
        });
    }
    let dtype = r.take(1, "dtype")?[0];
    if dtype != DTYPE_F32 {
        return Err(Error::Format {
            offset: 6,
            message: format!("unsupported dtype code {dtype}"),
        });
    }
    let rank = r.u32("rank")? as usize;
    let mut shape = Vec::with_capacity(rank.min(16));
    for _ in 0..rank {
        shape.push(r.u32("dims")? as usize);
    }
    let count = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
    let bytes_needed = count.and_then(|c| c.checked_mul(4)).ok_or_else(|| Error::Format {
        offset: r.pos as u64,
        message: format!("dims {shape:?} overflow"),
    })?;
    let payload_at = r.pos;
    let payload = r.take(bytes_needed, "payload")?;
    if r.pos != bytes.len() {
        return Err(Error::Format {
            offset: r.pos as u64,
            message: format!(
                "payload length mismatch: expected {bytes_needed} bytes, found {}",
                bytes.len() - payload_at
            ),
        });
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Tensor::new(shape, data)
}

pub fn write_feature_file(path: &Path, tensor: &Tensor) -> Result<()> {
    fs::write(path, encode(tensor))?;
    Ok(())
}

pub fn read_feature_file(path: &Path) -> Result<Tensor> {
    decode(&fs::read(path)?)
}

/// Rounds every entry to the nearest `f32`, matching what a file stores.
pub fn quantize(tensor: &Tensor) -> Tensor {
    tensor.map(|v| v as f32 as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng;

    #[test]
    fn header_layout() {
        let bytes = encode(&Tensor::zeros(&[2, 3]));
        assert_eq!(bytes.len(), 19 + 24);
        assert_eq!(&bytes[..4], b"MVGF");
        assert_eq!(&bytes[4..7], &[1, 0, 1]);
        assert_eq!(&bytes[7..19], &[2, 0, 0, 0, 2, 0, 0, 0, 3, 0, 0, 0]);
        assert_eq!(decode(&bytes).unwrap(), Tensor::zeros(&[2, 3]));
    }

    #[test]
    fn truncation_names_byte_counts() {
        let bytes = encode(&Tensor::zeros(&[2, 3]));
        let err = decode(&bytes[..bytes.len() - 5]).unwrap_err();
        match err {
            Error::Format { offset, message } => {
                assert_eq!(offset, 19);
                assert!(
                    message.contains("expected 24") && message.contains("found 19"),
                    "{message}"
                );
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            decode(b"MVGX\x01\x00\x01"),
            Err(Error::Format { offset: 0, .. })
        ));
        let mut wrong_version = bytes.clone();
        wrong_version[4] = 9;
        assert!(matches!(decode(&wrong_version), Err(Error::Format { offset: 4, .. })));
        let mut extra = bytes;
        extra.push(0);
        assert!(matches!(decode(&extra), Err(Error::Format { .. })));
    }

    #[test]
    fn random_round_trips_are_bitwise() {
        let mut rng = seeded(8);
        let dir = tempfile::tempdir().unwrap();
        for trial in 0..100 {
            let rank = rng.random_range(0..4);
            let shape: Vec<usize> = (0..rank).map(|_| rng.random_range(0..5)).collect();
            let n = shape.iter().product();
            let data = (0..n).map(|_| rng.random_range(-1e3f32..1e3) as f64).collect();
            let t = Tensor::new(shape, data).unwrap();
            let path = dir.path().join(format!("{trial}.mvgf"));
            write_feature_file(&path, &t).unwrap();
            let back = read_feature_file(&path).unwrap();
            assert_eq!(back.shape(), t.shape());
            assert!(back
                .data()
                .iter()
                .zip(t.data())
                .all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
