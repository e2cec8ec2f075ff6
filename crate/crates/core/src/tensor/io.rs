//! `SGT1` binary tensor files.
//!
//! Layout: magic `SGT1`, one dtype byte (0 = f32, 1 = f64), one rank byte,
//! `rank` little-endian `u32` dims, then the row-major little-endian payload.

use std::fs;
use std::path::Path;

use super::{Dtype, Real, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SGT1";

pub fn encode<T: Real>(t: &Tensor<T>) -> Vec<u8> {
    let dims = t.dims();
    let mut out = Vec::with_capacity(6 + 4 * dims.len() + t.numel() * T::DTYPE.size());
    out.extend_from_slice(MAGIC);
    out.push(T::DTYPE as u8);
    out.push(dims.len() as u8);
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

/// Decodes a tensor stored in either precision, converting to `T`.
pub fn decode<T: Real>(bytes: &[u8]) -> Result<Tensor<T>> {
    if bytes.len() < 6 || &bytes[..4] != MAGIC {
        return Err(Error::Format("missing SGT1 magic".into()));
    }
    let dtype = match bytes[4] {
        0 => Dtype::F32,
        1 => Dtype::F64,
        other => return Err(Error::Format(format!("unknown dtype byte {other}"))),
    };
    let ndim = bytes[5] as usize;
    let header = 6 + 4 * ndim;
    if ndim == 0 || bytes.len() < header {
        return Err(Error::Format("truncated header".into()));
    }
    let dims: Vec<usize> = bytes[6..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let numel: usize = dims.iter().product();
    let payload = &bytes[header..];
    if payload.len() != numel * dtype.size() {
        return Err(Error::Format(format!(
            "payload holds {} bytes, dims {:?} need {}",
            payload.len(),
            dims,
            numel * dtype.size()
        )));
    }
    let data: Vec<T> = match dtype {
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| T::from_f64_lossy(f32::read_le(c) as f64))
            .collect(),
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| T::from_f64_lossy(f64::read_le(c)))
            .collect(),
    };
    Tensor::from_vec(dims, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn save<T: Real>(t: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(t)).map_err(|e| Error::io(path, e))
}

pub fn load<T: Real>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::<f32>::from_vec([2, 1], vec![1.0, -2.0]).unwrap();
        let bytes = encode(&t);
        assert_eq!(&bytes[..4], b"SGT1");
        assert_eq!(bytes[4], 0);
        assert_eq!(bytes[5], 2);
        assert_eq!(&bytes[6..10], &2u32.to_le_bytes());
        assert_eq!(&bytes[10..14], &1u32.to_le_bytes());
        assert_eq!(&bytes[14..18], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 22);
    }

    #[test]
    fn rejects_bad_payloads() {
        assert!(decode::<f32>(b"NOPE\0\x01").is_err());
        let mut bytes = encode(&Tensor::<f64>::scalar(1.0));
        bytes.pop();
        assert!(decode::<f64>(&bytes).is_err());
    }

    proptest! {
        #[test]
        fn f64_round_trip_is_bit_exact(vals in proptest::collection::vec(-1e300f64..1e300, 1..40)) {
            let t = Tensor::<f64>::from_vec([vals.len()], vals).unwrap();
            let back: Tensor<f64> = decode(&encode(&t)).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
