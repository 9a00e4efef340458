//! Binary tensor payloads exchanged with the scoring service.
//!
//! ```text
//! offset  size        field
//! 0       4           magic "TPv1"
//! 4       4           dtype code, u32 LE (1 = float32)
//! 8       4           rank, u32 LE
//! 12      4           reserved, zero
//! 16      8 × rank    shape, u64 LE each
//! ...     4 × Π shape data, f32 LE, row-major
//! ```

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TPv1";
pub const DTYPE_F32: u32 = 1;
pub const HEADER_LEN: usize = 16;
pub const CONTENT_TYPE: &str = "application/octet-stream";

/// A row-major float32 tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorPayload {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl TensorPayload {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!("shape {shape:?} needs {expected} values, got {}", data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * self.shape.len() + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&DTYPE_F32.to_le_bytes());
        out.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        out.extend_from_slice(&0u32.to_le_bytes());
        for &d in &self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: String| Error::Protocol(format!("tensor payload: {msg}"));
        if bytes.len() < HEADER_LEN {
            return Err(bad(format!("{} bytes is shorter than the header", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(bad("bad magic".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let dtype = word(4);
        if dtype != DTYPE_F32 {
            return Err(bad(format!("unsupported dtype code {dtype}")));
        }
        let rank = word(8) as usize;
        let data_start = HEADER_LEN + 8 * rank;
        if bytes.len() < data_start {
            return Err(bad("truncated shape".into()));
        }
        let shape: Vec<usize> = (0..rank)
            .map(|k| {
                let at = HEADER_LEN + 8 * k;
                u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap()) as usize
            })
            .collect();
        let count = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or_else(|| bad("shape overflows".into()))?;
        let body = &bytes[data_start..];
        if body.len() != count * 4 {
            return Err(bad(format!("shape {shape:?} needs {} data bytes, got {}", count * 4, body.len())));
        }
        let data = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(Self { shape, data })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let p = TensorPayload::new(vec![1, 2], vec![1.0, -2.5]).unwrap();
        let bytes = p.encode();
        assert_eq!(&bytes[..4], b"TPv1");
        assert_eq!(bytes.len(), 16 + 16 + 8);
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[16..24], &1u64.to_le_bytes());
    }

    #[test]
    fn corrupt_payloads_are_protocol_errors() {
        let p = TensorPayload::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap().encode();
        assert!(matches!(TensorPayload::decode(&p[..p.len() - 1]), Err(Error::Protocol(_))));
        let mut q = p.clone();
        q[0] = b'X';
        assert!(TensorPayload::decode(&q).is_err());
        let mut q = p;
        q[4] = 2;
        assert!(TensorPayload::decode(&q).is_err());
        assert!(TensorPayload::new(vec![2, 2], vec![0.0; 3]).is_err());
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(shape in proptest::collection::vec(0usize..5, 0..4), seed in any::<u32>()) {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = (0..n).map(|i| f32::from_bits(seed.wrapping_add(i as u32 * 7919) % 0x7f00_0000)).collect();
            let p = TensorPayload::new(shape, data).unwrap();
            prop_assert_eq!(TensorPayload::decode(&p.encode()).unwrap(), p);
        }
    }
}
