//! Payload codecs: top-k sparsification and binary16 quantization.
//!
//! Wire layouts (little-endian):
//!
//! | codec | bytes |
//! |-------|-------|
//! | dense | `n` values at the package dtype |
//! | top-k | `n: u64`, then `k` u32 indices, then `k` values at the package dtype |
//! | f16   | `n: u64`, then `n` binary16 halfwords |

use half::f16;
use thiserror::Error;

use crate::packaging::{CompressionTag, DType};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CompressError {
    #[error("k = {k} out of range for a vector of length {n}")]
    BadK { k: usize, n: usize },
    #[error("corrupt payload: {0}")]
    CorruptPayload(String),
}

fn corrupt(msg: impl Into<String>) -> CompressError {
    CompressError::CorruptPayload(msg.into())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparsePayload {
    n: usize,
    indices: Vec<u32>,
    values: Vec<f64>,
}

impl SparsePayload {
    pub fn new(n: usize, indices: Vec<u32>, values: Vec<f64>) -> Result<Self, CompressError> {
        let p = Self { n, indices, values };
        p.validate()?;
        Ok(p)
    }

    fn validate(&self) -> Result<(), CompressError> {
        if self.indices.len() != self.values.len() {
            return Err(corrupt("index and value counts differ"));
        }
        if self.indices.len() > self.n {
            return Err(corrupt("more entries than the dense length"));
        }
        if !self.indices.windows(2).all(|w| w[0] < w[1]) {
            return Err(corrupt("indices not strictly increasing"));
        }
        if self.indices.last().is_some_and(|&i| i as usize >= self.n) {
            return Err(corrupt("index out of range"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn k(&self) -> usize {
        self.indices.len()
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn to_bytes(&self, dtype: DType) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.k() * (4 + dtype.width()));
        out.extend_from_slice(&(self.n as u64).to_le_bytes());
        for i in &self.indices {
            out.extend_from_slice(&i.to_le_bytes());
        }
        out.extend_from_slice(&dtype.encode(&self.values));
        out
    }

    pub fn from_bytes(bytes: &[u8], dtype: DType) -> Result<Self, CompressError> {
        if bytes.len() < 8 {
            return Err(corrupt("missing length field"));
        }
        let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let body = &bytes[8..];
        let entry = 4 + dtype.width();
        if !body.len().is_multiple_of(entry) {
            return Err(corrupt("body is not a whole number of entries"));
        }
        let k = body.len() / entry;
        let indices = body[..4 * k]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let values = dtype.decode(&body[4 * k..]).expect("length checked");
        Self::new(n, indices, values)
    }
}

/// Keeps the `k` entries of largest magnitude, ties going to the lower index.
pub fn topk_encode(v: &[f64], k: usize) -> Result<SparsePayload, CompressError> {
    let n = v.len();
    if k == 0 || k > n || n > u32::MAX as usize {
        return Err(CompressError::BadK { k, n });
    }
    let mut order: Vec<u32> = (0..n as u32).collect();
    let by_rank = |a: &u32, b: &u32| {
        v[*b as usize]
            .abs()
            .total_cmp(&v[*a as usize].abs())
            .then(a.cmp(b))
    };
    if k < n {
        order.select_nth_unstable_by(k - 1, by_rank);
        order.truncate(k);
    }
    order.sort_unstable();
    let values = order.iter().map(|&i| v[i as usize]).collect();
    Ok(SparsePayload {
        n,
        indices: order,
        values,
    })
}

pub fn topk_decode(p: &SparsePayload) -> Result<Vec<f64>, CompressError> {
    p.validate()?;
    let mut out = vec![0.0; p.n];
    for (&i, &x) in p.indices.iter().zip(&p.values) {
        out[i as usize] = x;
    }
    Ok(out)
}

/// Largest finite binary16 value.
pub const F16_MAX: f64 = 65504.0;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantizedPayload {
    halfwords: Vec<u16>,
}

impl QuantizedPayload {
    pub fn halfwords(&self) -> &[u16] {
        &self.halfwords
    }

    pub fn len(&self) -> usize {
        self.halfwords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.halfwords.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 2 * self.len());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for h in &self.halfwords {
            out.extend_from_slice(&h.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CompressError> {
        if bytes.len() < 8 {
            return Err(corrupt("missing length field"));
        }
        let n = u64::from_le_bytes(bytes[..8].try_into().unwrap());
        if (bytes.len() - 8) as u64 != n.saturating_mul(2) {
            return Err(corrupt(format!("declared {n} halfwords, found {} bytes", bytes.len() - 8)));
        }
        let halfwords = bytes[8..]
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]))
            .collect();
        Ok(Self { halfwords })
    }
}

/// Round-to-nearest-even binary16; magnitudes beyond the half range saturate
/// to ±65504 instead of overflowing to infinity.
pub fn quantize_f16(v: &[f64]) -> QuantizedPayload {
    let halfwords = v
        .iter()
        .map(|&x| {
            let x = if x.is_finite() { x.clamp(-F16_MAX, F16_MAX) } else { x };
            to_half_bits(x)
        })
        .collect();
    QuantizedPayload { halfwords }
}

/// Correctly rounded f64 to binary16. `half` may convert through f32 on some
/// targets, which double-rounds values just below a midpoint, so the result
/// is checked against its neighbours.
fn to_half_bits(x: f64) -> u16 {
    if !x.is_finite() {
        return f16::from_f64(x).to_bits();
    }
    let a = x.abs();
    let guess = f16::from_f64(a).to_bits();
    let err = |b: u16| (f16::from_bits(b).to_f64() - a).abs();
    let mut best = guess;
    for b in [guess.wrapping_sub(1), guess + 1] {
        if b > 0x7BFF {
            continue;
        }
        let (e, eb) = (err(b), err(best));
        if e < eb || (e == eb && b % 2 == 0) {
            best = b;
        }
    }
    if x.is_sign_negative() {
        best | 0x8000
    } else {
        best
    }
}

pub fn dequantize_f16(p: &QuantizedPayload) -> Vec<f64> {
    p.halfwords
        .iter()
        .map(|&h| f16::from_bits(h).to_f64())
        .collect()
}

/// Codec choice for a vector of known length.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Codec {
    Dense,
    TopK { k: usize },
    F16,
}

impl Codec {
    pub fn tag(self) -> CompressionTag {
        match self {
            Codec::Dense => CompressionTag::None,
            Codec::TopK { .. } => CompressionTag::TopK,
            Codec::F16 => CompressionTag::F16,
        }
    }

    /// Bytes the codec produces for a length-`n` vector at `dtype`.
    pub fn encoded_len(self, n: usize, dtype: DType) -> usize {
        match self {
            Codec::Dense => n * dtype.width(),
            Codec::TopK { k } => 8 + k * (4 + dtype.width()),
            Codec::F16 => 8 + 2 * n,
        }
    }

    pub fn encode(self, v: &[f64], dtype: DType) -> Result<Vec<u8>, CompressError> {
        Ok(match self {
            Codec::Dense => dtype.encode(v),
            Codec::TopK { k } => topk_encode(v, k)?.to_bytes(dtype),
            Codec::F16 => quantize_f16(v).to_bytes(),
        })
    }
}

/// Decodes a codec payload identified by its header tag back to a dense vector.
pub fn decode_dense(
    bytes: &[u8],
    tag: CompressionTag,
    dtype: DType,
) -> Result<Vec<f64>, CompressError> {
    match tag {
        CompressionTag::None => dtype
            .decode(bytes)
            .ok_or_else(|| corrupt("dense payload is not a whole number of values")),
        CompressionTag::TopK => topk_decode(&SparsePayload::from_bytes(bytes, dtype)?),
        CompressionTag::F16 => Ok(dequantize_f16(&QuantizedPayload::from_bytes(bytes)?)),
    }
}

/// Dense-to-encoded size ratio as an exact fraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ratio {
    pub dense_bytes: usize,
    pub encoded_bytes: usize,
}

impl Ratio {
    pub fn as_f64(self) -> f64 {
        self.dense_bytes as f64 / self.encoded_bytes as f64
    }

    /// `dense / encoded >= factor`, compared without division.
    pub fn at_least(self, factor: usize) -> bool {
        self.dense_bytes >= factor * self.encoded_bytes
    }
}

/// Compression ratio against dense f32 (4 bytes per value), with top-k
/// values also counted as f32.
pub fn measured_ratio(codec: Codec, n: usize) -> Ratio {
    Ratio {
        dense_bytes: Codec::Dense.encoded_len(n, DType::F32),
        encoded_bytes: codec.encoded_len(n, DType::F32),
    }
}

/// Largest `k` for which top-k reaches `factor`× against dense f32:
/// `4n >= factor * (8k + 8)`. `None` if even `k = 1` falls short.
pub fn topk_threshold(n: usize, factor: usize) -> Option<usize> {
    let k = (4 * n / factor).checked_sub(8)? / 8;
    (k >= 1).then_some(k.min(n))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn topk_examples() {
        let p = topk_encode(&[1.0, -5.0, 3.0], 1).unwrap();
        assert_eq!(p.indices(), &[1]);
        assert_eq!(p.values(), &[-5.0]);

        let v = [0.5, -0.25, 8.0];
        let p = topk_encode(&v, 3).unwrap();
        assert_eq!(p.indices(), &[0, 1, 2]);
        assert_eq!(p.values(), &v);

        let p = topk_encode(&[2.0, -2.0, 0.0], 1).unwrap();
        assert_eq!(p.indices(), &[0]);
    }

    #[test]
    fn topk_bad_k() {
        assert_eq!(topk_encode(&[1.0], 0), Err(CompressError::BadK { k: 0, n: 1 }));
        assert_eq!(topk_encode(&[1.0], 2), Err(CompressError::BadK { k: 2, n: 1 }));
    }

    #[test]
    fn topk_decode_example_and_errors() {
        let p = SparsePayload::new(3, vec![1], vec![-5.0]).unwrap();
        assert_eq!(topk_decode(&p).unwrap(), vec![0.0, -5.0, 0.0]);
        assert!(SparsePayload::new(3, vec![3], vec![1.0]).is_err());
        assert!(SparsePayload::new(3, vec![1, 1], vec![1.0, 2.0]).is_err());
        assert!(SparsePayload::new(3, vec![1], vec![]).is_err());
        let bad = SparsePayload {
            n: 2,
            indices: vec![1, 0],
            values: vec![1.0, 1.0],
        };
        assert!(matches!(topk_decode(&bad), Err(CompressError::CorruptPayload(_))));
    }

    #[test]
    fn sparse_wire_round_trip() {
        let p = topk_encode(&[0.0, 1.5, -3.25, 0.125, 9.0], 2).unwrap();
        let bytes = p.to_bytes(DType::F32);
        assert_eq!(bytes.len(), Codec::TopK { k: 2 }.encoded_len(5, DType::F32));
        assert_eq!(SparsePayload::from_bytes(&bytes, DType::F32).unwrap(), p);
        assert!(SparsePayload::from_bytes(&bytes[..bytes.len() - 1], DType::F32).is_err());
    }

    #[test]
    fn f16_examples() {
        let q = quantize_f16(&[1.0, 0.5, -2.0, 1e6, -1e6]);
        assert_eq!(dequantize_f16(&q), vec![1.0, 0.5, -2.0, 65504.0, -65504.0]);
        let bytes = q.to_bytes();
        assert_eq!(bytes.len(), 8 + 10);
        assert_eq!(QuantizedPayload::from_bytes(&bytes).unwrap(), q);
        assert!(QuantizedPayload::from_bytes(&bytes[..9]).is_err());
    }

    #[test]
    fn ratio_examples() {
        let r = measured_ratio(Codec::TopK { k: 500 }, 100_000);
        assert_eq!((r.dense_bytes, r.encoded_bytes), (400_000, 4008));
        assert!(!r.at_least(100));
        assert!(measured_ratio(Codec::TopK { k: 499 }, 100_000).at_least(100));
        assert_eq!(topk_threshold(100_000, 100), Some(499));

        let r = measured_ratio(Codec::F16, 1000);
        assert_eq!((r.dense_bytes, r.encoded_bytes), (4000, 2008));
        assert!((r.as_f64() - 1.992).abs() < 1e-3);

        assert!(measured_ratio(Codec::TopK { k: 50 }, 50).as_f64() < 1.0);
        assert_eq!(topk_threshold(100, 100), None);
    }

    #[test]
    fn decode_dense_dispatches_on_tag() {
        let v = [1.0, -2.0, 0.0, 4.0];
        for (codec, dtype) in [
            (Codec::Dense, DType::F64),
            (Codec::Dense, DType::F32),
            (Codec::TopK { k: 4 }, DType::F64),
            (Codec::F16, DType::F32),
        ] {
            let bytes = codec.encode(&v, dtype).unwrap();
            assert_eq!(bytes.len(), codec.encoded_len(v.len(), dtype));
            assert_eq!(decode_dense(&bytes, codec.tag(), dtype).unwrap(), v);
        }
        assert!(decode_dense(&[0; 3], CompressionTag::None, DType::F32).is_err());
    }
}
