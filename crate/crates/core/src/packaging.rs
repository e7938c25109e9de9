//! Tensor flattening and the `Package` wire format.
//!
//! A model is shipped as a single flat vector plus a [`LayoutDescriptor`]
//! holding the original shapes. Messages are [`Package`]s: a fixed 28-byte
//! header, a slice table and a payload, prefixed with a u64 frame length.
//! All integers are little-endian. See `PROTOCOL.md` for the byte table.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: u32 = 0x4644_4C31;
pub const VERSION: u16 = 1;
/// Bytes of the length prefix.
pub const PREFIX_LEN: usize = 8;
/// Bytes of the fixed header that follows the prefix.
pub const HEADER_LEN: usize = 28;
/// Bytes of an encoded package with no slices and no payload.
pub const FRAME_OVERHEAD: usize = PREFIX_LEN + HEADER_LEN;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PackagingError {
    #[error("tensors have mixed dtypes ({0:?} and {1:?})")]
    DtypeMismatch(DType, DType),
    #[error("flat vector has {actual} elements, layout expects {expected}")]
    LayoutMismatch { expected: usize, actual: usize },
    #[error("tensor shape {shape:?} does not match {len} values")]
    ShapeMismatch { shape: Vec<usize>, len: usize },
    #[error("bad magic 0x{0:08x}")]
    BadMagic(u32),
    #[error("truncated frame: declared {declared} bytes, {available} available")]
    Truncated { declared: u64, available: usize },
    #[error("unknown {field} code {value}")]
    UnknownCode { field: &'static str, value: u32 },
    #[error("unsupported wire version {0}")]
    UnsupportedVersion(u16),
    #[error("reserved header bytes are nonzero (0x{0:04x})")]
    ReservedNonZero(u16),
    #[error("slice table does not match payload: {0}")]
    CorruptSliceTable(String),
}

/// Element type of a flat vector on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32 = 0,
    F64 = 1,
}

impl DType {
    pub fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    fn from_u8(v: u8) -> Result<Self, PackagingError> {
        match v {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            _ => Err(PackagingError::UnknownCode {
                field: "dtype",
                value: v.into(),
            }),
        }
    }

    /// Little-endian bytes of `values` rounded to this dtype.
    pub fn encode(self, values: &[f64]) -> Vec<u8> {
        let mut out = Vec::with_capacity(values.len() * self.width());
        for &v in values {
            match self {
                DType::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                DType::F64 => out.extend_from_slice(&v.to_le_bytes()),
            }
        }
        out
    }

    /// Inverse of [`DType::encode`]; `None` if the length is not a multiple of the width.
    pub fn decode(self, bytes: &[u8]) -> Option<Vec<f64>> {
        if !bytes.len().is_multiple_of(self.width()) {
            return None;
        }
        Some(match self {
            DType::F32 => bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            DType::F64 => bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        })
    }

    /// Value as it survives a round trip through this dtype.
    pub fn round(self, v: f64) -> f64 {
        match self {
            DType::F32 => v as f32 as f64,
            DType::F64 => v,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Values {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl Values {
    pub fn dtype(&self) -> DType {
        match self {
            Values::F32(_) => DType::F32,
            Values::F64(_) => DType::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Values::F32(v) => v.len(),
            Values::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn empty(dtype: DType) -> Self {
        match dtype {
            DType::F32 => Values::F32(Vec::new()),
            DType::F64 => Values::F64(Vec::new()),
        }
    }

    fn extend(&mut self, other: &Values) {
        match (self, other) {
            (Values::F32(a), Values::F32(b)) => a.extend_from_slice(b),
            (Values::F64(a), Values::F64(b)) => a.extend_from_slice(b),
            _ => unreachable!("dtypes checked by caller"),
        }
    }

    fn range(&self, lo: usize, hi: usize) -> Values {
        match self {
            Values::F32(v) => Values::F32(v[lo..hi].to_vec()),
            Values::F64(v) => Values::F64(v[lo..hi].to_vec()),
        }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            Values::F32(v) => v.iter().map(|&x| x as f64).collect(),
            Values::F64(v) => v.clone(),
        }
    }
}

/// A shaped, row-major numeric array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Values,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Values) -> Result<Self, PackagingError> {
        if shape.iter().product::<usize>() != values.len() {
            return Err(PackagingError::ShapeMismatch {
                shape,
                len: values.len(),
            });
        }
        Ok(Self { shape, values })
    }

    pub fn from_f64(shape: Vec<usize>, values: Vec<f64>) -> Result<Self, PackagingError> {
        Self::new(shape, Values::F64(values))
    }

    pub fn from_f32(shape: Vec<usize>, values: Vec<f32>) -> Result<Self, PackagingError> {
        Self::new(shape, Values::F32(values))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &Values {
        &self.values
    }

    pub fn dtype(&self) -> DType {
        self.values.dtype()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutDescriptor {
    pub shapes: Vec<Vec<usize>>,
    pub dtype: DType,
}

impl LayoutDescriptor {
    pub fn new(shapes: Vec<Vec<usize>>, dtype: DType) -> Self {
        Self { shapes, dtype }
    }

    pub fn total_len(&self) -> usize {
        self.shapes.iter().map(|s| s.iter().product::<usize>()).sum()
    }
}

/// Flat f64 parameter vector and the layout it was packed from.
///
/// Values are always held in f64; `layout.dtype` is the precision used on the wire.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters {
    values: Vec<f64>,
    layout: LayoutDescriptor,
}

impl ModelParameters {
    pub fn new(values: Vec<f64>, layout: LayoutDescriptor) -> Result<Self, PackagingError> {
        if values.len() != layout.total_len() {
            return Err(PackagingError::LayoutMismatch {
                expected: layout.total_len(),
                actual: values.len(),
            });
        }
        Ok(Self { values, layout })
    }

    /// Packs `tensors` and widens the flat vector to f64.
    pub fn from_tensors(tensors: &[Tensor]) -> Result<Self, PackagingError> {
        let (flat, layout) = pack(tensors)?;
        Self::new(flat.to_f64(), layout)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn layout(&self) -> &LayoutDescriptor {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Same layout, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self, PackagingError> {
        Self::new(values, self.layout.clone())
    }

    pub fn to_tensors(&self) -> Result<Vec<Tensor>, PackagingError> {
        unpack(&Values::F64(self.values.clone()), &self.layout)
    }
}

/// Row-major concatenation of `tensors` in order.
pub fn pack(tensors: &[Tensor]) -> Result<(Values, LayoutDescriptor), PackagingError> {
    let dtype = tensors.first().map_or(DType::F64, Tensor::dtype);
    let mut flat = Values::empty(dtype);
    let mut shapes = Vec::with_capacity(tensors.len());
    for t in tensors {
        if t.dtype() != dtype {
            return Err(PackagingError::DtypeMismatch(dtype, t.dtype()));
        }
        flat.extend(&t.values);
        shapes.push(t.shape.clone());
    }
    Ok((flat, LayoutDescriptor { shapes, dtype }))
}

pub fn unpack(flat: &Values, layout: &LayoutDescriptor) -> Result<Vec<Tensor>, PackagingError> {
    if flat.len() != layout.total_len() {
        return Err(PackagingError::LayoutMismatch {
            expected: layout.total_len(),
            actual: flat.len(),
        });
    }
    let mut offset = 0;
    let mut out = Vec::with_capacity(layout.shapes.len());
    for shape in &layout.shapes {
        let len: usize = shape.iter().product();
        out.push(Tensor {
            shape: shape.clone(),
            values: flat.range(offset, offset + len),
        });
        offset += len;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MessageCode {
    ParameterRequest = 0,
    ParameterUpdate = 1,
    Exit = 2,
    /// Registration on connect; the asynchronous server also uses it as the update ack.
    Register = 3,
}

impl MessageCode {
    fn from_u16(v: u16) -> Result<Self, PackagingError> {
        match v {
            0 => Ok(Self::ParameterRequest),
            1 => Ok(Self::ParameterUpdate),
            2 => Ok(Self::Exit),
            3 => Ok(Self::Register),
            _ => Err(PackagingError::UnknownCode {
                field: "message",
                value: v.into(),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CompressionTag {
    None = 0,
    TopK = 1,
    F16 = 2,
}

impl CompressionTag {
    fn from_u8(v: u8) -> Result<Self, PackagingError> {
        match v {
            0 => Ok(Self::None),
            1 => Ok(Self::TopK),
            2 => Ok(Self::F16),
            _ => Err(PackagingError::UnknownCode {
                field: "compression",
                value: v.into(),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Package {
    pub sender: u32,
    pub receiver: u32,
    pub round: u32,
    pub code: MessageCode,
    pub dtype: DType,
    pub compression: CompressionTag,
    slices: Vec<u64>,
    payload: Vec<u8>,
}

impl Package {
    /// Header-only package (no slices, no payload, f64, uncompressed).
    pub fn control(code: MessageCode, sender: u32, receiver: u32, round: u32) -> Self {
        Self {
            sender,
            receiver,
            round,
            code,
            dtype: DType::F64,
            compression: CompressionTag::None,
            slices: Vec::new(),
            payload: Vec::new(),
        }
    }

    pub fn with_format(mut self, dtype: DType, compression: CompressionTag) -> Self {
        self.dtype = dtype;
        self.compression = compression;
        self
    }

    /// Appends one content slice.
    pub fn push_slice(&mut self, bytes: &[u8]) {
        self.slices.push(bytes.len() as u64);
        self.payload.extend_from_slice(bytes);
    }

    pub fn with_slice(mut self, bytes: &[u8]) -> Self {
        self.push_slice(bytes);
        self
    }

    pub fn slice_lengths(&self) -> &[u64] {
        &self.slices
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    pub fn slice_count(&self) -> usize {
        self.slices.len()
    }

    /// Bytes of content slice `i`.
    pub fn slice(&self, i: usize) -> Option<&[u8]> {
        let len = *self.slices.get(i)? as usize;
        let start: u64 = self.slices[..i].iter().sum();
        self.payload.get(start as usize..start as usize + len)
    }

    /// Length of `encode_package(self)` without encoding.
    pub fn encoded_len(&self) -> usize {
        FRAME_OVERHEAD + 8 * self.slices.len() + self.payload.len()
    }
}

/// Serializes `pkg` as a self-delimiting frame.
///
/// The u64 prefix holds the total frame length, prefix included.
pub fn encode_package(pkg: &Package) -> Vec<u8> {
    let total = pkg.encoded_len();
    let mut out = Vec::with_capacity(total);
    out.extend_from_slice(&(total as u64).to_le_bytes());
    out.extend_from_slice(&MAGIC.to_le_bytes());
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(pkg.code as u16).to_le_bytes());
    out.extend_from_slice(&pkg.sender.to_le_bytes());
    out.extend_from_slice(&pkg.receiver.to_le_bytes());
    out.extend_from_slice(&pkg.round.to_le_bytes());
    out.extend_from_slice(&(pkg.slices.len() as u32).to_le_bytes());
    out.push(pkg.dtype as u8);
    out.push(pkg.compression as u8);
    out.extend_from_slice(&0u16.to_le_bytes());
    for len in &pkg.slices {
        out.extend_from_slice(&len.to_le_bytes());
    }
    out.extend_from_slice(&pkg.payload);
    debug_assert_eq!(out.len(), total);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> [u8; N] {
        let out = self.buf[self.pos..self.pos + N].try_into().unwrap();
        self.pos += N;
        out
    }
    fn u8(&mut self) -> u8 {
        self.take::<1>()[0]
    }
    fn u16(&mut self) -> u16 {
        u16::from_le_bytes(self.take())
    }
    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take())
    }
    fn u64(&mut self) -> u64 {
        u64::from_le_bytes(self.take())
    }
}

/// Parses one complete frame. `bytes` must be exactly the frame: its
/// length has to equal the declared prefix.
pub fn decode_package(bytes: &[u8]) -> Result<Package, PackagingError> {
    if bytes.len() < PREFIX_LEN {
        return Err(PackagingError::Truncated {
            declared: 0,
            available: bytes.len(),
        });
    }
    let declared = u64::from_le_bytes(bytes[..PREFIX_LEN].try_into().unwrap());
    if bytes.len() >= PREFIX_LEN + 4 {
        let magic = u32::from_le_bytes(bytes[PREFIX_LEN..PREFIX_LEN + 4].try_into().unwrap());
        if magic != MAGIC {
            return Err(PackagingError::BadMagic(magic));
        }
    }
    if declared != bytes.len() as u64 || bytes.len() < FRAME_OVERHEAD {
        return Err(PackagingError::Truncated {
            declared,
            available: bytes.len(),
        });
    }
    let mut r = Reader {
        buf: bytes,
        pos: PREFIX_LEN + 4,
    };
    let version = r.u16();
    if version != VERSION {
        return Err(PackagingError::UnsupportedVersion(version));
    }
    let code = MessageCode::from_u16(r.u16())?;
    let sender = r.u32();
    let receiver = r.u32();
    let round = r.u32();
    let slice_count = r.u32() as usize;
    let dtype = DType::from_u8(r.u8())?;
    let compression = CompressionTag::from_u8(r.u8())?;
    let reserved = r.u16();
    if reserved != 0 {
        return Err(PackagingError::ReservedNonZero(reserved));
    }
    let remaining = bytes.len() - FRAME_OVERHEAD;
    if slice_count > remaining / 8 {
        return Err(PackagingError::CorruptSliceTable(format!(
            "{slice_count} slices do not fit in {remaining} bytes"
        )));
    }
    let mut slices = Vec::with_capacity(slice_count);
    let mut sum: u64 = 0;
    for _ in 0..slice_count {
        let len = r.u64();
        sum = sum.checked_add(len).ok_or_else(|| {
            PackagingError::CorruptSliceTable("slice lengths overflow".into())
        })?;
        slices.push(len);
    }
    let payload = &bytes[r.pos..];
    if sum != payload.len() as u64 {
        return Err(PackagingError::CorruptSliceTable(format!(
            "slices sum to {sum}, payload has {} bytes",
            payload.len()
        )));
    }
    Ok(Package {
        sender,
        receiver,
        round,
        code,
        dtype,
        compression,
        slices,
        payload: payload.to_vec(),
    })
}
