//! `LCQT`: a flat container of named, typed tensors.
//!
//! ```text
//! "LCQT" u32:version=1 u32:count
//! per tensor: u32 name length, UTF-8 name, u8 dtype, u8 rank,
//!             rank × u64 dims, raw little-endian payload
//! ```
//!
//! dtype codes: 0 = f64, 1 = f32, 2 = f16, 3 = u8.

use half::f16;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"LCQT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F64(Vec<f64>),
    F32(Vec<f32>),
    /// binary16 bit patterns.
    F16(Vec<u16>),
    U8(Vec<u8>),
}

impl TensorData {
    fn code(&self) -> u8 {
        match self {
            TensorData::F64(_) => 0,
            TensorData::F32(_) => 1,
            TensorData::F16(_) => 2,
            TensorData::U8(_) => 3,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F64(v) => v.len(),
            TensorData::F32(v) => v.len(),
            TensorData::F16(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Values widened to f64.
    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            TensorData::F64(v) => v.clone(),
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F16(v) => v.iter().map(|&x| f16::from_bits(x).to_f64()).collect(),
            TensorData::U8(v) => v.iter().map(|&x| x as f64).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<u64>,
    pub data: TensorData,
}

impl NamedTensor {
    pub fn f64(name: impl Into<String>, dims: &[usize], data: Vec<f64>) -> Self {
        Self { name: name.into(), dims: dims.iter().map(|&d| d as u64).collect(), data: TensorData::F64(data) }
    }
}

/// Serializes tensors in the given order.
pub fn encode(tensors: &[NamedTensor]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&u32::try_from(tensors.len()).map_err(|_| Error::usage("too many tensors"))?.to_le_bytes());
    for t in tensors {
        let count: u64 = t.dims.iter().product();
        if count != t.data.len() as u64 {
            return Err(Error::usage(format!("tensor {} has {} values for dims {:?}", t.name, t.data.len(), t.dims)));
        }
        let rank =
            u8::try_from(t.dims.len()).map_err(|_| Error::usage(format!("tensor {} has rank above 255", t.name)))?;
        out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.push(t.data.code());
        out.push(rank);
        for d in &t.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        match &t.data {
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F16(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U8(v) => out.extend_from_slice(v),
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let left = self.bytes.len() - self.pos;
        if left < n {
            return Err(Error::format(self.pos, format!("truncated: need {n} bytes, {left} left")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("exact length"))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<NamedTensor>> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::format(0, "bad magic, expected LCQT"));
    }
    let version = u32::from_le_bytes(c.array()?);
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(c.array()?) as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = u32::from_le_bytes(c.array()?) as usize;
        let at = c.pos;
        let name =
            std::str::from_utf8(c.take(len)?).map_err(|_| Error::format(at, "tensor name is not UTF-8"))?.to_string();
        let at = c.pos;
        let [code] = c.array::<1>()?;
        let [rank] = c.array::<1>()?;
        let mut dims = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            dims.push(u64::from_le_bytes(c.array()?));
        }
        let n = dims
            .iter()
            .try_fold(1u64, |a, &d| a.checked_mul(d))
            .and_then(|n| usize::try_from(n).ok())
            .ok_or_else(|| Error::format(at, "tensor size overflows"))?;
        let width = match code {
            0 => 8,
            1 => 4,
            2 => 2,
            3 => 1,
            other => return Err(Error::format(at, format!("unknown dtype {other}"))),
        };
        let raw = c.take(n.checked_mul(width).ok_or_else(|| Error::format(at, "tensor size overflows"))?)?;
        let data = match code {
            0 => TensorData::F64(raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect()),
            1 => TensorData::F32(raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect()),
            2 => TensorData::F16(raw.chunks_exact(2).map(|b| u16::from_le_bytes(b.try_into().unwrap())).collect()),
            _ => TensorData::U8(raw.to_vec()),
        };
        out.push(NamedTensor { name, dims, data });
    }
    if c.pos != bytes.len() {
        return Err(Error::format(c.pos, format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    Ok(out)
}
