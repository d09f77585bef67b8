//! Binary tensor container.
//!
//! ```text
//! "SKYN" | version u16 | count u32 | tensor*
//! tensor = name_len u16 | name | dtype u8 [| total u8 | frac i8 | signed u8]
//!          | rank u8 | extents u32 * rank | payload
//! ```
//!
//! All integers are little-endian. Dtype 0 is `f32`. Dtype 1 is a fixed-point
//! code stored in two bytes (`i16` when signed, `u16` otherwise); the real
//! value is `code * 2^-frac`.

use std::fmt;

use skynet_core::quant::{dequantize, FixedPointFormat, QuantizedTensor};
use skynet_core::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SKYN";
pub const VERSION: u16 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_FIXED: u8 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlobError(pub String);

impl fmt::Display for BlobError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "malformed tensor blob: {}", self.0)
    }
}

impl std::error::Error for BlobError {}

type Result<T> = std::result::Result<T, BlobError>;

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    Fixed {
        format: FixedPointFormat,
        codes: Vec<i64>,
    },
}

impl Payload {
    fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::Fixed { codes, .. } => codes.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub payload: Payload,
}

impl Entry {
    /// Stores `t` as `f32`.
    pub fn f32(name: impl Into<String>, t: &Tensor<f64>) -> Self {
        Entry {
            name: name.into(),
            shape: t.shape().to_vec(),
            payload: Payload::F32(t.data().iter().map(|&v| v as f32).collect()),
        }
    }

    pub fn fixed(name: impl Into<String>, q: &QuantizedTensor) -> Self {
        Entry {
            name: name.into(),
            shape: q.shape().to_vec(),
            payload: Payload::Fixed {
                format: q.format(),
                codes: q.values().to_vec(),
            },
        }
    }

    pub fn to_tensor(&self) -> Result<Tensor<f64>> {
        let bad = |e: &dyn fmt::Display| BlobError(format!("tensor '{}': {}", self.name, e));
        match &self.payload {
            Payload::F32(v) => {
                Tensor::new(&self.shape, v.iter().map(|&x| x as f64).collect()).map_err(|e| bad(&e))
            }
            Payload::Fixed { format, codes } => {
                let q = QuantizedTensor::new(&self.shape, codes.clone(), *format)
                    .map_err(|e| bad(&e))?;
                Ok(dequantize(&q))
            }
        }
    }
}

pub fn encode(entries: &[Entry]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(entries.len()).map_err(|_| BlobError("too many tensors".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for e in entries {
        let name = e.name.as_bytes();
        let len = u16::try_from(name.len())
            .map_err(|_| BlobError(format!("name of {} bytes is too long", name.len())))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name);
        match &e.payload {
            Payload::F32(_) => out.push(DTYPE_F32),
            Payload::Fixed { format, .. } => {
                let frac = i8::try_from(format.frac_bits)
                    .map_err(|_| BlobError(format!("frac bits {} do not fit", format.frac_bits)))?;
                out.extend_from_slice(&[
                    DTYPE_FIXED,
                    format.total_bits,
                    frac as u8,
                    format.signed as u8,
                ]);
            }
        }
        let rank = u8::try_from(e.shape.len()).map_err(|_| BlobError("rank too large".into()))?;
        out.push(rank);
        let mut n = 1usize;
        for &d in &e.shape {
            let d32 = u32::try_from(d).map_err(|_| BlobError(format!("extent {} too large", d)))?;
            out.extend_from_slice(&d32.to_le_bytes());
            n *= d;
        }
        if n != e.payload.len() {
            return Err(BlobError(format!(
                "tensor '{}' has shape {:?} but {} values",
                e.name,
                e.shape,
                e.payload.len()
            )));
        }
        match &e.payload {
            Payload::F32(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::Fixed { format, codes } => {
                for &c in codes {
                    if c < format.qmin() || c > format.qmax() {
                        return Err(BlobError(format!(
                            "code {} outside {} in '{}'",
                            c, format, e.name
                        )));
                    }
                    let bytes = if format.signed {
                        (c as i16).to_le_bytes()
                    } else {
                        (c as u16).to_le_bytes()
                    };
                    out.extend_from_slice(&bytes);
                }
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| BlobError(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
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
}

pub fn decode(buf: &[u8]) -> Result<Vec<Entry>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(BlobError("bad magic".into()));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(BlobError(format!("unsupported version {}", version)));
    }
    let count = r.u32()?;
    let mut entries = Vec::new();
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| BlobError("tensor name is not UTF-8".into()))?
            .to_string();
        let format = match r.u8()? {
            DTYPE_F32 => None,
            DTYPE_FIXED => {
                let total = r.u8()?;
                let frac = r.u8()? as i8;
                let signed = match r.u8()? {
                    0 => false,
                    1 => true,
                    s => return Err(BlobError(format!("signed flag {} in '{}'", s, name))),
                };
                let f = FixedPointFormat::new(total, frac as i32, signed)
                    .map_err(|e| BlobError(format!("'{}': {}", name, e)))?;
                Some(f)
            }
            t => return Err(BlobError(format!("unknown dtype {} in '{}'", t, name))),
        };
        let rank = r.u8()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| BlobError(format!("'{}' is too large", name)))?;
        let payload = match format {
            None => {
                let raw = r.take(
                    n.checked_mul(4)
                        .ok_or_else(|| BlobError("overflow".into()))?,
                )?;
                Payload::F32(
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                )
            }
            Some(format) => {
                let raw = r.take(
                    n.checked_mul(2)
                        .ok_or_else(|| BlobError("overflow".into()))?,
                )?;
                let codes = raw
                    .chunks_exact(2)
                    .map(|c| {
                        let b = [c[0], c[1]];
                        let v = if format.signed {
                            i16::from_le_bytes(b) as i64
                        } else {
                            u16::from_le_bytes(b) as i64
                        };
                        if v < format.qmin() || v > format.qmax() {
                            Err(BlobError(format!(
                                "code {} outside {} in '{}'",
                                v, format, name
                            )))
                        } else {
                            Ok(v)
                        }
                    })
                    .collect::<Result<Vec<_>>>()?;
                Payload::Fixed { format, codes }
            }
        };
        entries.push(Entry {
            name,
            shape,
            payload,
        });
    }
    if r.pos != buf.len() {
        return Err(BlobError(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok(entries)
}
