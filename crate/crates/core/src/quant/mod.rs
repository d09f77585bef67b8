//! Power-of-two fixed-point formats and an integer forward path.

mod forward;

pub use forward::{quantized_forward, QLayer, QuantConfig, QuantizedNet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum QuantError {
    #[error("invalid format: {0}")]
    Format(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("accumulator overflow at {site}: bound {bound} exceeds 64 bits")]
    Overflow { site: String, bound: i128 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Arch(#[from] crate::arch::ArchError),
}

pub type Result<T> = std::result::Result<T, QuantError>;

/// Largest magnitude of `frac_bits` handed out by [`choose_format`].
pub const FRAC_LIMIT: i32 = 24;

/// Two's-complement (or unsigned) integer with an implied binary point.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FixedPointFormat {
    pub total_bits: u8,
    pub frac_bits: i32,
    pub signed: bool,
}

/// Exact `2^k` for `k` in the normal exponent range.
pub(crate) fn pow2(k: i32) -> f64 {
    assert!(
        (-1022..=1023).contains(&k),
        "2^{} outside the normal range",
        k
    );
    f64::from_bits(((k + 1023) as u64) << 52)
}

/// Smallest `k` with `x <= 2^k`, for finite positive `x`.
fn ceil_log2(x: f64) -> i32 {
    let mut k = x.log2().ceil() as i32;
    while k > -1022 && pow2(k - 1) >= x {
        k -= 1;
    }
    while pow2(k) < x {
        k += 1;
    }
    k
}

impl FixedPointFormat {
    pub fn new(total_bits: u8, frac_bits: i32, signed: bool) -> Result<Self> {
        if !(2..=16).contains(&total_bits) {
            return Err(QuantError::Format(format!(
                "total_bits must be in 2..=16, got {}",
                total_bits
            )));
        }
        if frac_bits.abs() > 64 {
            return Err(QuantError::Format(format!(
                "frac_bits {} out of range",
                frac_bits
            )));
        }
        Ok(FixedPointFormat {
            total_bits,
            frac_bits,
            signed,
        })
    }

    pub fn qmin(&self) -> i64 {
        if self.signed {
            -(1i64 << (self.total_bits - 1))
        } else {
            0
        }
    }

    pub fn qmax(&self) -> i64 {
        if self.signed {
            (1i64 << (self.total_bits - 1)) - 1
        } else {
            (1i64 << self.total_bits) - 1
        }
    }

    pub fn step(&self) -> f64 {
        pow2(-self.frac_bits)
    }

    pub fn min_value(&self) -> f64 {
        self.qmin() as f64 * self.step()
    }

    pub fn max_value(&self) -> f64 {
        self.qmax() as f64 * self.step()
    }

    /// Nearest representable integer, ties to even, saturating. NaN maps to 0.
    pub fn quantize_scalar(&self, x: f64) -> i64 {
        if x.is_nan() {
            return 0;
        }
        let scaled = (x * pow2(self.frac_bits)).round_ties_even();
        if scaled <= self.qmin() as f64 {
            self.qmin()
        } else if scaled >= self.qmax() as f64 {
            self.qmax()
        } else {
            scaled as i64
        }
    }

    pub fn dequantize_scalar(&self, q: i64) -> f64 {
        q as f64 * self.step()
    }

    /// Saturates an integer already at this format's scale.
    pub fn saturate(&self, q: i64) -> i64 {
        q.clamp(self.qmin(), self.qmax())
    }
}

impl std::fmt::Display for FixedPointFormat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}{}.{}",
            if self.signed { "s" } else { "u" },
            self.total_bits,
            self.frac_bits
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FormatChoice {
    pub format: FixedPointFormat,
    /// Set when the range is all zero and any scale would do.
    pub degenerate: bool,
}

/// Picks the format whose integer part spans `max(|min|, |max|)`:
/// `frac_bits = total_bits - sign_bit - ceil(log2(max_abs))`.
///
/// A magnitude that is an exact power of two saturates by one step at the
/// positive end (e.g. `[-1, 1]` in 11 signed bits gets `frac_bits = 10`).
pub fn choose_format(min: f64, max: f64, total_bits: u8, signed: bool) -> Result<FormatChoice> {
    if !(min.is_finite() && max.is_finite()) || min > max {
        return Err(QuantError::Domain(format!("bad range [{}, {}]", min, max)));
    }
    if !signed && min < 0.0 {
        return Err(QuantError::Domain(format!(
            "unsigned format cannot hold negative minimum {}",
            min
        )));
    }
    let max_abs = min.abs().max(max.abs());
    let magnitude_bits = total_bits as i32 - signed as i32;
    let (frac, degenerate) = if max_abs == 0.0 {
        (FRAC_LIMIT, true)
    } else {
        let f = magnitude_bits - ceil_log2(max_abs);
        (f.clamp(-FRAC_LIMIT, FRAC_LIMIT), false)
    };
    Ok(FormatChoice {
        format: FixedPointFormat::new(total_bits, frac, signed)?,
        degenerate,
    })
}

/// Integer payload with its format.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedTensor {
    shape: Vec<usize>,
    values: Vec<i64>,
    format: FixedPointFormat,
}

impl QuantizedTensor {
    pub fn new(shape: &[usize], values: Vec<i64>, format: FixedPointFormat) -> Result<Self> {
        // reuse the tensor container's shape checks
        Tensor::<f64>::zeros(shape)?;
        if shape.iter().product::<usize>() != values.len() {
            return Err(QuantError::Tensor(TensorError::Shape(format!(
                "shape {:?} does not hold {} values",
                shape,
                values.len()
            ))));
        }
        if let Some(v) = values
            .iter()
            .find(|&&v| v < format.qmin() || v > format.qmax())
        {
            return Err(QuantError::Domain(format!(
                "value {} outside format {}",
                v, format
            )));
        }
        Ok(QuantizedTensor {
            shape: shape.to_vec(),
            values,
            format,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[i64] {
        &self.values
    }

    pub fn format(&self) -> FixedPointFormat {
        self.format
    }
}

pub fn quantize(x: &Tensor<f64>, format: FixedPointFormat) -> QuantizedTensor {
    QuantizedTensor {
        shape: x.shape().to_vec(),
        values: x
            .data()
            .iter()
            .map(|&v| format.quantize_scalar(v))
            .collect(),
        format,
    }
}

pub fn dequantize(q: &QuantizedTensor) -> Tensor<f64> {
    Tensor::new(
        &q.shape,
        q.values
            .iter()
            .map(|&v| q.format.dequantize_scalar(v))
            .collect(),
    )
    .expect("quantized tensors keep a valid shape")
}

/// `v / 2^s` rounded to nearest, ties to even.
pub(crate) fn shr_round_even(v: i64, s: u32) -> i64 {
    if s == 0 {
        return v;
    }
    if s >= 63 {
        return 0;
    }
    let q = v >> s;
    let r = v - (q << s);
    let half = 1i64 << (s - 1);
    if r > half || (r == half && q & 1 == 1) {
        q + 1
    } else {
        q
    }
}

/// Moves an integer from `from` fraction bits to `to` fraction bits.
pub(crate) fn rescale(v: i64, from: i32, to: i32) -> i64 {
    if to >= from {
        v.checked_shl((to - from) as u32)
            .filter(|r| r >> (to - from) == v)
            .unwrap_or(if v < 0 { i64::MIN } else { i64::MAX })
    } else {
        shr_round_even(v, (from - to) as u32)
    }
}
