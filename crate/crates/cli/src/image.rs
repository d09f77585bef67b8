//! Binary PPM (P6) / PGM (P5) images and raw tensor files.
//!
//! Pixels are scaled to `[0, 1]` by the header's maxval. A raw tensor file
//! is a tensor blob holding a single `(C, H, W)` tensor named `input`.

use skynet_core::tensor::Tensor;

use crate::blob;

pub const RAW_TENSOR_NAME: &str = "input";

/// Reads a `(C, H, W)` image tensor, picking the decoder from the magic bytes.
pub fn decode_image(bytes: &[u8]) -> Result<Tensor<f64>, String> {
    match bytes.get(..2) {
        Some(b"P6") => decode_netpbm(bytes, 3),
        Some(b"P5") => decode_netpbm(bytes, 1),
        _ if bytes.starts_with(blob::MAGIC) => decode_raw(bytes),
        _ => Err("not a binary PPM/PGM image or raw tensor file".into()),
    }
}

fn decode_raw(bytes: &[u8]) -> Result<Tensor<f64>, String> {
    let entries = blob::decode(bytes).map_err(|e| e.to_string())?;
    let [e] = entries.as_slice() else {
        return Err(format!(
            "raw tensor file holds {} tensors, expected 1",
            entries.len()
        ));
    };
    if e.name != RAW_TENSOR_NAME || e.shape.len() != 3 {
        return Err(format!(
            "raw tensor file must hold a rank-3 tensor named '{}', got '{}' {:?}",
            RAW_TENSOR_NAME, e.name, e.shape
        ));
    }
    e.to_tensor().map_err(|e| e.to_string())
}

/// Header tokens are whitespace separated and may be interleaved with
/// `#` comments; exactly one whitespace byte precedes the raster.
fn decode_netpbm(bytes: &[u8], channels: usize) -> Result<Tensor<f64>, String> {
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or("malformed image header")?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err("malformed image header".into());
    }
    pos += 1;
    let [w, h, maxval] = fields;
    if w == 0 || h == 0 || !(1..=65535).contains(&maxval) {
        return Err(format!("unsupported image {}x{} maxval {}", w, h, maxval));
    }
    let width = if maxval > 255 { 2 } else { 1 };
    let n = w * h * channels;
    let raster = bytes.get(pos..).unwrap_or(&[]);
    if raster.len() != n * width {
        return Err(format!(
            "expected {} raster bytes for {}x{}, found {}",
            n * width,
            w,
            h,
            raster.len()
        ));
    }
    let sample = |i: usize| -> f64 {
        let v = if width == 2 {
            u16::from_be_bytes([raster[2 * i], raster[2 * i + 1]]) as f64
        } else {
            raster[i] as f64
        };
        v / maxval as f64
    };
    // interleaved HWC to planar CHW
    Tensor::from_fn(&[channels, h, w], |k| {
        let (c, p) = (k / (h * w), k % (h * w));
        sample(p * channels + c)
    })
    .map_err(|e| e.to_string())
}

/// Encodes a 3-channel `[0, 1]` tensor as an 8-bit PPM.
pub fn encode_ppm(t: &Tensor<f64>) -> Result<Vec<u8>, String> {
    let (c, h, w) = t.chw().map_err(|e| e.to_string())?;
    if c != 3 {
        return Err(format!("PPM needs 3 channels, got {}", c));
    }
    let mut out = format!("P6\n{} {}\n255\n", w, h).into_bytes();
    for i in 0..h {
        for j in 0..w {
            for ch in 0..3 {
                out.push((t.at3(ch, i, j).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    Ok(out)
}

pub fn encode_raw(t: &Tensor<f64>) -> Result<Vec<u8>, String> {
    blob::encode(&[blob::Entry::f32(RAW_TENSOR_NAME, t)]).map_err(|e| e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip() {
        let t = Tensor::from_fn(&[3, 2, 5], |i| (i * 8 % 256) as f64 / 255.0).unwrap();
        let bytes = encode_ppm(&t).unwrap();
        assert_eq!(decode_image(&bytes).unwrap(), t);
    }

    #[test]
    fn pgm_with_comments() {
        let mut bytes = b"P5 # a comment\n3 # width\n 1\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 51, 255]);
        let t = decode_image(&bytes).unwrap();
        assert_eq!(t.shape(), &[1, 1, 3]);
        assert_eq!(t.data(), &[0.0, 0.2, 1.0]);
    }

    #[test]
    fn sixteen_bit_samples() {
        let mut bytes = b"P5\n2 1\n65535\n".to_vec();
        bytes.extend_from_slice(&[0xff, 0xff, 0x00, 0x00]);
        assert_eq!(decode_image(&bytes).unwrap().data(), &[1.0, 0.0]);
    }

    #[test]
    fn pixel_order_is_planar() {
        let mut bytes = b"P6\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[255, 0, 0, 0, 0, 255]);
        let t = decode_image(&bytes).unwrap();
        assert_eq!(t.data(), &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn raw_round_trip() {
        let t = Tensor::from_fn(&[2, 2, 2], |i| i as f64 - 3.5).unwrap();
        assert_eq!(decode_image(&encode_raw(&t).unwrap()).unwrap(), t);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(decode_image(b"P6\n2 2\n255\n\x00").is_err());
        assert!(decode_image(b"P3\n1 1\n255\n0 0 0").is_err());
        assert!(decode_image(b"P5\n0 1\n255\n").is_err());
        assert!(decode_image(b"").is_err());
    }
}
