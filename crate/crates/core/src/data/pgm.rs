use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// `round(p · 255)` with halves rounded up, clamped to the byte range.
pub(crate) fn quantize(p: f64) -> u8 {
    (p * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Binary (P5) PGM encoding of a row-major grayscale image in `[0, 1]`.
pub fn encode_pgm(pixels: &[f64], height: usize, width: usize) -> Result<Vec<u8>> {
    if pixels.len() != height * width {
        return Err(Error::shape(
            "encode_pgm",
            format!("{} pixels for a {height}x{width} image", pixels.len()),
        ));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(pixels.iter().map(|&p| quantize(p)));
    Ok(out)
}

pub fn export_pgm(pixels: &[f64], height: usize, width: usize, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_pgm(pixels, height, width)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn payload(bytes: &[u8]) -> &[u8] {
        let header = b"P5\n2 2\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        &bytes[header.len()..]
    }

    #[test]
    fn extremes_and_rounding() {
        assert_eq!(payload(&encode_pgm(&[0.0; 4], 2, 2).unwrap()), &[0, 0, 0, 0]);
        assert_eq!(payload(&encode_pgm(&[1.0; 4], 2, 2).unwrap()), &[255; 4]);
        assert_eq!(payload(&encode_pgm(&[0.5; 4], 2, 2).unwrap()), &[128; 4]);
        assert!(encode_pgm(&[0.0; 3], 2, 2).is_err());
    }

    #[test]
    fn quantization_error_is_at_most_half_a_level() {
        for i in 0..=1000 {
            let p = i as f64 / 1000.0;
            assert!((quantize(p) as f64 / 255.0 - p).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }
}
