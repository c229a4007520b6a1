//! Portable graymap import for external images: binary P5, maxval 255.

use std::path::Path;

use crate::tensor::Tensor;
use crate::{Error, Result};

/// Reads one whitespace-delimited header token, skipping `#` comments.
fn next_token(bytes: &[u8], pos: &mut usize) -> Result<String> {
    while *pos < bytes.len() {
        match bytes[*pos] {
            b'#' => {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
            }
            c if c.is_ascii_whitespace() => *pos += 1,
            _ => break,
        }
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() && bytes[*pos] != b'#' {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Io("graymap header ended early".into()));
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

fn parse_dim(token: &str, what: &str) -> Result<usize> {
    let n: usize = token
        .parse()
        .map_err(|_| Error::Io(format!("graymap {what} \"{token}\" is not a number")))?;
    if n == 0 {
        return Err(Error::Io(format!("graymap {what} of zero")));
    }
    Ok(n)
}

/// Decodes binary graymap bytes into a `[1, h, w]` tensor scaled to [0, 1].
pub fn decode_pgm(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0;
    let magic = next_token(bytes, &mut pos)?;
    if magic != "P5" {
        return Err(Error::Io(format!(
            "unsupported graymap magic \"{magic}\", only binary P5 is readable"
        )));
    }
    let width = parse_dim(&next_token(bytes, &mut pos)?, "width")?;
    let height = parse_dim(&next_token(bytes, &mut pos)?, "height")?;
    let maxval = next_token(bytes, &mut pos)?;
    if maxval != "255" {
        return Err(Error::Io(format!("graymap maxval {maxval} unsupported, expected 255")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::Io("graymap raster must follow a single whitespace byte".into()));
    }
    pos += 1;
    let need = width * height;
    let raster = &bytes[pos..];
    if raster.len() != need {
        return Err(Error::Io(format!(
            "graymap raster holds {} bytes, header promises {need}",
            raster.len()
        )));
    }
    let data: Vec<f64> = raster.iter().map(|&b| b as f64 / 255.0).collect();
    Tensor::new(vec![1, height, width], data)
}

pub fn read_pgm(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes)
}

/// Encodes a `[1, h, w]` or `[h, w]` tensor as binary graymap bytes,
/// clamping to [0, 1] and rounding to 8 bits.
pub fn encode_pgm(image: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = match image.shape.as_slice() {
        [1, h, w] => (*h, *w),
        [h, w] => (*h, *w),
        other => {
            return Err(Error::Usage(format!(
                "graymap export expects a single-channel image, got shape {other:?}"
            )))
        }
    };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(image.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn write_pgm(path: &Path, image: &Tensor) -> Result<()> {
    std::fs::write(path, encode_pgm(image)?).map_err(|e| Error::io(path, e))
}
