//! Binary PPM (P6, maxval 255) codec.

use std::path::Path;

use wfen_core::ImageBuffer;

use crate::error::{Error, Result};

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(format!("ppm: {}", msg.into()))
}

/// Reads the next whitespace-delimited header token, skipping `#` comments.
fn token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() && bytes[*pos] != b'#' {
        *pos += 1;
    }
    if start == *pos {
        return Err(format_err("truncated header"));
    }
    Ok(&bytes[start..*pos])
}

fn number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    let t = token(bytes, pos)?;
    std::str::from_utf8(t)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| format_err(format!("invalid {what} `{}`", String::from_utf8_lossy(t))))
}

/// Header fields and the offset of the first raster byte.
fn header(bytes: &[u8]) -> Result<(usize, usize, usize)> {
    let mut pos = 0;
    let magic = token(bytes, &mut pos)?;
    if magic != b"P6" {
        return Err(format_err(format!("unsupported magic `{}` (only binary P6)", String::from_utf8_lossy(magic))));
    }
    let width = number(bytes, &mut pos, "width")?;
    let height = number(bytes, &mut pos, "height")?;
    let maxval = number(bytes, &mut pos, "maxval")?;
    if maxval != 255 {
        return Err(format_err(format!("unsupported maxval {maxval} (only 255)")));
    }
    if width == 0 || height == 0 {
        return Err(format_err(format!("empty image {width}×{height}")));
    }
    // exactly one whitespace byte separates the header from the raster
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(format_err("truncated header"));
    }
    Ok((width, height, pos + 1))
}

/// Raw interleaved RGB bytes of a P6 file.
pub fn decode_bytes(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let (width, height, start) = header(bytes)?;
    let need = 3 * width * height;
    let raster = &bytes[start..];
    if raster.len() < need {
        return Err(format_err(format!("truncated payload: {} of {need} bytes", raster.len())));
    }
    if raster.len() > need {
        return Err(format_err(format!("{} trailing bytes after the raster", raster.len() - need)));
    }
    Ok((width, height, raster.to_vec()))
}

/// Planar `[0, 1]` image from a P6 file; byte `b` maps to `b / 255`.
pub fn decode(bytes: &[u8], source: &str) -> Result<ImageBuffer> {
    let (w, h, raster) = decode_bytes(bytes)?;
    let n = w * h;
    let mut data = vec![0.0f32; 3 * n];
    for (i, px) in raster.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * n + i] = px[c] as f32 / 255.0;
        }
    }
    Ok(ImageBuffer::new(w, h, data, source)?)
}

/// Canonical P6 bytes (`P6\n<w> <h>\n255\n` header), values clamped to `[0, 1]` and rounded.
pub fn encode(img: &ImageBuffer) -> Vec<u8> {
    let n = img.width * img.height;
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.reserve(3 * n);
    for i in 0..n {
        for c in 0..3 {
            out.push((img.data[c * n + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out
}

/// P6 file for interleaved RGB bytes.
pub fn encode_bytes(width: usize, height: usize, raster: &[u8]) -> Result<Vec<u8>> {
    if raster.len() != 3 * width * height || width == 0 || height == 0 {
        return Err(format_err(format!("{} bytes do not form a {width}×{height} RGB raster", raster.len())));
    }
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(raster);
    Ok(out)
}

pub fn read(path: impl AsRef<Path>) -> Result<ImageBuffer> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(Error::io(path))?;
    decode(&bytes, &path.display().to_string()).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn write(img: &ImageBuffer, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(img)).map_err(Error::io(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_file() {
        let mut bytes = b"P6\n2 2\n255\n".to_vec();
        bytes.extend(0u8..12);
        let img = decode(&bytes, "t").unwrap();
        assert_eq!((img.width, img.height), (2, 2));
        assert_eq!(img.get(1, 0, 0), 1.0 / 255.0);
        assert_eq!(img.get(2, 1, 1), 11.0 / 255.0);
        assert_eq!(encode(&img), bytes);
    }

    #[test]
    fn comments_and_spacing_in_header() {
        let mut bytes = b"P6 # made by hand\n1\t1 255\n".to_vec();
        bytes.extend([10, 20, 30]);
        let img = decode(&bytes, "t").unwrap();
        assert_eq!(img.data, vec![10.0 / 255.0, 20.0 / 255.0, 30.0 / 255.0]);
    }

    #[test]
    fn rejections() {
        let err = |b: &[u8]| decode(b, "t").unwrap_err().to_string();
        assert!(err(b"P6\n1 1\n65535\n\0\0\0\0\0\0").contains("unsupported maxval"));
        assert!(err(b"P3\n1 1\n255\n1 2 3").contains("magic"));
        assert!(err(b"P6\n2 2\n255\n\0\0\0").contains("truncated"));
        assert!(err(b"P6\n2 2").contains("truncated"));
        assert!(err(b"P6\n1 1\n255\n\0\0\0\0").contains("trailing"));
    }
}
