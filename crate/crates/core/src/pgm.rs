//! Binary 8-bit PGM (`P5`) reading and writing.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Element;

/// Writes `values` (row-major, `width * height`) linearly rescaled so the
/// minimum maps to 0 and the maximum to 255. A constant image is written as
/// mid-gray 128.
pub fn write_normalized<T: Element>(path: &Path, width: usize, height: usize, values: &[T]) -> Result<()> {
    if values.len() != width * height {
        return Err(Error::Format(format!(
            "{} values for a {width}x{height} image",
            values.len()
        )));
    }
    let vals: Vec<f64> = values.iter().map(|v| v.to_f64()).collect();
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("pgm export"));
    }
    let (lo, hi) = vals
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let pixels: Vec<u8> = if hi > lo {
        vals.iter()
            .map(|&v| ((v - lo) / (hi - lo) * 255.0).round() as u8)
            .collect()
    } else {
        vec![128; vals.len()]
    };
    write(path, width, height, &pixels)
}

pub fn write(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    let mut buf = Vec::with_capacity(pixels.len() + 32);
    write!(buf, "P5\n{width} {height}\n255\n")?;
    buf.extend_from_slice(pixels);
    fs::write(path, buf)?;
    Ok(())
}

/// Returns `(width, height, pixels)`.
pub fn read(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path)?;
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PGM header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    if fields[0] != "P5" {
        return Err(Error::Format(format!("not a binary PGM: {}", fields[0])));
    }
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Format(format!("bad PGM header field {s:?}")))
    };
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 {
        return Err(Error::Format(format!("unsupported PGM maxval {maxval}")));
    }
    let px = bytes.get(pos..pos + w * h).ok_or_else(|| Error::Format("truncated PGM raster".into()))?;
    Ok((w, h, px.to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalized_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.pgm");
        write_normalized(&path, 3, 2, &[-1.0f32, 0.0, 1.0, 0.5, -0.5, 0.25]).unwrap();
        let (w, h, px) = read(&path).unwrap();
        assert_eq!((w, h), (3, 2));
        assert_eq!(px, vec![0, 128, 255, 191, 64, 159]);
    }

    #[test]
    fn constant_image_is_mid_gray() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.pgm");
        write_normalized(&path, 2, 2, &[0.7f64; 4]).unwrap();
        assert_eq!(read(&path).unwrap().2, vec![128; 4]);
    }

    #[test]
    fn rejects_bad_input() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.pgm");
        assert!(write_normalized(&path, 2, 2, &[0.0f32; 3]).is_err());
        assert!(write_normalized(&path, 1, 1, &[f32::NAN]).is_err());
        fs::write(&path, b"P2\n1 1\n255\n0").unwrap();
        assert!(read(&path).is_err());
    }
}
