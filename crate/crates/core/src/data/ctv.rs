//! CTV raster container: `"CTV1"`, u32 height, u32 width (little-endian),
//! then `height * width` little-endian f32 HU values, row-major.

use std::path::Path;

use super::CtImage;
use crate::error::{Error, Result};
use crate::fsio::write_atomic;

const MAGIC: &[u8; 4] = b"CTV1";
const HEADER: usize = 12;

pub fn ctv_to_bytes(img: &CtImage) -> Result<Vec<u8>> {
    let h = u32::try_from(img.height()).map_err(|_| Error::Format("height exceeds u32".into()))?;
    let w = u32::try_from(img.width()).map_err(|_| Error::Format("width exceeds u32".into()))?;
    let mut buf = Vec::with_capacity(HEADER + 4 * img.pixels().len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&h.to_le_bytes());
    buf.extend_from_slice(&w.to_le_bytes());
    for v in img.pixels() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(buf)
}

pub fn ctv_from_bytes(bytes: &[u8], id: &str) -> Result<CtImage> {
    if bytes.len() < HEADER || &bytes[..4] != MAGIC {
        return Err(Error::Format(format!("{id}: not a CTV1 file")));
    }
    let h = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let payload = h
        .checked_mul(w)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Format(format!("{id}: dimensions {h}x{w} overflow")))?;
    let body = &bytes[HEADER..];
    if body.len() != payload {
        return Err(Error::Format(format!(
            "{id}: {h}x{w} image needs {payload} data bytes, file has {}",
            body.len()
        )));
    }
    let pixels = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    CtImage::new(id, h, w, pixels)
}

pub fn write_ctv(img: &CtImage, path: &Path) -> Result<()> {
    write_atomic(path, &ctv_to_bytes(img)?)
}

pub fn read_ctv(path: &Path, id: &str) -> Result<CtImage> {
    ctv_from_bytes(&std::fs::read(path)?, id)
}
