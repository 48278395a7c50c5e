//! IDX files (the MNIST container): big-endian header, unsigned-byte payload.
//!
//! ```text
//! images: 0x00000803 | count: u32 | rows: u32 | cols: u32 | count·rows·cols bytes
//! labels: 0x00000801 | count: u32 | count bytes
//! ```

use std::fs;
use std::path::Path;

use super::LabeledExample;
use crate::{Error, Result};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

fn be_u32(bytes: &[u8], at: usize, path: &Path, field: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::parse(path, field, "truncated file"))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<IdxImages> {
    let magic = be_u32(bytes, 0, path, "magic")?;
    if magic != IMAGES_MAGIC {
        return Err(Error::parse(
            path,
            "magic",
            format!("expected {IMAGES_MAGIC:#010x}, found {magic:#010x}"),
        ));
    }
    let count = be_u32(bytes, 4, path, "image count")? as usize;
    let rows = be_u32(bytes, 8, path, "rows")? as usize;
    let cols = be_u32(bytes, 12, path, "cols")? as usize;
    let need = count * rows * cols;
    let pixels = &bytes[16..];
    if pixels.len() < need {
        return Err(Error::parse(
            path,
            "pixels",
            format!("truncated file: expected {need} pixel bytes, found {}", pixels.len()),
        ));
    }
    if pixels.len() > need {
        return Err(Error::parse(
            path,
            "pixels",
            format!("{} trailing bytes after {need} pixels", pixels.len() - need),
        ));
    }
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: pixels.to_vec(),
    })
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, path, "magic")?;
    if magic != LABELS_MAGIC {
        return Err(Error::parse(
            path,
            "magic",
            format!("expected {LABELS_MAGIC:#010x}, found {magic:#010x}"),
        ));
    }
    let count = be_u32(bytes, 4, path, "label count")? as usize;
    let labels = &bytes[8..];
    if labels.len() != count {
        return Err(Error::parse(
            path,
            "labels",
            format!("truncated file: header declares {count} labels, found {}", labels.len()),
        ));
    }
    Ok(labels.to_vec())
}

pub fn read_idx_images(path: &Path) -> Result<IdxImages> {
    parse_idx_images(&read(path)?, path)
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    parse_idx_labels(&read(path)?, path)
}

/// Loads an image/label pair. Pixels are scaled to `[0, 1]`; ids follow file
/// order starting at 0.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Vec<LabeledExample>> {
    let images = read_idx_images(images_path)?;
    let labels = read_idx_labels(labels_path)?;
    if images.count != labels.len() {
        return Err(Error::parse(
            labels_path,
            "label count",
            format!(
                "{} labels for {} images in {}",
                labels.len(),
                images.count,
                images_path.display()
            ),
        ));
    }
    let dim = images.rows * images.cols;
    Ok(labels
        .iter()
        .enumerate()
        .map(|(i, &label)| LabeledExample {
            id: i as u64,
            input: images.pixels[i * dim..(i + 1) * dim]
                .iter()
                .map(|&p| f64::from(p) / 255.0)
                .collect(),
            label: usize::from(label),
        })
        .collect())
}

pub fn write_idx_images(path: &Path, rows: usize, cols: usize, pixels: &[u8]) -> Result<()> {
    let dim = rows * cols;
    if dim == 0 || !pixels.len().is_multiple_of(dim) {
        return Err(Error::Config(format!(
            "{} pixel bytes do not form {rows}x{cols} images",
            pixels.len()
        )));
    }
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGES_MAGIC, (pixels.len() / dim) as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
