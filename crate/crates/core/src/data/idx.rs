//! Big-endian IDX files as used by MNIST.

use std::path::Path;

use super::Dataset;
use crate::net::Tensor;
use crate::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Cursor<'a> {
    fn err(&self, field: &'static str, offset: usize, reason: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.clone(),
            field,
            offset: offset as u64,
            reason: reason.into(),
        }
    }

    fn u32(&mut self, field: &'static str) -> Result<u32> {
        let at = self.pos;
        let raw = self
            .bytes
            .get(at..at + 4)
            .ok_or_else(|| self.err(field, at, "truncated file"))?;
        self.pos += 4;
        Ok(u32::from_be_bytes(raw.try_into().unwrap()))
    }

    fn magic(&mut self, expected: u32) -> Result<()> {
        let found = self.u32("magic")?;
        if found != expected {
            return Err(self.err(
                "magic",
                0,
                format!("wrong magic 0x{found:08x}, expected 0x{expected:08x}"),
            ));
        }
        Ok(())
    }

    fn body(&mut self, field: &'static str, len: usize) -> Result<&'a [u8]> {
        let at = self.pos;
        let end = at.checked_add(len).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            self.err(
                field,
                self.bytes.len(),
                format!("truncated file: expected {len} bytes of data starting at {at}"),
            )
        })?;
        self.pos = end;
        Ok(&self.bytes[at..end])
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Images `[count x rows*cols]` scaled by 1/255, and their `(rows, cols)`.
pub fn parse_images(bytes: &[u8], origin: &str) -> Result<(usize, usize, usize, Vec<f32>)> {
    let mut cur = Cursor {
        bytes,
        pos: 0,
        path: origin.to_string(),
    };
    cur.magic(IMAGES_MAGIC)?;
    let count = cur.u32("image count")? as usize;
    let rows = cur.u32("row count")? as usize;
    let cols = cur.u32("column count")? as usize;
    let len = count
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| cur.err("image dims", 4, "dimensions overflow"))?;
    let pixels = cur.body("pixels", len)?;
    if cur.pos != bytes.len() {
        return Err(cur.err("pixels", cur.pos, format!("{} trailing bytes", bytes.len() - cur.pos)));
    }
    Ok((count, rows, cols, pixels.iter().map(|&p| f32::from(p) / 255.0).collect()))
}

pub fn parse_labels(bytes: &[u8], origin: &str) -> Result<Vec<usize>> {
    let mut cur = Cursor {
        bytes,
        pos: 0,
        path: origin.to_string(),
    };
    cur.magic(LABELS_MAGIC)?;
    let count = cur.u32("label count")? as usize;
    let labels = cur.body("labels", count)?;
    if cur.pos != bytes.len() {
        return Err(cur.err("labels", cur.pos, format!("{} trailing bytes", bytes.len() - cur.pos)));
    }
    Ok(labels.iter().map(|&l| usize::from(l)).collect())
}

/// Load an image file and its label file into a dataset. The class count is
/// one more than the largest label.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let (count, rows, cols, pixels) = parse_images(&read(ip)?, &ip.display().to_string())?;
    let labels = parse_labels(&read(lp)?, &lp.display().to_string())?;
    if labels.len() != count {
        return Err(Error::Parse {
            path: lp.display().to_string(),
            field: "label count",
            offset: 4,
            reason: format!("count mismatch: {count} images but {} labels", labels.len()),
        });
    }
    let classes = labels.iter().max().map_or(0, |&m| m + 1);
    Dataset::new(Tensor::new(vec![count, rows * cols], pixels)?, labels, classes)
}

/// Encode a dataset as IDX image and label files. Features are rounded to
/// the nearest byte after scaling by 255.
pub fn encode_idx(dataset: &Dataset, rows: usize, cols: usize) -> Result<(Vec<u8>, Vec<u8>)> {
    if rows * cols != dataset.dim() {
        return Err(Error::Input(format!(
            "{rows}x{cols} images do not match feature size {}",
            dataset.dim()
        )));
    }
    if dataset.class_count() > 256 {
        return Err(Error::Input("IDX labels hold at most 256 classes".into()));
    }
    let n = dataset.len() as u32;
    let mut images = Vec::with_capacity(16 + dataset.len() * rows * cols);
    images.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    images.extend_from_slice(&n.to_be_bytes());
    images.extend_from_slice(&(rows as u32).to_be_bytes());
    images.extend_from_slice(&(cols as u32).to_be_bytes());
    images.extend(dataset.features().data().iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    let mut labels = Vec::with_capacity(8 + dataset.len());
    labels.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    labels.extend_from_slice(&n.to_be_bytes());
    labels.extend(dataset.labels().iter().map(|&l| l as u8));
    Ok((images, labels))
}

pub fn write_idx(
    dataset: &Dataset,
    rows: usize,
    cols: usize,
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<()> {
    let (images, labels) = encode_idx(dataset, rows, cols)?;
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    std::fs::write(ip, images).map_err(|e| Error::io(ip, e))?;
    std::fs::write(lp, labels).map_err(|e| Error::io(lp, e))
}
