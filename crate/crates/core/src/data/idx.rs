//! Big-endian IDX container reader (the MNIST/EMNIST distribution format).

use std::fs;
use std::path::Path;

use super::{Dataset, Sample};
use crate::error::{Error, Result};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

struct Header<'a> {
    dims: Vec<usize>,
    body: &'a [u8],
}

fn read_u32(bytes: &[u8], at: usize) -> Option<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

fn parse_header<'a>(bytes: &'a [u8], expected_magic: u32, path: &Path) -> Result<Header<'a>> {
    let bad = |reason: String| Error::Idx {
        path: path.to_path_buf(),
        reason,
    };
    let magic = read_u32(bytes, 0).ok_or_else(|| bad("file shorter than the 4-byte magic".into()))?;
    if magic != expected_magic {
        return Err(bad(format!("magic 0x{magic:08x}, expected 0x{expected_magic:08x}")));
    }
    let ndims = (magic & 0xff) as usize;
    let dims = (0..ndims)
        .map(|k| read_u32(bytes, 4 + 4 * k).map(|d| d as usize))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| bad(format!("truncated header: {ndims} dimensions declared")))?;
    let body = &bytes[4 + 4 * ndims..];
    let expected: usize = dims.iter().product();
    if body.len() < expected {
        return Err(bad(format!("truncated data: {} bytes, header declares {expected}", body.len())));
    }
    Ok(Header {
        dims,
        body: &body[..expected],
    })
}

/// Parses in-memory IDX image and label buffers. `images_path` and
/// `labels_path` are only used in diagnostics.
pub fn parse_idx(images: &[u8], labels: &[u8], images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img = parse_header(images, IMAGES_MAGIC, images_path)?;
    let lab = parse_header(labels, LABELS_MAGIC, labels_path)?;
    let (n_img, n_lab) = (img.dims[0], lab.dims[0]);
    if n_img != n_lab {
        return Err(Error::Idx {
            path: labels_path.to_path_buf(),
            reason: format!("{n_lab} labels for {n_img} images"),
        });
    }
    if n_img == 0 {
        return Err(Error::Idx {
            path: images_path.to_path_buf(),
            reason: "no images".into(),
        });
    }
    let pixels = img.dims[1] * img.dims[2];
    let classes = lab.body.iter().copied().max().map_or(0, |m| m as usize + 1).max(2);
    let samples = img
        .body
        .chunks_exact(pixels)
        .zip(lab.body)
        .map(|(px, &label)| Sample {
            features: px.iter().map(|&b| f64::from(b) / 255.0).collect(),
            label: label as usize,
        })
        .collect();
    Dataset::new(samples, classes)
}

/// Loads an IDX image file (magic `0x00000803`) and its label file
/// (magic `0x00000801`). Pixels are scaled to `[0, 1]`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let labels = fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    parse_idx(&images, &labels, images_path, labels_path)
}
