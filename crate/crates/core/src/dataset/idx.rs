//! Big-endian IDX containers as published for MNIST.

use std::fs;
use std::path::Path;

use byteorder::{BigEndian, ByteOrder};

use super::MAX_DIGIT_LABEL;
use crate::{Error, Result, Tensor};

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

fn header(bytes: &[u8], fields: usize, path: &Path) -> Result<Vec<u32>> {
    let need = 4 * (fields + 1);
    if bytes.len() < need {
        return Err(Error::Truncated(format!(
            "{}: {} bytes is shorter than the {need}-byte header",
            path.display(),
            bytes.len()
        )));
    }
    Ok((0..=fields)
        .map(|i| BigEndian::read_u32(&bytes[4 * i..4 * i + 4]))
        .collect())
}

/// Parse an IDX image file into `[N, 1, rows, cols]` with bytes scaled by 1/255.
pub fn read_idx_images(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    parse_idx_images(&bytes, path)
}

pub(crate) fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let h = header(bytes, 3, path)?;
    if h[0] != IDX_IMAGE_MAGIC {
        return Err(Error::format(format!(
            "{}: magic {:#010x} is not an IDX image file",
            path.display(),
            h[0]
        )));
    }
    let (n, rows, cols) = (h[1] as usize, h[2] as usize, h[3] as usize);
    if n == 0 || rows == 0 || cols == 0 {
        return Err(Error::format(format!(
            "{}: empty image file",
            path.display()
        )));
    }
    let payload = &bytes[16..];
    let expected = n * rows * cols;
    if payload.len() != expected {
        return Err(Error::Truncated(format!(
            "{}: header declares {expected} pixel bytes, file has {}",
            path.display(),
            payload.len()
        )));
    }
    let data = payload.iter().map(|&b| b as f64 / 255.0).collect();
    Tensor::new(vec![n, 1, rows, cols], data)
}

/// Parse an IDX label file; every label must be a digit.
pub fn read_idx_labels(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    parse_idx_labels(&bytes, path)
}

pub(crate) fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let h = header(bytes, 1, path)?;
    if h[0] != IDX_LABEL_MAGIC {
        return Err(Error::format(format!(
            "{}: magic {:#010x} is not an IDX label file",
            path.display(),
            h[0]
        )));
    }
    let n = h[1] as usize;
    let payload = &bytes[8..];
    if payload.len() != n {
        return Err(Error::Truncated(format!(
            "{}: header declares {n} labels, file has {}",
            path.display(),
            payload.len()
        )));
    }
    if let Some(pos) = payload.iter().position(|&l| l > MAX_DIGIT_LABEL) {
        return Err(Error::invalid(format!(
            "{}: label {} at index {pos} is not a digit",
            path.display(),
            payload[pos]
        )));
    }
    Ok(payload.to_vec())
}
