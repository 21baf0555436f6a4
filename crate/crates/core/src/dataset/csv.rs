//! Generic CSV container: one sample per line, label then pixels.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use super::LabeledImageSet;
use crate::{Error, Result, Tensor};

const SIDE: usize = 28;
const PIXELS: usize = SIDE * SIDE;

/// Read a CSV set. Pixels may be 0–255 integers or reals in `[0, 1]`;
/// a maximum above 1 selects the byte scale.
pub fn read_csv_set(path: impl AsRef<Path>) -> Result<LabeledImageSet> {
    let path = path.as_ref();
    let mut reader = ::csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(csv_error)?;

    let mut labels = Vec::new();
    let mut pixels = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(csv_error)?;
        if record.len() != PIXELS + 1 {
            return Err(Error::format(format!(
                "{}:{}: expected {} fields, found {}",
                path.display(),
                line + 1,
                PIXELS + 1,
                record.len()
            )));
        }
        let label: u8 = record[0].trim().parse().map_err(|_| {
            Error::format(format!(
                "{}:{}: label {:?} is not an integer",
                path.display(),
                line + 1,
                &record[0]
            ))
        })?;
        labels.push(label);
        for field in record.iter().skip(1) {
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::format(format!(
                    "{}:{}: pixel {field:?} is not a number",
                    path.display(),
                    line + 1
                ))
            })?;
            if !v.is_finite() || v < 0.0 {
                return Err(Error::invalid(format!(
                    "{}:{}: pixel {v} is negative or not finite",
                    path.display(),
                    line + 1
                )));
            }
            pixels.push(v);
        }
    }
    if labels.is_empty() {
        return Err(Error::format(format!("{}: no samples", path.display())));
    }

    let max = pixels.iter().copied().fold(0.0, f64::max);
    if max > 1.0 {
        if max > 255.0 {
            return Err(Error::invalid(format!(
                "{}: pixel value {max} exceeds 255",
                path.display()
            )));
        }
        for v in &mut pixels {
            *v /= 255.0;
        }
    }
    let images = Tensor::new(vec![labels.len(), 1, SIDE, SIDE], pixels)?;
    LabeledImageSet::new(images, labels, format!("csv:{}", path.display()))
}

/// Write 28×28 images as byte-scaled integers.
pub fn write_csv_set(set: &LabeledImageSet, path: impl AsRef<Path>) -> Result<()> {
    let shape = set.images().shape();
    if shape[2] != SIDE || shape[3] != SIDE {
        return Err(Error::dim(format!(
            "CSV container holds 28x28 images, got {}x{}",
            shape[2], shape[3]
        )));
    }
    let mut out = std::io::BufWriter::new(File::create(path)?);
    for (i, &label) in set.labels().iter().enumerate() {
        write!(out, "{label}")?;
        for &p in set.images().row(i) {
            write!(out, ",{}", (p * 255.0).round() as u8)?;
        }
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

fn csv_error(e: ::csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            ::csv::ErrorKind::Io(io) => Error::Io(io),
            _ => unreachable!(),
        }
    } else {
        Error::format(e.to_string())
    }
}
