//! `RQM1` model checkpoints.
//!
//! Little-endian layout: magic, input `C H W` (u32 each), emission layer
//! index (u32), layer count (u32), then per layer a kind code (u8) followed by
//! its dims (u32 each), then every weight and bias tensor in declaration order
//! as an element count (u64) and that many f64 values.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::layers::{LayerSpec, Params};
use super::model::CnnModel;
use crate::{Error, Result, Tensor};

pub const MODEL_MAGIC: &[u8; 4] = b"RQM1";

const KIND_CONV2D: u8 = 1;
const KIND_RELU: u8 = 2;
const KIND_MAXPOOL: u8 = 3;
const KIND_FLATTEN: u8 = 4;
const KIND_DENSE: u8 = 5;
const KIND_SOFTMAX: u8 = 6;

fn encode_layer(layer: &LayerSpec) -> (u8, Vec<u32>) {
    match *layer {
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
            padding,
        } => (
            KIND_CONV2D,
            vec![
                in_channels as u32,
                out_channels as u32,
                kernel as u32,
                padding as u32,
            ],
        ),
        LayerSpec::Relu => (KIND_RELU, vec![]),
        LayerSpec::MaxPool { window } => (KIND_MAXPOOL, vec![window as u32]),
        LayerSpec::Flatten => (KIND_FLATTEN, vec![]),
        LayerSpec::Dense { in_dim, out_dim } => (KIND_DENSE, vec![in_dim as u32, out_dim as u32]),
        LayerSpec::Softmax => (KIND_SOFTMAX, vec![]),
    }
}

pub fn write_model<W: Write>(model: &CnnModel, mut w: W) -> Result<()> {
    w.write_all(MODEL_MAGIC)?;
    for d in model.input_shape() {
        w.write_u32::<LittleEndian>(d as u32)?;
    }
    w.write_u32::<LittleEndian>(model.emission_layer() as u32)?;
    w.write_u32::<LittleEndian>(model.layers().len() as u32)?;
    for layer in model.layers() {
        let (kind, dims) = encode_layer(layer);
        w.write_u8(kind)?;
        for d in dims {
            w.write_u32::<LittleEndian>(d)?;
        }
    }
    for p in model.params() {
        for t in [&p.weight, &p.bias] {
            w.write_u64::<LittleEndian>(t.len() as u64)?;
            for &v in t.data() {
                w.write_f64::<LittleEndian>(v)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_model(model: &CnnModel, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_model(model, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

fn truncated(e: io::Error) -> Error {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        Error::Truncated("model checkpoint ends early".into())
    } else {
        Error::Io(e)
    }
}

pub fn read_model<R: Read>(mut r: R) -> Result<CnnModel> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MODEL_MAGIC {
        return Err(Error::format(format!(
            "bad checkpoint magic {magic:?}, expected {MODEL_MAGIC:?}"
        )));
    }
    let u32_field = |r: &mut R| r.read_u32::<LittleEndian>().map_err(truncated);
    let input = [
        u32_field(&mut r)? as usize,
        u32_field(&mut r)? as usize,
        u32_field(&mut r)? as usize,
    ];
    let emission = u32_field(&mut r)? as usize;
    let count = u32_field(&mut r)? as usize;
    if count > 1024 {
        return Err(Error::format(format!("implausible layer count {count}")));
    }

    let mut layers = Vec::with_capacity(count);
    for _ in 0..count {
        let kind = r.read_u8().map_err(truncated)?;
        let layer = match kind {
            KIND_CONV2D => LayerSpec::Conv2d {
                in_channels: u32_field(&mut r)? as usize,
                out_channels: u32_field(&mut r)? as usize,
                kernel: u32_field(&mut r)? as usize,
                padding: u32_field(&mut r)? as usize,
            },
            KIND_RELU => LayerSpec::Relu,
            KIND_MAXPOOL => LayerSpec::MaxPool {
                window: u32_field(&mut r)? as usize,
            },
            KIND_FLATTEN => LayerSpec::Flatten,
            KIND_DENSE => LayerSpec::Dense {
                in_dim: u32_field(&mut r)? as usize,
                out_dim: u32_field(&mut r)? as usize,
            },
            KIND_SOFTMAX => LayerSpec::Softmax,
            other => return Err(Error::format(format!("unknown layer kind code {other}"))),
        };
        layers.push(layer);
    }

    let mut params = Vec::new();
    for layer in &layers {
        let Some((ws, bs)) = layer.param_shapes() else {
            continue;
        };
        let mut tensor = |shape: Vec<usize>| -> Result<Tensor> {
            let n = r.read_u64::<LittleEndian>().map_err(truncated)? as usize;
            let want: usize = shape.iter().product();
            if n != want {
                return Err(Error::format(format!(
                    "{layer:?}: tensor holds {n} values, layer needs {want}"
                )));
            }
            let mut data = vec![0.0; n];
            r.read_f64_into::<LittleEndian>(&mut data)
                .map_err(truncated)?;
            Tensor::new(shape, data)
        };
        let weight = tensor(ws)?;
        let bias = tensor(bs)?;
        params.push(Params { weight, bias });
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::format("trailing bytes after checkpoint payload"));
    }
    CnnModel::from_parts(input, layers, params, emission).map_err(|e| match e {
        Error::Dimension(m) | Error::Validation(m) => Error::format(m),
        other => other,
    })
}

pub fn load_model(path: impl AsRef<Path>) -> Result<CnnModel> {
    let bytes = fs::read(path)?;
    read_model(bytes.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> CnnModel {
        let layers = vec![
            LayerSpec::Conv2d {
                in_channels: 1,
                out_channels: 2,
                kernel: 3,
                padding: 1,
            },
            LayerSpec::Relu,
            LayerSpec::MaxPool { window: 2 },
            LayerSpec::Flatten,
            LayerSpec::Dense {
                in_dim: 8,
                out_dim: 5,
            },
            LayerSpec::Relu,
            LayerSpec::Dense {
                in_dim: 5,
                out_dim: 2,
            },
            LayerSpec::Softmax,
        ];
        CnnModel::initialized([1, 4, 4], layers, 4, 7).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let m = tiny();
        let mut buf = Vec::new();
        write_model(&m, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"RQM1");
        assert_eq!(read_model(buf.as_slice()).unwrap(), m);
    }

    #[test]
    fn digit_model_round_trip() {
        let m = CnnModel::digit(5);
        let mut buf = Vec::new();
        write_model(&m, &mut buf).unwrap();
        assert_eq!(read_model(buf.as_slice()).unwrap(), m);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let mut buf = Vec::new();
        write_model(&tiny(), &mut buf).unwrap();
        let mut bad = buf.clone();
        bad[3] = b'2';
        assert!(matches!(read_model(bad.as_slice()), Err(Error::Format(_))));
        for cut in [2, 10, 30, buf.len() - 1] {
            assert!(
                matches!(read_model(&buf[..cut]), Err(Error::Truncated(_))),
                "cut at {cut}"
            );
        }
        let mut long = buf.clone();
        long.push(0);
        assert!(matches!(read_model(long.as_slice()), Err(Error::Format(_))));
    }

    #[test]
    fn rejects_unknown_layer_kind() {
        let mut buf = Vec::new();
        write_model(&tiny(), &mut buf).unwrap();
        buf[24] = 99; // first layer kind code
        assert!(matches!(read_model(buf.as_slice()), Err(Error::Format(_))));
    }
}
