//! IDX container: two zero bytes, a type code, a dimension count, big-endian
//! `u32` dimensions, then big-endian values.

use std::path::Path;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

fn parse_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Parse { offset: offset as u64, message: message.into() }
}

fn width(code: u8) -> Option<usize> {
    match code {
        0x08 | 0x09 => Some(1),
        0x0B => Some(2),
        0x0C | 0x0D => Some(4),
        0x0E => Some(8),
        _ => None,
    }
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    if bytes.len() < 4 {
        return Err(parse_err(bytes.len(), "truncated magic number"));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(parse_err(0, format!("magic must start with two zero bytes, got {:#04x} {:#04x}", bytes[0], bytes[1])));
    }
    let code = bytes[2];
    let w = width(code).ok_or_else(|| parse_err(2, format!("unknown type code {code:#04x}")))?;
    let ndim = bytes[3] as usize;
    if ndim == 0 {
        return Err(parse_err(3, "zero dimensions"));
    }
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(parse_err(bytes.len(), format!("truncated header: {ndim} dimensions need {header} bytes")));
    }
    let dims: Vec<usize> = bytes[4..header].chunks_exact(4).map(|c| u32::from_be_bytes(c.try_into().unwrap()) as usize).collect();
    let count = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or_else(|| parse_err(4, "dimension product overflows"))?;
    let need = count.checked_mul(w).and_then(|b| b.checked_add(header)).ok_or_else(|| parse_err(4, "size overflows"))?;
    if bytes.len() < need {
        return Err(parse_err(bytes.len(), format!("truncated data: expected {need} bytes for dims {dims:?}")));
    }
    if bytes.len() > need {
        return Err(parse_err(need, format!("{} trailing bytes", bytes.len() - need)));
    }
    let body = &bytes[header..need];
    let data = match code {
        0x08 => body.iter().map(|&b| f64::from(b)).collect(),
        0x09 => body.iter().map(|&b| f64::from(b as i8)).collect(),
        0x0B => body.chunks_exact(2).map(|c| f64::from(i16::from_be_bytes([c[0], c[1]]))).collect(),
        0x0C => body.chunks_exact(4).map(|c| f64::from(i32::from_be_bytes(c.try_into().unwrap()))).collect(),
        0x0D => body.chunks_exact(4).map(|c| f64::from(f32::from_be_bytes(c.try_into().unwrap()))).collect(),
        _ => body.chunks_exact(8).map(|c| f64::from_be_bytes(c.try_into().unwrap())).collect(),
    };
    Ok(IdxArray { dims, data })
}

pub fn load_idx(path: impl AsRef<Path>) -> Result<IdxArray> {
    parse_idx(&std::fs::read(path)?)
}

/// Serializes as type 0x08 when every value is an integer in `0..=255`,
/// otherwise as 0x0E.
pub fn write_idx(path: impl AsRef<Path>, array: &IdxArray) -> Result<()> {
    let bytes_ok = array.data.iter().all(|&v| v.fract() == 0.0 && (0.0..=255.0).contains(&v));
    let mut out = vec![0, 0, if bytes_ok { 0x08 } else { 0x0E }, array.dims.len() as u8];
    for &d in &array.dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    for &v in &array.data {
        if bytes_ok {
            out.push(v as u8);
        } else {
            out.extend_from_slice(&v.to_be_bytes());
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Pairs an image file `[N, H, W]` or `[N, C, H, W]` with a label file `[N]`.
/// The first `train_len` examples form the train split. Pixel values are kept
/// as stored; call [`Dataset::normalize`] afterwards.
pub fn load_idx_dataset(
    images: impl AsRef<Path>,
    labels: impl AsRef<Path>,
    num_classes: usize,
    train_len: usize,
    expected_shape: Option<&[usize]>,
) -> Result<Dataset> {
    let img = load_idx(images)?;
    let lab = load_idx(labels)?;
    if lab.dims.len() != 1 {
        return Err(Error::Config(format!("label file must be one-dimensional, got {:?}", lab.dims)));
    }
    let mut shape = match img.dims.len() {
        3 => vec![img.dims[0], 1, img.dims[1], img.dims[2]],
        4 => img.dims.clone(),
        2 => img.dims.clone(),
        _ => return Err(Error::Config(format!("unsupported image dims {:?}", img.dims))),
    };
    if shape[0] != lab.dims[0] {
        return Err(Error::Config(format!("{} images but {} labels", shape[0], lab.dims[0])));
    }
    if let Some(exp) = expected_shape {
        if shape[1..] != exp[..] {
            return Err(Error::Config(format!("images are {:?} per example, config expects {exp:?}", &shape[1..])));
        }
    }
    let targets = lab
        .data
        .iter()
        .map(|&v| {
            if v < 0.0 || v.fract() != 0.0 {
                Err(Error::Data(format!("label {v} is not a class index")))
            } else {
                Ok(v as usize)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let inputs = Tensor::new(std::mem::take(&mut shape), img.data)?;
    Dataset::new(inputs, targets, num_classes, train_len)
}
