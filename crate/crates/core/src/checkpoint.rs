//! Checkpoint sections: one line of compact JSON, then raw little-endian
//! `f64` values.

use std::io::{BufRead, Read, Write};

use serde::{de::DeserializeOwned, Serialize};

use crate::autodiff::Tensor;
use crate::{Error, Result};

fn corrupt(detail: impl Into<String>) -> Error {
    Error::Format {
        path: "<checkpoint>".into(),
        detail: detail.into(),
    }
}

pub(crate) fn write_header<W: Write, H: Serialize>(w: &mut W, header: &H) -> Result<()> {
    let mut line = serde_json::to_vec(header)?;
    line.push(b'\n');
    w.write_all(&line).map_err(|e| corrupt(e.to_string()))
}

pub(crate) fn read_header<R: BufRead, H: DeserializeOwned>(r: &mut R) -> Result<H> {
    let mut line = Vec::new();
    r.read_until(b'\n', &mut line)
        .map_err(|e| corrupt(e.to_string()))?;
    if line.pop() != Some(b'\n') {
        return Err(corrupt("truncated header"));
    }
    Ok(serde_json::from_slice(&line)?)
}

pub(crate) fn write_tensors<W: Write>(w: &mut W, tensors: &[&Tensor]) -> Result<()> {
    let mut buf = Vec::new();
    for t in tensors {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf).map_err(|e| corrupt(e.to_string()))
}

pub(crate) fn read_tensor<R: Read>(r: &mut R, shape: &[usize]) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes)
        .map_err(|_| corrupt("truncated payload"))?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok(Tensor::new(shape.to_vec(), data)?)
}
