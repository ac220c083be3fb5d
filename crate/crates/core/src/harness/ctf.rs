//! CTF1 tensors: `b"CTF1"`, little-endian `u32` rank, `rank` little-endian
//! `u32` dims, then the row-major `f32` little-endian payload.

use std::io::{Read, Write};

use ndarray::{Array1, Array2};

use crate::error::{CenError, Result};
use crate::fusion::{HeadConfig, HeadMode, HeadWeights};
use crate::pipeline::ProbabilityMap;
use crate::tensorops::FeatureMap;

pub const MAGIC: &[u8; 4] = b"CTF1";

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(CenError::ShapeMismatch(format!("tensor dims {dims:?} need {n} values, got {}", data.len())));
        }
        Ok(Self { dims, data })
    }

    pub fn encoded_len(&self) -> usize {
        4 + 4 + 4 * self.dims.len() + 4 * self.data.len()
    }
}

pub fn write_tensor<W: Write>(mut w: W, t: &Tensor) -> Result<()> {
    let mut buf = Vec::with_capacity(t.encoded_len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
    for &d in &t.dims {
        let d = u32::try_from(d).map_err(|_| CenError::Format(format!("dimension {d} exceeds u32")))?;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    for v in &t.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| CenError::Format(format!("truncated CTF1 header: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_tensor<R: Read>(mut r: R) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| CenError::Format(format!("truncated CTF1 magic: {e}")))?;
    if &magic != MAGIC {
        return Err(CenError::Format(format!("bad magic {magic:?}, expected CTF1")));
    }
    let rank = read_u32(&mut r)? as usize;
    if rank > 16 {
        return Err(CenError::Format(format!("implausible tensor rank {rank}")));
    }
    let dims = (0..rank).map(|_| read_u32(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let n = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| CenError::Format(format!("tensor dims {dims:?} overflow")))?;
    let mut bytes = vec![0u8; n.checked_mul(4).ok_or_else(|| CenError::Format("payload too large".into()))?];
    r.read_exact(&mut bytes).map_err(|e| CenError::Format(format!("truncated CTF1 payload: {e}")))?;
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Tensor::new(dims, data)
}

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(t.encoded_len());
    write_tensor(&mut out, t).expect("writing to a Vec cannot fail");
    out
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    read_tensor(bytes)
}

pub fn feature_map_to_tensor(map: &FeatureMap) -> Tensor {
    Tensor { dims: vec![map.channels, map.height, map.width], data: map.data.iter().map(|&v| v as f32).collect() }
}

/// Rank-3 `C × H × W` tensor to a feature map; the stride is not stored in
/// the file.
pub fn tensor_to_feature_map(t: &Tensor, stride: usize) -> Result<FeatureMap> {
    match t.dims[..] {
        [c, h, w] => FeatureMap::new(c, h, w, stride, t.data.iter().map(|&v| v as f64).collect()),
        _ => Err(CenError::Format(format!("feature map must be rank 3, got dims {:?}", t.dims))),
    }
}

pub fn probability_map_to_tensor(p: &ProbabilityMap) -> Tensor {
    Tensor { dims: vec![p.classes, p.height, p.width], data: p.values.iter().map(|&v| v as f32).collect() }
}

pub fn tensor_to_probability_map(t: &Tensor) -> Result<ProbabilityMap> {
    match t.dims[..] {
        [m, h, w] => ProbabilityMap::new(m, h, w, t.data.iter().map(|&v| v as f64).collect()),
        _ => Err(CenError::Format(format!("probability map must be rank 3, got dims {:?}", t.dims))),
    }
}

const HEAD_TENSORS: [&str; 4] = ["W1", "b1", "W2", "b2"];

/// Head archive: for each of `W1, b1, W2, b2` a manifest line
/// `tensor <name> <byte length>` followed by that many CTF1 bytes.
pub fn write_head<W: Write>(mut w: W, weights: &HeadWeights) -> Result<()> {
    let to_f32 = |it: &mut dyn Iterator<Item = &f64>| it.map(|&v| v as f32).collect::<Vec<_>>();
    let tensors = [
        Tensor::new(vec![weights.w1.nrows(), weights.w1.ncols()], to_f32(&mut weights.w1.iter()))?,
        Tensor::new(vec![weights.b1.len()], to_f32(&mut weights.b1.iter()))?,
        Tensor::new(vec![weights.w2.nrows(), weights.w2.ncols()], to_f32(&mut weights.w2.iter()))?,
        Tensor::new(vec![weights.b2.len()], to_f32(&mut weights.b2.iter()))?,
    ];
    for (name, t) in HEAD_TENSORS.iter().zip(&tensors) {
        writeln!(w, "tensor {name} {}", t.encoded_len())?;
        write_tensor(&mut w, t)?;
    }
    Ok(())
}

fn read_line<R: Read>(r: &mut R) -> Result<String> {
    let mut line = Vec::new();
    let mut b = [0u8; 1];
    loop {
        r.read_exact(&mut b).map_err(|e| CenError::Format(format!("truncated head manifest: {e}")))?;
        if b[0] == b'\n' {
            break;
        }
        line.push(b[0]);
        if line.len() > 256 {
            return Err(CenError::Format("head manifest line too long".into()));
        }
    }
    String::from_utf8(line).map_err(|_| CenError::Format("head manifest is not UTF-8".into()))
}

/// Reads a head archive and derives its configuration from the tensor shapes.
pub fn read_head<R: Read>(mut r: R, mode: HeadMode) -> Result<(HeadConfig, HeadWeights)> {
    let mut tensors = Vec::with_capacity(4);
    for expected in HEAD_TENSORS {
        let line = read_line(&mut r)?;
        let parts: Vec<&str> = line.split_whitespace().collect();
        let len = match parts[..] {
            ["tensor", name, len] if name == expected => {
                len.parse::<usize>().map_err(|_| CenError::Format(format!("bad byte length in {line:?}")))?
            }
            _ => return Err(CenError::Format(format!("expected manifest for {expected}, got {line:?}"))),
        };
        let mut bytes = vec![0u8; len];
        r.read_exact(&mut bytes).map_err(|e| CenError::Format(format!("truncated tensor {expected}: {e}")))?;
        tensors.push(decode(&bytes)?);
    }
    let mat = |t: &Tensor| -> Result<Array2<f64>> {
        match t.dims[..] {
            [rows, cols] => Array2::from_shape_vec((rows, cols), t.data.iter().map(|&v| v as f64).collect())
                .map_err(|e| CenError::Format(e.to_string())),
            _ => Err(CenError::Format(format!("expected a matrix, got dims {:?}", t.dims))),
        }
    };
    let vec1 = |t: &Tensor| -> Result<Array1<f64>> {
        match t.dims[..] {
            [_] => Ok(Array1::from(t.data.iter().map(|&v| v as f64).collect::<Vec<_>>())),
            _ => Err(CenError::Format(format!("expected a vector, got dims {:?}", t.dims))),
        }
    };
    let weights =
        HeadWeights { w1: mat(&tensors[0])?, b1: vec1(&tensors[1])?, w2: mat(&tensors[2])?, b2: vec1(&tensors[3])? };
    let out = weights.w2.nrows();
    let num_classes = match mode {
        HeadMode::FullySupervised if out.is_multiple_of(5) => out / 5,
        HeadMode::WeaklySupervised => out,
        _ => return Err(CenError::Format(format!("{out} outputs do not fit a fully supervised head"))),
    };
    let config = HeadConfig::new(num_classes, weights.w1.ncols(), weights.w1.nrows(), mode)?;
    weights.check(&config)?;
    Ok((config, weights))
}
