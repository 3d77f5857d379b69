//! Weight file: `PANN`, u32 format version, u32 layer count, u32 input rank
//! and input dims, then per layer a u8 kind tag, its u32 shape integers and,
//! for parameterized layers, weights then biases as little-endian `f64`.
//! All integers are little-endian.

use super::{Layer, Network, Tensor};
use crate::{Error, Result};

pub const WEIGHT_MAGIC: &[u8; 4] = b"PANN";
pub const WEIGHT_VERSION: u32 = 1;

const TAG_DENSE: u8 = 1;
const TAG_CONV1D: u8 = 2;
const TAG_MAXPOOL1D: u8 = 3;
const TAG_RELU: u8 = 4;
const TAG_SIGMOID: u8 = 5;
const TAG_FLATTEN: u8 = 6;

/// Guards allocations driven by untrusted size fields.
const MAX_TENSOR_VALUES: usize = 1 << 28;

pub(crate) struct ByteReader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(data: &'a [u8]) -> ByteReader<'a> {
        ByteReader { data, pos: 0 }
    }

    pub(crate) fn offset(&self) -> usize {
        self.pos
    }

    pub(crate) fn remaining(&self) -> usize {
        self.data.len() - self.pos
    }

    pub(crate) fn error(&self, reason: impl Into<String>) -> Error {
        Error::ModelFormat {
            offset: self.pos,
            reason: reason.into(),
        }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(self.error(format!(
                "truncated: need {n} bytes, {} left",
                self.remaining()
            )));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn dim(&mut self) -> Result<usize> {
        let v = self.u32()? as usize;
        if v == 0 {
            return Err(self.error("zero dimension"));
        }
        Ok(v)
    }

    fn tensor(&mut self, shape: Vec<usize>) -> Result<Tensor> {
        let n = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let n = match n {
            Some(n) if n <= MAX_TENSOR_VALUES => n,
            _ => return Err(self.error(format!("tensor {shape:?} too large"))),
        };
        if self.remaining() / 8 < n {
            return Err(self.error(format!("truncated: tensor {shape:?} needs {} bytes", n * 8)));
        }
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let v = self.f64()?;
            if !v.is_finite() {
                return Err(self.error("non-finite weight"));
            }
            data.push(v);
        }
        Tensor::new(shape, data).map_err(|e| self.error(e.to_string()))
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor) {
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn write_network(net: &Network, out: &mut Vec<u8>) {
    out.extend_from_slice(WEIGHT_MAGIC);
    out.extend_from_slice(&WEIGHT_VERSION.to_le_bytes());
    put_u32(out, net.layers().len());
    put_u32(out, net.input_shape().len());
    for &d in net.input_shape() {
        put_u32(out, d);
    }
    for layer in net.layers() {
        match layer {
            Layer::Dense { weight, bias } => {
                out.push(TAG_DENSE);
                put_u32(out, weight.shape()[1]);
                put_u32(out, weight.shape()[0]);
                put_tensor(out, weight);
                put_tensor(out, bias);
            }
            Layer::Conv1d { weight, bias } => {
                out.push(TAG_CONV1D);
                put_u32(out, weight.shape()[1]);
                put_u32(out, weight.shape()[0]);
                put_u32(out, weight.shape()[2]);
                put_tensor(out, weight);
                put_tensor(out, bias);
            }
            Layer::MaxPool1d { pool_size } => {
                out.push(TAG_MAXPOOL1D);
                put_u32(out, *pool_size);
            }
            Layer::Relu => out.push(TAG_RELU),
            Layer::Sigmoid => out.push(TAG_SIGMOID),
            Layer::Flatten => out.push(TAG_FLATTEN),
        }
    }
}

pub(crate) fn read_network_from(r: &mut ByteReader<'_>) -> Result<Network> {
    let start = r.offset();
    if r.take(4)? != WEIGHT_MAGIC {
        return Err(Error::ModelFormat {
            offset: start,
            reason: "bad magic".into(),
        });
    }
    let version = r.u32()?;
    if version != WEIGHT_VERSION {
        return Err(r.error(format!("unsupported weight format version {version}")));
    }
    let layer_count = r.u32()? as usize;
    let rank = r.u32()? as usize;
    if rank == 0 || rank > 2 {
        return Err(r.error(format!("bad input rank {rank}")));
    }
    let input_shape = (0..rank).map(|_| r.dim()).collect::<Result<Vec<_>>>()?;
    let mut layers = Vec::new();
    for _ in 0..layer_count {
        let at = r.offset();
        let layer = match r.u8()? {
            TAG_DENSE => {
                let (inputs, units) = (r.dim()?, r.dim()?);
                Layer::Dense {
                    weight: r.tensor(vec![units, inputs])?,
                    bias: r.tensor(vec![units])?,
                }
            }
            TAG_CONV1D => {
                let (channels, filters, kernel) = (r.dim()?, r.dim()?, r.dim()?);
                Layer::Conv1d {
                    weight: r.tensor(vec![filters, channels, kernel])?,
                    bias: r.tensor(vec![filters])?,
                }
            }
            TAG_MAXPOOL1D => Layer::MaxPool1d {
                pool_size: r.dim()?,
            },
            TAG_RELU => Layer::Relu,
            TAG_SIGMOID => Layer::Sigmoid,
            TAG_FLATTEN => Layer::Flatten,
            tag => {
                return Err(Error::ModelFormat {
                    offset: at,
                    reason: format!("unknown layer tag {tag}"),
                })
            }
        };
        layers.push(layer);
    }
    Network::from_layers(input_shape, layers).map_err(|e| r.error(e.to_string()))
}

/// Parses a complete weight file; trailing bytes are an error.
pub fn read_network(data: &[u8]) -> Result<Network> {
    let mut r = ByteReader::new(data);
    let net = read_network_from(&mut r)?;
    if r.remaining() != 0 {
        return Err(r.error("trailing bytes"));
    }
    Ok(net)
}
