//! Named parameter storage and the portable binary weight format.
//!
//! A `WeightStore` maps layer names to raw f32 tensors. Convolution and
//! normalization parameters are assembled from name suffixes:
//! `<layer>.weight` / `<layer>.bias` for convolutions,
//! `<layer>.{mean,var,gamma,beta}` for normalization.
//!
//! File layout (little-endian throughout):
//!
//! ```text
//! magic  "ADPC"          4 bytes
//! version u32            must be 1
//! count   u32            number of tensors
//! per tensor:
//!   name_len u16, name UTF-8 bytes
//!   dtype u8             0 = f32 little-endian
//!   rank  u8
//!   dims  rank x u32
//!   data  prod(dims) x f32
//! ```
//!
//! The loader rejects unknown magic, versions, dtypes, duplicate names and
//! truncated or trailing bytes. Tensors are kept in sorted name order so the
//! same store always serializes to the same bytes.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"ADPC";
const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;
const MAX_ELEMENTS: u64 = 1 << 31;

/// Convolution parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvWeights {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    /// `out_channels * in_channels * kernel_h * kernel_w`, row-major in that order.
    pub weights: Vec<f32>,
    /// One bias per output channel.
    pub bias: Vec<f32>,
}

impl ConvWeights {
    pub fn new(
        out_channels: usize,
        in_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        weights: Vec<f32>,
        bias: Vec<f32>,
    ) -> Result<Self> {
        if out_channels == 0 || in_channels == 0 {
            return Err(Error::config("conv channels must be >= 1"));
        }
        if kernel_h.is_multiple_of(2) || kernel_w.is_multiple_of(2) || kernel_h == 0 || kernel_w == 0 {
            return Err(Error::config(format!("conv kernel dims must be odd, got {kernel_h}x{kernel_w}")));
        }
        let expect = out_channels * in_channels * kernel_h * kernel_w;
        if weights.len() != expect {
            return Err(Error::config(format!(
                "conv weight length {} does not match {out_channels}x{in_channels}x{kernel_h}x{kernel_w}",
                weights.len()
            )));
        }
        if bias.len() != out_channels {
            return Err(Error::config(format!(
                "conv bias length {} does not match out channels {out_channels}",
                bias.len()
            )));
        }
        Ok(ConvWeights { out_channels, in_channels, kernel_h, kernel_w, weights, bias })
    }

    #[inline]
    pub fn weight_at(&self, oc: usize, ic: usize, ky: usize, kx: usize) -> f32 {
        self.weights[((oc * self.in_channels + ic) * self.kernel_h + ky) * self.kernel_w + kx]
    }
}

/// Inference-mode normalization parameters for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BnParams {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub eps: f32,
}

impl BnParams {
    /// Identity normalization for `channels`.
    pub fn identity(channels: usize, eps: f32) -> Self {
        BnParams {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            eps,
        }
    }
}

/// One raw named tensor in the store.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

impl RawTensor {
    pub fn new(dims: Vec<u32>, data: Vec<f32>) -> Result<Self> {
        if dims.is_empty() || dims.len() > 8 {
            return Err(Error::config("tensor rank must be 1..=8"));
        }
        if dims.contains(&0) {
            return Err(Error::config("tensor dims must be >= 1"));
        }
        let n: u64 = dims.iter().map(|&d| d as u64).product();
        if n > MAX_ELEMENTS {
            return Err(Error::config("tensor too large"));
        }
        if data.len() as u64 != n {
            return Err(Error::config(format!(
                "tensor data length {} does not match dims {:?}",
                data.len(),
                dims
            )));
        }
        Ok(RawTensor { dims, data })
    }
}

/// Named tensor collection.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightStore {
    tensors: BTreeMap<String, RawTensor>,
}

impl WeightStore {
    pub fn new() -> Self {
        WeightStore::default()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(|s| s.as_str())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn insert_raw(&mut self, name: impl Into<String>, tensor: RawTensor) -> Result<()> {
        let name = name.into();
        if name.is_empty() || name.len() > u16::MAX as usize {
            return Err(Error::config("tensor name length must be 1..=65535 bytes"));
        }
        if self.tensors.contains_key(&name) {
            return Err(Error::config(format!("duplicate tensor name {name:?}")));
        }
        self.tensors.insert(name, tensor);
        Ok(())
    }

    pub fn get_raw(&self, name: &str) -> Result<&RawTensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::config(format!("weight tensor {name:?} not found")))
    }

    /// Store convolution parameters under `<name>.weight` / `<name>.bias`.
    pub fn insert_conv(&mut self, name: &str, conv: &ConvWeights) -> Result<()> {
        self.insert_raw(
            format!("{name}.weight"),
            RawTensor::new(
                vec![
                    conv.out_channels as u32,
                    conv.in_channels as u32,
                    conv.kernel_h as u32,
                    conv.kernel_w as u32,
                ],
                conv.weights.clone(),
            )?,
        )?;
        self.insert_raw(
            format!("{name}.bias"),
            RawTensor::new(vec![conv.out_channels as u32], conv.bias.clone())?,
        )
    }

    /// Assemble convolution parameters from `<name>.weight` / `<name>.bias`.
    pub fn conv(&self, name: &str) -> Result<ConvWeights> {
        let w = self.get_raw(&format!("{name}.weight"))?;
        if w.dims.len() != 4 {
            return Err(Error::config(format!("{name}.weight must be rank 4")));
        }
        let b = self.get_raw(&format!("{name}.bias"))?;
        if b.dims.len() != 1 {
            return Err(Error::config(format!("{name}.bias must be rank 1")));
        }
        ConvWeights::new(
            w.dims[0] as usize,
            w.dims[1] as usize,
            w.dims[2] as usize,
            w.dims[3] as usize,
            w.data.clone(),
            b.data.clone(),
        )
    }

    /// Store normalization parameters under `<name>.{mean,var,gamma,beta}`.
    pub fn insert_bn(&mut self, name: &str, bn: &BnParams) -> Result<()> {
        for (suffix, data) in
            [("mean", &bn.mean), ("var", &bn.var), ("gamma", &bn.gamma), ("beta", &bn.beta)]
        {
            self.insert_raw(
                format!("{name}.{suffix}"),
                RawTensor::new(vec![data.len() as u32], data.clone())?,
            )?;
        }
        Ok(())
    }

    /// Assemble normalization parameters from `<name>.{mean,var,gamma,beta}`.
    pub fn bn(&self, name: &str, eps: f32) -> Result<BnParams> {
        let mut parts = Vec::with_capacity(4);
        for suffix in ["mean", "var", "gamma", "beta"] {
            let t = self.get_raw(&format!("{name}.{suffix}"))?;
            if t.dims.len() != 1 {
                return Err(Error::config(format!("{name}.{suffix} must be rank 1")));
            }
            parts.push(t.data.clone());
        }
        let beta = parts.pop().unwrap();
        let gamma = parts.pop().unwrap();
        let var = parts.pop().unwrap();
        let mean = parts.pop().unwrap();
        if [&var, &gamma, &beta].iter().any(|p| p.len() != mean.len()) {
            return Err(Error::config(format!("{name} normalization parameter lengths differ")));
        }
        Ok(BnParams { mean, var, gamma, beta, eps })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F32);
            out.push(t.dims.len() as u8);
            for &d in &t.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            for &v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::format("bad magic, not a weight file"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(format!("unsupported weight file version {version}")));
        }
        let count = r.u32()?;
        let mut store = WeightStore::new();
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            if name_len == 0 {
                return Err(Error::format("empty tensor name"));
            }
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::format("tensor name is not UTF-8"))?
                .to_string();
            let dtype = r.u8()?;
            if dtype != DTYPE_F32 {
                return Err(Error::format(format!("unsupported dtype {dtype}")));
            }
            let rank = r.u8()? as usize;
            if rank == 0 || rank > 8 {
                return Err(Error::format(format!("unsupported tensor rank {rank}")));
            }
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u32()?);
            }
            if dims.contains(&0) {
                return Err(Error::format("zero tensor dimension"));
            }
            let n: u64 = dims.iter().map(|&d| d as u64).product();
            if n > MAX_ELEMENTS {
                return Err(Error::format("tensor too large"));
            }
            let raw = r.take(n as usize * 4)?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if store.tensors.contains_key(&name) {
                return Err(Error::format(format!("duplicate tensor name {name:?}")));
            }
            store.tensors.insert(name, RawTensor { dims, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::format("trailing bytes after last tensor"));
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format("unexpected end of weight file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
