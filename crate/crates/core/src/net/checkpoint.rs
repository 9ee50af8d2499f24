//! Binary checkpoint format:
//!
//! ```text
//! "SSAE" | u32 version | u64 meta_len | meta JSON
//! repeated: u32 name_len | name | u8 dtype | u32 ndim | u64 dims... | LE data
//! ```
//! All integers little-endian. dtype 8 = f64, 4 = f32 (read-only, widened).

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::encoder::{EncoderConfig, Network};
use super::tensor::{ParamSet, Tensor};
use crate::error::{Error, Result};
use crate::manips::CATALOG_VERSION;
use crate::pixel::RngStream;

pub const MAGIC: &[u8; 4] = b"SSAE";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 8;
const DTYPE_F32: u8 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: EncoderConfig,
    pub catalog_version: String,
    pub epoch: u64,
    pub rng: Option<RngStream>,
    pub param_count: usize,
    /// Free-form run details (training config and the like).
    #[serde(default)]
    pub extra: serde_json::Value,
}

impl CheckpointMeta {
    pub fn new(config: EncoderConfig, epoch: u64) -> Self {
        CheckpointMeta {
            param_count: config.param_layout().len(),
            config,
            catalog_version: CATALOG_VERSION.to_string(),
            epoch,
            rng: None,
            extra: serde_json::Value::Null,
        }
    }
}

pub fn encode_checkpoint(net: &Network, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let mut meta = meta.clone();
    meta.config = net.config().clone();
    meta.param_count = net.params().len();
    let json = serde_json::to_vec(&meta)?;
    let mut out = Vec::with_capacity(16 + json.len() + net.params().num_scalars() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (name, t) in net.params().iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F64);
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!("checkpoint truncated while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(Network, CheckpointMeta)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let meta_len = r.u64("metadata length")? as usize;
    if meta_len > bytes.len() {
        return Err(Error::Format("checkpoint truncated while reading metadata".into()));
    }
    let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len, "metadata")?)
        .map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
    if meta.catalog_version != CATALOG_VERSION {
        return Err(Error::Format(format!(
            "checkpoint built for catalog '{}', this build uses '{CATALOG_VERSION}'",
            meta.catalog_version
        )));
    }
    let mut params = ParamSet::new();
    for _ in 0..meta.param_count {
        let nlen = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(nlen, "name")?)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
            .to_string();
        let dtype = r.take(1, "dtype")?[0];
        let ndim = r.u32("rank")? as usize;
        if ndim > 8 {
            return Err(Error::Format(format!("implausible rank {ndim} for {name}")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64("shape")? as usize);
        }
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match dtype {
            DTYPE_F64 => r
                .take(n.checked_mul(8).ok_or_else(|| Error::Format("shape overflow".into()))?, &name)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            DTYPE_F32 => r
                .take(n.checked_mul(4).ok_or_else(|| Error::Format("shape overflow".into()))?, &name)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            other => return Err(Error::Format(format!("unknown dtype tag {other} for {name}"))),
        };
        params
            .insert(name, Tensor::from_vec(&shape, data)?)
            .map_err(|e| Error::Format(e.to_string()))?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after last parameter".into()));
    }
    let net = Network::from_parts(meta.config.clone(), params)
        .map_err(|e| Error::Format(format!("checkpoint parameters: {e}")))?;
    Ok((net, meta))
}

pub fn save_checkpoint(path: &Path, net: &Network, meta: &CheckpointMeta) -> Result<()> {
    let bytes = encode_checkpoint(net, meta)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(Network, CheckpointMeta)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
