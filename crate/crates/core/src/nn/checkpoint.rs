//! Binary parameter checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! "MGKP1"  u32 layer_count
//! per layer:
//!   u8 kind_tag  u32 kernel  u32 rows  u32 cols  u32 bias_len  u32 bn_len
//!   f64 weights[rows·cols]  f64 bias[bias_len]
//!   f64 gamma[bn_len]  f64 beta[bn_len]  f64 running_mean[bn_len]  f64 running_var[bn_len]
//! ```
//!
//! Kind tags: 1 graph conv, 2 conv2d, 3 batch norm, 4 fully connected.

use std::io::Write;
use std::path::Path;

use super::params::{LayerKind, LayerParams, DEFAULT_BN_MOMENTUM};
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"MGKP1";

fn push_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::contract(format!("dimension {v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn push_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(layers: &[LayerParams]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    push_u32(&mut out, layers.len())?;
    for p in layers {
        out.push(p.kind.tag());
        let kernel = match p.kind {
            LayerKind::Conv2d { kernel } => kernel,
            _ => 0,
        };
        push_u32(&mut out, kernel)?;
        push_u32(&mut out, p.weights.rows())?;
        push_u32(&mut out, p.weights.cols())?;
        push_u32(&mut out, p.bias.len())?;
        push_u32(&mut out, p.bn_gamma.len())?;
        push_f64s(&mut out, p.weights.data());
        push_f64s(&mut out, &p.bias);
        push_f64s(&mut out, &p.bn_gamma);
        push_f64s(&mut out, &p.bn_beta);
        push_f64s(&mut out, &p.bn_running_mean);
        push_f64s(&mut out, &p.bn_running_var);
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.pos as u64,
                format!("truncated checkpoint while reading {what}"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let start = self.pos;
        let len = n
            .checked_mul(8)
            .ok_or_else(|| Error::format(start as u64, format!("{what} length overflows")))?;
        let b = self.take(len, what)?;
        let values: Vec<f64> = b
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::format(
                (start + 8 * i) as u64,
                format!("non-finite value in {what}"),
            ));
        }
        Ok(values)
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<LayerParams>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(CHECKPOINT_MAGIC.len(), "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::format(0, "bad checkpoint magic"));
    }
    let count = r.u32("layer count")?;
    let mut layers = Vec::with_capacity(count.min(1024));
    for i in 0..count {
        let tag_at = r.pos as u64;
        let tag = r.take(1, "layer tag")?[0];
        let kernel = r.u32("kernel size")?;
        let kind = match tag {
            1 => LayerKind::GraphConv,
            2 => LayerKind::Conv2d { kernel },
            3 => LayerKind::BatchNorm,
            4 => LayerKind::FullyConnected,
            t => return Err(Error::format(tag_at, format!("unknown layer tag {t} in layer {i}"))),
        };
        let rows = r.u32("weight rows")?;
        let cols = r.u32("weight cols")?;
        let bias_len = r.u32("bias length")?;
        let bn_len = r.u32("batch-norm length")?;
        let weights_len = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::format(r.pos as u64, "weight shape overflows"))?;
        let weights = r.f64s(weights_len, "weights")?;
        let bias = r.f64s(bias_len, "bias")?;
        let bn_gamma = r.f64s(bn_len, "gamma")?;
        let bn_beta = r.f64s(bn_len, "beta")?;
        let bn_running_mean = r.f64s(bn_len, "running mean")?;
        let var_at = r.pos as u64;
        let bn_running_var = r.f64s(bn_len, "running variance")?;
        if bn_running_var.iter().any(|&v| v < 0.0) {
            return Err(Error::format(var_at, "negative running variance"));
        }
        layers.push(LayerParams {
            kind,
            weights: DenseMatrix::new(rows, cols, weights)?,
            bias,
            bn_gamma,
            bn_beta,
            bn_running_mean,
            bn_running_var,
            bn_momentum: DEFAULT_BN_MOMENTUM,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::format(r.pos as u64, "trailing bytes after last layer"));
    }
    Ok(layers)
}

pub fn save_checkpoint(path: &Path, layers: &[LayerParams]) -> Result<()> {
    let bytes = encode_checkpoint(layers)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<LayerParams>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
