//! Binary model checkpoint.
//!
//! All integers are little-endian `u32`, all reals little-endian IEEE-754
//! `f64`:
//!
//! ```text
//! offset  size  field
//! 0       8     magic  "GLCMODEL"
//! 8       4     version (1)
//! 12      4     layer count (3)
//! then, per layer in order hidden (ReLU), feature (linear), classifier:
//!         4     fan_in
//!         4     fan_out
//!         8·fan_in·fan_out   weights, row-major fan_in × fan_out
//!         8·fan_out          bias
//! ```
//!
//! Nothing may follow the last layer.

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{Layer, ModelParams};
use crate::error::{GlcError, Result};
use crate::numeric::Matrix;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GLCMODEL";
pub const CHECKPOINT_VERSION: u32 = 1;
const LAYER_COUNT: u32 = 3;

fn write_layer(out: &mut Vec<u8>, layer: &Layer) {
    out.extend_from_slice(&(layer.fan_in() as u32).to_le_bytes());
    out.extend_from_slice(&(layer.fan_out() as u32).to_le_bytes());
    for v in layer.weights.data().iter().chain(&layer.bias) {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn to_bytes(params: &ModelParams) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&LAYER_COUNT.to_le_bytes());
    for layer in params.layers() {
        write_layer(&mut out, layer);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            GlcError::Checkpoint(format!("truncated at byte {} (need {n} more)", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| GlcError::Checkpoint("size overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn layer(&mut self) -> Result<Layer> {
        let fan_in = self.u32()? as usize;
        let fan_out = self.u32()? as usize;
        let weights = self.f64s(fan_in * fan_out)?;
        let bias = self.f64s(fan_out)?;
        let weights = Matrix::from_vec(fan_in, fan_out, weights)
            .map_err(|e| GlcError::Checkpoint(e.to_string()))?;
        Ok(Layer { weights, bias })
    }
}

pub(crate) fn from_bytes(bytes: &[u8]) -> Result<ModelParams> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(GlcError::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(GlcError::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32()?;
    if count != LAYER_COUNT {
        return Err(GlcError::Checkpoint(format!("expected {LAYER_COUNT} layers, found {count}")));
    }
    let params = ModelParams {
        hidden: r.layer()?,
        feature: r.layer()?,
        classifier: r.layer()?,
    };
    if r.pos != bytes.len() {
        return Err(GlcError::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    params.validate().map_err(|e| GlcError::Checkpoint(e.to_string()))?;
    Ok(params)
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(params)).map_err(|e| GlcError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let bytes = std::fs::read(path).map_err(|e| GlcError::io(path, e))?;
    from_bytes(&bytes)
}

/// Hex SHA-256 over the serialized classifier layer.
pub fn classifier_checksum(params: &ModelParams) -> String {
    let mut bytes = Vec::new();
    write_layer(&mut bytes, &params.classifier);
    let digest = Sha256::digest(&bytes);
    digest.iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}
