use std::fs;
use std::path::{Path, PathBuf};

use super::train::TrainConfig;
use crate::model::tensor::decode_tensor;
use crate::model::{Parameters, PoseNet};
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"RPCKPT01";

/// Trained weights (32-bit) with the configuration that produced them.
/// The configuration lives in a JSON file next to the weights.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub net: PoseNet<f32>,
}

/// `foo.ckpt` -> `foo.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Weight file bytes: magic, entry count, then `(u16 name length, name,
/// tensor)` per parameter.
pub fn encode_params(params: &Parameters<f32>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.to_tensors() {
        let len = u16::try_from(name.len()).map_err(|_| Error::Contract(format!("parameter name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        t.encode(&mut out)?;
    }
    Ok(out)
}

fn field<'a>(bytes: &'a [u8], pos: &mut usize, n: usize, path: &Path, what: &str) -> Result<&'a [u8]> {
    if bytes.len() < *pos + n {
        return Err(Error::format(path, *pos as u64, format!("truncated {what}")));
    }
    let s = &bytes[*pos..*pos + n];
    *pos += n;
    Ok(s)
}

/// Parses a weight file. `path` is used in error messages.
pub fn decode_params(bytes: &[u8], path: &Path) -> Result<Vec<(String, crate::model::Tensor<f32>)>> {
    let mut pos = 0;
    if field(bytes, &mut pos, 8, path, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::format(path, 0, "bad checkpoint magic"));
    }
    let count = u32::from_le_bytes(field(bytes, &mut pos, 4, path, "entry count")?.try_into().expect("4"));
    let mut out = Vec::new();
    for _ in 0..count {
        let at = pos as u64;
        let len = u16::from_le_bytes(field(bytes, &mut pos, 2, path, "name length")?.try_into().expect("2"));
        let name = std::str::from_utf8(field(bytes, &mut pos, len as usize, path, "name")?)
            .map_err(|_| Error::format(path, at, "parameter name is not UTF-8"))?
            .to_string();
        let t = decode_tensor(bytes, &mut pos, path)?.into_f32(path)?;
        out.push((name, t));
    }
    if pos != bytes.len() {
        return Err(Error::format(path, pos as u64, "trailing bytes after last entry"));
    }
    Ok(out)
}

impl Checkpoint {
    pub fn new(config: TrainConfig, net: PoseNet<f32>) -> Self {
        Checkpoint { config, net }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, encode_params(self.net.params())?).map_err(|e| Error::io(path, e))?;
        let side = sidecar_path(path);
        let json = serde_json::to_string_pretty(&self.config).map_err(|e| Error::Json {
            path: side.clone(),
            source: e,
        })?;
        fs::write(&side, json).map_err(|e| Error::io(&side, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let entries = decode_params(&bytes, path)?;
        let side = sidecar_path(path);
        let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let config: TrainConfig = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: side.clone(),
            source: e,
        })?;
        let mut params = PoseNet::<f32>::new(config.model.clone(), 0)?.into_params();
        params
            .load_tensors(&entries)
            .map_err(|e| Error::format(path, 0, e.to_string()))?;
        let net = PoseNet::from_parts(config.model.clone(), params)?;
        Ok(Checkpoint { config, net })
    }
}
