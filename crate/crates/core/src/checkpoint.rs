//! Checkpoint directories: `manifest.txt` plus a little-endian `f64` blob.
//!
//! ```text
//! irsr-checkpoint 1
//! config scale = 2
//! ...
//! param wtfm.conv3.weight 8x1x3x3 0 72
//! ```
//!
//! Offsets and lengths count `f64` values in `weights.bin`. Nothing
//! time-dependent is written, so equal models give byte-identical files.

use std::fmt::Write as _;
use std::path::Path;

use crate::config::{parse_kv, ModelConfig};
use crate::error::{Error, Result};
use crate::model::Model;

pub const MANIFEST: &str = "manifest.txt";
pub const WEIGHTS: &str = "weights.bin";
const HEADER: &str = "irsr-checkpoint 1";

pub fn manifest_and_blob(model: &Model) -> (String, Vec<u8>) {
    let mut manifest = format!("{HEADER}\n");
    for line in model.config.to_kv().lines() {
        let _ = writeln!(manifest, "config {line}");
    }
    let mut blob = Vec::with_capacity(8 * model.params.numel());
    let mut offset = 0;
    for p in model.params.iter() {
        let shape: Vec<String> = p.tensor.shape().iter().map(|d| d.to_string()).collect();
        let _ = writeln!(manifest, "param {} {} {offset} {}", p.name, shape.join("x"), p.tensor.len());
        offset += p.tensor.len();
        for v in p.tensor.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    (manifest, blob)
}

pub fn save(model: &Model, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let (manifest, blob) = manifest_and_blob(model);
    std::fs::write(dir.join(MANIFEST), manifest)?;
    std::fs::write(dir.join(WEIGHTS), blob)?;
    Ok(())
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Data(format!("checkpoint: {}", msg.into()))
}

pub fn load(dir: &Path) -> Result<Model> {
    let manifest = std::fs::read_to_string(dir.join(MANIFEST))
        .map_err(|e| bad(format!("cannot read {}: {e}", dir.join(MANIFEST).display())))?;
    let blob = std::fs::read(dir.join(WEIGHTS)).map_err(|e| bad(format!("cannot read weights: {e}")))?;
    let mut lines = manifest.lines();
    if lines.next() != Some(HEADER) {
        return Err(bad("missing header line"));
    }
    let mut config = ModelConfig::default();
    let mut params = Vec::new();
    for line in lines {
        if let Some(kv) = line.strip_prefix("config ") {
            for (k, v) in parse_kv(kv)? {
                if !config.set(&k, &v)? {
                    return Err(bad(format!("unknown config key {k}")));
                }
            }
        } else if let Some(rest) = line.strip_prefix("param ") {
            let f: Vec<&str> = rest.split_whitespace().collect();
            let [name, shape, offset, len] = f[..] else {
                return Err(bad(format!("malformed line {line:?}")));
            };
            let num = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("bad number in {line:?}")));
            let shape = shape.split('x').map(num).collect::<Result<Vec<_>>>()?;
            params.push((name.to_string(), shape, num(offset)?, num(len)?));
        } else if !line.trim().is_empty() {
            return Err(bad(format!("unexpected line {line:?}")));
        }
    }
    let mut model = Model::new(config, 0)?;
    if params.len() != model.params.len() {
        return Err(bad(format!("{} parameters stored, model has {}", params.len(), model.params.len())));
    }
    for (name, shape, offset, len) in params {
        let p = model.params.by_name_mut(&name).ok_or_else(|| bad(format!("unknown parameter {name}")))?;
        if p.tensor.shape() != shape.as_slice() || len != p.tensor.len() {
            return Err(bad(format!("{name}: stored shape {shape:?} vs {:?}", p.tensor.shape())));
        }
        let bytes = blob
            .get(8 * offset..8 * (offset + len))
            .ok_or_else(|| bad(format!("{name}: weights file truncated")))?;
        for (dst, chunk) in p.tensor.data_mut().iter_mut().zip(bytes.chunks_exact(8)) {
            *dst = f64::from_le_bytes(chunk.try_into().unwrap());
        }
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ModelConfig { scale: 4, selective: false, ..ModelConfig::tiny() };
        let m = Model::new(cfg, 5).unwrap();
        save(&m, dir.path()).unwrap();
        let back = load(dir.path()).unwrap();
        assert_eq!(back.config, m.config);
        assert_eq!(back.params, m.params);
    }

    #[test]
    fn corrupt_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let m = Model::new(ModelConfig::tiny(), 1).unwrap();
        save(&m, dir.path()).unwrap();
        let blob = std::fs::read(dir.path().join(WEIGHTS)).unwrap();
        std::fs::write(dir.path().join(WEIGHTS), &blob[..blob.len() - 8]).unwrap();
        assert!(matches!(load(dir.path()), Err(Error::Data(_))));
        std::fs::write(dir.path().join(MANIFEST), "nope\n").unwrap();
        assert!(load(dir.path()).is_err());
        assert!(load(&dir.path().join("missing")).is_err());
    }
}
