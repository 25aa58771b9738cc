//! Flat `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are an
//! error so typos surface immediately.
//!
//! Model keys: `scale`, `in_channels`, `cf`, `d_emb`, `n_groups`, `n_blocks`,
//! `state_dim`, `expand`, `lambda`, `selective`, `gate`, `global_skip`.
//!
//! Training keys: `lr`, `batch`, `iterations`, `seed`, `patch_lr`,
//! `checkpoint_interval`, `data_dir`, `synthetic_images`, `synthetic_size`,
//! `border_crop`, `quantize`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{arg_err, Error, Result};
use crate::wavelet::GateActivation;

/// Architecture hyper-parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Upsampling factor, 2 or 4.
    pub scale: usize,
    /// Image channels (1 for single-band infrared).
    pub in_channels: usize,
    /// Shallow feature width.
    pub cf: usize,
    /// Backbone embedding width.
    pub d_emb: usize,
    pub n_groups: usize,
    pub n_blocks: usize,
    /// SSM state size per channel.
    pub state_dim: usize,
    /// Channel expansion inside the vision state-space module.
    pub expand: usize,
    /// Weight of the semantic consistency loss.
    pub lambda_loss: f64,
    /// Input-dependent timescale/input/readout maps; `false` freezes them to
    /// learned constants (time-invariant scan).
    pub selective: bool,
    pub gate: GateActivation,
    /// Adds a bilinear upsampling of the input to the output.
    pub global_skip: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            scale: 2,
            in_channels: 1,
            cf: 8,
            d_emb: 32,
            n_groups: 4,
            n_blocks: 2,
            state_dim: 4,
            expand: 2,
            lambda_loss: 0.1,
            selective: true,
            gate: GateActivation::Silu,
            global_skip: true,
        }
    }
}

impl ModelConfig {
    /// Smallest useful configuration, used by gradient checks.
    pub fn tiny() -> Self {
        Self { cf: 2, d_emb: 4, n_groups: 1, n_blocks: 1, state_dim: 2, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scale != 2 && self.scale != 4 {
            return Err(arg_err!("scale must be 2 or 4, got {}", self.scale));
        }
        let counts = [
            ("in_channels", self.in_channels),
            ("cf", self.cf),
            ("d_emb", self.d_emb),
            ("n_groups", self.n_groups),
            ("n_blocks", self.n_blocks),
            ("state_dim", self.state_dim),
            ("expand", self.expand),
        ];
        if let Some((k, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(arg_err!("{k} must be at least 1"));
        }
        if !(self.lambda_loss >= 0.0 && self.lambda_loss.is_finite()) {
            return Err(arg_err!("lambda must be a finite non-negative number"));
        }
        Ok(())
    }

    /// Applies one key; returns `false` if the key is not a model key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "scale" => self.scale = parse(key, value)?,
            "in_channels" => self.in_channels = parse(key, value)?,
            "cf" => self.cf = parse(key, value)?,
            "d_emb" => self.d_emb = parse(key, value)?,
            "n_groups" => self.n_groups = parse(key, value)?,
            "n_blocks" => self.n_blocks = parse(key, value)?,
            "state_dim" => self.state_dim = parse(key, value)?,
            "expand" => self.expand = parse(key, value)?,
            "lambda" => self.lambda_loss = parse(key, value)?,
            "selective" => self.selective = parse(key, value)?,
            "gate" => self.gate = value.parse()?,
            "global_skip" => self.global_skip = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Serialises as `key = value` lines accepted by [`ModelConfig::set`].
    pub fn to_kv(&self) -> String {
        let gate = match self.gate {
            GateActivation::Silu => "silu",
            GateActivation::Sigmoid => "sigmoid",
        };
        let mut s = String::new();
        for (k, v) in [
            ("scale", self.scale.to_string()),
            ("in_channels", self.in_channels.to_string()),
            ("cf", self.cf.to_string()),
            ("d_emb", self.d_emb.to_string()),
            ("n_groups", self.n_groups.to_string()),
            ("n_blocks", self.n_blocks.to_string()),
            ("state_dim", self.state_dim.to_string()),
            ("expand", self.expand.to_string()),
            ("lambda", format!("{:?}", self.lambda_loss)),
            ("selective", self.selective.to_string()),
            ("gate", gate.to_string()),
            ("global_skip", self.global_skip.to_string()),
        ] {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

/// Optimisation and data settings.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub lr: f64,
    pub batch: usize,
    pub iterations: usize,
    pub seed: u64,
    /// LR patch edge; the HR patch is `scale * patch_lr`.
    pub patch_lr: usize,
    /// Write a checkpoint every this many iterations (0: only at the end).
    pub checkpoint_interval: usize,
    /// Directory-of-pairs dataset; synthetic data is generated when absent.
    pub data_dir: Option<PathBuf>,
    pub synthetic_images: usize,
    pub synthetic_size: usize,
    pub border_crop: usize,
    pub quantize: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            lr: 1e-5,
            batch: 4,
            iterations: 1000,
            seed: 0,
            patch_lr: 32,
            checkpoint_interval: 0,
            data_dir: None,
            synthetic_images: 8,
            synthetic_size: 64,
            border_crop: 0,
            quantize: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(arg_err!("lr must be positive, got {}", self.lr));
        }
        if self.batch == 0 {
            return Err(arg_err!("batch must be at least 1"));
        }
        if self.patch_lr < 8 || self.patch_lr % 2 == 1 {
            return Err(arg_err!("patch_lr must be even and at least 8, got {}", self.patch_lr));
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if self.model.set(key, value)? {
            return Ok(());
        }
        match key {
            "lr" => self.lr = parse(key, value)?,
            "batch" => self.batch = parse(key, value)?,
            "iterations" => self.iterations = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "patch_lr" => self.patch_lr = parse(key, value)?,
            "checkpoint_interval" => self.checkpoint_interval = parse(key, value)?,
            "data_dir" => self.data_dir = Some(PathBuf::from(value)),
            "synthetic_images" => self.synthetic_images = parse(key, value)?,
            "synthetic_size" => self.synthetic_size = parse(key, value)?,
            "border_crop" => self.border_crop = parse(key, value)?,
            "quantize" => self.quantize = parse(key, value)?,
            _ => return Err(arg_err!("unknown config key {key:?}")),
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in parse_kv(text)? {
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_text(&text)
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| arg_err!("invalid value {value:?} for {key}"))
}

/// Splits `key = value` lines.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| arg_err!("line {}: expected `key = value`, got {line:?}", n + 1))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_model_keys() {
        let cfg = ModelConfig { scale: 4, lambda_loss: 0.25, gate: GateActivation::Sigmoid, ..ModelConfig::tiny() };
        let mut back = ModelConfig::default();
        for (k, v) in parse_kv(&cfg.to_kv()).unwrap() {
            assert!(back.set(&k, &v).unwrap());
        }
        assert_eq!(back, cfg);
    }

    #[test]
    fn train_file() {
        let cfg = TrainConfig::from_text("# desk\nlr = 0.002\nbatch=2\n\nn_blocks = 3\nseed = 9\n").unwrap();
        assert_eq!((cfg.lr, cfg.batch, cfg.model.n_blocks, cfg.seed), (0.002, 2, 3, 9));
        assert!(TrainConfig::from_text("bogus = 1").is_err());
        assert!(TrainConfig::from_text("lr 3").is_err());
        assert!(TrainConfig::from_text("batch = x").is_err());
    }

    #[test]
    fn validation() {
        assert!(ModelConfig { scale: 3, ..ModelConfig::default() }.validate().is_err());
        assert!(ModelConfig { n_blocks: 0, ..ModelConfig::default() }.validate().is_err());
        assert!(TrainConfig { lr: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { batch: 0, ..TrainConfig::default() }.validate().is_err());
        TrainConfig::default().validate().unwrap();
    }
}
