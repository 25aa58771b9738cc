//! The super-resolution network: wavelet-modulated shallow features, residual
//! state-space groups, and a pixel-shuffle reconstruction tail.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::config::ModelConfig;
use crate::error::{arg_err, Result};
use crate::nn::{fan_in_uniform, Binding, Conv2d, LayerNorm, Linear, ParamId, ParamStore};
use crate::ssm::{init_a_log, init_dt_bias, scan_2d, selective_scan, SelectiveParams, Selectivity};
use crate::tensor::Tensor;
use crate::wavelet::Wtfm;

#[derive(Clone, Debug)]
enum DirProjection {
    Selective { dt: Linear, b: Linear, c: Linear },
    Frozen { dt_bias: ParamId, b: ParamId, c: ParamId },
}

/// Scan parameters for one of the four directions.
#[derive(Clone, Debug)]
struct DirectionScan {
    a_log: ParamId,
    d: ParamId,
    proj: DirProjection,
}

impl DirectionScan {
    fn new(store: &mut ParamStore, name: &str, width: usize, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let n = cfg.state_dim;
        let a_log = store.add(format!("{name}.a_log"), init_a_log(width, n))?;
        let d = store.add(format!("{name}.d"), Tensor::full(&[width], 1.0))?;
        let proj = if cfg.selective {
            let dt = Linear::new(store, &format!("{name}.dt"), width, width, true, rng)?;
            store.get_mut(dt.bias.expect("dt bias")).tensor = init_dt_bias(width);
            DirProjection::Selective {
                dt,
                b: Linear::new(store, &format!("{name}.b"), width, n, false, rng)?,
                c: Linear::new(store, &format!("{name}.c"), width, n, false, rng)?,
            }
        } else {
            DirProjection::Frozen {
                dt_bias: store.add(format!("{name}.dt_bias"), init_dt_bias(width))?,
                b: store.add(format!("{name}.b"), fan_in_uniform(&[n], 1, rng))?,
                c: store.add(format!("{name}.c"), fan_in_uniform(&[n], n, rng))?,
            }
        };
        Ok(Self { a_log, d, proj })
    }

    fn forward(&self, tape: &mut Tape, p: &Binding, seq: Var) -> Result<Var> {
        let a = tape.exp(p.var(self.a_log));
        let a = tape.scale(a, -1.0);
        let proj = match &self.proj {
            DirProjection::Selective { dt, b, c } => Selectivity::Selective {
                dt_weight: p.var(dt.weight),
                dt_bias: p.var(dt.bias.expect("dt bias")),
                b_weight: p.var(b.weight),
                c_weight: p.var(c.weight),
            },
            DirProjection::Frozen { dt_bias, b, c } => {
                Selectivity::Frozen { dt_bias: p.var(*dt_bias), b: p.var(*b), c: p.var(*c) }
            }
        };
        selective_scan(tape, seq, &SelectiveParams { a, d: p.var(self.d), proj })
    }
}

/// Vision state-space module: a scanned pathway gated by an activated
/// linear pathway.
///
/// ```text
/// X1  = LN(scan2d(silu(dwconv(Linear(x)))))
/// X2  = silu(Linear(x))
/// out = Linear(X1 * X2)
/// ```
#[derive(Clone, Debug)]
pub struct Vssm {
    in_main: Linear,
    in_gate: Linear,
    dwconv: Conv2d,
    dirs: Vec<DirectionScan>,
    norm: LayerNorm,
    out: Linear,
}

impl Vssm {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let (d, e) = (cfg.d_emb, cfg.d_emb * cfg.expand);
        let in_main = Linear::new(store, &format!("{name}.in_main"), d, e, true, rng)?;
        let in_gate = Linear::new(store, &format!("{name}.in_gate"), d, e, true, rng)?;
        let dwconv = Conv2d::new(store, &format!("{name}.dwconv"), e, e, 3, e, rng)?;
        let dirs = (0..4)
            .map(|k| DirectionScan::new(store, &format!("{name}.scan{k}"), e, cfg, rng))
            .collect::<Result<_>>()?;
        let norm = LayerNorm::new(store, &format!("{name}.norm"), e)?;
        let out = Linear::new(store, &format!("{name}.out"), e, d, true, rng)?;
        Ok(Self { in_main, in_gate, dwconv, dirs, norm, out })
    }

    /// `x` is a `[B, H*W, C]` token sequence laid out row-major over `(h, w)`.
    pub fn forward(&self, tape: &mut Tape, p: &Binding, x: Var, h: usize, w: usize) -> Result<Var> {
        let (_, l, _) = tape.value(x).dims3()?;
        if h * w != l || l == 0 {
            return Err(arg_err!("token sequence of length {l} does not match spatial size {h}x{w}"));
        }
        let u = self.in_main.forward(tape, p, x)?;
        let u = tape.from_tokens(u, h, w)?;
        let u = self.dwconv.forward(tape, p, u)?;
        let u = tape.silu(u)?;
        let y = scan_2d(tape, u, |tape, dir, seq| self.dirs[dir.index()].forward(tape, p, seq))?;
        let y = tape.to_tokens(y)?;
        let x1 = self.norm.forward(tape, p, y)?;
        let g = self.in_gate.forward(tape, p, x)?;
        let x2 = tape.silu(g)?;
        let m = tape.mul(x1, x2)?;
        self.out.forward(tape, p, m)
    }
}

/// Residual state-space block: `Z = VSSM(LN(F)) + s * F` with a learnable
/// per-channel scale `s`.
#[derive(Clone, Debug)]
pub struct Rssb {
    pub norm: LayerNorm,
    pub vssm: Vssm,
    pub scale: ParamId,
}

impl Rssb {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), cfg.d_emb)?,
            vssm: Vssm::new(store, &format!("{name}.vssm"), cfg, rng)?,
            scale: store.add(format!("{name}.scale"), Tensor::full(&[cfg.d_emb], 1.0))?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Binding, f: Var, h: usize, w: usize) -> Result<Var> {
        let n = self.norm.forward(tape, p, f)?;
        let v = self.vssm.forward(tape, p, n, h, w)?;
        let skip = tape.mul_last(f, p.var(self.scale))?;
        tape.add(v, skip)
    }
}

/// Residual state-space group: blocks, a 3x3 convolution, and a residual
/// connection around both.
#[derive(Clone, Debug)]
pub struct Rssg {
    pub blocks: Vec<Rssb>,
    pub conv: Conv2d,
}

impl Rssg {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let blocks = (0..cfg.n_blocks)
            .map(|i| Rssb::new(store, &format!("{name}.rssb.{i}"), cfg, rng))
            .collect::<Result<_>>()?;
        let conv = Conv2d::new(store, &format!("{name}.conv"), cfg.d_emb, cfg.d_emb, 3, 1, rng)?;
        Ok(Self { blocks, conv })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Binding, x: Var, h: usize, w: usize) -> Result<Var> {
        let mut y = x;
        for b in &self.blocks {
            y = b.forward(tape, p, y, h, w)?;
        }
        let s = tape.from_tokens(y, h, w)?;
        let s = self.conv.forward(tape, p, s)?;
        let s = tape.to_tokens(s)?;
        tape.add(s, x)
    }
}

#[derive(Clone, Debug)]
pub struct Tail {
    pub pre: Conv2d,
    pub ups: Vec<Conv2d>,
    pub last: Conv2d,
}

#[derive(Clone, Debug)]
pub struct Architecture {
    pub wtfm: Wtfm,
    pub groups: Vec<Rssg>,
    pub tail: Tail,
}

impl Architecture {
    fn build(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let wtfm = Wtfm::new(store, "wtfm", cfg.in_channels, cfg.cf, cfg.d_emb, cfg.gate, rng)?;
        let groups = (0..cfg.n_groups)
            .map(|g| Rssg::new(store, &format!("rssg.{g}"), cfg, rng))
            .collect::<Result<_>>()?;
        let d = cfg.d_emb;
        let pre = Conv2d::new(store, "tail.pre", d, d, 3, 1, rng)?;
        let stages = if cfg.scale == 4 { 2 } else { 1 };
        let ups = (0..stages)
            .map(|s| Conv2d::new(store, &format!("tail.up.{s}"), d, 4 * d, 3, 1, rng))
            .collect::<Result<_>>()?;
        let last = Conv2d::new(store, "tail.last", d, cfg.in_channels, 3, 1, rng)?;
        last.zero(store);
        Ok(Self { wtfm, groups, tail: Tail { pre, ups, last } })
    }
}

/// Configuration, architecture and named parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub arch: Architecture,
    pub params: ParamStore,
}

impl Model {
    /// Deterministic initialisation from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let arch = Architecture::build(&config, &mut params, &mut rng)?;
        Ok(Self { config, arch, params })
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    /// Backbone features only: `[B, H*W, D]` in, same out.
    pub fn backbone(&self, tape: &mut Tape, p: &Binding, tokens: Var, h: usize, w: usize) -> Result<Var> {
        let mut t = tokens;
        for g in &self.arch.groups {
            t = g.forward(tape, p, t, h, w)?;
        }
        Ok(t)
    }

    /// `[B, C, H, W]` low-resolution input in, `[B, C, H*scale, W*scale]` out.
    pub fn forward(&self, tape: &mut Tape, p: &Binding, lr: Var) -> Result<Var> {
        let (_, c, h, w) = tape.value(lr).dims4()?;
        if c != self.config.in_channels {
            return Err(crate::Error::Dimension(format!(
                "model expects {} channels, input has {c}",
                self.config.in_channels
            )));
        }
        if h < 8 || w < 8 || h % 2 == 1 || w % 2 == 1 {
            return Err(arg_err!("input must be even-sized and at least 8x8, got {h}x{w}"));
        }
        let shallow = self.arch.wtfm.forward(tape, p, lr)?.fused;
        let tokens = tape.to_tokens(shallow)?;
        let deep = self.backbone(tape, p, tokens, h, w)?;
        let mut s = tape.from_tokens(deep, h, w)?;
        let tail = &self.arch.tail;
        s = tail.pre.forward(tape, p, s)?;
        s = tape.silu(s)?;
        for up in &tail.ups {
            s = up.forward(tape, p, s)?;
            s = tape.pixel_shuffle(s, 2)?;
        }
        let out = tail.last.forward(tape, p, s)?;
        if self.config.global_skip {
            let skip = tape.upsample_bilinear(lr, self.config.scale)?;
            tape.add(out, skip)
        } else {
            Ok(out)
        }
    }

    /// Inference without gradient bookkeeping.
    pub fn predict(&self, lr: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let x = tape.constant(lr.clone());
        let y = self.forward(&mut tape, &p, x)?;
        Ok(tape.value(y).clone())
    }
}

/// Scalar parameter count for a configuration.
pub fn param_count(config: &ModelConfig) -> Result<usize> {
    Ok(Model::new(config.clone(), 0)?.param_count())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn output_shapes() {
        let m = Model::new(ModelConfig::tiny(), 1).unwrap();
        assert_eq!(m.predict(&random(&[1, 1, 16, 16], 2)).unwrap().shape(), &[1, 1, 32, 32]);
        let m4 = Model::new(ModelConfig { scale: 4, ..ModelConfig::tiny() }, 1).unwrap();
        assert_eq!(m4.predict(&random(&[1, 1, 16, 16], 2)).unwrap().shape(), &[1, 1, 64, 64]);
        assert!(matches!(m.predict(&random(&[1, 1, 9, 16], 2)), Err(crate::Error::Argument(_))));
        assert!(m.predict(&random(&[1, 1, 6, 6], 2)).is_err());
    }

    #[test]
    fn zero_tail_gives_bilinear_skip() {
        let m = Model::new(ModelConfig::tiny(), 3).unwrap();
        let x = random(&[1, 1, 8, 8], 4);
        let y = m.predict(&x).unwrap();
        let mut t = Tape::new();
        let xv = t.constant(x);
        let up = t.upsample_bilinear(xv, 2).unwrap();
        assert_eq!(&y, t.value(up));
    }

    #[test]
    fn names_unique_and_stable() {
        let a = Model::new(ModelConfig::default(), 0).unwrap();
        let b = Model::new(ModelConfig::default(), 7).unwrap();
        let na: Vec<_> = a.params.iter().map(|p| p.name.clone()).collect();
        let nb: Vec<_> = b.params.iter().map(|p| p.name.clone()).collect();
        assert_eq!(na, nb);
        let mut sorted = na.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), na.len());
        assert!(na.iter().any(|n| n == "rssg.0.rssb.1.scale"));
    }

    #[test]
    fn count_monotone_in_blocks() {
        let counts: Vec<usize> = [4, 6, 8, 10]
            .iter()
            .map(|&n| param_count(&ModelConfig { n_blocks: n, ..ModelConfig::default() }).unwrap())
            .collect();
        assert!(counts.windows(2).all(|w| w[0] < w[1]), "{counts:?}");
        let base = param_count(&ModelConfig::default()).unwrap();
        let wide = param_count(&ModelConfig { d_emb: 64, ..ModelConfig::default() }).unwrap();
        assert!(wide > 2 * base);
    }
}
