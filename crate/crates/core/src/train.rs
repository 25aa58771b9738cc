//! Adam, the training loop, model evaluation and ablation sweeps.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::Tape;
use crate::checkpoint;
use crate::config::TrainConfig;
use crate::data::{bicubic_resample_planes, extract_patches, ImageBuffer, PairedDataset};
use crate::error::{arg_err, Error, Result};
use crate::loss::{total_loss, DirectionAggregation, LossSsmParams};
use crate::metrics::{evaluate_pair, rgb_to_y, EvalOptions, EvalReport};
use crate::model::Model;
use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const LOSS_RECORD: &str = "loss.tsv";
pub const CHECKPOINT_DIR: &str = "checkpoint";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamHyper {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates, one buffer per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.tensor.shape())).collect();
        Self { m: zeros.clone(), v: zeros, t: 0 }
    }
}

/// One bias-corrected Adam update. Nothing is modified if any gradient is
/// non-finite.
pub fn adam_step(params: &mut ParamStore, grads: &[Tensor], state: &mut AdamState, hp: &AdamHyper) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(arg_err!("{} gradients / {} moments for {} parameters", grads.len(), state.m.len(), params.len()));
    }
    for (p, g) in params.iter().zip(grads) {
        p.tensor.expect_same_shape(g)?;
        if !g.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient for {}", p.name)));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (j, w) in p.tensor.data_mut().iter_mut().enumerate() {
            let g = grads[i].data()[j];
            m[j] = hp.beta1 * m[j] + (1.0 - hp.beta1) * g;
            v[j] = hp.beta2 * v[j] + (1.0 - hp.beta2) * g * g;
            *w -= hp.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + hp.eps);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub iter: usize,
    pub l1: f64,
    pub ssm: f64,
    pub total: f64,
}

/// `iter<TAB>l1<TAB>ssm<TAB>total`, one line per iteration after a header.
pub fn format_records(records: &[LossRecord]) -> String {
    let mut s = String::from("iter\tl1\tssm\ttotal\n");
    for r in records {
        let _ = writeln!(s, "{}\t{:?}\t{:?}\t{:?}", r.iter, r.l1, r.ssm, r.total);
    }
    s
}

/// LR/HR training patches as `[C, p, p]` / `[C, s*p, s*p]` tensors in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct Sample {
    pub lr: Tensor,
    pub hr: Tensor,
}

fn unit(img: &ImageBuffer) -> Tensor {
    img.to_tensor().map(|v| v / 255.0)
}

pub fn training_samples(ds: &PairedDataset, patch_lr: usize, seed: u64) -> Result<Vec<Sample>> {
    ds.validate()?;
    let mut out = Vec::new();
    for (i, pair) in ds.pairs.iter().enumerate() {
        for p in extract_patches(pair, ds.scale, patch_lr, patch_lr, seed.wrapping_add(i as u64))? {
            out.push(Sample { lr: unit(&p.lr), hr: unit(&p.hr) });
        }
    }
    if out.is_empty() {
        return Err(Error::Data(format!("no {patch_lr}px training patches in the dataset")));
    }
    Ok(out)
}

fn stack(parts: &[&Tensor]) -> Tensor {
    let mut shape = vec![parts.len()];
    shape.extend_from_slice(parts[0].shape());
    let data = parts.iter().flat_map(|t| t.data().iter().copied()).collect();
    Tensor::new(&shape, data).expect("equal patch shapes")
}

#[derive(Clone, Debug)]
pub struct TrainRun {
    pub model: Model,
    pub records: Vec<LossRecord>,
}

fn write_outputs(out: Option<&Path>, model: &Model, records: &[LossRecord], with_checkpoint: bool) -> Result<()> {
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(LOSS_RECORD), format_records(records))?;
        if with_checkpoint {
            checkpoint::save(model, &dir.join(CHECKPOINT_DIR))?;
        }
    }
    Ok(())
}

/// Seed-deterministic training. With `out`, writes the loss record and a
/// checkpoint every `checkpoint_interval` iterations and at the end. A
/// non-finite loss or gradient stops training with a numeric error and leaves
/// the previous checkpoint in place.
pub fn train(cfg: &TrainConfig, ds: &PairedDataset, out: Option<&Path>) -> Result<TrainRun> {
    cfg.validate()?;
    if ds.scale != cfg.model.scale {
        return Err(Error::Data(format!("dataset is x{}, model is x{}", ds.scale, cfg.model.scale)));
    }
    let samples = training_samples(ds, cfg.patch_lr, cfg.seed)?;
    let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
    let mut adam = AdamState::new(&model.params);
    let hyper = AdamHyper::with_lr(cfg.lr);
    let loss_params = LossSsmParams::standard(cfg.model.in_channels);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_ba7c);
    let mut records = Vec::with_capacity(cfg.iterations);
    for iter in 1..=cfg.iterations {
        let pick: Vec<usize> = (0..cfg.batch).map(|_| rng.gen_range(0..samples.len())).collect();
        let lr = stack(&pick.iter().map(|&i| &samples[i].lr).collect::<Vec<_>>());
        let hr = stack(&pick.iter().map(|&i| &samples[i].hr).collect::<Vec<_>>());

        let mut tape = Tape::new();
        let binding = model.params.bind(&mut tape, true);
        let x = tape.constant(lr);
        let pred = match model.forward(&mut tape, &binding, x) {
            Ok(p) => p,
            Err(e @ Error::Numeric(_)) => return halt(out, &records, iter, e),
            Err(e) => return Err(e),
        };
        let terms = total_loss(&mut tape, pred, &hr, cfg.model.lambda_loss, &loss_params, DirectionAggregation::default());
        let terms = match terms {
            Ok(t) => t,
            Err(e) => return halt(out, &records, iter, e),
        };
        let rec = LossRecord {
            iter,
            l1: tape.value(terms.l1).item()?,
            ssm: tape.value(terms.ssm).item()?,
            total: tape.value(terms.total).item()?,
        };
        if !rec.total.is_finite() {
            return halt(out, &records, iter, Error::Numeric(format!("loss is {}", rec.total)));
        }
        let mut grads = tape.backward(terms.total)?;
        let g: Vec<Tensor> = binding
            .vars()
            .iter()
            .zip(model.params.iter())
            .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.tensor.shape())))
            .collect();
        if let Err(e) = adam_step(&mut model.params, &g, &mut adam, &hyper) {
            return halt(out, &records, iter, e);
        }
        records.push(rec);
        if iter % 50 == 0 || iter == 1 {
            log::info!("iter {iter}: l1 {:.4e} ssm {:.4e} total {:.4e}", rec.l1, rec.ssm, rec.total);
        }
        if cfg.checkpoint_interval > 0 && iter % cfg.checkpoint_interval == 0 {
            write_outputs(out, &model, &records, true)?;
        }
    }
    write_outputs(out, &model, &records, true)?;
    Ok(TrainRun { model, records })
}

fn halt(out: Option<&Path>, records: &[LossRecord], iter: usize, cause: Error) -> Result<TrainRun> {
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(LOSS_RECORD), format_records(records))?;
    }
    Err(Error::Numeric(format!("training halted at iteration {iter}: {cause}")))
}

/// Full-image inference on the `[0, 255]` scale, unrounded `[C, sH, sW]`.
pub fn super_resolve_tensor(model: &Model, lr: &ImageBuffer) -> Result<Tensor> {
    let x = unit(lr);
    let (c, h, w) = x.dims3()?;
    let y = model.predict(&x.reshape(&[1, c, h, w])?)?;
    let (_, c, oh, ow) = y.dims4()?;
    y.map(|v| v * 255.0).reshape(&[c, oh, ow])
}

/// Inference rounded and clipped to 8 bits.
pub fn super_resolve(model: &Model, lr: &ImageBuffer) -> Result<ImageBuffer> {
    ImageBuffer::from_tensor(&super_resolve_tensor(model, lr)?)
}

/// Luma plane of a `[C, H, W]` image (identity for a single channel).
pub fn luma(t: &Tensor) -> Result<Tensor> {
    match t.shape()[0] {
        3 => rgb_to_y(t),
        _ => Ok(t.clone()),
    }
}

fn report_with(ds: &PairedDataset, opts: EvalOptions, mut sr: impl FnMut(&ImageBuffer) -> Result<Tensor>) -> Result<EvalReport> {
    ds.validate()?;
    let mut report = EvalReport::default();
    for p in &ds.pairs {
        let out = luma(&sr(&p.lr)?)?;
        report.per_image.push(evaluate_pair(&p.name, &out, &luma(&p.hr.to_tensor())?, opts)?);
    }
    Ok(report)
}

pub fn evaluate_model(model: &Model, ds: &PairedDataset, opts: EvalOptions) -> Result<EvalReport> {
    report_with(ds, opts, |lr| super_resolve_tensor(model, lr))
}

/// Reference scores for plain bicubic upsampling.
pub fn evaluate_bicubic(ds: &PairedDataset, opts: EvalOptions) -> Result<EvalReport> {
    let s = ds.scale;
    report_with(ds, opts, |lr| bicubic_resample_planes(&lr.to_tensor(), s * lr.height, s * lr.width))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    Blocks,
    Loss,
    Lr,
}

impl std::str::FromStr for AblationAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blocks" => Ok(Self::Blocks),
            "loss" | "lambda" => Ok(Self::Loss),
            "lr" => Ok(Self::Lr),
            _ => Err(arg_err!("unknown ablation axis {s:?} (blocks, loss, lr)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub value: f64,
    pub param_count: usize,
    pub final_l1: f64,
    pub final_total: f64,
    pub best_total: f64,
    pub psnr: Option<f64>,
    pub records: Vec<LossRecord>,
}

/// Applies one grid value to a copy of `base`.
pub fn ablation_config(base: &TrainConfig, axis: AblationAxis, value: f64) -> Result<TrainConfig> {
    let mut cfg = base.clone();
    match axis {
        AblationAxis::Blocks => {
            if value < 1.0 || value.fract() != 0.0 {
                return Err(arg_err!("block count must be a positive integer, got {value}"));
            }
            cfg.model.n_blocks = value as usize;
        }
        AblationAxis::Loss => cfg.model.lambda_loss = value,
        AblationAxis::Lr => cfg.lr = value,
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Trains once per grid value from the same seed and scores each run on the
/// training images.
pub fn ablate(base: &TrainConfig, ds: &PairedDataset, axis: AblationAxis, grid: &[f64]) -> Result<Vec<AblationRow>> {
    grid.iter()
        .map(|&value| {
            let cfg = ablation_config(base, axis, value)?;
            let run = train(&cfg, ds, None)?;
            let last = run.records.last().copied();
            Ok(AblationRow {
                value,
                param_count: run.model.param_count(),
                final_l1: last.map_or(f64::NAN, |r| r.l1),
                final_total: last.map_or(f64::NAN, |r| r.total),
                best_total: run.records.iter().map(|r| r.total).fold(f64::INFINITY, f64::min),
                psnr: evaluate_model(&run.model, ds, EvalOptions::default())?.psnr_mean(),
                records: run.records,
            })
        })
        .collect()
}

pub fn ablation_table(axis: AblationAxis, rows: &[AblationRow]) -> String {
    let name = match axis {
        AblationAxis::Blocks => "blocks",
        AblationAxis::Loss => "lambda",
        AblationAxis::Lr => "lr",
    };
    let mut s = format!("{name:>10} {:>10} {:>12} {:>12} {:>12} {:>10}\n", "params", "final_l1", "final_total", "best_total", "psnr_db");
    for r in rows {
        let psnr = r.psnr.map_or_else(|| "identical".into(), |p| format!("{p:.4}"));
        let _ = writeln!(
            s,
            "{:>10} {:>10} {:>12.6} {:>12.6} {:>12.6} {psnr:>10}",
            r.value, r.param_count, r.final_l1, r.final_total, r.best_total
        );
    }
    s
}
