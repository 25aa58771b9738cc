//! `irsr train|sr|eval|report|ablate`.
//!
//! Exit codes: 0 success, 1 usage or invalid argument, 2 data error, 3
//! numeric error.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint;
use crate::config::TrainConfig;
use crate::data::{list_images, load_image, make_synthetic_dataset, save_image, PairedDataset};
use crate::error::{Error, Result};
use crate::metrics::{crop_border, mean_distribution, residual_distribution, EvalOptions};
use crate::train::{
    ablate, ablation_table, evaluate_bicubic, evaluate_model, luma, super_resolve, train, AblationAxis, CHECKPOINT_DIR,
    LOSS_RECORD,
};

#[derive(Parser, Debug)]
#[command(name = "irsr", version, about = "Infrared image super-resolution")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write a checkpoint plus a loss record.
    Train {
        #[command(flatten)]
        common: TrainArgs,
        /// Output directory.
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// Super-resolve one PGM/PPM image.
    Sr {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on a dataset directory, or on synthetic data.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        border_crop: usize,
        /// Round SR output to 8 bits before scoring.
        #[arg(long)]
        quantize: bool,
        /// Also score plain bicubic upsampling.
        #[arg(long)]
        baseline: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the key-value summary here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Residual-error distribution of SR images against ground truth.
    Report {
        #[arg(long)]
        sr: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value_t = 0)]
        border_crop: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train once per grid value and compare.
    Ablate {
        #[command(flatten)]
        common: TrainArgs,
        /// blocks, loss or lr.
        #[arg(long)]
        axis: String,
        /// Comma-separated values, e.g. `1,2,4`.
        #[arg(long)]
        grid: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    scale: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    border_crop: Option<usize>,
    /// Dataset directory with `hr/` and `lr_x{scale}/`.
    #[arg(long)]
    data: Option<PathBuf>,
}

impl TrainArgs {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::load(p)?,
            None => TrainConfig::default(),
        };
        if let Some(v) = self.scale {
            cfg.model.scale = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.lambda {
            cfg.model.lambda_loss = v;
        }
        if let Some(v) = self.iterations {
            cfg.iterations = v;
        }
        if let Some(v) = self.border_crop {
            cfg.border_crop = v;
        }
        if let Some(d) = &self.data {
            cfg.data_dir = Some(d.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn dataset_for(cfg: &TrainConfig) -> Result<PairedDataset> {
    match &cfg.data_dir {
        Some(dir) => PairedDataset::load_dir(dir, cfg.model.scale),
        None => make_synthetic_dataset(cfg.synthetic_images, cfg.synthetic_size, cfg.model.scale, cfg.seed),
    }
}

fn write_text(path: Option<&Path>, text: &str) -> Result<()> {
    if let Some(p) = path {
        if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(p, text)?;
    }
    Ok(())
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Argument(_) => 1,
        Error::Numeric(_) => 3,
        Error::Dimension(_) | Error::Parse { .. } | Error::Data(_) | Error::Io(_) => 2,
    }
}

/// Runs the CLI with `args` (including the program name), returning the exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command, stdout) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("irsr: {e}");
            exit_code(&e)
        }
    }
}

fn execute(cmd: Command, out: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::Train { common, out: dir } => {
            let cfg = common.resolve()?;
            let ds = dataset_for(&cfg)?;
            let run = train(&cfg, &ds, Some(&dir))?;
            let opts = EvalOptions { border_crop: cfg.border_crop, quantize: cfg.quantize };
            let report = evaluate_model(&run.model, &ds, opts)?;
            let last = run.records.last();
            writeln!(out, "parameters: {}", run.model.param_count())?;
            if let Some(r) = last {
                writeln!(out, "final loss: l1 {:.4e} ssm {:.4e} total {:.4e}", r.l1, r.ssm, r.total)?;
            }
            writeln!(out, "training-set psnr: {}", fmt_psnr(report.psnr_mean()))?;
            writeln!(out, "checkpoint: {}", dir.join(CHECKPOINT_DIR).display())?;
            writeln!(out, "loss record: {}", dir.join(LOSS_RECORD).display())?;
        }
        Command::Sr { checkpoint: ck, input, out: path } => {
            let model = checkpoint::load(&ck)?;
            let img = load_image(&input)?;
            let sr = super_resolve(&model, &img)?;
            save_image(&sr, &path)?;
            writeln!(out, "{}x{} -> {}x{}: {}", img.width, img.height, sr.width, sr.height, path.display())?;
        }
        Command::Eval { checkpoint: ck, data, border_crop, quantize, baseline, seed, out: path } => {
            let model = checkpoint::load(&ck)?;
            let scale = model.config.scale;
            let ds = match data {
                Some(d) => PairedDataset::load_dir(&d, scale)?,
                None => make_synthetic_dataset(8, 64, scale, seed)?,
            };
            let opts = EvalOptions { border_crop, quantize };
            let report = evaluate_model(&model, &ds, opts)?;
            write!(out, "{}", report.to_table())?;
            if baseline {
                let b = evaluate_bicubic(&ds, opts)?;
                writeln!(out, "bicubic psnr_mean {} ssim_mean {:.4}", fmt_psnr(b.psnr_mean()), b.ssim_mean())?;
            }
            write_text(path.as_deref(), &report.to_kv())?;
        }
        Command::Report { sr, gt, border_crop, out: path } => {
            let report = residual_report(&sr, &gt, border_crop)?;
            let text = report_table(&report);
            write!(out, "{text}")?;
            write_text(path.as_deref(), &text)?;
        }
        Command::Ablate { common, axis, grid, out: path } => {
            let cfg = common.resolve()?;
            let axis: AblationAxis = axis.parse()?;
            let grid = grid
                .split(',')
                .map(|s| s.trim().parse::<f64>().map_err(|_| Error::Argument(format!("bad grid value {s:?}"))))
                .collect::<Result<Vec<_>>>()?;
            let ds = dataset_for(&cfg)?;
            let rows = ablate(&cfg, &ds, axis, &grid)?;
            let table = ablation_table(axis, &rows);
            write!(out, "{table}")?;
            write_text(path.as_deref(), &table)?;
        }
    }
    Ok(())
}

fn fmt_psnr(p: Option<f64>) -> String {
    p.map_or_else(|| "identical".into(), |v| format!("{v:.4} dB"))
}

/// Per-image residual bins for name-matched images in two directories.
pub fn residual_report(sr_dir: &Path, gt_dir: &Path, border_crop: usize) -> Result<Vec<(String, [f64; 4])>> {
    let mut rows = Vec::new();
    for gt_path in list_images(gt_dir)? {
        let name = gt_path.file_name().unwrap().to_string_lossy().into_owned();
        let sr_path = sr_dir.join(&name);
        if !sr_path.exists() {
            return Err(Error::Data(format!("{name}: missing from {}", sr_dir.display())));
        }
        let sr = crop_border(&luma(&load_image(&sr_path)?.to_tensor())?, border_crop)?;
        let gt = crop_border(&luma(&load_image(&gt_path)?.to_tensor())?, border_crop)?;
        if sr.shape() != gt.shape() {
            return Err(Error::Dimension(format!("{name}: SR {:?} vs GT {:?}", sr.shape(), gt.shape())));
        }
        rows.push((name, residual_distribution(&sr, &gt)?));
    }
    if rows.is_empty() {
        return Err(Error::Data(format!("no images in {}", gt_dir.display())));
    }
    Ok(rows)
}

fn report_table(rows: &[(String, [f64; 4])]) -> String {
    let mut s = format!("{:<24} {:>8} {:>8} {:>8} {:>8}\n", "image", "[0,5)", "[5,10)", "[10,15)", "[15,inf)");
    let line = |name: &str, d: &[f64; 4]| {
        format!("{name:<24} {:>7.2}% {:>7.2}% {:>7.2}% {:>7.2}%\n", 100.0 * d[0], 100.0 * d[1], 100.0 * d[2], 100.0 * d[3])
    };
    for (name, d) in rows {
        s += &line(name, d);
    }
    let mean = mean_distribution(&rows.iter().map(|r| r.1).collect::<Vec<_>>());
    s += &line("mean", &mean);
    s
}
