//! Full-reference image quality metrics and residual-error analysis.
//!
//! Images are tensors on the `[0, 255]` scale. [`mse`], [`psnr`] and
//! [`residual_distribution`] accept any shape; [`ssim`] treats the last two
//! axes as the image plane and averages over leading axes.

use std::fmt::Write as _;

use crate::error::{arg_err, dim_err, Result};
use crate::tensor::Tensor;

/// Residual bin edges: `[0,5)`, `[5,10)`, `[10,15)`, `[15,inf)`.
pub const RESIDUAL_EDGES: [f64; 3] = [5.0, 10.0, 15.0];

/// BT.601 studio-swing luma of a `[3, H, W]` RGB image.
pub fn rgb_to_y(img: &Tensor) -> Result<Tensor> {
    let &[3, h, w] = img.shape() else {
        return Err(dim_err!("rgb_to_y expects [3, H, W], got {:?}", img.shape()));
    };
    let n = h * w;
    let d = img.data();
    let y = (0..n).map(|i| 16.0 + (65.481 * d[i] + 128.553 * d[n + i] + 24.966 * d[2 * n + i]) / 255.0).collect();
    Tensor::new(&[1, h, w], y)
}

pub fn mse(sr: &Tensor, gt: &Tensor) -> Result<f64> {
    sr.expect_same_shape(gt)?;
    let n = sr.len().max(1) as f64;
    Ok(sr.data().iter().zip(gt.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n)
}

/// PSNR in dB from a mean squared error; `None` when `mse == 0`.
pub fn psnr_from_mse(mse: f64, peak: f64) -> Option<f64> {
    (mse > 0.0).then(|| 10.0 * (peak * peak / mse).log10())
}

/// `10 log10(peak^2 / MSE)`; `None` signals identical images.
pub fn psnr(sr: &Tensor, gt: &Tensor, peak: f64) -> Result<Option<f64>> {
    Ok(psnr_from_mse(mse(sr, gt)?, peak))
}

fn gaussian_window() -> [f64; 11] {
    let mut w = [0.0; 11];
    for (i, v) in w.iter_mut().enumerate() {
        let x = i as f64 - 5.0;
        *v = (-x * x / (2.0 * 1.5 * 1.5)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Valid-mode separable filtering of one plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64; 11]) -> Vec<f64> {
    let (oh, ow) = (h - 10, w - 10);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..11).map(|t| k[t] * plane[y * w + x + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..11).map(|t| k[t] * rows[(y + t) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM with an 11-tap Gaussian window (sigma 1.5), `K1 = 0.01`,
/// `K2 = 0.03`, peak 255, over valid window positions.
pub fn ssim(sr: &Tensor, gt: &Tensor) -> Result<f64> {
    sr.expect_same_shape(gt)?;
    let s = sr.shape();
    if s.len() < 2 {
        return Err(dim_err!("ssim needs at least 2 axes, got {s:?}"));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    if h < 11 || w < 11 {
        return Err(arg_err!("ssim needs images of at least 11x11, got {h}x{w}"));
    }
    let k = gaussian_window();
    let c1 = (0.01f64 * 255.0).powi(2);
    let c2 = (0.03f64 * 255.0).powi(2);
    let (mut total, mut count) = (0.0, 0usize);
    for (a, b) in sr.data().chunks(h * w).zip(gt.data().chunks(h * w)) {
        let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
        let mu_a = filter_valid(a, h, w, &k);
        let mu_b = filter_valid(b, h, w, &k);
        let aa = filter_valid(&prod(a, a), h, w, &k);
        let bb = filter_valid(&prod(b, b), h, w, &k);
        let ab = filter_valid(&prod(a, b), h, w, &k);
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
            let den = (ma * ma + mb * mb + c1) * (va + vb + c2);
            total += num / den;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Fractions of pixels whose absolute residual falls in each bin.
pub fn residual_distribution(sr: &Tensor, gt: &Tensor) -> Result<[f64; 4]> {
    sr.expect_same_shape(gt)?;
    let mut counts = [0usize; 4];
    for (a, b) in sr.data().iter().zip(gt.data()) {
        let e = (b - a).abs();
        let k = RESIDUAL_EDGES.iter().take_while(|&&edge| e >= edge).count();
        counts[k] += 1;
    }
    let n = sr.len().max(1) as f64;
    Ok(counts.map(|c| c as f64 / n))
}

/// Elementwise mean of per-image bin fractions.
pub fn mean_distribution(per_image: &[[f64; 4]]) -> [f64; 4] {
    let mut m = [0.0; 4];
    for d in per_image {
        for k in 0..4 {
            m[k] += d[k];
        }
    }
    let n = per_image.len().max(1) as f64;
    m.map(|v| v / n)
}

/// Rounds to the nearest integer and clips to `[0, 255]`.
pub fn quantize_u8(t: &Tensor) -> Tensor {
    t.map(|v| v.round().clamp(0.0, 255.0))
}

/// Removes `n` pixels from each side of the last two axes.
pub fn crop_border(t: &Tensor, n: usize) -> Result<Tensor> {
    if n == 0 {
        return Ok(t.clone());
    }
    let s = t.shape();
    if s.len() < 2 {
        return Err(dim_err!("crop_border needs at least 2 axes"));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    if 2 * n >= h || 2 * n >= w {
        return Err(arg_err!("border crop {n} leaves nothing of a {h}x{w} image"));
    }
    let (oh, ow) = (h - 2 * n, w - 2 * n);
    let mut data = Vec::with_capacity(t.len() / (h * w) * oh * ow);
    for plane in t.data().chunks(h * w) {
        for y in n..h - n {
            data.extend_from_slice(&plane[y * w + n..y * w + w - n]);
        }
    }
    let mut shape = s.to_vec();
    let k = shape.len();
    shape[k - 2] = oh;
    shape[k - 1] = ow;
    Tensor::new(&shape, data)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EvalOptions {
    pub border_crop: usize,
    pub quantize: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageMetrics {
    pub name: String,
    /// `None` when the images are identical.
    pub psnr: Option<f64>,
    pub mse: f64,
    pub ssim: f64,
    pub residual: [f64; 4],
}

/// Applies `opts` and computes every per-image metric.
pub fn evaluate_pair(name: &str, sr: &Tensor, gt: &Tensor, opts: EvalOptions) -> Result<ImageMetrics> {
    let sr = if opts.quantize { quantize_u8(sr) } else { sr.clone() };
    let sr = crop_border(&sr, opts.border_crop)?;
    let gt = crop_border(gt, opts.border_crop)?;
    let m = mse(&sr, &gt)?;
    Ok(ImageMetrics {
        name: name.to_string(),
        psnr: psnr_from_mse(m, 255.0),
        mse: m,
        ssim: ssim(&sr, &gt)?,
        residual: residual_distribution(&sr, &gt)?,
    })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub per_image: Vec<ImageMetrics>,
}

impl EvalReport {
    /// Mean PSNR over images with a finite value; `None` if every pair is identical.
    pub fn psnr_mean(&self) -> Option<f64> {
        let v: Vec<f64> = self.per_image.iter().filter_map(|m| m.psnr).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn ssim_mean(&self) -> f64 {
        self.per_image.iter().map(|m| m.ssim).sum::<f64>() / self.per_image.len().max(1) as f64
    }

    pub fn mse_mean(&self) -> f64 {
        self.per_image.iter().map(|m| m.mse).sum::<f64>() / self.per_image.len().max(1) as f64
    }

    pub fn residual_bins(&self) -> [f64; 4] {
        mean_distribution(&self.per_image.iter().map(|m| m.residual).collect::<Vec<_>>())
    }

    /// Human-readable table, one row per image plus a mean row.
    pub fn to_table(&self) -> String {
        let psnr = |p: Option<f64>| p.map_or_else(|| "identical".to_string(), |v| format!("{v:.4}"));
        let mut s = format!(
            "{:<24} {:>10} {:>12} {:>8} {:>7} {:>7} {:>7} {:>7}\n",
            "image", "psnr_db", "mse", "ssim", "d1%", "d2%", "d3%", "d4%"
        );
        let mut row = |name: &str, p: String, m: f64, ss: f64, d: [f64; 4]| {
            let _ = writeln!(
                s,
                "{name:<24} {p:>10} {m:>12.4} {ss:>8.4} {:>7.2} {:>7.2} {:>7.2} {:>7.2}",
                100.0 * d[0],
                100.0 * d[1],
                100.0 * d[2],
                100.0 * d[3]
            );
        };
        for m in &self.per_image {
            row(&m.name, psnr(m.psnr), m.mse, m.ssim, m.residual);
        }
        row("mean", psnr(self.psnr_mean()), self.mse_mean(), self.ssim_mean(), self.residual_bins());
        s
    }

    /// `key = value` lines: `psnr_mean`, `ssim_mean`, `mse_mean`, `d1`..`d4`.
    pub fn to_kv(&self) -> String {
        let d = self.residual_bins();
        let psnr = self.psnr_mean().map_or_else(|| "identical".to_string(), |v| format!("{v:?}"));
        let mut s = format!("psnr_mean = {psnr}\nssim_mean = {:?}\nmse_mean = {:?}\n", self.ssim_mean(), self.mse_mean());
        for (k, v) in d.iter().enumerate() {
            let _ = writeln!(s, "d{} = {v:?}", k + 1);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(0.0..255.0))
    }

    #[test]
    fn luma_fixtures() {
        let black = rgb_to_y(&Tensor::zeros(&[3, 1, 1])).unwrap();
        assert!((black.data()[0] - 16.0).abs() < 1e-12);
        let white = rgb_to_y(&Tensor::full(&[3, 1, 1], 255.0)).unwrap();
        assert!((white.data()[0] - 235.0).abs() < 1e-6);
        let gray = rgb_to_y(&Tensor::new(&[3, 1, 3], vec![0.0, 100.0, 200.0, 0.0, 100.0, 200.0, 0.0, 100.0, 200.0]).unwrap()).unwrap();
        for (v, y) in [0.0, 100.0, 200.0].iter().zip(gray.data()) {
            assert!((y - (16.0 + 219.0 * v / 255.0)).abs() < 1e-9);
        }
        assert!(rgb_to_y(&Tensor::zeros(&[1, 2, 2])).is_err());
    }

    #[test]
    fn psnr_fixtures() {
        let gt = Tensor::full(&[1, 1], 255.0);
        let sr = Tensor::full(&[1, 1], 254.0);
        let p = psnr(&sr, &gt, 255.0).unwrap().unwrap();
        assert!((p - 10.0 * 65025f64.log10()).abs() < 1e-12);
        assert!((p - 48.1308).abs() < 1e-3);
        assert_eq!(psnr(&gt, &gt, 255.0).unwrap(), None);
        assert!((psnr(&Tensor::zeros(&[1, 1]), &gt, 255.0).unwrap().unwrap()).abs() < 1e-12);
        assert!(psnr(&Tensor::zeros(&[2]), &gt, 255.0).is_err());
    }

    #[test]
    fn noisier_images_score_lower_on_average() {
        let gt = random(&[16, 16], 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut lower = 0;
        for _ in 0..100 {
            let small = Tensor::from_fn(gt.shape(), |i| gt.data()[i] + rng.gen_range(-2.0..2.0));
            let large = Tensor::from_fn(gt.shape(), |i| gt.data()[i] + rng.gen_range(-8.0..8.0));
            let a = psnr(&small, &gt, 255.0).unwrap().unwrap();
            let b = psnr(&large, &gt, 255.0).unwrap().unwrap();
            lower += (b < a) as usize;
        }
        assert_eq!(lower, 100);
    }

    #[test]
    fn ssim_fixtures() {
        let x = random(&[1, 16, 20], 3);
        let y = random(&[1, 16, 20], 4);
        assert_eq!(ssim(&x, &x).unwrap(), 1.0);
        assert_eq!(ssim(&x, &y).unwrap(), ssim(&y, &x).unwrap());
        let s = ssim(&x, &y).unwrap();
        assert!((-1.0..1.0).contains(&s));
        let v = 80.0;
        let c1 = (0.01f64 * 255.0).powi(2);
        let closed = (2.0 * v * (v + 10.0) + c1) / (v * v + (v + 10.0) * (v + 10.0) + c1);
        let got = ssim(&Tensor::full(&[12, 12], v), &Tensor::full(&[12, 12], v + 10.0)).unwrap();
        assert!((got - closed).abs() < 1e-9, "{got} vs {closed}");
        assert!(ssim(&Tensor::zeros(&[10, 12]), &Tensor::zeros(&[10, 12])).is_err());
    }

    #[test]
    fn residual_bins() {
        let gt = Tensor::zeros(&[4]);
        let sr = Tensor::new(&[4], vec![0.0, 5.0, -10.0, 20.0]).unwrap();
        assert_eq!(residual_distribution(&sr, &gt).unwrap(), [0.25; 4]);
        let edges = Tensor::new(&[4], vec![0.0, 5.0, 10.0, 15.0]).unwrap();
        assert_eq!(residual_distribution(&edges, &gt).unwrap(), [0.25; 4]);
        let x = random(&[8, 8], 5);
        assert_eq!(residual_distribution(&x, &x).unwrap(), [1.0, 0.0, 0.0, 0.0]);
        let d = residual_distribution(&x, &random(&[8, 8], 6)).unwrap();
        assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn crop_and_quantize() {
        let t = Tensor::from_fn(&[1, 4, 5], |i| i as f64);
        let c = crop_border(&t, 1).unwrap();
        assert_eq!(c.shape(), &[1, 2, 3]);
        assert_eq!(c.data(), &[6.0, 7.0, 8.0, 11.0, 12.0, 13.0]);
        assert!(crop_border(&t, 2).is_err());
        let q = quantize_u8(&Tensor::new(&[3], vec![-3.0, 12.5, 300.0]).unwrap());
        assert_eq!(q.data(), &[0.0, 13.0, 255.0]);
    }

    #[test]
    fn report_serialisation() {
        let x = random(&[1, 12, 12], 7);
        let y = x.map(|v| v + 1.0);
        let report = EvalReport {
            per_image: vec![
                evaluate_pair("a", &x, &x, EvalOptions::default()).unwrap(),
                evaluate_pair("b", &y, &x, EvalOptions::default()).unwrap(),
            ],
        };
        assert_eq!(report.per_image[0].psnr, None);
        assert!((report.psnr_mean().unwrap() - 48.1308).abs() < 1e-3);
        let kv = report.to_kv();
        for key in ["psnr_mean", "ssim_mean", "mse_mean", "d1", "d2", "d3", "d4"] {
            assert!(kv.lines().any(|l| l.starts_with(&format!("{key} = "))), "{key}");
        }
        assert!(report.to_table().contains("identical"));
    }
}
