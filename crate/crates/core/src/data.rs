//! 8-bit images, NetPBM I/O, bicubic degradation, patches and paired datasets.
//!
//! Only binary PGM (`P5`) and PPM (`P6`) with maxval 255 are read. Other
//! formats can be converted beforehand, e.g. `convert in.png -depth 8 out.pgm`.
//!
//! Dataset directories hold `hr/` plus `lr_x2/` and/or `lr_x4/`, with files
//! matched by name.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{arg_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ColorSpace {
    Gray,
    Rgb,
}

impl ColorSpace {
    pub fn channels(self) -> usize {
        match self {
            ColorSpace::Gray => 1,
            ColorSpace::Rgb => 3,
        }
    }
}

/// Planar 8-bit image, samples stored channel-major (`[C, H, W]`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageBuffer {
    pub height: usize,
    pub width: usize,
    pub color: ColorSpace,
    pub data: Vec<u8>,
}

impl ImageBuffer {
    pub fn new(color: ColorSpace, height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != color.channels() * height * width {
            return Err(Error::Data(format!(
                "{} samples for a {}x{}x{} image",
                data.len(),
                color.channels(),
                height,
                width
            )));
        }
        Ok(Self { height, width, color, data })
    }

    pub fn channels(&self) -> usize {
        self.color.channels()
    }

    /// `[C, H, W]` tensor on the `[0, 255]` scale.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.channels(), self.height, self.width], self.data.iter().map(|&v| v as f64).collect())
            .expect("consistent sizes")
    }

    /// Rounds and clips a `[C, H, W]` (or `[1, C, H, W]`) tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        let (c, h, w) = match s {
            [c, h, w] | [1, c, h, w] => (*c, *h, *w),
            _ => return Err(Error::Dimension(format!("expected [C, H, W], got {s:?}"))),
        };
        let color = match c {
            1 => ColorSpace::Gray,
            3 => ColorSpace::Rgb,
            _ => return Err(Error::Dimension(format!("{c} channels cannot be stored as an image"))),
        };
        let data = t.data().iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect();
        Self::new(color, h, w, data)
    }

    /// Sub-image starting at `(y0, x0)`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        if y0 + h > self.height || x0 + w > self.width {
            return Err(arg_err!("crop {h}x{w}+{y0}+{x0} outside {}x{}", self.height, self.width));
        }
        let mut data = Vec::with_capacity(self.channels() * h * w);
        for c in 0..self.channels() {
            let plane = &self.data[c * self.height * self.width..];
            for y in y0..y0 + h {
                data.extend_from_slice(&plane[y * self.width + x0..y * self.width + x0 + w]);
            }
        }
        Self::new(self.color, h, w, data)
    }

    fn to_interleaved(&self) -> Vec<u8> {
        let (n, c) = (self.height * self.width, self.channels());
        (0..n * c).map(|i| self.data[(i % c) * n + i / c]).collect()
    }
}

fn parse_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Parse { offset, message: message.into() }
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderReader<'_> {
    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(parse_err(start, format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .unwrap()
            .parse()
            .map_err(|_| parse_err(start, format!("{what} out of range")))
    }
}

/// Parses a binary PGM or PPM file.
pub fn decode_pnm(bytes: &[u8]) -> Result<ImageBuffer> {
    let color = match bytes.get(..2) {
        Some(b"P5") => ColorSpace::Gray,
        Some(b"P6") => ColorSpace::Rgb,
        _ => return Err(parse_err(0, "not a binary PGM/PPM file (expected P5 or P6)")),
    };
    let mut r = HeaderReader { bytes, pos: 2 };
    let width = r.number("width")?;
    let height = r.number("height")?;
    r.skip_space();
    let maxval_at = r.pos;
    let maxval = r.number("maxval")?;
    if maxval != 255 {
        return Err(parse_err(maxval_at, format!("unsupported depth: maxval {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(parse_err(3, "zero image dimension"));
    }
    if !bytes.get(r.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(parse_err(r.pos, "expected a single whitespace byte before the raster"));
    }
    let start = r.pos + 1;
    let c = color.channels();
    let need = width * height * c;
    let raster = &bytes[start.min(bytes.len())..];
    if raster.len() < need {
        return Err(parse_err(bytes.len(), format!("truncated raster: {} of {need} bytes", raster.len())));
    }
    let n = width * height;
    let data = (0..need).map(|i| raster[(i % n) * c + i / n]).collect();
    ImageBuffer::new(color, height, width, data)
}

/// Canonical encoding: `P5\n{w} {h}\n255\n` followed by the raster.
pub fn encode_pnm(img: &ImageBuffer) -> Vec<u8> {
    let magic = match img.color {
        ColorSpace::Gray => "P5",
        ColorSpace::Rgb => "P6",
    };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.to_interleaved());
    out
}

pub fn load_image(path: &Path) -> Result<ImageBuffer> {
    let bytes = std::fs::read(path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    decode_pnm(&bytes).map_err(|e| match e {
        Error::Parse { offset, message } => Error::Parse { offset, message: format!("{}: {message}", path.display()) },
        other => other,
    })
}

pub fn save_image(img: &ImageBuffer, path: &Path) -> Result<()> {
    std::fs::write(path, encode_pnm(img))?;
    Ok(())
}

/// Cubic convolution kernel with `a = -0.5`.
pub fn cubic(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Per-output `(tap, weight)` lists for resampling `n_in` samples to `n_out`.
/// Downscaling widens the kernel by the inverse ratio; taps are clamped at
/// the edges and weights sum to one.
pub fn resample_weights(n_in: usize, n_out: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = n_out as f64 / n_in as f64;
    let kscale = scale.min(1.0);
    let support = 2.0 / kscale;
    (0..n_out)
        .map(|i| {
            let centre = (i as f64 + 0.5) / scale - 0.5;
            let lo = (centre - support).floor() as i64;
            let hi = (centre + support).ceil() as i64;
            let mut taps: Vec<(usize, f64)> = Vec::new();
            for j in lo..=hi {
                let wgt = cubic((j as f64 - centre) * kscale);
                if wgt == 0.0 {
                    continue;
                }
                let idx = j.clamp(0, n_in as i64 - 1) as usize;
                match taps.iter_mut().find(|(k, _)| *k == idx) {
                    Some(t) => t.1 += wgt,
                    None => taps.push((idx, wgt)),
                }
            }
            let s: f64 = taps.iter().map(|t| t.1).sum();
            taps.iter_mut().for_each(|t| t.1 /= s);
            taps
        })
        .collect()
}

/// Separable bicubic resize of each plane (width first), kept in `f64`.
pub fn bicubic_resample_planes(t: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let s = t.shape();
    if s.len() < 2 || out_h == 0 || out_w == 0 {
        return Err(arg_err!("cannot resample {s:?} to {out_h}x{out_w}"));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let wx = resample_weights(w, out_w);
    let wy = resample_weights(h, out_h);
    let mut out = Vec::with_capacity(t.len() / (h * w).max(1) * out_h * out_w);
    for plane in t.data().chunks(h * w) {
        let mut rows = vec![0.0; h * out_w];
        for y in 0..h {
            for (x, taps) in wx.iter().enumerate() {
                rows[y * out_w + x] = taps.iter().map(|&(j, c)| c * plane[y * w + j]).sum();
            }
        }
        for taps in &wy {
            for x in 0..out_w {
                out.push(taps.iter().map(|&(j, c)| c * rows[j * out_w + x]).sum());
            }
        }
    }
    let mut shape = s.to_vec();
    let k = shape.len();
    shape[k - 2] = out_h;
    shape[k - 1] = out_w;
    Tensor::new(&shape, out)
}

/// Bicubic resize with rounding and clipping to 8 bits.
pub fn bicubic_resample(img: &ImageBuffer, out_h: usize, out_w: usize) -> Result<ImageBuffer> {
    if out_h == img.height && out_w == img.width {
        return Ok(img.clone());
    }
    ImageBuffer::from_tensor(&bicubic_resample_planes(&img.to_tensor(), out_h, out_w)?)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImagePair {
    pub name: String,
    pub lr: ImageBuffer,
    pub hr: ImageBuffer,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairedDataset {
    pub scale: usize,
    pub pairs: Vec<ImagePair>,
}

impl PairedDataset {
    /// Checks that every HR image is exactly `scale` times its LR partner.
    pub fn validate(&self) -> Result<()> {
        for p in &self.pairs {
            if p.hr.height != self.scale * p.lr.height || p.hr.width != self.scale * p.lr.width {
                return Err(Error::Data(format!(
                    "{}: HR {}x{} is not x{} of LR {}x{}",
                    p.name, p.hr.height, p.hr.width, self.scale, p.lr.height, p.lr.width
                )));
            }
            if p.hr.color != p.lr.color {
                return Err(Error::Data(format!("{}: LR and HR colour spaces differ", p.name)));
            }
        }
        Ok(())
    }

    /// Loads `dir/hr/*` with partners from `dir/lr_x{scale}/`.
    pub fn load_dir(dir: &Path, scale: usize) -> Result<Self> {
        let hr_dir = dir.join("hr");
        let lr_dir = dir.join(format!("lr_x{scale}"));
        let mut pairs = Vec::new();
        for path in list_images(&hr_dir)? {
            let name = path.file_name().unwrap().to_string_lossy().into_owned();
            let lr_path = lr_dir.join(&name);
            if !lr_path.exists() {
                return Err(Error::Data(format!("{name}: no partner in {}", lr_dir.display())));
            }
            pairs.push(ImagePair { name, lr: load_image(&lr_path)?, hr: load_image(&path)? });
        }
        if pairs.is_empty() {
            return Err(Error::Data(format!("no images in {}", hr_dir.display())));
        }
        let ds = Self { scale, pairs };
        ds.validate()?;
        Ok(ds)
    }

    /// Writes the directory layout read by [`PairedDataset::load_dir`].
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        let hr_dir = dir.join("hr");
        let lr_dir = dir.join(format!("lr_x{}", self.scale));
        std::fs::create_dir_all(&hr_dir)?;
        std::fs::create_dir_all(&lr_dir)?;
        for p in &self.pairs {
            save_image(&p.hr, &hr_dir.join(&p.name))?;
            save_image(&p.lr, &lr_dir.join(&p.name))?;
        }
        Ok(())
    }
}

/// `.pgm` / `.ppm` files in `dir`, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::Data(format!("cannot list {}: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "pgm" || x == "ppm"))
        .collect();
    paths.sort();
    Ok(paths)
}

/// Top-left corners of a `patch x patch` grid with the given stride.
pub fn patch_offsets(h: usize, w: usize, patch: usize, stride: usize) -> Vec<(usize, usize)> {
    if patch > h || patch > w || stride == 0 {
        return Vec::new();
    }
    let ys = (0..=h - patch).step_by(stride);
    ys.flat_map(|y| (0..=w - patch).step_by(stride).map(move |x| (y, x))).collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchPair {
    /// LR top-left corner; the HR corner is `scale` times this.
    pub offset: (usize, usize),
    pub lr: ImageBuffer,
    pub hr: ImageBuffer,
}

/// Aligned LR/HR patches over a grid, in a seed-determined order.
pub fn extract_patches(pair: &ImagePair, scale: usize, patch_lr: usize, stride: usize, seed: u64) -> Result<Vec<PatchPair>> {
    if patch_lr == 0 || patch_lr % 2 == 1 {
        return Err(arg_err!("patch size must be even, got {patch_lr}"));
    }
    if pair.lr.height < patch_lr || pair.lr.width < patch_lr {
        log::warn!("{}: {}x{} is smaller than the {patch_lr} patch, skipped", pair.name, pair.lr.height, pair.lr.width);
        return Ok(Vec::new());
    }
    let mut offsets = patch_offsets(pair.lr.height, pair.lr.width, patch_lr, stride);
    offsets.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let hp = scale * patch_lr;
    offsets
        .into_iter()
        .map(|(y, x)| {
            Ok(PatchPair {
                offset: (y, x),
                lr: pair.lr.crop(y, x, patch_lr, patch_lr)?,
                hr: pair.hr.crop(scale * y, scale * x, hp, hp)?,
            })
        })
        .collect()
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Infrared-like scene: smooth background, a few hot blobs, mild noise.
pub fn synthetic_image(size: usize, rng: &mut ChaCha8Rng) -> ImageBuffer {
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| (rng.gen_range(0.5..2.0), rng.gen_range(0.5..2.0), rng.gen_range(0.0..6.3), rng.gen_range(4.0..10.0)))
        .collect();
    let base = rng.gen_range(50.0..80.0);
    let blobs: Vec<(f64, f64, f64, f64)> = (0..rng.gen_range(3..7))
        .map(|_| {
            let s = size as f64;
            (rng.gen_range(0.0..s), rng.gen_range(0.0..s), rng.gen_range(1.5..s / 16.0 + 2.0), rng.gen_range(110.0..170.0))
        })
        .collect();
    let n = size as f64;
    let mut data = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (u, v) = (x as f64 / n, y as f64 / n);
            let mut val = base;
            for &(fx, fy, ph, amp) in &waves {
                val += amp * (std::f64::consts::TAU * (fx * u + fy * v) + ph).sin();
            }
            for &(cx, cy, r, amp) in &blobs {
                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                val += amp * (-d2 / (2.0 * r * r)).exp();
            }
            val += 2.0 * normal(rng);
            data.push(val.round().clamp(0.0, 255.0) as u8);
        }
    }
    ImageBuffer::new(ColorSpace::Gray, size, size, data).expect("consistent sizes")
}

/// `n` synthetic HR images of `size x size` with bicubic LR partners.
pub fn make_synthetic_dataset(n: usize, size: usize, scale: usize, seed: u64) -> Result<PairedDataset> {
    if scale == 0 || size < scale {
        return Err(arg_err!("cannot make {size}px images at scale {scale}"));
    }
    let size = size - size % scale;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs = (0..n)
        .map(|i| {
            let hr = synthetic_image(size, &mut rng);
            let lr = bicubic_resample(&hr, size / scale, size / scale)?;
            Ok(ImagePair { name: format!("synth_{i:03}.pgm"), lr, hr })
        })
        .collect::<Result<_>>()?;
    Ok(PairedDataset { scale, pairs })
}
