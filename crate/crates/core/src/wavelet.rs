//! Single-level orthonormal Haar transform and the wavelet feature
//! modulation block used for shallow feature extraction.
//!
//! For a 2x2 block `[[a, b], [c, d]]`:
//!
//! ```text
//! cA = (a + b + c + d) / 2      cH = ((a + b) - (c + d)) / 2
//! cV = ((a + c) - (b + d)) / 2  cD = ((a + d) - (b + c)) / 2
//! ```

use std::rc::Rc;

use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{arg_err, dim_err, Result};
use crate::nn::{Binding, Conv2d, ParamStore};
use crate::tensor::Tensor;

/// Haar subbands of a `[B, C, H, W]` map, each `[B, C, ceil(H/2), ceil(W/2)]`.
#[derive(Clone, Debug, PartialEq)]
pub struct WaveletBands {
    pub ca: Tensor,
    pub ch: Tensor,
    pub cv: Tensor,
    pub cd: Tensor,
    /// An odd height was replicate-padded by one row before the transform.
    pub padded_h: bool,
    /// An odd width was replicate-padded by one column.
    pub padded_w: bool,
}

impl WaveletBands {
    pub fn energy(&self) -> f64 {
        [&self.ca, &self.ch, &self.cv, &self.cd]
            .iter()
            .map(|t| t.data().iter().map(|v| v * v).sum::<f64>())
            .sum()
    }
}

#[inline]
fn analyse(a: f64, b: f64, c: f64, d: f64) -> [f64; 4] {
    [
        (a + b + c + d) * 0.5,
        ((a + b) - (c + d)) * 0.5,
        ((a + c) - (b + d)) * 0.5,
        ((a + d) - (b + c)) * 0.5,
    ]
}

#[inline]
fn synthesise(ca: f64, ch: f64, cv: f64, cd: f64) -> [f64; 4] {
    [
        (ca + ch + cv + cd) * 0.5,
        (ca + ch - cv - cd) * 0.5,
        (ca - ch + cv - cd) * 0.5,
        (ca - ch - cv + cd) * 0.5,
    ]
}

/// Forward transform on even `h, w` planes packed as `[planes, h, w]`;
/// returns band-major `[4][planes, h/2, w/2]` data.
fn dwt_planes(x: &[f64], planes: usize, h: usize, w: usize) -> [Vec<f64>; 4] {
    let (oh, ow) = (h / 2, w / 2);
    let mut bands: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; planes * oh * ow]);
    for p in 0..planes {
        for y in 0..oh {
            for xx in 0..ow {
                let i = (p * h + 2 * y) * w + 2 * xx;
                let r = analyse(x[i], x[i + 1], x[i + w], x[i + w + 1]);
                let o = (p * oh + y) * ow + xx;
                for k in 0..4 {
                    bands[k][o] = r[k];
                }
            }
        }
    }
    bands
}

fn idwt_planes(bands: [&[f64]; 4], planes: usize, oh: usize, ow: usize) -> Vec<f64> {
    let (h, w) = (oh * 2, ow * 2);
    let mut x = vec![0.0; planes * h * w];
    for p in 0..planes {
        for y in 0..oh {
            for xx in 0..ow {
                let o = (p * oh + y) * ow + xx;
                let r = synthesise(bands[0][o], bands[1][o], bands[2][o], bands[3][o]);
                let i = (p * h + 2 * y) * w + 2 * xx;
                x[i] = r[0];
                x[i + 1] = r[1];
                x[i + w] = r[2];
                x[i + w + 1] = r[3];
            }
        }
    }
    x
}

/// Index map that replicate-pads an odd height/width by one.
fn replicate_pad_index(planes: usize, h: usize, w: usize) -> (Vec<usize>, usize, usize) {
    let (ph, pw) = (h + h % 2, w + w % 2);
    let mut idx = Vec::with_capacity(planes * ph * pw);
    for p in 0..planes {
        for y in 0..ph {
            for x in 0..pw {
                idx.push((p * h + y.min(h - 1)) * w + x.min(w - 1));
            }
        }
    }
    (idx, ph, pw)
}

/// Single-level 2-D Haar analysis. Odd extents are replicate-padded.
pub fn dwt2_haar(x: &Tensor) -> Result<WaveletBands> {
    let (b, c, h, w) = x.dims4()?;
    if h == 0 || w == 0 {
        return Err(dim_err!("dwt2_haar on an empty map"));
    }
    let (idx, ph, pw) = replicate_pad_index(b * c, h, w);
    let padded: Vec<f64> = idx.iter().map(|&i| x.data()[i]).collect();
    let [ca, ch, cv, cd] = dwt_planes(&padded, b * c, ph, pw);
    let shape = [b, c, ph / 2, pw / 2];
    Ok(WaveletBands {
        ca: Tensor::new(&shape, ca)?,
        ch: Tensor::new(&shape, ch)?,
        cv: Tensor::new(&shape, cv)?,
        cd: Tensor::new(&shape, cd)?,
        padded_h: h % 2 == 1,
        padded_w: w % 2 == 1,
    })
}

/// Exact inverse of [`dwt2_haar`], dropping any padding it added.
pub fn idwt2_haar(bands: &WaveletBands) -> Result<Tensor> {
    let shape = bands.ca.shape();
    for t in [&bands.ch, &bands.cv, &bands.cd] {
        if t.shape() != shape {
            return Err(dim_err!("idwt2_haar: band shapes {:?} and {:?} differ", shape, t.shape()));
        }
    }
    let (b, c, oh, ow) = bands.ca.dims4()?;
    let full = idwt_planes([bands.ca.data(), bands.ch.data(), bands.cv.data(), bands.cd.data()], b * c, oh, ow);
    let (ph, pw) = (2 * oh, 2 * ow);
    let h = ph - usize::from(bands.padded_h);
    let w = pw - usize::from(bands.padded_w);
    if h == ph && w == pw {
        return Tensor::new(&[b, c, h, w], full);
    }
    let mut out = Vec::with_capacity(b * c * h * w);
    for p in 0..b * c {
        for y in 0..h {
            out.extend_from_slice(&full[(p * ph + y) * pw..][..w]);
        }
    }
    Tensor::new(&[b, c, h, w], out)
}

impl Tape {
    /// Differentiable Haar analysis of an even-sized map. The output is
    /// `[B, 4C, H/2, W/2]` holding `concat(cA, cH, cV, cD)` along channels.
    pub fn dwt2_haar(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        if h % 2 == 1 || w % 2 == 1 {
            return Err(dim_err!("tape dwt2_haar needs even extents, got {h}x{w}"));
        }
        let (oh, ow) = (h / 2, w / 2);
        let per_band = |bands: [Vec<f64>; 4]| {
            // [band][b, c, ..] -> [b, band, c, ..]
            let plane = oh * ow;
            let mut out = Vec::with_capacity(4 * b * c * plane);
            for bi in 0..b {
                for band in &bands {
                    out.extend_from_slice(&band[bi * c * plane..(bi + 1) * c * plane]);
                }
            }
            out
        };
        let data = per_band(dwt_planes(self.value(x).data(), b * c, h, w));
        let out = Tensor::new(&[b, 4 * c, oh, ow], data)?;
        Ok(self.push(
            out,
            &[x],
            Box::new(move |ctx| {
                // The transform is orthonormal, so its adjoint is the inverse.
                let g = ctx.grad.data();
                let plane = oh * ow;
                let mut bands: [Vec<f64>; 4] = std::array::from_fn(|_| Vec::with_capacity(b * c * plane));
                for bi in 0..b {
                    for (k, band) in bands.iter_mut().enumerate() {
                        band.extend_from_slice(&g[(bi * 4 + k) * c * plane..][..c * plane]);
                    }
                }
                let gx = idwt_planes([&bands[0], &bands[1], &bands[2], &bands[3]], b * c, oh, ow);
                vec![Some(Tensor::new(&[b, c, h, w], gx).unwrap())]
            }),
        ))
    }

    /// Replicate-pads odd spatial extents up to even.
    pub fn pad_to_even(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        if h % 2 == 0 && w % 2 == 0 {
            return Ok(x);
        }
        let (idx, ph, pw) = replicate_pad_index(b * c, h, w);
        self.gather(x, Rc::from(idx), &[b, c, ph, pw])
    }
}

/// Nonlinearity between the two modulation convolutions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GateActivation {
    #[default]
    Silu,
    Sigmoid,
}

impl std::str::FromStr for GateActivation {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "silu" => Ok(Self::Silu),
            "sigmoid" => Ok(Self::Sigmoid),
            other => Err(arg_err!("unknown gate activation {other:?} (silu|sigmoid)")),
        }
    }
}

/// Wavelet transform feature modulation block.
#[derive(Clone, Debug)]
pub struct Wtfm {
    pub conv3: Conv2d,
    pub conv7: Conv2d,
    pub mod_in: Conv2d,
    pub mod_out: Conv2d,
    pub fuse: Conv2d,
    pub activation: GateActivation,
    pub feat: usize,
}

/// Intermediate maps of [`Wtfm::forward`].
#[derive(Clone, Copy, Debug)]
pub struct WtfmOutput {
    /// 3x3 features `f`.
    pub f: Var,
    /// 7x7 features `f'`.
    pub f_prime: Var,
    /// Modulated features `f' * up(gate)`.
    pub f_mod: Var,
    /// `concat(f, f', f_mod)` before fusion, `3 * Cf` channels.
    pub f_combined: Var,
    /// After the 1x1 fusion to the backbone width.
    pub fused: Var,
}

impl Wtfm {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        feat: usize,
        embed: usize,
        activation: GateActivation,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            conv3: Conv2d::new(store, &format!("{name}.conv3"), cin, feat, 3, 1, rng)?,
            conv7: Conv2d::new(store, &format!("{name}.conv7"), cin, feat, 7, 1, rng)?,
            mod_in: Conv2d::new(store, &format!("{name}.mod_in"), 4 * feat, feat, 3, 1, rng)?,
            mod_out: Conv2d::new(store, &format!("{name}.mod_out"), feat, feat, 3, 1, rng)?,
            fuse: Conv2d::new(store, &format!("{name}.fuse"), 3 * feat, embed, 1, 1, rng)?,
            activation,
            feat,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Binding, x: Var) -> Result<WtfmOutput> {
        let (_, _, h, w) = tape.value(x).dims4()?;
        if h < 2 || w < 2 {
            return Err(arg_err!("wavelet modulation needs at least 2x2 input, got {h}x{w}"));
        }
        let f = self.conv3.forward(tape, p, x)?;
        let f_prime = self.conv7.forward(tape, p, x)?;
        let padded = tape.pad_to_even(f)?;
        let bands = tape.dwt2_haar(padded)?;
        let g = self.mod_in.forward(tape, p, bands)?;
        let g = match self.activation {
            GateActivation::Silu => tape.silu(g)?,
            GateActivation::Sigmoid => tape.sigmoid(g)?,
        };
        let g = self.mod_out.forward(tape, p, g)?;
        let mut up = tape.upsample_nearest(g, 2)?;
        if tape.shape(up)[2] != h || tape.shape(up)[3] != w {
            up = tape.crop(up, 0, 0, h, w)?;
        }
        let f_mod = tape.mul(f_prime, up)?;
        let f_combined = tape.concat(&[f, f_prime, f_mod], 1)?;
        let fused = self.fuse.forward(tape, p, f_combined)?;
        Ok(WtfmOutput { f, f_prime, f_mod, f_combined, fused })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::check_gradients;
    use rand::{Rng, SeedableRng};

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn constant_image_has_no_detail() {
        let x = Tensor::full(&[1, 2, 4, 6], 3.5);
        let b = dwt2_haar(&x).unwrap();
        assert!(b.ca.data().iter().all(|&v| v == 7.0));
        for t in [&b.ch, &b.cv, &b.cd] {
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn hand_block() {
        let x = Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = dwt2_haar(&x).unwrap();
        assert_eq!(
            (b.ca.data()[0], b.ch.data()[0], b.cv.data()[0], b.cd.data()[0]),
            (5.0, -2.0, -1.0, 0.0)
        );
    }

    #[test]
    fn round_trip_and_energy_including_odd() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        for shape in [[2, 3, 6, 4], [1, 1, 5, 7], [1, 2, 1, 3]] {
            let x = random(&shape, &mut rng);
            let b = dwt2_haar(&x).unwrap();
            let y = idwt2_haar(&b).unwrap();
            assert!(y.max_abs_diff(&x).unwrap() < 1e-12);
            if shape[2] % 2 == 0 && shape[3] % 2 == 0 {
                let ex: f64 = x.data().iter().map(|v| v * v).sum();
                assert!(((b.energy() - ex) / ex).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn inverse_cases() {
        let z = Tensor::zeros(&[1, 1, 1, 1]);
        let bands = WaveletBands {
            ca: Tensor::full(&[1, 1, 1, 1], 2.0 * 1.25),
            ch: z.clone(),
            cv: z.clone(),
            cd: z.clone(),
            padded_h: false,
            padded_w: false,
        };
        assert!(idwt2_haar(&bands).unwrap().data().iter().all(|&v| v == 1.25));

        let impulse = WaveletBands { ca: z.clone(), ch: Tensor::full(&[1, 1, 1, 1], 1.0), ..bands.clone() };
        assert_eq!(idwt2_haar(&impulse).unwrap().data(), &[0.5, 0.5, -0.5, -0.5]);

        let bad = WaveletBands { cd: Tensor::zeros(&[1, 1, 2, 1]), ..bands };
        assert!(matches!(idwt2_haar(&bad), Err(crate::Error::Dimension(_))));
    }

    #[test]
    fn inverse_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mk = |rng: &mut ChaCha8Rng| WaveletBands {
            ca: random(&[1, 2, 2, 3], rng),
            ch: random(&[1, 2, 2, 3], rng),
            cv: random(&[1, 2, 2, 3], rng),
            cd: random(&[1, 2, 2, 3], rng),
            padded_h: false,
            padded_w: false,
        };
        let (b1, b2) = (mk(&mut rng), mk(&mut rng));
        let add = |a: &Tensor, b: &Tensor| a.zip_map(b, |x, y| x + y).unwrap();
        let sum = WaveletBands {
            ca: add(&b1.ca, &b2.ca),
            ch: add(&b1.ch, &b2.ch),
            cv: add(&b1.cv, &b2.cv),
            cd: add(&b1.cd, &b2.cd),
            padded_h: false,
            padded_w: false,
        };
        let lhs = idwt2_haar(&sum).unwrap();
        let rhs = add(&idwt2_haar(&b1).unwrap(), &idwt2_haar(&b2).unwrap());
        assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-14);
    }

    #[test]
    fn tape_transform_matches_plain_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let x = random(&[2, 2, 4, 6], &mut rng);
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let y = t.dwt2_haar(xv).unwrap();
        let b = dwt2_haar(&x).unwrap();
        let plane = 2 * 3;
        for bi in 0..2 {
            for (k, band) in [&b.ca, &b.ch, &b.cv, &b.cd].iter().enumerate() {
                let got = &t.value(y).data()[(bi * 4 + k) * 2 * plane..][..2 * plane];
                assert_eq!(got, &band.data()[bi * 2 * plane..][..2 * plane]);
            }
        }
        let w = random(&[2, 8, 2, 3], &mut rng);
        let err = check_gradients(
            |t, x| {
                let y = t.dwt2_haar(x)?;
                let w = t.constant(w.clone());
                let y = t.mul(y, w)?;
                Ok(t.sum(y))
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    fn block(feat: usize, embed: usize, seed: u64) -> (ParamStore, Wtfm) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = Wtfm::new(&mut store, "wtfm", 1, feat, embed, GateActivation::Silu, &mut rng).unwrap();
        (store, w)
    }

    #[test]
    fn wtfm_shapes() {
        let (store, w) = block(8, 16, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut t = Tape::new();
        let p = store.bind(&mut t, false);
        let x = t.constant(random(&[1, 1, 32, 32], &mut rng));
        let out = w.forward(&mut t, &p, x).unwrap();
        assert_eq!(t.shape(out.f_combined), &[1, 24, 32, 32]);
        assert_eq!(t.shape(out.fused), &[1, 16, 32, 32]);
        assert_eq!(t.shape(out.f_mod), &[1, 8, 32, 32]);

        let odd = t.constant(random(&[1, 1, 7, 5], &mut rng));
        let out = w.forward(&mut t, &p, odd).unwrap();
        assert_eq!(t.shape(out.fused), &[1, 16, 7, 5]);

        let tiny = t.constant(random(&[1, 1, 1, 5], &mut rng));
        assert!(matches!(w.forward(&mut t, &p, tiny), Err(crate::Error::Argument(_))));
    }

    #[test]
    fn zero_modulation_branch() {
        let (mut store, w) = block(4, 8, 3);
        w.mod_out.zero(&mut store);
        w.mod_in.zero(&mut store);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut t = Tape::new();
        let p = store.bind(&mut t, false);
        let x = t.constant(random(&[1, 1, 8, 8], &mut rng));
        let out = w.forward(&mut t, &p, x).unwrap();
        assert!(t.value(out.f_mod).data().iter().all(|&v| v == 0.0));
        let comb = t.value(out.f_combined).data();
        let plane = 64;
        assert_eq!(&comb[..4 * plane], t.value(out.f).data());
        assert_eq!(&comb[4 * plane..8 * plane], t.value(out.f_prime).data());
    }

    #[test]
    fn wtfm_deterministic() {
        let run = || {
            let (store, w) = block(4, 8, 5);
            let mut rng = ChaCha8Rng::seed_from_u64(6);
            let mut t = Tape::new();
            let p = store.bind(&mut t, false);
            let x = t.constant(random(&[1, 1, 8, 8], &mut rng));
            let out = w.forward(&mut t, &p, x).unwrap();
            t.value(out.fused).clone()
        };
        assert_eq!(run(), run());
    }
}
