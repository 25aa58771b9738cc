//! Differentiable primitives recorded on a [`Tape`].
//!
//! Broadcasting is limited to scalars and to the explicit last-axis vector
//! ops (`mul_last`); every other binary op requires equal shapes.

use std::rc::Rc;

use crate::autograd::{Tape, Var};
use crate::error::{arg_err, dim_err, Result};
use crate::tensor::Tensor;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for positive arguments.
pub fn softplus_inv(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// Hyper-parameters of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Self { stride: 1, padding: 0, groups: 1 }
    }
}

impl Conv2dSpec {
    pub fn same(kernel: usize) -> Self {
        Self { stride: 1, padding: kernel / 2, groups: 1 }
    }

    pub fn depthwise(kernel: usize, channels: usize) -> Self {
        Self { stride: 1, padding: kernel / 2, groups: channels }
    }
}

struct ConvGeom {
    b: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    cin_g: usize,
    cout_g: usize,
    spec: Conv2dSpec,
}

impl ConvGeom {
    fn new(input: &Tensor, weight: &Tensor, spec: Conv2dSpec) -> Result<Self> {
        let (b, cin, h, w) = input.dims4()?;
        let (cout, cin_g, kh, kw) = weight.dims4()?;
        if spec.stride == 0 {
            return Err(arg_err!("conv2d stride must be positive"));
        }
        if spec.groups == 0 || cin % spec.groups != 0 || cout % spec.groups != 0 {
            return Err(dim_err!(
                "conv2d channels in={cin} out={cout} not divisible by groups={}",
                spec.groups
            ));
        }
        if cin_g != cin / spec.groups {
            return Err(dim_err!(
                "conv2d weight expects {cin_g} input channels per group, input has {}",
                cin / spec.groups
            ));
        }
        let ph = h + 2 * spec.padding;
        let pw = w + 2 * spec.padding;
        if ph < kh || pw < kw {
            return Err(dim_err!("conv2d kernel {kh}x{kw} larger than padded input {ph}x{pw}"));
        }
        let oh = (ph - kh) / spec.stride + 1;
        let ow = (pw - kw) / spec.stride + 1;
        Ok(Self { b, cin, h, w, cout, kh, kw, oh, ow, cin_g, cout_g: cout / spec.groups, spec })
    }

    /// Output column range `[lo, hi)` whose input column `ox*stride + kx - pad`
    /// lands inside the image.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let s = self.spec.stride;
        let p = self.spec.padding;
        let lo = if kx >= p { 0 } else { (p - kx).div_ceil(s) };
        let hi = if self.w + p > kx { ((self.w + p - kx - 1) / s + 1).min(self.ow) } else { 0 };
        (lo, hi.max(lo))
    }

    /// Visits every (input index, weight index, output index) triple of the
    /// convolution, run-length encoded along the output row.
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        let s = self.spec.stride;
        let p = self.spec.padding;
        for b in 0..self.b {
            for g in 0..self.spec.groups {
                for ocg in 0..self.cout_g {
                    let oc = g * self.cout_g + ocg;
                    for icg in 0..self.cin_g {
                        let ic = g * self.cin_g + icg;
                        for ky in 0..self.kh {
                            for kx in 0..self.kw {
                                let widx = ((oc * self.cin_g + icg) * self.kh + ky) * self.kw + kx;
                                let (lo, hi) = self.valid_cols(kx);
                                if lo >= hi {
                                    continue;
                                }
                                for oy in 0..self.oh {
                                    let iy = oy * s + ky;
                                    if iy < p || iy - p >= self.h {
                                        continue;
                                    }
                                    let iy = iy - p;
                                    let ix0 = lo * s + kx - p;
                                    let in_base = ((b * self.cin + ic) * self.h + iy) * self.w + ix0;
                                    let out_base = ((b * self.cout + oc) * self.oh + oy) * self.ow + lo;
                                    f(in_base, widx, out_base, hi - lo);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Row-major strides of a shape.
fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Index map of a pixel shuffle with factor `r` on a `[b, c*r*r, h, w]` input.
pub fn pixel_shuffle_index(b: usize, c: usize, h: usize, w: usize, r: usize) -> Vec<usize> {
    let (oh, ow) = (h * r, w * r);
    let mut idx = Vec::with_capacity(b * c * oh * ow);
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    let ch = ci * r * r + (y % r) * r + (x % r);
                    idx.push(((bi * c * r * r + ch) * h + y / r) * w + x / r);
                }
            }
        }
    }
    idx
}

/// Index map of the inverse rearrangement (space-to-depth).
pub fn pixel_unshuffle_index(b: usize, c: usize, h: usize, w: usize, r: usize) -> Vec<usize> {
    let (ih, iw) = (h * r, w * r);
    let mut idx = Vec::with_capacity(b * c * ih * iw);
    for bi in 0..b {
        for ch in 0..c * r * r {
            let (ci, i, j) = (ch / (r * r), (ch / r) % r, ch % r);
            for y in 0..h {
                for x in 0..w {
                    idx.push(((bi * c + ci) * ih + y * r + i) * iw + x * r + j);
                }
            }
        }
    }
    idx
}

/// Per output coordinate: `(lower, upper, upper weight)`.
fn bilinear_taps(input: usize, output: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

impl Tape {
    fn binary_same(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err!(
                "{what}: shapes {:?} and {:?} differ (reshape explicitly)",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(a, b, "add")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(out, &[a, b], Box::new(|c| vec![Some(c.grad.clone()), Some(c.grad.clone())])))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(a, b, "sub")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(
            out,
            &[a, b],
            Box::new(|c| vec![Some(c.grad.clone()), Some(c.grad.map(|g| -g))]),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(a, b, "mul")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(
            out,
            &[a, b],
            Box::new(|c| {
                let ga = c.needs[0].then(|| c.grad.zip_map(c.inputs[1], |g, y| g * y).unwrap());
                let gb = c.needs[1].then(|| c.grad.zip_map(c.inputs[0], |g, x| g * x).unwrap());
                vec![ga, gb]
            }),
        ))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|x| x * k);
        self.push(out, &[a], Box::new(move |c| vec![Some(c.grad.map(|g| g * k))]))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|x| x + k);
        self.push(out, &[a], Box::new(|c| vec![Some(c.grad.clone())]))
    }

    /// Applies a scalar function with known derivative elementwise.
    fn unary(&mut self, a: Var, f: fn(f64) -> f64, df: fn(f64) -> f64) -> Var {
        let out = self.value(a).map(f);
        self.push(
            out,
            &[a],
            Box::new(move |c| vec![Some(c.grad.zip_map(c.inputs[0], |g, x| g * df(x)).unwrap())]),
        )
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        Ok(self.unary(a, silu, |x| {
            let s = sigmoid(x);
            s * (1.0 + x * (1.0 - s))
        }))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        Ok(self.unary(a, sigmoid, |x| {
            let s = sigmoid(x);
            s * (1.0 - s)
        }))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, f64::exp)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, f64::signum)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, |x| 2.0 * x)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let shape = self.shape(a).to_vec();
        self.push(out, &[a], Box::new(move |c| vec![Some(Tensor::full(&shape, c.grad.data()[0]))]))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Multiplies every last-axis slice of `x` elementwise by the vector `v`.
    pub fn mul_last(&mut self, x: Var, v: Var) -> Result<Var> {
        let xs = self.value(x);
        let vs = self.value(v);
        let c = *xs.shape().last().unwrap_or(&0);
        if vs.shape() != [c] {
            return Err(dim_err!("mul_last: vector shape {:?} vs last axis {c}", vs.shape()));
        }
        let data: Vec<f64> =
            xs.data().iter().enumerate().map(|(i, &a)| a * vs.data()[i % c]).collect();
        let out = Tensor::new(xs.shape(), data)?;
        Ok(self.push(
            out,
            &[x, v],
            Box::new(move |ctx| {
                let (xv, vv, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad.data());
                let gx = ctx.needs[0].then(|| {
                    Tensor::from_fn(ctx.grad.shape(), |i| g[i] * vv[i % c])
                });
                let gv = ctx.needs[1].then(|| {
                    let mut acc = vec![0.0; c];
                    for (i, (&gi, &xi)) in g.iter().zip(xv).enumerate() {
                        acc[i % c] += gi * xi;
                    }
                    Tensor::new(&[c], acc).unwrap()
                });
                vec![gx, gv]
            }),
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        let orig = self.shape(a).to_vec();
        Ok(self.push(out, &[a], Box::new(move |c| vec![Some(c.grad.reshape(&orig).unwrap())])))
    }

    /// `out[i] = x[index[i]]`. The backward pass scatter-adds, so repeated
    /// indices (e.g. nearest-neighbour upsampling) are handled.
    pub fn gather(&mut self, x: Var, index: Rc<[usize]>, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        let xv = self.value(x);
        if index.len() != n {
            return Err(dim_err!("gather: index of length {} for shape {shape:?}", index.len()));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= xv.len()) {
            return Err(dim_err!("gather: index {bad} out of range for {} elements", xv.len()));
        }
        let data = index.iter().map(|&i| xv.data()[i]).collect();
        let out = Tensor::new(shape, data)?;
        let in_shape = xv.shape().to_vec();
        Ok(self.push(
            out,
            &[x],
            Box::new(move |c| {
                let mut g = Tensor::zeros(&in_shape);
                let gd = g.data_mut();
                for (&i, &v) in index.iter().zip(c.grad.data()) {
                    gd[i] += v;
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Permutes axes, e.g. `[0, 2, 3, 1]` takes NCHW to NHWC.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axes.len() != shape.len() {
            return Err(dim_err!("permute: {} axes for rank {}", axes.len(), shape.len()));
        }
        let mut seen = vec![false; axes.len()];
        for &a in axes {
            if a >= axes.len() || std::mem::replace(&mut seen[a], true) {
                return Err(arg_err!("permute: invalid axis list {axes:?}"));
            }
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let in_strides = strides(&shape);
        let n: usize = shape.iter().product();
        let mut index = Vec::with_capacity(n);
        let mut coord = vec![0usize; axes.len()];
        for _ in 0..n {
            index.push(coord.iter().zip(axes).map(|(&c, &a)| c * in_strides[a]).sum());
            for d in (0..coord.len()).rev() {
                coord[d] += 1;
                if coord[d] < out_shape[d] {
                    break;
                }
                coord[d] = 0;
            }
        }
        self.gather(x, index.into(), &out_shape)
    }

    /// `[B, C, H, W]` -> `[B, H*W, C]`.
    pub fn to_tokens(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        let y = self.permute(x, &[0, 2, 3, 1])?;
        self.reshape(y, &[b, h * w, c])
    }

    /// `[B, H*W, C]` -> `[B, C, H, W]`.
    pub fn from_tokens(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let (b, l, c) = self.value(x).dims3()?;
        if l != h * w {
            return Err(dim_err!("from_tokens: length {l} is not {h}x{w}"));
        }
        let y = self.reshape(x, &[b, h, w, c])?;
        self.permute(y, &[0, 3, 1, 2])
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .value(*parts.first().ok_or_else(|| arg_err!("concat of nothing"))?)
            .shape()
            .to_vec();
        if axis >= first.len() {
            return Err(dim_err!("concat axis {axis} out of range for {first:?}"));
        }
        let mut sizes = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(dim_err!("concat: incompatible shapes {first:?} and {s:?}"));
            }
            sizes.push(s[axis]);
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let total: usize = sizes.iter().sum();
        let mut shape = first.clone();
        shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &sz) in parts.iter().zip(&sizes) {
                let d = self.value(p).data();
                data.extend_from_slice(&d[o * sz * inner..(o + 1) * sz * inner]);
            }
        }
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(
            out,
            parts,
            Box::new(move |c| {
                let g = c.grad.data();
                let mut grads: Vec<Vec<f64>> =
                    sizes.iter().map(|&sz| Vec::with_capacity(outer * sz * inner)).collect();
                let mut off = 0;
                for _ in 0..outer {
                    for (k, &sz) in sizes.iter().enumerate() {
                        grads[k].extend_from_slice(&g[off..off + sz * inner]);
                        off += sz * inner;
                    }
                }
                grads
                    .into_iter()
                    .zip(&c.inputs)
                    .zip(&c.needs)
                    .map(|((d, t), &need)| need.then(|| Tensor::new(t.shape(), d).unwrap()))
                    .collect()
            }),
        ))
    }

    /// 2-D convolution with zero padding. `weight` is `[Cout, Cin/groups, kh, kw]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        spec: Conv2dSpec,
    ) -> Result<Var> {
        let geom = ConvGeom::new(self.value(input), self.value(weight), spec)?;
        if let Some(b) = bias {
            if self.shape(b) != [geom.cout] {
                return Err(dim_err!("conv2d bias shape {:?}, expected [{}]", self.shape(b), geom.cout));
            }
        }
        let s = spec.stride;
        let mut out = vec![0.0; geom.b * geom.cout * geom.oh * geom.ow];
        {
            let x = self.value(input).data();
            let wt = self.value(weight).data();
            geom.for_each_run(|ib, wi, ob, n| {
                let wv = wt[wi];
                for j in 0..n {
                    out[ob + j] += wv * x[ib + j * s];
                }
            });
            if let Some(b) = bias {
                let bv = self.value(b).data();
                let plane = geom.oh * geom.ow;
                for (k, chunk) in out.chunks_mut(plane).enumerate() {
                    let add = bv[k % geom.cout];
                    chunk.iter_mut().for_each(|v| *v += add);
                }
            }
        }
        let out = Tensor::new(&[geom.b, geom.cout, geom.oh, geom.ow], out)?;
        let geom = Rc::new(geom);
        let mut parents = vec![input, weight];
        parents.extend(bias);
        Ok(self.push(
            out,
            &parents,
            Box::new(move |c| {
                let x = c.inputs[0].data();
                let wt = c.inputs[1].data();
                let g = c.grad.data();
                let mut gx = c.needs[0].then(|| vec![0.0; x.len()]);
                let mut gw = c.needs[1].then(|| vec![0.0; wt.len()]);
                geom.for_each_run(|ib, wi, ob, n| {
                    if let Some(gx) = gx.as_mut() {
                        let wv = wt[wi];
                        for j in 0..n {
                            gx[ib + j * s] += wv * g[ob + j];
                        }
                    }
                    if let Some(gw) = gw.as_mut() {
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += g[ob + j] * x[ib + j * s];
                        }
                        gw[wi] += acc;
                    }
                });
                let mut res = vec![
                    gx.map(|d| Tensor::new(c.inputs[0].shape(), d).unwrap()),
                    gw.map(|d| Tensor::new(c.inputs[1].shape(), d).unwrap()),
                ];
                if c.inputs.len() == 3 {
                    res.push(c.needs[2].then(|| {
                        let plane = geom.oh * geom.ow;
                        let mut gb = vec![0.0; geom.cout];
                        for (k, chunk) in g.chunks(plane).enumerate() {
                            gb[k % geom.cout] += chunk.iter().sum::<f64>();
                        }
                        Tensor::new(&[geom.cout], gb).unwrap()
                    }));
                }
                res
            }),
        ))
    }

    /// Affine map over the last axis: `y = x W^T + b` with `W` of shape `[Dout, Din]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.value(input).shape().to_vec();
        let (dout, din) = match self.shape(weight) {
            &[o, i] => (o, i),
            s => return Err(dim_err!("linear weight must be 2-D, got {s:?}")),
        };
        if xs.last() != Some(&din) {
            return Err(dim_err!("linear: input last axis {:?} vs weight in-features {din}", xs.last()));
        }
        if let Some(b) = bias {
            if self.shape(b) != [dout] {
                return Err(dim_err!("linear bias shape {:?}, expected [{dout}]", self.shape(b)));
            }
        }
        let m = self.value(input).len() / din.max(1);
        let mut out = vec![0.0; m * dout];
        {
            let x = self.value(input).data();
            let w = self.value(weight).data();
            let bv = bias.map(|b| self.value(b).data());
            for r in 0..m {
                let xr = &x[r * din..(r + 1) * din];
                for o in 0..dout {
                    let wr = &w[o * din..(o + 1) * din];
                    let dot: f64 = xr.iter().zip(wr).map(|(a, b)| a * b).sum();
                    out[r * dout + o] = dot + bv.map_or(0.0, |b| b[o]);
                }
            }
        }
        let mut shape = xs.clone();
        *shape.last_mut().unwrap() = dout;
        let out = Tensor::new(&shape, out)?;
        let mut parents = vec![input, weight];
        parents.extend(bias);
        Ok(self.push(
            out,
            &parents,
            Box::new(move |c| {
                let x = c.inputs[0].data();
                let w = c.inputs[1].data();
                let g = c.grad.data();
                let gx = c.needs[0].then(|| {
                    let mut gx = vec![0.0; x.len()];
                    for r in 0..m {
                        let gxr = &mut gx[r * din..(r + 1) * din];
                        for o in 0..dout {
                            let go = g[r * dout + o];
                            if go == 0.0 {
                                continue;
                            }
                            for (a, &wv) in gxr.iter_mut().zip(&w[o * din..(o + 1) * din]) {
                                *a += go * wv;
                            }
                        }
                    }
                    Tensor::new(c.inputs[0].shape(), gx).unwrap()
                });
                let gw = c.needs[1].then(|| {
                    let mut gw = vec![0.0; w.len()];
                    for r in 0..m {
                        let xr = &x[r * din..(r + 1) * din];
                        for o in 0..dout {
                            let go = g[r * dout + o];
                            for (a, &xv) in gw[o * din..(o + 1) * din].iter_mut().zip(xr) {
                                *a += go * xv;
                            }
                        }
                    }
                    Tensor::new(&[dout, din], gw).unwrap()
                });
                let mut res = vec![gx, gw];
                if c.inputs.len() == 3 {
                    res.push(c.needs[2].then(|| {
                        let mut gb = vec![0.0; dout];
                        for (i, &v) in g.iter().enumerate() {
                            gb[i % dout] += v;
                        }
                        Tensor::new(&[dout], gb).unwrap()
                    }));
                }
                res
            }),
        ))
    }

    /// Layer normalisation over the last axis.
    pub fn layer_norm(&mut self, input: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(arg_err!("layer_norm eps must be positive"));
        }
        let c = *self.shape(input).last().ok_or_else(|| dim_err!("layer_norm on a scalar"))?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(dim_err!(
                "layer_norm: gamma {:?} / beta {:?} vs last axis {c}",
                self.shape(gamma),
                self.shape(beta)
            ));
        }
        let x = self.value(input).data();
        let gm = self.value(gamma).data();
        let bt = self.value(beta).data();
        let rows = x.len() / c.max(1);
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let xr = &x[r * c..(r + 1) * c];
            let mean = xr.iter().sum::<f64>() / c as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let xh = (xr[j] - mean) * is;
                xhat[r * c + j] = xh;
                out[r * c + j] = xh * gm[j] + bt[j];
            }
        }
        let out = Tensor::new(self.shape(input), out)?;
        Ok(self.push(
            out,
            &[input, gamma, beta],
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let gm = ctx.inputs[1].data();
                let gx = ctx.needs[0].then(|| {
                    let mut gx = vec![0.0; g.len()];
                    for r in 0..rows {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..c {
                            let d = g[r * c + j] * gm[j];
                            m1 += d;
                            m2 += d * xhat[r * c + j];
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        for j in 0..c {
                            let d = g[r * c + j] * gm[j];
                            gx[r * c + j] = inv_std[r] * (d - m1 - xhat[r * c + j] * m2);
                        }
                    }
                    Tensor::new(ctx.grad.shape(), gx).unwrap()
                });
                let ggamma = ctx.needs[1].then(|| {
                    let mut acc = vec![0.0; c];
                    for (i, &v) in g.iter().enumerate() {
                        acc[i % c] += v * xhat[i];
                    }
                    Tensor::new(&[c], acc).unwrap()
                });
                let gbeta = ctx.needs[2].then(|| {
                    let mut acc = vec![0.0; c];
                    for (i, &v) in g.iter().enumerate() {
                        acc[i % c] += v;
                    }
                    Tensor::new(&[c], acc).unwrap()
                });
                vec![gx, ggamma, gbeta]
            }),
        ))
    }

    /// Depth-to-space: `[B, C*r*r, H, W]` -> `[B, C, H*r, W*r]`.
    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        if r == 0 || c % (r * r) != 0 {
            return Err(arg_err!("pixel_shuffle: {c} channels not divisible by {r}^2"));
        }
        let idx = pixel_shuffle_index(b, c / (r * r), h, w, r);
        self.gather(x, idx.into(), &[b, c / (r * r), h * r, w * r])
    }

    /// Space-to-depth: inverse of [`Tape::pixel_shuffle`].
    pub fn pixel_unshuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        if r == 0 || h % r != 0 || w % r != 0 {
            return Err(arg_err!("pixel_unshuffle: {h}x{w} not divisible by {r}"));
        }
        let idx = pixel_unshuffle_index(b, c, h / r, w / r, r);
        self.gather(x, idx.into(), &[b, c * r * r, h / r, w / r])
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        if factor == 0 {
            return Err(arg_err!("upsample factor must be positive"));
        }
        let (oh, ow) = (h * factor, w * factor);
        let mut idx = Vec::with_capacity(b * c * oh * ow);
        for plane in 0..b * c {
            for y in 0..oh {
                for xx in 0..ow {
                    idx.push((plane * h + y / factor) * w + xx / factor);
                }
            }
        }
        self.gather(x, idx.into(), &[b, c, oh, ow])
    }

    /// Bilinear upsampling by an integer factor with half-pixel centres and
    /// edge clamping.
    pub fn upsample_bilinear(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        if factor == 0 {
            return Err(arg_err!("upsample factor must be positive"));
        }
        let taps_y = Rc::new(bilinear_taps(h, h * factor, factor));
        let taps_x = Rc::new(bilinear_taps(w, w * factor, factor));
        let (oh, ow) = (h * factor, w * factor);
        let src = self.value(x).data();
        let mut out = vec![0.0; b * c * oh * ow];
        for p in 0..b * c {
            let plane = &src[p * h * w..(p + 1) * h * w];
            for (y, &(y0, y1, fy)) in taps_y.iter().enumerate() {
                for (xx, &(x0, x1, fx)) in taps_x.iter().enumerate() {
                    let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                    let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                    out[(p * oh + y) * ow + xx] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
        let out = Tensor::new(&[b, c, oh, ow], out)?;
        Ok(self.push(
            out,
            &[x],
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let mut gx = vec![0.0; b * c * h * w];
                for p in 0..b * c {
                    let gp = &mut gx[p * h * w..(p + 1) * h * w];
                    for (y, &(y0, y1, fy)) in taps_y.iter().enumerate() {
                        for (xx, &(x0, x1, fx)) in taps_x.iter().enumerate() {
                            let go = g[(p * oh + y) * ow + xx];
                            gp[y0 * w + x0] += go * (1.0 - fy) * (1.0 - fx);
                            gp[y0 * w + x1] += go * (1.0 - fy) * fx;
                            gp[y1 * w + x0] += go * fy * (1.0 - fx);
                            gp[y1 * w + x1] += go * fy * fx;
                        }
                    }
                }
                vec![Some(Tensor::new(&[b, c, h, w], gx).unwrap())]
            }),
        ))
    }

    /// Extracts the spatial window `[y0, y0+h) x [x0, x0+w)` of a 4-D tensor.
    pub fn crop(&mut self, x: Var, y0: usize, x0: usize, h: usize, w: usize) -> Result<Var> {
        let (b, c, ih, iw) = self.value(x).dims4()?;
        if y0 + h > ih || x0 + w > iw {
            return Err(dim_err!("crop window exceeds {ih}x{iw}"));
        }
        let mut idx = Vec::with_capacity(b * c * h * w);
        for plane in 0..b * c {
            for y in 0..h {
                for xx in 0..w {
                    idx.push((plane * ih + y0 + y) * iw + x0 + xx);
                }
            }
        }
        self.gather(x, idx.into(), &[b, c, h, w])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{check_gradients, check_gradients_multi};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Direct six-loop convolution used as an oracle.
    fn conv_oracle(x: &Tensor, w: &Tensor, b: Option<&Tensor>, spec: Conv2dSpec) -> Tensor {
        let (nb, cin, h, wd) = x.dims4().unwrap();
        let (cout, cin_g, kh, kw) = w.dims4().unwrap();
        let p = spec.padding as isize;
        let s = spec.stride;
        let oh = (h + 2 * spec.padding - kh) / s + 1;
        let ow = (wd + 2 * spec.padding - kw) / s + 1;
        let cout_g = cout / spec.groups;
        let mut out = Tensor::zeros(&[nb, cout, oh, ow]);
        for bi in 0..nb {
            for oc in 0..cout {
                let g = oc / cout_g;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b.map_or(0.0, |b| b.data()[oc]);
                        for icg in 0..cin_g {
                            let ic = g * cin_g + icg;
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * s + ky) as isize - p;
                                    let ix = (ox * s + kx) as isize - p;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    let xv = x.data()[((bi * cin + ic) * h + iy as usize) * wd + ix as usize];
                                    let wv = w.data()[((oc * cin_g + icg) * kh + ky) * kw + kx];
                                    acc += xv * wv;
                                }
                            }
                        }
                        out.data_mut()[((bi * cout + oc) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn conv_once(x: &Tensor, w: &Tensor, b: Option<&Tensor>, spec: Conv2dSpec) -> Result<Tensor> {
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let wv = t.constant(w.clone());
        let bv = b.map(|b| t.constant(b.clone()));
        let y = t.conv2d(xv, wv, bv, spec)?;
        Ok(t.value(y).clone())
    }

    #[test]
    fn conv_all_ones() {
        let x = Tensor::full(&[1, 1, 2, 2], 1.0);
        let w = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv_once(&x, &w, None, Conv2dSpec::same(3)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn conv_identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[2, 1, 4, 3], &mut rng);
        let w = Tensor::full(&[1, 1, 1, 1], 1.0);
        let b = Tensor::zeros(&[1]);
        assert_eq!(conv_once(&x, &w, Some(&b), Conv2dSpec::default()).unwrap(), x);
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cases = [
            ([1, 2, 5, 5], [4, 2, 3, 3], Conv2dSpec { stride: 1, padding: 1, groups: 1 }),
            ([2, 4, 6, 5], [4, 1, 3, 3], Conv2dSpec { stride: 1, padding: 1, groups: 4 }),
            ([1, 2, 7, 6], [2, 2, 3, 3], Conv2dSpec { stride: 2, padding: 0, groups: 1 }),
            ([1, 1, 8, 8], [3, 1, 7, 7], Conv2dSpec { stride: 1, padding: 3, groups: 1 }),
            ([1, 4, 5, 5], [6, 2, 3, 3], Conv2dSpec { stride: 2, padding: 2, groups: 2 }),
        ];
        for (xs, ws, spec) in cases {
            let x = random(&xs, &mut rng);
            let w = random(&ws, &mut rng);
            let b = random(&[ws[0]], &mut rng);
            let got = conv_once(&x, &w, Some(&b), spec).unwrap();
            let want = conv_oracle(&x, &w, Some(&b), spec);
            assert!(got.max_abs_diff(&want).unwrap() < 1e-10, "{spec:?}");
        }
    }

    #[test]
    fn conv_errors() {
        let x = Tensor::zeros(&[1, 3, 4, 4]);
        let w = Tensor::zeros(&[2, 1, 3, 3]);
        assert!(matches!(
            conv_once(&x, &w, None, Conv2dSpec { stride: 1, padding: 1, groups: 2 }),
            Err(crate::Error::Dimension(_))
        ));
        let w = Tensor::zeros(&[2, 3, 3, 3]);
        assert!(matches!(
            conv_once(&x, &w, None, Conv2dSpec { stride: 0, padding: 1, groups: 1 }),
            Err(crate::Error::Argument(_))
        ));
    }

    #[test]
    fn conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for spec in [
            Conv2dSpec { stride: 1, padding: 1, groups: 1 },
            Conv2dSpec { stride: 2, padding: 1, groups: 2 },
        ] {
            let x = random(&[1, 2, 4, 4], &mut rng);
            let w = random(&[2, 2 / spec.groups, 3, 3], &mut rng);
            let b = random(&[2], &mut rng);
            let r = random(&[1, 2, 4 / spec.stride, 4 / spec.stride], &mut rng);
            let err = check_gradients_multi(
                |t, v| {
                    let y = t.conv2d(v[0], v[1], Some(v[2]), spec)?;
                    let r = t.constant(r.clone());
                    let y = t.mul(y, r)?;
                    Ok(t.sum(y))
                },
                &[x, w, b],
                1e-4,
            )
            .unwrap();
            assert!(err < 1e-5, "{err}");
        }
    }

    #[test]
    fn linear_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&[2, 3, 4], &mut rng);
        let eye = Tensor::from_fn(&[4, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 });
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let e = t.constant(eye);
        let z = t.constant(Tensor::zeros(&[4]));
        let y = t.linear(xv, e, Some(z)).unwrap();
        assert_eq!(t.value(y), &x);

        let zw = t.constant(Tensor::zeros(&[2, 4]));
        let bias = t.constant(Tensor::new(&[2], vec![0.5, -2.0]).unwrap());
        let y = t.linear(xv, zw, Some(bias)).unwrap();
        assert_eq!(t.shape(y), &[2, 3, 2]);
        for (i, v) in t.value(y).data().iter().enumerate() {
            assert_eq!(*v, if i % 2 == 0 { 0.5 } else { -2.0 });
        }

        let w = random(&[5, 4], &mut rng);
        let b = random(&[5], &mut rng);
        let wv = t.constant(w.clone());
        let bv = t.constant(b.clone());
        let y = t.linear(xv, wv, Some(bv)).unwrap();
        for r in 0..6 {
            for o in 0..5 {
                let mut acc = b.data()[o];
                for i in 0..4 {
                    acc += x.data()[r * 4 + i] * w.data()[o * 4 + i];
                }
                assert!((t.value(y).data()[r * 5 + o] - acc).abs() < 1e-10);
            }
        }
        let bad = t.constant(Tensor::zeros(&[5, 3]));
        assert!(t.linear(xv, bad, None).is_err());
    }

    #[test]
    fn linear_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&[2, 3, 4], &mut rng);
        let w = random(&[3, 4], &mut rng);
        let b = random(&[3], &mut rng);
        let err = check_gradients_multi(
            |t, v| {
                let y = t.linear(v[0], v[1], Some(v[2]))?;
                let y = t.silu(y)?;
                Ok(t.sum(y))
            },
            &[x, w, b],
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn layer_norm_cases() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::full(&[1, 2, 4], 3.0));
        let g = t.constant(Tensor::full(&[4], 1.0));
        let b = t.constant(Tensor::zeros(&[4]));
        let y = t.layer_norm(x, g, b, 1e-5).unwrap();
        assert!(t.value(y).data().iter().all(|v| v.abs() < 1e-12));

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let xr = t.constant(random(&[3, 5, 6], &mut rng));
        let g0 = t.constant(Tensor::zeros(&[6]));
        let bb = t.constant(Tensor::full(&[6], 0.75));
        let y = t.layer_norm(xr, g0, bb, 1e-5).unwrap();
        assert!(t.value(y).data().iter().all(|&v| v == 0.75));

        let g1 = t.constant(Tensor::full(&[6], 1.0));
        let b0 = t.constant(Tensor::zeros(&[6]));
        let y = t.layer_norm(xr, g1, b0, 1e-12).unwrap();
        for row in t.value(y).data().chunks(6) {
            let m = row.iter().sum::<f64>() / 6.0;
            let v = row.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 6.0;
            assert!(m.abs() < 1e-9);
            assert!((v - 1.0).abs() < 1e-6);
        }
        let short = t.constant(Tensor::zeros(&[5]));
        assert!(t.layer_norm(xr, short, b0, 1e-5).is_err());
    }

    #[test]
    fn layer_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(&[2, 3, 5], &mut rng);
        let g = random(&[5], &mut rng);
        let b = random(&[5], &mut rng);
        let r = random(&[2, 3, 5], &mut rng);
        let err = check_gradients_multi(
            |t, v| {
                let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
                let r = t.constant(r.clone());
                let y = t.mul(y, r)?;
                Ok(t.sum(y))
            },
            &[x, g, b],
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn pointwise_values() {
        assert_eq!(silu(0.0), 0.0);
        assert!((silu(1.0) - 1.0 / (1.0 + (-1.0f64).exp())).abs() < 1e-15);
        assert!((silu(1.0) - 0.731_058_578_630_004_9).abs() < 1e-12);
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(&[3], vec![-1.0, 0.0, 2.5]).unwrap());
        let y = t.scale(x, 1.0);
        assert_eq!(t.value(y), t.value(x));
        let s = t.constant(Tensor::zeros(&[2]));
        assert!(matches!(t.add(x, s), Err(crate::Error::Dimension(_))));
        assert!(t.mul(x, s).is_err());
        assert!((softplus_inv(softplus(0.3)) - 0.3).abs() < 1e-12);
    }

    #[test]
    fn pointwise_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random(&[8], &mut rng).map(|v| 3.0 * v);
        let y = random(&[8], &mut rng);
        type Op = fn(&mut Tape, Var, Var) -> Result<Var>;
        let ops: [Op; 10] = [
            |t, a, _| Ok(t.exp(a)),
            |t, a, _| t.silu(a),
            |t, a, _| t.sigmoid(a),
            |t, a, _| Ok(t.softplus(a)),
            |t, a, _| Ok(t.square(a)),
            |t, a, b| t.add(a, b),
            |t, a, b| t.sub(a, b),
            |t, a, b| t.mul(a, b),
            |t, a, _| Ok(t.scale(a, -1.7)),
            |t, a, _| Ok(t.add_scalar(a, 0.3)),
        ];
        for op in ops {
            let err = check_gradients_multi(
                |t, v| {
                    let o = op(t, v[0], v[1])?;
                    let o = t.square(o);
                    Ok(t.sum(o))
                },
                &[x.clone(), y.clone()],
                1e-4,
            )
            .unwrap();
            assert!(err < 1e-5, "{err}");
        }
        let err = check_gradients(
            |t, x| {
                let s = t.silu(x)?;
                Ok(t.sum(s))
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-5);
        // |x| away from the kink
        let xa = x.map(|v| if v.abs() < 0.1 { v + 0.5 } else { v });
        let err = check_gradients(
            |t, x| {
                let a = t.abs(x);
                Ok(t.mean(a))
            },
            &xa,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-5);
    }

    #[test]
    fn mul_last_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random(&[2, 3, 4], &mut rng);
        let v = random(&[4], &mut rng);
        let err = check_gradients_multi(
            |t, p| {
                let y = t.mul_last(p[0], p[1])?;
                let y = t.square(y);
                Ok(t.sum(y))
            },
            &[x, v],
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-5);
    }

    #[test]
    fn pixel_shuffle_definition_and_inverse() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(&[1, 4, 1, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = t.pixel_shuffle(x, 2).unwrap();
        assert_eq!(t.shape(y), &[1, 1, 2, 2]);
        assert_eq!(t.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
        let id = t.pixel_shuffle(x, 1).unwrap();
        assert_eq!(t.value(id), t.value(x));

        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let z = t.constant(random(&[2, 8, 3, 2], &mut rng));
        let s = t.pixel_shuffle(z, 2).unwrap();
        let back = t.pixel_unshuffle(s, 2).unwrap();
        assert_eq!(t.value(back), t.value(z));
        let bad = t.constant(Tensor::zeros(&[1, 3, 2, 2]));
        assert!(matches!(t.pixel_shuffle(bad, 2), Err(crate::Error::Argument(_))));
    }

    #[test]
    fn gather_family_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(&[1, 4, 2, 3], &mut rng);
        let err = check_gradients(
            |t, x| {
                let a = t.pixel_shuffle(x, 2)?;
                let a = t.upsample_nearest(a, 2)?;
                let a = t.crop(a, 1, 2, 5, 7)?;
                let b = t.to_tokens(a)?;
                let b = t.square(b);
                Ok(t.sum(b))
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-5);
    }

    #[test]
    fn bilinear_upsample_cases() {
        let mut t = Tape::new();
        let c = t.constant(Tensor::full(&[1, 2, 3, 2], 4.5));
        let u = t.upsample_bilinear(c, 2).unwrap();
        assert_eq!(t.shape(u), &[1, 2, 6, 4]);
        assert!(t.value(u).data().iter().all(|&v| (v - 4.5).abs() < 1e-15));
        let r = t.constant(Tensor::new(&[1, 1, 1, 2], vec![0.0, 4.0]).unwrap());
        let u = t.upsample_bilinear(r, 2).unwrap();
        assert_eq!(t.value(u).data(), &[0.0, 1.0, 3.0, 4.0, 0.0, 1.0, 3.0, 4.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = random(&[1, 2, 3, 3], &mut rng);
        let err = check_gradients(
            |t, x| {
                let u = t.upsample_bilinear(x, 4)?;
                let u = t.square(u);
                Ok(t.sum(u))
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-5);
    }

    #[test]
    fn concat_and_tokens() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::from_fn(&[1, 1, 2, 2], |i| i as f64));
        let b = t.constant(Tensor::from_fn(&[1, 2, 2, 2], |i| 10.0 + i as f64));
        let c = t.concat(&[a, b], 1).unwrap();
        assert_eq!(t.shape(c), &[1, 3, 2, 2]);
        assert_eq!(&t.value(c).data()[..6], &[0.0, 1.0, 2.0, 3.0, 10.0, 11.0]);
        let tok = t.to_tokens(c).unwrap();
        assert_eq!(t.shape(tok), &[1, 4, 3]);
        assert_eq!(&t.value(tok).data()[..3], &[0.0, 10.0, 14.0]);
        let back = t.from_tokens(tok, 2, 2).unwrap();
        assert_eq!(t.value(back), t.value(c));

        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let p = random(&[2, 2, 3], &mut rng);
        let q = random(&[2, 1, 3], &mut rng);
        let err = check_gradients_multi(
            |t, v| {
                let c = t.concat(&[v[0], v[1], v[0]], 1)?;
                let c = t.square(c);
                Ok(t.sum(c))
            },
            &[p, q],
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-5);
    }
}
