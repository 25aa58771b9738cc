//! State-space sequence machinery.
//!
//! Continuous state matrices are diagonal, so every discretised quantity is
//! elementwise per `(channel, state)` pair. Two evaluation routes exist for
//! time-invariant systems: the recurrence ([`lti_scan`]) and the causal
//! convolution with the unrolled kernel ([`ssm_kernel`], [`kernel_conv`]).

use std::rc::Rc;

use crate::autograd::{Tape, Var};
use crate::error::{dim_err, Error, Result};
use crate::ops::softplus;
use crate::tensor::Tensor;

/// Below this `|delta * a|` the input gain switches to a series about its
/// limit `delta`.
pub const ZOH_LIMIT: f64 = 1e-5;

/// `(exp(z) - 1) / a` for `z = delta * a`, i.e. the ZOH input gain per unit `b`.
#[inline]
pub fn zoh_gain(delta: f64, a: f64) -> f64 {
    let z = delta * a;
    if z.abs() < ZOH_LIMIT {
        delta * (1.0 + z * (0.5 + z / 6.0))
    } else {
        z.exp_m1() / a
    }
}

/// Derivative of [`zoh_gain`] with respect to `a`.
#[inline]
fn zoh_gain_da(delta: f64, a: f64) -> f64 {
    let z = delta * a;
    let g = if z.abs() < 1e-3 {
        0.5 + z * (1.0 / 3.0 + z * (1.0 / 8.0 + z / 30.0))
    } else {
        (z * z.exp() - z.exp_m1()) / (z * z)
    };
    delta * delta * g
}

/// Zero-order-hold discretisation of a diagonal continuous system:
/// `a_bar = exp(delta * a)`, `b_bar = (delta a)^-1 (exp(delta a) - 1) delta b`.
pub fn zoh(delta: f64, a: f64, b: f64) -> (f64, f64) {
    ((delta * a).exp(), zoh_gain(delta, a) * b)
}

/// Discrete parameters of a diagonal LTI state-space layer with `C` channels
/// and `N` states per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmParams {
    /// `[C, N]`
    pub a_bar: Tensor,
    /// `[C, N]`
    pub b_bar: Tensor,
    /// `[C, N]`
    pub c: Tensor,
    /// `[C]`
    pub d: Tensor,
    /// `[C]`
    pub delta: Tensor,
}

impl SsmParams {
    pub fn channels(&self) -> usize {
        self.a_bar.shape()[0]
    }

    pub fn state_dim(&self) -> usize {
        self.a_bar.shape()[1]
    }

    fn validate(&self) -> Result<(usize, usize)> {
        let &[c, n] = self.a_bar.shape() else {
            return Err(dim_err!("a_bar must be [C, N], got {:?}", self.a_bar.shape()));
        };
        if self.b_bar.shape() != [c, n] || self.c.shape() != [c, n] {
            return Err(dim_err!("b_bar/c must match a_bar shape [{c}, {n}]"));
        }
        if self.d.shape() != [c] || self.delta.shape() != [c] {
            return Err(dim_err!("d/delta must be [{c}]"));
        }
        Ok((c, n))
    }

    /// Discretises continuous `a`, `b` (`[C, N]`) with per-channel timescales.
    pub fn from_continuous(a: &Tensor, b: &Tensor, c: Tensor, d: Tensor, delta: Tensor) -> Result<Self> {
        let (a_bar, b_bar) = discretize_zoh(a, b, &delta)?;
        let p = Self { a_bar, b_bar, c, d, delta };
        p.validate()?;
        Ok(p)
    }
}

/// Elementwise ZOH over `[C, N]` tensors with `delta` of shape `[C]`.
pub fn discretize_zoh(a: &Tensor, b: &Tensor, delta: &Tensor) -> Result<(Tensor, Tensor)> {
    let &[c, n] = a.shape() else {
        return Err(dim_err!("continuous A must be [C, N], got {:?}", a.shape()));
    };
    if b.shape() != [c, n] || delta.shape() != [c] {
        return Err(dim_err!("discretize_zoh: B {:?} / delta {:?} vs A [{c}, {n}]", b.shape(), delta.shape()));
    }
    let mut a_bar = Tensor::zeros(&[c, n]);
    let mut b_bar = Tensor::zeros(&[c, n]);
    for ch in 0..c {
        let dt = delta.data()[ch];
        for s in 0..n {
            let i = ch * n + s;
            let (ab, bb) = zoh(dt, a.data()[i], b.data()[i]);
            a_bar.data_mut()[i] = ab;
            b_bar.data_mut()[i] = bb;
        }
    }
    Ok((a_bar, b_bar))
}

fn check_lti_inputs(x: &Tensor, a_bar: &Tensor, b_bar: &Tensor, c: &Tensor, d: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let (nb, ch, l) = x.dims3()?;
    let &[pc, n] = a_bar.shape() else {
        return Err(dim_err!("a_bar must be [C, N], got {:?}", a_bar.shape()));
    };
    if pc != ch || b_bar.shape() != [ch, n] || c.shape() != [ch, n] || d.shape() != [ch] {
        return Err(dim_err!("LTI scan parameters do not match {ch} input channels"));
    }
    Ok((nb, ch, l, n))
}

fn lti_forward(x: &Tensor, a_bar: &Tensor, b_bar: &Tensor, c: &Tensor, d: &Tensor) -> Result<Tensor> {
    let (nb, ch, l, n) = check_lti_inputs(x, a_bar, b_bar, c, d)?;
    let mut y = vec![0.0; x.len()];
    let mut h = vec![0.0; n];
    for b in 0..nb {
        for k in 0..ch {
            let (ab, bb, cc) = (&a_bar.data()[k * n..][..n], &b_bar.data()[k * n..][..n], &c.data()[k * n..][..n]);
            let dk = d.data()[k];
            h.iter_mut().for_each(|v| *v = 0.0);
            let base = (b * ch + k) * l;
            for t in 0..l {
                let xt = x.data()[base + t];
                let mut acc = 0.0;
                for s in 0..n {
                    h[s] = ab[s] * h[s] + bb[s] * xt;
                    acc += cc[s] * h[s];
                }
                y[base + t] = acc + dk * xt;
            }
        }
    }
    Tensor::new(x.shape(), y)
}

/// Recurrent evaluation `h_t = a_bar h_{t-1} + b_bar x_t`, `y_t = C h_t + D x_t`
/// with `h_0 = 0`, per channel, over `x` of shape `[B, C, L]`.
pub fn lti_scan(params: &SsmParams, x: &Tensor) -> Result<Tensor> {
    params.validate()?;
    lti_forward(x, &params.a_bar, &params.b_bar, &params.c, &params.d)
}

/// Largest `|h_t|` reached over the recurrence; used for stability checks.
pub fn lti_max_state(params: &SsmParams, x: &Tensor) -> Result<f64> {
    let (nb, ch, l, n) = check_lti_inputs(x, &params.a_bar, &params.b_bar, &params.c, &params.d)?;
    let mut worst = 0.0f64;
    for b in 0..nb {
        for k in 0..ch {
            for s in 0..n {
                let (ab, bb) = (params.a_bar.data()[k * n + s], params.b_bar.data()[k * n + s]);
                let mut h = 0.0;
                for t in 0..l {
                    h = ab * h + bb * x.data()[(b * ch + k) * l + t];
                    worst = worst.max(h.abs());
                }
            }
        }
    }
    Ok(worst)
}

/// Unrolled kernel `K[i] = sum_n C a_bar^i b_bar`, shape `[C, L]`.
pub fn ssm_kernel(params: &SsmParams, len: usize) -> Result<Tensor> {
    let (ch, n) = params.validate()?;
    if len == 0 {
        return Err(Error::Argument("kernel length must be at least 1".into()));
    }
    let mut k = Tensor::zeros(&[ch, len]);
    for c in 0..ch {
        for s in 0..n {
            let i = c * n + s;
            let (ab, bb, cc) = (params.a_bar.data()[i], params.b_bar.data()[i], params.c.data()[i]);
            let mut pow = 1.0;
            for t in 0..len {
                k.data_mut()[c * len + t] += cc * pow * bb;
                pow *= ab;
            }
        }
    }
    Ok(k)
}

/// Causal convolution of `x` (`[B, C, L]`) with the per-channel kernel plus
/// the `D x` feed-through.
pub fn kernel_conv(params: &SsmParams, x: &Tensor) -> Result<Tensor> {
    let (nb, ch, l) = x.dims3()?;
    if params.channels() != ch {
        return Err(dim_err!("kernel has {} channels, input {ch}", params.channels()));
    }
    if l == 0 {
        return Ok(x.clone());
    }
    let k = ssm_kernel(params, l)?;
    let mut y = vec![0.0; x.len()];
    for b in 0..nb {
        for c in 0..ch {
            let base = (b * ch + c) * l;
            let kc = &k.data()[c * l..(c + 1) * l];
            for t in 0..l {
                let mut acc = params.d.data()[c] * x.data()[base + t];
                for i in 0..=t {
                    acc += kc[i] * x.data()[base + t - i];
                }
                y[base + t] = acc;
            }
        }
    }
    Tensor::new(x.shape(), y)
}

impl Tape {
    /// Differentiable LTI scan over `x` of shape `[B, C, L]`.
    pub fn ssm_scan_lti(&mut self, x: Var, a_bar: Var, b_bar: Var, c: Var, d: Var) -> Result<Var> {
        let out = lti_forward(self.value(x), self.value(a_bar), self.value(b_bar), self.value(c), self.value(d))?;
        Ok(self.push(
            out,
            &[x, a_bar, b_bar, c, d],
            Box::new(|ctx| {
                let [x, ab, bb, cc, dd] = ctx.inputs[..] else { unreachable!() };
                let (nb, ch, l) = x.dims3().unwrap();
                let n = ab.shape()[1];
                let g = ctx.grad.data();
                let mut gx = vec![0.0; x.len()];
                let mut ga = vec![0.0; ch * n];
                let mut gb = vec![0.0; ch * n];
                let mut gc = vec![0.0; ch * n];
                let mut gd = vec![0.0; ch];
                let mut hs = vec![0.0; l + 1];
                for b in 0..nb {
                    for k in 0..ch {
                        let base = (b * ch + k) * l;
                        let xs = &x.data()[base..base + l];
                        let gs = &g[base..base + l];
                        for s in 0..n {
                            let i = k * n + s;
                            let (a, bv, cv) = (ab.data()[i], bb.data()[i], cc.data()[i]);
                            for t in 0..l {
                                hs[t + 1] = a * hs[t] + bv * xs[t];
                            }
                            let mut gh = 0.0;
                            for t in (0..l).rev() {
                                gh = gh * a + gs[t] * cv;
                                gc[i] += gs[t] * hs[t + 1];
                                ga[i] += gh * hs[t];
                                gb[i] += gh * xs[t];
                                gx[base + t] += gh * bv;
                            }
                        }
                        let dk = dd.data()[k];
                        for t in 0..l {
                            gx[base + t] += gs[t] * dk;
                            gd[k] += gs[t] * xs[t];
                        }
                    }
                }
                let mk = |need: bool, d: Vec<f64>, like: &Tensor| need.then(|| Tensor::new(like.shape(), d).unwrap());
                vec![
                    mk(ctx.needs[0], gx, x),
                    mk(ctx.needs[1], ga, ab),
                    mk(ctx.needs[2], gb, bb),
                    mk(ctx.needs[3], gc, cc),
                    mk(ctx.needs[4], gd, dd),
                ]
            }),
        ))
    }

    /// Fused input-dependent scan.
    ///
    /// Shapes: `u`, `delta` are `[B, L, C]`; `a` (continuous, diagonal) is
    /// `[C, N]`; `b`, `c` are `[B, L, N]` shared across channels; `d` is `[C]`.
    /// Each step discretises `(delta_t, a, b_t)` by ZOH before the update.
    pub fn selective_scan_raw(&mut self, u: Var, delta: Var, a: Var, b: Var, c: Var, d: Var) -> Result<Var> {
        let (nb, l, ch) = self.value(u).dims3()?;
        let &[ac, n] = self.shape(a) else {
            return Err(dim_err!("A must be [C, N], got {:?}", self.shape(a)));
        };
        if self.shape(delta) != [nb, l, ch]
            || ac != ch
            || self.shape(b) != [nb, l, n]
            || self.shape(c) != [nb, l, n]
            || self.shape(d) != [ch]
        {
            return Err(dim_err!("selective scan: inconsistent shapes"));
        }
        if !self.value(delta).is_finite() {
            return Err(Error::Numeric("non-finite timescale in selective scan".into()));
        }
        let geom = (nb, l, ch, n);
        let out = selective_forward(geom, self.value(u), self.value(delta), self.value(a), self.value(b), self.value(c), self.value(d));
        Ok(self.push(
            out,
            &[u, delta, a, b, c, d],
            Box::new(move |ctx| selective_backward(geom, ctx)),
        ))
    }
}

fn selective_forward(
    (nb, l, ch, n): (usize, usize, usize, usize),
    u: &Tensor,
    delta: &Tensor,
    a: &Tensor,
    b: &Tensor,
    c: &Tensor,
    d: &Tensor,
) -> Tensor {
    let (u, dt, a, bs, cs, d) = (u.data(), delta.data(), a.data(), b.data(), c.data(), d.data());
    let mut y = vec![0.0; nb * l * ch];
    let mut h = vec![0.0; ch * n];
    for bi in 0..nb {
        h.iter_mut().for_each(|v| *v = 0.0);
        for t in 0..l {
            let row = (bi * l + t) * ch;
            let bt = &bs[(bi * l + t) * n..][..n];
            let ct = &cs[(bi * l + t) * n..][..n];
            for k in 0..ch {
                let (ut, dk) = (u[row + k], dt[row + k]);
                let mut acc = d[k] * ut;
                for s in 0..n {
                    let ak = a[k * n + s];
                    let hv = &mut h[k * n + s];
                    *hv = (dk * ak).exp() * *hv + zoh_gain(dk, ak) * bt[s] * ut;
                    acc += ct[s] * *hv;
                }
                y[row + k] = acc;
            }
        }
    }
    Tensor::new(&[nb, l, ch], y).unwrap()
}

fn selective_backward(
    (nb, l, ch, n): (usize, usize, usize, usize),
    ctx: &crate::autograd::BackwardCtx<'_>,
) -> Vec<Option<Tensor>> {
    let [u, delta, a, b, c, d] = ctx.inputs[..] else { unreachable!() };
    let (ud, dtd, ad, bd, cd, dd) = (u.data(), delta.data(), a.data(), b.data(), c.data(), d.data());
    let g = ctx.grad.data();
    let mut gu = vec![0.0; ud.len()];
    let mut gdt = vec![0.0; dtd.len()];
    let mut ga = vec![0.0; ad.len()];
    let mut gb = vec![0.0; bd.len()];
    let mut gc = vec![0.0; cd.len()];
    let mut gd = vec![0.0; dd.len()];
    let mut hs = vec![0.0; l + 1];
    for bi in 0..nb {
        for k in 0..ch {
            for s in 0..n {
                let ak = ad[k * n + s];
                for t in 0..l {
                    let row = (bi * l + t) * ch + k;
                    let bt = bd[(bi * l + t) * n + s];
                    hs[t + 1] = (dtd[row] * ak).exp() * hs[t] + zoh_gain(dtd[row], ak) * bt * ud[row];
                }
                let mut gh = 0.0;
                for t in (0..l).rev() {
                    let row = (bi * l + t) * ch + k;
                    let bn = (bi * l + t) * n + s;
                    let (dk, ut, bt, ct) = (dtd[row], ud[row], bd[bn], cd[bn]);
                    gh += g[row] * ct;
                    gc[bn] += g[row] * hs[t + 1];
                    let abar = (dk * ak).exp();
                    let gain = zoh_gain(dk, ak);
                    let g_abar = gh * hs[t];
                    let g_gain = gh * bt * ut;
                    gb[bn] += gh * gain * ut;
                    gu[row] += gh * gain * bt;
                    gdt[row] += g_abar * ak * abar + g_gain * abar;
                    ga[k * n + s] += g_abar * dk * abar + g_gain * zoh_gain_da(dk, ak);
                    gh *= abar;
                }
            }
        }
    }
    for (row, &gr) in g.iter().enumerate() {
        let k = row % ch;
        gu[row] += gr * dd[k];
        gd[k] += gr * ud[row];
    }
    let grads = [gu, gdt, ga, gb, gc, gd];
    grads
        .into_iter()
        .zip(ctx.inputs.iter().zip(&ctx.needs))
        .map(|(gv, (t, &need))| need.then(|| Tensor::new(t.shape(), gv).unwrap()))
        .collect()
}

/// Tape handles describing how timescale, input and readout maps are produced.
#[derive(Clone, Copy, Debug)]
pub enum Selectivity {
    /// `delta_t = softplus(W_dt x_t + b_dt)`, `B_t = W_B x_t`, `C_t = W_C x_t`.
    Selective { dt_weight: Var, dt_bias: Var, b_weight: Var, c_weight: Var },
    /// Time-invariant: `delta = softplus(b_dt)`, `B`, `C` constant vectors `[N]`.
    Frozen { dt_bias: Var, b: Var, c: Var },
}

/// Parameters of one selective scan: continuous diagonal `a` (`[C, N]`),
/// feed-through `d` (`[C]`) and the projections.
#[derive(Clone, Copy, Debug)]
pub struct SelectiveParams {
    pub a: Var,
    pub d: Var,
    pub proj: Selectivity,
}

/// Repeats a vector `[K]` into `[B, L, K]`.
fn broadcast_rows(tape: &mut Tape, v: Var, nb: usize, l: usize) -> Result<Var> {
    let k = tape.shape(v)[0];
    let index: Rc<[usize]> = (0..nb * l * k).map(|i| i % k).collect();
    tape.gather(v, index, &[nb, l, k])
}

/// Selective scan over a token sequence `x` of shape `[B, L, C]`.
pub fn selective_scan(tape: &mut Tape, x: Var, params: &SelectiveParams) -> Result<Var> {
    let (nb, l, ch) = tape.value(x).dims3()?;
    let (delta, b, c) = match params.proj {
        Selectivity::Selective { dt_weight, dt_bias, b_weight, c_weight } => {
            let pre = tape.linear(x, dt_weight, Some(dt_bias))?;
            let delta = tape.softplus(pre);
            (delta, tape.linear(x, b_weight, None)?, tape.linear(x, c_weight, None)?)
        }
        Selectivity::Frozen { dt_bias, b, c } => {
            if tape.shape(dt_bias) != [ch] {
                return Err(dim_err!("frozen timescale must be [{ch}]"));
            }
            let dt = tape.softplus(dt_bias);
            (broadcast_rows(tape, dt, nb, l)?, broadcast_rows(tape, b, nb, l)?, broadcast_rows(tape, c, nb, l)?)
        }
    };
    tape.selective_scan_raw(x, delta, params.a, b, c, params.d)
}

/// One of the four raster orders used by the 2-D scan.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ScanDirection {
    RowForward,
    RowReverse,
    ColForward,
    ColReverse,
}

impl ScanDirection {
    pub const ALL: [ScanDirection; 4] =
        [Self::RowForward, Self::RowReverse, Self::ColForward, Self::ColReverse];

    /// `order[t]` is the row-major spatial index visited at step `t`.
    pub fn order(self, h: usize, w: usize) -> Vec<usize> {
        let row: Vec<usize> = (0..h * w).collect();
        let col: Vec<usize> = (0..w).flat_map(|x| (0..h).map(move |y| y * w + x)).collect();
        match self {
            Self::RowForward => row,
            Self::RowReverse => row.into_iter().rev().collect(),
            Self::ColForward => col,
            Self::ColReverse => col.into_iter().rev().collect(),
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// `[B, C, H, W]` -> `[B, C, H*W]` in the given order.
pub fn unfold_direction(x: &Tensor, dir: ScanDirection) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let order = dir.order(h, w);
    let l = h * w;
    let data = (0..b * c).flat_map(|p| order.iter().map(move |&i| p * l + i)).map(|i| x.data()[i]).collect();
    Tensor::new(&[b, c, l], data)
}

/// Inverse of [`unfold_direction`].
pub fn fold_direction(seq: &Tensor, dir: ScanDirection, h: usize, w: usize) -> Result<Tensor> {
    let (b, c, l) = seq.dims3()?;
    if l != h * w {
        return Err(dim_err!("fold: sequence length {l} is not {h}x{w}"));
    }
    let order = dir.order(h, w);
    let mut out = Tensor::zeros(&[b, c, h, w]);
    for p in 0..b * c {
        for (t, &i) in order.iter().enumerate() {
            out.data_mut()[p * l + i] = seq.data()[p * l + t];
        }
    }
    Ok(out)
}

impl Tape {
    /// Differentiable [`unfold_direction`].
    pub fn unfold_direction(&mut self, x: Var, dir: ScanDirection) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        let order = dir.order(h, w);
        let l = h * w;
        let index: Rc<[usize]> = (0..b * c).flat_map(|p| order.iter().map(move |&i| p * l + i)).collect();
        self.gather(x, index, &[b, c, l])
    }

    /// Differentiable [`fold_direction`].
    pub fn fold_direction(&mut self, seq: Var, dir: ScanDirection, h: usize, w: usize) -> Result<Var> {
        let (b, c, l) = self.value(seq).dims3()?;
        if l != h * w {
            return Err(dim_err!("fold: sequence length {l} is not {h}x{w}"));
        }
        let mut inv = vec![0; l];
        for (t, i) in dir.order(h, w).into_iter().enumerate() {
            inv[i] = t;
        }
        let index: Rc<[usize]> = (0..b * c).flat_map(|p| inv.iter().map(move |&t| p * l + t)).collect();
        self.gather(seq, index, &[b, c, h, w])
    }

    /// `[B, C, H, W]` -> token sequence `[B, L, C]` in scan order.
    pub fn unfold_tokens(&mut self, x: Var, dir: ScanDirection) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        let order = dir.order(h, w);
        let l = h * w;
        let mut index = Vec::with_capacity(b * l * c);
        for bi in 0..b {
            for &i in &order {
                for ci in 0..c {
                    index.push((bi * c + ci) * l + i);
                }
            }
        }
        self.gather(x, index.into(), &[b, l, c])
    }

    /// Inverse of [`Tape::unfold_tokens`].
    pub fn fold_tokens(&mut self, seq: Var, dir: ScanDirection, h: usize, w: usize) -> Result<Var> {
        let (b, l, c) = self.value(seq).dims3()?;
        if l != h * w {
            return Err(dim_err!("fold: sequence length {l} is not {h}x{w}"));
        }
        let mut inv = vec![0; l];
        for (t, i) in dir.order(h, w).into_iter().enumerate() {
            inv[i] = t;
        }
        let mut index = Vec::with_capacity(b * l * c);
        for bi in 0..b {
            for ci in 0..c {
                for &t in &inv {
                    index.push((bi * l + t) * c + ci);
                }
            }
        }
        self.gather(seq, index.into(), &[b, c, h, w])
    }
}

/// Four-direction scan of a feature map `[B, C, H, W]`.
///
/// `scan(tape, dir, tokens)` maps a `[B, L, C]` sequence in `dir` order to a
/// sequence of the same shape. Outputs are folded back and averaged, summed
/// in the fixed order of [`ScanDirection::ALL`].
pub fn scan_2d<F>(tape: &mut Tape, x: Var, mut scan: F) -> Result<Var>
where
    F: FnMut(&mut Tape, ScanDirection, Var) -> Result<Var>,
{
    let (_, _, h, w) = tape.value(x).dims4()?;
    let mut acc: Option<Var> = None;
    for dir in ScanDirection::ALL {
        let seq = tape.unfold_tokens(x, dir)?;
        let y = scan(tape, dir, seq)?;
        let y = tape.fold_tokens(y, dir, h, w)?;
        acc = Some(match acc {
            None => y,
            Some(a) => tape.add(a, y)?,
        });
    }
    let sum = acc.expect("four directions");
    Ok(tape.scale(sum, 1.0 / ScanDirection::ALL.len() as f64))
}

/// Deterministic initial timescale bias so that `softplus(bias)` is
/// log-spaced in `[1e-3, 1e-1]` across channels.
pub fn init_dt_bias(channels: usize) -> Tensor {
    let (lo, hi) = (1e-3f64.ln(), 1e-1f64.ln());
    Tensor::from_fn(&[channels], |k| {
        let frac = if channels > 1 { k as f64 / (channels - 1) as f64 } else { 0.5 };
        crate::ops::softplus_inv((lo + frac * (hi - lo)).exp())
    })
}

/// Initial `log(-A)` with `A = -(1..=N)` per state index.
pub fn init_a_log(channels: usize, state_dim: usize) -> Tensor {
    Tensor::from_fn(&[channels, state_dim], |i| ((i % state_dim) as f64 + 1.0).ln())
}

/// Timescale produced by a softplus bias.
pub fn timescale(bias: f64) -> f64 {
    softplus(bias)
}
