//! Training objectives: pixel L1 and the state-space semantic consistency loss.

use std::rc::Rc;

use crate::autograd::{Tape, Var};
use crate::error::{dim_err, Error, Result};
use crate::ssm::{fold_direction, lti_scan, unfold_direction, ScanDirection, SsmParams};
use crate::tensor::Tensor;

/// Fixed LTI parameters run over both prediction and target.
#[derive(Clone, Debug, PartialEq)]
pub struct LossSsmParams {
    pub ssm: SsmParams,
}

impl LossSsmParams {
    /// `N = 4` states per channel, `A = -1`, `delta = 0.1`, `B = C = 1`, `D = 0`.
    pub fn standard(channels: usize) -> Self {
        let n = 4;
        let ssm = SsmParams::from_continuous(
            &Tensor::full(&[channels, n], -1.0),
            &Tensor::full(&[channels, n], 1.0),
            Tensor::full(&[channels, n], 1.0),
            Tensor::zeros(&[channels]),
            Tensor::full(&[channels], 0.1),
        )
        .expect("consistent shapes");
        Self { ssm }
    }

    /// Wraps explicit discrete parameters; `|a_bar| < 1` is required.
    pub fn new(ssm: SsmParams) -> Result<Self> {
        if ssm.a_bar.data().iter().any(|a| a.is_nan() || a.abs() >= 1.0) {
            return Err(Error::Argument("loss SSM must satisfy |a_bar| < 1".into()));
        }
        Ok(Self { ssm })
    }

    pub fn channels(&self) -> usize {
        self.ssm.channels()
    }
}

/// How each direction's output sequence becomes a pixel map.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DirectionAggregation {
    /// The whole output sequence is folded back onto the grid.
    #[default]
    SequenceAssembly,
    /// Outputs are summed over time and the scalar is broadcast to every pixel.
    TimeSum,
}

fn check_finite(t: &Tensor, what: &str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{what} contains non-finite values")))
    }
}

fn time_sum_plain(y: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (b, c, l) = y.dims3()?;
    let mut out = Vec::with_capacity(b * c * l);
    for row in y.data().chunks(l) {
        let s: f64 = row.iter().sum();
        out.extend(std::iter::repeat_n(s, h * w));
    }
    Tensor::new(&[b, c, h, w], out)
}

fn time_sum_tape(tape: &mut Tape, y: Var, h: usize, w: usize) -> Result<Var> {
    let (b, c, l) = tape.value(y).dims3()?;
    let ones = tape.constant(Tensor::full(&[1, l], 1.0));
    let s = tape.linear(y, ones, None)?;
    let index: Rc<[usize]> = (0..b * c * h * w).map(|i| i / (h * w)).collect();
    tape.gather(s, index, &[b, c, h, w])
}

/// Direction-averaged state-space response of a target image, off the tape.
pub fn semantic_response(x: &Tensor, params: &LossSsmParams, agg: DirectionAggregation) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let mut acc: Option<Tensor> = None;
    for dir in ScanDirection::ALL {
        let y = lti_scan(&params.ssm, &unfold_direction(x, dir)?)?;
        let y = match agg {
            DirectionAggregation::SequenceAssembly => fold_direction(&y, dir, h, w)?,
            DirectionAggregation::TimeSum => time_sum_plain(&y, h, w)?,
        };
        acc = Some(match acc {
            None => y,
            Some(a) => a.zip_map(&y, |p, q| p + q)?,
        });
    }
    Ok(acc.expect("four directions").map(|v| v * 0.25))
}

fn semantic_response_tape(tape: &mut Tape, x: Var, params: &LossSsmParams, agg: DirectionAggregation) -> Result<Var> {
    let (_, _, h, w) = tape.value(x).dims4()?;
    let p = &params.ssm;
    let a_bar = tape.constant(p.a_bar.clone());
    let b_bar = tape.constant(p.b_bar.clone());
    let c = tape.constant(p.c.clone());
    let d = tape.constant(p.d.clone());
    let mut acc: Option<Var> = None;
    for dir in ScanDirection::ALL {
        let seq = tape.unfold_direction(x, dir)?;
        let y = tape.ssm_scan_lti(seq, a_bar, b_bar, c, d)?;
        let y = match agg {
            DirectionAggregation::SequenceAssembly => tape.fold_direction(y, dir, h, w)?,
            DirectionAggregation::TimeSum => time_sum_tape(tape, y, h, w)?,
        };
        acc = Some(match acc {
            None => y,
            Some(a) => tape.add(a, y)?,
        });
    }
    Ok(tape.scale(acc.expect("four directions"), 0.25))
}

/// `lambda * mean((Y_pred - Y_target)^2)` where `Y` is the direction-averaged
/// response of the shared loss SSM. Only `pred` receives gradients.
pub fn semantic_consistency_loss(
    tape: &mut Tape,
    pred: Var,
    target: &Tensor,
    lambda: f64,
    params: &LossSsmParams,
    agg: DirectionAggregation,
) -> Result<Var> {
    let ps = tape.value(pred);
    if ps.shape() != target.shape() {
        return Err(dim_err!("prediction {:?} vs target {:?}", ps.shape(), target.shape()));
    }
    let (_, c, _, _) = ps.dims4()?;
    if c != params.channels() {
        return Err(dim_err!("loss SSM has {} channels, images have {c}", params.channels()));
    }
    check_finite(ps, "prediction")?;
    check_finite(target, "target")?;
    let yt = semantic_response(target, params, agg)?;
    let yp = semantic_response_tape(tape, pred, params, agg)?;
    let yt = tape.constant(yt);
    let diff = tape.sub(yp, yt)?;
    let sq = tape.square(diff);
    let m = tape.mean(sq);
    Ok(tape.scale(m, lambda))
}

/// Mean absolute difference.
pub fn l1_pixel_loss(tape: &mut Tape, pred: Var, target: &Tensor) -> Result<Var> {
    if tape.shape(pred) != target.shape() {
        return Err(dim_err!("prediction {:?} vs target {:?}", tape.shape(pred), target.shape()));
    }
    let t = tape.constant(target.clone());
    let d = tape.sub(pred, t)?;
    let a = tape.abs(d);
    Ok(tape.mean(a))
}

#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub l1: Var,
    pub ssm: Var,
    pub total: Var,
}

/// `l1 + lambda * semantic`.
pub fn total_loss(
    tape: &mut Tape,
    pred: Var,
    target: &Tensor,
    lambda: f64,
    params: &LossSsmParams,
    agg: DirectionAggregation,
) -> Result<LossTerms> {
    let l1 = l1_pixel_loss(tape, pred, target)?;
    let ssm = semantic_consistency_loss(tape, pred, target, lambda, params, agg)?;
    let total = tape.add(l1, ssm)?;
    Ok(LossTerms { l1, ssm, total })
}
