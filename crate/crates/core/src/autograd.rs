//! Reverse-mode differentiation over a per-forward-pass tape.
//!
//! A [`Tape`] records every operation as a node holding its value, its
//! parent node ids and a backward closure. Nodes are appended in evaluation
//! order, so the node list is already topologically sorted; [`Tape::backward`]
//! walks it once in reverse and consumes the tape.

use crate::error::{arg_err, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Everything a backward closure may look at.
pub struct BackwardCtx<'a> {
    /// Gradient flowing into the node's output.
    pub grad: &'a Tensor,
    /// The node's forward value.
    pub output: &'a Tensor,
    /// Forward values of the parents, in declaration order.
    pub inputs: Vec<&'a Tensor>,
    /// Which parents need a gradient.
    pub needs: Vec<bool>,
}

pub type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Gradients are only reported for leaves created with
    /// `requires_grad` set.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, parents: vec![], backward: None, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an operation. The backward closure is dropped when no parent
    /// requires a gradient, so inference passes stay cheap.
    pub fn push(&mut self, value: Tensor, parents: &[Var], backward: BackwardFn) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            parents: parents.iter().map(|p| p.0).collect(),
            backward: requires_grad.then_some(backward),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Back-propagates from a single-element `loss`, consuming the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let seed_shape = self.nodes[loss.0].value.shape().to_vec();
        if self.nodes[loss.0].value.len() != 1 {
            return Err(arg_err!("backward needs a scalar output, got shape {seed_shape:?}"));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(&seed_shape, 1.0));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            let Some(backward) = &node.backward else { continue };
            let Some(grad) = grads[id].take() else { continue };
            let ctx = BackwardCtx {
                grad: &grad,
                output: &node.value,
                inputs: node.parents.iter().map(|&p| &self.nodes[p].value).collect(),
                needs: node.parents.iter().map(|&p| self.nodes[p].requires_grad).collect(),
            };
            let parent_grads = backward(&ctx);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, g) in node.parents.iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[p].requires_grad {
                    continue;
                }
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&g)?,
                    slot @ None => *slot = Some(g),
                }
            }
        }

        // Keep gradients for leaves only.
        for (id, node) in self.nodes.iter().enumerate() {
            if !node.parents.is_empty() || !node.requires_grad {
                grads[id] = None;
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradients of the leaves of a consumed tape.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Denominator floor for relative errors in [`check_gradients`].
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Compares tape gradients of a scalar function against central finite
/// differences and returns the largest elementwise relative error
/// `|tape - fd| / max(|tape|, |fd|, GRAD_CHECK_FLOOR)` over all inputs.
pub fn check_gradients_multi<F>(f: F, points: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if step <= 0.0 || !step.is_finite() {
        return Err(arg_err!("finite-difference step must be positive, got {step}"));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).len() != 1 {
        return Err(arg_err!("gradient check needs a scalar function, got shape {:?}", tape.shape(out)));
    }
    let grads = tape.backward(out)?;

    let eval = |pts: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = pts.iter().map(|p| tape.constant(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out).item()
    };

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = points.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(points[k].shape()));
        for i in 0..points[k].len() {
            let orig = points[k].data()[i];
            work[k].data_mut()[i] = orig + step;
            let plus = eval(&work)?;
            work[k].data_mut()[i] = orig - step;
            let minus = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.data()[i];
            let denom = a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

/// Single-input form of [`check_gradients_multi`].
pub fn check_gradients<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    check_gradients_multi(|tape, vars| f(tape, vars[0]), std::slice::from_ref(point), step)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        let x = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let mut tape = Tape::new();
        let v = tape.param(x.clone());
        let sq = tape.mul(v, v).unwrap();
        let s = tape.sum(sq);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(v).unwrap().data(), &[2.0, 4.0, 6.0]);

        let err = check_gradients(
            |t, x| {
                let sq = t.mul(x, x)?;
                Ok(t.sum(sq))
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let x = Tensor::new(&[2], vec![0.3, -1.0]).unwrap();
        let err = check_gradients(|t, _| Ok(t.constant(Tensor::scalar(4.0))), &x, 1e-4).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let x = Tensor::new(&[2], vec![0.3, -1.0]).unwrap();
        assert!(check_gradients(|t, x| t.silu(x), &x, 1e-4).is_err());
        assert!(check_gradients(|t, x| Ok(t.sum(x)), &x, 0.0).is_err());
    }

    #[test]
    fn shared_subexpressions_accumulate() {
        // y = a*a + a*b with a reused; compare against a tape where the
        // shared node is rebuilt for every use.
        let a0 = Tensor::new(&[2], vec![0.5, -1.5]).unwrap();
        let b0 = Tensor::new(&[2], vec![2.0, 0.25]).unwrap();

        let mut tape = Tape::new();
        let a = tape.param(a0.clone());
        let b = tape.param(b0.clone());
        let e = tape.silu(a).unwrap();
        let p = tape.mul(e, e).unwrap();
        let q = tape.mul(e, b).unwrap();
        let y = tape.add(p, q).unwrap();
        let y = tape.sum(y);
        let shared = tape.backward(y).unwrap();

        let mut tape = Tape::new();
        let a2 = tape.param(a0);
        let b2 = tape.param(b0);
        let e1 = tape.silu(a2).unwrap();
        let e2 = tape.silu(a2).unwrap();
        let e3 = tape.silu(a2).unwrap();
        let p = tape.mul(e1, e2).unwrap();
        let q = tape.mul(e3, b2).unwrap();
        let y = tape.add(p, q).unwrap();
        let y = tape.sum(y);
        let dup = tape.backward(y).unwrap();

        let d = shared.get(a).unwrap().max_abs_diff(dup.get(a2).unwrap()).unwrap();
        assert!(d < 1e-15);
        assert_eq!(shared.get(b).unwrap(), dup.get(b2).unwrap());
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::full(&[2], 1.0));
        let b = tape.param(Tensor::full(&[2], 3.0));
        let y = tape.mul(a, b).unwrap();
        let y = tape.sum(y);
        let g = tape.backward(y).unwrap();
        assert!(g.get(a).is_none());
        assert_eq!(g.get(b).unwrap().data(), &[1.0, 1.0]);
    }
}
