//! Reverse-mode automatic differentiation over dense parameter vectors.
//!
//! The backward pass can be recorded onto the same [`Tape`] as the forward
//! pass, so gradients are themselves differentiable. Hessian-vector products
//! are computed reverse-over-reverse: record `grad f`, form `<grad f, v>` and
//! differentiate again.

mod mat;
mod tape;

pub use mat::Mat;
pub use tape::{Tape, Var};

use crate::error::{Error, Result};

/// Flat vector of model parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Self {
        ParamVector(values)
    }

    pub fn zeros(dim: usize) -> Self {
        ParamVector(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn to_row(&self) -> Mat {
        Mat::row(self.0.clone())
    }

    pub fn from_mat(m: &Mat) -> Self {
        ParamVector(m.data.clone())
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    /// `self + c * other`
    pub fn axpy(&self, c: f64, other: &ParamVector) -> ParamVector {
        assert_eq!(self.dim(), other.dim());
        ParamVector(self.0.iter().zip(&other.0).map(|(a, b)| a + c * b).collect())
    }

    pub fn scaled(&self, c: f64) -> ParamVector {
        ParamVector(self.0.iter().map(|a| a * c).collect())
    }

    pub(crate) fn ensure_finite(self, what: &'static str) -> Result<Self> {
        match self.0.iter().position(|v| !v.is_finite()) {
            None => Ok(self),
            Some(node) => Err(Error::NonFiniteValue { node, op: what }),
        }
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(v: Vec<f64>) -> Self {
        ParamVector(v)
    }
}

/// Builds a scalar function of the `1 x dim` parameter row on a tape.
pub trait Differentiable {
    fn build(&self, tape: &mut Tape, p: Var) -> Var;
}

impl<F> Differentiable for F
where
    F: Fn(&mut Tape, Var) -> Var,
{
    fn build(&self, tape: &mut Tape, p: Var) -> Var {
        self(tape, p)
    }
}

/// Scalar value of `f` at `p`, together with the record of its computation.
pub fn evaluate<F: Differentiable + ?Sized>(f: &F, p: &ParamVector) -> Result<(f64, Tape, Var, Var)> {
    let mut tape = Tape::new();
    let pv = tape.param(p.to_row());
    let out = f.build(&mut tape, pv);
    tape.check_finite()?;
    if tape.value(out).len() != 1 {
        return Err(Error::Shape(format!("function output is {:?}, expected scalar", tape.shape(out))));
    }
    Ok((tape.scalar(out), tape, pv, out))
}

pub fn gradient<F: Differentiable + ?Sized>(f: &F, p: &ParamVector) -> Result<ParamVector> {
    let (_, tape, pv, out) = evaluate(f, p)?;
    let g = tape.grad_values(out, &Mat::scalar(1.0), &[pv]).remove(0);
    ParamVector(g.data).ensure_finite("gradient")
}

/// `(d^2 f / dp^2) v`, by differentiating `<grad f(p), v>` with respect to `p`.
pub fn hvp<F: Differentiable + ?Sized>(f: &F, p: &ParamVector, v: &ParamVector) -> Result<ParamVector> {
    if v.dim() != p.dim() {
        return Err(Error::Shape(format!("hvp direction has dim {}, params {}", v.dim(), p.dim())));
    }
    let (_, mut tape, pv, out) = evaluate(f, p)?;
    hvp_on_tape(&mut tape, out, pv, v)
}

/// Hessian-vector product of an already-recorded scalar `out` with respect to `wrt`.
pub fn hvp_on_tape(tape: &mut Tape, out: Var, wrt: Var, v: &ParamVector) -> Result<ParamVector> {
    let g = tape.grad(out, &[wrt])[0];
    let dir = tape.constant(v.to_row());
    let gv = tape.mul(g, dir);
    let s = tape.sum(gv);
    tape.check_finite()?;
    let h = tape.grad_values(s, &Mat::scalar(1.0), &[wrt]).remove(0);
    ParamVector(h.data).ensure_finite("hvp")
}
