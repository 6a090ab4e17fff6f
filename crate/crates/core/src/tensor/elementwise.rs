//! Elementwise arithmetic and activations.

use std::sync::Arc;

use super::graph::Graph;
use super::{Real, TResult, Tensor, TensorError, Var};

#[derive(Clone, Copy)]
enum Layout {
    Same,
    LeftScalar,
    RightScalar,
}

fn broadcast_layout(op: &'static str, a: &Tensor, b: &Tensor) -> TResult<(Layout, Vec<usize>)> {
    if a.shape() == b.shape() {
        Ok((Layout::Same, a.shape().to_vec()))
    } else if a.numel() == 1 {
        Ok((Layout::LeftScalar, b.shape().to_vec()))
    } else if b.numel() == 1 {
        Ok((Layout::RightScalar, a.shape().to_vec()))
    } else {
        Err(TensorError::mismatch(op, a.shape(), b.shape()))
    }
}

#[inline]
fn pick(data: &[Real], scalar: bool, i: usize) -> Real {
    if scalar {
        data[0]
    } else {
        data[i]
    }
}

/// Reduces a per-element gradient to a scalar when the operand was broadcast.
fn reduce_if_scalar(g: Vec<Real>, scalar: bool) -> Vec<Real> {
    if scalar {
        vec![g.iter().sum()]
    } else {
        g
    }
}

pub(crate) const GELU_C: Real = 0.797_884_6; // sqrt(2/pi)
const GELU_K: Real = 0.044_715;

#[inline]
pub(crate) fn gelu(x: Real) -> Real {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: Real) -> Real {
    let inner = GELU_C * (x + GELU_K * x * x * x);
    let t = inner.tanh();
    let dinner = GELU_C * (1.0 + 3.0 * GELU_K * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

#[inline]
pub(crate) fn sigmoid(x: Real) -> Real {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    /// Binary op with scalar broadcast; `partials(a, b)` returns (∂f/∂a, ∂f/∂b).
    fn binary(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: fn(Real, Real) -> Real,
        partials: fn(Real, Real) -> (Real, Real),
    ) -> TResult<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (layout, shape) = broadcast_layout(op, &ta, &tb)?;
        let (sa, sb) = match layout {
            Layout::Same => (false, false),
            Layout::LeftScalar => (true, false),
            Layout::RightScalar => (false, true),
        };
        let n: usize = shape.iter().product();
        let (da, db) = (ta.data(), tb.data());
        let out: Vec<Real> = (0..n).map(|i| f(pick(da, sa, i), pick(db, sb, i))).collect();
        let (ka, kb) = (ta.storage().clone(), tb.storage().clone());
        Ok(self.record(
            Tensor::from_parts(shape, out),
            &[a, b],
            Box::new(move |g, needs| {
                let mut ga = needs[0].then(|| vec![0.0; g.len()]);
                let mut gb = needs[1].then(|| vec![0.0; g.len()]);
                for (i, &gi) in g.iter().enumerate() {
                    let (pa, pb) = partials(pick(&ka, sa, i), pick(&kb, sb, i));
                    if let Some(ga) = ga.as_mut() {
                        ga[i] = gi * pa;
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb[i] = gi * pb;
                    }
                }
                vec![
                    ga.map(|v| reduce_if_scalar(v, sa)),
                    gb.map(|v| reduce_if_scalar(v, sb)),
                ]
            }),
        ))
    }

    pub fn add(&self, a: Var, b: Var) -> TResult<Var> {
        self.binary("add", a, b, |x, y| x + y, |_, _| (1.0, 1.0))
    }

    pub fn sub(&self, a: Var, b: Var) -> TResult<Var> {
        self.binary("sub", a, b, |x, y| x - y, |_, _| (1.0, -1.0))
    }

    pub fn mul(&self, a: Var, b: Var) -> TResult<Var> {
        self.binary("mul", a, b, |x, y| x * y, |x, y| (y, x))
    }

    pub fn div(&self, a: Var, b: Var) -> TResult<Var> {
        self.binary("div", a, b, |x, y| x / y, |x, y| (1.0 / y, -x / (y * y)))
    }

    /// Unary op; `df(x, y)` is the derivative given input `x` and output `y`.
    fn unary(&self, x: Var, f: impl Fn(Real) -> Real, df: impl Fn(Real, Real) -> Real + 'static) -> Var {
        let tx = self.value(x);
        let out: Vec<Real> = tx.data().iter().map(|&v| f(v)).collect();
        let out = Arc::new(out);
        let (kx, ky) = (tx.storage().clone(), out.clone());
        self.record(
            Tensor::with_storage(tx.shape().to_vec(), out),
            &[x],
            Box::new(move |g, _| {
                let gx = g
                    .iter()
                    .zip(kx.iter().zip(ky.iter()))
                    .map(|(&gi, (&xi, &yi))| gi * df(xi, yi))
                    .collect();
                vec![Some(gx)]
            }),
        )
    }

    pub fn add_scalar(&self, x: Var, c: Real) -> Var {
        self.unary(x, move |v| v + c, |_, _| 1.0)
    }

    pub fn scale(&self, x: Var, c: Real) -> Var {
        self.unary(x, move |v| v * c, move |_, _| c)
    }

    pub fn neg(&self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn square(&self, x: Var) -> Var {
        self.unary(x, |v| v * v, |v, _| 2.0 * v)
    }

    pub fn exp(&self, x: Var) -> Var {
        self.unary(x, Real::exp, |_, y| y)
    }

    /// Natural logarithm; fails on non-positive input.
    pub fn log(&self, x: Var) -> TResult<Var> {
        let tx = self.value(x);
        if let Some(bad) = tx.data().iter().find(|&&v| !(v > 0.0)) {
            return Err(TensorError::Domain {
                op: "log",
                msg: format!("non-positive value {bad}"),
            });
        }
        Ok(self.unary(x, Real::ln, |v, _| 1.0 / v))
    }

    /// Square root; fails on negative input.
    pub fn sqrt(&self, x: Var) -> TResult<Var> {
        let tx = self.value(x);
        if let Some(bad) = tx.data().iter().find(|&&v| !(v >= 0.0)) {
            return Err(TensorError::Domain {
                op: "sqrt",
                msg: format!("negative value {bad}"),
            });
        }
        Ok(self.unary(x, Real::sqrt, |_, y| 0.5 / y))
    }

    /// `x^p`; negative bases are rejected unless `p` is an integer.
    pub fn powf(&self, x: Var, p: Real) -> TResult<Var> {
        if p.fract() != 0.0 {
            let tx = self.value(x);
            if let Some(bad) = tx.data().iter().find(|&&v| v < 0.0) {
                return Err(TensorError::Domain {
                    op: "powf",
                    msg: format!("negative base {bad} with fractional exponent {p}"),
                });
            }
        }
        Ok(self.unary(x, move |v| v.powf(p), move |v, _| p * v.powf(p - 1.0)))
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.unary(x, sigmoid, |_, y| y * (1.0 - y))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self, x: Var) -> Var {
        self.unary(x, gelu, |v, _| gelu_grad(v))
    }

    pub fn relu(&self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), |v, _| if v > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn leaky_relu(&self, x: Var, slope: Real) -> Var {
        self.unary(
            x,
            move |v| if v > 0.0 { v } else { slope * v },
            move |v, _| if v > 0.0 { 1.0 } else { slope },
        )
    }
}
