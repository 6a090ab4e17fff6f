use super::graph::Graph;
use super::{Real, Tensor, TensorError, Var};

/// Outcome of comparing the analytic gradient with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max over coordinates of |analytic − numeric| / (|analytic| + |numeric| + 1e-8)
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
    /// relative error of every checked coordinate, in `coords` order
    pub rel_errors: Vec<f64>,
}

impl GradCheckReport {
    /// Number of coordinates whose relative error reaches `tol`.
    pub fn count_at_least(&self, tol: f64) -> usize {
        self.rel_errors.iter().filter(|&&e| !(e < tol)).count()
    }
}

fn eval_scalar<F, E>(f: &F, x: Tensor) -> Result<f64, E>
where
    F: Fn(&Graph, Var) -> Result<Var, E>,
    E: From<TensorError>,
{
    let g = Graph::new();
    let v = g.constant(x);
    let y = f(&g, v)?;
    let t = g.value(y);
    if t.numel() != 1 {
        return Err(TensorError::NonScalarRoot(t.shape().to_vec()).into());
    }
    Ok(t.item() as f64)
}

/// Weights of the sixth-order central difference:
/// `f' ≈ Σ_k w_k (f(x+kh) − f(x−kh)) / 60h`.
const STENCIL: [(Real, f64); 3] = [(1.0, 45.0), (2.0, -9.0), (3.0, 1.0)];

/// Checks the gradient of scalar `f` at `x` on every coordinate against a
/// sixth-order central difference with step `eps`.
pub fn grad_check<F, E>(f: F, x: &Tensor, eps: Real) -> Result<GradCheckReport, E>
where
    F: Fn(&Graph, Var) -> Result<Var, E>,
    E: From<TensorError>,
{
    let coords: Vec<usize> = (0..x.numel()).collect();
    grad_check_coords(f, x, eps, &coords)
}

/// Like [`grad_check`] but restricted to the listed flat coordinates.
pub fn grad_check_coords<F, E>(f: F, x: &Tensor, eps: Real, coords: &[usize]) -> Result<GradCheckReport, E>
where
    F: Fn(&Graph, Var) -> Result<Var, E>,
    E: From<TensorError>,
{
    let g = Graph::new();
    let v = g.variable(x.clone());
    let y = f(&g, v)?;
    g.backward(y).map_err(E::from)?;
    let analytic = g
        .grad(v)
        .unwrap_or_else(|| Tensor::zeros(x.shape()));
    drop(g);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        coords_checked: coords.len(),
        rel_errors: Vec::with_capacity(coords.len()),
    };
    for &i in coords {
        let at = |k: Real| -> Result<(f64, f64), E> {
            let mut t = x.clone();
            t.data_mut()[i] += k * eps;
            // the realized offset, after rounding to the storage precision
            let offset = t.data()[i] as f64 - x.data()[i] as f64;
            Ok((eval_scalar(&f, t)?, offset))
        };
        let (mut num, mut den) = (0.0, 0.0);
        for (k, w) in STENCIL {
            let ((fp, op), (fm, om)) = (at(k)?, at(-k)?);
            num += w * (fp - fm);
            den += w * (op - om);
        }
        let numeric = num / den;
        let a = analytic.data()[i] as f64;
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-8);
        let rel = if rel.is_finite() { rel } else { f64::INFINITY };
        report.rel_errors.push(rel);
        if rel >= report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = i;
            report.analytic = a;
            report.numeric = numeric;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let x = Tensor::scalar(3.0);
        let r = grad_check(|g, v| Ok::<_, TensorError>(g.sum(g.square(v))), &x, 1e-3).unwrap();
        assert!((r.analytic - 6.0).abs() < 1e-6);
        assert!(r.max_rel_error < 1e-3, "{r:?}");
    }

    #[test]
    fn softmax_then_sum_is_flat() {
        let x = Tensor::new(&[4], vec![0.3, -1.2, 2.0, 0.1]).unwrap();
        let r = grad_check(|g, v| Ok::<_, TensorError>(g.sum(g.softmax(v, 0)?)), &x, 1e-3).unwrap();
        // both sides are ~0; the 1e-8 floor keeps the ratio bounded
        assert!(r.analytic.abs() < 1e-6 && r.numeric.abs() < 1e-3);
    }
}
