//! Soft histogram assignment for Parzen-window density estimates.

use super::graph::Graph;
use super::{Real, TResult, Tensor, TensorError, Var};

/// Bin centers `k/(bins − 1)`, `k = 0..bins`, spanning `[0, 1]`.
pub fn bin_centers(bins: usize) -> Vec<f64> {
    (0..bins).map(|k| k as f64 / (bins - 1) as f64).collect()
}

impl Graph {
    /// Gaussian Parzen weights of every element of `x` against `bins` centers on
    /// `[0, 1]`, normalized to sum to 1 per element. Output `[numel(x), bins]`.
    pub fn parzen_weights(&self, x: Var, bins: usize, sigma: f64) -> TResult<Var> {
        if bins < 2 || !(sigma > 0.0) {
            return Err(TensorError::invalid(
                "parzen_weights",
                format!("need >= 2 bins and sigma > 0, got {bins}, {sigma}"),
            ));
        }
        let t = self.value(x);
        let n = t.numel();
        let centers = bin_centers(bins);
        let inv2s2 = 1.0 / (2.0 * sigma * sigma);
        let mut w = vec![0.0; n * bins];
        let mut scratch = vec![0.0f64; bins];
        for (row, &v) in w.chunks_exact_mut(bins).zip(t.data()) {
            let v = v as f64;
            let mut max = f64::NEG_INFINITY;
            for (s, c) in scratch.iter_mut().zip(&centers) {
                *s = -(v - c) * (v - c) * inv2s2;
                max = max.max(*s);
            }
            let mut total = 0.0;
            for s in scratch.iter_mut() {
                *s = (*s - max).exp();
                total += *s;
            }
            for (dst, s) in row.iter_mut().zip(&scratch) {
                *dst = (s / total) as Real;
            }
        }
        let xs = t.storage().clone();
        let ws = w.clone();
        Ok(self.record(
            Tensor::from_parts(vec![n, bins], w),
            &[x],
            Box::new(move |g, _| {
                let inv_s2 = 2.0 * inv2s2;
                let gx = xs
                    .iter()
                    .zip(ws.chunks_exact(bins).zip(g.chunks_exact(bins)))
                    .map(|(&v, (wr, gr))| {
                        // dW_b/dx = W_b (s_b − Σ_k W_k s_k), s_b = −(x − c_b)/σ²
                        let v = v as f64;
                        let slope = |c: f64| -(v - c) * inv_s2;
                        let mean: f64 = wr.iter().zip(&centers).map(|(&w, &c)| w as f64 * slope(c)).sum();
                        let acc: f64 = wr
                            .iter()
                            .zip(gr)
                            .zip(&centers)
                            .map(|((&w, &gb), &c)| gb as f64 * w as f64 * (slope(c) - mean))
                            .sum();
                        acc as Real
                    })
                    .collect();
                vec![Some(gx)]
            }),
        ))
    }
}
