//! Matrix products.

use super::gemm::{gemm, Mat};
use super::graph::Graph;
use super::shape_ops::column_sums;
use super::{TResult, Tensor, TensorError, Var};

struct BatchDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    out_shape: Vec<usize>,
}

/// `b_transposed = false`: a[..,m,k]·b[..,k,n]; `true`: a[..,m,k]·b[..,n,k]ᵀ.
fn batch_dims(op: &'static str, a: &[usize], b: &[usize], b_transposed: bool) -> TResult<BatchDims> {
    if a.len() < 2 || a.len() != b.len() || a[..a.len() - 2] != b[..b.len() - 2] {
        return Err(TensorError::mismatch(op, a, b));
    }
    let r = a.len();
    let (m, k) = (a[r - 2], a[r - 1]);
    let (kb, n) = if b_transposed {
        (b[r - 1], b[r - 2])
    } else {
        (b[r - 2], b[r - 1])
    };
    if k != kb {
        return Err(TensorError::mismatch(op, a, b));
    }
    let mut out_shape = a[..r - 2].to_vec();
    out_shape.extend([m, n]);
    Ok(BatchDims {
        batch: a[..r - 2].iter().product(),
        m,
        k,
        n,
        out_shape,
    })
}

impl Graph {
    /// Batched matrix product `a[..,m,k] · b[..,k,n]`; leading extents must match.
    pub fn matmul(&self, a: Var, b: Var) -> TResult<Var> {
        self.batched_matmul("matmul", a, b, false)
    }

    /// Batched `a[..,m,k] · b[..,n,k]ᵀ`.
    pub fn matmul_nt(&self, a: Var, b: Var) -> TResult<Var> {
        self.batched_matmul("matmul_nt", a, b, true)
    }

    fn batched_matmul(&self, op: &'static str, a: Var, b: Var, bt: bool) -> TResult<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let BatchDims {
            batch,
            m,
            k,
            n,
            out_shape,
        } = batch_dims(op, ta.shape(), tb.shape(), bt)?;
        let (sa, sb, so) = (m * k, k * n, m * n);
        let mut out = vec![0.0; batch * so];
        for i in 0..batch {
            let ai = Mat::rows(&ta.data()[i * sa..(i + 1) * sa], k);
            let bdata = &tb.data()[i * sb..(i + 1) * sb];
            let bi = if bt { Mat::rows_t(bdata, k) } else { Mat::rows(bdata, n) };
            gemm(m, k, n, 1.0, ai, bi, 0.0, &mut out[i * so..(i + 1) * so], n, 1);
        }
        let (ka, kb) = (ta.storage().clone(), tb.storage().clone());
        Ok(self.record(
            Tensor::from_parts(out_shape, out),
            &[a, b],
            Box::new(move |g, needs| {
                let ga = needs[0].then(|| {
                    let mut ga = vec![0.0; batch * sa];
                    for i in 0..batch {
                        let gi = Mat::rows(&g[i * so..(i + 1) * so], n);
                        let bdata = &kb[i * sb..(i + 1) * sb];
                        // ga = g · bᵀ  (nn)   or   g · b  (nt)
                        let bm = if bt { Mat::rows(bdata, k) } else { Mat::rows_t(bdata, n) };
                        gemm(m, n, k, 1.0, gi, bm, 0.0, &mut ga[i * sa..(i + 1) * sa], k, 1);
                    }
                    ga
                });
                let gb = needs[1].then(|| {
                    let mut gb = vec![0.0; batch * sb];
                    for i in 0..batch {
                        let adata = &ka[i * sa..(i + 1) * sa];
                        let gdata = &g[i * so..(i + 1) * so];
                        let dst = &mut gb[i * sb..(i + 1) * sb];
                        if bt {
                            // gb (n×k) = gᵀ · a
                            gemm(n, m, k, 1.0, Mat::rows_t(gdata, n), Mat::rows(adata, k), 0.0, dst, k, 1);
                        } else {
                            // gb (k×n) = aᵀ · g
                            gemm(k, m, n, 1.0, Mat::rows_t(adata, k), Mat::rows(gdata, n), 0.0, dst, n, 1);
                        }
                    }
                    gb
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Affine map over the last axis: `x[.., in] · w[in, out] + b[out]`.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> TResult<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let xs = tx.shape();
        let fan_in = *xs.last().unwrap_or(&0);
        if tw.shape().len() != 2 || tw.shape()[0] != fan_in {
            return Err(TensorError::mismatch("linear", xs, tw.shape()));
        }
        let fan_out = tw.shape()[1];
        let bias = match b {
            Some(b) => {
                let tb = self.value(b);
                if tb.shape() != [fan_out] {
                    return Err(TensorError::mismatch("linear", tw.shape(), tb.shape()));
                }
                Some(tb)
            }
            None => None,
        };
        let rows = tx.numel() / fan_in;
        let mut out = vec![0.0; rows * fan_out];
        if let Some(tb) = &bias {
            for row in out.chunks_exact_mut(fan_out) {
                row.copy_from_slice(tb.data());
            }
        }
        let beta = if bias.is_some() { 1.0 } else { 0.0 };
        gemm(
            rows,
            fan_in,
            fan_out,
            1.0,
            Mat::rows(tx.data(), fan_in),
            Mat::rows(tw.data(), fan_out),
            beta,
            &mut out,
            fan_out,
            1,
        );
        let mut out_shape = xs.to_vec();
        *out_shape.last_mut().unwrap() = fan_out;
        let mut parents = vec![x, w];
        parents.extend(b);
        let (kx, kw) = (tx.storage().clone(), tw.storage().clone());
        Ok(self.record(
            Tensor::from_parts(out_shape, out),
            &parents,
            Box::new(move |g, needs| {
                let gx = needs[0].then(|| {
                    let mut gx = vec![0.0; rows * fan_in];
                    gemm(
                        rows,
                        fan_out,
                        fan_in,
                        1.0,
                        Mat::rows(g, fan_out),
                        Mat::rows_t(&kw, fan_out),
                        0.0,
                        &mut gx,
                        fan_in,
                        1,
                    );
                    gx
                });
                let gw = needs[1].then(|| {
                    let mut gw = vec![0.0; fan_in * fan_out];
                    gemm(
                        fan_in,
                        rows,
                        fan_out,
                        1.0,
                        Mat::rows_t(&kx, fan_in),
                        Mat::rows(g, fan_out),
                        0.0,
                        &mut gw,
                        fan_out,
                        1,
                    );
                    gw
                });
                let mut grads = vec![gx, gw];
                if needs.len() == 3 {
                    grads.push(needs[2].then(|| column_sums(g, fan_out)));
                }
                grads
            }),
        ))
    }
}
