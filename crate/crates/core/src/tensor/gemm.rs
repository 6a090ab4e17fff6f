//! Thin safe wrapper over the `matrixmultiply` kernels.

use super::Real;

/// Strided view of a matrix inside a slice.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    pub data: &'a [Real],
    pub rs: usize,
    pub cs: usize,
}

impl<'a> Mat<'a> {
    /// Contiguous row-major matrix with `cols` columns.
    pub fn rows(data: &'a [Real], cols: usize) -> Self {
        Mat {
            data,
            rs: cols,
            cs: 1,
        }
    }

    /// Transposed view of a contiguous row-major matrix with `cols` columns.
    pub fn rows_t(data: &'a [Real], cols: usize) -> Self {
        Mat {
            data,
            rs: 1,
            cs: cols,
        }
    }
}

fn span(rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs + 1
    }
}

/// `c = alpha * a(m×k) · b(k×n) + beta * c` with `c` given by its strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: Real,
    a: Mat<'_>,
    b: Mat<'_>,
    beta: Real,
    c: &mut [Real],
    rsc: usize,
    csc: usize,
) {
    assert!(span(m, k, a.rs, a.cs) <= a.data.len(), "gemm: lhs out of bounds");
    assert!(span(k, n, b.rs, b.cs) <= b.data.len(), "gemm: rhs out of bounds");
    assert!(span(m, n, rsc, csc) <= c.len(), "gemm: output out of bounds");
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the asserts above bound every element the kernel touches.
    unsafe {
        #[cfg(not(feature = "f64"))]
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
        #[cfg(feature = "f64")]
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}
