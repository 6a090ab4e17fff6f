//! Softmax, layer normalization, 3D convolution and pixel shuffle.

use std::sync::Arc;

use super::gemm::{gemm, Mat};
use super::graph::Graph;
use super::{Real, TResult, Tensor, TensorError, Var};

/// Upper bound on im2col buffer size (elements) per slab.
const COL_BUDGET: usize = 1 << 22;

pub const LAYER_NORM_EPS: Real = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv3dGeometry {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: [usize; 3],
    pub stride: usize,
    pub padding: usize,
    /// Input spatial extents `[Z, Y, X]`.
    pub input: [usize; 3],
    pub output: [usize; 3],
}

impl Conv3dGeometry {
    fn new(x: &[usize], w: &[usize], stride: usize, padding: usize) -> TResult<Self> {
        if x.len() != 4 || w.len() != 5 || w[1] != x[0] {
            return Err(TensorError::mismatch("conv3d", x, w));
        }
        if stride == 0 {
            return Err(TensorError::invalid("conv3d", "stride must be positive"));
        }
        let input = [x[1], x[2], x[3]];
        let kernel = [w[2], w[3], w[4]];
        let mut output = [0; 3];
        for d in 0..3 {
            let padded = input[d] + 2 * padding;
            if kernel[d] > padded {
                return Err(TensorError::invalid(
                    "conv3d",
                    format!("kernel {:?} larger than padded input {:?}", kernel, input.map(|v| v + 2 * padding)),
                ));
            }
            output[d] = (padded - kernel[d]) / stride + 1;
        }
        Ok(Conv3dGeometry {
            c_in: x[0],
            c_out: w[0],
            kernel,
            stride,
            padding,
            input,
            output,
        })
    }

    fn col_rows(&self) -> usize {
        self.c_in * self.kernel.iter().product::<usize>()
    }

    fn plane(&self) -> usize {
        self.output[1] * self.output[2]
    }

    fn out_volume(&self) -> usize {
        self.output.iter().product()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == 1 && self.padding == 0
    }

    fn slab_depth(&self) -> usize {
        let per_slice = self.col_rows() * self.plane();
        (COL_BUDGET / per_slice.max(1)).clamp(1, self.output[0])
    }

    /// Valid output x-range and the matching input start for kernel offset `dx`.
    fn x_span(&self, dx: usize) -> (usize, usize) {
        let (xi, xo, s, p) = (self.input[2], self.output[2], self.stride, self.padding);
        // need 0 <= xo*s + dx - p < xi
        let lo = if p > dx { (p - dx).div_ceil(s) } else { 0 };
        let hi = if xi + p > dx { ((xi + p - dx - 1) / s + 1).min(xo) } else { 0 };
        (lo, hi.max(lo))
    }

    /// Fills `col` (`[col_rows, (z1-z0)*plane]`) for output slices `z0..z1`.
    fn im2col(&self, x: &[Real], z0: usize, z1: usize, col: &mut [Real]) {
        let [kz, ky, kx] = self.kernel;
        let [zi_n, yi_n, xi_n] = self.input;
        let [_, yo_n, xo_n] = self.output;
        let (s, p) = (self.stride as isize, self.padding as isize);
        let ns = (z1 - z0) * self.plane();
        col[..self.col_rows() * ns].fill(0.0);
        let mut row = 0;
        for ci in 0..self.c_in {
            let xc = &x[ci * zi_n * yi_n * xi_n..(ci + 1) * zi_n * yi_n * xi_n];
            for dz in 0..kz {
                for dy in 0..ky {
                    for dx in 0..kx {
                        let (xlo, xhi) = self.x_span(dx);
                        let dst = &mut col[row * ns..(row + 1) * ns];
                        for zo in z0..z1 {
                            let zi = zo as isize * s + dz as isize - p;
                            if zi < 0 || zi >= zi_n as isize {
                                continue;
                            }
                            for yo in 0..yo_n {
                                let yi = yo as isize * s + dy as isize - p;
                                if yi < 0 || yi >= yi_n as isize {
                                    continue;
                                }
                                let src_row = (zi as usize * yi_n + yi as usize) * xi_n;
                                let dst_row = ((zo - z0) * yo_n + yo) * xo_n;
                                if s == 1 {
                                    let xs = (xlo as isize + dx as isize - p) as usize;
                                    let len = xhi - xlo;
                                    dst[dst_row + xlo..dst_row + xhi]
                                        .copy_from_slice(&xc[src_row + xs..src_row + xs + len]);
                                } else {
                                    for xo in xlo..xhi {
                                        let xi = (xo as isize * s + dx as isize - p) as usize;
                                        dst[dst_row + xo] = xc[src_row + xi];
                                    }
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }

    /// Adjoint of [`Self::im2col`]: accumulates `col` into `gx`.
    fn col2im(&self, col: &[Real], z0: usize, z1: usize, gx: &mut [Real]) {
        let [kz, ky, kx] = self.kernel;
        let [zi_n, yi_n, xi_n] = self.input;
        let [_, yo_n, xo_n] = self.output;
        let (s, p) = (self.stride as isize, self.padding as isize);
        let ns = (z1 - z0) * self.plane();
        let mut row = 0;
        for ci in 0..self.c_in {
            let gc = &mut gx[ci * zi_n * yi_n * xi_n..(ci + 1) * zi_n * yi_n * xi_n];
            for dz in 0..kz {
                for dy in 0..ky {
                    for dx in 0..kx {
                        let (xlo, xhi) = self.x_span(dx);
                        let src = &col[row * ns..(row + 1) * ns];
                        for zo in z0..z1 {
                            let zi = zo as isize * s + dz as isize - p;
                            if zi < 0 || zi >= zi_n as isize {
                                continue;
                            }
                            for yo in 0..yo_n {
                                let yi = yo as isize * s + dy as isize - p;
                                if yi < 0 || yi >= yi_n as isize {
                                    continue;
                                }
                                let dst_row = (zi as usize * yi_n + yi as usize) * xi_n;
                                let src_row = ((zo - z0) * yo_n + yo) * xo_n;
                                for xo in xlo..xhi {
                                    let xi = (xo as isize * s + dx as isize - p) as usize;
                                    gc[dst_row + xi] += src[src_row + xo];
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }
}

fn conv_forward(geo: &Conv3dGeometry, x: &[Real], w: &[Real], bias: Option<&[Real]>) -> Vec<Real> {
    let vol = geo.out_volume();
    let mut out = vec![0.0; geo.c_out * vol];
    let k = geo.col_rows();
    if geo.is_pointwise() {
        gemm(geo.c_out, k, vol, 1.0, Mat::rows(w, k), Mat::rows(x, vol), 0.0, &mut out, vol, 1);
    } else {
        let plane = geo.plane();
        let depth = geo.slab_depth();
        let mut col = vec![0.0; k * depth * plane];
        let mut z0 = 0;
        while z0 < geo.output[0] {
            let z1 = (z0 + depth).min(geo.output[0]);
            let ns = (z1 - z0) * plane;
            geo.im2col(x, z0, z1, &mut col);
            gemm(
                geo.c_out,
                k,
                ns,
                1.0,
                Mat::rows(w, k),
                Mat::rows(&col[..k * ns], ns),
                0.0,
                &mut out[z0 * plane..],
                vol,
                1,
            );
            z0 = z1;
        }
    }
    if let Some(b) = bias {
        for (chunk, &bc) in out.chunks_exact_mut(vol).zip(b) {
            chunk.iter_mut().for_each(|v| *v += bc);
        }
    }
    out
}

/// Returns (grad_x, grad_w) as requested.
fn conv_backward(
    geo: &Conv3dGeometry,
    x: &[Real],
    w: &[Real],
    g: &[Real],
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<Real>>, Option<Vec<Real>>) {
    let vol = geo.out_volume();
    let k = geo.col_rows();
    let in_len = geo.c_in * geo.input.iter().product::<usize>();
    let mut gx = need_x.then(|| vec![0.0; in_len]);
    let mut gw = need_w.then(|| vec![0.0; geo.c_out * k]);
    if geo.is_pointwise() {
        if let Some(gw) = gw.as_mut() {
            gemm(geo.c_out, vol, k, 1.0, Mat::rows(g, vol), Mat::rows_t(x, vol), 0.0, gw, k, 1);
        }
        if let Some(gx) = gx.as_mut() {
            gemm(k, geo.c_out, vol, 1.0, Mat::rows_t(w, k), Mat::rows(g, vol), 0.0, gx, vol, 1);
        }
        return (gx, gw);
    }
    let plane = geo.plane();
    let depth = geo.slab_depth();
    let mut col = vec![0.0; k * depth * plane];
    let mut z0 = 0;
    while z0 < geo.output[0] {
        let z1 = (z0 + depth).min(geo.output[0]);
        let ns = (z1 - z0) * plane;
        let g_slab = Mat {
            data: &g[z0 * plane..],
            rs: vol,
            cs: 1,
        };
        if let Some(gw) = gw.as_mut() {
            geo.im2col(x, z0, z1, &mut col);
            gemm(geo.c_out, ns, k, 1.0, g_slab, Mat::rows_t(&col[..k * ns], ns), 1.0, gw, k, 1);
        }
        if let Some(gx) = gx.as_mut() {
            gemm(k, geo.c_out, ns, 1.0, Mat::rows_t(w, k), g_slab, 0.0, &mut col[..k * ns], ns, 1);
            geo.col2im(&col[..k * ns], z0, z1, gx);
        }
        z0 = z1;
    }
    (gx, gw)
}

impl Graph {
    /// Softmax along `axis`, stabilized by max subtraction.
    pub fn softmax(&self, x: Var, axis: usize) -> TResult<Var> {
        let t = self.value(x);
        let shape = t.shape().to_vec();
        if axis >= shape.len() {
            return Err(TensorError::invalid("softmax", format!("axis {axis} of {shape:?}")));
        }
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let mut out = vec![0.0; t.numel()];
        let data = t.data();
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * len + a) * inner + i;
                let max = (0..len).map(|a| data[at(a)]).fold(Real::NEG_INFINITY, Real::max);
                let mut total = 0.0;
                for a in 0..len {
                    let e = (data[at(a)] - max).exp();
                    out[at(a)] = e;
                    total += e;
                }
                let inv = 1.0 / total;
                for a in 0..len {
                    out[at(a)] *= inv;
                }
            }
        }
        let y = Arc::new(out);
        let ky = y.clone();
        Ok(self.record(
            Tensor::with_storage(shape, y),
            &[x],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |a: usize| (o * len + a) * inner + i;
                        let dot: Real = (0..len).map(|a| g[at(a)] * ky[at(a)]).sum();
                        for a in 0..len {
                            gx[at(a)] = ky[at(a)] * (g[at(a)] - dot);
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Normalizes over the last axis, then applies optional per-channel gain and bias.
    pub fn layer_norm(&self, x: Var, gain: Option<Var>, bias: Option<Var>) -> TResult<Var> {
        let tx = self.value(x);
        let c = *tx.shape().last().unwrap_or(&0);
        for p in [gain, bias].into_iter().flatten() {
            let s = self.shape(p);
            if s != [c] {
                return Err(TensorError::mismatch("layer_norm", tx.shape(), &s));
            }
        }
        let rows = tx.numel() / c;
        let mut xhat = vec![0.0; tx.numel()];
        let mut inv_std = vec![0.0; rows];
        for (r, (src, dst)) in tx.data().chunks_exact(c).zip(xhat.chunks_exact_mut(c)).enumerate() {
            let mean = src.iter().map(|&v| v as f64).sum::<f64>() / c as f64;
            let var = src.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS as f64).sqrt();
            inv_std[r] = inv as Real;
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = ((s as f64 - mean) * inv) as Real;
            }
        }
        let gain_t = gain.map(|v| self.value(v));
        let bias_t = bias.map(|v| self.value(v));
        let mut out = xhat.clone();
        for row in out.chunks_exact_mut(c) {
            if let Some(gt) = &gain_t {
                row.iter_mut().zip(gt.data()).for_each(|(v, g)| *v *= g);
            }
            if let Some(bt) = &bias_t {
                row.iter_mut().zip(bt.data()).for_each(|(v, b)| *v += b);
            }
        }
        let mut parents = vec![x];
        parents.extend(gain);
        parents.extend(bias);
        let has_gain = gain.is_some();
        let has_bias = bias.is_some();
        let gain_data = gain_t.map(|t| t.storage().clone());
        Ok(self.record(
            Tensor::from_parts(tx.shape().to_vec(), out),
            &parents,
            Box::new(move |g, needs| {
                let mut grads = Vec::with_capacity(3);
                let gx = needs[0].then(|| {
                    let mut gx = vec![0.0; g.len()];
                    let mut gh = vec![0.0; c];
                    for r in 0..rows {
                        let gr = &g[r * c..(r + 1) * c];
                        let hr = &xhat[r * c..(r + 1) * c];
                        for j in 0..c {
                            gh[j] = gr[j] * gain_data.as_ref().map_or(1.0, |gd| gd[j]);
                        }
                        let m1 = gh.iter().map(|&v| v as f64).sum::<f64>() / c as f64;
                        let m2 = gh.iter().zip(hr).map(|(&a, &b)| (a * b) as f64).sum::<f64>() / c as f64;
                        for j in 0..c {
                            gx[r * c + j] =
                                inv_std[r] * (gh[j] - m1 as Real - hr[j] * m2 as Real);
                        }
                    }
                    gx
                });
                grads.push(gx);
                let mut next = 1;
                if has_gain {
                    grads.push(needs[next].then(|| {
                        let mut acc = vec![0f64; c];
                        for (gr, hr) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                            for j in 0..c {
                                acc[j] += (gr[j] * hr[j]) as f64;
                            }
                        }
                        acc.into_iter().map(|v| v as Real).collect()
                    }));
                    next += 1;
                }
                if has_bias {
                    grads.push(needs[next].then(|| super::shape_ops::column_sums(g, c)));
                }
                grads
            }),
        ))
    }

    /// 3D convolution of `x[Cin, Z, Y, X]` with `w[Cout, Cin, kz, ky, kx]`, isotropic
    /// stride and zero padding. Output extents are `floor((in + 2p - k)/s) + 1`.
    pub fn conv3d(&self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> TResult<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let geo = Conv3dGeometry::new(tx.shape(), tw.shape(), stride, padding)?;
        let tb = b.map(|b| self.value(b));
        if let Some(tb) = &tb {
            if tb.shape() != [geo.c_out] {
                return Err(TensorError::mismatch("conv3d", tw.shape(), tb.shape()));
            }
        }
        let out = conv_forward(&geo, tx.data(), tw.data(), tb.as_ref().map(|t| t.data()));
        let mut parents = vec![x, w];
        parents.extend(b);
        let (kx, kw) = (tx.storage().clone(), tw.storage().clone());
        let shape = vec![geo.c_out, geo.output[0], geo.output[1], geo.output[2]];
        Ok(self.record(
            Tensor::from_parts(shape, out),
            &parents,
            Box::new(move |g, needs| {
                let (gx, gw) = conv_backward(&geo, &kx, &kw, g, needs[0], needs[1]);
                let mut grads = vec![gx, gw];
                if needs.len() == 3 {
                    let vol = geo.out_volume();
                    grads.push(needs[2].then(|| {
                        g.chunks_exact(vol).map(super::shape_ops::stable_sum).collect()
                    }));
                }
                grads
            }),
        ))
    }

    /// Rearranges `x[C·l³, Z, Y, X]` into `[C, lZ, lY, lX]`. Output voxel
    /// `(z·l+dz, y·l+dy, x·l+dx)` of channel `c` reads input channel
    /// `c·l³ + (dx·l + dy)·l + dz`.
    pub fn pixel_shuffle(&self, x: Var, l: usize) -> TResult<Var> {
        let shape = self.shape(x);
        let l3 = l * l * l;
        if shape.len() != 4 || l == 0 || shape[0] % l3 != 0 {
            return Err(TensorError::invalid(
                "pixel_shuffle",
                format!("shape {shape:?} is not [C*{l3}, Z, Y, X]"),
            ));
        }
        let (c, z, y, xx) = (shape[0] / l3, shape[1], shape[2], shape[3]);
        let out_shape = [c, z * l, y * l, xx * l];
        let mut index = Vec::with_capacity(c * l3 * z * y * xx);
        for co in 0..c {
            for oz in 0..z * l {
                for oy in 0..y * l {
                    for ox in 0..xx * l {
                        let (dz, dy, dx) = (oz % l, oy % l, ox % l);
                        let ci = co * l3 + (dx * l + dy) * l + dz;
                        let src = ((ci * z + oz / l) * y + oy / l) * xx + ox / l;
                        index.push(src as u32);
                    }
                }
            }
        }
        self.gather(x, Arc::new(index), &out_shape)
    }
}
