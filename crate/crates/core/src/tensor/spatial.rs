//! Spatial operators on `[C, Z, Y, X]` grids: trilinear warping, 2× trilinear
//! upsampling and cropped box sums.

use super::graph::Graph;
use super::{Real, TResult, Tensor, TensorError, Var};

/// Linear interpolation stencil along one axis for sample coordinate `c`.
#[derive(Clone, Copy, Debug)]
struct Stencil {
    i0: usize,
    i1: usize,
    w0: Real,
    w1: Real,
    /// Derivative of the sample w.r.t. `c` is live (coordinate inside the grid).
    active: bool,
}

impl Stencil {
    /// Clamp-to-edge stencil. At integer coordinates the left cell is used, so the
    /// coordinate derivative there is the left one-sided difference.
    fn clamped(c: Real, n: usize) -> Self {
        if n == 1 {
            return Stencil {
                i0: 0,
                i1: 0,
                w0: 1.0,
                w1: 0.0,
                active: false,
            };
        }
        let hi = (n - 1) as Real;
        let active = (0.0..=hi).contains(&c);
        let c = c.clamp(0.0, hi);
        let i0 = ((c.ceil() as isize) - 1).clamp(0, n as isize - 2) as usize;
        let w1 = c - i0 as Real;
        Stencil {
            i0,
            i1: i0 + 1,
            w0: 1.0 - w1,
            w1,
            active,
        }
    }

    fn corner(&self, k: usize) -> (usize, Real) {
        if k == 0 {
            (self.i0, self.w0)
        } else {
            (self.i1, self.w1)
        }
    }
}

fn check_grid(op: &'static str, t: &Tensor) -> TResult<[usize; 4]> {
    match *t.shape() {
        [c, z, y, x] => Ok([c, z, y, x]),
        _ => Err(TensorError::invalid(op, format!("expected [C, Z, Y, X], got {:?}", t.shape()))),
    }
}

/// Samples channel plane `src` (Z·Y·X) at stencils; zero-weight corners are skipped
/// so integer positions reproduce the stored value bit for bit.
#[inline]
fn sample(src: &[Real], dims: [usize; 3], sz: &Stencil, sy: &Stencil, sx: &Stencil) -> Real {
    let [_, ny, nx] = dims;
    let mut acc = 0.0;
    for a in 0..2 {
        let (iz, wz) = sz.corner(a);
        if wz == 0.0 {
            continue;
        }
        for b in 0..2 {
            let (iy, wy) = sy.corner(b);
            if wy == 0.0 {
                continue;
            }
            for c in 0..2 {
                let (ix, wx) = sx.corner(c);
                if wx == 0.0 {
                    continue;
                }
                acc += wz * wy * wx * src[(iz * ny + iy) * nx + ix];
            }
        }
    }
    acc
}

/// Trilinear sample of channel `c` of `t[C, Z, Y, X]` at voxel coordinate
/// `(x, y, z)`, clamped to the border.
pub fn sample_point(t: &Tensor, c: usize, p: [f64; 3]) -> TResult<Real> {
    let [nc, nz, ny, nx] = check_grid("sample_point", t)?;
    if c >= nc {
        return Err(TensorError::invalid("sample_point", format!("channel {c} of {nc}")));
    }
    let plane = &t.data()[c * nz * ny * nx..(c + 1) * nz * ny * nx];
    let sx = Stencil::clamped(p[0] as Real, nx);
    let sy = Stencil::clamped(p[1] as Real, ny);
    let sz = Stencil::clamped(p[2] as Real, nz);
    Ok(sample(plane, [nz, ny, nx], &sz, &sy, &sx))
}

/// Cropped cube sum of radius `r` on one `[Z, Y, X]` plane, separable with f64 prefix sums.
fn box_sum_plane(src: &[Real], dims: [usize; 3], r: usize, dst: &mut [Real]) {
    let [nz, ny, nx] = dims;
    let mut cur: Vec<f64> = src.iter().map(|&v| v as f64).collect();
    let mut prefix = vec![0f64; nz.max(ny).max(nx) + 1];
    let strides = [ny * nx, nx, 1];
    for (axis, &len) in [nz, ny, nx].iter().enumerate() {
        let stride = strides[axis];
        let mut next = vec![0f64; cur.len()];
        // enumerate every line along `axis`
        for start in 0..cur.len() {
            if (start / stride) % len != 0 {
                continue;
            }
            for i in 0..len {
                prefix[i + 1] = prefix[i] + cur[start + i * stride];
            }
            for i in 0..len {
                let lo = i.saturating_sub(r);
                let hi = (i + r + 1).min(len);
                next[start + i * stride] = prefix[hi] - prefix[lo];
            }
        }
        cur = next;
    }
    for (d, v) in dst.iter_mut().zip(cur) {
        *d = v as Real;
    }
}

/// Cropped box sum of radius `r` over a `[Z, Y, X]` or `[C, Z, Y, X]` array.
pub fn box_sum_values(t: &Tensor, r: usize) -> TResult<Tensor> {
    let dims = match *t.shape() {
        [z, y, x] => [z, y, x],
        [_, z, y, x] => [z, y, x],
        _ => return Err(TensorError::invalid("box_sum", format!("shape {:?}", t.shape()))),
    };
    let plane: usize = dims.iter().product();
    let mut out = vec![0.0; t.numel()];
    for (src, dst) in t.data().chunks_exact(plane).zip(out.chunks_exact_mut(plane)) {
        box_sum_plane(src, dims, r, dst);
    }
    Ok(Tensor::from_parts(t.shape().to_vec(), out))
}

/// `(i0, i1, w0, w1)` for output index `o` of a 2× upsampling, half-pixel centers.
fn upsample_taps(o: usize, n: usize) -> (usize, usize, Real, Real) {
    let src = ((o as Real + 0.5) / 2.0 - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(n - 1);
    let i1 = (i0 + 1).min(n - 1);
    let w1 = if i1 == i0 { 0.0 } else { src - i0 as Real };
    (i0, i1, 1.0 - w1, w1)
}

impl Graph {
    /// Warps `moving[C, Z, Y, X]` by `field[3, Z, Y, X]` (voxel displacements ordered
    /// x, y, z): `out(p) = moving(p + u(p))`, trilinear, clamp-to-edge.
    pub fn warp(&self, moving: Var, field: Var) -> TResult<Var> {
        let (tm, tf) = (self.value(moving), self.value(field));
        let [c, nz, ny, nx] = check_grid("warp", &tm)?;
        let fshape = check_grid("warp", &tf)?;
        if fshape != [3, nz, ny, nx] {
            return Err(TensorError::mismatch("warp", tm.shape(), tf.shape()));
        }
        let vol = nz * ny * nx;
        let dims = [nz, ny, nx];
        let u = tf.data();
        let mut stencils = Vec::with_capacity(vol);
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let p = (z * ny + y) * nx + x;
                    stencils.push([
                        Stencil::clamped(z as Real + u[2 * vol + p], nz),
                        Stencil::clamped(y as Real + u[vol + p], ny),
                        Stencil::clamped(x as Real + u[p], nx),
                    ]);
                }
            }
        }
        let mut out = vec![0.0; c * vol];
        for ch in 0..c {
            let src = &tm.data()[ch * vol..(ch + 1) * vol];
            for (p, [sz, sy, sx]) in stencils.iter().enumerate() {
                out[ch * vol + p] = sample(src, dims, sz, sy, sx);
            }
        }
        let km = tm.storage().clone();
        Ok(self.record(
            Tensor::from_parts(tm.shape().to_vec(), out),
            &[moving, field],
            Box::new(move |g, needs| {
                let gm = needs[0].then(|| {
                    let mut gm = vec![0.0; c * vol];
                    for ch in 0..c {
                        let dst = &mut gm[ch * vol..(ch + 1) * vol];
                        for (p, [sz, sy, sx]) in stencils.iter().enumerate() {
                            let gp = g[ch * vol + p];
                            for a in 0..2 {
                                let (iz, wz) = sz.corner(a);
                                for b in 0..2 {
                                    let (iy, wy) = sy.corner(b);
                                    for cc in 0..2 {
                                        let (ix, wx) = sx.corner(cc);
                                        dst[(iz * ny + iy) * nx + ix] += gp * wz * wy * wx;
                                    }
                                }
                            }
                        }
                    }
                    gm
                });
                let gu = needs[1].then(|| {
                    let mut gu = vec![0.0; 3 * vol];
                    for ch in 0..c {
                        let src = &km[ch * vol..(ch + 1) * vol];
                        for (p, [sz, sy, sx]) in stencils.iter().enumerate() {
                            let gp = g[ch * vol + p];
                            if gp == 0.0 {
                                continue;
                            }
                            let at = |iz: usize, iy: usize, ix: usize| src[(iz * ny + iy) * nx + ix];
                            // d/dz, d/dy, d/dx of the trilinear sample
                            let mut dz = 0.0;
                            let mut dy = 0.0;
                            let mut dx = 0.0;
                            for a in 0..2 {
                                let (iz, wz) = sz.corner(a);
                                let sgn_z = if a == 0 { -1.0 } else { 1.0 };
                                for b in 0..2 {
                                    let (iy, wy) = sy.corner(b);
                                    let sgn_y = if b == 0 { -1.0 } else { 1.0 };
                                    for cc in 0..2 {
                                        let (ix, wx) = sx.corner(cc);
                                        let sgn_x = if cc == 0 { -1.0 } else { 1.0 };
                                        let v = at(iz, iy, ix);
                                        dz += sgn_z * wy * wx * v;
                                        dy += sgn_y * wz * wx * v;
                                        dx += sgn_x * wz * wy * v;
                                    }
                                }
                            }
                            if sx.active {
                                gu[p] += gp * dx;
                            }
                            if sy.active {
                                gu[vol + p] += gp * dy;
                            }
                            if sz.active {
                                gu[2 * vol + p] += gp * dz;
                            }
                        }
                    }
                    gu
                });
                vec![gm, gu]
            }),
        ))
    }

    /// 2× trilinear upsampling of `x[C, Z, Y, X]` with half-voxel aligned centers.
    pub fn upsample_trilinear(&self, x: Var) -> TResult<Var> {
        let t = self.value(x);
        let [c, nz, ny, nx] = check_grid("upsample_trilinear", &t)?;
        let (oz, oy, ox) = (2 * nz, 2 * ny, 2 * nx);
        let tz: Vec<_> = (0..oz).map(|o| upsample_taps(o, nz)).collect();
        let ty: Vec<_> = (0..oy).map(|o| upsample_taps(o, ny)).collect();
        let tx: Vec<_> = (0..ox).map(|o| upsample_taps(o, nx)).collect();
        let (vin, vout) = (nz * ny * nx, oz * oy * ox);
        let mut out = vec![0.0; c * vout];
        for ch in 0..c {
            let src = &t.data()[ch * vin..(ch + 1) * vin];
            let mut p = ch * vout;
            for &(z0, z1, wz0, wz1) in &tz {
                for &(y0, y1, wy0, wy1) in &ty {
                    for &(x0, x1, wx0, wx1) in &tx {
                        let at = |z: usize, y: usize, xx: usize| src[(z * ny + y) * nx + xx];
                        out[p] = wz0 * (wy0 * (wx0 * at(z0, y0, x0) + wx1 * at(z0, y0, x1))
                            + wy1 * (wx0 * at(z0, y1, x0) + wx1 * at(z0, y1, x1)))
                            + wz1 * (wy0 * (wx0 * at(z1, y0, x0) + wx1 * at(z1, y0, x1))
                                + wy1 * (wx0 * at(z1, y1, x0) + wx1 * at(z1, y1, x1)));
                        p += 1;
                    }
                }
            }
        }
        Ok(self.record(
            Tensor::from_parts(vec![c, oz, oy, ox], out),
            &[x],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; c * vin];
                for ch in 0..c {
                    let dst = &mut gx[ch * vin..(ch + 1) * vin];
                    let mut p = ch * vout;
                    for &(z0, z1, wz0, wz1) in &tz {
                        for &(y0, y1, wy0, wy1) in &ty {
                            for &(x0, x1, wx0, wx1) in &tx {
                                let gp = g[p];
                                p += 1;
                                for (z, wz) in [(z0, wz0), (z1, wz1)] {
                                    for (y, wy) in [(y0, wy0), (y1, wy1)] {
                                        for (xx, wx) in [(x0, wx0), (x1, wx1)] {
                                            dst[(z * ny + y) * nx + xx] += gp * wz * wy * wx;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Sum over the cube of radius `r` around each voxel, cropped at the borders.
    /// The operator is self-adjoint, so its backward pass is the same box sum.
    pub fn box_sum(&self, x: Var, r: usize) -> TResult<Var> {
        let t = self.value(x);
        let out = box_sum_values(&t, r)?;
        let shape = t.shape().to_vec();
        Ok(self.record(
            out,
            &[x],
            Box::new(move |g, _| {
                let gt = Tensor::from_parts(shape.clone(), g.to_vec());
                vec![Some(box_sum_values(&gt, r).expect("shape checked in forward").into_vec())]
            }),
        ))
    }
}
