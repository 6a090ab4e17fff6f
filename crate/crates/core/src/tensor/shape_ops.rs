//! Layout operations (reshape, permute, concat, slice, pad, gather, tile) and reductions.

use std::sync::Arc;

use super::graph::Graph;
use super::{strides, Real, TResult, Tensor, TensorError, Var, PAD_INDEX};

/// Copies `data` (of `shape`) into the axis order given by `axes`.
pub(crate) fn permute_data(data: &[Real], shape: &[usize], axes: &[usize]) -> Vec<Real> {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let step: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    if rank == 0 || n == 0 {
        return data.to_vec();
    }
    let inner = out_shape[rank - 1];
    let inner_step = step[rank - 1];
    let mut idx = vec![0usize; rank];
    let mut base = 0usize;
    while out.len() < n {
        if inner_step == 1 {
            out.extend_from_slice(&data[base..base + inner]);
        } else {
            out.extend((0..inner).map(|i| data[base + i * inner_step]));
        }
        // advance the outer multi-index
        let mut d = rank - 1;
        loop {
            if d == 0 {
                break;
            }
            d -= 1;
            idx[d] += 1;
            base += step[d];
            if idx[d] < out_shape[d] {
                break;
            }
            base -= step[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    out
}

fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

/// Applies a gather map: `out[i] = data[index[i]]`, zero where the index is [`PAD_INDEX`].
pub(crate) fn gather_data(data: &[Real], index: &[u32]) -> Vec<Real> {
    index
        .iter()
        .map(|&i| if i == PAD_INDEX { 0.0 } else { data[i as usize] })
        .collect()
}

fn scatter_add(g: &[Real], index: &[u32], len: usize) -> Vec<Real> {
    let mut out = vec![0.0; len];
    for (&gi, &i) in g.iter().zip(index) {
        if i != PAD_INDEX {
            out[i as usize] += gi;
        }
    }
    out
}

/// Sum with an f64 accumulator in a fixed order.
pub(crate) fn stable_sum(data: &[Real]) -> Real {
    data.iter().map(|&v| v as f64).sum::<f64>() as Real
}

impl Graph {
    pub fn reshape(&self, x: Var, shape: &[usize]) -> TResult<Var> {
        let t = self.value(x).reshaped(shape)?;
        Ok(self.record(t, &[x], Box::new(|g, _| vec![Some(g.to_vec())])))
    }

    pub fn permute(&self, x: Var, axes: &[usize]) -> TResult<Var> {
        let t = self.value(x);
        let rank = t.shape().len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(TensorError::invalid(
                "permute",
                format!("axes {axes:?} are not a permutation for shape {:?}", t.shape()),
            ));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| t.shape()[a]).collect();
        let out = permute_data(t.data(), t.shape(), axes);
        let inv = inverse_axes(axes);
        let grad_shape = out_shape.clone();
        Ok(self.record(
            Tensor::from_parts(out_shape, out),
            &[x],
            Box::new(move |g, _| vec![Some(permute_data(g, &grad_shape, &inv))]),
        ))
    }

    pub fn concat(&self, xs: &[Var], axis: usize) -> TResult<Var> {
        let ts: Vec<Tensor> = xs.iter().map(|&x| self.value(x)).collect();
        let first = ts
            .first()
            .ok_or_else(|| TensorError::invalid("concat", "no inputs"))?;
        let rank = first.shape().len();
        if axis >= rank {
            return Err(TensorError::invalid("concat", format!("axis {axis} out of range")));
        }
        for t in &ts[1..] {
            let compatible = t.shape().len() == rank
                && t.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::mismatch("concat", first.shape(), t.shape()));
            }
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let widths: Vec<usize> = ts.iter().map(|t| t.shape()[axis] * inner).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (t, &w) in ts.iter().zip(&widths) {
                out.extend_from_slice(&t.data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = ts.iter().map(|t| t.shape()[axis]).sum();
        Ok(self.record(
            Tensor::from_parts(shape, out),
            xs,
            Box::new(move |g, needs| {
                let mut offset = 0;
                widths
                    .iter()
                    .zip(needs)
                    .map(|(&w, &need)| {
                        let start = offset;
                        offset += w;
                        need.then(|| {
                            let mut gi = Vec::with_capacity(outer * w);
                            for o in 0..outer {
                                let row = o * total + start;
                                gi.extend_from_slice(&g[row..row + w]);
                            }
                            gi
                        })
                    })
                    .collect()
            }),
        ))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&self, x: Var, axis: usize, start: usize, end: usize) -> TResult<Var> {
        let t = self.value(x);
        let shape = t.shape().to_vec();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(TensorError::invalid(
                "slice",
                format!("range {start}..{end} on axis {axis} of shape {shape:?}"),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let row = shape[axis] * inner;
        let (lo, w) = (start * inner, (end - start) * inner);
        let mut out = Vec::with_capacity(outer * w);
        for o in 0..outer {
            out.extend_from_slice(&t.data()[o * row + lo..o * row + lo + w]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = end - start;
        let numel = t.numel();
        Ok(self.record(
            Tensor::from_parts(out_shape, out),
            &[x],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; numel];
                for o in 0..outer {
                    gx[o * row + lo..o * row + lo + w].copy_from_slice(&g[o * w..(o + 1) * w]);
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Splits along `axis` into consecutive pieces of the given sizes.
    pub fn split(&self, x: Var, axis: usize, sizes: &[usize]) -> TResult<Vec<Var>> {
        let shape = self.shape(x);
        if axis >= shape.len() || sizes.iter().sum::<usize>() != shape[axis] {
            return Err(TensorError::invalid(
                "split",
                format!("sizes {sizes:?} do not partition axis {axis} of {shape:?}"),
            ));
        }
        let mut start = 0;
        sizes
            .iter()
            .map(|&s| {
                let v = self.slice(x, axis, start, start + s);
                start += s;
                v
            })
            .collect()
    }

    /// Zero padding; `pads[d] = (before, after)` for every axis.
    pub fn pad(&self, x: Var, pads: &[(usize, usize)]) -> TResult<Var> {
        let shape = self.shape(x);
        if pads.len() != shape.len() {
            return Err(TensorError::invalid(
                "pad",
                format!("{} pad pairs for rank {}", pads.len(), shape.len()),
            ));
        }
        let out_shape: Vec<usize> = shape
            .iter()
            .zip(pads)
            .map(|(&d, &(a, b))| d + a + b)
            .collect();
        let in_strides = strides(&shape);
        let n: usize = out_shape.iter().product();
        let mut index = Vec::with_capacity(n);
        let mut coord = vec![0usize; shape.len()];
        for _ in 0..n {
            let mut src = Some(0usize);
            for d in 0..shape.len() {
                let c = coord[d] as isize - pads[d].0 as isize;
                if c < 0 || c >= shape[d] as isize {
                    src = None;
                    break;
                }
                src = src.map(|s| s + c as usize * in_strides[d]);
            }
            index.push(src.map_or(PAD_INDEX, |s| s as u32));
            for d in (0..shape.len()).rev() {
                coord[d] += 1;
                if coord[d] < out_shape[d] {
                    break;
                }
                coord[d] = 0;
            }
        }
        self.gather(x, Arc::new(index), &out_shape)
    }

    /// `out[i] = x[index[i]]` (flat indices), zero where `index[i] == PAD_INDEX`.
    pub fn gather(&self, x: Var, index: Arc<Vec<u32>>, out_shape: &[usize]) -> TResult<Var> {
        let t = self.value(x);
        let n: usize = out_shape.iter().product();
        if n != index.len() {
            return Err(TensorError::invalid(
                "gather",
                format!("index of length {} for output shape {out_shape:?}", index.len()),
            ));
        }
        let numel = t.numel();
        if let Some(&bad) = index.iter().find(|&&i| i != PAD_INDEX && i as usize >= numel) {
            return Err(TensorError::invalid(
                "gather",
                format!("index {bad} out of range for {numel} elements"),
            ));
        }
        let out = gather_data(t.data(), &index);
        Ok(self.record(
            Tensor::from_parts(out_shape.to_vec(), out),
            &[x],
            Box::new(move |g, _| vec![Some(scatter_add(g, &index, numel))]),
        ))
    }

    /// Row gather over the last axis: viewing `x` as `[R, L]`, output row `i` is
    /// row `index[i]` (zeros for [`PAD_INDEX`]); the result has shape
    /// `[index.len(), L]` reshaped to `out_shape`.
    pub fn gather_rows(&self, x: Var, index: Arc<Vec<u32>>, out_shape: &[usize]) -> TResult<Var> {
        let t = self.value(x);
        let len = *t.shape().last().unwrap_or(&1);
        let rows = t.numel() / len;
        if out_shape.iter().product::<usize>() != index.len() * len {
            return Err(TensorError::invalid(
                "gather_rows",
                format!("{} rows of width {len} cannot fill {out_shape:?}", index.len()),
            ));
        }
        if let Some(&bad) = index.iter().find(|&&i| i != PAD_INDEX && i as usize >= rows) {
            return Err(TensorError::invalid(
                "gather_rows",
                format!("row {bad} out of range for {rows} rows"),
            ));
        }
        let mut out = vec![0.0; index.len() * len];
        let src = t.data();
        for (dst, &r) in out.chunks_exact_mut(len).zip(index.iter()) {
            if r != PAD_INDEX {
                let r = r as usize;
                dst.copy_from_slice(&src[r * len..(r + 1) * len]);
            }
        }
        Ok(self.record(
            Tensor::from_parts(out_shape.to_vec(), out),
            &[x],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; rows * len];
                for (gi, &r) in g.chunks_exact(len).zip(index.iter()) {
                    if r != PAD_INDEX {
                        let r = r as usize;
                        gx[r * len..(r + 1) * len].iter_mut().zip(gi).for_each(|(a, b)| *a += b);
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Stacks `n` copies of `x` along a new leading axis.
    pub fn tile(&self, x: Var, n: usize) -> TResult<Var> {
        if n == 0 {
            return Err(TensorError::invalid("tile", "zero copies"));
        }
        let t = self.value(x);
        let m = t.numel();
        let mut out = Vec::with_capacity(n * m);
        for _ in 0..n {
            out.extend_from_slice(t.data());
        }
        let mut shape = vec![n];
        shape.extend_from_slice(t.shape());
        Ok(self.record(
            Tensor::from_parts(shape, out),
            &[x],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; m];
                for chunk in g.chunks_exact(m) {
                    gx.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Adds a per-channel vector `b` (shape `[C]`) along the last axis of `x`.
    pub fn bias_add(&self, x: Var, b: Var) -> TResult<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let c = *tx.shape().last().unwrap_or(&0);
        if tb.shape() != [c] {
            return Err(TensorError::mismatch("bias_add", tx.shape(), tb.shape()));
        }
        let mut out = tx.data().to_vec();
        for row in out.chunks_exact_mut(c) {
            row.iter_mut().zip(tb.data()).for_each(|(a, b)| *a += b);
        }
        Ok(self.record(
            Tensor::from_parts(tx.shape().to_vec(), out),
            &[x, b],
            Box::new(move |g, needs| {
                let gb = needs[1].then(|| column_sums(g, c));
                vec![needs[0].then(|| g.to_vec()), gb]
            }),
        ))
    }

    /// Multiplies every row (last axis) of `x` by the per-channel vector `s`.
    pub fn scale_rows(&self, x: Var, s: Var) -> TResult<Var> {
        let (tx, ts) = (self.value(x), self.value(s));
        let c = *tx.shape().last().unwrap_or(&0);
        if ts.shape() != [c] {
            return Err(TensorError::mismatch("scale_rows", tx.shape(), ts.shape()));
        }
        let mut out = tx.data().to_vec();
        for row in out.chunks_exact_mut(c) {
            row.iter_mut().zip(ts.data()).for_each(|(a, b)| *a *= b);
        }
        let (kx, ks) = (tx.storage().clone(), ts.storage().clone());
        Ok(self.record(
            Tensor::from_parts(tx.shape().to_vec(), out),
            &[x, s],
            Box::new(move |g, needs| {
                let gx = needs[0].then(|| {
                    let mut gx = g.to_vec();
                    for row in gx.chunks_exact_mut(c) {
                        row.iter_mut().zip(ks.iter()).for_each(|(a, b)| *a *= b);
                    }
                    gx
                });
                let gs = needs[1].then(|| {
                    let mut acc = vec![0f64; c];
                    for (grow, xrow) in g.chunks_exact(c).zip(kx.chunks_exact(c)) {
                        for j in 0..c {
                            acc[j] += (grow[j] * xrow[j]) as f64;
                        }
                    }
                    acc.into_iter().map(|v| v as Real).collect()
                });
                vec![gx, gs]
            }),
        ))
    }

    pub fn sum(&self, x: Var) -> Var {
        let t = self.value(x);
        let n = t.numel();
        let s = stable_sum(t.data());
        self.record(
            Tensor::scalar(s),
            &[x],
            Box::new(move |g, _| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean(&self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum(x);
        self.scale(s, 1.0 / n as Real)
    }

    /// Sums out `axis`.
    pub fn sum_axis(&self, x: Var, axis: usize) -> TResult<Var> {
        let t = self.value(x);
        let shape = t.shape().to_vec();
        if axis >= shape.len() {
            return Err(TensorError::invalid("sum_axis", format!("axis {axis} of {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let src = &t.data()[(o * len + a) * inner..(o * len + a + 1) * inner];
                out[o * inner..(o + 1) * inner]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(d, s)| *d += s);
            }
        }
        let mut out_shape: Vec<usize> = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        Ok(self.record(
            Tensor::from_parts(out_shape, out),
            &[x],
            Box::new(move |g, _| {
                let mut gx = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    for _ in 0..len {
                        gx.extend_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    pub fn mean_axis(&self, x: Var, axis: usize) -> TResult<Var> {
        let len = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| TensorError::invalid("mean_axis", format!("axis {axis}")))?;
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / len as Real))
    }
}

pub(crate) fn column_sums(g: &[Real], c: usize) -> Vec<Real> {
    let mut acc = vec![0f64; c];
    for row in g.chunks_exact(c) {
        acc.iter_mut().zip(row).for_each(|(a, &b)| *a += b as f64);
    }
    acc.into_iter().map(|v| v as Real).collect()
}
