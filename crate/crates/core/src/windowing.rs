//! Window geometry for token grids: plain, cyclically shifted and overlapping
//! partitions, the shifted-window seam mask, and relative-position index maps.
//!
//! Token grids are row matrices `[N, C]` whose row index is `(z·Y + y)·X + x`
//! for grid extents `(X, Y, Z)`. Windows are enumerated with x fastest, and so
//! are the tokens inside a window.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, TResult, Tensor, Var, PAD_INDEX};
use crate::volume::Dims;

/// Logit added where shifted windows mix tokens from opposite sides of the wrap seam.
pub const MASK_LOGIT: Real = -100.0;

const AXES: [char; 3] = ['x', 'y', 'z'];

/// Query window extents `p` and the derived key/value extents of overlapping windows.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowSpec {
    pub p: [usize; 3],
    pub epsilon: f64,
}

impl WindowSpec {
    pub fn cubic(p: usize, epsilon: f64) -> Self {
        WindowSpec { p: [p; 3], epsilon }
    }

    /// `P° = round((1 + ε)·P)` per axis.
    pub fn p_o(&self) -> [usize; 3] {
        self.p.map(|p| ((1.0 + self.epsilon) * p as f64).round() as usize)
    }

    /// Zero padding `(low, high)` per axis; the odd voxel goes to the high side.
    pub fn padding(&self) -> [(usize, usize); 3] {
        let po = self.p_o();
        let mut pads = [(0, 0); 3];
        for a in 0..3 {
            let total = po[a] - self.p[a];
            pads[a] = (total / 2, total - total / 2);
        }
        pads
    }

    pub fn tokens(&self) -> usize {
        self.p.iter().product()
    }

    pub fn overlap_tokens(&self) -> usize {
        self.p_o().iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.p.iter().any(|&p| p == 0) {
            return Err(Error::Config("window extents must be positive".into()));
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("overlap factor must be >= 0, got {}", self.epsilon)));
        }
        Ok(())
    }

    /// Window used on a grid: if the grid is no larger than the window on some
    /// axis, the window is clamped to the grid extents and shifting is disabled.
    pub fn fit(&self, grid: Dims) -> (WindowSpec, bool) {
        if (0..3).any(|a| grid[a] <= self.p[a]) {
            let p = [0, 1, 2].map(|a| self.p[a].min(grid[a]));
            (WindowSpec { p, epsilon: self.epsilon }, false)
        } else {
            (*self, true)
        }
    }
}

fn check_divisible(grid: Dims, p: [usize; 3]) -> Result<[usize; 3]> {
    let mut counts = [0; 3];
    for a in 0..3 {
        if p[a] == 0 || grid[a] % p[a] != 0 {
            return Err(Error::Dims(format!(
                "grid extent {} on axis {} is not divisible by window extent {}",
                grid[a], AXES[a], p[a]
            )));
        }
        counts[a] = grid[a] / p[a];
    }
    Ok(counts)
}

pub fn num_windows(grid: Dims, p: [usize; 3]) -> Result<usize> {
    Ok(check_divisible(grid, p)?.iter().product())
}

/// Visits (window, token-in-window) origins and offsets in partition order.
fn for_each_window_token(counts: [usize; 3], p: [usize; 3], mut f: impl FnMut([usize; 3], [usize; 3])) {
    for wz in 0..counts[2] {
        for wy in 0..counts[1] {
            for wx in 0..counts[0] {
                for tz in 0..p[2] {
                    for ty in 0..p[1] {
                        for tx in 0..p[0] {
                            f([wx * p[0], wy * p[1], wz * p[2]], [tx, ty, tz]);
                        }
                    }
                }
            }
        }
    }
}

fn row(grid: Dims, c: [usize; 3]) -> u32 {
    ((c[2] * grid[1] + c[1]) * grid[0] + c[0]) as u32
}

/// Row map of a partition applied after rolling the grid by `−shift`
/// (shifted position `q` reads original position `(q + shift) mod extent`).
pub fn partition_index(grid: Dims, p: [usize; 3], shift: [usize; 3]) -> Result<Vec<u32>> {
    let counts = check_divisible(grid, p)?;
    let mut index = Vec::with_capacity(grid.iter().product());
    for_each_window_token(counts, p, |o, t| {
        let c = [0, 1, 2].map(|a| (o[a] + t[a] + shift[a]) % grid[a]);
        index.push(row(grid, c));
    });
    Ok(index)
}

/// Inverse permutation of a row map that covers every row exactly once.
pub fn invert_permutation(index: &[u32]) -> Vec<u32> {
    let mut inv = vec![0u32; index.len()];
    for (i, &r) in index.iter().enumerate() {
        inv[r as usize] = i as u32;
    }
    inv
}

/// Key/value row map: window `w` covers `P°` tokens centered on query window `w`;
/// positions outside the grid are [`PAD_INDEX`] (zero rows).
pub fn overlap_index(grid: Dims, spec: &WindowSpec) -> Result<Vec<u32>> {
    let counts = check_divisible(grid, spec.p)?;
    let po = spec.p_o();
    let pads = spec.padding();
    let mut index = Vec::with_capacity(counts.iter().product::<usize>() * spec.overlap_tokens());
    for wz in 0..counts[2] {
        for wy in 0..counts[1] {
            for wx in 0..counts[0] {
                let origin = [wx * spec.p[0], wy * spec.p[1], wz * spec.p[2]];
                for kz in 0..po[2] {
                    for ky in 0..po[1] {
                        for kx in 0..po[0] {
                            let k = [kx, ky, kz];
                            let mut c = [0usize; 3];
                            let mut inside = true;
                            for a in 0..3 {
                                let v = (origin[a] + k[a]) as isize - pads[a].0 as isize;
                                if v < 0 || v >= grid[a] as isize {
                                    inside = false;
                                } else {
                                    c[a] = v as usize;
                                }
                            }
                            index.push(if inside { row(grid, c) } else { PAD_INDEX });
                        }
                    }
                }
            }
        }
    }
    Ok(index)
}

/// `[N, C]` tokens → `[numWin, P_x·P_y·P_z, C]`, optionally after a cyclic shift.
pub fn window_partition(g: &Graph, x: Var, grid: Dims, p: [usize; 3], shift: [usize; 3]) -> Result<Var> {
    let c = token_width(g, x, grid)?;
    let index = partition_index(grid, p, shift)?;
    let nw = index.len() / p.iter().product::<usize>();
    Ok(g.gather_rows(x, Arc::new(index), &[nw, p.iter().product(), c])?)
}

/// Inverse of [`window_partition`] with the same `p` and `shift`: back to `[N, C]`.
pub fn window_reverse(g: &Graph, windows: Var, grid: Dims, p: [usize; 3], shift: [usize; 3]) -> Result<Var> {
    let shape = g.shape(windows);
    let c = *shape.last().unwrap_or(&0);
    let n: usize = grid.iter().product();
    if shape.iter().product::<usize>() != n * c {
        return Err(Error::Dims(format!("windows {shape:?} do not tile grid {grid:?}")));
    }
    let inv = invert_permutation(&partition_index(grid, p, shift)?);
    Ok(g.gather_rows(windows, Arc::new(inv), &[n, c])?)
}

/// Toroidal roll of a token grid by `−shift` (`inverse = true` rolls by `+shift`).
pub fn cyclic_shift(g: &Graph, x: Var, grid: Dims, shift: [usize; 3], inverse: bool) -> Result<Var> {
    let c = token_width(g, x, grid)?;
    let mut index = Vec::with_capacity(grid.iter().product());
    for z in 0..grid[2] {
        for y in 0..grid[1] {
            for xx in 0..grid[0] {
                let q = [xx, y, z];
                let src = [0, 1, 2].map(|a| {
                    let s = shift[a] % grid[a];
                    if inverse {
                        (q[a] + grid[a] - s) % grid[a]
                    } else {
                        (q[a] + s) % grid[a]
                    }
                });
                index.push(row(grid, src));
            }
        }
    }
    Ok(g.gather_rows(x, Arc::new(index), &[grid.iter().product(), c])?)
}

/// `[N, C]` tokens → `[numWin, P°_x·P°_y·P°_z, C]` zero-padded overlapping windows.
pub fn overlapping_partition(g: &Graph, x: Var, grid: Dims, spec: &WindowSpec) -> Result<Var> {
    let c = token_width(g, x, grid)?;
    let index = overlap_index(grid, spec)?;
    let nw = index.len() / spec.overlap_tokens();
    Ok(g.gather_rows(x, Arc::new(index), &[nw, spec.overlap_tokens(), c])?)
}

fn token_width(g: &Graph, x: Var, grid: Dims) -> Result<usize> {
    match *g.shape(x) {
        [n, c] if n == grid.iter().product::<usize>() => Ok(c),
        ref s => Err(Error::Dims(format!("tokens {s:?} do not match grid {grid:?}"))),
    }
}

/// Seam mask for shifted windows: `[numWin, N, N]` with 0 where query and key
/// come from the same pre-shift region and [`MASK_LOGIT`] otherwise.
pub fn shift_mask(grid: Dims, p: [usize; 3], shift: [usize; 3]) -> Result<Tensor> {
    let counts = check_divisible(grid, p)?;
    let region = |a: usize, q: usize| -> usize {
        if q < grid[a] - p[a] {
            0
        } else if q < grid[a] - shift[a] {
            1
        } else {
            2
        }
    };
    let mut labels = Vec::with_capacity(grid.iter().product());
    for_each_window_token(counts, p, |o, t| {
        let q = [0, 1, 2].map(|a| o[a] + t[a]);
        labels.push((region(2, q[2]) * 3 + region(1, q[1])) * 3 + region(0, q[0]));
    });
    let n = p.iter().product::<usize>();
    let nw = labels.len() / n;
    let mut mask = vec![0.0; nw * n * n];
    for w in 0..nw {
        let l = &labels[w * n..(w + 1) * n];
        for i in 0..n {
            for j in 0..n {
                if l[i] != l[j] {
                    mask[(w * n + i) * n + j] = MASK_LOGIT;
                }
            }
        }
    }
    Ok(Tensor::new(&[nw, n, n], mask)?)
}

/// Index map from (query, key) position pairs into a relative-position bias
/// table with `P + P° − 1` entries per axis (`P° = P` for plain windows).
#[derive(Debug, Clone, PartialEq)]
pub struct RelPosIndex {
    pub p: [usize; 3],
    pub p_o: [usize; 3],
    /// row-major `[P_x·P_y·P_z, P°_x·P°_y·P°_z]`
    pub index: Arc<Vec<u32>>,
}

impl RelPosIndex {
    /// Plain (and shifted) window attention.
    pub fn wmsa(p: [usize; 3]) -> Self {
        RelPosIndex::build(p, p)
    }

    /// Overlapping cross-attention.
    pub fn oab(spec: &WindowSpec) -> Self {
        RelPosIndex::build(spec.p, spec.p_o())
    }

    fn build(p: [usize; 3], p_o: [usize; 3]) -> Self {
        let ext = [0, 1, 2].map(|a| p[a] + p_o[a] - 1);
        let mut index = Vec::with_capacity(p.iter().product::<usize>() * p_o.iter().product::<usize>());
        let mut queries = Vec::new();
        for_each_window_token([1; 3], p, |_, t| queries.push(t));
        let mut keys = Vec::new();
        for_each_window_token([1; 3], p_o, |_, t| keys.push(t));
        for q in &queries {
            for k in &keys {
                let d = [0, 1, 2].map(|a| q[a] + p_o[a] - 1 - k[a]);
                index.push(((d[2] * ext[1] + d[1]) * ext[0] + d[0]) as u32);
            }
        }
        RelPosIndex {
            p,
            p_o,
            index: Arc::new(index),
        }
    }

    pub fn table_extents(&self) -> [usize; 3] {
        [0, 1, 2].map(|a| self.p[a] + self.p_o[a] - 1)
    }

    pub fn table_len(&self) -> usize {
        self.table_extents().iter().product()
    }

    pub fn queries(&self) -> usize {
        self.p.iter().product()
    }

    pub fn keys(&self) -> usize {
        self.p_o.iter().product()
    }
}

/// Gathers the learnable table `[table_len, heads]` into the bias `[heads, Nq, Nk]`.
pub fn build_bias(g: &Graph, table: Var, rel: &RelPosIndex) -> TResult<Var> {
    let heads = g.shape(table)[1];
    let (nq, nk) = (rel.queries(), rel.keys());
    let rows = g.gather_rows(table, rel.index.clone(), &[nq * nk, heads])?;
    let t = g.permute(rows, &[1, 0])?;
    g.reshape(t, &[heads, nq, nk])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tokens(grid: Dims, c: usize, seed: u64) -> Tensor {
        let n: usize = grid.iter().product();
        let data = (0..n * c)
            .map(|i| ((i as u64).wrapping_mul(2654435761).wrapping_add(seed) % 1000) as Real / 100.0)
            .collect();
        Tensor::new(&[n, c], data).unwrap()
    }

    #[test]
    fn eight_cubed_gives_eight_windows_of_64() {
        let g = Graph::new();
        let x = g.constant(tokens([8; 3], 3, 1));
        let w = window_partition(&g, x, [8; 3], [4; 3], [0; 3]).unwrap();
        assert_eq!(g.shape(w), vec![8, 64, 3]);
        assert_eq!(num_windows([8; 3], [4; 3]).unwrap(), 512 / 64);
    }

    #[test]
    fn whole_grid_window_is_a_reshape() {
        let grid = [4, 2, 3];
        let g = Graph::new();
        let t = tokens(grid, 2, 7);
        let x = g.constant(t.clone());
        let w = window_partition(&g, x, grid, grid, [0; 3]).unwrap();
        assert_eq!(g.shape(w), vec![1, 24, 2]);
        assert_eq!(g.value(w).data(), t.data());
    }

    #[test]
    fn non_divisible_names_axis() {
        let msg = partition_index([8, 6, 8], [4; 3], [0; 3]).unwrap_err().to_string();
        assert!(msg.contains("axis y"), "{msg}");
    }

    #[test]
    fn roll_by_two_in_one_dimension() {
        let g = Graph::new();
        let x = g.constant(Tensor::new(&[4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let s = cyclic_shift(&g, x, [4, 1, 1], [2, 0, 0], false).unwrap();
        assert_eq!(g.value(s).data(), &[3.0, 4.0, 1.0, 2.0]);
        let z = cyclic_shift(&g, x, [4, 1, 1], [0; 3], false).unwrap();
        assert_eq!(g.value(z).data(), g.value(x).data());
    }

    #[test]
    fn shifted_partition_equals_roll_then_partition() {
        let grid = [8; 3];
        let g = Graph::new();
        let x = g.constant(tokens(grid, 2, 3));
        let rolled = cyclic_shift(&g, x, grid, [2; 3], false).unwrap();
        let a = window_partition(&g, rolled, grid, [4; 3], [0; 3]).unwrap();
        let b = window_partition(&g, x, grid, [4; 3], [2; 3]).unwrap();
        assert_eq!(g.value(a), g.value(b));
    }

    #[test]
    fn p_o_and_padding() {
        let s = WindowSpec::cubic(4, 0.5);
        assert_eq!(s.p_o(), [6; 3]);
        assert_eq!(s.padding(), [(1, 1); 3]);
        let odd = WindowSpec::cubic(2, 0.5);
        assert_eq!(odd.p_o(), [3; 3]);
        assert_eq!(odd.padding(), [(0, 1); 3]);
        assert_eq!(WindowSpec::cubic(4, 0.0).p_o(), [4; 3]);
    }

    #[test]
    fn fit_clamps_small_grids() {
        let s = WindowSpec::cubic(4, 0.5);
        assert_eq!(s.fit([8; 3]), (s, true));
        assert_eq!(s.fit([4; 3]), (s, false));
        let (small, shift) = s.fit([2; 3]);
        assert_eq!((small.p, shift), ([2; 3], false));
    }

    #[test]
    fn zero_overlap_matches_plain_partition() {
        let grid = [8; 3];
        let spec = WindowSpec::cubic(4, 0.0);
        assert_eq!(overlap_index(grid, &spec).unwrap(), partition_index(grid, [4; 3], [0; 3]).unwrap());
    }

    #[test]
    fn overlapping_windows_of_216() {
        let grid = [8; 3];
        let g = Graph::new();
        let x = g.constant(tokens(grid, 5, 2));
        let w = overlapping_partition(&g, x, grid, &WindowSpec::cubic(4, 0.5)).unwrap();
        assert_eq!(g.shape(w), vec![8, 216, 5]);
    }

    #[test]
    fn overlap_covers_padded_grid_and_centers_windows() {
        let grid = [8; 3];
        let spec = WindowSpec::cubic(4, 0.5);
        let index = overlap_index(grid, &spec).unwrap();
        // padded grid is 10³ with a one-voxel rim; enumerate membership per padded voxel
        let mut covered = vec![false; 10 * 10 * 10];
        let per = spec.overlap_tokens();
        for (w, chunk) in index.chunks(per).enumerate() {
            let o = [(w % 2) * 4, (w / 2 % 2) * 4, (w / 4) * 4];
            for (k, &r) in chunk.iter().enumerate() {
                let kc = [k % 6, k / 6 % 6, k / 36];
                let padded = [0, 1, 2].map(|a| o[a] + kc[a]);
                covered[(padded[2] * 10 + padded[1]) * 10 + padded[0]] = true;
                let inside = padded.iter().all(|&v| (1..=8).contains(&v));
                if inside {
                    let c = padded.map(|v| v - 1);
                    assert_eq!(r, ((c[2] * 8 + c[1]) * 8 + c[0]) as u32);
                } else {
                    assert_eq!(r, PAD_INDEX);
                }
            }
            // the central 4³ of every key window is exactly the query window
            let q = &partition_index(grid, [4; 3], [0; 3]).unwrap()[w * 64..(w + 1) * 64];
            let mut center = Vec::new();
            for z in 1..5 {
                for y in 1..5 {
                    for x in 1..5 {
                        center.push(chunk[(z * 6 + y) * 6 + x]);
                    }
                }
            }
            assert_eq!(center, q);
        }
        assert!(covered.iter().all(|&c| c));
    }

    #[test]
    fn table_sizes_and_bias_shapes() {
        let w = RelPosIndex::wmsa([4; 3]);
        assert_eq!(w.table_len(), 343);
        assert_eq!((w.queries(), w.keys()), (64, 64));
        let o = RelPosIndex::oab(&WindowSpec::cubic(4, 0.5));
        assert_eq!(o.table_len(), 729);
        assert_eq!((o.queries(), o.keys()), (64, 216));
        for rel in [&w, &o] {
            assert_eq!(rel.index.len(), rel.queries() * rel.keys());
            assert!(rel.index.iter().all(|&i| (i as usize) < rel.table_len()));
            let mut used = vec![false; rel.table_len()];
            rel.index.iter().for_each(|&i| used[i as usize] = true);
            assert!(used.iter().all(|&u| u), "every table entry is reachable");
        }
        let g = Graph::new();
        let table = g.constant(Tensor::zeros(&[729, 4]));
        let b = build_bias(&g, table, &o).unwrap();
        assert_eq!(g.shape(b), vec![4, 64, 216]);
        assert!(g.value(b).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wmsa_offsets_span_symmetric_range() {
        let w = RelPosIndex::wmsa([4; 3]);
        // q = k gives the table center; extreme offsets hit the table corners
        assert_eq!(w.index[0], (3 * 7 + 3) * 7 + 3);
        assert_eq!(w.index[63], 0);
        assert_eq!(w.index[63 * 64], 342);
    }

    #[test]
    fn bias_gathers_table_entries() {
        let rel = RelPosIndex::wmsa([2, 1, 1]);
        let g = Graph::new();
        // table extents 3x1x1, two heads
        let table = g.constant(Tensor::new(&[3, 2], vec![1.0, 10.0, 2.0, 20.0, 3.0, 30.0]).unwrap());
        let b = g.value(build_bias(&g, table, &rel).unwrap());
        // offsets q−k = 0, −1, 1, 0 → entries 1, 0, 2, 1
        assert_eq!(b.data(), &[2.0, 1.0, 3.0, 2.0, 20.0, 10.0, 30.0, 20.0]);
    }

    #[test]
    fn shift_mask_blocks_seam() {
        let m = shift_mask([8; 3], [4; 3], [2; 3]).unwrap();
        assert_eq!(m.shape(), &[8, 64, 64]);
        // first window lies entirely in region 0: no masking
        assert!(m.data()[..64 * 64].iter().all(|&v| v == 0.0));
        // last window straddles the seam on every axis
        let last = &m.data()[7 * 64 * 64..];
        assert!(last.iter().any(|&v| v == MASK_LOGIT));
        for i in 0..64 {
            assert_eq!(last[i * 64 + i], 0.0);
        }
        let unshifted = shift_mask([8; 3], [4; 3], [0; 3]).unwrap();
        assert!(unshifted.data().iter().all(|&v| v == 0.0));
    }

    proptest! {
        #[test]
        fn partition_reverse_is_identity(seed in 0u64..1000, shift in 0usize..4, wx in 1usize..3, wy in 1usize..3) {
            let grid = [4 * wx, 4 * wy, 8];
            let s = [shift, (shift + 1) % 4, 0];
            let g = Graph::new();
            let t = tokens(grid, 3, seed);
            let x = g.constant(t.clone());
            let w = window_partition(&g, x, grid, [4; 3], s).unwrap();
            let back = window_reverse(&g, w, grid, [4; 3], s).unwrap();
            prop_assert_eq!(g.value(back), t.clone());
            let rolled = cyclic_shift(&g, x, grid, s, false).unwrap();
            let unrolled = cyclic_shift(&g, rolled, grid, s, true).unwrap();
            prop_assert_eq!(g.value(unrolled), t);
        }

        #[test]
        fn bias_index_is_translation_consistent(
            q in proptest::array::uniform3(0usize..4),
            k in proptest::array::uniform3(0usize..6),
            t in proptest::array::uniform3(0usize..3),
        ) {
            let rel = RelPosIndex::oab(&WindowSpec::cubic(4, 0.5));
            let (q2, k2) = ([0, 1, 2].map(|a| q[a] + t[a]), [0, 1, 2].map(|a| k[a] + t[a]));
            prop_assume!(q2.iter().all(|&v| v < 4) && k2.iter().all(|&v| v < 6));
            let flat = |c: [usize; 3], n: usize| (c[2] * n + c[1]) * n + c[0];
            let at = |q: [usize; 3], k: [usize; 3]| rel.index[flat(q, 4) * 216 + flat(k, 6)];
            prop_assert_eq!(at(q, k), at(q2, k2));
        }
    }
}
