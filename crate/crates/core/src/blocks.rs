//! Attention building blocks on token grids `[N, C]`: window attention, channel
//! attention, the fusion attention block (FAB), the overlapping attention block
//! (OAB), plus patch embedding and patch merging.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{fan_in_uniform, trunc_normal, ParamStore, Scope};
use crate::tensor::{Graph, Real, Tensor, Var};
use crate::volume::Dims;
use crate::windowing::{
    build_bias, overlapping_partition, shift_mask, window_partition, window_reverse, RelPosIndex, WindowSpec,
};

pub const MLP_RATIO: usize = 4;
const INIT_STD: f64 = 0.02;

pub fn init_linear(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, bias: bool, rng: &mut impl Rng) -> Result<()> {
    store.insert(format!("{name}.w"), trunc_normal(rng, &[fan_in, fan_out], INIT_STD))?;
    if bias {
        store.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]))?;
    }
    Ok(())
}

pub fn init_layer_norm(store: &mut ParamStore, name: &str, dim: usize) -> Result<()> {
    store.insert(format!("{name}.g"), Tensor::full(&[dim], 1.0))?;
    store.insert(format!("{name}.b"), Tensor::zeros(&[dim]))
}

/// Convolution `[c_out, c_in, k, k, k]` plus bias, uniform in `±1/√fan_in`.
pub fn init_conv(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, k: usize, rng: &mut impl Rng) -> Result<()> {
    let fan_in = c_in * k * k * k;
    store.insert(format!("{name}.w"), fan_in_uniform(rng, &[c_out, c_in, k, k, k], fan_in))?;
    store.insert(format!("{name}.b"), fan_in_uniform(rng, &[c_out], fan_in))
}

pub fn linear(s: &Scope, name: &str, x: Var) -> Result<Var> {
    let w = s.param(&format!("{name}.w"))?;
    let b_name = format!("{name}.b");
    let b = if s.has(&b_name) { Some(s.param(&b_name)?) } else { None };
    Ok(s.graph().linear(x, w, b)?)
}

pub fn layer_norm(s: &Scope, name: &str, x: Var) -> Result<Var> {
    let gain = s.param(&format!("{name}.g"))?;
    let bias = s.param(&format!("{name}.b"))?;
    Ok(s.graph().layer_norm(x, Some(gain), Some(bias))?)
}

pub fn conv(s: &Scope, name: &str, x: Var, stride: usize, padding: usize) -> Result<Var> {
    let w = s.param(&format!("{name}.w"))?;
    let b = s.param(&format!("{name}.b"))?;
    Ok(s.graph().conv3d(x, w, Some(b), stride, padding)?)
}

/// Output of [`multi_head_attention`].
#[derive(Debug, Clone, Copy)]
pub struct Attention {
    /// `[numWin, Nq, C]`, heads concatenated (before the output projection)
    pub out: Var,
    /// `[numWin·heads, Nq, Nk]` post-softmax weights
    pub probs: Var,
}

fn split_heads(g: &Graph, x: Var, heads: usize) -> Result<Var> {
    let s = g.shape(x);
    let (nw, n, c) = (s[0], s[1], s[2]);
    let x = g.reshape(x, &[nw, n, heads, c / heads])?;
    let x = g.permute(x, &[0, 2, 1, 3])?;
    Ok(g.reshape(x, &[nw * heads, n, c / heads])?)
}

/// Per window and head: `softmax(Q·Kᵀ/√d + B + mask)·V`.
///
/// `q`: `[numWin, Nq, C]`, `k`/`v`: `[numWin, Nk, C]`, `bias`: `[heads, Nq, Nk]`,
/// `mask`: `[numWin, Nq, Nk]` added to every head.
pub fn multi_head_attention(
    g: &Graph,
    q: Var,
    k: Var,
    v: Var,
    bias: Option<Var>,
    mask: Option<&Tensor>,
    heads: usize,
) -> Result<Attention> {
    let (qs, ks) = (g.shape(q), g.shape(k));
    if qs.len() != 3 || ks.len() != 3 || qs[0] != ks[0] || qs[2] != ks[2] || g.shape(v) != ks {
        return Err(Error::Dims(format!(
            "attention operands q {qs:?}, k {ks:?}, v {:?}",
            g.shape(v)
        )));
    }
    let (nw, nq, c) = (qs[0], qs[1], qs[2]);
    let nk = ks[1];
    if heads == 0 || c % heads != 0 {
        return Err(Error::Config(format!("{heads} heads do not divide width {c}")));
    }
    let d = c / heads;
    let (qh, kh, vh) = (split_heads(g, q, heads)?, split_heads(g, k, heads)?, split_heads(g, v, heads)?);
    let mut logits = g.scale(g.matmul_nt(qh, kh)?, 1.0 / (d as Real).sqrt());
    if let Some(b) = bias {
        if g.shape(b) != [heads, nq, nk] {
            return Err(Error::Dims(format!("bias {:?} for {heads}x{nq}x{nk}", g.shape(b))));
        }
        let tiled = g.reshape(g.tile(b, nw)?, &[nw * heads, nq, nk])?;
        logits = g.add(logits, tiled)?;
    }
    if let Some(m) = mask {
        if m.shape() != [nw, nq, nk] {
            return Err(Error::Dims(format!("mask {:?} for {nw}x{nq}x{nk}", m.shape())));
        }
        let block = nq * nk;
        let mut expanded = Vec::with_capacity(nw * heads * block);
        for w in 0..nw {
            for _ in 0..heads {
                expanded.extend_from_slice(&m.data()[w * block..(w + 1) * block]);
            }
        }
        let mv = g.constant(Tensor::new(&[nw * heads, nq, nk], expanded)?);
        logits = g.add(logits, mv)?;
    }
    let probs = g.softmax(logits, 2)?;
    let out = g.matmul(probs, vh)?;
    let out = g.reshape(out, &[nw, heads, nq, d])?;
    let out = g.permute(out, &[0, 2, 1, 3])?;
    let out = g.reshape(out, &[nw, nq, c])?;
    Ok(Attention { out, probs })
}

/// Hidden width of the channel-attention bottleneck.
pub fn ca_hidden(dim: usize, beta: usize) -> usize {
    (dim / beta.max(1)).max(1)
}

/// Global-average channel descriptor → compress → ReLU → recover → sigmoid gate,
/// applied to every token.
pub fn channel_attention(s: &Scope, name: &str, x: Var) -> Result<Var> {
    let g = s.graph();
    let shape = g.shape(x);
    let (n, c) = (shape[0], shape[1]);
    let pooled = g.reshape(g.mean_axis(x, 0)?, &[1, c])?;
    let h = g.relu(linear(s, &format!("{name}.fc1"), pooled)?);
    let gate = g.sigmoid(linear(s, &format!("{name}.fc2"), h)?);
    let gate = g.reshape(gate, &[c])?;
    let tiled = g.tile(gate, n)?;
    Ok(g.mul(x, tiled)?)
}

fn mlp(s: &Scope, name: &str, x: Var) -> Result<Var> {
    let h = s.graph().gelu(linear(s, &format!("{name}.fc1"), x)?);
    linear(s, &format!("{name}.fc2"), h)
}

/// Geometry and switches of one FAB (or plain shifted-window block).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FabSpec {
    pub dim: usize,
    pub heads: usize,
    /// window extents, already fitted to the grid
    pub p: [usize; 3],
    pub shifted: bool,
    pub alpha: Real,
    /// false: plain shifted-window block without the channel-attention branch
    pub use_ca: bool,
}

impl FabSpec {
    pub fn shift(&self) -> [usize; 3] {
        if self.shifted {
            self.p.map(|p| p / 2)
        } else {
            [0; 3]
        }
    }
}

/// Parameters of a FAB; with `ca_hidden = None` it is a plain shifted-window block.
pub fn init_fab(
    store: &mut ParamStore,
    name: &str,
    dim: usize,
    heads: usize,
    p: [usize; 3],
    ca_hidden: Option<usize>,
    rng: &mut impl Rng,
) -> Result<()> {
    init_transformer_common(store, name, dim, heads, RelPosIndex::wmsa(p).table_len(), rng)?;
    if let Some(h) = ca_hidden {
        init_linear(store, &format!("{name}.ca.fc1"), dim, h, true, rng)?;
        init_linear(store, &format!("{name}.ca.fc2"), h, dim, true, rng)?;
    }
    Ok(())
}

/// Parameters of an OAB with the given (grid-fitted) window.
pub fn init_oab(store: &mut ParamStore, name: &str, dim: usize, heads: usize, spec: &WindowSpec, rng: &mut impl Rng) -> Result<()> {
    init_transformer_common(store, name, dim, heads, RelPosIndex::oab(spec).table_len(), rng)
}

fn init_transformer_common(
    store: &mut ParamStore,
    name: &str,
    dim: usize,
    heads: usize,
    table_len: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    if heads == 0 || dim % heads != 0 {
        return Err(Error::Config(format!("{name}: {heads} heads do not divide width {dim}")));
    }
    init_layer_norm(store, &format!("{name}.norm1"), dim)?;
    init_linear(store, &format!("{name}.qkv"), dim, 3 * dim, true, rng)?;
    store.insert(format!("{name}.rpb"), trunc_normal(rng, &[table_len, heads], INIT_STD))?;
    init_linear(store, &format!("{name}.proj"), dim, dim, true, rng)?;
    init_layer_norm(store, &format!("{name}.norm2"), dim)?;
    init_linear(store, &format!("{name}.mlp.fc1"), dim, MLP_RATIO * dim, true, rng)?;
    init_linear(store, &format!("{name}.mlp.fc2"), MLP_RATIO * dim, dim, true, rng)
}

fn check_tokens(g: &Graph, x: Var, grid: Dims, dim: usize) -> Result<()> {
    let n: usize = grid.iter().product();
    if g.shape(x) != [n, dim] {
        return Err(Error::Dims(format!("tokens {:?} for grid {grid:?} of width {dim}", g.shape(x))));
    }
    Ok(())
}

/// (Shifted) window self-attention with output projection, `[N, C] → [N, C]`.
pub fn window_attention(s: &Scope, name: &str, x: Var, grid: Dims, spec: &FabSpec) -> Result<Var> {
    let g = s.graph();
    let shift = spec.shift();
    let win = window_partition(g, x, grid, spec.p, shift)?;
    let qkv = linear(s, &format!("{name}.qkv"), win)?;
    let parts = g.split(qkv, 2, &[spec.dim; 3])?;
    let rel = RelPosIndex::wmsa(spec.p);
    let bias = build_bias(g, s.param(&format!("{name}.rpb"))?, &rel)?;
    let mask = if spec.shifted {
        Some(shift_mask(grid, spec.p, shift)?)
    } else {
        None
    };
    let att = multi_head_attention(g, parts[0], parts[1], parts[2], Some(bias), mask.as_ref(), spec.heads)?;
    let out = linear(s, &format!("{name}.proj"), att.out)?;
    window_reverse(g, out, grid, spec.p, shift)
}

/// `ẑ = (S)W-MSA(LN z) + α·CA(LN z) + z`, then `z' = MLP(LN ẑ) + ẑ`.
pub fn fab_forward(s: &Scope, name: &str, x: Var, grid: Dims, spec: &FabSpec) -> Result<Var> {
    let g = s.graph();
    check_tokens(g, x, grid, spec.dim)?;
    let h = layer_norm(s, &format!("{name}.norm1"), x)?;
    let mut branch = window_attention(s, name, h, grid, spec)?;
    if spec.use_ca && spec.alpha != 0.0 {
        let ca = channel_attention(s, &format!("{name}.ca"), h)?;
        branch = g.add(branch, g.scale(ca, spec.alpha))?;
    }
    let z = g.add(x, branch)?;
    let m = mlp(s, &format!("{name}.mlp"), layer_norm(s, &format!("{name}.norm2"), z)?)?;
    Ok(g.add(z, m)?)
}

/// Overlapping cross-attention: queries from plain windows, keys/values from
/// zero-padded overlapping windows of extent `P°` (padding applied after the
/// projection). Output projected, `[N, C] → [N, C]`.
pub fn overlapping_attention(s: &Scope, name: &str, x: Var, grid: Dims, spec: &WindowSpec, heads: usize) -> Result<Var> {
    let g = s.graph();
    let dim = g.shape(x)[1];
    let qkv = linear(s, &format!("{name}.qkv"), x)?;
    let parts = g.split(qkv, 1, &[dim, 2 * dim])?;
    let q = window_partition(g, parts[0], grid, spec.p, [0; 3])?;
    let kv = overlapping_partition(g, parts[1], grid, spec)?;
    let kv = g.split(kv, 2, &[dim, dim])?;
    let rel = RelPosIndex::oab(spec);
    let bias = build_bias(g, s.param(&format!("{name}.rpb"))?, &rel)?;
    let att = multi_head_attention(g, q, kv[0], kv[1], Some(bias), None, heads)?;
    let out = linear(s, &format!("{name}.proj"), att.out)?;
    window_reverse(g, out, grid, spec.p, [0; 3])
}

/// `ẑ° = OA(LN z) + z`, then `z' = MLP(LN ẑ°) + ẑ°`.
pub fn oab_forward(s: &Scope, name: &str, x: Var, grid: Dims, spec: &WindowSpec, heads: usize) -> Result<Var> {
    let g = s.graph();
    let dim = g.shape(x).get(1).copied().unwrap_or(0);
    check_tokens(g, x, grid, dim)?;
    let h = layer_norm(s, &format!("{name}.norm1"), x)?;
    let z = g.add(x, overlapping_attention(s, name, h, grid, spec, heads)?)?;
    let m = mlp(s, &format!("{name}.mlp"), layer_norm(s, &format!("{name}.norm2"), z)?)?;
    Ok(g.add(z, m)?)
}

/// `[C, Z, Y, X]` → tokens `[Z·Y·X, C]` and grid `(X, Y, Z)`.
pub fn volume_to_tokens(g: &Graph, x: Var) -> Result<(Var, Dims)> {
    let s = g.shape(x);
    if s.len() != 4 {
        return Err(Error::Dims(format!("expected [C, Z, Y, X], got {s:?}")));
    }
    let flat = g.reshape(x, &[s[0], s[1] * s[2] * s[3]])?;
    Ok((g.permute(flat, &[1, 0])?, [s[3], s[2], s[1]]))
}

/// Tokens `[N, C]` on grid `(X, Y, Z)` → `[C, Z, Y, X]`.
pub fn tokens_to_volume(g: &Graph, x: Var, grid: Dims) -> Result<Var> {
    let c = g.shape(x)[1];
    let t = g.permute(x, &[1, 0])?;
    Ok(g.reshape(t, &[c, grid[2], grid[1], grid[0]])?)
}

pub fn init_patch_embed(store: &mut ParamStore, name: &str, c_in: usize, dim: usize, patch: usize, rng: &mut impl Rng) -> Result<()> {
    init_conv(store, name, c_in, dim, patch, rng)
}

/// Non-overlapping `patch³` linear embedding of a `[C_in, Z, Y, X]` input.
pub fn patch_embed(s: &Scope, name: &str, x: Var, patch: usize) -> Result<(Var, Dims)> {
    let g = s.graph();
    let shape = g.shape(x);
    for (axis, &e) in ['z', 'y', 'x'].iter().zip(&shape[1..]) {
        if e % patch != 0 {
            let pad = patch - e % patch;
            return Err(Error::Dims(format!(
                "extent {e} on axis {axis} is not divisible by the patch size {patch}; pad by {pad}"
            )));
        }
    }
    let y = conv(s, name, x, patch, 0)?;
    volume_to_tokens(g, y)
}

/// Row map gathering each 2×2×2 neighborhood (x fastest) into consecutive rows.
pub fn merge_index(grid: Dims) -> Result<Vec<u32>> {
    if let Some(a) = (0..3).find(|&a| grid[a] % 2 != 0) {
        return Err(Error::Dims(format!(
            "patch merging needs even extents; axis {} has {}",
            ['x', 'y', 'z'][a],
            grid[a]
        )));
    }
    let half = grid.map(|e| e / 2);
    let mut index = Vec::with_capacity(grid.iter().product());
    for z in 0..half[2] {
        for y in 0..half[1] {
            for x in 0..half[0] {
                for dz in 0..2 {
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let c = [2 * x + dx, 2 * y + dy, 2 * z + dz];
                            index.push(((c[2] * grid[1] + c[1]) * grid[0] + c[0]) as u32);
                        }
                    }
                }
            }
        }
    }
    Ok(index)
}

pub fn init_patch_merge(store: &mut ParamStore, name: &str, dim: usize, rng: &mut impl Rng) -> Result<()> {
    init_linear(store, name, 8 * dim, 2 * dim, false, rng)
}

/// `[N, d]` on `grid` → `[N/8, 2d]` on `grid/2`.
pub fn patch_merge(s: &Scope, name: &str, x: Var, grid: Dims) -> Result<(Var, Dims)> {
    let g = s.graph();
    let d = g.shape(x)[1];
    let index = merge_index(grid)?;
    let n = index.len() / 8;
    let cat = g.gather_rows(x, Arc::new(index), &[n, 8 * d])?;
    Ok((linear(s, name, cat)?, grid.map(|e| e / 2)))
}
