//! Similarity, smoothness and segmentation losses on `[C, Z, Y, X]` grids.
//!
//! Conventions: LNCC and diffusion report means over the grid, not sums;
//! LNCC cubes are cropped at the borders; MI expects intensities in `[0, 1]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{box_sum_values, Graph, Real, Tensor, Var};

/// Stabilizer added to the LNCC and Dice denominators.
pub const DENOM_EPS: Real = 1e-5;
const LOG_EPS: Real = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimKind {
    Lncc,
    Mi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub sim_kind: SimKind,
    /// smoothness weight
    pub lambda: f64,
    /// segmentation weight
    pub gamma: f64,
    pub use_seg: bool,
    pub lncc_cube: usize,
    pub mi_bins: usize,
    /// Parzen kernel width in intensity units; defaults to one bin width
    pub mi_sigma: Option<f64>,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            sim_kind: SimKind::Lncc,
            lambda: 1.0,
            gamma: 1.0,
            use_seg: false,
            lncc_cube: 9,
            mi_bins: 32,
            mi_sigma: None,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lncc_cube < 3 || self.lncc_cube % 2 == 0 {
            return Err(Error::Config(format!("lncc_cube must be odd and >= 3, got {}", self.lncc_cube)));
        }
        if self.mi_bins < 8 {
            return Err(Error::Config(format!("mi_bins must be >= 8, got {}", self.mi_bins)));
        }
        if !(self.lambda >= 0.0 && self.gamma >= 0.0) {
            return Err(Error::Config("lambda and gamma must be >= 0".into()));
        }
        if let Some(s) = self.mi_sigma {
            if !(s > 0.0) {
                return Err(Error::Config(format!("mi_sigma must be positive, got {s}")));
            }
        }
        Ok(())
    }

    pub fn sigma(&self) -> f64 {
        self.mi_sigma.unwrap_or(1.0 / (self.mi_bins - 1) as f64)
    }
}

fn same_shape(g: &Graph, a: Var, b: Var, op: &str) -> Result<Vec<usize>> {
    let (sa, sb) = (g.shape(a), g.shape(b));
    if sa != sb {
        return Err(Error::Dims(format!("{op}: {sa:?} vs {sb:?}")));
    }
    Ok(sa)
}

/// `−mean_p cross²/(var_f·var_w + ε)` with sums over the cube of side `cube`
/// centered at `p`, cropped at the borders.
pub fn lncc_loss(g: &Graph, f: Var, w: Var, cube: usize) -> Result<Var> {
    let shape = same_shape(g, f, w, "lncc")?;
    if cube < 1 || cube % 2 == 0 {
        return Err(Error::Config(format!("cube length must be odd, got {cube}")));
    }
    let r = cube / 2;
    let counts = box_sum_values(&Tensor::full(&shape, 1.0), r)?;
    let inv_n = g.constant(Tensor::new(&shape, counts.data().iter().map(|&c| 1.0 / c).collect())?);
    let sf = g.box_sum(f, r)?;
    let sw = g.box_sum(w, r)?;
    let sff = g.box_sum(g.square(f), r)?;
    let sww = g.box_sum(g.square(w), r)?;
    let sfw = g.box_sum(g.mul(f, w)?, r)?;
    let cross = g.sub(sfw, g.mul(g.mul(sf, sw)?, inv_n)?)?;
    let var_f = g.sub(sff, g.mul(g.square(sf), inv_n)?)?;
    let var_w = g.sub(sww, g.mul(g.square(sw), inv_n)?)?;
    let denom = g.add_scalar(g.mul(var_f, var_w)?, DENOM_EPS);
    let cc = g.div(g.square(cross), denom)?;
    Ok(g.neg(g.mean(cc)))
}

/// `−MI(f, w)` from a Gaussian-Parzen joint histogram over `bins` centers on `[0, 1]`.
pub fn mi_loss(g: &Graph, f: Var, w: Var, bins: usize, sigma: f64) -> Result<Var> {
    Ok(g.neg(mutual_information(g, f, w, bins, sigma)?))
}

pub fn mutual_information(g: &Graph, f: Var, w: Var, bins: usize, sigma: f64) -> Result<Var> {
    let shape = same_shape(g, f, w, "mi")?;
    let n: usize = shape.iter().product();
    let pf = g.parzen_weights(f, bins, sigma)?;
    let pw = g.parzen_weights(w, bins, sigma)?;
    let joint = g.scale(g.matmul(g.permute(pf, &[1, 0])?, pw)?, 1.0 / n as Real);
    let mf = g.sum_axis(joint, 1)?;
    let mw = g.sum_axis(joint, 0)?;
    let plogp = |p: Var| -> Result<Var> { Ok(g.sum(g.mul(p, g.log(g.add_scalar(p, LOG_EPS))?)?)) };
    let (hj, hf, hw) = (plogp(joint)?, plogp(mf)?, plogp(mw)?);
    Ok(g.sub(g.sub(hj, hf)?, hw)?)
}

/// Mean over the 9 (component, axis) pairs of the mean squared forward difference.
pub fn diffusion_loss(g: &Graph, u: Var) -> Result<Var> {
    let shape = g.shape(u);
    if shape.len() != 4 || shape[0] != 3 {
        return Err(Error::Dims(format!("expected a [3, Z, Y, X] field, got {shape:?}")));
    }
    let mut total: Option<Var> = None;
    for axis in 1..4 {
        let n = shape[axis];
        if n < 2 {
            continue;
        }
        let hi = g.slice(u, axis, 1, n)?;
        let lo = g.slice(u, axis, 0, n - 1)?;
        let term = g.mean(g.square(g.sub(hi, lo)?));
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    Ok(match total {
        Some(t) => g.scale(t, 1.0 / 3.0),
        None => g.constant(Tensor::scalar(0.0)),
    })
}

/// `1 − mean_k 2Σ f·w / max(Σf² + Σw², ε)` over the `K` leading channels.
pub fn dice_seg_loss(g: &Graph, fs: Var, ws: Var) -> Result<Var> {
    let shape = same_shape(g, fs, ws, "dice")?;
    let k = shape[0];
    if k == 0 || shape.len() < 2 {
        return Err(Error::Invalid("dice loss needs at least one foreground class".into()));
    }
    let m: usize = shape[1..].iter().product();
    let f2 = g.reshape(fs, &[k, m])?;
    let w2 = g.reshape(ws, &[k, m])?;
    let inter = g.sum_axis(g.mul(f2, w2)?, 1)?;
    let denom = g.add(g.sum_axis(g.square(f2), 1)?, g.sum_axis(g.square(w2), 1)?)?;
    // max(d, ε) = d + relu(ε − d), exact whenever d ≥ ε
    let denom = g.add(denom, g.relu(g.add_scalar(g.neg(denom), DENOM_EPS)))?;
    let ratio = g.div(g.scale(inter, 2.0), denom)?;
    Ok(g.add_scalar(g.neg(g.mean(ratio)), 1.0))
}

/// One-hot label stacks `[K, Z, Y, X]` for the segmentation term.
#[derive(Debug, Clone, Copy)]
pub struct SegPair {
    pub fixed: Var,
    pub moving: Var,
}

/// Individual terms of the total loss (`seg` only when enabled).
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub sim: Var,
    pub smooth: Var,
    pub seg: Option<Var>,
    pub warped: Var,
}

/// `L_sim(f, m∘φ) + λ·L_smooth(u) + γ·L_seg(f_s, m_s∘φ)`.
pub fn total_loss(g: &Graph, fixed: Var, moving: Var, field: Var, masks: Option<SegPair>, cfg: &LossConfig) -> Result<LossTerms> {
    cfg.validate()?;
    let warped = g.warp(moving, field)?;
    let sim = match cfg.sim_kind {
        SimKind::Lncc => lncc_loss(g, fixed, warped, cfg.lncc_cube)?,
        SimKind::Mi => mi_loss(g, fixed, warped, cfg.mi_bins, cfg.sigma())?,
    };
    let smooth = diffusion_loss(g, field)?;
    let mut total = g.add(sim, g.scale(smooth, cfg.lambda as Real))?;
    let seg = if cfg.use_seg {
        let pair = masks.ok_or_else(|| Error::Invalid("segmentation loss enabled but no masks given".into()))?;
        let warped_mask = g.warp(pair.moving, field)?;
        let seg = dice_seg_loss(g, pair.fixed, warped_mask)?;
        total = g.add(total, g.scale(seg, cfg.gamma as Real))?;
        Some(seg)
    } else {
        None
    };
    Ok(LossTerms {
        total,
        sim,
        smooth,
        seg,
        warped,
    })
}
