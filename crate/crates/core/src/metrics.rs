//! Registration quality metrics: overlap, surface distance, Jacobian
//! statistics, landmark error and the Wilcoxon rank-sum test.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::losses::lncc_loss;
use crate::tensor::Graph;
use crate::volume::{DisplacementField, LabelMask, LandmarkSet, Spacing, Volume};
use crate::warp::map_landmarks;

fn check_same(a: &LabelMask, b: &LabelMask) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Dims(format!("masks {:?} and {:?} differ", a.dims(), b.dims())));
    }
    Ok(())
}

/// `2|A∩B| / (|A| + |B|)` for one label; 1 when the label is absent from both.
pub fn dice_label(a: &LabelMask, b: &LabelMask, label: u8) -> Result<f64> {
    check_same(a, b)?;
    let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (ia, ib) = (x == label, y == label);
        na += ia as usize;
        nb += ib as usize;
        both += (ia && ib) as usize;
    }
    Ok(if na + nb == 0 {
        1.0
    } else {
        2.0 * both as f64 / (na + nb) as f64
    })
}

/// Per-label DSC and their mean.
pub fn dice(a: &LabelMask, b: &LabelMask, labels: &[u8]) -> Result<(Vec<(u8, f64)>, f64)> {
    if labels.is_empty() {
        return Err(Error::Invalid("no labels requested".into()));
    }
    let per = labels
        .iter()
        .map(|&l| Ok((l, dice_label(a, b, l)?)))
        .collect::<Result<Vec<_>>>()?;
    let mean = per.iter().map(|p| p.1).sum::<f64>() / per.len() as f64;
    Ok((per, mean))
}

/// Foreground voxels of `label` with at least one background 6-neighbor (grid
/// edges count as background), as `(x, y, z)`.
pub fn boundary_voxels(m: &LabelMask, label: u8) -> Vec<[usize; 3]> {
    let [nx, ny, nz] = m.dims();
    let inside = |x: isize, y: isize, z: isize| {
        x >= 0
            && y >= 0
            && z >= 0
            && (x as usize) < nx
            && (y as usize) < ny
            && (z as usize) < nz
            && m.get(x as usize, y as usize, z as usize) == label
    };
    let mut out = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if m.get(x, y, z) != label {
                    continue;
                }
                let (xi, yi, zi) = (x as isize, y as isize, z as isize);
                let nbrs = [
                    (xi - 1, yi, zi),
                    (xi + 1, yi, zi),
                    (xi, yi - 1, zi),
                    (xi, yi + 1, zi),
                    (xi, yi, zi - 1),
                    (xi, yi, zi + 1),
                ];
                if nbrs.iter().any(|&(a, b, c)| !inside(a, b, c)) {
                    out.push([x, y, z]);
                }
            }
        }
    }
    out
}

/// Squared distance transform along one line: `d(p) = min_q ((p − q)·h)² + f(q)`
/// (lower envelope of parabolas).
fn edt_line(f: &[f64], h: f64, out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut zb = vec![0f64; n + 1];
    let mut k: isize = -1;
    let pos = |q: usize| q as f64 * h;
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            if k < 0 {
                k = 0;
                v[0] = q;
                zb[0] = f64::NEG_INFINITY;
                zb[1] = f64::INFINITY;
                break;
            }
            let p = v[k as usize];
            let s = ((f[q] + pos(q) * pos(q)) - (f[p] + pos(p) * pos(p))) / (2.0 * (pos(q) - pos(p)));
            if s <= zb[k as usize] {
                k -= 1;
                continue;
            }
            k += 1;
            v[k as usize] = q;
            zb[k as usize] = s;
            zb[k as usize + 1] = f64::INFINITY;
            break;
        }
    }
    if k < 0 {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut j = 0usize;
    for (p, o) in out.iter_mut().enumerate() {
        while zb[j + 1] < pos(p) {
            j += 1;
        }
        let d = pos(p) - pos(v[j]);
        *o = d * d + f[v[j]];
    }
}

/// Exact Euclidean distance (mm) from every voxel to the nearest site.
fn distance_map(dims: [usize; 3], spacing: Spacing, sites: &[[usize; 3]]) -> Vec<f64> {
    let [nx, ny, nz] = dims;
    let idx = |x: usize, y: usize, z: usize| (z * ny + y) * nx + x;
    let mut d = vec![f64::INFINITY; nx * ny * nz];
    for s in sites {
        d[idx(s[0], s[1], s[2])] = 0.0;
    }
    let lens = [nx, ny, nz];
    for axis in 0..3 {
        let n = lens[axis];
        let mut line = vec![0f64; n];
        let mut out = vec![0f64; n];
        let (o1, o2) = match axis {
            0 => (ny, nz),
            1 => (nx, nz),
            _ => (nx, ny),
        };
        for b in 0..o2 {
            for a in 0..o1 {
                let at = |i: usize| match axis {
                    0 => idx(i, a, b),
                    1 => idx(a, i, b),
                    _ => idx(a, b, i),
                };
                for (i, l) in line.iter_mut().enumerate() {
                    *l = d[at(i)];
                }
                edt_line(&line, spacing[axis], &mut out);
                for (i, &o) in out.iter().enumerate() {
                    d[at(i)] = o;
                }
            }
        }
    }
    d.iter().map(|v| v.sqrt()).collect()
}

/// Linear-interpolated percentile (`q` in `[0, 100]`) of unsorted values.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let h = (v.len() - 1) as f64 * q / 100.0;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

/// 95th percentile of the pooled boundary-to-boundary distances in both directions, in mm.
pub fn hd95(a: &LabelMask, b: &LabelMask, label: u8, spacing: Spacing) -> Result<f64> {
    check_same(a, b)?;
    let ba = boundary_voxels(a, label);
    let bb = boundary_voxels(b, label);
    if ba.is_empty() {
        return Err(Error::Invalid(format!("label {label} is absent from the first mask")));
    }
    if bb.is_empty() {
        return Err(Error::Invalid(format!("label {label} is absent from the second mask")));
    }
    let dims = a.dims();
    let da = distance_map(dims, spacing, &ba);
    let db = distance_map(dims, spacing, &bb);
    let idx = |p: &[usize; 3]| (p[2] * dims[1] + p[1]) * dims[0] + p[0];
    let mut pooled: Vec<f64> = ba.iter().map(|p| db[idx(p)]).collect();
    pooled.extend(bb.iter().map(|p| da[idx(p)]));
    Ok(percentile(&pooled, 95.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JacobianStats {
    /// fraction of voxels with det ≤ 0
    pub fold_fraction: f64,
    /// standard deviation of log det over voxels with det > 0
    pub sdlogj: f64,
}

/// `det(I + ∇u)` per voxel (x fastest), central differences and one-sided at borders.
pub fn jacobian_determinant(field: &DisplacementField) -> Vec<f64> {
    let [nx, ny, nz] = field.dims();
    let n = [nx, ny, nz];
    let get = |c: usize, p: [usize; 3]| field.get(c, p[0], p[1], p[2]) as f64;
    let mut out = Vec::with_capacity(nx * ny * nz);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let p = [x, y, z];
                let mut j = [[0f64; 3]; 3];
                for axis in 0..3 {
                    if n[axis] < 2 {
                        continue;
                    }
                    let (lo, hi) = (p[axis].saturating_sub(1), (p[axis] + 1).min(n[axis] - 1));
                    let (mut pl, mut ph) = (p, p);
                    pl[axis] = lo;
                    ph[axis] = hi;
                    let h = (hi - lo) as f64;
                    for c in 0..3 {
                        j[c][axis] = (get(c, ph) - get(c, pl)) / h;
                    }
                }
                for (d, row) in j.iter_mut().enumerate() {
                    row[d] += 1.0;
                }
                out.push(
                    j[0][0] * (j[1][1] * j[2][2] - j[1][2] * j[2][1]) - j[0][1] * (j[1][0] * j[2][2] - j[1][2] * j[2][0])
                        + j[0][2] * (j[1][0] * j[2][1] - j[1][1] * j[2][0]),
                );
            }
        }
    }
    out
}

pub fn jacobian_stats(field: &DisplacementField) -> JacobianStats {
    let det = jacobian_determinant(field);
    let folds = det.iter().filter(|&&d| d <= 0.0).count();
    let logs: Vec<f64> = det.iter().filter(|&&d| d > 0.0).map(|d| d.ln()).collect();
    let sdlogj = if logs.is_empty() {
        0.0
    } else {
        let mean = logs.iter().sum::<f64>() / logs.len() as f64;
        (logs.iter().map(|l| (l - mean) * (l - mean)).sum::<f64>() / logs.len() as f64).sqrt()
    };
    JacobianStats {
        fold_fraction: folds as f64 / det.len() as f64,
        sdlogj,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreReport {
    pub per_landmark: Vec<(String, f64)>,
    pub mean: f64,
    /// sample standard deviation (0 for a single landmark)
    pub sd: f64,
}

/// Euclidean distance (mm) between same-named landmarks.
pub fn tre(reference: &LandmarkSet, registered: &LandmarkSet) -> Result<TreReport> {
    let ra: BTreeSet<&str> = reference.points().iter().map(|p| p.name.as_str()).collect();
    let rb: BTreeSet<&str> = registered.points().iter().map(|p| p.name.as_str()).collect();
    if ra != rb {
        let only_a: Vec<_> = ra.difference(&rb).collect();
        let only_b: Vec<_> = rb.difference(&ra).collect();
        return Err(Error::Invalid(format!(
            "landmark names differ: only in first {only_a:?}, only in second {only_b:?}"
        )));
    }
    if ra.is_empty() {
        return Err(Error::Invalid("no landmarks".into()));
    }
    let per: Vec<(String, f64)> = reference
        .points()
        .iter()
        .map(|p| {
            let q = registered.get(&p.name).expect("name sets are equal");
            let d = (0..3).map(|a| (p.position[a] - q.position[a]).powi(2)).sum::<f64>().sqrt();
            (p.name.clone(), d)
        })
        .collect();
    let n = per.len() as f64;
    let mean = per.iter().map(|p| p.1).sum::<f64>() / n;
    let sd = if per.len() > 1 {
        (per.iter().map(|p| (p.1 - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Ok(TreReport {
        per_landmark: per,
        mean,
        sd,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankSumResult {
    /// sum of the midranks of the first sample
    pub rank_sum: f64,
    /// standardized statistic (tie-corrected, no continuity correction)
    pub z: f64,
    /// two-sided p-value
    pub p_value: f64,
    pub exact: bool,
}

/// Largest `n + m` handled by exact enumeration.
pub const EXACT_LIMIT: usize = 10;

fn midranks(x: &[f64], y: &[f64]) -> Vec<f64> {
    let mut all: Vec<(f64, usize)> = x.iter().chain(y).copied().zip(0..).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut ranks = vec![0.0; all.len()];
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for item in &all[i..=j] {
            ranks[item.1] = r;
        }
        i = j + 1;
    }
    ranks
}

struct RankSetup {
    ranks: Vec<f64>,
    n: usize,
    observed: f64,
    mean: f64,
    sd: f64,
}

fn setup(x: &[f64], y: &[f64]) -> Result<RankSetup> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::Invalid("rank-sum test needs two nonempty samples".into()));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Invalid("rank-sum test needs finite values".into()));
    }
    let ranks = midranks(x, y);
    let (n, m) = (x.len() as f64, y.len() as f64);
    let total = n + m;
    let observed = ranks[..x.len()].iter().sum();
    // tie correction: Σ (t³ − t) over tie groups
    let mut sorted = ranks.clone();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let mut ties = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        ties += t * t * t - t;
        i = j + 1;
    }
    let var = n * m / 12.0 * ((total + 1.0) - ties / (total * (total - 1.0)).max(1.0));
    Ok(RankSetup {
        ranks,
        n: x.len(),
        observed,
        mean: n * (total + 1.0) / 2.0,
        sd: var.max(0.0).sqrt(),
    })
}

/// Two-sided p from the normal approximation with continuity correction.
pub fn rank_sum_normal_p(x: &[f64], y: &[f64]) -> Result<f64> {
    let s = setup(x, y)?;
    Ok(normal_p(&s))
}

fn normal_p(s: &RankSetup) -> f64 {
    if s.sd == 0.0 {
        return 1.0;
    }
    let dev = ((s.observed - s.mean).abs() - 0.5).max(0.0) / s.sd;
    let phi = Normal::standard();
    (2.0 * (1.0 - phi.cdf(dev))).min(1.0)
}

/// Two-sided p by enumerating every assignment of the pooled midranks.
pub fn rank_sum_exact_p(x: &[f64], y: &[f64]) -> Result<f64> {
    let s = setup(x, y)?;
    Ok(exact_p(&s))
}

fn exact_p(s: &RankSetup) -> f64 {
    let total = s.ranks.len();
    let target = (s.observed - s.mean).abs() - 1e-9;
    let (mut extreme, mut count) = (0u64, 0u64);
    // every n-subset of the pooled ranks, as a bitmask
    for mask in 0u32..(1u32 << total) {
        if mask.count_ones() as usize != s.n {
            continue;
        }
        let sum: f64 = (0..total).filter(|&i| mask >> i & 1 == 1).map(|i| s.ranks[i]).sum();
        count += 1;
        if (sum - s.mean).abs() >= target {
            extreme += 1;
        }
    }
    extreme as f64 / count as f64
}

/// Wilcoxon rank-sum test; exact when `n + m ≤ EXACT_LIMIT`.
pub fn wilcoxon_rank_sum(x: &[f64], y: &[f64]) -> Result<RankSumResult> {
    let s = setup(x, y)?;
    let exact = s.ranks.len() <= EXACT_LIMIT;
    let p_value = if exact { exact_p(&s) } else { normal_p(&s) };
    let z = if s.sd == 0.0 { 0.0 } else { (s.observed - s.mean) / s.sd };
    Ok(RankSumResult {
        rank_sum: s.observed,
        z,
        p_value,
        exact,
    })
}

/// Evaluation summary; absent inputs leave their fields `null`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub dsc: Option<BTreeMap<String, f64>>,
    pub dsc_mean: Option<f64>,
    pub hd95: Option<BTreeMap<String, f64>>,
    pub hd95_mean: Option<f64>,
    pub fold_pct: Option<f64>,
    pub sdlogj: Option<f64>,
    pub tre_mean: Option<f64>,
    pub tre_sd: Option<f64>,
    pub sim_lncc: Option<f64>,
}

/// Fills the mask-based fields from fixed and warped masks, over labels present in either.
pub fn mask_report(report: &mut EvalReport, fixed: &LabelMask, warped: &LabelMask) -> Result<()> {
    let mut labels: BTreeSet<u8> = fixed.foreground_labels().into_iter().collect();
    labels.extend(warped.foreground_labels());
    let labels: Vec<u8> = labels.into_iter().collect();
    if labels.is_empty() {
        return Err(Error::Invalid("masks contain no foreground labels".into()));
    }
    let (per, mean) = dice(fixed, warped, &labels)?;
    report.dsc = Some(per.into_iter().map(|(l, v)| (l.to_string(), v)).collect());
    report.dsc_mean = Some(mean);
    let mut hd = BTreeMap::new();
    for &l in &labels {
        // a label missing on one side has no defined surface distance
        if let Ok(d) = hd95(fixed, warped, l, fixed.spacing()) {
            hd.insert(l.to_string(), d);
        }
    }
    if !hd.is_empty() {
        report.hd95_mean = Some(hd.values().sum::<f64>() / hd.len() as f64);
    }
    report.hd95 = Some(hd);
    Ok(())
}

pub fn field_report(report: &mut EvalReport, field: &DisplacementField) {
    let j = jacobian_stats(field);
    report.fold_pct = Some(100.0 * j.fold_fraction);
    report.sdlogj = Some(j.sdlogj);
}

/// Local normalized cross-correlation (cube 9) of the min-max normalized pair, in `[0, 1]`.
pub fn image_report(report: &mut EvalReport, fixed: &Volume, warped: &Volume) -> Result<()> {
    if fixed.dims() != warped.dims() {
        return Err(Error::Dims(format!("volumes {:?} and {:?} differ", fixed.dims(), warped.dims())));
    }
    let g = Graph::new();
    let f = g.constant(fixed.normalized().to_tensor());
    let w = g.constant(warped.normalized().to_tensor());
    let loss = lncc_loss(&g, f, w, 9)?;
    report.sim_lncc = Some(-(g.value(loss).item() as f64));
    Ok(())
}

/// TRE of fixed landmarks mapped through `p + u(p)` against their moving counterparts.
pub fn landmark_report(
    report: &mut EvalReport,
    fixed: &LandmarkSet,
    moving: &LandmarkSet,
    field: &DisplacementField,
) -> Result<TreReport> {
    let mapped = map_landmarks(fixed, field)?;
    let t = tre(moving, &mapped)?;
    report.tre_mean = Some(t.mean);
    report.tre_sd = Some(t.sd);
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cube(n: usize, lo: [usize; 3], side: usize, label: u8) -> LabelMask {
        LabelMask::from_fn([n; 3], [1.0; 3], |x, y, z| {
            let p = [x, y, z];
            if (0..3).all(|a| p[a] >= lo[a] && p[a] < lo[a] + side) {
                label
            } else {
                0
            }
        })
        .unwrap()
    }

    #[test]
    fn dice_cases() {
        let a = cube(6, [0; 3], 2, 1);
        let b = cube(6, [1, 0, 0], 2, 1);
        assert_eq!(dice_label(&a, &a, 1).unwrap(), 1.0);
        assert_eq!(dice_label(&a, &cube(6, [3; 3], 2, 1), 1).unwrap(), 0.0);
        assert_eq!(dice_label(&a, &b, 1).unwrap(), 0.5);
        assert_eq!(dice_label(&a, &b, 7).unwrap(), 1.0);
    }

    #[test]
    fn hd95_cases() {
        let a = cube(8, [1; 3], 4, 1);
        assert_eq!(hd95(&a, &a, 1, [1.0; 3]).unwrap(), 0.0);
        let p = cube(8, [1, 2, 2], 1, 1);
        let q = cube(8, [4, 2, 2], 1, 1);
        assert!((hd95(&p, &q, 1, [1.0; 3]).unwrap() - 3.0).abs() < 1e-12);
        let b = cube(8, [2, 1, 1], 4, 1);
        assert!((hd95(&a, &b, 1, [1.0; 3]).unwrap() - 1.0).abs() < 1e-12);
        let msg = hd95(&a, &cube(8, [0; 3], 1, 2), 2, [1.0; 3]).unwrap_err().to_string();
        assert!(msg.contains("first"), "{msg}");
    }

    #[test]
    fn edt_matches_brute_force_with_anisotropic_spacing() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let dims = [5, 4, 6];
        let spacing = [0.7, 1.3, 2.0];
        let sites: Vec<[usize; 3]> = (0..4)
            .map(|_| [rng.random_range(0..5), rng.random_range(0..4), rng.random_range(0..6)])
            .collect();
        let d = distance_map(dims, spacing, &sites);
        for z in 0..6 {
            for y in 0..4 {
                for x in 0..5 {
                    let brute = sites
                        .iter()
                        .map(|s| {
                            let dx = (x as f64 - s[0] as f64) * spacing[0];
                            let dy = (y as f64 - s[1] as f64) * spacing[1];
                            let dz = (z as f64 - s[2] as f64) * spacing[2];
                            (dx * dx + dy * dy + dz * dz).sqrt()
                        })
                        .fold(f64::INFINITY, f64::min);
                    assert!((d[(z * 4 + y) * 5 + x] - brute).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn percentile_interpolates() {
        assert_eq!(percentile(&[3.0, 1.0, 2.0], 50.0), 2.0);
        assert!((percentile(&[0.0, 10.0], 95.0) - 9.5).abs() < 1e-12);
    }

    #[test]
    fn jacobian_cases() {
        let zero = DisplacementField::zeros([5; 3], [1.0; 3]).unwrap();
        assert_eq!(jacobian_stats(&zero), JacobianStats { fold_fraction: 0.0, sdlogj: 0.0 });
        let dil = DisplacementField::from_fn([6; 3], [1.0; 3], |x, y, z| [0.1 * x as f32, 0.1 * y as f32, 0.1 * z as f32])
            .unwrap();
        for d in jacobian_determinant(&dil) {
            assert!((d - 1.331).abs() < 1e-4);
        }
        let s = jacobian_stats(&dil);
        assert_eq!(s.fold_fraction, 0.0);
        assert!(s.sdlogj < 1e-6);
        let flip = DisplacementField::from_fn([4; 3], [1.0; 3], |x, _, _| [-2.0 * x as f32, 0.0, 0.0]).unwrap();
        assert_eq!(jacobian_stats(&flip).fold_fraction, 1.0);
    }

    #[test]
    fn tre_cases() {
        use crate::volume::Landmark;
        let set = |pts: &[(&str, [f64; 3])]| {
            LandmarkSet::new(pts.iter().map(|(n, p)| Landmark { name: n.to_string(), position: *p }).collect()).unwrap()
        };
        let a = set(&[("a", [0.0; 3]), ("b", [1.0, 1.0, 1.0])]);
        assert_eq!(tre(&a, &a).unwrap().mean, 0.0);
        let shifted = set(&[("a", [3.0, 0.0, 0.0]), ("b", [4.0, 1.0, 1.0])]);
        let r = tre(&a, &shifted).unwrap();
        assert!(r.per_landmark.iter().all(|p| (p.1 - 3.0).abs() < 1e-12));
        let mixed = set(&[("a", [3.0, 4.0, 0.0]), ("b", [4.0, 5.0, 1.0])]);
        assert!((tre(&a, &mixed).unwrap().mean - 5.0).abs() < 1e-12);
        let other = set(&[("a", [0.0; 3]), ("c", [0.0; 3])]);
        let msg = tre(&a, &other).unwrap_err().to_string();
        assert!(msg.contains("\"b\"") && msg.contains("\"c\""), "{msg}");
    }

    #[test]
    fn wilcoxon_cases() {
        let r = wilcoxon_rank_sum(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap();
        assert!(r.exact);
        assert!((r.p_value - 0.1).abs() < 1e-12);
        let same = wilcoxon_rank_sum(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!((same.p_value - 1.0).abs() < 1e-9);
        let x: Vec<f64> = (0..8).map(|i| i as f64 * 1.3).collect();
        let y: Vec<f64> = (0..7).map(|i| i as f64 * 0.9 + 2.0).collect();
        let (a, b) = (wilcoxon_rank_sum(&x, &y).unwrap(), wilcoxon_rank_sum(&y, &x).unwrap());
        assert!(!a.exact);
        assert!((a.z + b.z).abs() < 1e-12);
        assert!((a.p_value - b.p_value).abs() < 1e-12);
        assert!(wilcoxon_rank_sum(&[], &[1.0]).is_err());
    }

    #[test]
    fn normal_p_uses_tie_correction() {
        // all values tied: zero variance → p = 1
        assert_eq!(rank_sum_normal_p(&[2.0; 6], &[2.0; 6]).unwrap(), 1.0);
    }

    #[test]
    fn exact_and_normal_paths_at_ten_observations() {
        // worst |exact − normal| over every tie-free arrangement, per split n/m
        let bound = [0.114, 0.040, 0.023, 0.021, 0.02, 0.021, 0.023, 0.040, 0.114];
        for n in 1..10usize {
            let mut worst: f64 = 0.0;
            for mask in 0u32..1 << 10 {
                if mask.count_ones() as usize != n {
                    continue;
                }
                let (x, y): (Vec<f64>, Vec<f64>) = {
                    let (a, b): (Vec<u32>, Vec<u32>) = (0..10).partition(|i| mask >> i & 1 == 1);
                    (a.iter().map(|&v| v as f64).collect(), b.iter().map(|&v| v as f64).collect())
                };
                let gap = (rank_sum_exact_p(&x, &y).unwrap() - rank_sum_normal_p(&x, &y).unwrap()).abs();
                worst = worst.max(gap);
            }
            assert!(worst <= bound[n - 1], "n={n}: {worst}");
        }
    }
}
