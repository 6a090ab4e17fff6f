//! Finite-difference gradient checks over every differentiable operation, the
//! attention blocks and the losses.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blocks::{fab_forward, init_fab, init_oab, oab_forward, FabSpec};
use crate::error::Result;
use crate::losses::{diffusion_loss, dice_seg_loss, lncc_loss, mi_loss, total_loss, LossConfig, SegPair, SimKind};
use crate::params::{ParamStore, Scope};
use crate::tensor::{grad_check, GradCheckReport, Graph, Real, Tensor, Var, PAD_INDEX};
use crate::windowing::WindowSpec;

/// Maximum relative error accepted by the battery.
#[cfg(not(feature = "f64"))]
pub const TOLERANCE: f64 = 1e-2;
#[cfg(feature = "f64")]
pub const TOLERANCE: f64 = 1e-5;

/// Step of the sixth-order central difference stencil. Large enough that rounding
/// of the objective stays below the tolerance; the stencil spans three steps on
/// each side, which stays inside the smooth regions the inputs are built around
/// (0.1 away from kinks and lattice points).
#[cfg(not(feature = "f64"))]
pub const STEP: Real = 1e-2;
#[cfg(feature = "f64")]
pub const STEP: Real = 5e-3;

#[derive(Debug, Clone)]
pub struct CaseResult {
    pub name: String,
    pub report: GradCheckReport,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < TOLERANCE
    }
}

type Objective = Box<dyn Fn(&Graph, Var) -> Result<Var>>;

struct Case {
    name: String,
    input: Tensor,
    f: Objective,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi) as Real).collect()).expect("shape matches")
}

/// Magnitudes in `[lo, hi]` with random signs; keeps values away from kinks at 0.
fn signed(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let mut t = uniform(rng, shape, lo, hi);
    for v in t.data_mut() {
        if rng.random_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

/// `Σ r ⊙ (y − y₀)` with fixed positive weights. Subtracting the output at the
/// check point keeps the scalar near zero, so its rounding does not swamp the
/// central differences; the gradient is that of `Σ r ⊙ y`.
fn weighted_sum(g: &Graph, y: Var, baseline: &Tensor, seed: u64) -> Result<Var> {
    let shape = g.shape(y);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = g.constant(uniform(&mut rng, &shape, 0.5, 1.5));
    let centered = g.sub(y, g.constant(baseline.clone()))?;
    Ok(g.sum(g.mul(centered, r)?))
}

struct Builder {
    rng: ChaCha8Rng,
    cases: Vec<Case>,
}

impl Builder {
    fn seed(&mut self) -> u64 {
        self.rng.random()
    }

    /// Registers `Σ r ⊙ op(x)` checked at `input`.
    fn op(&mut self, name: &str, input: Tensor, op: impl Fn(&Graph, Var) -> Result<Var> + 'static) {
        let seed = self.seed();
        let baseline = {
            let g = Graph::new();
            let y = op(&g, g.constant(input.clone())).expect("battery case evaluates at its input");
            g.value(y)
        };
        self.cases.push(Case {
            name: name.to_string(),
            input,
            f: Box::new(move |g, v| weighted_sum(g, op(g, v)?, &baseline, seed)),
        });
    }

    fn scalar(&mut self, name: &str, input: Tensor, f: impl Fn(&Graph, Var) -> Result<Var> + 'static) {
        self.cases.push(Case {
            name: name.to_string(),
            input,
            f: Box::new(f),
        });
    }

    fn u(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        uniform(&mut self.rng, shape, lo, hi)
    }

    fn s(&mut self, shape: &[usize]) -> Tensor {
        signed(&mut self.rng, shape, 0.1, 1.0)
    }
}

/// Field whose sample points `p + u` stay inside the grid and off the lattice,
/// where trilinear interpolation is smooth.
fn interior_field(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    let mut data = Vec::with_capacity(3 * n * n * n);
    for c in 0..3 {
        for z in 0..n {
            for y in 0..n {
                for x in 0..n {
                    let p = [x, y, z][c] as f64;
                    let cell = rng.random_range(0..n - 1) as f64;
                    let target = cell + rng.random_range(0.1..0.9);
                    // keep displacements modest around the current voxel
                    let target = p + (target - p).clamp(-1.9, 1.9);
                    let t = target.clamp(0.1, n as f64 - 1.1);
                    let t = if (t - t.round()).abs() < 0.1 { t.floor() + 0.5 } else { t };
                    data.push((t - p) as Real);
                }
            }
        }
    }
    Tensor::new(&[3, n, n, n], data).expect("shape matches")
}

fn smooth_volume(n: usize, phase: f64) -> Tensor {
    let mut data = Vec::with_capacity(n * n * n);
    for z in 0..n {
        for y in 0..n {
            for x in 0..n {
                let (x, y, z) = (x as f64, y as f64, z as f64);
                data.push((0.5 + 0.3 * (0.7 * x + phase).sin() * (0.5 * y).cos() + 0.1 * (0.9 * z - phase).sin()) as Real);
            }
        }
    }
    Tensor::new(&[1, n, n, n], data).expect("shape matches")
}

fn elementwise(b: &mut Builder) {
    let shape = [2, 3, 4];
    let c = b.u(&shape, 0.5, 1.5);
    let c1 = c.clone();
    let x = b.s(&shape);
    b.op("add.lhs", x.clone(), move |g, v| Ok(g.add(v, g.constant(c1.clone()))?));
    let c1 = c.clone();
    b.op("add.rhs", x.clone(), move |g, v| Ok(g.add(g.constant(c1.clone()), v)?));
    let c1 = c.clone();
    b.op("sub.lhs", x.clone(), move |g, v| Ok(g.sub(v, g.constant(c1.clone()))?));
    let c1 = c.clone();
    b.op("sub.rhs", x.clone(), move |g, v| Ok(g.sub(g.constant(c1.clone()), v)?));
    let c1 = c.clone();
    b.op("mul.lhs", x.clone(), move |g, v| Ok(g.mul(v, g.constant(c1.clone()))?));
    let c1 = c.clone();
    b.op("mul.rhs", x.clone(), move |g, v| Ok(g.mul(g.constant(c1.clone()), v)?));
    let c1 = c.clone();
    b.op("div.numerator", x.clone(), move |g, v| Ok(g.div(v, g.constant(c1.clone()))?));
    let num = x.clone();
    b.op("div.denominator", c.clone(), move |g, v| Ok(g.div(g.constant(num.clone()), v)?));
    b.op("add_scalar", x.clone(), |g, v| Ok(g.add_scalar(v, 0.7)));
    b.op("scale", x.clone(), |g, v| Ok(g.scale(v, -1.3)));
    b.op("neg", x.clone(), |g, v| Ok(g.neg(v)));
    b.op("square", x.clone(), |g, v| Ok(g.square(v)));
    b.op("exp", x.clone(), |g, v| Ok(g.exp(v)));
    b.op("log", c.clone(), |g, v| Ok(g.log(v)?));
    b.op("sqrt", c.clone(), |g, v| Ok(g.sqrt(v)?));
    b.op("powf", c.clone(), |g, v| Ok(g.powf(v, 1.7)?));
    b.op("sigmoid", x.clone(), |g, v| Ok(g.sigmoid(v)));
    b.op("gelu", x.clone(), |g, v| Ok(g.gelu(v)));
    b.op("relu", x.clone(), |g, v| Ok(g.relu(v)));
    b.op("leaky_relu", x, |g, v| Ok(g.leaky_relu(v, 0.2)));
}

fn reductions_and_norms(b: &mut Builder) {
    let x = b.s(&[3, 4, 5]);
    b.op("softmax", x.clone(), |g, v| Ok(g.softmax(v, 1)?));
    b.op("sum", x.clone(), |g, v| Ok(g.sum(v)));
    b.op("mean", x.clone(), |g, v| Ok(g.mean(v)));
    b.op("sum_axis", x.clone(), |g, v| Ok(g.sum_axis(v, 2)?));
    b.op("mean_axis", x.clone(), |g, v| Ok(g.mean_axis(v, 0)?));
    let (gain, bias) = (b.u(&[5], 0.5, 1.5), b.s(&[5]));
    let (g1, b1) = (gain.clone(), bias.clone());
    b.op("layer_norm.x", x.clone(), move |g, v| {
        Ok(g.layer_norm(v, Some(g.constant(g1.clone())), Some(g.constant(b1.clone())))?)
    });
    let (x1, b1) = (x.clone(), bias.clone());
    b.op("layer_norm.gain", gain.clone(), move |g, v| {
        Ok(g.layer_norm(g.constant(x1.clone()), Some(v), Some(g.constant(b1.clone())))?)
    });
    let (x1, g1) = (x.clone(), gain);
    b.op("layer_norm.bias", bias, move |g, v| {
        Ok(g.layer_norm(g.constant(x1.clone()), Some(g.constant(g1.clone())), Some(v))?)
    });
    b.op("layer_norm.plain", x, |g, v| Ok(g.layer_norm(v, None, None)?));
}

fn shapes(b: &mut Builder) {
    let x = b.s(&[2, 3, 4]);
    b.op("reshape", x.clone(), |g, v| Ok(g.reshape(v, &[4, 6])?));
    b.op("permute", x.clone(), |g, v| Ok(g.permute(v, &[2, 0, 1])?));
    let other = b.s(&[2, 2, 4]);
    b.op("concat", x.clone(), move |g, v| Ok(g.concat(&[g.constant(other.clone()), v], 1)?));
    b.op("slice", x.clone(), |g, v| Ok(g.slice(v, 2, 1, 3)?));
    b.op("split", x.clone(), |g, v| Ok(g.split(v, 1, &[1, 2])?[1]));
    b.op("pad", x.clone(), |g, v| Ok(g.pad(v, &[(0, 1), (2, 0), (1, 1)])?));
    let idx = Arc::new(vec![5, 0, PAD_INDEX, 23, 5, 11, 7, PAD_INDEX]);
    b.op("gather", x.clone(), move |g, v| Ok(g.gather(v, idx.clone(), &[2, 4])?));
    let rows = Arc::new(vec![3, PAD_INDEX, 0, 3, 5]);
    b.op("gather_rows", x.clone(), move |g, v| Ok(g.gather_rows(v, rows.clone(), &[5, 4])?));
    b.op("tile", x.clone(), |g, v| Ok(g.tile(v, 3)?));
    let bias = b.s(&[4]);
    let b1 = bias.clone();
    b.op("bias_add.x", x.clone(), move |g, v| Ok(g.bias_add(v, g.constant(b1.clone()))?));
    let x1 = x.clone();
    b.op("bias_add.b", bias.clone(), move |g, v| Ok(g.bias_add(g.constant(x1.clone()), v)?));
    let b1 = bias.clone();
    b.op("scale_rows.x", x.clone(), move |g, v| Ok(g.scale_rows(v, g.constant(b1.clone()))?));
    b.op("scale_rows.s", bias, move |g, v| Ok(g.scale_rows(g.constant(x.clone()), v)?));
}

fn products(b: &mut Builder) {
    let (a, m) = (b.s(&[2, 3, 4]), b.s(&[2, 4, 5]));
    let m1 = m.clone();
    b.op("matmul.a", a.clone(), move |g, v| Ok(g.matmul(v, g.constant(m1.clone()))?));
    let a1 = a.clone();
    b.op("matmul.b", m, move |g, v| Ok(g.matmul(g.constant(a1.clone()), v)?));
    let n = b.s(&[2, 5, 4]);
    let n1 = n.clone();
    b.op("matmul_nt.a", a.clone(), move |g, v| Ok(g.matmul_nt(v, g.constant(n1.clone()))?));
    b.op("matmul_nt.b", n, move |g, v| Ok(g.matmul_nt(g.constant(a.clone()), v)?));
    let (x, w, bias) = (b.s(&[3, 2, 4]), b.s(&[4, 5]), b.s(&[5]));
    let (w1, b1) = (w.clone(), bias.clone());
    b.op("linear.x", x.clone(), move |g, v| {
        Ok(g.linear(v, g.constant(w1.clone()), Some(g.constant(b1.clone())))?)
    });
    let (x1, b1) = (x.clone(), bias.clone());
    b.op("linear.w", w.clone(), move |g, v| {
        Ok(g.linear(g.constant(x1.clone()), v, Some(g.constant(b1.clone())))?)
    });
    b.op("linear.b", bias, move |g, v| Ok(g.linear(g.constant(x.clone()), g.constant(w.clone()), Some(v))?));
}

fn spatial(b: &mut Builder) {
    let (x, w, bias) = (b.s(&[2, 5, 4, 6]), b.s(&[3, 2, 3, 3, 3]), b.s(&[3]));
    for (stride, pad) in [(1, 1), (2, 1)] {
        let (w1, b1) = (w.clone(), bias.clone());
        b.op(&format!("conv3d.x.s{stride}"), x.clone(), move |g, v| {
            Ok(g.conv3d(v, g.constant(w1.clone()), Some(g.constant(b1.clone())), stride, pad)?)
        });
        let (x1, b1) = (x.clone(), bias.clone());
        b.op(&format!("conv3d.w.s{stride}"), w.clone(), move |g, v| {
            Ok(g.conv3d(g.constant(x1.clone()), v, Some(g.constant(b1.clone())), stride, pad)?)
        });
        let (x1, w1) = (x.clone(), w.clone());
        b.op(&format!("conv3d.b.s{stride}"), bias.clone(), move |g, v| {
            Ok(g.conv3d(g.constant(x1.clone()), g.constant(w1.clone()), Some(v), stride, pad)?)
        });
    }
    let ps = b.s(&[16, 2, 1, 2]);
    b.op("pixel_shuffle", ps, |g, v| Ok(g.pixel_shuffle(v, 2)?));
    let up = b.s(&[2, 3, 2, 4]);
    b.op("upsample_trilinear", up, |g, v| Ok(g.upsample_trilinear(v)?));
    let bx = b.s(&[2, 5, 4, 6]);
    b.op("box_sum", bx, |g, v| Ok(g.box_sum(v, 1)?));
    let pz = b.u(&[2, 7], 0.05, 0.95);
    b.op("parzen_weights", pz, |g, v| Ok(g.parzen_weights(v, 6, 0.2)?));

    let n = 5;
    let field = interior_field(&mut b.rng, n);
    let moving = b.u(&[2, n, n, n], 0.0, 1.0);
    let f1 = field.clone();
    b.op("warp.moving", moving.clone(), move |g, v| Ok(g.warp(v, g.constant(f1.clone()))?));
    b.op("warp.field", field, move |g, v| Ok(g.warp(g.constant(moving.clone()), v)?));
}

/// Store with attention tables and projections drawn wider than at
/// initialization, so the attention maps are far from uniform.
fn spread_params(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    for t in store.tensors_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.3..0.3) as Real;
        }
    }
}

fn attention_blocks(b: &mut Builder) {
    let (dim, heads) = (8, 2);
    let grid = [8, 4, 4];
    let tokens: usize = grid.iter().product();
    let x = b.s(&[tokens, dim]);

    for (name, shifted, use_ca) in [("fab.shifted", true, true), ("fab.plain", false, true), ("swin.shifted", true, false)] {
        let mut store = ParamStore::new();
        let ca = use_ca.then_some(3);
        init_fab(&mut store, "blk", dim, heads, [4; 3], ca, &mut b.rng).expect("fresh store");
        spread_params(&mut store, &mut b.rng);
        let spec = FabSpec {
            dim,
            heads,
            p: [4; 3],
            shifted,
            alpha: 0.5,
            use_ca,
        };
        let store = Arc::new(store);
        let s1 = store.clone();
        b.op(&format!("{name}.x"), x.clone(), move |g, v| {
            let scope = Scope::new(g, &s1, false);
            fab_forward(&scope, "blk", v, grid, &spec)
        });
        for param in ["blk.rpb", "blk.qkv.w"].into_iter().chain(use_ca.then_some("blk.ca.fc1.w")) {
            let (s1, x1) = (store.clone(), x.clone());
            let init = store.get(param).expect("initialized").clone();
            b.op(&format!("{name}.{param}"), init, move |g, v| {
                let scope = Scope::new(g, &s1, false);
                scope.bind(param, v)?;
                fab_forward(&scope, "blk", g.constant(x1.clone()), grid, &spec)
            });
        }
    }

    let spec = WindowSpec::cubic(4, 0.5);
    let mut store = ParamStore::new();
    init_oab(&mut store, "oab", dim, heads, &spec, &mut b.rng).expect("fresh store");
    spread_params(&mut store, &mut b.rng);
    let store = Arc::new(store);
    let s1 = store.clone();
    b.op("oab.x", x.clone(), move |g, v| {
        let scope = Scope::new(g, &s1, false);
        oab_forward(&scope, "oab", v, grid, &spec, heads)
    });
    for param in ["oab.rpb", "oab.qkv.w"] {
        let (s1, x1) = (store.clone(), x.clone());
        let init = store.get(param).expect("initialized").clone();
        b.op(&format!("oab.{param}"), init, move |g, v| {
            let scope = Scope::new(g, &s1, false);
            scope.bind(param, v)?;
            oab_forward(&scope, "oab", g.constant(x1.clone()), grid, &spec, heads)
        });
    }
}

fn losses(b: &mut Builder) {
    let n = 11;
    let fixed = smooth_volume(n, 0.0);
    let moving = smooth_volume(n, 0.8);
    let noisy = {
        let mut t = moving.clone();
        for v in t.data_mut() {
            *v += b.rng.random_range(-0.1..0.1) as Real;
        }
        t
    };
    let f1 = fixed.clone();
    b.scalar("lncc_loss", noisy.clone(), move |g, v| lncc_loss(g, g.constant(f1.clone()), v, 9));
    let f1 = fixed.clone();
    b.scalar("mi_loss", noisy.clone(), move |g, v| mi_loss(g, g.constant(f1.clone()), v, 8, 1.0 / 7.0));
    let field = interior_field(&mut b.rng, n);
    b.scalar("diffusion_loss", field.clone(), |g, v| diffusion_loss(g, v));
    let seg_f = b.u(&[2, n, n, n], 0.0, 1.0);
    let seg_w = b.u(&[2, n, n, n], 0.0, 1.0);
    b.scalar("dice_seg_loss", seg_w.clone(), move |g, v| dice_seg_loss(g, g.constant(seg_f.clone()), v));

    let seg_f = b.u(&[2, n, n, n], 0.0, 1.0);
    for sim_kind in [SimKind::Lncc, SimKind::Mi] {
        let cfg = LossConfig {
            sim_kind,
            lambda: 1.0,
            gamma: 1.0,
            use_seg: true,
            mi_bins: 8,
            ..LossConfig::default()
        };
        let (f1, m1, sf, sw) = (fixed.clone(), moving.clone(), seg_f.clone(), seg_w.clone());
        let name = match sim_kind {
            SimKind::Lncc => "total_loss.lncc",
            SimKind::Mi => "total_loss.mi",
        };
        b.scalar(name, field.clone(), move |g, v| {
            let masks = SegPair {
                fixed: g.constant(sf.clone()),
                moving: g.constant(sw.clone()),
            };
            Ok(total_loss(g, g.constant(f1.clone()), g.constant(m1.clone()), v, Some(masks), &cfg)?.total)
        });
    }
}

/// Names of all battery cases, in execution order.
pub fn case_names(seed: u64) -> Vec<String> {
    build(seed).into_iter().map(|c| c.name).collect()
}

fn build(seed: u64) -> Vec<Case> {
    let mut b = Builder {
        rng: ChaCha8Rng::seed_from_u64(seed),
        cases: Vec::new(),
    };
    elementwise(&mut b);
    reductions_and_norms(&mut b);
    shapes(&mut b);
    products(&mut b);
    spatial(&mut b);
    attention_blocks(&mut b);
    losses(&mut b);
    b.cases
}

/// Runs every case; `progress` sees each result as it completes.
pub fn run(seed: u64, mut progress: impl FnMut(&CaseResult)) -> Result<Vec<CaseResult>> {
    build(seed)
        .into_iter()
        .map(|case| {
            let report = grad_check(&case.f, &case.input, STEP)?;
            let r = CaseResult {
                name: case.name,
                report,
            };
            progress(&r);
            Ok(r)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let names = case_names(0);
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
        assert!(names.iter().any(|n| n == "warp.field"));
    }

    #[test]
    fn interior_field_avoids_lattice_and_borders() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 5;
        let f = interior_field(&mut rng, n);
        for (i, &u) in f.data().iter().enumerate() {
            let c = i / (n * n * n);
            let r = i % (n * n * n);
            let p = [r % n, (r / n) % n, r / (n * n)][c] as f64;
            let q = p + u as f64;
            assert!(q >= 0.09 && q <= n as f64 - 1.09, "{q}");
            assert!((q - q.round()).abs() >= 0.09, "{q}");
        }
    }
}
