use std::fs;

use morphreg_core::blocks::{fab_forward, init_fab, init_oab, multi_head_attention, oab_forward, FabSpec};
use morphreg_core::losses::{dice_seg_loss, diffusion_loss, lncc_loss, mi_loss};
use morphreg_core::metrics::jacobian_determinant;
use morphreg_core::network::{Model, ModelConfig, Variant};
use morphreg_core::params::{ParamStore, Scope};
use morphreg_core::volume::{
    read_checkpoint, read_field, read_landmarks, read_mask, read_volume, sidecar_paths, write_checkpoint, write_field,
    write_landmarks, write_mask, write_volume, CheckpointEntry, DisplacementField, Landmark, LandmarkSet, LabelMask,
    Volume,
};
use morphreg_core::warp::warp_tensor;
use morphreg_core::windowing::{
    num_windows, overlapping_partition, partition_index, shift_mask, window_partition, WindowSpec,
};
use morphreg_core::{Graph, Real, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi) as Real).collect()).unwrap()
}

fn grid_tensor(c: usize, n: usize, f: impl Fn(usize, usize, usize, usize) -> f64) -> Tensor {
    let mut data = Vec::with_capacity(c * n * n * n);
    for ch in 0..c {
        for z in 0..n {
            for y in 0..n {
                for x in 0..n {
                    data.push(f(ch, x, y, z) as Real);
                }
            }
        }
    }
    Tensor::new(&[c, n, n, n], data).unwrap()
}

fn smooth_field(n: usize, amp: f64, phase: f64) -> Tensor {
    grid_tensor(3, n, |c, x, y, z| {
        let (x, y, z) = (x as f64, y as f64, z as f64);
        amp * (0.2 * x + 0.15 * y + c as f64 + phase).sin() * (0.17 * z + 0.5 * c as f64).cos()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_slices_sum_to_one(seed in 0u64..10_000, mag in prop::sample::select(vec![1.0, 10.0, 100.0, 1000.0]), axis in 0usize..3) {
        let g = Graph::new();
        let x = g.constant(random(&[3, 5, 7], -mag, mag, seed));
        let s = g.value(g.softmax(x, axis).unwrap());
        let shape = s.shape().to_vec();
        let strides = [shape[1] * shape[2], shape[2], 1];
        for base in 0..s.numel() {
            if (base / strides[axis]) % shape[axis] != 0 {
                continue;
            }
            let total: f64 = (0..shape[axis]).map(|i| s.data()[base + i * strides[axis]] as f64).sum();
            prop_assert!((total - 1.0).abs() <= 1e-5, "slice sum {total}");
        }
    }

    #[test]
    fn gradients_of_independent_subgraphs_add(seed in 0u64..10_000) {
        let (ta, tb) = (random(&[4, 3], -2.0, 2.0, seed), random(&[3, 5], -2.0, 2.0, seed + 1));
        let first = |a_t: &Tensor| {
            let g = Graph::new();
            let a = g.variable(a_t.clone());
            let y = g.sum(g.square(g.sigmoid(a)));
            g.backward(y).unwrap();
            g.grad(a).unwrap()
        };
        let second = |b_t: &Tensor| {
            let g = Graph::new();
            let b = g.variable(b_t.clone());
            let y = g.sum(g.gelu(g.scale(b, 1.5)));
            g.backward(y).unwrap();
            g.grad(b).unwrap()
        };
        let g = Graph::new();
        let (a, b) = (g.variable(ta.clone()), g.variable(tb.clone()));
        let y = g.add(g.sum(g.square(g.sigmoid(a))), g.sum(g.gelu(g.scale(b, 1.5)))).unwrap();
        g.backward(y).unwrap();
        prop_assert_eq!(g.grad(a).unwrap(), first(&ta));
        prop_assert_eq!(g.grad(b).unwrap(), second(&tb));
    }

    #[test]
    fn truncated_files_are_rejected(cut in 0usize..96, kind in 0usize..4) {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("item");
        // every fixture below is 96 raw bytes
        match kind {
            0 => {
                write_volume(&Volume::from_fn([4, 3, 2], [1.0; 3], |x, y, z| (x + y + z) as f32).unwrap(), &base).unwrap();
            }
            1 => {
                write_field(&DisplacementField::zeros([2; 3], [1.0; 3]).unwrap(), &base).unwrap();
            }
            2 => {
                write_mask(&LabelMask::from_fn([8, 4, 3], [1.0; 3], |x, _, _| (x % 3) as u8).unwrap(), &base).unwrap();
            }
            _ => {
                let e = CheckpointEntry { name: "w".into(), shape: vec![4, 6], data: vec![0.5; 24] };
                write_checkpoint(&base, &[e], serde_json::Value::Null).unwrap();
            }
        };
        let (_, raw) = sidecar_paths(&base);
        prop_assert_eq!(fs::metadata(&raw).unwrap().len(), 96);
        let bytes = fs::read(&raw).unwrap();
        fs::write(&raw, &bytes[..cut]).unwrap();
        let failed = match kind {
            0 => read_volume(&base).is_err(),
            1 => read_field(&base).is_err(),
            2 => read_mask(&base).is_err(),
            _ => read_checkpoint(&base).is_err(),
        };
        prop_assert!(failed);
    }

    #[test]
    fn truncated_headers_are_rejected(keep in 0.0f64..1.0) {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("v");
        write_volume(&Volume::zeros([2; 3], [1.0; 3]).unwrap(), &base).unwrap();
        let (json, _) = sidecar_paths(&base);
        let text = fs::read(&json).unwrap();
        let n = ((text.len() - 1) as f64 * keep) as usize;
        fs::write(&json, &text[..n]).unwrap();
        prop_assert!(read_volume(&base).is_err());

        let csv = dir.path().join("lm.csv");
        let set = LandmarkSet::new(vec![Landmark { name: "a".into(), position: [1.0, 2.0, 3.0] }]).unwrap();
        write_landmarks(&set, &csv).unwrap();
        let text = fs::read_to_string(&csv).unwrap();
        let line = text.lines().nth(1).unwrap();
        // drop at least the last coordinate
        let cut = line.rfind(',').unwrap();
        fs::write(&csv, format!("{}\n{}\n", text.lines().next().unwrap(), &line[..cut])).unwrap();
        prop_assert!(read_landmarks(&csv).is_err());
    }

    #[test]
    fn window_counts_match_volume_over_window(cx in 1usize..4, cy in 1usize..4, cz in 1usize..4, px in 1usize..5, py in 1usize..5, pz in 1usize..5) {
        let p = [px, py, pz];
        let grid = [cx * px, cy * py, cz * pz];
        let n: usize = grid.iter().product();
        prop_assert_eq!(num_windows(grid, p).unwrap(), cx * cy * cz);
        let g = Graph::new();
        let x = g.constant(random(&[n, 2], -1.0, 1.0, 3));
        let w = window_partition(&g, x, grid, p, [0; 3]).unwrap();
        prop_assert_eq!(g.shape(w), vec![cx * cy * cz, px * py * pz, 2]);
        let spec = WindowSpec { p, epsilon: 0.5 };
        let o = overlapping_partition(&g, x, grid, &spec).unwrap();
        prop_assert_eq!(g.shape(o), vec![cx * cy * cz, spec.overlap_tokens(), 2]);
        let shift = p.map(|v| v / 2);
        let mut idx = partition_index(grid, p, shift).unwrap();
        idx.sort_unstable();
        prop_assert!(idx.iter().enumerate().all(|(i, &r)| r as usize == i));
    }

    #[test]
    fn warp_is_linear_in_the_moving_image(seed in 0u64..10_000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let n = 6;
        let m1 = random(&[2, n, n, n], -1.0, 1.0, seed);
        let m2 = random(&[2, n, n, n], -1.0, 1.0, seed + 7);
        let u = random(&[3, n, n, n], -2.5, 2.5, seed + 13);
        let combo = |x: &Tensor, y: &Tensor| {
            let data = x.data().iter().zip(y.data()).map(|(&p, &q)| (a as Real) * p + (b as Real) * q).collect();
            Tensor::new(x.shape(), data).unwrap()
        };
        let lhs = warp_tensor(&combo(&m1, &m2), &u).unwrap();
        let rhs = combo(&warp_tensor(&m1, &u).unwrap(), &warp_tensor(&m2, &u).unwrap());
        prop_assert!(lhs.max_abs_diff(&rhs) <= 2e-5 * (a.abs() + b.abs() + 1.0) as Real);
    }

    #[test]
    fn warping_back_by_the_negated_field_is_near_identity(amp in 0.0f64..0.5, phase in 0.0f64..6.3) {
        let n = 24;
        let m = grid_tensor(1, n, |_, x, y, z| {
            ((0.3 * x as f64).sin() + (0.25 * y as f64 + 0.2 * z as f64).cos()) / 2.0
        });
        let u = smooth_field(n, amp, phase);
        let neg = Tensor::new(u.shape(), u.data().iter().map(|v| -v).collect()).unwrap();
        let back = warp_tensor(&warp_tensor(&m, &u).unwrap(), &neg).unwrap();
        let mut worst: Real = 0.0;
        for z in 2..n - 2 {
            for y in 2..n - 2 {
                for x in 2..n - 2 {
                    let i = (z * n + y) * n + x;
                    worst = worst.max((back.data()[i] - m.data()[i]).abs());
                }
            }
        }
        prop_assert!(worst < 0.05, "L-inf {worst}");
    }

    #[test]
    fn diffusion_is_nonnegative_and_zero_only_for_constants(seed in 0u64..10_000, c in prop::array::uniform3(-5.0f64..5.0)) {
        let g = Graph::new();
        let u = g.constant(random(&[3, 4, 5, 6], -1.0, 1.0, seed));
        let d = g.value(diffusion_loss(&g, u).unwrap()).item();
        prop_assert!(d > 0.0);
        let constant = grid_tensor(3, 5, |ch, _, _, _| c[ch]);
        let d0 = g.value(diffusion_loss(&g, g.constant(constant)).unwrap()).item();
        prop_assert_eq!(d0, 0.0);
    }

    #[test]
    fn dice_loss_is_bounded(seed in 0u64..10_000, k in 1usize..4, sparsity in 0.0f64..1.0) {
        let n = 5;
        let soft = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data = (0..k * n * n * n)
                .map(|_| if rng.random::<f64>() < sparsity { 0.0 } else { rng.random::<f64>() as Real })
                .collect();
            Tensor::new(&[k, n, n, n], data).unwrap()
        };
        let (f, w) = (soft(seed), soft(seed ^ 0x5eed));
        let g = Graph::new();
        let l = g.value(dice_seg_loss(&g, g.constant(f), g.constant(w)).unwrap()).item() as f64;
        prop_assert!((0.0..=1.0 + 1e-5).contains(&l), "{l}");
    }

    #[test]
    fn jacobian_of_affine_field_is_constant_determinant(a in prop::array::uniform9(-0.3f64..0.3)) {
        let n = 7;
        let field = DisplacementField::from_fn([n; 3], [1.0; 3], |x, y, z| {
            let p = [x as f64, y as f64, z as f64];
            [0, 1, 2].map(|r| (a[3 * r] * p[0] + a[3 * r + 1] * p[1] + a[3 * r + 2] * p[2]) as f32)
        })
        .unwrap();
        let m = [
            [1.0 + a[0], a[1], a[2]],
            [a[3], 1.0 + a[4], a[5]],
            [a[6], a[7], 1.0 + a[8]],
        ];
        let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
        let dets = jacobian_determinant(&field);
        for z in 1..n - 1 {
            for y in 1..n - 1 {
                for x in 1..n - 1 {
                    let d = dets[(z * n + y) * n + x];
                    prop_assert!((d - det).abs() < 1e-4, "{d} vs {det}");
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn self_similarity_is_never_worse(seed in 0u64..1_000_000, noise in any::<bool>()) {
        let n = 12;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (kx, ky) = (rng.random_range(0.1..0.6), rng.random_range(0.1..0.6));
        let f = grid_tensor(1, n, |_, x, y, z| {
            0.5 + 0.25 * (kx * x as f64).sin() + 0.2 * (ky * y as f64 + 0.3 * z as f64).cos()
        });
        let w = if noise {
            random(&[1, n, n, n], 0.0, 1.0, seed)
        } else {
            let u = smooth_field(n, rng.random_range(0.5..3.0), rng.random_range(0.0..6.3));
            warp_tensor(&f, &u).unwrap()
        };
        let g = Graph::new();
        let (fv, wv) = (g.constant(f), g.constant(w));
        let l = |a, b| g.value(lncc_loss(&g, a, b, 9).unwrap()).item() as f64;
        prop_assert!(l(fv, fv) <= l(fv, wv) + 1e-6);
        let sigma = 1.0 / 31.0;
        let mi = |a, b| g.value(mi_loss(&g, a, b, 32, sigma).unwrap()).item() as f64;
        prop_assert!(mi(fv, fv) <= mi(fv, wv) + 1e-6);
    }
}

fn fab_store(dim: usize, heads: usize, p: [usize; 3], seed: u64) -> ParamStore {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    init_fab(&mut store, "blk", dim, heads, p, Some(2), &mut rng).unwrap();
    store
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn fab_and_oab_keep_token_grid(gx in 1usize..3, gy in 1usize..3, gz in 1usize..3, shifted in any::<bool>(), seed in 0u64..1000) {
        let grid = [4 * gx, 4 * gy, 4 * gz];
        let n: usize = grid.iter().product();
        let (dim, heads) = (8, 2);
        let (spec, can_shift) = WindowSpec::cubic(4, 0.5).fit(grid);
        let g = Graph::new();
        let x = g.constant(random(&[n, dim], -1.0, 1.0, seed));
        let store = fab_store(dim, heads, spec.p, seed);
        let scope = Scope::new(&g, &store, false);
        let fab = FabSpec { dim, heads, p: spec.p, shifted: shifted && can_shift, alpha: 0.01, use_ca: true };
        let y = fab_forward(&scope, "blk", x, grid, &fab).unwrap();
        prop_assert_eq!(g.shape(y), vec![n, dim]);

        let mut store = ParamStore::new();
        init_oab(&mut store, "oab", dim, heads, &spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let scope = Scope::new(&g, &store, false);
        let z = oab_forward(&scope, "oab", x, grid, &spec, heads).unwrap();
        prop_assert_eq!(g.shape(z), vec![n, dim]);
    }

    #[test]
    fn attention_rows_are_stochastic(seed in 0u64..10_000, scale in prop::sample::select(vec![0.1, 1.0, 30.0]), masked in any::<bool>()) {
        let grid = [8; 3];
        let p = [4; 3];
        let (nw, nq, heads, c) = (8, 64, 2, 8);
        let nk = if masked { nq } else { 216 };
        let g = Graph::new();
        let q = g.constant(random(&[nw, nq, c], -scale, scale, seed));
        let k = g.constant(random(&[nw, nk, c], -scale, scale, seed + 1));
        let v = g.constant(random(&[nw, nk, c], -1.0, 1.0, seed + 2));
        let bias = g.constant(random(&[heads, nq, nk], -scale, scale, seed + 3));
        let mask = masked.then(|| shift_mask(grid, p, [2; 3]).unwrap());
        let att = multi_head_attention(&g, q, k, v, Some(bias), mask.as_ref(), heads).unwrap();
        let probs = g.value(att.probs);
        prop_assert!(probs.data().iter().all(|&w| w >= 0.0));
        for row in probs.data().chunks(nk) {
            let s: f64 = row.iter().map(|&w| w as f64).sum();
            prop_assert!((s - 1.0).abs() < 1e-5, "row sum {s}");
        }
    }
}

#[test]
fn parameter_count_depends_only_on_config() {
    let cfg = ModelConfig { input_dims: [32; 3], ..ModelConfig::variant(Variant::S) };
    let counts: Vec<usize> = (0..3).map(|seed| Model::new(cfg.clone(), seed).unwrap().param_count()).collect();
    assert!(counts.windows(2).all(|w| w[0] == w[1]), "{counts:?}");
    let again = Model::new(cfg, 9).unwrap();
    assert_eq!(again.param_count(), counts[0]);
    let names: Vec<&str> = again.params.names().iter().map(String::as_str).collect();
    assert_eq!(names, Model::new(again.config.clone(), 4).unwrap().params.names());
}
