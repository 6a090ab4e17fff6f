use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use morphreg_bench::{random, smooth};
use morphreg_core::blocks::{fab_forward, init_fab, ca_hidden, FabSpec};
use morphreg_core::losses::{lncc_loss, mi_loss};
use morphreg_core::params::{ParamStore, Scope};
use morphreg_core::Graph;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [64usize, 256] {
        let (a, b) = (random(&[n, n], 1), random(&[n, n], 2));
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let g = Graph::new();
                let y = g.matmul(g.constant(a.clone()), g.constant(b.clone())).unwrap();
                g.value(y)
            })
        });
    }
    group.finish();
}

fn conv3d(c: &mut Criterion) {
    let x = random(&[16, 32, 32, 32], 3);
    let w = random(&[16, 16, 3, 3, 3], 4);
    c.bench_function("conv3d_16x16_32cube_forward_backward", |bench| {
        bench.iter(|| {
            let g = Graph::new();
            let xv = g.variable(x.clone());
            let wv = g.variable(w.clone());
            let y = g.conv3d(xv, wv, None, 1, 1).unwrap();
            g.backward(g.sum(y)).unwrap();
            g.grad(wv)
        })
    });
}

fn warp(c: &mut Criterion) {
    let m = smooth(64, 0.0);
    let u = random(&[3, 64, 64, 64], 5);
    c.bench_function("warp_64cube", |bench| {
        bench.iter(|| {
            let g = Graph::new();
            let y = g.warp(g.constant(m.clone()), g.constant(u.clone())).unwrap();
            g.value(y)
        })
    });
}

fn losses(c: &mut Criterion) {
    let (f, w) = (smooth(64, 0.0), smooth(64, 0.7));
    c.bench_function("lncc_loss_64cube", |bench| {
        bench.iter(|| {
            let g = Graph::new();
            let l = lncc_loss(&g, g.constant(f.clone()), g.variable(w.clone()), 9).unwrap();
            g.backward(l).unwrap();
        })
    });
    c.bench_function("mi_loss_64cube", |bench| {
        bench.iter(|| {
            let g = Graph::new();
            let l = mi_loss(&g, g.constant(f.clone()), g.variable(w.clone()), 32, 1.0 / 31.0).unwrap();
            g.backward(l).unwrap();
        })
    });
}

fn fab(c: &mut Criterion) {
    let (dim, heads, grid) = (96, 4, [16, 16, 16]);
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    init_fab(&mut store, "fab", dim, heads, [4; 3], Some(ca_hidden(dim, 3)), &mut rng).unwrap();
    let x = random(&[16 * 16 * 16, dim], 7);
    let spec = FabSpec { dim, heads, p: [4; 3], shifted: true, alpha: 0.01, use_ca: true };
    c.bench_function("fab_shifted_16cube_c96", |bench| {
        bench.iter(|| {
            let g = Graph::new();
            let scope = Scope::new(&g, &store, false);
            let y = fab_forward(&scope, "fab", g.constant(x.clone()), grid, &spec).unwrap();
            g.value(y)
        })
    });
}

criterion_group!(benches, matmul, conv3d, warp, losses, fab);
criterion_main!(benches);
