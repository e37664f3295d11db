//! Thread-pool versus sequential timings of the data-parallel kernels.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dynsplat::crf::{mean_field_infer, CrfNode, CrfProblem, KernelBandwidths, NodeFeatures};
use dynsplat::flow::{lk_flow, LkParams};
use dynsplat::gaussian_map::GaussianId;
use dynsplat::motion_stats::unary_from_probability;
use dynsplat::par;
use dynsplat::sim::{simulate, SceneSpec};
use dynsplat::splat::{backward_gradients, composite, LossWeights, RenderOptions, Scene};

fn crf_problem(n: usize) -> CrfProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let nodes: Vec<CrfNode> = (0..n)
        .map(|i| CrfNode {
            id: GaussianId(i as u64),
            unary: unary_from_probability(rng.random_range(0.01..0.99)),
            features: NodeFeatures {
                reproj: rng.random_range(0.0..3.0),
                obs_count: rng.random_range(1..20) as f64,
                position: Vector3::new(rng.random(), rng.random(), rng.random()),
                pixel: Vector2::new(rng.random_range(0.0..160.0), rng.random_range(0.0..120.0)),
            },
        })
        .collect();
    let feats: Vec<NodeFeatures> = nodes.iter().map(|n| n.features).collect();
    CrfProblem {
        nodes,
        bandwidths: KernelBandwidths::from_data(&feats),
        weights: [1.0, 1.0].map(|w| w / (2.0 * (n - 1) as f64)),
    }
}

/// Runs `f` once on the thread pool and once forced sequential.
fn compare(c: &mut Criterion, name: &str, f: impl Fn()) {
    let mut g = c.benchmark_group(name);
    g.sample_size(20);
    g.bench_function("parallel", |b| b.iter(&f));
    g.bench_function("sequential", |b| b.iter(|| par::sequential(&f)));
    g.finish();
}

fn kernels(c: &mut Criterion) {
    let spec = SceneSpec { frames: 2, ..SceneSpec::default() };
    let sim = simulate(&spec);
    let cam = spec.camera();
    let splats = sim.scene.splats_at(&spec, 0);
    let pose = sim.poses[0];
    let opts = RenderOptions::default();
    compare(c, "composite", || {
        black_box(composite(&splats, &pose, &cam, &opts));
    });

    let scene = Scene::all_static(sim.scene.static_splats());
    let target = sim.frames[0].rgb.clone();
    let weights = LossWeights::default();
    compare(c, "backward", || {
        black_box(backward_gradients(&scene, &pose, &cam, &target, &weights, &opts).unwrap());
    });

    let problem = crf_problem(800);
    compare(c, "crf", || {
        black_box(mean_field_infer(&problem, 5));
    });

    let points: Vec<Vector2<f64>> = sim.tracks[0].items.iter().map(|o| o.pixel).collect();
    let params = LkParams::default();
    compare(c, "lk_flow", || {
        black_box(lk_flow(&sim.frames[0].gray, &sim.frames[1].gray, &points, &params).unwrap());
    });
}

criterion_group!(benches, kernels);
criterion_main!(benches);
