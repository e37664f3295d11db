//! Shared generators and brute-force oracles for the integration tests.
#![allow(dead_code)]

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use rand_chacha::ChaCha8Rng;

use dynsplat::crf::{CrfNode, CrfProblem, KernelBandwidths, NodeFeatures};
use dynsplat::gaussian_map::{GaussianId, Label};
use dynsplat::motion_stats::unary_from_probability;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random CRF with unaries from a uniform static probability, features in a
/// unit box and data-driven bandwidths.
pub fn random_problem(rng: &mut impl Rng, n: usize, weights: [f64; 2]) -> CrfProblem {
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
        weights,
    }
}

/// Pairwise weight recomputed from the kernel definitions.
pub fn oracle_pair(p: &CrfProblem, i: usize, j: usize) -> f64 {
    let (a, b) = (&p.nodes[i].features, &p.nodes[j].features);
    let bw = &p.bandwidths;
    let app = (-((a.reproj - b.reproj).powi(2)) / (2.0 * bw.reproj.powi(2))
        - (a.obs_count - b.obs_count).powi(2) / (2.0 * bw.obs_count.powi(2)))
    .exp();
    let pos = (-((a.position - b.position).norm()) / (2.0 * bw.position.powi(2))
        - (a.pixel - b.pixel).norm() / (2.0 * bw.pixel.powi(2)))
    .exp();
    p.weights[0] * app + p.weights[1] * pos
}

pub fn oracle_energy(p: &CrfProblem, labels: &[Label]) -> f64 {
    let n = p.nodes.len();
    let mut e: f64 = (0..n).map(|i| p.nodes[i].unary[labels[i] as usize]).sum();
    for i in 0..n {
        for j in 0..n {
            if i < j && labels[i] != labels[j] {
                e += oracle_pair(p, i, j);
            }
        }
    }
    e
}

/// Minimum Gibbs energy over all 2^N labelings.
pub fn exact_minimum(p: &CrfProblem) -> f64 {
    let n = p.nodes.len();
    (0u32..1 << n)
        .map(|mask| {
            let labels: Vec<Label> = (0..n)
                .map(|i| if mask >> i & 1 == 1 { Label::Dynamic } else { Label::Static })
                .collect();
            oracle_energy(p, &labels)
        })
        .fold(f64::INFINITY, f64::min)
}

/// Mean-field free energy recomputed pair by pair.
pub fn oracle_free_energy(p: &CrfProblem, q: &[f64]) -> f64 {
    let n = p.nodes.len();
    let xlogx = |x: f64| if x > 0.0 { x * x.ln() } else { 0.0 };
    let mut f = 0.0;
    for i in 0..n {
        f += (1.0 - q[i]) * p.nodes[i].unary[0] + q[i] * p.nodes[i].unary[1];
        f += xlogx(q[i]) + xlogx(1.0 - q[i]);
        for j in (i + 1)..n {
            let disagree = q[i] * (1.0 - q[j]) + q[j] * (1.0 - q[i]);
            f += disagree * oracle_pair(p, i, j);
        }
    }
    f
}

/// Smooth random texture sampled at `(x - dx, y - dy)`, so the `(dx, dy)`
/// version is the base image translated by that amount.
pub fn texture(seed: u64, w: usize, h: usize, dx: f64, dy: f64) -> dynsplat::raster::GrayImage {
    let mut r = rng(seed);
    let waves: Vec<(f64, f64, f64, f64)> = (0..6)
        .map(|_| {
            (
                r.random_range(0.08..0.35),
                r.random_range(0.08..0.35),
                r.random_range(0.0..std::f64::consts::TAU),
                r.random_range(0.05..0.15),
            )
        })
        .collect();
    dynsplat::raster::GrayImage::from_fn(w, h, |x, y| {
        let (u, v) = (x as f64 - dx, y as f64 - dy);
        0.5 + waves.iter().map(|&(a, b, p, amp)| amp * (a * u + p).sin() * (b * v - p).cos()).sum::<f64>()
    })
}

pub fn pose_camera() -> dynsplat::camera::Camera {
    dynsplat::camera::Camera::new(120.0, 120.0, 80.0, 60.0, 160, 120).unwrap()
}

/// `n` points in front of a camera at `truth`, with their exact projections.
pub fn pose_problem(
    rng: &mut impl Rng,
    truth: &dynsplat::camera::CameraPose,
    n: usize,
) -> Vec<dynsplat::pose::Correspondence> {
    let cam = pose_camera();
    let to_world = truth.inverse();
    (0..n)
        .map(|_| {
            let px = Vector2::new(rng.random_range(5.0..155.0), rng.random_range(5.0..115.0));
            let depth = rng.random_range(1.5..6.0);
            let world = to_world.transform(&cam.back_project(&px, depth));
            dynsplat::pose::Correspondence::new(world, px)
        })
        .collect()
}

pub fn random_pose(rng: &mut impl Rng) -> dynsplat::camera::CameraPose {
    let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    dynsplat::camera::CameraPose::new(
        nalgebra::UnitQuaternion::from_scaled_axis(axis * 0.5),
        Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
        0.0,
    )
}

/// `pose` rotated by `deg` degrees about a random axis and translated by
/// `meters` in a random direction.
pub fn perturb(rng: &mut impl Rng, pose: &dynsplat::camera::CameraPose, deg: f64, meters: f64) -> dynsplat::camera::CameraPose {
    let unit = |r: &mut dyn rand::RngCore| {
        Vector3::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)).normalize()
    };
    let axis = unit(rng);
    let dir = unit(rng);
    let mut delta = nalgebra::Vector6::zeros();
    delta.fixed_rows_mut::<3>(0).copy_from(&(dir * meters));
    delta.fixed_rows_mut::<3>(3).copy_from(&(axis * deg.to_radians()));
    pose.retract(&delta)
}

/// Rotation angle (rad) and camera-center distance (m) between two poses.
pub fn pose_error(a: &dynsplat::camera::CameraPose, b: &dynsplat::camera::CameraPose) -> (f64, f64) {
    (a.rotation.angle_to(&b.rotation), (a.center() - b.center()).norm())
}

/// `n` splats in front of the identity camera at depth 2.5-4, anisotropic
/// and randomly rotated; every other one carries degree-1 SH.
pub fn random_splats(rng: &mut impl Rng, n: usize) -> Vec<dynsplat::splat::Splat> {
    (0..n)
        .map(|i| {
            let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let sh1 = (i % 2 == 1).then(|| std::array::from_fn(|_| std::array::from_fn(|_| rng.random_range(-0.2..0.2))));
            dynsplat::splat::Splat {
                id: i as u64,
                position: Vector3::new(rng.random_range(-0.6..0.6), rng.random_range(-0.4..0.4), rng.random_range(2.5..4.0)),
                rotation: nalgebra::UnitQuaternion::from_scaled_axis(axis),
                scale: Vector3::new(rng.random_range(0.1..0.4), rng.random_range(0.1..0.4), rng.random_range(0.1..0.4)),
                opacity: rng.random_range(0.2..0.9),
                color: dynsplat::splat::ShColor {
                    dc: std::array::from_fn(|_| rng.random_range(0.1..0.9)),
                    sh1,
                },
            }
        })
        .collect()
}

pub fn random_image(rng: &mut impl Rng, w: usize, h: usize) -> dynsplat::raster::RgbImage {
    let data: Vec<[f64; 3]> = (0..w * h).map(|_| std::array::from_fn(|_| rng.random_range(0.0..1.0))).collect();
    dynsplat::raster::RgbImage::from_fn(w, h, |x, y| data[y * w + x])
}

/// A grid of splats filling an 80x60 view, three keyframes rendered from the
/// true scene, and a copy of the scene with every color shifted by up to
/// +-0.25.
pub fn color_perturbed_scene(
    seed: u64,
) -> (dynsplat::splat::Scene, dynsplat::splat::Scene, Vec<dynsplat::splat::Keyframe>, dynsplat::camera::Camera) {
    use dynsplat::splat::{composite, Keyframe, RenderOptions, Scene, Splat};
    let mut r = rng(seed);
    let cam = dynsplat::camera::Camera::new(60.0, 60.0, 39.5, 29.5, 80, 60).unwrap();
    let mut splats = Vec::new();
    for j in 0..9 {
        for i in 0..12 {
            let p = Vector3::new(-2.2 + 0.4 * i as f64, -1.6 + 0.4 * j as f64, 3.0 + r.random_range(-0.2..0.2));
            let c = [r.random_range(0.1..0.9), r.random_range(0.1..0.9), r.random_range(0.1..0.9)];
            splats.push(Splat::isotropic(splats.len() as u64, p, 0.22, 0.8, c));
        }
    }
    let truth = Scene::all_static(splats);
    let keyframes: Vec<Keyframe> = [-0.1, 0.0, 0.1]
        .iter()
        .map(|&x| {
            let pose = dynsplat::camera::CameraPose::new(nalgebra::UnitQuaternion::identity(), Vector3::new(x, 0.02 * x, 0.0), 0.0);
            Keyframe { pose, image: composite(&truth.splats, &pose, &cam, &RenderOptions::default()).rgb }
        })
        .collect();
    let mut start = truth.clone();
    for s in start.splats.iter_mut() {
        for c in s.color.dc.iter_mut() {
            *c = (*c + r.random_range(-0.25..0.25)).clamp(0.0, 1.0);
        }
    }
    (truth, start, keyframes, cam)
}

/// Mean full-resolution total loss of `scene` over the keyframes.
pub fn full_resolution_loss(
    scene: &dynsplat::splat::Scene,
    keyframes: &[dynsplat::splat::Keyframe],
    cam: &dynsplat::camera::Camera,
    w: &dynsplat::splat::LossWeights,
) -> f64 {
    use dynsplat::splat::{composite_scene, total_loss, RenderOptions};
    keyframes
        .iter()
        .map(|k| {
            let img = composite_scene(scene, &k.pose, cam, &RenderOptions::default()).rgb;
            total_loss(&img, &k.image, &[], w).unwrap().total
        })
        .sum::<f64>()
        / keyframes.len() as f64
}

/// Camera for the small render scenes, principal point at the center.
pub fn splat_camera(w: usize, h: usize) -> dynsplat::camera::Camera {
    dynsplat::camera::Camera::new(30.0, 30.0, (w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0, w, h).unwrap()
}

/// Compositing without truncation, so the loss is smooth in every parameter.
pub fn exact() -> dynsplat::splat::RenderOptions {
    dynsplat::splat::RenderOptions { alpha_threshold: 0.0, min_transmittance: 0.0, ..dynsplat::splat::RenderOptions::default() }
}

pub fn render_loss(scene: &dynsplat::splat::Scene, cam: &dynsplat::camera::Camera, target: &dynsplat::raster::RgbImage, w: &dynsplat::splat::LossWeights) -> f64 {
    let statics = scene.static_splats();
    let r = dynsplat::splat::composite(&statics, &dynsplat::camera::CameraPose::identity(), cam, &exact());
    let dyn_op: Vec<f64> = scene.splats.iter().zip(&scene.dynamic).filter(|(_, d)| **d).map(|(s, _)| s.opacity).collect();
    dynsplat::splat::total_loss(&r.rgb, target, &dyn_op, w).unwrap().total
}

/// Every scalar parameter of splat `i` with a setter that adds `h`.
pub fn splat_parameters() -> Vec<(&'static str, Box<dyn Fn(&mut dynsplat::splat::Splat, f64)>)> {
    let mut v: Vec<(&'static str, Box<dyn Fn(&mut dynsplat::splat::Splat, f64)>)> = Vec::new();
    for c in 0..3 {
        v.push(("color", Box::new(move |s, h| s.color.dc[c] += h)));
        v.push(("position", Box::new(move |s, h| s.position[c] += h)));
        v.push(("scale", Box::new(move |s, h| s.scale[c] += h)));
        for k in 0..3 {
            v.push(("sh1", Box::new(move |s, h| {
                if let Some(sh) = s.color.sh1.as_mut() {
                    sh[k][c] += h;
                }
            })));
        }
    }
    v.push(("opacity", Box::new(|s, h| s.opacity += h)));
    for c in 0..4 {
        v.push(("rotation", Box::new(move |s, h| {
            let q = s.rotation.quaternion().coords;
            let mut raw = [q.w, q.x, q.y, q.z];
            raw[c] += h;
            s.rotation = nalgebra::UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(raw[0], raw[1], raw[2], raw[3]));
        })));
    }
    v
}

pub fn splat_gradient_component(g: &dynsplat::splat::SplatGrad, index: usize) -> f64 {
    // Same order as `splat_parameters`.
    let mut v = Vec::new();
    for c in 0..3 {
        v.push(g.color[c]);
        v.push(g.position[c]);
        v.push(g.scale[c]);
        for k in 0..3 {
            v.push(g.sh1[k][c]);
        }
    }
    v.push(g.opacity);
    v.extend_from_slice(&g.rotation);
    v[index]
}

/// Summed translation errors over ten scenes for (outlier-free, Huber,
/// plain least squares), with 20 of 100 pixels moved 50 px in a random
/// direction.
pub fn outlier_experiment(sigma: f64) -> (f64, f64, f64) {
    let cam = pose_camera();
    let mut sums = (0.0, 0.0, 0.0);
    for seed in 0..10 {
        let mut rng = rng(100 + seed);
        let truth = random_pose(&mut rng);
        let mut corrs = pose_problem(&mut rng, &truth, 100);
        if sigma > 0.0 {
            let noise = Normal::new(0.0, sigma).unwrap();
            for c in corrs.iter_mut() {
                c.pixel += Vector2::new(noise.sample(&mut rng), noise.sample(&mut rng));
            }
        }
        let clean = corrs.clone();
        for c in corrs.iter_mut().take(20) {
            let a: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            c.pixel += 50.0 * Vector2::new(a.cos(), a.sin());
        }
        let start = perturb(&mut rng, &truth, 2.0, 0.05);
        let solve = |c: &[_], delta| {
            let opts = dynsplat::pose::SolverOptions { huber_delta: delta, max_iterations: 50, ..dynsplat::pose::SolverOptions::default() };
            pose_error(&dynsplat::pose::solve_pose(c, &start, &cam, &opts).unwrap().pose, &truth).1
        };
        sums.0 += solve(&clean, Some(1.345));
        sums.1 += solve(&corrs, Some(1.345));
        sums.2 += solve(&corrs, None);
    }
    sums
}

/// Static cues drawn from N(mu, sigma) per statistic; movers shifted by three
/// sigma on every statistic and packed into one spatial cluster. The model is
/// fitted on a separate static sample. Returns (unary-only accuracy, CRF
/// accuracy) with the pipeline's default CRF weights and normalization.
pub fn labeling_experiment(seed: u64, n_static: usize, n_dynamic: usize) -> (f64, f64) {
    use dynsplat::gaussian_map::MotionStats;
    use dynsplat::motion_stats::{fit_static_model, FitOptions};
    let mu = [0.6, 0.02, 12.0, 0.4];
    let sigma = [0.3, 0.01, 3.0, 0.2];
    let mut r = rng(seed);
    let draw = |r: &mut ChaCha8Rng, shift: f64| {
        let v: [f64; 4] = std::array::from_fn(|k| {
            let z: f64 = rand_distr::StandardNormal.sample(r);
            mu[k] + (z + shift) * sigma[k]
        });
        MotionStats::from_values(v[0], v[1], v[2].round().max(1.0) as u32, v[3])
    };
    let bootstrap: Vec<_> = (0..200).map(|_| draw(&mut r, 0.0)).collect();
    let model = fit_static_model(&bootstrap, &FitOptions::default()).unwrap().model;
    let mut nodes = Vec::new();
    let mut truth = Vec::new();
    for i in 0..n_static + n_dynamic {
        let dynamic = i >= n_static;
        let stats = draw(&mut r, if dynamic { 3.0 } else { 0.0 });
        let position = if dynamic {
            Vector3::new(1.5, 0.8, 3.0) + Vector3::from_fn(|_, _| r.random_range(-0.15..0.15))
        } else {
            Vector3::new(r.random_range(-2.0..2.0), r.random_range(-1.5..1.5), r.random_range(2.0..4.0))
        };
        nodes.push(CrfNode {
            id: GaussianId(i as u64),
            unary: model.unary_potential(&stats),
            features: NodeFeatures {
                reproj: stats.mean_reproj_error,
                obs_count: stats.observation_count as f64,
                position,
                pixel: Vector2::new(80.0 + 120.0 * position.x / position.z, 60.0 + 120.0 * position.y / position.z),
            },
        });
        truth.push(dynamic);
    }
    let cfg = dynsplat::pipeline::Config::default();
    let feats: Vec<NodeFeatures> = nodes.iter().map(|n| n.features).collect();
    let norm = 2.0 * (nodes.len() - 1) as f64;
    let accuracy = |labels: &[Label]| {
        labels.iter().zip(&truth).filter(|(l, t)| l.is_dynamic() == **t).count() as f64 / truth.len() as f64
    };
    let unary_labels: Vec<Label> = nodes
        .iter()
        .map(|n| if n.unary[1] < n.unary[0] { Label::Dynamic } else { Label::Static })
        .collect();
    let problem = CrfProblem {
        nodes,
        bandwidths: KernelBandwidths::from_data(&feats),
        weights: cfg.crf_weights.map(|w| w / norm),
    };
    let crf = dynsplat::crf::mean_field_infer(&problem, cfg.crf_iterations);
    (accuracy(&unary_labels), accuracy(&crf.labels))
}
