//! Synthetic dynamic RGB-D sequences with ground truth.
//!
//! A room-like box of flattened static splats surrounds a few rigid clusters
//! of dynamic splats. The camera follows an orbit or a Lissajous path around
//! the room center. Each frame is composited with the splat renderer, and
//! feature tracks are drawn from the visible splats with pixel noise and
//! uniform outliers.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use nalgebra::{UnitQuaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::camera::{Camera, CameraPose};
use crate::gaussian_map::{FeatureId, FrameObservations, Label, Observation};
use crate::raster::{GrayImage, RgbImage};
use crate::splat::{composite, RenderOptions, ShColor, Splat};

/// Depth PNG counts per meter.
pub const DEPTH_SCALE: f64 = 5000.0;
/// Pixels kept clear of the border when choosing tracked splats.
pub const TRACK_MARGIN: f64 = 8.0;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("spec line {line}: {msg}")]
    Spec { line: usize, msg: String },
    #[error("invalid spec: {0}")]
    Invalid(String),
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("image: {0}")]
    Raster(#[from] crate::raster::RasterError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectMotion {
    /// Meters per second.
    pub velocity: Vector3<f64>,
    /// Optional `(amplitude in meters, frequency in Hz)` added on top.
    pub sinusoid: Option<(Vector3<f64>, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TrajectoryKind {
    /// Circle of `radius` around the room center, sweeping `arc` radians.
    Orbit { radius: f64, arc: f64 },
    /// Camera at distance `radius` wandering `amplitude` meters in x and y.
    Lissajous { radius: f64, amplitude: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub static_count: usize,
    pub object_count: usize,
    pub gaussians_per_object: usize,
    pub object_radius: f64,
    /// Object speed used when `motions` is empty, meters per second.
    pub object_speed: f64,
    /// Explicit per-object motions; generated from the seed when empty.
    pub motions: Vec<ObjectMotion>,
    /// Objects hold still before this frame.
    pub motion_start_frame: usize,
    pub trajectory: TrajectoryKind,
    pub frames: usize,
    /// Frames per second.
    pub rate: f64,
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub pixel_noise: f64,
    pub outlier_fraction: f64,
    pub max_tracks: usize,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            static_count: 1600,
            object_count: 2,
            gaussians_per_object: 150,
            object_radius: 0.25,
            object_speed: 0.5,
            motions: Vec::new(),
            motion_start_frame: 10,
            trajectory: TrajectoryKind::Orbit {
                radius: 2.0,
                arc: 0.2,
            },
            frames: 40,
            rate: 10.0,
            width: 160,
            height: 120,
            focal: 120.0,
            pixel_noise: 0.3,
            outlier_fraction: 0.05,
            max_tracks: 600,
            seed: 7,
        }
    }
}

fn parse_vec3(v: &str) -> Option<Vector3<f64>> {
    let p: Vec<f64> = v.split_whitespace().map(|s| s.parse().ok()).collect::<Option<_>>()?;
    (p.len() == 3).then(|| Vector3::new(p[0], p[1], p[2]))
}

impl SceneSpec {
    pub fn camera(&self) -> Camera {
        Camera {
            fx: self.focal,
            fy: self.focal,
            cx: (self.width as f64 - 1.0) / 2.0,
            cy: (self.height as f64 - 1.0) / 2.0,
            width: self.width,
            height: self.height,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::Invalid(m.to_string()));
        if !(self.pixel_noise >= 0.0) {
            return bad("pixel noise must be >= 0");
        }
        if !(0.0..1.0).contains(&self.outlier_fraction) {
            return bad("outlier fraction must be in [0, 1)");
        }
        if self.width == 0 || self.height == 0 || !(self.focal > 0.0) {
            return bad("image size and focal length must be positive");
        }
        if self.frames == 0 || !(self.rate > 0.0) {
            return bad("frames and rate must be positive");
        }
        if !self.motions.is_empty() && self.motions.len() != self.object_count {
            return bad("one motion per object required");
        }
        Ok(())
    }

    /// Parse `key = value` lines; `#` starts a comment. Unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self, SimError> {
        let mut s = SceneSpec::default();
        let mut velocities: Vec<(usize, Vector3<f64>)> = Vec::new();
        let mut sinusoids: Vec<(usize, Vector3<f64>, f64)> = Vec::new();
        let mut traj = "orbit".to_string();
        let mut radius = 2.0;
        let mut arc = 0.2;
        let mut amplitude = 0.3;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let l = raw.split('#').next().unwrap_or("").trim();
            if l.is_empty() {
                continue;
            }
            let err = |msg: String| SimError::Spec { line, msg };
            let (k, v) = l
                .split_once('=')
                .ok_or_else(|| err(format!("expected key = value, got {l:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            let num = |v: &str| v.parse::<f64>().map_err(|_| err(format!("bad number {v:?} for {k}")));
            let int = |v: &str| v.parse::<usize>().map_err(|_| err(format!("bad integer {v:?} for {k}")));
            match k {
                "static_count" => s.static_count = int(v)?,
                "object_count" => s.object_count = int(v)?,
                "gaussians_per_object" => s.gaussians_per_object = int(v)?,
                "object_radius" => s.object_radius = num(v)?,
                "object_speed" => s.object_speed = num(v)?,
                "motion_start_frame" => s.motion_start_frame = int(v)?,
                "trajectory" => traj = v.to_string(),
                "radius" => radius = num(v)?,
                "arc" => arc = num(v)?,
                "amplitude" => amplitude = num(v)?,
                "frames" => s.frames = int(v)?,
                "rate" => s.rate = num(v)?,
                "width" => s.width = int(v)?,
                "height" => s.height = int(v)?,
                "focal" => s.focal = num(v)?,
                "pixel_noise" => s.pixel_noise = num(v)?,
                "outlier_fraction" => s.outlier_fraction = num(v)?,
                "max_tracks" => s.max_tracks = int(v)?,
                "seed" => s.seed = v.parse().map_err(|_| err(format!("bad seed {v:?}")))?,
                _ => {
                    if let Some(idx) = k.strip_prefix("velocity.") {
                        let idx = int(idx)?;
                        let vel = parse_vec3(v).ok_or_else(|| err(format!("bad vector {v:?}")))?;
                        velocities.push((idx, vel));
                    } else if let Some(idx) = k.strip_prefix("sinusoid.") {
                        let idx = int(idx)?;
                        let p: Vec<f64> = v
                            .split_whitespace()
                            .map(|t| t.parse().ok())
                            .collect::<Option<_>>()
                            .filter(|p: &Vec<f64>| p.len() == 4)
                            .ok_or_else(|| err(format!("expected ax ay az freq, got {v:?}")))?;
                        sinusoids.push((idx, Vector3::new(p[0], p[1], p[2]), p[3]));
                    } else {
                        return Err(err(format!("unknown key {k:?}")));
                    }
                }
            }
        }
        s.trajectory = match traj.as_str() {
            "orbit" => TrajectoryKind::Orbit { radius, arc },
            "lissajous" => TrajectoryKind::Lissajous { radius, amplitude },
            other => return Err(SimError::Invalid(format!("unknown trajectory {other:?}"))),
        };
        if !velocities.is_empty() {
            s.motions = vec![
                ObjectMotion {
                    velocity: Vector3::zeros(),
                    sinusoid: None,
                };
                s.object_count
            ];
            for (i, v) in velocities {
                let m = s
                    .motions
                    .get_mut(i)
                    .ok_or_else(|| SimError::Invalid(format!("velocity.{i} beyond object_count")))?;
                m.velocity = v;
            }
            for (i, a, f) in sinusoids {
                let m = s
                    .motions
                    .get_mut(i)
                    .ok_or_else(|| SimError::Invalid(format!("sinusoid.{i} beyond object_count")))?;
                m.sinusoid = Some((a, f));
            }
        }
        s.validate()?;
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimScene {
    /// Static splats first, then each object's splats in turn.
    pub splats: Vec<Splat>,
    pub labels: Vec<Label>,
    pub object_of: Vec<Option<usize>>,
    pub motions: Vec<ObjectMotion>,
    /// Fixed per-splat tracking priority (lower is preferred).
    pub priority: Vec<u64>,
}

const ROOM_HALF_X: f64 = 2.5;
const ROOM_HALF_Y: f64 = 1.2;
const ROOM_BACK_Z: f64 = -2.5;
const ROOM_FRONT_Z: f64 = 1.0;
/// Static pillars `(x, z)` near the camera; they give the static set depth
/// spread so camera motion is not confused with object motion.
const PILLARS: [(f64, f64); 2] = [(-0.9, 0.3), (0.9, 0.3)];
const PILLAR_RADIUS: f64 = 0.12;
const PILLAR_SHARE: f64 = 0.25;

fn surface_rotation(normal: &Vector3<f64>) -> UnitQuaternion<f64> {
    UnitQuaternion::rotation_between(&Vector3::z(), normal).unwrap_or_else(|| {
        UnitQuaternion::from_axis_angle(&Vector3::x_axis(), std::f64::consts::PI)
    })
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)]
}

pub fn generate_scene(spec: &SceneSpec) -> SimScene {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut splats = Vec::new();
    let mut labels = Vec::new();
    let mut object_of = Vec::new();
    let depth_span = ROOM_FRONT_Z - ROOM_BACK_Z;
    // (area, sampler) per surface: back wall, floor, ceiling, left, right.
    let areas = [
        (2.0 * ROOM_HALF_X) * (2.0 * ROOM_HALF_Y),
        (2.0 * ROOM_HALF_X) * depth_span,
        (2.0 * ROOM_HALF_X) * depth_span,
        depth_span * (2.0 * ROOM_HALF_Y),
        depth_span * (2.0 * ROOM_HALF_Y),
    ];
    let total: f64 = areas.iter().sum();
    let pillar_count = (spec.static_count as f64 * PILLAR_SHARE).round() as usize;
    for i in 0..spec.static_count {
        if i < pillar_count {
            let (px, pz) = PILLARS[i % PILLARS.len()];
            let th = rng.random_range(0.0..std::f64::consts::TAU);
            let normal = Vector3::new(th.cos(), 0.0, th.sin());
            let pos = Vector3::new(px, rng.random_range(-1.0..1.0) * ROOM_HALF_Y, pz) + normal * PILLAR_RADIUS;
            let s = rng.random_range(0.04..0.07);
            splats.push(Splat {
                id: i as u64,
                position: pos,
                rotation: surface_rotation(&normal),
                scale: Vector3::new(s, s * rng.random_range(0.7..1.0), 0.01),
                opacity: 0.9,
                color: ShColor::rgb(random_color(&mut rng)),
            });
            labels.push(Label::Static);
            object_of.push(None);
            continue;
        }
        let mut pick = rng.random_range(0.0..total);
        let mut surface = 0;
        while surface < 4 && pick >= areas[surface] {
            pick -= areas[surface];
            surface += 1;
        }
        let a = rng.random_range(-1.0..1.0);
        let b = rng.random_range(0.0..1.0);
        let z = ROOM_BACK_Z + b * depth_span;
        let (pos, normal) = match surface {
            0 => (
                Vector3::new(a * ROOM_HALF_X, rng.random_range(-1.0..1.0) * ROOM_HALF_Y, ROOM_BACK_Z),
                Vector3::z(),
            ),
            1 => (Vector3::new(a * ROOM_HALF_X, -ROOM_HALF_Y, z), Vector3::y()),
            2 => (Vector3::new(a * ROOM_HALF_X, ROOM_HALF_Y, z), -Vector3::y()),
            3 => (Vector3::new(-ROOM_HALF_X, a * ROOM_HALF_Y, z), Vector3::x()),
            _ => (Vector3::new(ROOM_HALF_X, a * ROOM_HALF_Y, z), -Vector3::x()),
        };
        let s = rng.random_range(0.09..0.15);
        splats.push(Splat {
            id: i as u64,
            position: pos,
            rotation: surface_rotation(&normal),
            scale: Vector3::new(s, s * rng.random_range(0.7..1.0), 0.02),
            opacity: 0.9,
            color: ShColor::rgb(random_color(&mut rng)),
        });
        labels.push(Label::Static);
        object_of.push(None);
    }
    let mut motions = spec.motions.clone();
    let gen_motions = motions.is_empty();
    for o in 0..spec.object_count {
        let center = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-0.5..0.5),
            rng.random_range(-1.2..0.0),
        );
        if gen_motions {
            // Mostly vertical and in depth, so the motion leaves the epipolar lines.
            let dir = Vector3::new(
                rng.random_range(-0.5..0.5),
                if rng.random_bool(0.5) { 1.0 } else { -1.0 },
                rng.random_range(-0.6..0.6),
            )
            .normalize();
            motions.push(ObjectMotion {
                velocity: dir * spec.object_speed,
                sinusoid: None,
            });
        }
        let base = random_color(&mut rng);
        for _ in 0..spec.gaussians_per_object {
            let offset = loop {
                let v = Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                );
                if v.norm() <= 1.0 {
                    break v * spec.object_radius;
                }
            };
            let jitter: [f64; 3] = std::array::from_fn(|c| (base[c] + rng.random_range(-0.25..0.25)).clamp(0.0, 1.0));
            let id = splats.len() as u64;
            splats.push(Splat::isotropic(id, center + offset, 0.05, 0.95, jitter));
            labels.push(Label::Dynamic);
            object_of.push(Some(o));
        }
    }
    let priority = (0..splats.len()).map(|_| rng.random()).collect();
    SimScene {
        splats,
        labels,
        object_of,
        motions,
        priority,
    }
}

impl SimScene {
    /// Displacement of object `o` at `frame`.
    pub fn object_offset(&self, spec: &SceneSpec, o: usize, frame: usize) -> Vector3<f64> {
        let m = &self.motions[o];
        let t = frame.saturating_sub(spec.motion_start_frame) as f64 / spec.rate;
        let mut d = m.velocity * t;
        if let Some((amp, f)) = m.sinusoid {
            d += amp * (2.0 * std::f64::consts::PI * f * t).sin();
        }
        d
    }

    /// All splats at their positions for `frame`.
    pub fn splats_at(&self, spec: &SceneSpec, frame: usize) -> Vec<Splat> {
        let offsets: Vec<Vector3<f64>> = (0..self.motions.len())
            .map(|o| self.object_offset(spec, o, frame))
            .collect();
        self.splats
            .iter()
            .zip(&self.object_of)
            .map(|(s, o)| {
                let mut s = *s;
                if let Some(o) = o {
                    s.position += offsets[*o];
                }
                s
            })
            .collect()
    }

    pub fn static_splats(&self) -> Vec<Splat> {
        self.splats
            .iter()
            .zip(&self.labels)
            .filter(|(_, l)| !l.is_dynamic())
            .map(|(s, _)| *s)
            .collect()
    }
}

/// Ground-truth world-to-camera poses, timestamps `frame / rate`.
pub fn trajectory(spec: &SceneSpec) -> Vec<CameraPose> {
    let n = spec.frames;
    let target = Vector3::new(0.0, 0.0, -0.5);
    (0..n)
        .map(|f| {
            let u = if n > 1 { f as f64 / (n - 1) as f64 } else { 0.0 };
            let ts = f as f64 / spec.rate;
            let center = match spec.trajectory {
                TrajectoryKind::Orbit { radius, arc } => {
                    let th = arc * (u - 0.5);
                    Vector3::new(
                        radius * th.sin(),
                        0.1 * (2.0 * std::f64::consts::PI * u).sin(),
                        radius * th.cos(),
                    )
                }
                TrajectoryKind::Lissajous { radius, amplitude } => {
                    let w = 2.0 * std::f64::consts::PI * u;
                    Vector3::new(amplitude * w.sin(), 0.5 * amplitude * (2.0 * w).sin(), radius)
                }
            };
            CameraPose::look_at(&center, &target, &Vector3::y(), ts)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimFrame {
    pub timestamp: f64,
    pub rgb: RgbImage,
    pub depth: GrayImage,
    pub gray: GrayImage,
    /// Render of the static splats only.
    pub clean: RgbImage,
}

/// Composite the full moving scene and the static-only scene for every pose.
pub fn render_frames(scene: &SimScene, poses: &[CameraPose], spec: &SceneSpec) -> Vec<SimFrame> {
    let cam = spec.camera();
    let opts = RenderOptions::default();
    let statics = scene.static_splats();
    poses
        .iter()
        .enumerate()
        .map(|(f, pose)| {
            let full = composite(&scene.splats_at(spec, f), pose, &cam, &opts);
            let clean = composite(&statics, pose, &cam, &opts).rgb;
            SimFrame {
                timestamp: pose.timestamp,
                gray: full.rgb.to_gray(),
                rgb: full.rgb,
                depth: full.depth,
                clean,
            }
        })
        .collect()
}

fn frame_rng(seed: u64, frame: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (frame as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Per-frame observations of the visible splats. Feature ids equal splat ids.
///
/// Visible splats are ranked by their fixed priority and taken with a cap per
/// grid cell, so the track set stays stable while still covering the image.
/// Track depth is the splat's own camera depth; outliers take the rendered
/// depth at their random pixel.
pub fn emit_feature_tracks(
    scene: &SimScene,
    poses: &[CameraPose],
    frames: &[SimFrame],
    spec: &SceneSpec,
) -> Vec<FrameObservations> {
    let cam = spec.camera();
    let (gx, gy) = (8usize, 6usize);
    let cap = (3 * spec.max_tracks).div_ceil(gx * gy).max(1);
    poses
        .iter()
        .enumerate()
        .map(|(f, pose)| {
            let depth = &frames[f].depth;
            let splats = scene.splats_at(spec, f);
            let mut visible: Vec<(u64, usize, Vector2<f64>, f64)> = Vec::new();
            for (i, s) in splats.iter().enumerate() {
                let pc = pose.transform(&s.position);
                let Ok(px) = cam.project_cam(&pc) else { continue };
                if !cam.contains_with_margin(&px, TRACK_MARGIN) {
                    continue;
                }
                let d = depth.get(px.x.round() as usize, px.y.round() as usize);
                if d < pc.z * 0.95 - 0.1 {
                    continue;
                }
                visible.push((scene.priority[i], i, px, pc.z));
            }
            visible.sort_by_key(|v| (v.0, v.1));
            let mut per_cell = vec![0usize; gx * gy];
            let mut chosen = Vec::new();
            for v in visible {
                if chosen.len() >= spec.max_tracks {
                    break;
                }
                let cx = ((v.2.x / spec.width as f64 * gx as f64) as usize).min(gx - 1);
                let cy = ((v.2.y / spec.height as f64 * gy as f64) as usize).min(gy - 1);
                if per_cell[cy * gx + cx] >= cap {
                    continue;
                }
                per_cell[cy * gx + cx] += 1;
                chosen.push(v);
            }
            chosen.sort_by_key(|v| v.1);
            let mut rng = frame_rng(spec.seed, f);
            let noise = Normal::new(0.0, spec.pixel_noise.max(0.0)).unwrap();
            let items = chosen
                .into_iter()
                .map(|(_, i, px, d)| {
                    let (pixel, depth_v) = if rng.random_bool(spec.outlier_fraction) {
                        let p = Vector2::new(
                            rng.random_range(TRACK_MARGIN..spec.width as f64 - 1.0 - TRACK_MARGIN),
                            rng.random_range(TRACK_MARGIN..spec.height as f64 - 1.0 - TRACK_MARGIN),
                        );
                        (p, depth.get(p.x.round() as usize, p.y.round() as usize))
                    } else if spec.pixel_noise > 0.0 {
                        (px + Vector2::new(noise.sample(&mut rng), noise.sample(&mut rng)), d)
                    } else {
                        (px, d)
                    };
                    Observation {
                        feature: FeatureId(splats[i].id),
                        pixel,
                        depth: depth_v,
                        valid: true,
                    }
                })
                .collect();
            FrameObservations {
                frame_id: f as u64,
                timestamp: pose.timestamp,
                items,
            }
        })
        .collect()
}

/// Everything a simulated run produces.
#[derive(Debug, Clone, PartialEq)]
pub struct Simulation {
    pub spec: SceneSpec,
    pub scene: SimScene,
    pub poses: Vec<CameraPose>,
    pub frames: Vec<SimFrame>,
    pub tracks: Vec<FrameObservations>,
}

pub fn simulate(spec: &SceneSpec) -> Simulation {
    let scene = generate_scene(spec);
    let poses = trajectory(spec);
    let frames = render_frames(&scene, &poses, spec);
    let tracks = emit_feature_tracks(&scene, &poses, &frames, spec);
    Simulation {
        spec: spec.clone(),
        scene,
        poses,
        frames,
        tracks,
    }
}

fn stamp(ts: f64) -> String {
    format!("{ts:.6}")
}

/// Write a simulation in TUM RGB-D layout plus labels, tracks, camera and
/// clean static renders.
pub fn write_sequence(sim: &Simulation, dir: &Path) -> Result<(), SimError> {
    for sub in ["rgb", "depth", "clean"] {
        fs::create_dir_all(dir.join(sub))?;
    }
    let mut rgb_txt = String::from("# color images\n# timestamp filename\n");
    let mut depth_txt = String::from("# depth maps\n# timestamp filename\n");
    let mut clean_txt = String::from("# static-only renders\n# timestamp filename\n");
    let mut gt = String::from("# ground truth trajectory\n# timestamp tx ty tz qx qy qz qw\n");
    for (f, frame) in sim.frames.iter().enumerate() {
        let ts = stamp(frame.timestamp);
        frame.rgb.save(&dir.join(format!("rgb/{ts}.png")))?;
        frame.depth.save_u16_png(&dir.join(format!("depth/{ts}.png")), DEPTH_SCALE)?;
        frame.clean.save(&dir.join(format!("clean/{ts}.png")))?;
        let _ = writeln!(rgb_txt, "{ts} rgb/{ts}.png");
        let _ = writeln!(depth_txt, "{ts} depth/{ts}.png");
        let _ = writeln!(clean_txt, "{ts} clean/{ts}.png");
        let v = sim.poses[f].to_tum();
        let _ = writeln!(
            gt,
            "{ts} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6}",
            v[0], v[1], v[2], v[3], v[4], v[5], v[6]
        );
    }
    fs::write(dir.join("rgb.txt"), rgb_txt)?;
    fs::write(dir.join("depth.txt"), depth_txt)?;
    fs::write(dir.join("clean.txt"), clean_txt)?;
    fs::write(dir.join("groundtruth.txt"), gt)?;

    let mut labels = String::from("# gaussian_id true_label\n");
    for (s, l) in sim.scene.splats.iter().zip(&sim.scene.labels) {
        let _ = writeln!(labels, "{} {}", s.id, l.as_u8());
    }
    fs::write(dir.join("labels.txt"), labels)?;

    let mut tracks = String::from("# timestamp feature_id u v depth\n");
    for fo in &sim.tracks {
        for o in &fo.items {
            let _ = writeln!(
                tracks,
                "{} {} {:.6} {:.6} {:.6}",
                stamp(fo.timestamp),
                o.feature.0,
                o.pixel.x,
                o.pixel.y,
                o.depth
            );
        }
    }
    fs::write(dir.join("tracks.txt"), tracks)?;

    let c = sim.spec.camera();
    fs::write(
        dir.join("camera.txt"),
        format!(
            "# fx fy cx cy width height\n{} {} {} {} {} {}\n",
            c.fx, c.fy, c.cx, c.cy, c.width, c.height
        ),
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SceneSpec {
        SceneSpec {
            static_count: 300,
            gaussians_per_object: 40,
            frames: 4,
            width: 64,
            height: 48,
            focal: 48.0,
            max_tracks: 200,
            ..SceneSpec::default()
        }
    }

    #[test]
    fn counts_and_labels() {
        let spec = SceneSpec {
            static_count: 1000,
            object_count: 2,
            gaussians_per_object: 100,
            ..SceneSpec::default()
        };
        let s = generate_scene(&spec);
        assert_eq!(s.splats.len(), 1200);
        assert_eq!(s.labels.iter().filter(|l| l.is_dynamic()).count(), 200);
        let none = generate_scene(&SceneSpec {
            object_count: 0,
            ..spec
        });
        assert!(none.labels.iter().all(|l| !l.is_dynamic()));
    }

    #[test]
    fn same_seed_same_scene() {
        assert_eq!(generate_scene(&small()), generate_scene(&small()));
    }

    #[test]
    fn frame_count_and_tracks_deterministic() {
        let a = simulate(&small());
        let b = simulate(&small());
        assert_eq!(a.frames.len(), 4);
        assert_eq!(a.tracks, b.tracks);
    }

    #[test]
    fn noiseless_tracks_are_exact() {
        let spec = SceneSpec {
            pixel_noise: 0.0,
            outlier_fraction: 0.0,
            ..small()
        };
        let sim = simulate(&spec);
        let cam = spec.camera();
        for (f, fo) in sim.tracks.iter().enumerate() {
            let splats = sim.scene.splats_at(&spec, f);
            for o in &fo.items {
                let p = cam
                    .project_cam(&sim.poses[f].transform(&splats[o.feature.0 as usize].position))
                    .unwrap();
                assert!((p - o.pixel).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn spec_parsing() {
        let s = SceneSpec::parse("# demo\nstatic_count = 10\nobject_count = 1\nvelocity.0 = 0 0.1 0\ntrajectory = lissajous\n").unwrap();
        assert_eq!(s.static_count, 10);
        assert_eq!(s.motions[0].velocity, Vector3::new(0.0, 0.1, 0.0));
        assert!(matches!(s.trajectory, TrajectoryKind::Lissajous { .. }));
        assert!(matches!(SceneSpec::parse("bogus = 1"), Err(SimError::Spec { line: 1, .. })));
        assert!(SceneSpec::parse("outlier_fraction = 1.0").is_err());
    }
}
