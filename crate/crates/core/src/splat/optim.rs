use std::io::{self, Write};

use nalgebra::{Quaternion, UnitQuaternion};

use crate::camera::{Camera, CameraPose};
use crate::gaussian_map::{FrameObservations, GaussianId, GaussianMap, InsertReport, Label};
use crate::raster::{gaussian_kernel, RgbImage};

use super::render::{backward_gradients, RenderOptions, Scene, SplatGrad};
use super::ssim::LossWeights;

const BLUR_SIZE: usize = 5;
const BLUR_SIGMA: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct PyramidLevel {
    pub level: usize,
    pub image: RgbImage,
    /// `2^level`.
    pub scale: f64,
}

/// Level 0 is `img`; each further level is a 5×5 blur followed by 2×
/// decimation. Stops early once an image gets smaller than the blur kernel.
pub fn build_pyramid(img: &RgbImage, levels: usize) -> Vec<PyramidLevel> {
    let kernel = gaussian_kernel(BLUR_SIZE, BLUR_SIGMA);
    let mut out = vec![PyramidLevel {
        level: 0,
        image: img.clone(),
        scale: 1.0,
    }];
    for level in 1..levels.max(1) {
        let prev = &out[level - 1].image;
        if prev.width < BLUR_SIZE || prev.height < BLUR_SIZE {
            log::warn!(
                "pyramid stopped at {} of {levels} levels ({}x{} image)",
                level,
                prev.width,
                prev.height
            );
            break;
        }
        let ch = prev.channels().map(|c| c.convolve_separable(&kernel).decimate());
        out.push(PyramidLevel {
            level,
            image: RgbImage::from_channels(&ch),
            scale: (1u64 << level) as f64,
        });
    }
    out
}

/// Per-group SGD step sizes. The position rate is multiplied by the scene extent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LearningRates {
    pub color: f64,
    pub opacity: f64,
    pub position: f64,
    pub scale: f64,
    pub rotation: f64,
    pub sh: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            color: 2.0,
            opacity: 1.0,
            position: 0.05,
            scale: 0.2,
            rotation: 0.1,
            sh: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub levels: usize,
    /// Iterations per level, coarsest first.
    pub iterations: Vec<usize>,
    pub lr: LearningRates,
    pub weights: LossWeights,
    pub render: RenderOptions,
    /// Abort when a loss exceeds this multiple of the first one.
    pub divergence_factor: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            iterations: vec![30, 30, 40],
            lr: LearningRates::default(),
            weights: LossWeights::default(),
            render: RenderOptions::default(),
            divergence_factor: 10.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceEntry {
    pub iter: usize,
    pub level: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptimTrace {
    pub entries: Vec<TraceEntry>,
    pub diverged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Keyframe {
    pub pose: CameraPose,
    pub image: RgbImage,
}

fn apply_sgd(scene: &mut Scene, grads: &[SplatGrad], lr: &LearningRates, extent: f64) {
    for (s, g) in scene.splats.iter_mut().zip(grads) {
        for c in 0..3 {
            s.color.dc[c] -= lr.color * g.color[c];
        }
        if let Some(sh) = s.color.sh1.as_mut() {
            for (k, row) in sh.iter_mut().enumerate() {
                for c in 0..3 {
                    row[c] -= lr.sh * g.sh1[k][c];
                }
            }
        }
        s.opacity = (s.opacity - lr.opacity * g.opacity).clamp(0.0, 1.0);
        s.position -= g.position * (lr.position * extent);
        for k in 0..3 {
            s.scale[k] *= (-lr.scale * s.scale[k] * g.scale[k]).exp();
        }
        let q = s.rotation.quaternion();
        let raw = Quaternion::new(
            q.w - lr.rotation * g.rotation[0],
            q.i - lr.rotation * g.rotation[1],
            q.j - lr.rotation * g.rotation[2],
            q.k - lr.rotation * g.rotation[3],
        );
        if raw.norm() > 0.0 {
            s.rotation = UnitQuaternion::from_quaternion(raw);
        }
    }
}

/// Coarse-to-fine SGD over `keyframes`, cycling through them one per
/// iteration. Level `i` renders with intrinsics scaled by `2^-i` against the
/// matching pyramid image.
pub fn optimize_coarse_to_fine(
    scene: &mut Scene,
    keyframes: &[Keyframe],
    cam: &Camera,
    cfg: &OptimConfig,
) -> OptimTrace {
    let mut trace = OptimTrace::default();
    if keyframes.is_empty() || scene.splats.is_empty() {
        return trace;
    }
    let pyramids: Vec<Vec<PyramidLevel>> = keyframes
        .iter()
        .map(|k| build_pyramid(&k.image, cfg.levels))
        .collect();
    let levels = pyramids.iter().map(|p| p.len()).min().unwrap_or(1);
    let extent = super::scene_extent(scene.splats.iter()).max(1e-3);
    let mut iter = 0;
    let mut first: Option<f64> = None;
    for level in (0..levels).rev() {
        let lcam = cam.scaled(level);
        let slot = cfg.levels.saturating_sub(1 + level);
        let n_iter = cfg.iterations.get(slot).copied().unwrap_or(0);
        for _ in 0..n_iter {
            let k = iter % keyframes.len();
            let target = &pyramids[k][level].image;
            let (loss, grads) =
                match backward_gradients(scene, &keyframes[k].pose, &lcam, target, &cfg.weights, &cfg.render) {
                    Ok(v) => v,
                    Err(e) => {
                        log::error!("optimizer: {e}");
                        trace.diverged = true;
                        return trace;
                    }
                };
            trace.entries.push(TraceEntry {
                iter,
                level,
                loss: loss.total,
            });
            let f = *first.get_or_insert(loss.total);
            if !loss.total.is_finite() || loss.total > cfg.divergence_factor * f.max(1e-12) {
                log::warn!("optimizer diverged at iter {iter} (loss {})", loss.total);
                trace.diverged = true;
                return trace;
            }
            apply_sgd(scene, &grads, &cfg.lr, extent);
            iter += 1;
        }
    }
    trace
}

/// Loss trace as CSV with header `iter,level,loss`.
pub fn write_trace_csv<W: Write>(out: &mut W, trace: &OptimTrace) -> io::Result<()> {
    writeln!(out, "iter,level,loss")?;
    for e in &trace.entries {
        writeln!(out, "{},{},{:.9}", e.iter, e.level, e.loss)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PruneThresholds {
    pub min_opacity: f64,
    /// Fraction of the scene extent a static splat's largest axis may reach.
    pub max_scale_fraction: f64,
}

impl Default for PruneThresholds {
    fn default() -> Self {
        Self {
            min_opacity: 0.005,
            max_scale_fraction: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PruneReport {
    pub pruned: Vec<GaussianId>,
    pub inserted: InsertReport,
}

/// Drop faint or oversized static Gaussians, then seed new ones from
/// unlinked observations. Gaussians labeled dynamic now or anywhere in their
/// label window are never pruned here.
pub fn prune_and_densify(
    map: &mut GaussianMap,
    thresholds: &PruneThresholds,
    obs: &FrameObservations,
    pose: &CameraPose,
    cam: &Camera,
    rgb: Option<&RgbImage>,
) -> PruneReport {
    let max_scale = thresholds.max_scale_fraction * map.extent();
    let pruned: Vec<GaussianId> = map
        .iter()
        .filter(|g| !g.label.is_dynamic() && !g.label_history.iter().any(Label::is_dynamic))
        .filter(|g| g.splat.opacity < thresholds.min_opacity || g.splat.max_scale() > max_scale)
        .map(|g| g.id())
        .collect();
    for id in &pruned {
        map.remove(*id);
    }
    let inserted = map.insert_from_features(obs, pose, cam, rgb);
    PruneReport { pruned, inserted }
}
