//! CPU Gaussian splatting: projection, compositing, losses, gradients and
//! the coarse-to-fine optimizer.

mod optim;
mod project;
mod render;
mod ssim;

use nalgebra::{UnitQuaternion, Vector3};

pub use optim::{
    build_pyramid, optimize_coarse_to_fine, prune_and_densify, write_trace_csv, Keyframe,
    LearningRates, OptimConfig, OptimTrace, PruneReport, PruneThresholds, PyramidLevel,
    TraceEntry,
};
pub use project::{project_gaussian, ScreenGaussian, NEAR_PLANE};
pub use render::{
    backward_gradients, composite, composite_scene, RenderOptions, RenderedImage, Scene,
    SplatGrad,
};
pub use ssim::{
    photometric_ssim_loss, ssim, ssim_gray, total_loss, LossValue, LossWeights, SsimError,
};

/// Degree-1 real spherical-harmonic constant.
pub const SH_C1: f64 = 0.488_602_511_902_919_9;

/// View-dependent color: a base RGB plus optional degree-1 SH coefficients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShColor {
    pub dc: [f64; 3],
    /// Coefficients for the basis `(-y, z, -x)` of the unit view direction.
    pub sh1: Option<[[f64; 3]; 3]>,
}

impl ShColor {
    pub fn rgb(dc: [f64; 3]) -> Self {
        Self { dc, sh1: None }
    }

    pub fn sh_basis(dir: &Vector3<f64>) -> [f64; 3] {
        [-SH_C1 * dir.y, SH_C1 * dir.z, -SH_C1 * dir.x]
    }

    /// Color seen along unit direction `dir` (camera center to Gaussian).
    pub fn eval(&self, dir: &Vector3<f64>) -> [f64; 3] {
        let mut c = self.dc;
        if let Some(sh) = &self.sh1 {
            let b = Self::sh_basis(dir);
            for (k, bk) in b.iter().enumerate() {
                for ch in 0..3 {
                    c[ch] += bk * sh[k][ch];
                }
            }
        }
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Splat {
    pub id: u64,
    pub position: Vector3<f64>,
    pub rotation: UnitQuaternion<f64>,
    /// Per-axis standard deviations, meters.
    pub scale: Vector3<f64>,
    pub opacity: f64,
    pub color: ShColor,
}

impl Splat {
    pub fn isotropic(id: u64, position: Vector3<f64>, sigma: f64, opacity: f64, rgb: [f64; 3]) -> Self {
        Self {
            id,
            position,
            rotation: UnitQuaternion::identity(),
            scale: Vector3::repeat(sigma),
            opacity,
            color: ShColor::rgb(rgb),
        }
    }

    pub fn max_scale(&self) -> f64 {
        self.scale.max()
    }
}

/// Half-diagonal of the axis-aligned box around the splat centers; 0 when empty.
pub fn scene_extent<'a>(splats: impl Iterator<Item = &'a Splat>) -> f64 {
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    let mut any = false;
    for s in splats {
        lo = lo.inf(&s.position);
        hi = hi.sup(&s.position);
        any = true;
    }
    if !any {
        return 0.0;
    }
    0.5 * (hi - lo).norm()
}
