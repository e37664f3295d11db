//! Sparse pyramidal Lucas-Kanade flow, a Gaussian model of static flow, and
//! chi-square recovery of Gaussians wrongly labeled dynamic.

use nalgebra::{Matrix2, Vector2};
use thiserror::Error;

use crate::gaussian_map::{GaussianId, GaussianMap, Label};
use crate::par;
use crate::raster::{gaussian_kernel, GrayImage};

/// 95% quantile of the chi-square distribution with two degrees of freedom.
pub const CHI2_95_2DOF: f64 = 5.991;
pub const DEFAULT_COVARIANCE_FLOOR: f64 = 1e-4;
pub const MIN_FLOW_SAMPLES: usize = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlowError {
    #[error("image dimensions differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("need at least {need} flow samples, got {got}")]
    InsufficientSamples { got: usize, need: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LkParams {
    /// Odd window side, pixels.
    pub window: usize,
    pub levels: usize,
    pub max_iterations: usize,
    /// Stop iterating once the update is shorter than this, pixels.
    pub epsilon: f64,
    /// Minimum structure-tensor eigenvalue per window pixel.
    pub min_eigenvalue: f64,
}

impl Default for LkParams {
    fn default() -> Self {
        Self {
            window: 15,
            levels: 3,
            max_iterations: 30,
            epsilon: 0.01,
            min_eigenvalue: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowResult {
    pub flow: Vector2<f64>,
    pub valid: bool,
}

impl FlowResult {
    const INVALID: FlowResult = FlowResult {
        flow: Vector2::new(0.0, 0.0),
        valid: false,
    };
}

fn lk_pyramid(img: &GrayImage, levels: usize) -> Vec<GrayImage> {
    let k = gaussian_kernel(5, 1.0);
    let mut out = vec![img.clone()];
    for _ in 1..levels.max(1) {
        let last = out.last().unwrap();
        if last.width < 5 || last.height < 5 {
            break;
        }
        out.push(last.convolve_separable(&k).decimate());
    }
    out
}

fn in_bounds(img: &GrayImage, p: &Vector2<f64>, margin: f64) -> bool {
    p.x >= margin
        && p.y >= margin
        && p.x <= img.width as f64 - 1.0 - margin
        && p.y <= img.height as f64 - 1.0 - margin
}

fn track_point(prev: &[GrayImage], cur: &[GrayImage], p0: &Vector2<f64>, prm: &LkParams) -> FlowResult {
    let half = (prm.window / 2) as f64;
    if !in_bounds(&prev[0], p0, half) {
        return FlowResult::INVALID;
    }
    let r = (prm.window / 2) as i64;
    let npix = (prm.window * prm.window) as f64;
    let mut guess = Vector2::zeros();
    for level in (0..prev.len()).rev() {
        let (ip, ic) = (&prev[level], &cur[level]);
        let s = 0.5f64.powi(level as i32);
        let p = p0 * s;
        let mut patch = Vec::with_capacity(prm.window * prm.window);
        let mut g: Matrix2<f64> = Matrix2::zeros();
        for dy in -r..=r {
            for dx in -r..=r {
                let (x, y) = (p.x + dx as f64, p.y + dy as f64);
                let ix = 0.5 * (ip.sample(x + 1.0, y) - ip.sample(x - 1.0, y));
                let iy = 0.5 * (ip.sample(x, y + 1.0) - ip.sample(x, y - 1.0));
                g[(0, 0)] += ix * ix;
                g[(0, 1)] += ix * iy;
                g[(1, 1)] += iy * iy;
                patch.push((x, y, ip.sample(x, y), ix, iy));
            }
        }
        g[(1, 0)] = g[(0, 1)];
        let tr = 0.5 * (g[(0, 0)] + g[(1, 1)]);
        let det = g[(0, 0)] * g[(1, 1)] - g[(0, 1)] * g[(0, 1)];
        let lmin = tr - (tr * tr - det).max(0.0).sqrt();
        if !(lmin / npix >= prm.min_eigenvalue) {
            return FlowResult::INVALID;
        }
        let ginv = Matrix2::new(g[(1, 1)], -g[(0, 1)], -g[(1, 0)], g[(0, 0)]) / det;
        let mut nu = Vector2::zeros();
        for _ in 0..prm.max_iterations {
            let d = guess + nu;
            let mut b = Vector2::zeros();
            for &(x, y, i0, ix, iy) in &patch {
                let diff = i0 - ic.sample(x + d.x, y + d.y);
                b.x += diff * ix;
                b.y += diff * iy;
            }
            let eta = ginv * b;
            nu += eta;
            if eta.norm() < prm.epsilon {
                break;
            }
        }
        guess += nu;
        if level > 0 {
            guess *= 2.0;
        }
    }
    let end = p0 + guess;
    if !guess.iter().all(|v| v.is_finite()) || !in_bounds(&cur[0], &end, 0.0) {
        return FlowResult::INVALID;
    }
    FlowResult {
        flow: guess,
        valid: true,
    }
}

/// Pyramidal Lucas-Kanade flow of each point from `prev` to `cur`.
pub fn lk_flow(
    prev: &GrayImage,
    cur: &GrayImage,
    points: &[Vector2<f64>],
    params: &LkParams,
) -> Result<Vec<FlowResult>, FlowError> {
    if prev.width != cur.width || prev.height != cur.height {
        return Err(FlowError::DimensionMismatch(
            prev.width,
            prev.height,
            cur.width,
            cur.height,
        ));
    }
    let pp = lk_pyramid(prev, params.levels);
    let pc = lk_pyramid(cur, params.levels);
    Ok(par::map_slice(points, |p| track_point(&pp, &pc, p, params)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowModel {
    pub mean: Vector2<f64>,
    /// Sample covariance plus the floor on the diagonal; used for gating.
    pub covariance: Matrix2<f64>,
    /// Unfloored sample covariance.
    pub sample_covariance: Matrix2<f64>,
    pub sample_count: usize,
}

/// Mean and `n - 1` covariance of `flows`, with `floor * I` added.
pub fn fit_flow_model(flows: &[Vector2<f64>], floor: f64) -> Result<FlowModel, FlowError> {
    if flows.len() < MIN_FLOW_SAMPLES {
        return Err(FlowError::InsufficientSamples {
            got: flows.len(),
            need: MIN_FLOW_SAMPLES,
        });
    }
    let n = flows.len() as f64;
    let mean = flows.iter().sum::<Vector2<f64>>() / n;
    let mut cov = Matrix2::zeros();
    for f in flows {
        let d = f - mean;
        cov += d * d.transpose();
    }
    cov /= n - 1.0;
    cov[(0, 1)] = 0.5 * (cov[(0, 1)] + cov[(1, 0)]);
    cov[(1, 0)] = cov[(0, 1)];
    let det = cov.determinant();
    let scale = cov.trace().powi(2);
    if det <= 1e-12 * scale.max(f64::MIN_POSITIVE) {
        log::warn!("static flow covariance is rank deficient; relying on the {floor:e} floor");
    }
    Ok(FlowModel {
        mean,
        covariance: cov + Matrix2::identity() * floor,
        sample_covariance: cov,
        sample_count: flows.len(),
    })
}

/// Squared Mahalanobis distance of `v` from the model mean.
pub fn chi_square(v: &Vector2<f64>, model: &FlowModel) -> f64 {
    let d = v - model.mean;
    let c = &model.covariance;
    let det = c[(0, 0)] * c[(1, 1)] - c[(0, 1)] * c[(1, 0)];
    let q = c[(1, 1)] * d.x * d.x - (c[(0, 1)] + c[(1, 0)]) * d.x * d.y + c[(0, 0)] * d.y * d.y;
    (q / det).max(0.0)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RecoveryReport {
    pub recovered: Vec<GaussianId>,
    /// Candidates whose flow failed the gate.
    pub rejected: Vec<GaussianId>,
    /// Candidates without a valid flow, or not in the map.
    pub no_flow: Vec<GaussianId>,
}

/// Gate each dynamic candidate's flow against `model`.
///
/// Candidates are `(id, pixel in the previous keyframe)`. A recovered
/// Gaussian is relabeled static and one static entry is appended to its
/// label history.
pub fn verify_and_recover(
    map: &mut GaussianMap,
    candidates: &[(GaussianId, Vector2<f64>)],
    prev: &GrayImage,
    cur: &GrayImage,
    model: &FlowModel,
    params: &LkParams,
    threshold: f64,
) -> Result<RecoveryReport, FlowError> {
    let pixels: Vec<Vector2<f64>> = candidates.iter().map(|c| c.1).collect();
    let flows = lk_flow(prev, cur, &pixels, params)?;
    let mut report = RecoveryReport::default();
    for ((id, _), f) in candidates.iter().zip(&flows) {
        let Some(g) = map.get_mut(*id) else {
            report.no_flow.push(*id);
            continue;
        };
        if !f.valid {
            report.no_flow.push(*id);
            continue;
        }
        if chi_square(&f.flow, model) <= threshold {
            g.label = Label::Static;
            g.label_history.push(Label::Static);
            report.recovered.push(*id);
        } else {
            report.rejected.push(*id);
        }
    }
    Ok(report)
}

/// Up to `max` points spread over a `cells x cells` grid of the image,
/// taking points round-robin across cells in input order.
pub fn stratified_subset(
    points: &[(GaussianId, Vector2<f64>)],
    width: usize,
    height: usize,
    cells: usize,
    max: usize,
) -> Vec<(GaussianId, Vector2<f64>)> {
    let cells = cells.max(1);
    let mut buckets: Vec<Vec<(GaussianId, Vector2<f64>)>> = vec![Vec::new(); cells * cells];
    for &(id, p) in points {
        let cx = ((p.x / width as f64 * cells as f64).floor().max(0.0) as usize).min(cells - 1);
        let cy = ((p.y / height as f64 * cells as f64).floor().max(0.0) as usize).min(cells - 1);
        buckets[cy * cells + cx].push((id, p));
    }
    let mut out = Vec::new();
    let mut round = 0;
    while out.len() < max {
        let mut any = false;
        for b in &buckets {
            if let Some(p) = b.get(round) {
                any = true;
                out.push(*p);
                if out.len() == max {
                    break;
                }
            }
        }
        if !any {
            break;
        }
        round += 1;
    }
    out
}
