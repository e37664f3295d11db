//! Trajectory, labeling and rendering metrics.

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use super::tum::{associate, Trajectory, MAX_TIME_DIFF};
use crate::raster::RgbImage;

pub const MIN_ATE_PAIRS: usize = 3;
/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 100.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("only {0} associable pose pairs, need at least 3")]
    TooFewPairs(usize),
    #[error("image size mismatch")]
    DimensionMismatch,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }
}

/// Least-squares rotation and translation taking `src` onto `dst`
/// (Umeyama without scale).
pub fn umeyama_se3(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> RigidTransform {
    assert_eq!(src.len(), dst.len(), "point sets must pair up");
    let n = src.len().max(1) as f64;
    let ms = src.iter().sum::<Vector3<f64>>() / n;
    let md = dst.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        cov += (d - md) * (s - ms).transpose();
    }
    cov /= n;
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut sign = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        sign[(2, 2)] = -1.0;
    }
    let rotation = u * sign * vt;
    RigidTransform {
        rotation,
        translation: md - rotation * ms,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AteResult {
    pub rmse: f64,
    pub std: f64,
    pub pairs: usize,
}

/// Absolute trajectory error of camera centers after rigid alignment of the
/// estimate onto the ground truth. Poses pair by timestamp within 20 ms.
pub fn evaluate_ate(estimated: &Trajectory, ground_truth: &Trajectory) -> Result<AteResult, MetricError> {
    let ta: Vec<f64> = estimated.poses.iter().map(|p| p.timestamp).collect();
    let tb: Vec<f64> = ground_truth.poses.iter().map(|p| p.timestamp).collect();
    let pairs = associate(&ta, &tb, MAX_TIME_DIFF);
    if pairs.len() < MIN_ATE_PAIRS {
        return Err(MetricError::TooFewPairs(pairs.len()));
    }
    let src: Vec<Vector3<f64>> = pairs.iter().map(|&(i, _)| estimated.poses[i].center()).collect();
    let dst: Vec<Vector3<f64>> = pairs.iter().map(|&(_, j)| ground_truth.poses[j].center()).collect();
    let t = umeyama_se3(&src, &dst);
    let err: Vec<f64> = src.iter().zip(&dst).map(|(s, d)| (t.apply(s) - d).norm()).collect();
    let n = err.len() as f64;
    let rmse = (err.iter().map(|e| e * e).sum::<f64>() / n).sqrt();
    let mean = err.iter().sum::<f64>() / n;
    let std = (err.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok(AteResult {
        rmse,
        std,
        pairs: pairs.len(),
    })
}

/// Confusion counts with "dynamic" as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LabelCounts {
    pub true_dynamic: usize,
    pub false_dynamic: usize,
    pub false_static: usize,
    pub true_static: usize,
}

impl LabelCounts {
    pub fn add(&mut self, predicted_dynamic: bool, truly_dynamic: bool) {
        match (predicted_dynamic, truly_dynamic) {
            (true, true) => self.true_dynamic += 1,
            (true, false) => self.false_dynamic += 1,
            (false, true) => self.false_static += 1,
            (false, false) => self.true_static += 1,
        }
    }

    /// 1 when nothing was predicted dynamic.
    pub fn precision(&self) -> f64 {
        let p = self.true_dynamic + self.false_dynamic;
        if p == 0 {
            1.0
        } else {
            self.true_dynamic as f64 / p as f64
        }
    }

    /// 1 when nothing is truly dynamic.
    pub fn recall(&self) -> f64 {
        let p = self.true_dynamic + self.false_static;
        if p == 0 {
            1.0
        } else {
            self.true_dynamic as f64 / p as f64
        }
    }
}

/// Peak signal-to-noise ratio for images in [0,1], capped for identical inputs.
pub fn psnr(a: &RgbImage, b: &RgbImage) -> Result<f64, MetricError> {
    if a.width != b.width || a.height != b.height {
        return Err(MetricError::DimensionMismatch);
    }
    let mse = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (0..3).map(|c| (x[c] - y[c]).powi(2)).sum::<f64>())
        .sum::<f64>()
        / (3 * a.data.len()).max(1) as f64;
    if mse <= 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}
