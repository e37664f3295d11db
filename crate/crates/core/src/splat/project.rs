use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};

use crate::camera::{Camera, CameraPose};

use super::Splat;

/// Centers closer than this are culled.
pub const NEAR_PLANE: f64 = 0.01;
/// Added to the screen covariance diagonal, pixels².
pub const SCREEN_DILATION: f64 = 0.3;

/// A splat projected to the image plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScreenGaussian {
    pub mean: Vector2<f64>,
    /// Dilated 2-D covariance, pixels².
    pub cov: Matrix2<f64>,
    /// Inverse covariance entries `(a, b, c)` of `[[a, b], [b, c]]`.
    pub conic: [f64; 3],
    pub depth: f64,
    pub cam_point: Vector3<f64>,
}

pub(crate) fn rotation_matrix(s: &Splat) -> Matrix3<f64> {
    s.rotation.to_rotation_matrix().into_inner()
}

fn perspective_jacobian(p: &Vector3<f64>, cam: &Camera) -> Matrix2x3<f64> {
    let iz = 1.0 / p.z;
    let iz2 = iz * iz;
    Matrix2x3::new(
        cam.fx * iz,
        0.0,
        -cam.fx * p.x * iz2,
        0.0,
        cam.fy * iz,
        -cam.fy * p.y * iz2,
    )
}

/// EWA projection of `splat`; `None` when the center is behind the near plane.
pub fn project_gaussian(splat: &Splat, pose: &CameraPose, cam: &Camera) -> Option<ScreenGaussian> {
    let pc = pose.transform(&splat.position);
    if !(pc.z > NEAR_PLANE) {
        return None;
    }
    let mean = Vector2::new(
        cam.fx * pc.x / pc.z + cam.cx,
        cam.fy * pc.y / pc.z + cam.cy,
    );
    let m = rotation_matrix(splat) * Matrix3::from_diagonal(&splat.scale);
    let sigma3 = m * m.transpose();
    let t = perspective_jacobian(&pc, cam) * pose.rotation.to_rotation_matrix().into_inner();
    let mut cov = t * sigma3 * t.transpose();
    cov[(0, 1)] = 0.5 * (cov[(0, 1)] + cov[(1, 0)]);
    cov[(1, 0)] = cov[(0, 1)];
    cov[(0, 0)] += SCREEN_DILATION;
    cov[(1, 1)] += SCREEN_DILATION;
    let det = cov[(0, 0)] * cov[(1, 1)] - cov[(0, 1)] * cov[(0, 1)];
    if !(det > 0.0) || !det.is_finite() {
        return None;
    }
    let conic = [cov[(1, 1)] / det, -cov[(0, 1)] / det, cov[(0, 0)] / det];
    Some(ScreenGaussian {
        mean,
        cov,
        conic,
        depth: pc.z,
        cam_point: pc,
    })
}

/// Gradients w.r.t. the screen-space quantities of one splat.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub(crate) struct ScreenGrad {
    pub mean: [f64; 2],
    pub conic: [f64; 3],
    pub opacity: f64,
    pub color: [f64; 3],
}

impl ScreenGrad {
    pub fn add(&mut self, o: &ScreenGrad) {
        for k in 0..2 {
            self.mean[k] += o.mean[k];
        }
        for k in 0..3 {
            self.conic[k] += o.conic[k];
            self.color[k] += o.color[k];
        }
        self.opacity += o.opacity;
    }
}

/// Parameter gradients `(position, quaternion (w, x, y, z), scale)` from
/// screen-space gradients.
pub(crate) fn backward_projection(
    splat: &Splat,
    pose: &CameraPose,
    cam: &Camera,
    sg: &ScreenGaussian,
    g: &ScreenGrad,
) -> (Vector3<f64>, [f64; 4], Vector3<f64>) {
    let pc = sg.cam_point;
    let w = pose.rotation.to_rotation_matrix().into_inner();
    let r = rotation_matrix(splat);
    let m = r * Matrix3::from_diagonal(&splat.scale);
    let sigma3 = m * m.transpose();
    let j = perspective_jacobian(&pc, cam);
    let t = j * w;

    // Conic (a, b, c) -> symmetric matrix gradient of A, then through A = cov^-1.
    let ga = Matrix2::new(g.conic[0], 0.5 * g.conic[1], 0.5 * g.conic[1], g.conic[2]);
    let a = Matrix2::new(sg.conic[0], sg.conic[1], sg.conic[1], sg.conic[2]);
    let gcov = -(a * ga * a);

    let gsigma3 = t.transpose() * gcov * t;
    let gt = 2.0 * gcov * t * sigma3;
    let gj = gt * w.transpose();

    let (x, y, z) = (pc.x, pc.y, pc.z);
    let iz = 1.0 / z;
    let iz2 = iz * iz;
    let iz3 = iz2 * iz;
    let mut gpc = Vector3::new(
        cam.fx * iz * g.mean[0],
        cam.fy * iz * g.mean[1],
        -cam.fx * x * iz2 * g.mean[0] - cam.fy * y * iz2 * g.mean[1],
    );
    gpc.x += gj[(0, 2)] * (-cam.fx * iz2);
    gpc.y += gj[(1, 2)] * (-cam.fy * iz2);
    gpc.z += gj[(0, 0)] * (-cam.fx * iz2)
        + gj[(0, 2)] * (2.0 * cam.fx * x * iz3)
        + gj[(1, 1)] * (-cam.fy * iz2)
        + gj[(1, 2)] * (2.0 * cam.fy * y * iz3);
    let gpos = w.transpose() * gpc;

    let gm = 2.0 * gsigma3 * m;
    let s = splat.scale;
    let gscale = Vector3::from_fn(|k, _| (0..3).map(|i| gm[(i, k)] * r[(i, k)]).sum());
    let gr = Matrix3::from_fn(|i, k| gm[(i, k)] * s[k]);
    let gq = quaternion_grad(splat, &gr);
    (gpos, gq, gscale)
}

/// Gradient w.r.t. the raw quaternion components, projected onto the
/// tangent of the unit sphere to account for normalization.
fn quaternion_grad(splat: &Splat, g: &Matrix3<f64>) -> [f64; 4] {
    let q = splat.rotation.quaternion();
    let (w, x, y, z) = (q.w, q.i, q.j, q.k);
    let gw = 2.0
        * (-z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)]
            + x * g[(2, 1)]);
    let gx = 2.0
        * (y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - 2.0 * x * g[(1, 1)] - w * g[(1, 2)]
            + z * g[(2, 0)]
            + w * g[(2, 1)]
            - 2.0 * x * g[(2, 2)]);
    let gy = 2.0
        * (-2.0 * y * g[(0, 0)] + x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)] + z * g[(1, 2)]
            - w * g[(2, 0)]
            + z * g[(2, 1)]
            - 2.0 * y * g[(2, 2)]);
    let gz = 2.0
        * (-2.0 * z * g[(0, 0)] - w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)]
            - 2.0 * z * g[(1, 1)]
            + y * g[(1, 2)]
            + x * g[(2, 0)]
            + y * g[(2, 1)]);
    let raw = [gw, gx, gy, gz];
    let qv = [w, x, y, z];
    let dot: f64 = raw.iter().zip(&qv).map(|(a, b)| a * b).sum();
    std::array::from_fn(|k| raw[k] - dot * qv[k])
}
