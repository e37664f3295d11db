//! Pinhole intrinsics and rigid camera poses.

use nalgebra::{Matrix3, UnitQuaternion, Vector2, Vector3, Vector6};
use thiserror::Error;

/// Points closer than this to the image plane are treated as behind the camera.
pub const MIN_DEPTH: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CameraError {
    #[error("point behind camera (z = {0})")]
    Cheirality(f64),
    #[error("invalid intrinsics: {0}")]
    Intrinsics(String),
}

/// Pinhole intrinsics. Pixel `(u, v)` has its center at integer coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, CameraError> {
        if !(fx > 0.0 && fy > 0.0) || width == 0 || height == 0 {
            return Err(CameraError::Intrinsics(format!(
                "fx={fx} fy={fy} size={width}x{height}"
            )));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    /// Intrinsics for pyramid level `level`: focal lengths and principal point
    /// scaled by `2^-level`, image dimensions halved with ceil.
    pub fn scaled(&self, level: usize) -> Camera {
        let s = 0.5f64.powi(level as i32);
        let (mut w, mut h) = (self.width, self.height);
        for _ in 0..level {
            w = w.div_ceil(2);
            h = h.div_ceil(2);
        }
        Camera {
            fx: self.fx * s,
            fy: self.fy * s,
            cx: self.cx * s,
            cy: self.cy * s,
            width: w,
            height: h,
        }
    }

    pub fn k(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Project a camera-frame point.
    pub fn project_cam(&self, p: &Vector3<f64>) -> Result<Vector2<f64>, CameraError> {
        if p.z <= MIN_DEPTH {
            return Err(CameraError::Cheirality(p.z));
        }
        Ok(Vector2::new(
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        ))
    }

    /// Camera-frame point at `depth` along the ray through `pixel`.
    pub fn back_project(&self, pixel: &Vector2<f64>, depth: f64) -> Vector3<f64> {
        Vector3::new(
            (pixel.x - self.cx) / self.fx * depth,
            (pixel.y - self.cy) / self.fy * depth,
            depth,
        )
    }

    /// True when `pixel` lies within the image rectangle `[0, w-1] x [0, h-1]`.
    pub fn contains(&self, pixel: &Vector2<f64>) -> bool {
        self.contains_with_margin(pixel, 0.0)
    }

    pub fn contains_with_margin(&self, pixel: &Vector2<f64>, margin: f64) -> bool {
        pixel.x >= margin
            && pixel.y >= margin
            && pixel.x <= self.width as f64 - 1.0 - margin
            && pixel.y <= self.height as f64 - 1.0 - margin
    }
}

/// World-to-camera rigid transform: `x_cam = R * x_world + t`.
///
/// Trajectory files use the TUM convention, which stores the inverse
/// (camera position and orientation in the world); see [`CameraPose::to_tum`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
    pub timestamp: f64,
}

impl CameraPose {
    pub fn identity() -> Self {
        Self::new(UnitQuaternion::identity(), Vector3::zeros(), 0.0)
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>, timestamp: f64) -> Self {
        Self {
            rotation,
            translation,
            timestamp,
        }
    }

    /// Pose of a camera at `center` looking at `target`, with image "down"
    /// roughly along `-up`.
    pub fn look_at(
        center: &Vector3<f64>,
        target: &Vector3<f64>,
        up: &Vector3<f64>,
        timestamp: f64,
    ) -> Self {
        let z = (target - center).normalize();
        let x = z.cross(up).normalize();
        let y = z.cross(&x);
        // Rows of the world-to-camera rotation are the camera axes in world coordinates.
        let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let rotation = UnitQuaternion::from_matrix(&r);
        let translation = -(rotation * center);
        Self::new(rotation, translation, timestamp)
    }

    #[inline]
    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Self {
        let r = self.rotation.inverse();
        Self::new(r, -(r * self.translation), self.timestamp)
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &CameraPose) -> Self {
        Self::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
            self.timestamp,
        )
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.inverse() * self.translation)
    }

    /// Left-multiplicative update: `x' = Exp(phi) (R x + t) + rho` with
    /// `delta = (rho, phi)`.
    pub fn retract(&self, delta: &Vector6<f64>) -> Self {
        let rho = Vector3::new(delta[0], delta[1], delta[2]);
        let phi = Vector3::new(delta[3], delta[4], delta[5]);
        let dr = UnitQuaternion::from_scaled_axis(phi);
        Self::new(
            dr * self.rotation,
            dr * self.translation + rho,
            self.timestamp,
        )
    }

    /// Relative transform taking camera-`self` coordinates to camera-`other` coordinates.
    pub fn relative_to(&self, other: &CameraPose) -> CameraPose {
        other.compose(&self.inverse())
    }

    /// TUM fields `(tx ty tz qx qy qz qw)` of the camera-to-world transform.
    pub fn to_tum(&self) -> [f64; 7] {
        let inv = self.inverse();
        let q = inv.rotation.into_inner();
        let t = inv.translation;
        [t.x, t.y, t.z, q.i, q.j, q.k, q.w]
    }

    pub fn from_tum(timestamp: f64, v: &[f64; 7]) -> Self {
        let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(v[6], v[3], v[4], v[5]));
        let cam_to_world = Self::new(q, Vector3::new(v[0], v[1], v[2]), timestamp);
        let mut p = cam_to_world.inverse();
        p.timestamp = timestamp;
        p
    }
}

/// Skew-symmetric cross-product matrix.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cam() -> Camera {
        Camera::new(100.0, 100.0, 50.0, 50.0, 101, 101).unwrap()
    }

    #[test]
    fn principal_point_projection() {
        let p = cam().project_cam(&Vector3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!(p, Vector2::new(50.0, 50.0));
        let p = cam().project_cam(&Vector3::new(0.5, 0.0, 1.0)).unwrap();
        assert_eq!(p, Vector2::new(100.0, 50.0));
    }

    #[test]
    fn behind_camera_is_cheirality() {
        assert!(matches!(
            cam().project_cam(&Vector3::new(0.0, 0.0, -1.0)),
            Err(CameraError::Cheirality(_))
        ));
    }

    #[test]
    fn look_at_puts_target_on_axis() {
        let c = Vector3::new(1.0, 0.5, 2.0);
        let pose = CameraPose::look_at(&c, &Vector3::zeros(), &Vector3::y(), 0.0);
        let t = pose.transform(&Vector3::zeros());
        assert!(t.x.abs() < 1e-12 && t.y.abs() < 1e-12 && t.z > 0.0);
        assert!((pose.center() - c).norm() < 1e-12);
        // World up projects to image up (negative v).
        let up = pose.transform(&Vector3::new(0.0, 0.3, 0.0));
        assert!(up.y < 0.0);
    }

    #[test]
    fn tum_round_trip() {
        let pose = CameraPose::new(
            UnitQuaternion::from_euler_angles(0.1, -0.2, 0.3),
            Vector3::new(0.4, -0.1, 2.0),
            1.5,
        );
        let back = CameraPose::from_tum(1.5, &pose.to_tum());
        assert!((back.translation - pose.translation).norm() < 1e-12);
        assert!(back.rotation.angle_to(&pose.rotation) < 1e-12);
    }

    #[test]
    fn scaled_intrinsics_follow_ceil_halving() {
        let c = Camera::new(120.0, 120.0, 80.0, 60.0, 161, 121).unwrap().scaled(2);
        assert_eq!((c.width, c.height), (41, 31));
        assert_eq!(c.fx, 30.0);
        assert_eq!(c.cx, 20.0);
    }
}
