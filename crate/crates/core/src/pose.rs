//! Robust Levenberg-Marquardt camera pose from 3-D/2-D correspondences.

use nalgebra::{Matrix2, Matrix2x6, Matrix3, Matrix6, Vector2, Vector3, Vector6};
use thiserror::Error;

pub use crate::camera::{Camera, CameraError, CameraPose};
use crate::camera::{skew, MIN_DEPTH};
use crate::par;

pub const MIN_CORRESPONDENCES: usize = 6;
pub const DEFAULT_HUBER_DELTA: f64 = 1.345;
/// Residual charged to a point that falls behind the camera.
const BEHIND_RESIDUAL: f64 = 1e3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub world_point: Vector3<f64>,
    pub pixel: Vector2<f64>,
    pub pixel_cov: Matrix2<f64>,
}

impl Correspondence {
    pub fn new(world_point: Vector3<f64>, pixel: Vector2<f64>) -> Self {
        Self {
            world_point,
            pixel,
            pixel_cov: Matrix2::identity(),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PoseError {
    #[error("need at least {need} correspondences, got {got}")]
    Underdetermined { got: usize, need: usize },
    #[error("pixel covariance of correspondence {0} is not positive definite")]
    Covariance(usize),
}

pub fn project(pose: &CameraPose, cam: &Camera, point: &Vector3<f64>) -> Result<Vector2<f64>, CameraError> {
    cam.project_cam(&pose.transform(point))
}

/// Huber cost and IRLS weight of a residual norm.
pub fn huber(r: f64, delta: f64) -> (f64, f64) {
    let r = r.abs();
    if r <= delta {
        (0.5 * r * r, 1.0)
    } else {
        (delta * (r - 0.5 * delta), delta / r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// `None` disables the robust kernel.
    pub huber_delta: Option<f64>,
    pub initial_damping: f64,
    pub damping_factor: f64,
    pub max_damping: f64,
    pub max_iterations: usize,
    pub update_tolerance: f64,
    pub cost_tolerance: f64,
    /// Mahalanobis gate for the inlier flags.
    pub inlier_gate: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            huber_delta: Some(DEFAULT_HUBER_DELTA),
            initial_damping: 1e-4,
            damping_factor: 10.0,
            max_damping: 1e10,
            max_iterations: 20,
            update_tolerance: 1e-8,
            cost_tolerance: 1e-10,
            inlier_gate: crate::flow::CHI2_95_2DOF,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseSolution {
    pub pose: CameraPose,
    /// Final Mahalanobis cost per correspondence (infinite behind the camera).
    pub chi2: Vec<f64>,
    pub inliers: Vec<bool>,
    pub iterations: usize,
    pub success: bool,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub last_update_norm: f64,
}

/// Residual `pixel - project(pose, point)` and its Jacobian w.r.t. the left
/// tangent update `(rho, phi)` of [`CameraPose::retract`].
pub fn residual_jacobian(
    pose: &CameraPose,
    cam: &Camera,
    c: &Correspondence,
) -> Result<(Vector2<f64>, Matrix2x6<f64>), CameraError> {
    let x = pose.transform(&c.world_point);
    let uv = cam.project_cam(&x)?;
    let iz = 1.0 / x.z;
    let dpi = nalgebra::Matrix2x3::new(
        cam.fx * iz,
        0.0,
        -cam.fx * x.x * iz * iz,
        0.0,
        cam.fy * iz,
        -cam.fy * x.y * iz * iz,
    );
    let mut dx = nalgebra::Matrix3x6::zeros();
    dx.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
    dx.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-skew(&x)));
    Ok((c.pixel - uv, -(dpi * dx)))
}

struct Whitener {
    /// Inverse Cholesky factor of each pixel covariance.
    linv: Vec<Matrix2<f64>>,
}

impl Whitener {
    fn new(corrs: &[Correspondence]) -> Result<Self, PoseError> {
        let linv = corrs
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let l = c.pixel_cov.cholesky().ok_or(PoseError::Covariance(i))?;
                l.l().try_inverse().ok_or(PoseError::Covariance(i))
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { linv })
    }
}

struct Term {
    cost: f64,
    chi2: f64,
    weight: f64,
    e: Vector2<f64>,
    j: Matrix2x6<f64>,
    active: bool,
}

fn eval_terms(
    pose: &CameraPose,
    cam: &Camera,
    corrs: &[Correspondence],
    wh: &Whitener,
    opts: &SolverOptions,
) -> Vec<Term> {
    par::map_range(corrs.len(), |i| {
        let rho = |r: f64| match opts.huber_delta {
            Some(d) => huber(r, d),
            None => (0.5 * r * r, 1.0),
        };
        match residual_jacobian(pose, cam, &corrs[i]) {
            Ok((r, j)) => {
                let e = wh.linv[i] * r;
                let chi2 = e.norm_squared();
                let (cost, weight) = rho(chi2.sqrt());
                Term {
                    cost,
                    chi2,
                    weight,
                    e,
                    j: wh.linv[i] * j,
                    active: true,
                }
            }
            Err(_) => Term {
                cost: rho(BEHIND_RESIDUAL).0,
                chi2: f64::INFINITY,
                weight: 0.0,
                e: Vector2::zeros(),
                j: Matrix2x6::zeros(),
                active: false,
            },
        }
    })
}

fn total_cost(terms: &[Term]) -> f64 {
    terms.iter().map(|t| t.cost).sum()
}

/// Minimize the robust reprojection cost over the pose by damped
/// Gauss-Newton steps on the SE(3) tangent space.
pub fn solve_pose(
    corrs: &[Correspondence],
    initial: &CameraPose,
    cam: &Camera,
    opts: &SolverOptions,
) -> Result<PoseSolution, PoseError> {
    if corrs.len() < MIN_CORRESPONDENCES {
        return Err(PoseError::Underdetermined {
            got: corrs.len(),
            need: MIN_CORRESPONDENCES,
        });
    }
    let wh = Whitener::new(corrs)?;
    let mut pose = *initial;
    let mut terms = eval_terms(&pose, cam, corrs, &wh, opts);
    let initial_cost = total_cost(&terms);
    let mut cost = initial_cost;
    let mut lambda = opts.initial_damping;
    let mut iterations = 0;
    let mut last_update = f64::INFINITY;
    let mut success = initial_cost.is_finite();
    let mut accepted_any = false;

    while success && iterations < opts.max_iterations {
        iterations += 1;
        let mut h = Matrix6::zeros();
        let mut g = Vector6::zeros();
        for t in terms.iter().filter(|t| t.active) {
            let jt = t.j.transpose();
            h += jt * t.j * t.weight;
            g += jt * t.e * t.weight;
        }
        let mut stepped = false;
        let mut done = false;
        while lambda <= opts.max_damping {
            let mut a = h;
            for k in 0..6 {
                a[(k, k)] += lambda * h[(k, k)].max(1e-12);
            }
            let Some(delta) = a.cholesky().map(|c| -c.solve(&g)) else {
                lambda *= opts.damping_factor;
                continue;
            };
            last_update = delta.norm();
            if last_update < opts.update_tolerance {
                done = true;
                break;
            }
            let trial = pose.retract(&delta);
            let trial_terms = eval_terms(&trial, cam, corrs, &wh, opts);
            let trial_cost = total_cost(&trial_terms);
            if trial_cost.is_finite() && trial_cost < cost {
                let rel = (cost - trial_cost) / cost.max(f64::MIN_POSITIVE);
                pose = trial;
                terms = trial_terms;
                cost = trial_cost;
                lambda = (lambda / opts.damping_factor).max(1e-12);
                stepped = true;
                accepted_any = true;
                if rel < opts.cost_tolerance {
                    done = true;
                }
                break;
            }
            lambda *= opts.damping_factor;
        }
        if done {
            break;
        }
        if !stepped {
            // No damping level lowers the cost: converged if we got anywhere.
            success = accepted_any || cost <= f64::EPSILON * corrs.len() as f64;
            break;
        }
    }
    if !success {
        pose = *initial;
        terms = eval_terms(&pose, cam, corrs, &wh, opts);
        cost = initial_cost;
    }
    let chi2: Vec<f64> = terms.iter().map(|t| t.chi2).collect();
    let inliers = chi2.iter().map(|&c| c < opts.inlier_gate).collect();
    Ok(PoseSolution {
        pose,
        chi2,
        inliers,
        iterations,
        success,
        initial_cost,
        final_cost: cost,
        last_update_norm: last_update,
    })
}

/// True when every correspondence lands in front of the camera.
pub fn all_in_front(pose: &CameraPose, corrs: &[Correspondence]) -> bool {
    corrs
        .iter()
        .all(|c| pose.transform(&c.world_point).z > MIN_DEPTH)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::UnitQuaternion;

    fn cam() -> Camera {
        Camera::new(100.0, 100.0, 50.0, 50.0, 101, 101).unwrap()
    }

    #[test]
    fn projection_examples() {
        let id = CameraPose::identity();
        assert_eq!(project(&id, &cam(), &Vector3::new(0.0, 0.0, 1.0)).unwrap(), Vector2::new(50.0, 50.0));
        assert_eq!(project(&id, &cam(), &Vector3::new(0.5, 0.0, 1.0)).unwrap(), Vector2::new(100.0, 50.0));
        assert!(project(&id, &cam(), &Vector3::new(0.0, 0.0, -1.0)).is_err());
    }

    #[test]
    fn huber_examples() {
        let d = 1.345;
        assert_eq!(huber(0.0, d), (0.0, 1.0));
        assert_eq!(huber(d, d), (0.5 * d * d, 1.0));
        let (c, w) = huber(2.0 * d, d);
        assert!((c - 1.5 * d * d).abs() < 1e-12);
        assert!((w - 0.5).abs() < 1e-15);
    }

    fn scene(pose: &CameraPose) -> Vec<Correspondence> {
        (0..30)
            .map(|i| {
                let f = i as f64;
                let p = Vector3::new((f * 0.37).sin(), (f * 0.61).cos() * 0.8, 3.0 + (f * 0.29).sin());
                Correspondence::new(p, project(pose, &cam(), &p).unwrap())
            })
            .collect()
    }

    #[test]
    fn too_few_points() {
        let c = scene(&CameraPose::identity());
        assert!(matches!(
            solve_pose(&c[..5], &CameraPose::identity(), &cam(), &SolverOptions::default()),
            Err(PoseError::Underdetermined { got: 5, need: 6 })
        ));
    }

    #[test]
    fn optimal_start_is_fixed_point() {
        let truth = CameraPose::new(
            UnitQuaternion::from_euler_angles(0.05, -0.02, 0.1),
            Vector3::new(0.1, 0.0, 0.2),
            0.0,
        );
        let s = solve_pose(&scene(&truth), &truth, &cam(), &SolverOptions::default()).unwrap();
        assert!(s.success);
        assert!(s.iterations <= 2);
        assert!(s.last_update_norm < 1e-10);
    }
}
