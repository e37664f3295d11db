//! Static-population cue model and the unary potential it induces.
//!
//! Each of the four cues (reprojection error, depth variation, observation
//! count, epipolar distance) gets a 1-D Gaussian fitted to a population that
//! is assumed static. A Gaussian's static score is the weighted sum of the
//! peak-normalized component densities, each evaluated at that Gaussian's own
//! cue value, so the score always lies in (0, 1].

use std::fmt;

use thiserror::Error;

use crate::gaussian_map::MotionStats;

pub const DEFAULT_VARIANCE_FLOOR: f64 = 1e-6;
/// Guard inside the dynamic-label log.
pub const UNARY_EPSILON: f64 = 1e-6;
pub const MIN_BOOTSTRAP_SAMPLES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StatKind {
    Reprojection = 0,
    Depth = 1,
    ObservationCount = 2,
    Epipolar = 3,
}

impl StatKind {
    pub const ALL: [StatKind; 4] = [
        StatKind::Reprojection,
        StatKind::Depth,
        StatKind::ObservationCount,
        StatKind::Epipolar,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StatKind::Reprojection => "reproj",
            StatKind::Depth => "depth",
            StatKind::ObservationCount => "obs_count",
            StatKind::Epipolar => "epipolar",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Component {
    pub mean: f64,
    pub variance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StaticStatModel {
    pub components: [Component; 4],
    pub weights: [f64; 4],
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FitError {
    #[error("insufficient bootstrap: {got} samples, need at least {need}")]
    InsufficientBootstrap { got: usize, need: usize },
    #[error("mixture weights must be non-negative and sum to a positive value")]
    BadWeights,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub variance_floor: f64,
    pub weights: [f64; 4],
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            variance_floor: DEFAULT_VARIANCE_FLOOR,
            weights: [0.25; 4],
        }
    }
}

/// Fitted model plus which components hit the variance floor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitReport {
    pub model: StaticStatModel,
    pub floored: [bool; 4],
}

/// Moment-match each cue over `samples` (sample variance, `n - 1`).
pub fn fit_static_model(samples: &[MotionStats], opts: &FitOptions) -> Result<FitReport, FitError> {
    if samples.len() < MIN_BOOTSTRAP_SAMPLES {
        return Err(FitError::InsufficientBootstrap {
            got: samples.len(),
            need: MIN_BOOTSTRAP_SAMPLES,
        });
    }
    let wsum: f64 = opts.weights.iter().sum();
    if opts.weights.iter().any(|w| *w < 0.0) || !(wsum > 0.0) {
        return Err(FitError::BadWeights);
    }
    let n = samples.len() as f64;
    let mut floored = [false; 4];
    let components = std::array::from_fn(|k| {
        let mean = samples.iter().map(|s| s.values()[k]).sum::<f64>() / n;
        let var = samples
            .iter()
            .map(|s| (s.values()[k] - mean).powi(2))
            .sum::<f64>()
            / (n - 1.0);
        if var < opts.variance_floor {
            floored[k] = true;
            log::warn!(
                "static model: {} variance {var:e} below floor, using {:e}",
                StatKind::ALL[k].name(),
                opts.variance_floor
            );
        }
        Component {
            mean,
            variance: var.max(opts.variance_floor),
        }
    });
    let weights = opts.weights.map(|w| w / wsum);
    Ok(FitReport {
        model: StaticStatModel {
            components,
            weights,
        },
        floored,
    })
}

impl StaticStatModel {
    /// Peak-normalized density of component `kind` at `x`: `exp(-(x-mu)^2 / (2 var))`.
    pub fn component_density(&self, x: f64, kind: StatKind) -> f64 {
        let c = &self.components[kind as usize];
        let d = (-(x - c.mean).powi(2) / (2.0 * c.variance)).exp();
        // Stay strictly positive far in the tails.
        d.max(f64::MIN_POSITIVE)
    }

    /// Weighted static score in (0, 1].
    pub fn static_probability(&self, stats: &MotionStats) -> f64 {
        let v = stats.values();
        StatKind::ALL
            .iter()
            .map(|&k| self.weights[k as usize] * self.component_density(v[k as usize], k))
            .sum::<f64>()
            .clamp(f64::MIN_POSITIVE, 1.0)
    }

    pub fn unary_potential(&self, stats: &MotionStats) -> [f64; 2] {
        unary_from_probability(self.static_probability(stats))
    }
}

/// `[-ln P, -ln(1 - P + eps)]` for labels static and dynamic.
pub fn unary_from_probability(p_static: f64) -> [f64; 2] {
    [
        (-p_static.ln()).max(0.0),
        (-(1.0 - p_static + UNARY_EPSILON).ln()).max(0.0),
    ]
}

/// Plain-text key/value rendering used in run reports.
impl fmt::Display for StaticStatModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for k in StatKind::ALL {
            let c = &self.components[k as usize];
            writeln!(f, "model.{}.mean = {:.9}", k.name(), c.mean)?;
            writeln!(f, "model.{}.variance = {:.9}", k.name(), c.variance)?;
            writeln!(f, "model.{}.weight = {:.9}", k.name(), self.weights[k as usize])?;
        }
        Ok(())
    }
}
