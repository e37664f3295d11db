//! Run configuration: flat `section.key = value` text.
//!
//! Keys may be written fully qualified or under a `[section]` header. Every
//! tunable has a default, so an empty file is a valid configuration.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use thiserror::Error;

use crate::flow::LkParams;
use crate::pose::SolverOptions;
use crate::splat::{LearningRates, LossWeights, OptimConfig, PruneThresholds, RenderOptions};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("config key {key}: {msg}")]
    Value { key: String, msg: String },
    #[error("unknown config key {0}")]
    Unknown(String),
    #[error("reading config: {0}")]
    Io(#[from] std::io::Error),
}

/// Per-cue kernel bandwidths; `None` means "standard deviation over the map".
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Bandwidths {
    pub reproj: Option<f64>,
    pub obs_count: Option<f64>,
    pub position: Option<f64>,
    pub pixel: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub bootstrap_frames: usize,
    /// Observations a Gaussian needs before it joins the CRF or the model fit.
    pub min_observations: u32,
    /// Keyframes between refits of the static cue model; 0 disables refits.
    pub refit_interval: usize,
    pub variance_floor: f64,
    /// Largest accepted jump from the last accepted observation, pixels.
    pub max_jump: f64,
    pub keyframe_stride: usize,

    pub crf_enabled: bool,
    pub crf_iterations: usize,
    pub crf_weights: [f64; 2],
    /// Divide pairwise weights by `N - 1`.
    pub crf_normalize: bool,
    pub bandwidths: Bandwidths,
    pub retention_window: usize,
    pub retention_threshold: f64,

    pub flow_enabled: bool,
    pub lk: LkParams,
    pub chi2_threshold: f64,
    pub flow_max_points: usize,
    pub covariance_floor: f64,

    pub solver: SolverOptions,

    pub penalty_enabled: bool,
    pub mapping_enabled: bool,
    pub optim: OptimConfig,
    /// Most recent keyframes used per mapping step.
    pub mapping_keyframes: usize,
    pub prune: PruneThresholds,

    pub threaded: bool,
    pub sh_degree: usize,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            bootstrap_frames: 10,
            min_observations: 3,
            refit_interval: 5,
            variance_floor: crate::motion_stats::DEFAULT_VARIANCE_FLOOR,
            max_jump: 12.0,
            keyframe_stride: 1,
            crf_enabled: true,
            crf_iterations: 5,
            crf_weights: [1.0, 1.0],
            crf_normalize: true,
            bandwidths: Bandwidths::default(),
            retention_window: 10,
            retention_threshold: 0.9,
            flow_enabled: true,
            lk: LkParams::default(),
            chi2_threshold: crate::flow::CHI2_95_2DOF,
            flow_max_points: 200,
            covariance_floor: crate::flow::DEFAULT_COVARIANCE_FLOOR,
            solver: SolverOptions::default(),
            penalty_enabled: true,
            mapping_enabled: true,
            // Positions stay where the feature tracks put them; photometric
            // refinement of a sparse map would move the tracking landmarks.
            optim: OptimConfig {
                iterations: vec![3, 3, 4],
                lr: LearningRates {
                    position: 0.0,
                    ..LearningRates::default()
                },
                ..OptimConfig::default()
            },
            mapping_keyframes: 3,
            prune: PruneThresholds::default(),
            threaded: false,
            sh_degree: 0,
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool, ConfigError> {
    match v {
        "true" | "on" | "1" | "yes" => Ok(true),
        "false" | "off" | "0" | "no" => Ok(false),
        _ => Err(ConfigError::Value {
            key: key.into(),
            msg: format!("expected a boolean, got {v:?}"),
        }),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, ConfigError> {
    v.parse().map_err(|_| ConfigError::Value {
        key: key.into(),
        msg: format!("cannot parse {v:?}"),
    })
}

fn parse_auto(key: &str, v: &str) -> Result<Option<f64>, ConfigError> {
    if v == "auto" {
        return Ok(None);
    }
    let x: f64 = parse_num(key, v)?;
    if !(x > 0.0) {
        return Err(ConfigError::Value {
            key: key.into(),
            msg: "bandwidth must be positive".into(),
        });
    }
    Ok(Some(x))
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Raw `section.key -> value` pairs in file order of last assignment.
    pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>, ConfigError> {
        let mut out = BTreeMap::new();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let l = raw.split('#').next().unwrap_or("").trim();
            if l.is_empty() {
                continue;
            }
            if let Some(rest) = l.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| ConfigError::Syntax {
                    line,
                    msg: format!("unterminated section header {l:?}"),
                })?;
                section = name.trim().to_string();
                continue;
            }
            let (k, v) = l.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line,
                msg: format!("expected key = value, got {l:?}"),
            })?;
            let k = k.trim();
            let key = if section.is_empty() || k.contains('.') {
                k.to_string()
            } else {
                format!("{section}.{k}")
            };
            out.insert(key, v.trim().to_string());
        }
        Ok(out)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut c = Config::default();
        for (k, v) in Self::parse_pairs(text)? {
            c.set(&k, &v)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<(), ConfigError> {
        let k = key;
        match k {
            "bootstrap.frames" => self.bootstrap_frames = parse_num(k, v)?,
            "bootstrap.min_observations" => self.min_observations = parse_num(k, v)?,
            "bootstrap.refit_interval" => self.refit_interval = parse_num(k, v)?,
            "bootstrap.variance_floor" => self.variance_floor = parse_num(k, v)?,
            "frontend.max_jump" => self.max_jump = parse_num(k, v)?,
            "frontend.keyframe_stride" => self.keyframe_stride = parse_num(k, v)?,
            "crf.enabled" => self.crf_enabled = parse_bool(k, v)?,
            "crf.iterations" => self.crf_iterations = parse_num(k, v)?,
            "crf.w_appearance" => self.crf_weights[0] = parse_num(k, v)?,
            "crf.w_position" => self.crf_weights[1] = parse_num(k, v)?,
            "crf.normalize" => self.crf_normalize = parse_bool(k, v)?,
            "crf.sigma_reproj" => self.bandwidths.reproj = parse_auto(k, v)?,
            "crf.sigma_count" => self.bandwidths.obs_count = parse_auto(k, v)?,
            "crf.sigma_position" => self.bandwidths.position = parse_auto(k, v)?,
            "crf.sigma_pixel" => self.bandwidths.pixel = parse_auto(k, v)?,
            "retention.window" => self.retention_window = parse_num(k, v)?,
            "retention.threshold" => self.retention_threshold = parse_num(k, v)?,
            "flow.enabled" => self.flow_enabled = parse_bool(k, v)?,
            "flow.window" => self.lk.window = parse_num(k, v)?,
            "flow.levels" => self.lk.levels = parse_num(k, v)?,
            "flow.iterations" => self.lk.max_iterations = parse_num(k, v)?,
            "flow.epsilon" => self.lk.epsilon = parse_num(k, v)?,
            "flow.min_eigenvalue" => self.lk.min_eigenvalue = parse_num(k, v)?,
            "flow.chi2_threshold" => self.chi2_threshold = parse_num(k, v)?,
            "flow.max_points" => self.flow_max_points = parse_num(k, v)?,
            "flow.covariance_floor" => self.covariance_floor = parse_num(k, v)?,
            "pose.huber_delta" => {
                self.solver.huber_delta = if v == "off" {
                    None
                } else {
                    Some(parse_num(k, v)?)
                }
            }
            "pose.damping" => self.solver.initial_damping = parse_num(k, v)?,
            "pose.damping_factor" => self.solver.damping_factor = parse_num(k, v)?,
            "pose.max_iterations" => self.solver.max_iterations = parse_num(k, v)?,
            "pose.update_tolerance" => self.solver.update_tolerance = parse_num(k, v)?,
            "pose.cost_tolerance" => self.solver.cost_tolerance = parse_num(k, v)?,
            "pose.inlier_gate" => self.solver.inlier_gate = parse_num(k, v)?,
            "render.penalty" => self.penalty_enabled = parse_bool(k, v)?,
            "render.mapping" => self.mapping_enabled = parse_bool(k, v)?,
            "render.levels" => self.optim.levels = parse_num(k, v)?,
            "render.iterations" => {
                self.optim.iterations = v
                    .split(',')
                    .map(|t| parse_num(k, t.trim()))
                    .collect::<Result<_, _>>()?
            }
            "render.lambda_pssim" => self.optim.weights.photometric = parse_num(k, v)?,
            "render.lambda_dyn" => self.optim.weights.dynamic = parse_num(k, v)?,
            "render.lambda" => self.optim.weights.ssim = parse_num(k, v)?,
            "render.lr_color" => self.optim.lr.color = parse_num(k, v)?,
            "render.lr_opacity" => self.optim.lr.opacity = parse_num(k, v)?,
            "render.lr_position" => self.optim.lr.position = parse_num(k, v)?,
            "render.lr_scale" => self.optim.lr.scale = parse_num(k, v)?,
            "render.lr_rotation" => self.optim.lr.rotation = parse_num(k, v)?,
            "render.lr_sh" => self.optim.lr.sh = parse_num(k, v)?,
            "render.alpha_threshold" => self.optim.render.alpha_threshold = parse_num(k, v)?,
            "render.min_transmittance" => self.optim.render.min_transmittance = parse_num(k, v)?,
            "render.divergence_factor" => self.optim.divergence_factor = parse_num(k, v)?,
            "render.keyframes" => self.mapping_keyframes = parse_num(k, v)?,
            "render.sh_degree" => self.sh_degree = parse_num(k, v)?,
            "prune.min_opacity" => self.prune.min_opacity = parse_num(k, v)?,
            "prune.max_scale_fraction" => self.prune.max_scale_fraction = parse_num(k, v)?,
            "run.threaded" => self.threaded = parse_bool(k, v)?,
            _ => return Err(ConfigError::Unknown(k.to_string())),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |key: &str, msg: &str| {
            Err(ConfigError::Value {
                key: key.into(),
                msg: msg.into(),
            })
        };
        if self.bootstrap_frames == 0 {
            return bad("bootstrap.frames", "must be at least 1");
        }
        if self.keyframe_stride == 0 {
            return bad("frontend.keyframe_stride", "must be at least 1");
        }
        if self.crf_iterations == 0 {
            return bad("crf.iterations", "must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.retention_threshold) {
            return bad("retention.threshold", "must be in [0, 1]");
        }
        if self.lk.window % 2 == 0 || self.lk.window < 3 {
            return bad("flow.window", "must be odd and at least 3");
        }
        if self.solver.huber_delta.is_some_and(|d| !(d > 0.0)) {
            return bad("pose.huber_delta", "must be positive");
        }
        if !(0.0..=1.0).contains(&self.optim.weights.ssim) {
            return bad("render.lambda", "must be in [0, 1]");
        }
        if self.optim.levels == 0 {
            return bad("render.levels", "must be at least 1");
        }
        if self.sh_degree > 1 {
            return bad("render.sh_degree", "only degrees 0 and 1 are supported");
        }
        Ok(())
    }

    /// Apply the named ablation: `crf`, `flow`, `penalty` or `mapping`.
    pub fn disable(&mut self, stage: &str) -> Result<(), ConfigError> {
        match stage {
            "crf" => self.crf_enabled = false,
            "flow" => self.flow_enabled = false,
            "penalty" => self.penalty_enabled = false,
            "mapping" => self.mapping_enabled = false,
            _ => return Err(ConfigError::Unknown(format!("ablation {stage}"))),
        }
        Ok(())
    }

    /// Configuration with all dynamic handling switched off.
    pub fn baseline(&self) -> Self {
        let mut c = self.clone();
        c.crf_enabled = false;
        c.flow_enabled = false;
        c.penalty_enabled = false;
        c
    }

    pub fn render_options(&self) -> RenderOptions {
        self.optim.render
    }

    pub fn loss_weights(&self) -> LossWeights {
        let mut w = self.optim.weights;
        if !self.penalty_enabled {
            w.dynamic = 0.0;
        }
        w
    }

    pub fn learning_rates(&self) -> LearningRates {
        self.optim.lr
    }
}

fn auto(v: Option<f64>) -> String {
    v.map_or_else(|| "auto".to_string(), |x| x.to_string())
}

/// Echo of every key, parseable back by [`Config::parse`].
impl fmt::Display for Config {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let iters: Vec<String> = self.optim.iterations.iter().map(|i| i.to_string()).collect();
        let pairs: Vec<(&str, String)> = vec![
            ("bootstrap.frames", self.bootstrap_frames.to_string()),
            ("bootstrap.min_observations", self.min_observations.to_string()),
            ("bootstrap.refit_interval", self.refit_interval.to_string()),
            ("bootstrap.variance_floor", self.variance_floor.to_string()),
            ("frontend.max_jump", self.max_jump.to_string()),
            ("frontend.keyframe_stride", self.keyframe_stride.to_string()),
            ("crf.enabled", self.crf_enabled.to_string()),
            ("crf.iterations", self.crf_iterations.to_string()),
            ("crf.w_appearance", self.crf_weights[0].to_string()),
            ("crf.w_position", self.crf_weights[1].to_string()),
            ("crf.normalize", self.crf_normalize.to_string()),
            ("crf.sigma_reproj", auto(self.bandwidths.reproj)),
            ("crf.sigma_count", auto(self.bandwidths.obs_count)),
            ("crf.sigma_position", auto(self.bandwidths.position)),
            ("crf.sigma_pixel", auto(self.bandwidths.pixel)),
            ("retention.window", self.retention_window.to_string()),
            ("retention.threshold", self.retention_threshold.to_string()),
            ("flow.enabled", self.flow_enabled.to_string()),
            ("flow.window", self.lk.window.to_string()),
            ("flow.levels", self.lk.levels.to_string()),
            ("flow.iterations", self.lk.max_iterations.to_string()),
            ("flow.epsilon", self.lk.epsilon.to_string()),
            ("flow.min_eigenvalue", self.lk.min_eigenvalue.to_string()),
            ("flow.chi2_threshold", self.chi2_threshold.to_string()),
            ("flow.max_points", self.flow_max_points.to_string()),
            ("flow.covariance_floor", self.covariance_floor.to_string()),
            (
                "pose.huber_delta",
                self.solver.huber_delta.map_or_else(|| "off".into(), |d| d.to_string()),
            ),
            ("pose.damping", self.solver.initial_damping.to_string()),
            ("pose.damping_factor", self.solver.damping_factor.to_string()),
            ("pose.max_iterations", self.solver.max_iterations.to_string()),
            ("pose.update_tolerance", self.solver.update_tolerance.to_string()),
            ("pose.cost_tolerance", self.solver.cost_tolerance.to_string()),
            ("pose.inlier_gate", self.solver.inlier_gate.to_string()),
            ("render.penalty", self.penalty_enabled.to_string()),
            ("render.mapping", self.mapping_enabled.to_string()),
            ("render.levels", self.optim.levels.to_string()),
            ("render.iterations", iters.join(",")),
            ("render.lambda_pssim", self.optim.weights.photometric.to_string()),
            ("render.lambda_dyn", self.optim.weights.dynamic.to_string()),
            ("render.lambda", self.optim.weights.ssim.to_string()),
            ("render.lr_color", self.optim.lr.color.to_string()),
            ("render.lr_opacity", self.optim.lr.opacity.to_string()),
            ("render.lr_position", self.optim.lr.position.to_string()),
            ("render.lr_scale", self.optim.lr.scale.to_string()),
            ("render.lr_rotation", self.optim.lr.rotation.to_string()),
            ("render.lr_sh", self.optim.lr.sh.to_string()),
            ("render.alpha_threshold", self.optim.render.alpha_threshold.to_string()),
            ("render.min_transmittance", self.optim.render.min_transmittance.to_string()),
            ("render.divergence_factor", self.optim.divergence_factor.to_string()),
            ("render.keyframes", self.mapping_keyframes.to_string()),
            ("render.sh_degree", self.sh_degree.to_string()),
            ("prune.min_opacity", self.prune.min_opacity.to_string()),
            ("prune.max_scale_fraction", self.prune.max_scale_fraction.to_string()),
            ("run.threaded", self.threaded.to_string()),
        ];
        for (k, v) in pairs {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_is_default() {
        assert_eq!(Config::parse("").unwrap(), Config::default());
    }

    #[test]
    fn sections_and_qualified_keys() {
        let c = Config::parse("[crf]\niterations = 7\nflow.enabled = false\n").unwrap();
        assert_eq!(c.crf_iterations, 7);
        assert!(!c.flow_enabled);
    }

    #[test]
    fn echo_round_trips() {
        let mut c = Config::default();
        c.bandwidths.pixel = Some(4.0);
        c.solver.huber_delta = None;
        assert_eq!(Config::parse(&c.to_string()).unwrap(), c);
    }

    #[test]
    fn errors() {
        assert!(matches!(Config::parse("nonsense"), Err(ConfigError::Syntax { line: 1, .. })));
        assert!(matches!(Config::parse("a.b = 1"), Err(ConfigError::Unknown(_))));
        assert!(matches!(Config::parse("crf.iterations = x"), Err(ConfigError::Value { .. })));
        assert!(Config::parse("flow.window = 4").is_err());
    }

    #[test]
    fn baseline_turns_off_dynamic_handling() {
        let b = Config::default().baseline();
        assert!(!b.crf_enabled && !b.flow_enabled && !b.penalty_enabled);
        assert!(b.mapping_enabled);
    }
}
