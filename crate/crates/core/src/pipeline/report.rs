//! Run reports, stage timing and the map dump format.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Duration;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};

use super::metrics::{AteResult, LabelCounts};
use super::tum::SequenceError;
use crate::camera::Camera;
use crate::gaussian_map::{GaussianId, GaussianMap, Label};
use crate::motion_stats::{StatKind, StaticStatModel};
use crate::splat::{ShColor, Splat};

/// Deterministic outcome of a run. Wall-clock timing lives in [`Timing`].
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub frames: usize,
    pub keyframes: usize,
    pub tracking_failures: usize,
    pub ate: Option<AteResult>,
    pub labels: Option<LabelCounts>,
    pub render_psnr: Option<f64>,
    pub render_ssim: Option<f64>,
    pub gaussians_created: usize,
    pub gaussians_final: usize,
    pub deleted: usize,
    pub recovered: usize,
    pub pruned: usize,
    pub optimizer_divergences: usize,
    /// Static statistics model in use at the end of the run.
    pub static_model: Option<StaticStatModel>,
    pub config: String,
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "na".to_string(), |x| format!("{x:.6}"))
}

impl RunReport {
    pub fn precision(&self) -> Option<f64> {
        self.labels.map(|c| c.precision())
    }

    pub fn recall(&self) -> Option<f64> {
        self.labels.map(|c| c.recall())
    }

    /// `(name, value)` for every metric, in report order.
    pub fn fields(&self) -> Vec<(&'static str, String)> {
        let count = |f: fn(&LabelCounts) -> usize| self.labels.as_ref().map_or("na".into(), |c| f(c).to_string());
        vec![
            ("frames", self.frames.to_string()),
            ("keyframes", self.keyframes.to_string()),
            ("tracking_failures", self.tracking_failures.to_string()),
            ("ate_rmse_m", opt(self.ate.map(|a| a.rmse))),
            ("ate_std_m", opt(self.ate.map(|a| a.std))),
            ("ate_pairs", self.ate.map_or("na".into(), |a| a.pairs.to_string())),
            ("dynamic_precision", opt(self.precision())),
            ("dynamic_recall", opt(self.recall())),
            ("true_dynamic", count(|c| c.true_dynamic)),
            ("false_dynamic", count(|c| c.false_dynamic)),
            ("false_static", count(|c| c.false_static)),
            ("true_static", count(|c| c.true_static)),
            ("render_psnr_db", opt(self.render_psnr)),
            ("render_ssim", opt(self.render_ssim)),
            ("gaussians_created", self.gaussians_created.to_string()),
            ("gaussians_final", self.gaussians_final.to_string()),
            ("deleted", self.deleted.to_string()),
            ("recovered", self.recovered.to_string()),
            ("pruned", self.pruned.to_string()),
            ("optimizer_divergences", self.optimizer_divergences.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("run report\n");
        for (k, v) in self.fields() {
            let _ = writeln!(s, "{k}: {v}");
        }
        if let Some(m) = &self.static_model {
            s.push_str("\n[static_model]\n");
            s.push_str(&format_static_model(m));
        }
        s.push_str("\n[config]\n");
        s.push_str(&self.config);
        s
    }

    /// Header row of metric names and one row of values.
    pub fn to_csv(&self) -> String {
        let f = self.fields();
        let keys: Vec<&str> = f.iter().map(|x| x.0).collect();
        let vals: Vec<&str> = f.iter().map(|x| x.1.as_str()).collect();
        format!("{}\n{}\n", keys.join(","), vals.join(","))
    }
}

/// `name.mean`, `name.variance` and `name.weight` lines per statistic.
pub fn format_static_model(m: &StaticStatModel) -> String {
    let mut s = String::new();
    for (k, (c, w)) in StatKind::ALL.iter().zip(m.components.iter().zip(&m.weights)) {
        let n = k.name();
        let _ = writeln!(s, "{n}.mean = {}", c.mean);
        let _ = writeln!(s, "{n}.variance = {}", c.variance);
        let _ = writeln!(s, "{n}.weight = {w}");
    }
    s
}

/// Write `report.txt` and `report.csv` into `dir`.
pub fn write_report(report: &RunReport, dir: &Path) -> Result<(), SequenceError> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("report.txt"), report.to_text())?;
    fs::write(dir.join("report.csv"), report.to_csv())?;
    Ok(())
}

pub const STAGES: [&str; 8] = [
    "track", "accumulate", "crf", "flow", "retention", "refine", "optimize", "prune",
];

/// Accumulated wall-clock time per pipeline stage.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Timing {
    pub seconds: [f64; STAGES.len()],
    pub total: f64,
}

impl Timing {
    pub fn add(&mut self, stage: &str, d: Duration) {
        let i = STAGES.iter().position(|s| *s == stage).expect("known stage");
        self.seconds[i] += d.as_secs_f64();
    }

    pub fn merge(&mut self, o: &Timing) {
        for (a, b) in self.seconds.iter_mut().zip(&o.seconds) {
            *a += b;
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("stage,seconds\n");
        for (k, v) in STAGES.iter().zip(&self.seconds) {
            let _ = writeln!(s, "{k},{v:.6}");
        }
        let _ = writeln!(s, "total,{:.6}", self.total);
        s
    }
}

/// Map dump: a camera header line, then one Gaussian per line as
/// `id label px py pz qw qx qy qz sx sy sz opacity r g b`.
pub fn format_map(map: &GaussianMap, cam: &Camera) -> String {
    let mut s = format!(
        "# camera {} {} {} {} {} {}\n# id label px py pz qw qx qy qz sx sy sz opacity r g b\n",
        cam.fx, cam.fy, cam.cx, cam.cy, cam.width, cam.height
    );
    for g in map.iter() {
        let p = &g.splat;
        let q = p.rotation.quaternion();
        let c = p.color.dc;
        let _ = writeln!(
            s,
            "{} {} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9}",
            g.id().0,
            g.label.as_u8(),
            p.position.x,
            p.position.y,
            p.position.z,
            q.w,
            q.i,
            q.j,
            q.k,
            p.scale.x,
            p.scale.y,
            p.scale.z,
            p.opacity,
            c[0],
            c[1],
            c[2]
        );
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapDump {
    pub camera: Camera,
    pub gaussians: Vec<(GaussianId, Label, Splat)>,
}

pub fn parse_map(text: &str, file: &Path) -> Result<MapDump, SequenceError> {
    let err = |line: usize, msg: String| SequenceError::Parse {
        file: file.to_path_buf(),
        line,
        msg,
    };
    let mut camera = None;
    let mut gaussians = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let l = raw.trim();
        if let Some(rest) = l.strip_prefix("# camera") {
            let v: Vec<f64> = rest
                .split_whitespace()
                .map(|t| t.parse().map_err(|_| err(line, format!("bad camera field {t:?}"))))
                .collect::<Result<_, _>>()?;
            if v.len() != 6 {
                return Err(err(line, "camera line needs 6 fields".into()));
            }
            camera = Some(
                Camera::new(v[0], v[1], v[2], v[3], v[4] as usize, v[5] as usize)
                    .map_err(|e| err(line, e.to_string()))?,
            );
            continue;
        }
        if l.is_empty() || l.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = l.split_whitespace().collect();
        if f.len() != 16 {
            return Err(err(line, format!("expected 16 fields, got {}", f.len())));
        }
        let id: u64 = f[0].parse().map_err(|_| err(line, format!("bad id {:?}", f[0])))?;
        let label = f[1]
            .parse::<u8>()
            .ok()
            .and_then(Label::from_u8)
            .ok_or_else(|| err(line, format!("bad label {:?}", f[1])))?;
        let v: Vec<f64> = f[2..]
            .iter()
            .map(|t| t.parse().map_err(|_| err(line, format!("bad number {t:?}"))))
            .collect::<Result<_, _>>()?;
        let splat = Splat {
            id,
            position: Vector3::new(v[0], v[1], v[2]),
            rotation: UnitQuaternion::from_quaternion(Quaternion::new(v[3], v[4], v[5], v[6])),
            scale: Vector3::new(v[7], v[8], v[9]),
            opacity: v[10],
            color: ShColor::rgb([v[11], v[12], v[13]]),
        };
        gaussians.push((GaussianId(id), label, splat));
    }
    let camera = camera.ok_or_else(|| err(1, "missing '# camera' header".into()))?;
    Ok(MapDump { camera, gaussians })
}

pub fn read_map(path: &Path) -> Result<MapDump, SequenceError> {
    if !path.exists() {
        return Err(SequenceError::Missing(path.to_path_buf()));
    }
    parse_map(&fs::read_to_string(path)?, path)
}
