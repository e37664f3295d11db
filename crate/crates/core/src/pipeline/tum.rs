//! TUM RGB-D sequence layout: image lists, trajectories and the extra
//! files written by the simulator (tracks, camera, labels, clean renders).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Vector2;
use thiserror::Error;

use crate::camera::{Camera, CameraPose};
use crate::gaussian_map::{FeatureId, FrameObservations, Label, Observation};
use crate::raster::{GrayImage, RasterError, RgbImage};
use crate::sim::{Simulation, DEPTH_SCALE};

/// Largest timestamp gap accepted when pairing entries of two lists.
pub const MAX_TIME_DIFF: f64 = 0.02;

#[derive(Debug, Error)]
pub enum SequenceError {
    #[error("missing {0}")]
    Missing(PathBuf),
    #[error("{file}:{line}: {msg}")]
    Parse { file: PathBuf, line: usize, msg: String },
    #[error("{path}: {source}")]
    Image { path: PathBuf, source: RasterError },
    #[error("{0}")]
    Invalid(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Timestamped camera poses, strictly increasing in time.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub poses: Vec<CameraPose>,
}

impl Trajectory {
    pub fn new(poses: Vec<CameraPose>) -> Result<Self, SequenceError> {
        if let Some(w) = poses.windows(2).find(|w| !(w[1].timestamp > w[0].timestamp)) {
            return Err(SequenceError::Invalid(format!(
                "trajectory timestamps not increasing at {}",
                w[1].timestamp
            )));
        }
        Ok(Self { poses })
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }
}

/// Data lines of a TUM text file as `(line number, fields)`, skipping
/// blanks and `#` comments.
fn data_lines(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines().enumerate().filter_map(|(i, l)| {
        let l = l.trim();
        (!l.is_empty() && !l.starts_with('#')).then(|| (i + 1, l.split_whitespace().collect()))
    })
}

fn read(path: &Path) -> Result<String, SequenceError> {
    if !path.exists() {
        return Err(SequenceError::Missing(path.to_path_buf()));
    }
    Ok(fs::read_to_string(path)?)
}

fn num<T: std::str::FromStr>(file: &Path, line: usize, s: &str) -> Result<T, SequenceError> {
    s.parse().map_err(|_| SequenceError::Parse {
        file: file.to_path_buf(),
        line,
        msg: format!("cannot parse {s:?}"),
    })
}

fn need_fields(file: &Path, line: usize, f: &[&str], n: usize) -> Result<(), SequenceError> {
    if f.len() < n {
        return Err(SequenceError::Parse {
            file: file.to_path_buf(),
            line,
            msg: format!("expected {n} fields, got {}", f.len()),
        });
    }
    Ok(())
}

pub fn parse_trajectory(text: &str, file: &Path) -> Result<Trajectory, SequenceError> {
    let mut poses = Vec::new();
    for (line, f) in data_lines(text) {
        need_fields(file, line, &f, 8)?;
        let ts: f64 = num(file, line, f[0])?;
        let mut v = [0.0; 7];
        for k in 0..7 {
            v[k] = num(file, line, f[k + 1])?;
        }
        poses.push(CameraPose::from_tum(ts, &v));
    }
    Trajectory::new(poses)
}

pub fn read_trajectory(path: &Path) -> Result<Trajectory, SequenceError> {
    parse_trajectory(&read(path)?, path)
}

pub fn format_trajectory(traj: &Trajectory) -> String {
    let mut s = String::new();
    for p in &traj.poses {
        let v = p.to_tum();
        let _ = writeln!(
            s,
            "{:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6}",
            p.timestamp, v[0], v[1], v[2], v[3], v[4], v[5], v[6]
        );
    }
    s
}

/// TUM format, six decimals. An empty trajectory writes an empty file.
pub fn write_trajectory(traj: &Trajectory, path: &Path) -> Result<(), SequenceError> {
    fs::write(path, format_trajectory(traj))?;
    Ok(())
}

/// Pair each entry of `a` with the nearest-in-time entry of `b` within
/// `max_dt`. Each `b` entry is used at most once; returns index pairs.
pub fn associate(a: &[f64], b: &[f64], max_dt: f64) -> Vec<(usize, usize)> {
    let mut used = vec![false; b.len()];
    let mut out = Vec::new();
    for (i, &ta) in a.iter().enumerate() {
        let best = b
            .iter()
            .enumerate()
            .filter(|(j, _)| !used[*j])
            .map(|(j, &tb)| (j, (tb - ta).abs()))
            .filter(|(_, d)| *d <= max_dt)
            .min_by(|x, y| x.1.total_cmp(&y.1));
        if let Some((j, _)) = best {
            used[j] = true;
            out.push((i, j));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceFrame {
    pub timestamp: f64,
    pub rgb: RgbImage,
    /// Meters; 0 where unknown.
    pub depth: GrayImage,
    pub gray: GrayImage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub camera: Camera,
    pub frames: Vec<SequenceFrame>,
    /// One entry per frame, `frame_id` equal to the frame index.
    pub tracks: Vec<FrameObservations>,
    pub ground_truth: Option<Trajectory>,
    /// True label per feature id.
    pub labels: Option<BTreeMap<FeatureId, Label>>,
    /// Static-only renders per frame.
    pub clean: Option<Vec<RgbImage>>,
}

impl Sequence {
    /// In-memory equivalent of writing the simulation and loading it back,
    /// without the 8- and 16-bit quantization.
    pub fn from_simulation(sim: &Simulation) -> Self {
        let frames = sim
            .frames
            .iter()
            .map(|f| SequenceFrame {
                timestamp: f.timestamp,
                rgb: f.rgb.clone(),
                depth: f.depth.clone(),
                gray: f.gray.clone(),
            })
            .collect();
        let labels = sim
            .scene
            .splats
            .iter()
            .zip(&sim.scene.labels)
            .map(|(s, l)| (FeatureId(s.id), *l))
            .collect();
        Self {
            camera: sim.spec.camera(),
            frames,
            tracks: sim.tracks.clone(),
            ground_truth: Some(Trajectory {
                poses: sim.poses.clone(),
            }),
            labels: Some(labels),
            clean: Some(sim.frames.iter().map(|f| f.clean.clone()).collect()),
        }
    }

    /// Ground-truth pose associated with each frame, where available.
    pub fn ground_truth_for_frames(&self) -> Vec<Option<CameraPose>> {
        let mut out = vec![None; self.frames.len()];
        if let Some(gt) = &self.ground_truth {
            let a: Vec<f64> = self.frames.iter().map(|f| f.timestamp).collect();
            let b: Vec<f64> = gt.poses.iter().map(|p| p.timestamp).collect();
            for (i, j) in associate(&a, &b, MAX_TIME_DIFF) {
                out[i] = Some(gt.poses[j]);
            }
        }
        out
    }
}

fn image_list(path: &Path) -> Result<Vec<(f64, String)>, SequenceError> {
    let text = read(path)?;
    data_lines(&text)
        .map(|(line, f)| {
            need_fields(path, line, &f, 2)?;
            Ok((num(path, line, f[0])?, f[1].to_string()))
        })
        .collect()
}

fn load_rgb(path: &Path) -> Result<RgbImage, SequenceError> {
    RgbImage::load(path).map_err(|source| SequenceError::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn parse_camera(path: &Path) -> Result<Camera, SequenceError> {
    let text = read(path)?;
    let (line, f) = data_lines(&text)
        .next()
        .ok_or_else(|| SequenceError::Invalid(format!("{} has no data line", path.display())))?;
    need_fields(path, line, &f, 6)?;
    Camera::new(
        num(path, line, f[0])?,
        num(path, line, f[1])?,
        num(path, line, f[2])?,
        num(path, line, f[3])?,
        num(path, line, f[4])?,
        num(path, line, f[5])?,
    )
    .map_err(|e| SequenceError::Parse {
        file: path.to_path_buf(),
        line,
        msg: e.to_string(),
    })
}

fn parse_labels(path: &Path) -> Result<BTreeMap<FeatureId, Label>, SequenceError> {
    let text = read(path)?;
    data_lines(&text)
        .map(|(line, f)| {
            need_fields(path, line, &f, 2)?;
            let id: u64 = num(path, line, f[0])?;
            let l: u8 = num(path, line, f[1])?;
            let label = Label::from_u8(l).ok_or_else(|| SequenceError::Parse {
                file: path.to_path_buf(),
                line,
                msg: format!("label must be 0 or 1, got {l}"),
            })?;
            Ok((FeatureId(id), label))
        })
        .collect()
}

fn parse_tracks(path: &Path, stamps: &[f64]) -> Result<Vec<FrameObservations>, SequenceError> {
    let text = read(path)?;
    let mut out: Vec<FrameObservations> = stamps
        .iter()
        .enumerate()
        .map(|(i, &t)| FrameObservations {
            frame_id: i as u64,
            timestamp: t,
            items: Vec::new(),
        })
        .collect();
    let mut last: Option<(f64, Option<usize>)> = None;
    for (line, f) in data_lines(&text) {
        need_fields(path, line, &f, 5)?;
        let ts: f64 = num(path, line, f[0])?;
        let frame = match last {
            Some((t, idx)) if t == ts => idx,
            _ => {
                let idx = stamps
                    .iter()
                    .enumerate()
                    .map(|(i, &s)| (i, (s - ts).abs()))
                    .filter(|(_, d)| *d <= MAX_TIME_DIFF)
                    .min_by(|x, y| x.1.total_cmp(&y.1))
                    .map(|(i, _)| i);
                last = Some((ts, idx));
                idx
            }
        };
        let Some(frame) = frame else { continue };
        let depth: f64 = num(path, line, f[4])?;
        out[frame].items.push(Observation {
            feature: FeatureId(num(path, line, f[1])?),
            pixel: Vector2::new(num(path, line, f[2])?, num(path, line, f[3])?),
            depth,
            valid: depth > 0.0,
        });
    }
    Ok(out)
}

/// Load a sequence directory. RGB and depth are paired by nearest timestamp
/// within 20 ms; depth is divided by 5000. Feature tracks and intrinsics are
/// required; ground truth, labels and clean renders are read when present.
pub fn load_tum_sequence(dir: &Path) -> Result<Sequence, SequenceError> {
    let rgb = image_list(&dir.join("rgb.txt"))?;
    let depth = image_list(&dir.join("depth.txt"))?;
    let ta: Vec<f64> = rgb.iter().map(|r| r.0).collect();
    let tb: Vec<f64> = depth.iter().map(|d| d.0).collect();
    let pairs = associate(&ta, &tb, MAX_TIME_DIFF);
    if pairs.is_empty() {
        return Err(SequenceError::Invalid("no rgb/depth pairs within 20 ms".into()));
    }
    let mut frames = Vec::with_capacity(pairs.len());
    for &(i, j) in &pairs {
        let rgb_img = load_rgb(&dir.join(&rgb[i].1))?;
        let dpath = dir.join(&depth[j].1);
        let depth_img = GrayImage::load_u16_png(&dpath, DEPTH_SCALE).map_err(|source| SequenceError::Image {
            path: dpath.clone(),
            source,
        })?;
        if depth_img.width != rgb_img.width || depth_img.height != rgb_img.height {
            return Err(SequenceError::Invalid(format!(
                "{} size differs from its rgb image",
                dpath.display()
            )));
        }
        frames.push(SequenceFrame {
            timestamp: rgb[i].0,
            gray: rgb_img.to_gray(),
            rgb: rgb_img,
            depth: depth_img,
        });
    }
    let camera = parse_camera(&dir.join("camera.txt"))?;
    if camera.width != frames[0].rgb.width || camera.height != frames[0].rgb.height {
        return Err(SequenceError::Invalid("camera.txt size differs from the images".into()));
    }
    let stamps: Vec<f64> = frames.iter().map(|f| f.timestamp).collect();
    let tracks = parse_tracks(&dir.join("tracks.txt"), &stamps)?;

    let gt_path = dir.join("groundtruth.txt");
    let ground_truth = gt_path.exists().then(|| read_trajectory(&gt_path)).transpose()?;
    let labels_path = dir.join("labels.txt");
    let labels = labels_path.exists().then(|| parse_labels(&labels_path)).transpose()?;
    let clean_path = dir.join("clean.txt");
    let clean = if clean_path.exists() {
        let list = image_list(&clean_path)?;
        let tc: Vec<f64> = list.iter().map(|c| c.0).collect();
        let assoc = associate(&stamps, &tc, MAX_TIME_DIFF);
        if assoc.len() == frames.len() {
            Some(
                assoc
                    .iter()
                    .map(|&(_, j)| load_rgb(&dir.join(&list[j].1)))
                    .collect::<Result<Vec<_>, _>>()?,
            )
        } else {
            log::warn!("clean.txt does not cover every frame; skipping render metrics");
            None
        }
    } else {
        None
    };
    Ok(Sequence {
        camera,
        frames,
        tracks,
        ground_truth,
        labels,
        clean,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{UnitQuaternion, Vector3};

    #[test]
    fn trajectory_text_round_trip() {
        let poses: Vec<CameraPose> = (0..5)
            .map(|i| {
                let f = i as f64;
                CameraPose::new(
                    UnitQuaternion::from_euler_angles(0.1 * f, -0.2, 0.3 * f),
                    Vector3::new(f, -0.5 * f, 2.0),
                    1.5 + 0.1 * f,
                )
            })
            .collect();
        let t = Trajectory::new(poses).unwrap();
        let back = parse_trajectory(&format_trajectory(&t), Path::new("t")).unwrap();
        for (a, b) in t.poses.iter().zip(&back.poses) {
            assert!((a.timestamp - b.timestamp).abs() < 1e-6);
            assert!((a.center() - b.center()).norm() < 1e-5);
            assert!(a.rotation.angle_to(&b.rotation) < 1e-5);
        }
    }

    #[test]
    fn empty_trajectory_is_empty_text() {
        assert_eq!(format_trajectory(&Trajectory::default()), "");
    }

    #[test]
    fn comments_skipped_and_bad_lines_located() {
        let ok = "# header\n\n1.0 0 0 0 0 0 0 1\n";
        assert_eq!(parse_trajectory(ok, Path::new("g")).unwrap().len(), 1);
        let bad = "# header\n1.0 0 0 0 0 0 0 1\nabc\n";
        match parse_trajectory(bad, Path::new("g")) {
            Err(SequenceError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_increasing_timestamps_rejected() {
        let p = CameraPose::identity();
        assert!(Trajectory::new(vec![p, p]).is_err());
    }

    #[test]
    fn association_nearest_within_window() {
        let a = [0.0, 0.1, 0.2];
        let b = [0.005, 0.13, 0.199];
        assert_eq!(associate(&a, &b, 0.02), vec![(0, 0), (2, 2)]);
    }
}
