//! Store of tagged Gaussians with per-Gaussian motion statistics.
//!
//! The map is the single-writer state of the mapping stage. Readers get
//! [`MapView`]s, which are immutable and cheap to clone across threads.

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;

use nalgebra::{Matrix3, UnitQuaternion, Vector2, Vector3};
use thiserror::Error;

use crate::camera::{skew, Camera, CameraPose};
use crate::raster::RgbImage;
use crate::splat::{ShColor, Splat};

/// Identity of a Gaussian in the map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct GaussianId(pub u64);

/// Identity of a front-end feature track.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FeatureId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Label {
    #[default]
    Static = 0,
    Dynamic = 1,
}

impl Label {
    pub fn as_u8(self) -> u8 {
        self as u8
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Label::Static),
            1 => Some(Label::Dynamic),
            _ => None,
        }
    }

    pub fn is_dynamic(self) -> bool {
        self == Label::Dynamic
    }
}

/// Ring of the most recent per-keyframe labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelHistory {
    entries: VecDeque<Label>,
    capacity: usize,
}

impl LabelHistory {
    pub fn new(capacity: usize) -> Self {
        Self {
            entries: VecDeque::with_capacity(capacity),
            capacity: capacity.max(1),
        }
    }

    pub fn push(&mut self, label: Label) {
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(label);
    }

    /// Overwrite the newest entry, or push when empty.
    pub fn set_latest(&mut self, label: Label) {
        match self.entries.back_mut() {
            Some(last) => *last = label,
            None => self.push(label),
        }
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Oldest first.
    pub fn iter(&self) -> impl DoubleEndedIterator<Item = Label> + '_ {
        self.entries.iter().copied()
    }

    pub fn latest(&self) -> Option<Label> {
        self.entries.back().copied()
    }
}

/// Accumulated per-Gaussian motion cues.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MotionStats {
    /// Running mean reprojection error, pixels.
    pub mean_reproj_error: f64,
    /// Sample standard deviation of observed depths, meters.
    pub depth_variation: f64,
    pub observation_count: u32,
    /// Running mean epipolar distance over non-degenerate frame pairs, pixels.
    pub mean_epipolar_distance: f64,
    pub epipolar_samples: u32,
    depth_mean: f64,
    depth_m2: f64,
}

impl MotionStats {
    /// Statistics built directly from the four cue values (used for synthetic
    /// populations and tests; running accumulators are left empty).
    pub fn from_values(reproj: f64, depth_var: f64, count: u32, epipolar: f64) -> Self {
        Self {
            mean_reproj_error: reproj,
            depth_variation: depth_var,
            observation_count: count,
            mean_epipolar_distance: epipolar,
            epipolar_samples: 0,
            depth_mean: 0.0,
            depth_m2: 0.0,
        }
    }

    /// Cue values in the order reprojection, depth, count, epipolar.
    pub fn values(&self) -> [f64; 4] {
        [
            self.mean_reproj_error,
            self.depth_variation,
            self.observation_count as f64,
            self.mean_epipolar_distance,
        ]
    }

    fn push(&mut self, reproj: f64, depth: f64, epipolar: Option<f64>) {
        self.observation_count += 1;
        let n = self.observation_count as f64;
        self.mean_reproj_error += (reproj - self.mean_reproj_error) / n;
        let d = depth - self.depth_mean;
        self.depth_mean += d / n;
        self.depth_m2 += d * (depth - self.depth_mean);
        self.depth_variation = if self.observation_count > 1 {
            (self.depth_m2.max(0.0) / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        if let Some(e) = epipolar {
            self.epipolar_samples += 1;
            self.mean_epipolar_distance +=
                (e - self.mean_epipolar_distance) / self.epipolar_samples as f64;
        }
    }
}

/// Most recent accepted observation of a Gaussian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LastSeen {
    pub frame: u64,
    pub pixel: Vector2<f64>,
    pub pose: CameraPose,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaggedGaussian {
    pub splat: Splat,
    pub label: Label,
    pub label_history: LabelHistory,
    pub stats: MotionStats,
    /// Most recent projected observation, pixels.
    pub last_pixel: Vector2<f64>,
    pub last_seen: Option<LastSeen>,
    pub feature: Option<FeatureId>,
}

impl TaggedGaussian {
    pub fn id(&self) -> GaussianId {
        GaussianId(self.splat.id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub feature: FeatureId,
    pub pixel: Vector2<f64>,
    pub depth: f64,
    pub valid: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FrameObservations {
    pub frame_id: u64,
    pub timestamp: f64,
    pub items: Vec<Observation>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MapError {
    #[error("unknown gaussian {0:?}")]
    UnknownGaussian(GaussianId),
    #[error("gaussian {0:?} projects behind the camera")]
    BehindCamera(GaussianId),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct InsertReport {
    pub created: Vec<GaussianId>,
    /// Observations whose feature already has a Gaussian.
    pub already_linked: usize,
    /// Invalid, non-positive depth, or out-of-bounds observations.
    pub rejected: usize,
}

/// Epipolar point-to-line distance and whether the baseline was degenerate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpipolarDistance {
    pub distance: f64,
    pub degenerate: bool,
}

/// Baselines shorter than this (meters) are treated as pure rotation.
pub const MIN_BASELINE: f64 = 1e-6;

/// `K^-T [t]x R K^-1` for a relative pose mapping previous-camera to current-camera coordinates.
pub fn fundamental_matrix(relative: &CameraPose, camera: &Camera) -> Matrix3<f64> {
    let kinv = camera.k().try_inverse().expect("intrinsics are invertible");
    let e = skew(&relative.translation) * relative.rotation.to_rotation_matrix().matrix();
    kinv.transpose() * e * kinv
}

/// Distance of `pixel_h` from the line `line` in homogeneous form.
pub fn point_line_distance(line: &Vector3<f64>, pixel: &Vector2<f64>) -> f64 {
    let n = (line.x * line.x + line.y * line.y).sqrt();
    if n == 0.0 {
        return 0.0;
    }
    (line.x * pixel.x + line.y * pixel.y + line.z).abs() / n
}

/// Distance of `pixel_cur` from the epipolar line of `pixel_prev`.
///
/// `relative` maps previous-camera coordinates to current-camera coordinates.
/// A baseline below [`MIN_BASELINE`] returns distance 0 with the degeneracy flag set.
pub fn compute_epipolar_distance(
    pixel_prev: &Vector2<f64>,
    pixel_cur: &Vector2<f64>,
    relative: &CameraPose,
    camera: &Camera,
) -> EpipolarDistance {
    if relative.translation.norm() < MIN_BASELINE {
        return EpipolarDistance {
            distance: 0.0,
            degenerate: true,
        };
    }
    let f = fundamental_matrix(relative, camera);
    let line = f * Vector3::new(pixel_prev.x, pixel_prev.y, 1.0);
    EpipolarDistance {
        distance: point_line_distance(&line, pixel_cur),
        degenerate: false,
    }
}

/// Immutable, id-ordered view of (a subset of) the map.
#[derive(Debug, Clone, Default)]
pub struct MapView {
    items: Arc<[TaggedGaussian]>,
}

impl MapView {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, TaggedGaussian> {
        self.items.iter()
    }

    pub fn as_slice(&self) -> &[TaggedGaussian] {
        &self.items
    }

    pub fn get(&self, id: GaussianId) -> Option<&TaggedGaussian> {
        self.items
            .binary_search_by_key(&id, |g| g.id())
            .ok()
            .map(|i| &self.items[i])
    }
}

#[derive(Debug, Clone)]
pub struct GaussianMap {
    gaussians: BTreeMap<GaussianId, TaggedGaussian>,
    links: BTreeMap<FeatureId, GaussianId>,
    next_id: u64,
    history_len: usize,
    initial_opacity: f64,
}

impl GaussianMap {
    /// `history_len` is the label-ring capacity (window `n` plus the current keyframe).
    pub fn new(history_len: usize) -> Self {
        Self {
            gaussians: BTreeMap::new(),
            links: BTreeMap::new(),
            next_id: 0,
            history_len,
            initial_opacity: 0.5,
        }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn get(&self, id: GaussianId) -> Option<&TaggedGaussian> {
        self.gaussians.get(&id)
    }

    pub fn get_mut(&mut self, id: GaussianId) -> Option<&mut TaggedGaussian> {
        self.gaussians.get_mut(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &TaggedGaussian> {
        self.gaussians.values()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut TaggedGaussian> {
        self.gaussians.values_mut()
    }

    pub fn ids(&self) -> Vec<GaussianId> {
        self.gaussians.keys().copied().collect()
    }

    /// Gaussian linked to a feature track. Links survive removal of the
    /// Gaussian, so a deleted track is never re-inserted.
    pub fn linked(&self, feature: FeatureId) -> Option<GaussianId> {
        self.links.get(&feature).copied()
    }

    pub fn is_linked(&self, feature: FeatureId) -> bool {
        self.links.contains_key(&feature)
    }

    /// Insert a Gaussian directly (tests, map loading). Existing ids are replaced.
    pub fn insert(&mut self, g: TaggedGaussian) {
        let id = g.id();
        if let Some(f) = g.feature {
            self.links.insert(f, id);
        }
        self.next_id = self.next_id.max(id.0 + 1);
        self.gaussians.insert(id, g);
    }

    pub fn remove(&mut self, id: GaussianId) -> Option<TaggedGaussian> {
        self.gaussians.remove(&id)
    }

    /// Remove a Gaussian and release its track, so the next observation of
    /// that track seeds a fresh Gaussian.
    pub fn forget(&mut self, id: GaussianId) -> Option<TaggedGaussian> {
        let g = self.gaussians.remove(&id)?;
        if let Some(f) = g.feature {
            if self.links.get(&f) == Some(&id) {
                self.links.remove(&f);
            }
        }
        Some(g)
    }

    /// Create static Gaussians for every valid, not-yet-linked observation.
    ///
    /// New Gaussians sit at the back-projected point with opacity 0.5 and an
    /// isotropic one-pixel footprint (`depth / fx` per axis). Colors come from
    /// `rgb` when given, else mid-gray.
    pub fn insert_from_features(
        &mut self,
        obs: &FrameObservations,
        pose: &CameraPose,
        camera: &Camera,
        rgb: Option<&RgbImage>,
    ) -> InsertReport {
        let mut report = InsertReport::default();
        let cam_to_world = pose.inverse();
        for o in &obs.items {
            if self.links.contains_key(&o.feature) {
                report.already_linked += 1;
                continue;
            }
            if !o.valid || !(o.depth > 0.0) || !camera.contains(&o.pixel) {
                report.rejected += 1;
                continue;
            }
            let position = cam_to_world.transform(&camera.back_project(&o.pixel, o.depth));
            let s = o.depth / camera.fx;
            let color = match rgb {
                Some(img) => img.get(
                    (o.pixel.x.round() as usize).min(img.width - 1),
                    (o.pixel.y.round() as usize).min(img.height - 1),
                ),
                None => [0.5; 3],
            };
            let id = GaussianId(self.next_id);
            self.next_id += 1;
            let splat = Splat {
                id: id.0,
                position,
                rotation: UnitQuaternion::identity(),
                scale: Vector3::repeat(s),
                opacity: self.initial_opacity,
                color: ShColor::rgb(color),
            };
            let reproj = camera
                .project_cam(&pose.transform(&position))
                .map(|p| (p - o.pixel).norm())
                .unwrap_or(0.0);
            let mut stats = MotionStats::default();
            stats.push(reproj, o.depth, None);
            let g = TaggedGaussian {
                splat,
                label: Label::Static,
                label_history: LabelHistory::new(self.history_len),
                stats,
                last_pixel: o.pixel,
                last_seen: Some(LastSeen {
                    frame: obs.frame_id,
                    pixel: o.pixel,
                    pose: *pose,
                }),
                feature: Some(o.feature),
            };
            self.links.insert(o.feature, id);
            self.gaussians.insert(id, g);
            report.created.push(id);
        }
        report
    }

    /// Fold one observation into a Gaussian's running statistics.
    ///
    /// The epipolar cue is measured against the Gaussian's previous accepted
    /// observation; pure-rotation frame pairs add no epipolar sample.
    pub fn accumulate_observation(
        &mut self,
        id: GaussianId,
        frame: u64,
        pixel: &Vector2<f64>,
        depth: f64,
        pose: &CameraPose,
        camera: &Camera,
    ) -> Result<MotionStats, MapError> {
        let g = self
            .gaussians
            .get_mut(&id)
            .ok_or(MapError::UnknownGaussian(id))?;
        let projected = camera
            .project_cam(&pose.transform(&g.splat.position))
            .map_err(|_| MapError::BehindCamera(id))?;
        let reproj = (pixel - projected).norm();
        let epipolar = g.last_seen.as_ref().and_then(|prev| {
            let rel = prev.pose.relative_to(pose);
            let e = compute_epipolar_distance(&prev.pixel, pixel, &rel, camera);
            (!e.degenerate).then_some(e.distance)
        });
        g.stats.push(reproj, depth, epipolar);
        g.last_pixel = *pixel;
        g.last_seen = Some(LastSeen {
            frame,
            pixel: *pixel,
            pose: *pose,
        });
        Ok(g.stats)
    }

    /// Id-ordered immutable view, optionally restricted to one label.
    pub fn snapshot(&self, filter: Option<Label>) -> MapView {
        let items: Vec<TaggedGaussian> = self
            .gaussians
            .values()
            .filter(|g| filter.is_none_or(|l| g.label == l))
            .cloned()
            .collect();
        MapView {
            items: items.into(),
        }
    }

    /// Half-diagonal of the bounding box of the Gaussian centers.
    pub fn extent(&self) -> f64 {
        let splats: Vec<&Splat> = self.gaussians.values().map(|g| &g.splat).collect();
        crate::splat::scene_extent(splats.into_iter())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cam() -> Camera {
        Camera::new(100.0, 100.0, 50.0, 50.0, 200, 101).unwrap()
    }

    fn obs(items: &[(u64, f64, f64, f64)]) -> FrameObservations {
        FrameObservations {
            frame_id: 0,
            timestamp: 0.0,
            items: items
                .iter()
                .map(|&(f, u, v, d)| Observation {
                    feature: FeatureId(f),
                    pixel: Vector2::new(u, v),
                    depth: d,
                    valid: true,
                })
                .collect(),
        }
    }

    #[test]
    fn back_projection_examples() {
        let mut map = GaussianMap::new(11);
        let r = map.insert_from_features(
            &obs(&[(1, 50.0, 50.0, 1.0), (2, 150.0, 50.0, 2.0)]),
            &CameraPose::identity(),
            &cam(),
            None,
        );
        assert_eq!(r.created.len(), 2);
        let a = map.get(r.created[0]).unwrap();
        assert!((a.splat.position - Vector3::new(0.0, 0.0, 1.0)).norm() < 1e-12);
        assert_eq!(a.label, Label::Static);
        assert_eq!(a.splat.opacity, 0.5);
        assert!((a.splat.scale.x - 0.01).abs() < 1e-15);
        let b = map.get(r.created[1]).unwrap();
        assert!((b.splat.position.x - 2.0).abs() < 1e-12);
        assert!((b.splat.position.z - 2.0).abs() < 1e-12);
        assert_eq!(b.stats.observation_count, 1);
    }

    #[test]
    fn linked_features_are_not_reinserted() {
        let mut map = GaussianMap::new(11);
        let first = map.insert_from_features(
            &obs(&[(7, 60.0, 40.0, 1.5)]),
            &CameraPose::identity(),
            &cam(),
            None,
        );
        let again = map.insert_from_features(
            &obs(&[(7, 61.0, 40.0, 1.5), (8, 10.0, 10.0, 1.0)]),
            &CameraPose::identity(),
            &cam(),
            None,
        );
        assert_eq!(first.created.len(), 1);
        assert_eq!(again.created.len(), 1);
        assert_eq!(again.already_linked, 1);
        assert_eq!(map.linked(FeatureId(7)), Some(first.created[0]));
    }

    #[test]
    fn bad_observations_are_counted() {
        let mut map = GaussianMap::new(11);
        let r = map.insert_from_features(
            &obs(&[(1, 50.0, 50.0, 0.0), (2, 500.0, 50.0, 1.0), (3, 5.0, 5.0, -1.0)]),
            &CameraPose::identity(),
            &cam(),
            None,
        );
        assert!(r.created.is_empty());
        assert_eq!(r.rejected, 3);
    }

    #[test]
    fn depth_variation_is_sample_std() {
        let mut map = GaussianMap::new(11);
        let camera = cam();
        let pose = CameraPose::identity();
        let id = map
            .insert_from_features(&obs(&[(1, 50.0, 50.0, 1.0)]), &pose, &camera, None)
            .created[0];
        let px = Vector2::new(50.0, 50.0);
        map.accumulate_observation(id, 1, &px, 2.0, &pose, &camera)
            .unwrap();
        let s = map
            .accumulate_observation(id, 2, &px, 3.0, &pose, &camera)
            .unwrap();
        assert!((s.depth_variation - 1.0).abs() < 1e-12);
        assert_eq!(s.observation_count, 3);
        assert_eq!(s.mean_reproj_error, 0.0);
        // Identity relative pose: degenerate, no epipolar samples.
        assert_eq!(s.epipolar_samples, 0);
    }

    #[test]
    fn constant_depths_have_zero_variation() {
        let mut map = GaussianMap::new(11);
        let camera = cam();
        let pose = CameraPose::identity();
        let id = map
            .insert_from_features(&obs(&[(1, 70.0, 20.0, 1.0)]), &pose, &camera, None)
            .created[0];
        for f in 1..3 {
            map.accumulate_observation(id, f, &Vector2::new(70.0, 20.0), 1.0, &pose, &camera)
                .unwrap();
        }
        assert_eq!(map.get(id).unwrap().stats.depth_variation, 0.0);
    }

    #[test]
    fn unknown_and_behind_camera() {
        let mut map = GaussianMap::new(11);
        let camera = cam();
        let pose = CameraPose::identity();
        assert_eq!(
            map.accumulate_observation(GaussianId(3), 0, &Vector2::zeros(), 1.0, &pose, &camera),
            Err(MapError::UnknownGaussian(GaussianId(3)))
        );
        let id = map
            .insert_from_features(&obs(&[(1, 50.0, 50.0, 1.0)]), &pose, &camera, None)
            .created[0];
        let behind = CameraPose::new(UnitQuaternion::identity(), Vector3::new(0.0, 0.0, -5.0), 0.0);
        assert_eq!(
            map.accumulate_observation(id, 1, &Vector2::zeros(), 1.0, &behind, &camera),
            Err(MapError::BehindCamera(id))
        );
        assert_eq!(map.get(id).unwrap().stats.observation_count, 1);
    }

    #[test]
    fn epipolar_zero_for_static_point_and_offset_for_perpendicular_shift() {
        let camera = cam();
        let prev = CameraPose::identity();
        let cur = CameraPose::new(
            UnitQuaternion::from_euler_angles(0.02, -0.03, 0.01),
            Vector3::new(0.2, 0.05, 0.01),
            0.0,
        );
        let rel = prev.relative_to(&cur);
        let p = Vector3::new(0.3, -0.2, 2.5);
        let a = camera.project_cam(&prev.transform(&p)).unwrap();
        let b = camera.project_cam(&cur.transform(&p)).unwrap();
        let e = compute_epipolar_distance(&a, &b, &rel, &camera);
        assert!(!e.degenerate);
        assert!(e.distance < 1e-9);

        // Move 3 px along the line normal.
        let line = fundamental_matrix(&rel, &camera) * Vector3::new(a.x, a.y, 1.0);
        let n = Vector2::new(line.x, line.y).normalize();
        let shifted = b + 3.0 * n;
        let e = compute_epipolar_distance(&a, &shifted, &rel, &camera);
        assert!((e.distance - 3.0).abs() < 1e-9);
    }

    #[test]
    fn zero_baseline_is_degenerate() {
        let camera = cam();
        let e = compute_epipolar_distance(
            &Vector2::new(10.0, 10.0),
            &Vector2::new(20.0, 10.0),
            &CameraPose::identity(),
            &camera,
        );
        assert_eq!(e.distance, 0.0);
        assert!(e.degenerate);
    }

    #[test]
    fn snapshot_filters() {
        let mut map = GaussianMap::new(11);
        assert!(map.snapshot(None).is_empty());
        let items: Vec<_> = (0..8)
            .map(|i| (i as u64, 10.0 + i as f64 * 5.0, 30.0, 1.0))
            .collect();
        let r = map.insert_from_features(&obs(&items), &CameraPose::identity(), &cam(), None);
        for id in &r.created[5..] {
            map.get_mut(*id).unwrap().label = Label::Dynamic;
        }
        assert_eq!(map.snapshot(Some(Label::Static)).len(), 5);
        assert_eq!(map.snapshot(Some(Label::Dynamic)).len(), 3);
        let all = map.snapshot(None);
        assert_eq!(all.len(), 8);
        assert!(all.iter().zip(all.iter().skip(1)).all(|(a, b)| a.id() < b.id()));
        assert!(all.get(r.created[6]).is_some());
    }

    #[test]
    fn history_ring_is_bounded() {
        let mut h = LabelHistory::new(3);
        for _ in 0..5 {
            h.push(Label::Dynamic);
        }
        h.set_latest(Label::Static);
        assert_eq!(h.len(), 3);
        assert_eq!(h.latest(), Some(Label::Static));
    }
}
