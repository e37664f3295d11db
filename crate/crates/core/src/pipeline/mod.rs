//! Tracking and mapping over a loaded sequence.
//!
//! The tracker solves each frame's pose against the static map; the mapper
//! labels, verifies, prunes and refines the map per keyframe. The two talk
//! only through [`TrackMessage`] and [`MapReply`], so running them on two
//! threads in lockstep gives the same result as calling them in turn.

pub mod config;
pub mod metrics;
pub mod report;
pub mod tum;

pub use config::{Bandwidths, Config, ConfigError};
pub use metrics::{evaluate_ate, psnr, umeyama_se3, AteResult, LabelCounts, MetricError, RigidTransform};
pub use report::{format_map, format_static_model, parse_map, read_map, write_report, MapDump, RunReport, Timing, STAGES};
pub use tum::{
    associate, load_tum_sequence, parse_trajectory, read_trajectory, write_trajectory, Sequence, SequenceError,
    SequenceFrame, Trajectory,
};

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::mpsc;
use std::time::Instant;

use nalgebra::{Vector2, Vector3};
use thiserror::Error;

use crate::camera::CameraPose;
use crate::crf::{apply_retention, mean_field_infer, CrfNode, CrfProblem, KernelBandwidths, NodeFeatures};
use crate::flow::{chi_square, fit_flow_model, lk_flow, stratified_subset, verify_and_recover};
use crate::gaussian_map::{FeatureId, FrameObservations, GaussianId, GaussianMap, Label};
use crate::motion_stats::{fit_static_model, FitError, FitOptions, StaticStatModel};
use crate::pose::{solve_pose, Correspondence};
use crate::splat::{composite, optimize_coarse_to_fine, prune_and_densify, ssim, Keyframe, OptimTrace, Scene};

/// Grid used to spread the static flow samples over the image.
const FLOW_SAMPLE_CELLS: usize = 4;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("bootstrap needs {need} frames, sequence has {got}")]
    TooFewFrames { got: usize, need: usize },
    #[error("bootstrap model fit: {0}")]
    Bootstrap(#[from] FitError),
    #[error("sequence has {frames} frames but {tracks} track lists")]
    TrackCount { frames: usize, tracks: usize },
    #[error("mapping thread stopped unexpectedly")]
    Disconnected,
}

/// World position of every usable static-labeled Gaussian, keyed by
/// feature track.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrackingView {
    pub points: BTreeMap<FeatureId, Vector3<f64>>,
}

impl TrackingView {
    /// A Gaussian is usable once a second observation confirmed it, or while
    /// it was seen in `frame` itself. Gaussians seeded from an outlier stay
    /// unconfirmed and drop out after one frame.
    pub fn from_map(map: &GaussianMap, frame: usize) -> Self {
        Self {
            points: map
                .iter()
                .filter(|g| g.label == Label::Static)
                .filter(|g| {
                    g.stats.observation_count >= 2 || g.last_seen.as_ref().is_some_and(|l| l.frame == frame as u64)
                })
                .filter_map(|g| g.feature.map(|f| (f, g.splat.position)))
                .collect(),
        }
    }

    /// Valid observations of static Gaussians as solver input.
    pub fn correspondences(&self, obs: &FrameObservations) -> Vec<Correspondence> {
        obs.items
            .iter()
            .filter(|o| o.valid)
            .filter_map(|o| self.points.get(&o.feature).map(|p| Correspondence::new(*p, o.pixel)))
            .collect()
    }
}

/// Tracker to mapper: one per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackMessage {
    pub frame: usize,
    pub pose: CameraPose,
    /// False when the solver failed and the previous pose was held.
    pub solved: bool,
    pub correspondences: usize,
}

/// Mapper to tracker: applied before the next frame is tracked.
#[derive(Debug, Clone, PartialEq)]
pub struct MapReply {
    pub pose: CameraPose,
    pub view: TrackingView,
}

pub struct Tracker<'a> {
    seq: &'a Sequence,
    cfg: &'a Config,
    initial: CameraPose,
    pose: CameraPose,
    view: TrackingView,
    pub failures: usize,
    pub timing: Timing,
}

impl<'a> Tracker<'a> {
    pub fn new(seq: &'a Sequence, cfg: &'a Config, initial: CameraPose) -> Self {
        Self {
            seq,
            cfg,
            initial,
            pose: initial,
            view: TrackingView::default(),
            failures: 0,
            timing: Timing::default(),
        }
    }

    /// Pose of `frame` from the previous pose over the static view.
    pub fn track(&mut self, frame: usize) -> TrackMessage {
        let t0 = Instant::now();
        let ts = self.seq.frames[frame].timestamp;
        if frame == 0 {
            let mut pose = self.initial;
            pose.timestamp = ts;
            return TrackMessage {
                frame,
                pose,
                solved: true,
                correspondences: 0,
            };
        }
        let corrs = self.view.correspondences(&self.seq.tracks[frame]);
        let mut pose = self.pose;
        pose.timestamp = ts;
        let solved = match solve_pose(&corrs, &pose, &self.seq.camera, &self.cfg.solver) {
            Ok(s) if s.success => {
                pose = s.pose;
                pose.timestamp = ts;
                true
            }
            Ok(_) => false,
            Err(e) => {
                log::warn!("frame {frame}: {e}");
                false
            }
        };
        if !solved {
            self.failures += 1;
            log::warn!("frame {frame}: tracking failed, holding previous pose");
        }
        self.timing.add("track", t0.elapsed());
        TrackMessage {
            frame,
            pose,
            solved,
            correspondences: corrs.len(),
        }
    }

    pub fn apply(&mut self, reply: MapReply) {
        self.pose = reply.pose;
        self.view = reply.view;
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MapperCounters {
    pub keyframes: usize,
    pub deleted: usize,
    pub recovered: usize,
    pub pruned: usize,
    pub divergences: usize,
    pub gate_rejected: usize,
    pub refits: usize,
    pub reseeded: usize,
}

pub struct Mapper<'a> {
    seq: &'a Sequence,
    cfg: &'a Config,
    pub map: GaussianMap,
    pub model: Option<StaticStatModel>,
    keyframes: VecDeque<Keyframe>,
    prev_frame: Option<usize>,
    /// Every Gaussian ever created and its feature track.
    created: BTreeMap<GaussianId, FeatureId>,
    /// Label held by each removed Gaussian at removal time.
    removed: BTreeMap<GaussianId, Label>,
    /// Last gate-rejected pixel per Gaussian.
    pending: BTreeMap<GaussianId, Vector2<f64>>,
    pub counters: MapperCounters,
    pub trace: OptimTrace,
    pub timing: Timing,
}

impl<'a> Mapper<'a> {
    pub fn new(seq: &'a Sequence, cfg: &'a Config) -> Self {
        Self {
            seq,
            cfg,
            map: GaussianMap::new(cfg.retention_window + 1),
            model: None,
            keyframes: VecDeque::new(),
            prev_frame: None,
            created: BTreeMap::new(),
            removed: BTreeMap::new(),
            pending: BTreeMap::new(),
            counters: MapperCounters::default(),
            trace: OptimTrace::default(),
            timing: Timing::default(),
        }
    }

    pub fn process(&mut self, msg: &TrackMessage) -> Result<MapReply, PipelineError> {
        let b = self.cfg.bootstrap_frames;
        let pose = if msg.frame < b {
            self.bootstrap_step(msg)?;
            msg.pose
        } else if (msg.frame - b) % self.cfg.keyframe_stride == 0 {
            self.map_keyframe(msg)
        } else {
            msg.pose
        };
        Ok(MapReply {
            pose,
            view: TrackingView::from_map(&self.map, msg.frame),
        })
    }

    fn insert(&mut self, frame: usize, pose: &CameraPose) {
        self.insert_observations(&self.seq.tracks[frame], frame, pose);
    }

    fn insert_observations(&mut self, obs: &FrameObservations, frame: usize, pose: &CameraPose) {
        let rep = self
            .map
            .insert_from_features(obs, pose, &self.seq.camera, Some(&self.seq.frames[frame].rgb));
        for id in rep.created {
            if let Some(f) = self.map.get(id).and_then(|g| g.feature) {
                self.created.insert(id, f);
            }
        }
    }

    fn push_keyframe(&mut self, frame: usize, pose: &CameraPose) {
        self.keyframes.push_back(Keyframe {
            pose: *pose,
            image: self.seq.frames[frame].rgb.clone(),
        });
        while self.keyframes.len() > self.cfg.mapping_keyframes.max(1) {
            self.keyframes.pop_front();
        }
    }

    /// Static-assumption step: accumulate, insert, and fit the model on the last frame.
    fn bootstrap_step(&mut self, msg: &TrackMessage) -> Result<(), PipelineError> {
        let t0 = Instant::now();
        if msg.frame > 0 {
            self.accumulate(msg.frame, &msg.pose);
        }
        self.insert(msg.frame, &msg.pose);
        self.push_keyframe(msg.frame, &msg.pose);
        self.prev_frame = Some(msg.frame);
        if msg.frame + 1 == self.cfg.bootstrap_frames {
            let samples = self.eligible_stats(None);
            let fit = fit_static_model(&samples, &self.fit_options())?;
            log::info!(
                "bootstrap: {} Gaussians, model fitted on {} of them",
                self.map.len(),
                samples.len()
            );
            self.model = Some(fit.model);
        }
        self.timing.add("accumulate", t0.elapsed());
        Ok(())
    }

    fn fit_options(&self) -> FitOptions {
        FitOptions {
            variance_floor: self.cfg.variance_floor,
            ..FitOptions::default()
        }
    }

    fn eligible_stats(&self, label: Option<Label>) -> Vec<crate::gaussian_map::MotionStats> {
        self.map
            .iter()
            .filter(|g| g.stats.observation_count >= self.cfg.min_observations)
            .filter(|g| label.is_none_or(|l| g.label == l && g.label_history.iter().all(|h| h == l)))
            .map(|g| g.stats)
            .collect()
    }

    /// Fold this frame's observations into the statistics, skipping
    /// observations more than `max_jump` pixels from the last accepted one.
    /// When two consecutive rejected observations agree with each other, the
    /// Gaussian was seeded from an outlier or its track was re-acquired far
    /// away; it is replaced by a fresh Gaussian seeded from this frame.
    fn accumulate(&mut self, frame: usize, pose: &CameraPose) {
        let seq = self.seq;
        let obs = &seq.tracks[frame];
        let mut reseed = Vec::new();
        for o in obs.items.iter().filter(|o| o.valid && o.depth > 0.0) {
            let Some(id) = self.map.linked(o.feature) else { continue };
            let Some(g) = self.map.get(id) else { continue };
            if let Some(last) = &g.last_seen {
                if (o.pixel - last.pixel).norm() > self.cfg.max_jump {
                    self.counters.gate_rejected += 1;
                    match self.pending.insert(id, o.pixel) {
                        Some(p) if (o.pixel - p).norm() <= self.cfg.max_jump => reseed.push((id, o.clone())),
                        _ => {}
                    }
                    continue;
                }
            }
            self.pending.remove(&id);
            if let Err(e) = self
                .map
                .accumulate_observation(id, frame as u64, &o.pixel, o.depth, pose, &self.seq.camera)
            {
                log::debug!("frame {frame}: {e}");
            }
        }
        if reseed.is_empty() {
            return;
        }
        let mut fresh = FrameObservations {
            frame_id: obs.frame_id,
            timestamp: obs.timestamp,
            items: Vec::with_capacity(reseed.len()),
        };
        for (id, o) in reseed {
            self.pending.remove(&id);
            self.map.forget(id);
            self.created.remove(&id);
            fresh.items.push(o);
        }
        self.counters.reseeded += fresh.items.len();
        self.insert_observations(&fresh, frame, pose);
    }

    fn crf_problem(&self, model: &StaticStatModel) -> CrfProblem {
        let nodes: Vec<CrfNode> = self
            .map
            .iter()
            .filter(|g| g.stats.observation_count >= self.cfg.min_observations)
            .map(|g| CrfNode {
                id: g.id(),
                unary: model.unary_potential(&g.stats),
                features: NodeFeatures {
                    reproj: g.stats.mean_reproj_error,
                    obs_count: g.stats.observation_count as f64,
                    position: g.splat.position,
                    pixel: g.last_pixel,
                },
            })
            .collect();
        let feats: Vec<NodeFeatures> = nodes.iter().map(|n| n.features).collect();
        let auto = KernelBandwidths::from_data(&feats);
        let bw = &self.cfg.bandwidths;
        let bandwidths = KernelBandwidths {
            reproj: bw.reproj.unwrap_or(auto.reproj),
            obs_count: bw.obs_count.unwrap_or(auto.obs_count),
            position: bw.position.unwrap_or(auto.position),
            pixel: bw.pixel.unwrap_or(auto.pixel),
        };
        // Mean over neighbors and over the two kernels, so with unit weights a
        // node's pairwise message is at most one nat.
        let norm = if self.cfg.crf_normalize && nodes.len() > 1 {
            2.0 * (nodes.len() - 1) as f64
        } else {
            1.0
        };
        CrfProblem {
            nodes,
            bandwidths,
            weights: self.cfg.crf_weights.map(|w| w / norm),
        }
    }

    fn label_stage(&mut self) {
        let mut labels: BTreeMap<GaussianId, Label> = BTreeMap::new();
        if self.cfg.crf_enabled {
            if let Some(model) = self.model {
                let problem = self.crf_problem(&model);
                if !problem.is_empty() {
                    let r = mean_field_infer(&problem, self.cfg.crf_iterations);
                    labels = problem.nodes.iter().map(|n| n.id).zip(r.labels).collect();
                }
            }
        }
        for g in self.map.iter_mut() {
            if let Some(l) = labels.get(&g.id()) {
                g.label = *l;
            }
        }
    }

    /// Append this keyframe's label to every history the flow stage did not
    /// already extend.
    fn record_labels(&mut self, recovered: &BTreeSet<GaussianId>) {
        for g in self.map.iter_mut() {
            if !recovered.contains(&g.id()) {
                g.label_history.push(g.label);
            }
        }
    }

    /// Re-test dynamic Gaussians seen in both the previous and this frame
    /// against the flow distribution of static ones.
    fn flow_stage(&mut self, frame: usize) -> BTreeSet<GaussianId> {
        let Some(prev) = self.prev_frame else { return BTreeSet::new() };
        let cur_seen: BTreeSet<FeatureId> = self.seq.tracks[frame]
            .items
            .iter()
            .filter(|o| o.valid)
            .map(|o| o.feature)
            .collect();
        let prev_px: BTreeMap<FeatureId, Vector2<f64>> = self.seq.tracks[prev]
            .items
            .iter()
            .filter(|o| o.valid && cur_seen.contains(&o.feature))
            .map(|o| (o.feature, o.pixel))
            .collect();
        let mut candidates = Vec::new();
        let mut statics = Vec::new();
        for g in self.map.iter() {
            let Some(px) = g.feature.and_then(|f| prev_px.get(&f)) else { continue };
            if g.label.is_dynamic() {
                candidates.push((g.id(), *px));
            } else {
                statics.push((g.id(), *px));
            }
        }
        if candidates.is_empty() {
            return BTreeSet::new();
        }
        // Each grid cell contributes its most confidently static points first.
        if let Some(model) = &self.model {
            let p: BTreeMap<GaussianId, f64> = self
                .map
                .iter()
                .map(|g| (g.id(), model.static_probability(&g.stats)))
                .collect();
            statics.sort_by(|a, b| p[&b.0].total_cmp(&p[&a.0]).then(a.0.cmp(&b.0)));
        }
        let cam = &self.seq.camera;
        let sample = stratified_subset(&statics, cam.width, cam.height, FLOW_SAMPLE_CELLS, self.cfg.flow_max_points);
        let (g0, g1) = (&self.seq.frames[prev].gray, &self.seq.frames[frame].gray);
        let pts: Vec<Vector2<f64>> = sample.iter().map(|s| s.1).collect();
        let flows = match lk_flow(g0, g1, &pts, &self.cfg.lk) {
            Ok(f) => f,
            Err(e) => {
                log::warn!("frame {frame}: flow stage skipped: {e}");
                return BTreeSet::new();
            }
        };
        let valid: Vec<Vector2<f64>> = flows.iter().filter(|f| f.valid).map(|f| f.flow).collect();
        let model = match fit_flow_model(&valid, self.cfg.covariance_floor) {
            Ok(m) => m,
            Err(e) => {
                log::warn!("frame {frame}: flow stage skipped: {e}");
                return BTreeSet::new();
            }
        };
        // Undetected movers in the static sample inflate the spread; refit
        // once on the samples that pass the gate.
        let kept: Vec<Vector2<f64>> = valid
            .iter()
            .copied()
            .filter(|v| chi_square(v, &model) <= self.cfg.chi2_threshold)
            .collect();
        let model = fit_flow_model(&kept, self.cfg.covariance_floor).unwrap_or(model);
        match verify_and_recover(
            &mut self.map,
            &candidates,
            g0,
            g1,
            &model,
            &self.cfg.lk,
            self.cfg.chi2_threshold,
        ) {
            Ok(r) => {
                log::debug!(
                    "frame {frame}: flow recovered {} of {} dynamic candidates",
                    r.recovered.len(),
                    candidates.len()
                );
                self.counters.recovered += r.recovered.len();
                r.recovered.into_iter().collect()
            }
            Err(e) => {
                log::warn!("frame {frame}: flow stage skipped: {e}");
                BTreeSet::new()
            }
        }
    }

    fn optimize_stage(&mut self) {
        let ids = self.map.ids();
        let mut scene = Scene {
            splats: ids.iter().map(|id| self.map.get(*id).unwrap().splat.clone()).collect(),
            dynamic: ids.iter().map(|id| self.map.get(*id).unwrap().label.is_dynamic()).collect(),
        };
        let mut ocfg = self.cfg.optim.clone();
        ocfg.weights = self.cfg.loss_weights();
        let trace = optimize_coarse_to_fine(&mut scene, self.keyframes.make_contiguous(), &self.seq.camera, &ocfg);
        let offset = self.trace.entries.len();
        self.trace.entries.extend(trace.entries.iter().map(|e| crate::splat::TraceEntry {
            iter: e.iter + offset,
            ..*e
        }));
        if trace.diverged {
            self.counters.divergences += 1;
            log::warn!("mapping step diverged; keeping the previous map");
            return;
        }
        for (id, s) in ids.iter().zip(scene.splats) {
            self.map.get_mut(*id).unwrap().splat = s;
        }
    }

    /// Keyframe mapping: accumulate, label, recover, retain, refine pose,
    /// optimize, prune and densify. Returns the refined pose.
    fn map_keyframe(&mut self, msg: &TrackMessage) -> CameraPose {
        let frame = msg.frame;
        let mut pose = msg.pose;
        let mut t = Instant::now();
        let mut lap = |timing: &mut Timing, stage: &str| {
            timing.add(stage, t.elapsed());
            t = Instant::now();
        };

        self.accumulate(frame, &pose);
        let k = self.counters.keyframes;
        if self.cfg.refit_interval > 0 && k > 0 && k % self.cfg.refit_interval == 0 {
            match fit_static_model(&self.eligible_stats(Some(Label::Static)), &self.fit_options()) {
                Ok(fit) => {
                    self.model = Some(fit.model);
                    self.counters.refits += 1;
                }
                Err(e) => log::warn!("frame {frame}: model refit skipped: {e}"),
            }
        }
        lap(&mut self.timing, "accumulate");

        self.label_stage();
        lap(&mut self.timing, "crf");

        let recovered = if self.cfg.flow_enabled {
            self.flow_stage(frame)
        } else {
            BTreeSet::new()
        };
        self.record_labels(&recovered);
        lap(&mut self.timing, "flow");

        let deleted = apply_retention(&mut self.map, self.cfg.retention_window, self.cfg.retention_threshold);
        self.counters.deleted += deleted.len();
        for id in deleted {
            self.removed.insert(id, Label::Dynamic);
        }
        lap(&mut self.timing, "retention");

        let corrs = TrackingView::from_map(&self.map, frame).correspondences(&self.seq.tracks[frame]);
        match solve_pose(&corrs, &pose, &self.seq.camera, &self.cfg.solver) {
            Ok(s) if s.success => {
                pose = CameraPose {
                    timestamp: msg.pose.timestamp,
                    ..s.pose
                }
            }
            Ok(_) => log::debug!("frame {frame}: pose refinement did not converge"),
            Err(e) => log::debug!("frame {frame}: pose refinement skipped: {e}"),
        }
        lap(&mut self.timing, "refine");

        self.push_keyframe(frame, &pose);
        if self.cfg.mapping_enabled {
            self.optimize_stage();
        }
        lap(&mut self.timing, "optimize");

        let rep = prune_and_densify(
            &mut self.map,
            &self.cfg.prune,
            &self.seq.tracks[frame],
            &pose,
            &self.seq.camera,
            Some(&self.seq.frames[frame].rgb),
        );
        self.counters.pruned += rep.pruned.len();
        for id in rep.pruned {
            self.removed.insert(id, Label::Static);
        }
        for id in rep.inserted.created {
            if let Some(f) = self.map.get(id).and_then(|g| g.feature) {
                self.created.insert(id, f);
            }
        }
        lap(&mut self.timing, "prune");

        self.prev_frame = Some(frame);
        self.counters.keyframes += 1;
        log::info!(
            "frame {frame}: {} Gaussians, {} dynamic, {} deleted so far",
            self.map.len(),
            self.map.iter().filter(|g| g.label.is_dynamic()).count(),
            self.counters.deleted
        );
        pose
    }

    /// Labels of every Gaussian ever created against the ground truth.
    /// Retention deletions count as dynamic, pruned Gaussians keep their label.
    pub fn label_counts(&self) -> Option<LabelCounts> {
        let truth = self.seq.labels.as_ref()?;
        let mut c = LabelCounts::default();
        for (id, feature) in &self.created {
            let Some(t) = truth.get(feature) else { continue };
            let predicted = match self.map.get(*id) {
                Some(g) => g.label,
                None => self.removed.get(id).copied().unwrap_or(Label::Static),
            };
            c.add(predicted.is_dynamic(), t.is_dynamic());
        }
        Some(c)
    }
}

/// Everything a run produces.
pub struct RunOutput {
    pub trajectory: Trajectory,
    pub report: RunReport,
    pub timing: Timing,
    pub map: GaussianMap,
    /// Mapping loss over all keyframes, iterations numbered globally.
    pub trace: OptimTrace,
}

fn check_sequence(seq: &Sequence, cfg: &Config) -> Result<(), PipelineError> {
    if seq.frames.len() < cfg.bootstrap_frames {
        return Err(PipelineError::TooFewFrames {
            got: seq.frames.len(),
            need: cfg.bootstrap_frames,
        });
    }
    if seq.tracks.len() != seq.frames.len() {
        return Err(PipelineError::TrackCount {
            frames: seq.frames.len(),
            tracks: seq.tracks.len(),
        });
    }
    Ok(())
}

fn run_sequential<'a>(
    seq: &'a Sequence,
    cfg: &'a Config,
    initial: CameraPose,
) -> Result<(Vec<CameraPose>, Tracker<'a>, Mapper<'a>), PipelineError> {
    let mut tracker = Tracker::new(seq, cfg, initial);
    let mut mapper = Mapper::new(seq, cfg);
    let mut poses = Vec::with_capacity(seq.frames.len());
    for f in 0..seq.frames.len() {
        let msg = tracker.track(f);
        let reply = mapper.process(&msg)?;
        poses.push(reply.pose);
        tracker.apply(reply);
    }
    Ok((poses, tracker, mapper))
}

fn run_threaded<'a>(
    seq: &'a Sequence,
    cfg: &'a Config,
    initial: CameraPose,
) -> Result<(Vec<CameraPose>, Tracker<'a>, Mapper<'a>), PipelineError> {
    std::thread::scope(|s| {
        let (to_mapper, inbox) = mpsc::channel::<TrackMessage>();
        let (to_tracker, replies) = mpsc::channel::<Result<MapReply, PipelineError>>();
        let handle = s.spawn(move || {
            let mut mapper = Mapper::new(seq, cfg);
            for msg in inbox {
                let r = mapper.process(&msg);
                let failed = r.is_err();
                if to_tracker.send(r).is_err() || failed {
                    break;
                }
            }
            mapper
        });
        let mut tracker = Tracker::new(seq, cfg, initial);
        let mut poses = Vec::with_capacity(seq.frames.len());
        for f in 0..seq.frames.len() {
            if to_mapper.send(tracker.track(f)).is_err() {
                return Err(PipelineError::Disconnected);
            }
            match replies.recv() {
                Ok(Ok(reply)) => {
                    poses.push(reply.pose);
                    tracker.apply(reply);
                }
                Ok(Err(e)) => return Err(e),
                Err(_) => return Err(PipelineError::Disconnected),
            }
        }
        drop(to_mapper);
        let mapper = handle.join().map_err(|_| PipelineError::Disconnected)?;
        Ok((poses, tracker, mapper))
    })
}

/// Render the static part of `map` at each pose and compare with the clean
/// frames: mean PSNR and SSIM.
fn render_metrics(seq: &Sequence, cfg: &Config, map: &GaussianMap, poses: &[CameraPose]) -> Option<(f64, f64)> {
    let clean = seq.clean.as_ref()?;
    let statics: Vec<_> = map
        .iter()
        .filter(|g| g.label == Label::Static)
        .map(|g| g.splat.clone())
        .collect();
    let (mut p, mut s) = (0.0, 0.0);
    for (pose, target) in poses.iter().zip(clean) {
        let img = composite(&statics, pose, &seq.camera, &cfg.render_options()).rgb;
        p += psnr(&img, target).ok()?;
        s += ssim(&img, target).ok()?;
    }
    let n = poses.len().max(1) as f64;
    Some((p / n, s / n))
}

/// Run the full pipeline over `seq`. The first pose is taken from ground
/// truth when available, else the identity.
pub fn run(seq: &Sequence, cfg: &Config) -> Result<RunOutput, PipelineError> {
    check_sequence(seq, cfg)?;
    let start = Instant::now();
    let gt = seq.ground_truth_for_frames();
    let initial = gt[0].unwrap_or_else(CameraPose::identity);
    let (poses, tracker, mapper) = if cfg.threaded {
        run_threaded(seq, cfg, initial)?
    } else {
        run_sequential(seq, cfg, initial)?
    };
    let trajectory = Trajectory { poses };
    let ate = seq
        .ground_truth
        .as_ref()
        .and_then(|g| match evaluate_ate(&trajectory, g) {
            Ok(a) => Some(a),
            Err(e) => {
                log::warn!("ATE not computed: {e}");
                None
            }
        });
    let render = render_metrics(seq, cfg, &mapper.map, &trajectory.poses);
    let report = RunReport {
        frames: seq.frames.len(),
        keyframes: mapper.counters.keyframes,
        tracking_failures: tracker.failures,
        ate,
        labels: mapper.label_counts(),
        render_psnr: render.map(|r| r.0),
        render_ssim: render.map(|r| r.1),
        gaussians_created: mapper.created.len(),
        gaussians_final: mapper.map.len(),
        deleted: mapper.counters.deleted,
        recovered: mapper.counters.recovered,
        pruned: mapper.counters.pruned,
        optimizer_divergences: mapper.counters.divergences,
        static_model: mapper.model,
        config: cfg.to_string(),
    };
    let mut timing = tracker.timing.clone();
    timing.merge(&mapper.timing);
    timing.total = start.elapsed().as_secs_f64();
    Ok(RunOutput {
        trajectory,
        report,
        timing,
        map: mapper.map,
        trace: mapper.trace,
    })
}
