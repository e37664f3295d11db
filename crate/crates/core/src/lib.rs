//! Dynamic-scene Gaussian splatting SLAM on the CPU.
//!
//! Tagged Gaussians carry a static/dynamic label and motion statistics. A
//! dense CRF labels them each keyframe, flow verification rescues false
//! positives, tracking solves poses against the static set, and mapping
//! refines the splats coarse-to-fine.

pub mod camera;
pub mod crf;
pub mod flow;
pub mod gaussian_map;
pub mod motion_stats;
pub mod par;
pub mod pipeline;
pub mod pose;
pub mod raster;
pub mod sim;
pub mod splat;
