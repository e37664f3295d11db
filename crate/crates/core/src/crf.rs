//! Fully connected binary CRF over tagged Gaussians.
//!
//! The energy is the sum of per-node unaries and a Potts-gated pairwise term
//! built from an appearance kernel (reprojection error, observation count)
//! and a position kernel (3-D position, last pixel). Inference is dense
//! mean-field with exact pairwise sums, swept node by node so the
//! variational free energy never increases.

use std::io::{self, Write};

use nalgebra::{Vector2, Vector3};

use crate::gaussian_map::{GaussianId, GaussianMap, Label, LabelHistory};
use crate::par;

/// Node count above which kernel rows are recomputed instead of cached.
const DENSE_KERNEL_LIMIT: usize = 4096;
const CONVERGENCE_TOL: f64 = 1e-6;
const BANDWIDTH_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NodeFeatures {
    /// Mean reprojection error.
    pub reproj: f64,
    /// Observation count.
    pub obs_count: f64,
    pub position: Vector3<f64>,
    pub pixel: Vector2<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrfNode {
    pub id: GaussianId,
    /// `[psi(static), psi(dynamic)]`.
    pub unary: [f64; 2],
    pub features: NodeFeatures,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelBandwidths {
    pub reproj: f64,
    pub obs_count: f64,
    pub position: f64,
    pub pixel: f64,
}

impl KernelBandwidths {
    /// Standard deviation of each feature over `features` (RMS distance to
    /// the centroid for the vector features), floored away from zero.
    pub fn from_data(features: &[NodeFeatures]) -> Self {
        let n = features.len().max(1) as f64;
        let std1 = |f: &dyn Fn(&NodeFeatures) -> f64| {
            let m = features.iter().map(f).sum::<f64>() / n;
            (features.iter().map(|x| (f(x) - m).powi(2)).sum::<f64>() / n).sqrt()
        };
        let pc = features.iter().map(|f| f.position).sum::<Vector3<f64>>() / n;
        let xc = features.iter().map(|f| f.pixel).sum::<Vector2<f64>>() / n;
        let pos = (features
            .iter()
            .map(|f| (f.position - pc).norm_squared())
            .sum::<f64>()
            / n)
            .sqrt();
        let pix = (features
            .iter()
            .map(|f| (f.pixel - xc).norm_squared())
            .sum::<f64>()
            / n)
            .sqrt();
        Self {
            reproj: std1(&|f| f.reproj).max(BANDWIDTH_FLOOR),
            obs_count: std1(&|f| f.obs_count).max(BANDWIDTH_FLOOR),
            position: pos.max(BANDWIDTH_FLOOR),
            pixel: pix.max(BANDWIDTH_FLOOR),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrfProblem {
    pub nodes: Vec<CrfNode>,
    pub bandwidths: KernelBandwidths,
    /// `(w_appearance, w_position)`.
    pub weights: [f64; 2],
}

pub fn potts(a: Label, b: Label) -> f64 {
    if a != b {
        1.0
    } else {
        0.0
    }
}

/// `exp(-|da|^2 / (2 s_a^2) - |dg|^2 / (2 s_g^2))`.
pub fn kernel_appearance(fi: &NodeFeatures, fj: &NodeFeatures, s_reproj: f64, s_count: f64) -> f64 {
    let da = fi.reproj - fj.reproj;
    let dg = fi.obs_count - fj.obs_count;
    (-(da * da) / (2.0 * s_reproj * s_reproj) - (dg * dg) / (2.0 * s_count * s_count)).exp()
}

/// `exp(-|dP| / (2 s_P^2) - |dp| / (2 s_p^2))` with unsquared distances.
pub fn kernel_position(fi: &NodeFeatures, fj: &NodeFeatures, s_pos: f64, s_pix: f64) -> f64 {
    let dp = (fi.position - fj.position).norm();
    let dx = (fi.pixel - fj.pixel).norm();
    (-dp / (2.0 * s_pos * s_pos) - dx / (2.0 * s_pix * s_pix)).exp()
}

impl CrfProblem {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// `w1 k_appearance + w2 k_position` for nodes `i`, `j`.
    pub fn pair_weight(&self, i: usize, j: usize) -> f64 {
        let (a, b) = (&self.nodes[i].features, &self.nodes[j].features);
        let bw = &self.bandwidths;
        self.weights[0] * kernel_appearance(a, b, bw.reproj, bw.obs_count)
            + self.weights[1] * kernel_position(a, b, bw.position, bw.pixel)
    }

    pub fn pairwise_potential(&self, i: usize, j: usize, labels: &[Label]) -> f64 {
        let gate = potts(labels[i], labels[j]);
        if gate == 0.0 {
            return 0.0;
        }
        gate * self.pair_weight(i, j)
    }

    /// Remove the listed nodes; unaries and features of the rest are untouched.
    pub fn without(&self, ids: &[GaussianId]) -> CrfProblem {
        CrfProblem {
            nodes: self
                .nodes
                .iter()
                .filter(|n| !ids.contains(&n.id))
                .copied()
                .collect(),
            bandwidths: self.bandwidths,
            weights: self.weights,
        }
    }
}

/// Gibbs energy by direct summation over all pairs.
pub fn gibbs_energy(labels: &[Label], problem: &CrfProblem) -> f64 {
    assert_eq!(labels.len(), problem.len(), "one label per node");
    let n = problem.len();
    let mut e = 0.0;
    for i in 0..n {
        e += problem.nodes[i].unary[labels[i] as usize];
        for j in (i + 1)..n {
            e += problem.pairwise_potential(i, j, labels);
        }
    }
    e
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarginalField {
    /// Probability of the dynamic label per node.
    pub q: Vec<f64>,
}

impl MarginalField {
    /// Hard labels; ties at 0.5 go to static.
    pub fn labels(&self) -> Vec<Label> {
        self.q
            .iter()
            .map(|&q| if q > 0.5 { Label::Dynamic } else { Label::Static })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeanFieldResult {
    pub marginals: MarginalField,
    pub labels: Vec<Label>,
    /// Free energy at initialization followed by one entry per sweep.
    pub free_energy: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

enum PairKernel {
    Dense(Vec<f64>),
    OnTheFly,
}

impl PairKernel {
    fn build(problem: &CrfProblem) -> Self {
        let n = problem.len();
        if n > DENSE_KERNEL_LIMIT {
            return PairKernel::OnTheFly;
        }
        let rows = par::map_range(n, |i| {
            (0..n)
                .map(|j| if i == j { 0.0 } else { problem.pair_weight(i, j) })
                .collect::<Vec<f64>>()
        });
        PairKernel::Dense(rows.concat())
    }

    fn row_dot(&self, problem: &CrfProblem, i: usize, v: &[f64]) -> f64 {
        let n = problem.len();
        match self {
            PairKernel::Dense(k) => k[i * n..(i + 1) * n]
                .iter()
                .zip(v)
                .map(|(a, b)| a * b)
                .sum(),
            PairKernel::OnTheFly => (0..n)
                .filter(|&j| j != i)
                .map(|j| problem.pair_weight(i, j) * v[j])
                .sum(),
        }
    }
}

fn entropy_term(q: f64) -> f64 {
    let mut h = 0.0;
    if q > 0.0 {
        h += q * q.ln();
    }
    if q < 1.0 {
        h += (1.0 - q) * (1.0 - q).ln();
    }
    h
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Expected energy minus entropy of the factorized distribution `q`.
fn free_energy_with(problem: &CrfProblem, kernel: &PairKernel, row_sums: &[f64], q: &[f64]) -> f64 {
    let n = problem.len();
    let s = par::map_range(n, |i| kernel.row_dot(problem, i, q));
    let mut f = 0.0;
    for i in 0..n {
        let u = &problem.nodes[i].unary;
        f += q[i] * u[1] + (1.0 - q[i]) * u[0] + entropy_term(q[i]);
        // Sum over i<j of K_ij (q_i + q_j - 2 q_i q_j).
        f += q[i] * row_sums[i] - q[i] * s[i];
    }
    f
}

/// Mean-field free energy of marginals `q` under `problem`.
pub fn free_energy(problem: &CrfProblem, q: &[f64]) -> f64 {
    let kernel = PairKernel::build(problem);
    let ones = vec![1.0; problem.len()];
    let row_sums = par::map_range(problem.len(), |i| kernel.row_dot(problem, i, &ones));
    free_energy_with(problem, &kernel, &row_sums, q)
}

/// Dense mean-field inference.
///
/// Marginals start from the unary softmax; each sweep updates nodes one at
/// a time, least confident unary first, with exact messages `sum_j K_ij q_j`.
/// Stops early once no marginal moves by more than 1e-6.
pub fn mean_field_infer(problem: &CrfProblem, iterations: usize) -> MeanFieldResult {
    let n = problem.len();
    let mut q: Vec<f64> = problem
        .nodes
        .iter()
        .map(|nd| sigmoid(nd.unary[0] - nd.unary[1]))
        .collect();
    let kernel = PairKernel::build(problem);
    let ones = vec![1.0; n];
    let row_sums = par::map_range(n, |i| kernel.row_dot(problem, i, &ones));
    let mut trace = vec![free_energy_with(problem, &kernel, &row_sums, &q)];
    // Least confident nodes first, so confident ones act as anchors.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let ca = (problem.nodes[a].unary[0] - problem.nodes[a].unary[1]).abs();
        let cb = (problem.nodes[b].unary[0] - problem.nodes[b].unary[1]).abs();
        ca.total_cmp(&cb).then(a.cmp(&b))
    });
    let mut converged = false;
    let mut done = 0;
    for _ in 0..iterations.max(1) {
        let mut max_delta: f64 = 0.0;
        for &i in &order {
            let s = kernel.row_dot(problem, i, &q);
            let u = &problem.nodes[i].unary;
            let e_dyn = u[1] + (row_sums[i] - s);
            let e_sta = u[0] + s;
            let next = sigmoid(e_sta - e_dyn);
            max_delta = max_delta.max((next - q[i]).abs());
            q[i] = next;
        }
        done += 1;
        trace.push(free_energy_with(problem, &kernel, &row_sums, &q));
        if max_delta < CONVERGENCE_TOL {
            converged = true;
            break;
        }
    }
    let marginals = MarginalField { q };
    MeanFieldResult {
        labels: marginals.labels(),
        marginals,
        free_energy: trace,
        iterations: done,
        converged,
    }
}

/// Fraction of dynamic labels among the newest `min(n + 1, len)` entries.
pub fn window_score(history: &LabelHistory, n: usize) -> f64 {
    let take = (n + 1).min(history.len());
    if take == 0 {
        return 0.0;
    }
    let dynamic = history
        .iter()
        .rev()
        .take(take)
        .filter(|l| l.is_dynamic())
        .count();
    dynamic as f64 / take as f64
}

/// Delete Gaussians whose full `n + 1` keyframe window is at least
/// `threshold` dynamic. Everything else, dynamic or not, is kept.
pub fn apply_retention(map: &mut GaussianMap, n: usize, threshold: f64) -> Vec<GaussianId> {
    let doomed: Vec<GaussianId> = map
        .iter()
        .filter(|g| g.label_history.len() > n && window_score(&g.label_history, n) >= threshold)
        .map(|g| g.id())
        .collect();
    for id in &doomed {
        map.remove(*id);
    }
    doomed
}

/// One line per node: `id label q_dynamic`.
pub fn write_label_dump<W: Write>(
    out: &mut W,
    problem: &CrfProblem,
    result: &MeanFieldResult,
) -> io::Result<()> {
    for (i, node) in problem.nodes.iter().enumerate() {
        writeln!(
            out,
            "{} {} {:.6}",
            node.id.0,
            result.labels[i].as_u8(),
            result.marginals.q[i]
        )?;
    }
    Ok(())
}
