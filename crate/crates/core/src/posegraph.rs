//! Point-based pose graph: robust Levenberg-Marquardt refinement, edge
//! pruning and the two-level (fragment / keyframe) optimisation.
//!
//! Poses map camera coordinates to the graph's reference frame. An edge
//! `(i, j)` carries the measured `T_ij`, which maps points from camera `i` to
//! camera `j`, and the 3D points (camera-`i` coordinates) that support it.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use nalgebra::{DMatrix, DVector, SMatrix};

use crate::error::{ReconError, Result};
use crate::geometry::{skew, RigidPose, Vec3};

type Mat36 = SMatrix<f64, 3, 6>;

#[derive(Debug, Clone, PartialEq)]
pub struct PoseEdge {
    pub from: usize,
    pub to: usize,
    pub measurement: RigidPose,
    pub points: Vec<Vec3>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseGraph {
    pub poses: BTreeMap<usize, RigidPose>,
    pub edges: Vec<PoseEdge>,
    pub fixed: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    pub huber_delta_cm: f64,
    pub max_iterations: usize,
    pub rel_tol: f64,
    pub initial_damping: f64,
    pub prune_factor: f64,
    /// Edges whose mean residual is under this floor are never pruned.
    pub prune_min_residual_cm: f64,
    pub prune_rounds: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            huber_delta_cm: 0.1,
            max_iterations: 50,
            rel_tol: 1e-8,
            initial_damping: 1e-4,
            prune_factor: 3.0,
            prune_min_residual_cm: 0.02,
            prune_rounds: 2,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.huber_delta_cm > 0.0
            && self.rel_tol >= 0.0
            && self.initial_damping > 0.0
            && self.prune_factor > 0.0
            && self.prune_min_residual_cm >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(ReconError::Config(format!("invalid solver settings {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptimizeReport {
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    pub converged: bool,
    pub gradient_norm: f64,
    /// Vertices not connected to the fixed vertex; left untouched.
    pub unreachable: Vec<usize>,
}

/// `T_j^-1 T_i p - T_ij p` for one supporting point.
pub fn point_residual(t_i: &RigidPose, t_j: &RigidPose, t_ij: &RigidPose, p: &Vec3) -> Vec3 {
    t_j.inverse().transform_point(&t_i.transform_point(p)) - t_ij.transform_point(p)
}

/// Sum of squared point residuals of one edge.
pub fn edge_inconsistency(t_i: &RigidPose, t_j: &RigidPose, t_ij: &RigidPose, points: &[Vec3]) -> Result<f64> {
    if points.is_empty() {
        return Err(ReconError::Empty("edge has no supporting points".into()));
    }
    Ok(points.iter().map(|p| point_residual(t_i, t_j, t_ij, p).norm_squared()).sum())
}

/// Jacobians of [`point_residual`] with respect to left perturbations
/// `[v, w]` of `T_i` and `T_j`.
pub fn point_jacobians(t_i: &RigidPose, t_j: &RigidPose, p: &Vec3) -> (Mat36, Mat36) {
    let q = t_i.transform_point(p);
    let rjt = t_j.rotation.transpose();
    let qx = skew(&q);
    let mut ji = Mat36::zeros();
    ji.fixed_view_mut::<3, 3>(0, 0).copy_from(&rjt);
    ji.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-rjt * qx));
    let mut jj = Mat36::zeros();
    jj.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-rjt));
    jj.fixed_view_mut::<3, 3>(0, 3).copy_from(&(rjt * qx));
    (ji, jj)
}

fn huber(s: f64, delta: f64) -> (f64, f64) {
    if s <= delta {
        (s * s, 1.0)
    } else {
        (2.0 * delta * s - delta * delta, delta / s)
    }
}

impl PoseGraph {
    pub fn new(fixed: usize) -> Self {
        PoseGraph { poses: BTreeMap::new(), edges: Vec::new(), fixed }
    }

    pub fn add_edge(&mut self, edge: PoseEdge) -> Result<()> {
        if !self.poses.contains_key(&edge.from) || !self.poses.contains_key(&edge.to) {
            return Err(ReconError::InvalidInput(format!("edge {}-{} references unknown vertex", edge.from, edge.to)));
        }
        if edge.from == edge.to {
            return Err(ReconError::InvalidInput(format!("self edge on {}", edge.from)));
        }
        if edge.points.is_empty() {
            return Err(ReconError::Empty(format!("edge {}-{} has no points", edge.from, edge.to)));
        }
        self.edges.push(edge);
        Ok(())
    }

    /// Vertices connected to the fixed vertex.
    pub fn reachable(&self) -> BTreeSet<usize> {
        self.component_of_fixed(None)
    }

    /// Vertices connected to the fixed vertex (ignores edge `skip`).
    fn component_of_fixed(&self, skip: Option<usize>) -> BTreeSet<usize> {
        let mut adj: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (k, e) in self.edges.iter().enumerate() {
            if Some(k) == skip {
                continue;
            }
            adj.entry(e.from).or_default().push(e.to);
            adj.entry(e.to).or_default().push(e.from);
        }
        let mut seen = BTreeSet::new();
        if !self.poses.contains_key(&self.fixed) {
            return seen;
        }
        let mut queue = VecDeque::from([self.fixed]);
        seen.insert(self.fixed);
        while let Some(v) = queue.pop_front() {
            for &w in adj.get(&v).map(Vec::as_slice).unwrap_or(&[]) {
                if seen.insert(w) {
                    queue.push_back(w);
                }
            }
        }
        seen
    }

    /// Robust cost of the edges whose endpoints are both in `active`.
    fn cost(&self, poses: &BTreeMap<usize, RigidPose>, active: &BTreeSet<usize>, delta: f64) -> f64 {
        let mut total = 0.0;
        for e in &self.edges {
            if !active.contains(&e.from) || !active.contains(&e.to) {
                continue;
            }
            let (ti, tj) = (&poses[&e.from], &poses[&e.to]);
            for p in &e.points {
                total += huber(point_residual(ti, tj, &e.measurement, p).norm(), delta).0;
            }
        }
        total
    }

    pub fn total_cost(&self, cfg: &SolverConfig) -> f64 {
        let active = self.component_of_fixed(None);
        self.cost(&self.poses, &active, cfg.huber_delta_cm)
    }

    /// Mean per-point residual norm of each edge at the current poses.
    pub fn edge_mean_residuals(&self) -> Vec<f64> {
        self.edges
            .iter()
            .map(|e| {
                let (ti, tj) = (&self.poses[&e.from], &self.poses[&e.to]);
                e.points.iter().map(|p| point_residual(ti, tj, &e.measurement, p).norm()).sum::<f64>()
                    / e.points.len() as f64
            })
            .collect()
    }

    /// Damped Gauss-Newton with Huber IRLS weights. Vertices unreachable
    /// from the fixed vertex are reported and left unchanged.
    pub fn optimize(&mut self, cfg: &SolverConfig) -> Result<OptimizeReport> {
        cfg.validate()?;
        if !self.poses.contains_key(&self.fixed) {
            return Err(ReconError::InvalidInput(format!("fixed vertex {} not in graph", self.fixed)));
        }
        let active = self.component_of_fixed(None);
        let unreachable: Vec<usize> = self.poses.keys().filter(|v| !active.contains(v)).copied().collect();
        let vars: Vec<usize> = active.iter().filter(|&&v| v != self.fixed).copied().collect();
        let index: BTreeMap<usize, usize> = vars.iter().enumerate().map(|(k, &v)| (v, k)).collect();
        let n = 6 * vars.len();
        let delta = cfg.huber_delta_cm;

        let mut cost = self.cost(&self.poses, &active, delta);
        let mut report = OptimizeReport { initial_cost: cost, final_cost: cost, unreachable, ..Default::default() };
        if n == 0 {
            report.converged = true;
            return Ok(report);
        }
        let mut lambda = cfg.initial_damping;
        for _ in 0..cfg.max_iterations {
            let (h, b) = self.linearize(&active, &index, n, delta);
            report.gradient_norm = 2.0 * b.norm();
            if report.gradient_norm < 1e-12 || cost <= 1e-24 {
                report.converged = true;
                break;
            }
            let mut accepted = false;
            while lambda <= 1e12 {
                let mut damped = h.clone();
                for k in 0..n {
                    damped[(k, k)] += lambda * h[(k, k)].max(1e-9);
                }
                let Some(chol) = damped.cholesky() else {
                    lambda *= 10.0;
                    continue;
                };
                let step = chol.solve(&(-&b));
                let mut trial = self.poses.clone();
                for (k, v) in vars.iter().enumerate() {
                    let d: [f64; 6] = std::array::from_fn(|c| step[6 * k + c]);
                    let p = trial.get_mut(v).unwrap();
                    *p = p.retract(&d);
                }
                let new_cost = self.cost(&trial, &active, delta);
                if new_cost < cost {
                    let decrease = cost - new_cost;
                    self.poses = trial;
                    let old = cost;
                    cost = new_cost;
                    report.iterations += 1;
                    lambda = (lambda / 10.0).max(1e-12);
                    accepted = true;
                    if decrease <= cfg.rel_tol * old {
                        report.converged = true;
                    }
                    break;
                }
                lambda *= 10.0;
            }
            if !accepted {
                // No descent direction left at any damping: a stationary point.
                report.converged = true;
                break;
            }
            if report.converged {
                break;
            }
        }
        report.final_cost = cost;
        report.gradient_norm = 2.0 * self.linearize(&active, &index, n, delta).1.norm();
        Ok(report)
    }

    /// Gauss-Newton system `(J^T W J, J^T W r)` over the free vertices.
    fn linearize(
        &self,
        active: &BTreeSet<usize>,
        index: &BTreeMap<usize, usize>,
        n: usize,
        delta: f64,
    ) -> (DMatrix<f64>, DVector<f64>) {
        let mut h = DMatrix::<f64>::zeros(n, n);
        let mut b = DVector::<f64>::zeros(n);
        for e in &self.edges {
            if !active.contains(&e.from) || !active.contains(&e.to) {
                continue;
            }
            let (ti, tj) = (&self.poses[&e.from], &self.poses[&e.to]);
            let (ia, ib) = (index.get(&e.from).copied(), index.get(&e.to).copied());
            for p in &e.points {
                let r = point_residual(ti, tj, &e.measurement, p);
                let w = huber(r.norm(), delta).1;
                let (ji, jj) = point_jacobians(ti, tj, p);
                let blocks = [(ia, ji), (ib, jj)];
                for &(x, jx) in &blocks {
                    let Some(x) = x else { continue };
                    let g = jx.transpose() * r * w;
                    for k in 0..6 {
                        b[6 * x + k] += g[k];
                    }
                    for &(y, jy) in &blocks {
                        let Some(y) = y else { continue };
                        let blk = jx.transpose() * jy * w;
                        let mut view = h.view_mut((6 * x, 6 * y), (6, 6));
                        view += blk;
                    }
                }
            }
        }
        (h, b)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PruneReport {
    /// Removed edges as `(from, to)`.
    pub removed: Vec<(usize, usize)>,
    /// Edges over the threshold that were kept because removing them would
    /// disconnect the graph.
    pub retained_bridges: Vec<(usize, usize)>,
    pub rounds: usize,
    pub optimize: Vec<OptimizeReport>,
}

/// Iteratively drops edges whose mean residual exceeds `prune_factor` times
/// the median edge residual, re-optimising after every round. Edges whose
/// removal would split the fixed vertex's component are kept and flagged.
pub fn prune_edges(graph: &mut PoseGraph, cfg: &SolverConfig) -> Result<PruneReport> {
    let mut report = PruneReport::default();
    for _ in 0..cfg.prune_rounds {
        if graph.edges.len() < 2 {
            break;
        }
        let res = graph.edge_mean_residuals();
        let mut sorted = res.clone();
        sorted.sort_by(f64::total_cmp);
        let m = sorted.len();
        let median = if m % 2 == 1 { sorted[m / 2] } else { 0.5 * (sorted[m / 2 - 1] + sorted[m / 2]) };
        let threshold = (cfg.prune_factor * median).max(cfg.prune_min_residual_cm);
        let mut order: Vec<usize> = (0..m).filter(|&k| res[k] > threshold).collect();
        order.sort_by(|&a, &b| res[b].total_cmp(&res[a]));
        if order.is_empty() {
            break;
        }
        report.rounds += 1;
        let mut removed_any = false;
        for k in order {
            let e = &graph.edges[k];
            let pair = (e.from, e.to);
            if graph.edges.iter().all(|x| (x.from, x.to) != pair) {
                continue;
            }
            let idx = graph.edges.iter().position(|x| (x.from, x.to) == pair).unwrap();
            let before = graph.component_of_fixed(None);
            let after = graph.component_of_fixed(Some(idx));
            if after.len() < before.len() {
                if !report.retained_bridges.contains(&pair) {
                    report.retained_bridges.push(pair);
                }
                continue;
            }
            graph.edges.remove(idx);
            report.removed.push(pair);
            removed_any = true;
        }
        if !removed_any {
            break;
        }
        report.optimize.push(graph.optimize(cfg)?);
    }
    Ok(report)
}

/// Spanning-tree initialisation: poses of vertices reachable from the fixed
/// vertex are overwritten by chaining edge measurements breadth-first.
pub fn init_from_spanning_tree(graph: &mut PoseGraph) {
    let mut adj: BTreeMap<usize, Vec<(usize, RigidPose)>> = BTreeMap::new();
    for e in &graph.edges {
        // Pose of `to` from pose of `from`: T_to = T_from T_ij^-1.
        adj.entry(e.from).or_default().push((e.to, e.measurement.inverse()));
        adj.entry(e.to).or_default().push((e.from, e.measurement));
    }
    let mut seen = BTreeSet::from([graph.fixed]);
    let mut queue = VecDeque::from([graph.fixed]);
    while let Some(v) = queue.pop_front() {
        let tv = graph.poses[&v];
        for (w, rel) in adj.get(&v).cloned().unwrap_or_default() {
            if seen.insert(w) {
                graph.poses.insert(w, tv.compose(&rel));
                queue.push_back(w);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct StageReport {
    pub optimize: OptimizeReport,
    pub prune: PruneReport,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct HierarchyResult {
    /// World pose of every frame reachable from the root keyframe.
    pub global: BTreeMap<usize, RigidPose>,
    pub keyframe_poses: BTreeMap<usize, RigidPose>,
    pub intra: Vec<StageReport>,
    pub inter: Option<StageReport>,
}

fn run_stage(graph: &mut PoseGraph, cfg: &SolverConfig) -> Result<StageReport> {
    let optimize = graph.optimize(cfg)?;
    let prune = prune_edges(graph, cfg)?;
    Ok(StageReport { optimize, prune })
}

/// Optimises each fragment's graph with its keyframe fixed, then the
/// keyframe graph with its root fixed, and composes the two levels.
///
/// `intra[f].fixed` must be the keyframe of fragment `f` and must be a vertex
/// of `inter`. When `optimize_inter` is false the keyframe poses in `inter`
/// are used as given.
pub fn hierarchical_optimize(
    intra: &mut [PoseGraph],
    inter: &mut PoseGraph,
    cfg: &SolverConfig,
    optimize_inter: bool,
) -> Result<HierarchyResult> {
    let mut result = HierarchyResult::default();
    for g in intra.iter_mut() {
        g.poses.insert(g.fixed, RigidPose::identity());
        result.intra.push(run_stage(g, cfg)?);
    }
    if optimize_inter {
        result.inter = Some(run_stage(inter, cfg)?);
    }
    let reachable = inter.component_of_fixed(None);
    for (&kf, pose) in &inter.poses {
        if optimize_inter && !reachable.contains(&kf) {
            continue;
        }
        result.keyframe_poses.insert(kf, *pose);
    }
    for g in intra.iter() {
        let Some(kf_pose) = result.keyframe_poses.get(&g.fixed) else { continue };
        let local = g.component_of_fixed(None);
        for (&f, pose) in &g.poses {
            if local.contains(&f) {
                result.global.insert(f, kf_pose.compose(pose));
            }
        }
    }
    Ok(result)
}
