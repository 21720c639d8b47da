//! End-to-end run: online tracking into fragments, two-level pose-graph
//! optimisation, gated TSDF fusion, and the command entry points.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{ReconError, Result};
use crate::eval::{self, FrameMatch, GtFrame};
use crate::fragments::{frustum_overlap, should_create_fragment, ConnectivityGraph, Fragment, FragmentDecision};
use crate::fusion::{fusion_scheduler, FragmentFusionState, Mesh, TsdfVolume};
use crate::geometry::{RigidPose, Vec3};
use crate::io::{self, RunPaths, Sequence};
use crate::matching::{register_pair, FrameFeatures, PairDiagnostics};
use crate::posegraph::{hierarchical_optimize, init_from_spanning_tree, HierarchyResult, PoseEdge, PoseGraph};
use crate::synthdata::{generate_sequence, scenario, TubeScene};

/// Result of the online pass over the sequence.
#[derive(Debug, Clone)]
pub struct Tracking {
    pub features: Vec<FrameFeatures>,
    pub fragments: Vec<Fragment>,
    /// Fragment of every frame.
    pub frame_fragment: Vec<usize>,
    /// Intra-fragment edges, indexed like `fragments`.
    pub intra_edges: Vec<Vec<PoseEdge>>,
    pub graph: ConnectivityGraph,
    /// Diagnostics of every consecutive pair `(t-1, t)`, indexed by `t-1`.
    pub consecutive: Vec<PairDiagnostics>,
    /// Inlier matches of the valid consecutive pairs, by keypoint file index.
    pub matches: Vec<FrameMatch>,
}

impl Tracking {
    pub fn fragment_of_keyframe(&self, kf: usize) -> usize {
        self.frame_fragment[kf]
    }
}

fn frame_matches(
    i: usize,
    a: &FrameFeatures,
    j: usize,
    b: &FrameFeatures,
    ms: &[crate::matching::Match],
) -> Vec<FrameMatch> {
    ms.iter()
        .map(|m| FrameMatch { frame_a: i, kp_a: a.keypoints[m.a].index, frame_b: j, kp_b: b.keypoints[m.b].index })
        .collect()
}

/// Online pass: consecutive registration, fragment decisions, and keyframe
/// registration against every earlier keyframe.
pub fn track(seq: &Sequence, cfg: &RunConfig) -> Result<Tracking> {
    cfg.validate()?;
    let k = seq.intrinsics;
    if seq.frames.is_empty() {
        return Err(ReconError::Empty("sequence has no frames".into()));
    }
    let features: Vec<FrameFeatures> = seq
        .frames
        .iter()
        .map(|f| FrameFeatures::from_raw(&f.keypoints, &f.descriptors, &f.depth, &k))
        .collect::<Result<_>>()?;
    let trackable = |f: usize| features[f].len() >= cfg.filter.min_matches;
    let link = |p: usize, kf: usize| {
        let c = register_pair(p, &features[p], kf, &features[kf], &k, &cfg.filter);
        match (c.valid, &c.transform) {
            (true, Some(t)) => Some((*t, c.source_points(&features[p]))),
            _ => None,
        }
    };

    let mut fragments = vec![Fragment::new(0, 0)];
    let mut frame_fragment = vec![0];
    let mut intra_edges: Vec<Vec<PoseEdge>> = vec![Vec::new()];
    let mut graph = ConnectivityGraph::new();
    graph.register_keyframe(0, trackable(0), link)?;
    let mut consecutive = Vec::new();
    let mut matches = Vec::new();

    for t in 1..seq.frames.len() {
        let c = register_pair(t - 1, &features[t - 1], t, &features[t], &k, &cfg.filter);
        consecutive.push(c.diagnostics);
        let step = if c.valid { c.transform } else { None };
        if step.is_some() {
            matches.extend(frame_matches(t - 1, &features[t - 1], t, &features[t], &c.matches));
        }
        let active = fragments.last().expect("one active fragment");
        let kf = active.keyframe;
        // Camera-to-keyframe pose of frame t: T_t = T_{t-1} T_{t-1,t}^-1.
        let local = step.as_ref().map(|s| active.last_local_pose().compose(&s.inverse()));
        let overlap = local
            .as_ref()
            .and_then(|l| frustum_overlap(&seq.frames[t].depth, &seq.frames[kf].depth, l, &k, &cfg.fragment).ok());
        match should_create_fragment(c.diagnostics.filtered_matches, overlap, &cfg.fragment) {
            FragmentDecision::Append => {
                let f = fragments.len() - 1;
                let (Some(local), Some(step)) = (local, step) else { unreachable!("append needs a pose") };
                let mut edges =
                    vec![PoseEdge { from: t - 1, to: t, measurement: step, points: c.source_points(&features[t - 1]) }];
                if kf != t - 1 {
                    let to_kf = register_pair(kf, &features[kf], t, &features[t], &k, &cfg.filter);
                    if let (true, Some(m)) = (to_kf.valid, &to_kf.transform) {
                        edges.push(PoseEdge {
                            from: kf,
                            to: t,
                            measurement: *m,
                            points: to_kf.source_points(&features[kf]),
                        });
                    }
                }
                fragments[f].push(t, local)?;
                intra_edges[f].extend(edges);
                frame_fragment.push(f);
            }
            FragmentDecision::NewFragment => {
                let id = fragments.len();
                fragments.last_mut().expect("active fragment").active = false;
                fragments.push(Fragment::new(id, t));
                intra_edges.push(Vec::new());
                frame_fragment.push(id);
                graph.register_keyframe(t, trackable(t), link)?;
            }
        }
    }
    Ok(Tracking { features, fragments, frame_fragment, intra_edges, graph, consecutive, matches })
}

/// Global poses and optimisation reports.
#[derive(Debug, Clone)]
pub struct Solution {
    /// World pose of every frame in the main component.
    pub poses: BTreeMap<usize, RigidPose>,
    pub hierarchy: HierarchyResult,
    /// Fragments whose frames received poses.
    pub main_fragments: BTreeSet<usize>,
}

/// Two-level optimisation. With `inter_optimization` off, keyframes are
/// chained through the edges between temporally adjacent keyframes only.
pub fn solve(tracking: &Tracking, cfg: &RunConfig) -> Result<Solution> {
    let mut intra: Vec<PoseGraph> = Vec::with_capacity(tracking.fragments.len());
    for (f, frag) in tracking.fragments.iter().enumerate() {
        let mut g = PoseGraph::new(frag.keyframe);
        for (&m, p) in frag.members.iter().zip(&frag.local_poses) {
            g.poses.insert(m, *p);
        }
        for e in &tracking.intra_edges[f] {
            g.add_edge(e.clone())?;
        }
        intra.push(g);
    }
    let graph = &tracking.graph;
    let root = tracking.fragments[0].keyframe;
    let mut inter = PoseGraph::new(root);
    for &kf in &graph.keyframes {
        inter.poses.insert(kf, RigidPose::identity());
    }
    let adjacent: BTreeSet<(usize, usize)> = graph.keyframes.windows(2).map(|w| (w[0], w[1])).collect();
    for e in &graph.edges {
        if cfg.inter_optimization || adjacent.contains(&(e.from, e.to)) {
            inter.add_edge(PoseEdge {
                from: e.from,
                to: e.to,
                measurement: e.transform,
                points: e.points.clone(),
            })?;
        }
    }
    init_from_spanning_tree(&mut inter);
    if !cfg.inter_optimization {
        let reachable = inter.reachable();
        inter.poses.retain(|kf, _| reachable.contains(kf));
    }
    let hierarchy = hierarchical_optimize(&mut intra, &mut inter, &cfg.solver, cfg.inter_optimization)?;
    let main_fragments =
        hierarchy.keyframe_poses.keys().map(|&kf| tracking.fragment_of_keyframe(kf)).collect::<BTreeSet<_>>();
    Ok(Solution { poses: hierarchy.global.clone(), hierarchy, main_fragments })
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FusionSummary {
    /// Fragments in fusion order.
    pub fused_fragments: Vec<usize>,
    /// Fragments fused by the gate while the sequence was still running.
    pub gated: usize,
    pub integrated_frames: usize,
}

/// Replays the sequence, fusing main-component fragments as the gate
/// releases them and flushing the rest at the end.
pub fn fuse(
    seq: &Sequence,
    tracking: &Tracking,
    solution: &Solution,
    cfg: &RunConfig,
) -> Result<(Mesh, FusionSummary)> {
    let k = seq.intrinsics;
    let mut vol = TsdfVolume::new(cfg.tsdf)?;
    let mut summary = FusionSummary::default();
    let mut states: Vec<FragmentFusionState> = Vec::new();
    // Keyframe edges created at frame t revisit the earlier fragment.
    let mut revisits: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for e in &tracking.graph.edges {
        revisits.entry(e.to).or_default().push(tracking.fragment_of_keyframe(e.from));
    }
    let integrate = |f: usize, vol: &mut TsdfVolume, summary: &mut FusionSummary| -> Result<()> {
        for &m in &tracking.fragments[f].members {
            if let Some(pose) = solution.poses.get(&m) {
                vol.integrate(&seq.frames[m].depth, &seq.frames[m].image, pose, &k)?;
                summary.integrated_frames += 1;
            }
        }
        summary.fused_fragments.push(f);
        Ok(())
    };
    for t in 0..seq.frames.len() {
        let f = tracking.frame_fragment[t];
        if tracking.fragments[f].keyframe == t && solution.main_fragments.contains(&f) {
            let position = solution.poses[&t].translation;
            states.push(FragmentFusionState {
                fragment: f,
                keyframe_position: position,
                last_inspected: t,
                fused: false,
            });
        }
        let seen: Vec<usize> = std::iter::once(f).chain(revisits.get(&t).into_iter().flatten().copied()).collect();
        for s in states.iter_mut().filter(|s| seen.contains(&s.fragment)) {
            s.last_inspected = t;
        }
        let Some(camera) = solution.poses.get(&t) else { continue };
        for ready in fusion_scheduler(&mut states, t, &camera.translation, &cfg.gate) {
            integrate(ready, &mut vol, &mut summary)?;
            summary.gated += 1;
        }
    }
    for s in states.iter_mut().filter(|s| !s.fused) {
        s.fused = true;
        integrate(s.fragment, &mut vol, &mut summary)?;
    }
    let mesh = if vol.block_count() == 0 { Mesh::default() } else { vol.extract_mesh() };
    Ok((mesh, summary))
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunReport {
    pub frames: usize,
    pub fragments: usize,
    pub keyframe_edges: usize,
    /// Trackable keyframes without any edge at the end of the run.
    pub lone_fragments: usize,
    /// Largest number of lone fragments at any point of the run.
    pub peak_lone_fragments: usize,
    /// Fragments whose keyframe has too few features to register.
    pub untrackable_fragments: usize,
    pub disjoint_components: usize,
    pub trajectory_frames: usize,
    pub pruned_edges: usize,
    pub retained_bridges: usize,
    pub intra_final_cost: f64,
    pub inter_final_cost: Option<f64>,
    pub fused_fragments: usize,
    pub gated_fragments: usize,
    pub mesh_vertices: usize,
    pub mesh_triangles: usize,
    pub inter_optimization: bool,
    pub seed: u64,
}

impl RunReport {
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "frames={}", self.frames);
        let _ = writeln!(s, "fragments={}", self.fragments);
        let _ = writeln!(s, "keyframe_edges={}", self.keyframe_edges);
        let _ = writeln!(s, "lone_fragments={}", self.lone_fragments);
        let _ = writeln!(s, "peak_lone_fragments={}", self.peak_lone_fragments);
        let _ = writeln!(s, "untrackable_fragments={}", self.untrackable_fragments);
        let _ = writeln!(s, "disjoint_components={}", self.disjoint_components);
        let _ = writeln!(s, "trajectory_frames={}", self.trajectory_frames);
        let _ = writeln!(s, "pruned_edges={}", self.pruned_edges);
        let _ = writeln!(s, "retained_bridges={}", self.retained_bridges);
        let _ = writeln!(s, "intra_final_cost={:e}", self.intra_final_cost);
        let _ = writeln!(s, "inter_final_cost={}", self.inter_final_cost.map_or("none".into(), |c| format!("{c:e}")));
        let _ = writeln!(s, "fused_fragments={}", self.fused_fragments);
        let _ = writeln!(s, "gated_fragments={}", self.gated_fragments);
        let _ = writeln!(s, "mesh_vertices={}", self.mesh_vertices);
        let _ = writeln!(s, "mesh_triangles={}", self.mesh_triangles);
        let _ = writeln!(s, "inter_optimization={}", self.inter_optimization);
        let _ = writeln!(s, "seed={}", self.seed);
        s
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub tracking: Tracking,
    pub solution: Solution,
    pub mesh: Mesh,
    pub fusion: FusionSummary,
    pub report: RunReport,
}

impl RunOutput {
    pub fn trajectory(&self) -> Vec<(usize, RigidPose)> {
        self.solution.poses.iter().map(|(&i, p)| (i, *p)).collect()
    }
}

pub fn report(
    tracking: &Tracking,
    solution: &Solution,
    mesh: &Mesh,
    fusion: &FusionSummary,
    cfg: &RunConfig,
) -> RunReport {
    let h = &solution.hierarchy;
    let stages = h.intra.iter().chain(h.inter.iter());
    let (mut pruned, mut bridges) = (0, 0);
    for s in stages {
        pruned += s.prune.removed.len();
        bridges += s.prune.retained_bridges.len();
    }
    let final_cost = |s: &crate::posegraph::StageReport| s.prune.optimize.last().unwrap_or(&s.optimize).final_cost;
    RunReport {
        frames: tracking.frame_fragment.len(),
        fragments: tracking.fragments.len(),
        keyframe_edges: tracking.graph.edges.len(),
        lone_fragments: tracking.graph.lone().len(),
        peak_lone_fragments: tracking.graph.peak_lone,
        untrackable_fragments: tracking.graph.untrackable.len(),
        disjoint_components: tracking.graph.disjoint_components(),
        trajectory_frames: solution.poses.len(),
        pruned_edges: pruned,
        retained_bridges: bridges,
        intra_final_cost: h.intra.iter().map(final_cost).sum(),
        inter_final_cost: h.inter.as_ref().map(final_cost),
        fused_fragments: fusion.fused_fragments.len(),
        gated_fragments: fusion.gated,
        mesh_vertices: mesh.vertices.len(),
        mesh_triangles: mesh.triangles.len(),
        inter_optimization: cfg.inter_optimization,
        seed: cfg.seed,
    }
}

/// Tracking, optimisation and fusion on an in-memory sequence.
pub fn run(seq: &Sequence, cfg: &RunConfig) -> Result<RunOutput> {
    let tracking = track(seq, cfg)?;
    let solution = solve(&tracking, cfg)?;
    let (mesh, fusion) = fuse(seq, &tracking, &solution, cfg)?;
    let report = report(&tracking, &solution, &mesh, &fusion, cfg);
    Ok(RunOutput { tracking, solution, mesh, fusion, report })
}

/// Reads a sequence directory, runs the pipeline and writes trajectory,
/// mesh, connectivity edge list, matches and report into `out`.
pub fn cmd_run(seq_dir: &Path, out: &Path, cfg: &RunConfig) -> Result<RunReport> {
    let seq = io::read_sequence(seq_dir)?;
    let result = run(&seq, cfg)?;
    let paths = RunPaths::in_dir(out);
    io::write_atomic(&paths.trajectory, io::trajectory_text(&result.trajectory()).as_bytes())?;
    let mut ply = Vec::new();
    result.mesh.write_ply(&mut ply).map_err(|e| ReconError::io(&paths.mesh, e))?;
    io::write_atomic(&paths.mesh, &ply)?;
    io::write_atomic(&paths.edges, result.tracking.graph.edge_list_text().as_bytes())?;
    io::write_atomic(&paths.matches, io::matches_text(&result.tracking.matches).as_bytes())?;
    io::write_atomic(&paths.report, result.report.to_kv().as_bytes())?;
    Ok(result.report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalKind {
    Depth,
    Ate,
    Matching,
}

impl std::str::FromStr for EvalKind {
    type Err = ReconError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "depth" => Ok(EvalKind::Depth),
            "ate" => Ok(EvalKind::Ate),
            "matching" => Ok(EvalKind::Matching),
            _ => Err(ReconError::InvalidInput(format!("unknown evaluation `{s}` (depth, ate, matching)"))),
        }
    }
}

fn missing_gt(dir: &Path, what: &str) -> ReconError {
    ReconError::format(dir.join("gt"), format!("no ground truth {what}"))
}

/// Evaluates run or sequence artifacts in `pred` against the ground truth
/// of the sequence directory `gt_dir`. Returns a key=value report.
///
/// * depth: `pred` is a sequence directory; its frame depths are compared
///   with `gt/depth` and the per-frame metrics averaged.
/// * ate: `pred` is a trajectory file or a run directory.
/// * matching: `pred` is a matches file or a run directory; all consecutive
///   frame pairs are scored, against reprojected ground truth and, when
///   available, against landmark identities.
pub fn cmd_eval(kind: EvalKind, pred: &Path, gt_dir: &Path) -> Result<String> {
    let gt_seq = io::read_sequence(gt_dir)?;
    let gt = gt_seq.gt.as_ref().ok_or_else(|| missing_gt(gt_dir, "poses"))?;
    let in_run = |name: &str| if pred.is_dir() { pred.join(name) } else { pred.to_path_buf() };
    match kind {
        EvalKind::Depth => {
            if gt.depth.is_empty() {
                return Err(missing_gt(gt_dir, "depth"));
            }
            let pred_seq = io::read_sequence(pred)?;
            if pred_seq.frames.len() != gt.depth.len() {
                return Err(ReconError::DimensionMismatch(format!(
                    "{} predicted frames but {} ground-truth depth maps",
                    pred_seq.frames.len(),
                    gt.depth.len()
                )));
            }
            let per_frame: Vec<eval::DepthMetrics> = pred_seq
                .frames
                .iter()
                .zip(&gt.depth)
                .map(|(f, g)| eval::depth_metrics(&f.depth, g))
                .collect::<Result<_>>()?;
            let mean = eval::mean_depth_metrics(&per_frame)?;
            let mut s = format!("frames={}\n", per_frame.len());
            s.push_str(&mean.to_kv());
            s.push_str(&format!(
                "table=abs_rel,sq_rel,rmse,rmse_log,d1,d2,d3\nrow={:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}\n",
                mean.abs_rel, mean.sq_rel, mean.rmse, mean.rmse_log, mean.delta1, mean.delta2, mean.delta3
            ));
            Ok(s)
        }
        EvalKind::Ate => {
            let traj = io::read_trajectory(&in_run("trajectory.txt"))?;
            let mut gt_traj = Vec::with_capacity(traj.len());
            for (id, _) in &traj {
                let p = gt
                    .poses
                    .get(*id)
                    .ok_or_else(|| ReconError::InvalidInput(format!("frame {id} has no ground-truth pose")))?;
                gt_traj.push((*id, *p));
            }
            let r = eval::ate(&traj, &gt_traj)?;
            Ok(format!("frames={}\n{}", traj.len(), r.to_kv()))
        }
        EvalKind::Matching => {
            let path = in_run("matches.txt");
            let pred_matches = io::parse_matches(&io::read_text(&path)?, &path)?;
            if gt.depth.is_empty() {
                return Err(missing_gt(gt_dir, "depth"));
            }
            let frames: Vec<GtFrame> = gt_seq
                .frames
                .iter()
                .zip(&gt.depth)
                .zip(&gt.poses)
                .map(|((f, d), p)| GtFrame { keypoints: &f.keypoints, depth: d, pose: p })
                .collect();
            let pairs: Vec<(usize, usize)> = (1..frames.len()).map(|t| (t - 1, t)).collect();
            let r = eval::correspondence_pr(&pred_matches, &frames, &pairs, &gt_seq.intrinsics)?;
            let mut s = format!("pairs={}\n", pairs.len());
            s.push_str(&r.to_kv());
            if gt.landmarks.iter().any(|l| l.iter().any(Option::is_some)) {
                let lm: Vec<FrameMatch> = pairs
                    .iter()
                    .flat_map(|&(a, b)| eval::landmark_matches(a, &gt.landmarks[a], b, &gt.landmarks[b]))
                    .collect();
                let wanted: BTreeSet<(usize, usize)> = pairs.iter().copied().collect();
                let scored: Vec<FrameMatch> =
                    pred_matches.iter().filter(|m| wanted.contains(&(m.frame_a, m.frame_b))).copied().collect();
                let r = eval::precision_recall(&scored, &lm);
                for line in r.to_kv().lines() {
                    s.push_str(&format!("landmark_{line}\n"));
                }
            }
            Ok(s)
        }
    }
}

/// Generates a named synthetic scenario into `out`.
pub fn cmd_synth(name: &str, seed: u64, out: &Path) -> Result<Sequence> {
    let (params, spec) = scenario(name, seed)?;
    let scene = TubeScene::new(params)?;
    let seq = generate_sequence(&scene, &spec)?;
    io::write_sequence(out, &seq)?;
    Ok(seq)
}

/// Mean distance from each pose of the second half of a forward-backward
/// trajectory to the nearest pose of the first half.
pub fn half_alignment_distance(poses: &BTreeMap<usize, RigidPose>, frames: usize) -> Option<f64> {
    let half = frames / 2;
    let first: Vec<Vec3> = poses.range(..half).map(|(_, p)| p.translation).collect();
    let second: Vec<Vec3> = poses.range(half..).map(|(_, p)| p.translation).collect();
    if first.is_empty() || second.is_empty() {
        return None;
    }
    let total: f64 = second.iter().map(|b| first.iter().map(|a| (a - b).norm()).fold(f64::INFINITY, f64::min)).sum();
    Some(total / second.len() as f64)
}
