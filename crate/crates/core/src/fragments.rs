//! Fragments of consecutive frames and the keyframe connectivity graph.
//!
//! A fragment is anchored by its first frame (the keyframe). Keyframes are
//! linked by validated transforms; a keyframe that links to nothing is kept
//! as a candidate so that a later keyframe can reconnect it.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{ReconError, Result};
use crate::geometry::{DepthRaster, Intrinsics, RigidPose, Vec3};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FragmentConfig {
    pub min_consecutive_corrs: usize,
    pub min_frustum_overlap: f64,
    /// Pixel stride used when sampling depth for the overlap estimate.
    pub frustum_stride: usize,
    /// Relative depth agreement for a sample to count as covisible.
    pub depth_agreement: f64,
}

impl Default for FragmentConfig {
    fn default() -> Self {
        FragmentConfig {
            min_consecutive_corrs: 100,
            min_frustum_overlap: 0.85,
            frustum_stride: 4,
            depth_agreement: 0.1,
        }
    }
}

impl FragmentConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.min_consecutive_corrs > 0
            && self.min_frustum_overlap > 0.0
            && self.min_frustum_overlap <= 1.0
            && self.frustum_stride > 0
            && self.depth_agreement > 0.0;
        if ok {
            Ok(())
        } else {
            Err(ReconError::Config(format!("invalid fragment parameters {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fragment {
    pub id: usize,
    pub keyframe: usize,
    /// Consecutive frame ids, starting with the keyframe.
    pub members: Vec<usize>,
    /// Camera-to-keyframe pose of each member, aligned with `members`.
    pub local_poses: Vec<RigidPose>,
    pub active: bool,
}

impl Fragment {
    pub fn new(id: usize, keyframe: usize) -> Self {
        Fragment { id, keyframe, members: vec![keyframe], local_poses: vec![RigidPose::identity()], active: true }
    }

    pub fn last(&self) -> usize {
        *self.members.last().expect("fragment has its keyframe")
    }

    pub fn last_local_pose(&self) -> &RigidPose {
        self.local_poses.last().expect("fragment has its keyframe")
    }

    pub fn push(&mut self, frame: usize, local_pose: RigidPose) -> Result<()> {
        if frame != self.last() + 1 {
            return Err(ReconError::InvalidInput(format!(
                "frame {frame} does not follow frame {} of fragment {}",
                self.last(),
                self.id
            )));
        }
        self.members.push(frame);
        self.local_poses.push(local_pose);
        Ok(())
    }
}

/// Fraction of the frame's valid depth samples that land inside the
/// keyframe image with a keyframe depth within `depth_agreement` (relative).
/// `frame_to_kf` maps frame-camera points to keyframe-camera points.
pub fn frustum_overlap(
    frame_depth: &DepthRaster,
    kf_depth: &DepthRaster,
    frame_to_kf: &RigidPose,
    k: &Intrinsics,
    cfg: &FragmentConfig,
) -> Result<f64> {
    frame_depth.check_shape(k)?;
    kf_depth.check_shape(k)?;
    let stride = cfg.frustum_stride.max(1);
    let (mut total, mut seen) = (0usize, 0usize);
    for y in (0..k.height).step_by(stride) {
        for x in (0..k.width).step_by(stride) {
            if !frame_depth.is_valid_at(x, y) {
                continue;
            }
            total += 1;
            let p = k.backproject_unchecked([x as f64, y as f64], frame_depth.get(x, y));
            let q = frame_to_kf.transform_point(&p);
            let Some(uv) = k.project(&q) else { continue };
            let Some(d) = keyframe_depth_at(kf_depth, uv) else { continue };
            if (q.z - d).abs() <= cfg.depth_agreement * d {
                seen += 1;
            }
        }
    }
    if total == 0 {
        return Err(ReconError::Empty("frame has no valid depth samples".into()));
    }
    Ok(seen as f64 / total as f64)
}

/// Inverse-depth bilinear interpolation over the valid pixels among the four
/// around `uv`, so samples next to invalid pixels still get a depth.
fn keyframe_depth_at(depth: &DepthRaster, uv: [f64; 2]) -> Option<f64> {
    let (w, h) = (depth.width, depth.height);
    if w < 2 || h < 2 {
        return depth.sample_nearest(uv);
    }
    let u = uv[0].clamp(0.0, (w - 1) as f64);
    let v = uv[1].clamp(0.0, (h - 1) as f64);
    let (x0, y0) = ((u.floor() as usize).min(w - 2), (v.floor() as usize).min(h - 2));
    let (ax, ay) = (u - x0 as f64, v - y0 as f64);
    let taps = [
        (x0, y0, (1.0 - ax) * (1.0 - ay)),
        (x0 + 1, y0, ax * (1.0 - ay)),
        (x0, y0 + 1, (1.0 - ax) * ay),
        (x0 + 1, y0 + 1, ax * ay),
    ];
    let (mut inv, mut wsum) = (0.0, 0.0);
    for (x, y, wt) in taps {
        if depth.is_valid_at(x, y) {
            inv += wt / depth.get(x, y);
            wsum += wt;
        }
    }
    (wsum > 1e-9).then(|| wsum / inv)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FragmentDecision {
    Append,
    NewFragment,
}

/// `overlap` is `None` when no relative pose to the keyframe is available,
/// which always starts a new fragment.
pub fn should_create_fragment(
    consecutive_corrs: usize,
    overlap: Option<f64>,
    cfg: &FragmentConfig,
) -> FragmentDecision {
    match overlap {
        Some(o) if consecutive_corrs >= cfg.min_consecutive_corrs && o >= cfg.min_frustum_overlap => {
            FragmentDecision::Append
        }
        _ => FragmentDecision::NewFragment,
    }
}

/// A prior keyframe with its registration result, if any.
type Attempt = (usize, Option<(RigidPose, Vec<Vec3>)>);

/// A validated transform between two keyframes.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyframeEdge {
    pub from: usize,
    pub to: usize,
    /// Maps `from`-camera points to `to`-camera points.
    pub transform: RigidPose,
    /// Inlier points in `from`-camera coordinates.
    pub points: Vec<Vec3>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConnectivityGraph {
    /// Keyframe ids in registration order.
    pub keyframes: Vec<usize>,
    pub edges: Vec<KeyframeEdge>,
    /// Keyframes without any edge.
    pub candidates: BTreeSet<usize>,
    /// Keyframes with too few usable features to ever form an edge.
    pub untrackable: BTreeSet<usize>,
    /// Largest number of trackable candidates seen at any time.
    pub peak_lone: usize,
}

impl ConnectivityGraph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Tries `matcher(prior, kf)` against every earlier keyframe and keeps
    /// every link it returns (transform prior-to-kf, inlier points in prior
    /// coordinates). Untrackable keyframes are recorded without
    /// attempts. Returns the number of edges added.
    pub fn register_keyframe<F>(&mut self, kf: usize, trackable: bool, matcher: F) -> Result<usize>
    where
        F: Fn(usize, usize) -> Option<(RigidPose, Vec<Vec3>)> + Sync,
    {
        if self.keyframes.contains(&kf) {
            return Err(ReconError::InvalidInput(format!("keyframe {kf} registered twice")));
        }
        let priors: Vec<usize> = self.keyframes.iter().copied().filter(|p| !self.untrackable.contains(p)).collect();
        self.keyframes.push(kf);
        if !trackable {
            self.untrackable.insert(kf);
            self.candidates.insert(kf);
            return Ok(0);
        }
        let attempt = |&p: &usize| (p, matcher(p, kf));
        #[cfg(feature = "parallel")]
        let results: Vec<Attempt> = {
            use rayon::prelude::*;
            priors.par_iter().map(attempt).collect()
        };
        #[cfg(not(feature = "parallel"))]
        let results: Vec<Attempt> = priors.iter().map(attempt).collect();
        let mut added = 0;
        for (p, link) in results {
            let Some((transform, points)) = link else { continue };
            self.edges.push(KeyframeEdge { from: p, to: kf, transform, points });
            self.candidates.remove(&p);
            added += 1;
        }
        if added == 0 {
            self.candidates.insert(kf);
        }
        if !priors.is_empty() {
            self.peak_lone = self.peak_lone.max(self.lone().len());
        }
        Ok(added)
    }

    /// Trackable keyframes that have no edge.
    pub fn lone(&self) -> Vec<usize> {
        self.candidates.difference(&self.untrackable).copied().collect()
    }

    /// Connected components as sorted keyframe lists, ordered by their
    /// earliest keyframe.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let mut parent: BTreeMap<usize, usize> = self.keyframes.iter().map(|&k| (k, k)).collect();
        fn find(parent: &mut BTreeMap<usize, usize>, x: usize) -> usize {
            let mut r = x;
            while parent[&r] != r {
                r = parent[&r];
            }
            let mut c = x;
            while parent[&c] != r {
                let n = parent[&c];
                parent.insert(c, r);
                c = n;
            }
            r
        }
        for e in &self.edges {
            let (a, b) = (find(&mut parent, e.from), find(&mut parent, e.to));
            if a != b {
                parent.insert(a.max(b), a.min(b));
            }
        }
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for &k in &self.keyframes {
            let r = find(&mut parent, k);
            groups.entry(r).or_default().push(k);
        }
        let mut out: Vec<Vec<usize>> = groups.into_values().collect();
        for g in &mut out {
            g.sort_unstable();
        }
        out.sort_by_key(|g| g[0]);
        out
    }

    /// Component holding the first registered keyframe.
    pub fn root_component(&self) -> Vec<usize> {
        let Some(&root) = self.keyframes.first() else { return Vec::new() };
        self.components().into_iter().find(|g| g.contains(&root)).unwrap_or_default()
    }

    /// Components other than the root one that contain a trackable keyframe.
    pub fn disjoint_components(&self) -> usize {
        let root = self.keyframes.first().copied();
        self.components()
            .iter()
            .filter(|g| !root.is_some_and(|r| g.contains(&r)) && g.iter().any(|k| !self.untrackable.contains(k)))
            .count()
    }

    /// One `kf_a kf_b` line per edge.
    pub fn edge_list_text(&self) -> String {
        self.edges.iter().map(|e| format!("{} {}\n", e.from, e.to)).collect()
    }
}
