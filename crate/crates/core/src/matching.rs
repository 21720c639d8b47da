//! Descriptor matching, geometric outlier filtering and validated rigid
//! transform estimation between two frames.

use nalgebra::{Matrix3, SymmetricEigen};

use crate::error::{ReconError, Result};
use crate::geometry::{DepthRaster, Intrinsics, RigidPose, Vec3};

pub const DESCRIPTOR_DIM: usize = 128;

/// Unit-norm feature descriptor.
#[derive(Clone, PartialEq)]
pub struct Descriptor([f32; DESCRIPTOR_DIM]);

impl std::fmt::Debug for Descriptor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Descriptor([{:.4}, {:.4}, ..])", self.0[0], self.0[1])
    }
}

impl Descriptor {
    pub const NORM_TOL: f64 = 1e-6;

    /// Accepts an already normalised vector.
    pub fn new(values: [f32; DESCRIPTOR_DIM]) -> Result<Self> {
        let d = Descriptor(values);
        let n = d.norm();
        if (n - 1.0).abs() > Self::NORM_TOL {
            return Err(ReconError::InvalidInput(format!("descriptor norm {n} is not 1")));
        }
        Ok(d)
    }

    /// L2-normalises `raw`; rejects zero or non-finite vectors.
    pub fn from_unnormalized(raw: &[f64]) -> Result<Self> {
        if raw.len() != DESCRIPTOR_DIM {
            return Err(ReconError::DimensionMismatch(format!(
                "descriptor has {} entries, expected {DESCRIPTOR_DIM}",
                raw.len()
            )));
        }
        let n = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(n > 0.0) || !n.is_finite() {
            return Err(ReconError::InvalidInput("cannot normalise a zero descriptor".into()));
        }
        let mut out = [0f32; DESCRIPTOR_DIM];
        for (o, v) in out.iter_mut().zip(raw) {
            *o = (v / n) as f32;
        }
        Ok(Descriptor(out))
    }

    /// No norm check; for tests and for data that is validated later.
    pub fn from_raw_unchecked(values: [f32; DESCRIPTOR_DIM]) -> Self {
        Descriptor(values)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    #[inline]
    pub fn get(&self, i: usize) -> f64 {
        self.0[i] as f64
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
    }

    /// Cosine similarity for unit vectors.
    #[inline]
    pub fn dot(&self, other: &Descriptor) -> f64 {
        // Independent lanes so the loop vectorises.
        let mut acc = [0f32; 8];
        for (a, b) in self.0.chunks_exact(8).zip(other.0.chunks_exact(8)) {
            for l in 0..8 {
                acc[l] += a[l] * b[l];
            }
        }
        acc.iter().map(|&v| v as f64).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    /// Position of the keypoint in the frame's feature list.
    pub index: usize,
    pub uv: [f64; 2],
    pub depth: f64,
    pub point: Vec3,
}

/// Keypoints that have a valid depth, with their descriptors.
#[derive(Debug, Clone, Default)]
pub struct FrameFeatures {
    pub keypoints: Vec<Keypoint>,
    pub descriptors: Vec<Descriptor>,
}

impl FrameFeatures {
    /// Samples depth at each keypoint (inverse-depth bilinear) and
    /// backprojects it. Keypoints without four valid depth neighbours are
    /// dropped.
    pub fn from_raw(uv: &[[f64; 2]], descriptors: &[Descriptor], depth: &DepthRaster, k: &Intrinsics) -> Result<Self> {
        if uv.len() != descriptors.len() {
            return Err(ReconError::DimensionMismatch(format!(
                "{} keypoints but {} descriptors",
                uv.len(),
                descriptors.len()
            )));
        }
        depth.check_shape(k)?;
        let mut out = FrameFeatures::default();
        for (index, (&p, d)) in uv.iter().zip(descriptors).enumerate() {
            let Some(z) = depth.sample_inverse_bicubic(p) else { continue };
            out.keypoints.push(Keypoint { index, uv: p, depth: z, point: k.backproject(p, z)? });
            out.descriptors.push(d.clone());
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    /// Index into the first frame's `keypoints`.
    pub a: usize,
    /// Index into the second frame's `keypoints`.
    pub b: usize,
    pub similarity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterConfig {
    pub min_matches: usize,
    /// Inlier threshold on the 3D residual `|T p_a - p_b|`, cm.
    pub max_residual_cm: f64,
    /// Upper bound on the condition number of the inlier point covariance.
    pub cond_threshold: f64,
    /// Pairwise distance tolerance of the keypoint correspondence filter, cm.
    pub kpf_distance_tol_cm: f64,
    pub min_span_area_fraction: f64,
    pub similarity_floor: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            min_matches: 10,
            max_residual_cm: 0.02,
            cond_threshold: 100.0,
            kpf_distance_tol_cm: 0.5,
            min_span_area_fraction: 0.01,
            similarity_floor: 0.5,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.min_matches >= 3
            && self.max_residual_cm > 0.0
            && self.cond_threshold >= 1.0
            && self.kpf_distance_tol_cm > 0.0
            && self.min_span_area_fraction >= 0.0
            && (-1.0..=1.0).contains(&self.similarity_floor);
        if ok {
            Ok(())
        } else {
            Err(ReconError::Config(format!("invalid filter parameters {self:?}")))
        }
    }
}

/// Row-major `rows x cols` cosine similarities.
#[cfg(feature = "parallel")]
fn similarities(rows: &[Descriptor], cols: &[Descriptor]) -> Vec<f64> {
    use rayon::prelude::*;
    rows.par_iter().flat_map_iter(|r| cols.iter().map(|c| r.dot(c))).collect()
}

#[cfg(not(feature = "parallel"))]
fn similarities(rows: &[Descriptor], cols: &[Descriptor]) -> Vec<f64> {
    rows.iter().flat_map(|r| cols.iter().map(|c| r.dot(c))).collect()
}

/// Mutual nearest neighbours under cosine similarity, kept when the
/// similarity reaches `cfg.similarity_floor`.
pub fn match_descriptors(a: &FrameFeatures, b: &FrameFeatures, cfg: &FilterConfig) -> Vec<Match> {
    let (n, m) = (a.descriptors.len(), b.descriptors.len());
    if n == 0 || m == 0 {
        return Vec::new();
    }
    let sim = similarities(&a.descriptors, &b.descriptors);
    // First maximum wins ties in both directions.
    let mut fwd = vec![0usize; n];
    let mut bwd = vec![0usize; m];
    for i in 0..n {
        for j in 0..m {
            let s = sim[i * m + j];
            if s > sim[i * m + fwd[i]] {
                fwd[i] = j;
            }
            if s > sim[bwd[j] * m + j] {
                bwd[j] = i;
            }
        }
    }
    fwd.iter()
        .enumerate()
        .filter_map(|(i, &j)| {
            let s = sim[i * m + j];
            (bwd[j] == i && s >= cfg.similarity_floor).then_some(Match { a: i, b: j, similarity: s })
        })
        .collect()
}

/// Greedy pairwise-rigidity pruning. Two matches are inconsistent when the
/// distance between their points differs by more than the tolerance across
/// the two frames; the match with the most inconsistencies is removed until
/// none remain. Ties go to the lower similarity, then the later match.
pub fn keypoint_correspondence_filter(
    matches: &[Match],
    a: &FrameFeatures,
    b: &FrameFeatures,
    cfg: &FilterConfig,
) -> Vec<Match> {
    let n = matches.len();
    let pa: Vec<Vec3> = matches.iter().map(|m| a.keypoints[m.a].point).collect();
    let pb: Vec<Vec3> = matches.iter().map(|m| b.keypoints[m.b].point).collect();
    let mut conflicts: Vec<Vec<usize>> = vec![Vec::new(); n];
    for i in 0..n {
        for j in i + 1..n {
            let da = (pa[i] - pa[j]).norm();
            let db = (pb[i] - pb[j]).norm();
            if (da - db).abs() > cfg.kpf_distance_tol_cm {
                conflicts[i].push(j);
                conflicts[j].push(i);
            }
        }
    }
    let mut count: Vec<usize> = conflicts.iter().map(Vec::len).collect();
    let mut alive = vec![true; n];
    loop {
        let mut worst: Option<usize> = None;
        for i in (0..n).filter(|&i| alive[i] && count[i] > 0) {
            worst = match worst {
                None => Some(i),
                Some(w) => {
                    let better =
                        count[i] > count[w] || (count[i] == count[w] && matches[i].similarity <= matches[w].similarity);
                    Some(if better { i } else { w })
                }
            };
        }
        let Some(w) = worst else { break };
        alive[w] = false;
        for &o in &conflicts[w] {
            if alive[o] {
                count[o] -= 1;
            }
        }
    }
    matches.iter().zip(&alive).filter(|(_, &keep)| keep).map(|(m, _)| *m).collect()
}

fn covariance(points: &[Vec3]) -> (Vec3, Matrix3<f64>) {
    let n = points.len() as f64;
    let mean = points.iter().fold(Vec3::zeros(), |acc, p| acc + p) / n;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p - mean;
        cov += d * d.transpose();
    }
    (mean, cov / n)
}

/// Ratio of the largest to the smallest eigenvalue of the point covariance;
/// infinite for rank-deficient sets.
pub fn covariance_condition_number(points: &[Vec3]) -> f64 {
    if points.len() < 2 {
        return f64::INFINITY;
    }
    let (_, cov) = covariance(points);
    let eig = SymmetricEigen::new(cov).eigenvalues;
    let max = eig.max();
    let min = eig.min();
    if min <= max * 1e-15 || min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Bounding area of the points along their two principal axes.
pub fn principal_span_area(points: &[Vec3]) -> f64 {
    if points.len() < 3 {
        return 0.0;
    }
    let (mean, cov) = covariance(points);
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let axes = [eig.eigenvectors.column(order[0]).into_owned(), eig.eigenvectors.column(order[1]).into_owned()];
    let mut extent = [0.0; 2];
    for (k, axis) in axes.iter().enumerate() {
        let (lo, hi) = points.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
            let s = (p - mean).dot(axis);
            (lo.min(s), hi.max(s))
        });
        extent[k] = hi - lo;
    }
    extent[0] * extent[1]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceAreaCheck {
    pub passed: bool,
    pub area_a: f64,
    pub area_b: f64,
    pub required_a: f64,
    pub required_b: f64,
}

/// Rejects match sets whose points span too little surface. The required
/// area in each frame is `min_span_area_fraction` of the image footprint at
/// the mean matched depth.
pub fn surface_area_filter(
    matches: &[Match],
    a: &FrameFeatures,
    b: &FrameFeatures,
    k: &Intrinsics,
    cfg: &FilterConfig,
) -> SurfaceAreaCheck {
    let footprint = |pts: &[Vec3]| {
        let z = pts.iter().map(|p| p.z).sum::<f64>() / pts.len().max(1) as f64;
        (k.width as f64 * z / k.fx) * (k.height as f64 * z / k.fy)
    };
    if matches.len() < 3 {
        return SurfaceAreaCheck { passed: false, area_a: 0.0, area_b: 0.0, required_a: 0.0, required_b: 0.0 };
    }
    let pa: Vec<Vec3> = matches.iter().map(|m| a.keypoints[m.a].point).collect();
    let pb: Vec<Vec3> = matches.iter().map(|m| b.keypoints[m.b].point).collect();
    let area_a = principal_span_area(&pa);
    let area_b = principal_span_area(&pb);
    let required_a = cfg.min_span_area_fraction * footprint(&pa);
    let required_b = cfg.min_span_area_fraction * footprint(&pb);
    SurfaceAreaCheck { passed: area_a >= required_a && area_b >= required_b, area_a, area_b, required_a, required_b }
}

/// Least-squares rigid transform `T` minimising `sum |T src_i - dst_i|^2`
/// (SVD of the cross-covariance with reflection correction).
pub fn estimate_rigid(src: &[Vec3], dst: &[Vec3]) -> Result<RigidPose> {
    if src.len() != dst.len() {
        return Err(ReconError::DimensionMismatch(format!("{} vs {} points", src.len(), dst.len())));
    }
    if src.len() < 3 {
        return Err(ReconError::Degenerate(format!("{} point pairs, need at least 3", src.len())));
    }
    let n = src.len() as f64;
    let cs = src.iter().fold(Vec3::zeros(), |a, p| a + p) / n;
    let cd = dst.iter().fold(Vec3::zeros(), |a, p| a + p) / n;
    let mut h = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (s - cs) * (d - cd).transpose();
    }
    let svd = h.svd(true, true);
    let mut sv = svd.singular_values;
    sv.as_mut_slice().sort_by(|a, b| b.total_cmp(a));
    if !(sv[0] > 0.0) || sv[1] <= 1e-12 * sv[0] {
        return Err(ReconError::Degenerate("cross-covariance has rank < 2".into()));
    }
    let u = svd.u.unwrap();
    let v = svd.v_t.unwrap().transpose();
    let sign = (v * u.transpose()).determinant().signum();
    let d = Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, sign));
    let r = v * d * u.transpose();
    let t = cd - r * cs;
    Ok(RigidPose { rotation: r, translation: t })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Validation {
    pub valid: bool,
    pub inliers: Vec<Match>,
    pub condition_number: f64,
    pub surface: SurfaceAreaCheck,
    pub rms_residual: f64,
}

/// Accepts a transform when enough matches have a residual under
/// `max_residual_cm`, the inlier source points are well conditioned and the
/// inliers span enough surface in both frames.
pub fn validate_transform(
    matches: &[Match],
    a: &FrameFeatures,
    b: &FrameFeatures,
    transform: &RigidPose,
    k: &Intrinsics,
    cfg: &FilterConfig,
) -> Validation {
    let mut inliers = Vec::new();
    let mut sq = 0.0;
    for m in matches {
        let r = (transform.transform_point(&a.keypoints[m.a].point) - b.keypoints[m.b].point).norm();
        if r < cfg.max_residual_cm {
            inliers.push(*m);
            sq += r * r;
        }
    }
    let pts: Vec<Vec3> = inliers.iter().map(|m| a.keypoints[m.a].point).collect();
    let condition_number = covariance_condition_number(&pts);
    let surface = surface_area_filter(&inliers, a, b, k, cfg);
    let valid = inliers.len() >= cfg.min_matches && condition_number < cfg.cond_threshold && surface.passed;
    let rms_residual = if inliers.is_empty() { f64::INFINITY } else { (sq / inliers.len() as f64).sqrt() };
    Validation { valid, inliers, condition_number, surface, rms_residual }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PairDiagnostics {
    pub raw_matches: usize,
    /// Matches surviving the keypoint correspondence filter.
    pub filtered_matches: usize,
    pub inliers: usize,
    pub condition_number: f64,
    pub surface_passed: bool,
    pub rms_residual: f64,
}

/// Filtered 3D-3D matches between frames `i` and `j` with the estimated
/// `T_ij` (frame-i coordinates to frame-j coordinates). When `valid`,
/// `matches` holds only the inliers of `transform`.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceSet {
    pub i: usize,
    pub j: usize,
    pub matches: Vec<Match>,
    pub transform: Option<RigidPose>,
    pub valid: bool,
    pub diagnostics: PairDiagnostics,
}

impl CorrespondenceSet {
    /// Inlier points in frame-i coordinates.
    pub fn source_points(&self, a: &FrameFeatures) -> Vec<Vec3> {
        self.matches.iter().map(|m| a.keypoints[m.a].point).collect()
    }
}

/// Full pair chain: mutual matching, keypoint correspondence filter, rigid
/// estimate, inlier refit and validation.
pub fn register_pair(
    i: usize,
    a: &FrameFeatures,
    j: usize,
    b: &FrameFeatures,
    k: &Intrinsics,
    cfg: &FilterConfig,
) -> CorrespondenceSet {
    let raw = match_descriptors(a, b, cfg);
    let filtered = keypoint_correspondence_filter(&raw, a, b, cfg);
    let mut diagnostics = PairDiagnostics {
        raw_matches: raw.len(),
        filtered_matches: filtered.len(),
        condition_number: f64::INFINITY,
        rms_residual: f64::INFINITY,
        ..Default::default()
    };
    let fit = |ms: &[Match]| {
        let src: Vec<Vec3> = ms.iter().map(|m| a.keypoints[m.a].point).collect();
        let dst: Vec<Vec3> = ms.iter().map(|m| b.keypoints[m.b].point).collect();
        estimate_rigid(&src, &dst)
    };
    let invalid =
        |diagnostics, matches| CorrespondenceSet { i, j, matches, transform: None, valid: false, diagnostics };
    let Ok(mut t) = fit(&filtered) else { return invalid(diagnostics, filtered) };
    let mut val = validate_transform(&filtered, a, b, &t, k, cfg);
    if val.inliers.len() >= 3 && val.inliers.len() < filtered.len() {
        if let Ok(t2) = fit(&val.inliers) {
            let val2 = validate_transform(&filtered, a, b, &t2, k, cfg);
            if val2.inliers.len() >= val.inliers.len() {
                t = t2;
                val = val2;
            }
        }
    }
    diagnostics.inliers = val.inliers.len();
    diagnostics.condition_number = val.condition_number;
    diagnostics.surface_passed = val.surface.passed;
    diagnostics.rms_residual = val.rms_residual;
    if !val.valid {
        return CorrespondenceSet { i, j, matches: filtered, transform: Some(t), valid: false, diagnostics };
    }
    CorrespondenceSet { i, j, matches: val.inliers, transform: Some(t), valid: true, diagnostics }
}
