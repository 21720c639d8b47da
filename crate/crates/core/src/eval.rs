//! Depth, correspondence and trajectory metrics.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use nalgebra::Matrix3;

use crate::error::{ReconError, Result};
use crate::geometry::{DepthRaster, Intrinsics, RigidPose, Vec3};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    /// Scale applied to the prediction (median ratio).
    pub scale: f64,
    pub pixels: usize,
}

impl DepthMetrics {
    pub fn to_kv(&self) -> String {
        format!(
            "abs_rel={}\nsq_rel={}\nrmse={}\nrmse_log={}\ndelta1={}\ndelta2={}\ndelta3={}\nscale={}\npixels={}\n",
            self.abs_rel,
            self.sq_rel,
            self.rmse,
            self.rmse_log,
            self.delta1,
            self.delta2,
            self.delta3,
            self.scale,
            self.pixels
        )
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Standard monocular depth metrics after per-image median scaling, over
/// pixels valid in both rasters.
pub fn depth_metrics(pred: &DepthRaster, gt: &DepthRaster) -> Result<DepthMetrics> {
    if pred.width != gt.width || pred.height != gt.height {
        return Err(ReconError::DimensionMismatch(format!(
            "pred {}x{} vs gt {}x{}",
            pred.width, pred.height, gt.width, gt.height
        )));
    }
    let pairs: Vec<(f64, f64)> = pred
        .values
        .iter()
        .zip(&gt.values)
        .filter(|(p, g)| crate::geometry::is_valid_depth(**p) && crate::geometry::is_valid_depth(**g))
        .map(|(p, g)| (*p, *g))
        .collect();
    if pairs.is_empty() {
        return Err(ReconError::Empty("no pixel is valid in both depth maps".into()));
    }
    let scale = median(&mut pairs.iter().map(|x| x.1).collect::<Vec<_>>())
        / median(&mut pairs.iter().map(|x| x.0).collect::<Vec<_>>());
    let n = pairs.len() as f64;
    let (mut abs_rel, mut sq_rel, mut sq, mut sq_log) = (0.0, 0.0, 0.0, 0.0);
    let mut within = [0usize; 3];
    for &(p, g) in &pairs {
        let p = p * scale;
        let d = p - g;
        abs_rel += d.abs() / g;
        sq_rel += d * d / g;
        sq += d * d;
        sq_log += (p.ln() - g.ln()).powi(2);
        let ratio = (p / g).max(g / p);
        for (k, w) in within.iter_mut().enumerate() {
            if ratio < 1.25f64.powi(k as i32 + 1) {
                *w += 1;
            }
        }
    }
    Ok(DepthMetrics {
        abs_rel: abs_rel / n,
        sq_rel: sq_rel / n,
        rmse: (sq / n).sqrt(),
        rmse_log: (sq_log / n).sqrt(),
        delta1: within[0] as f64 / n,
        delta2: within[1] as f64 / n,
        delta3: within[2] as f64 / n,
        scale,
        pixels: pairs.len(),
    })
}

/// Per-image metrics averaged over images (scale is the mean scale, pixels
/// the total).
pub fn mean_depth_metrics(per_frame: &[DepthMetrics]) -> Result<DepthMetrics> {
    if per_frame.is_empty() {
        return Err(ReconError::Empty("no depth metrics to average".into()));
    }
    let n = per_frame.len() as f64;
    let mean = |f: fn(&DepthMetrics) -> f64| per_frame.iter().map(f).sum::<f64>() / n;
    Ok(DepthMetrics {
        abs_rel: mean(|m| m.abs_rel),
        sq_rel: mean(|m| m.sq_rel),
        rmse: mean(|m| m.rmse),
        rmse_log: mean(|m| m.rmse_log),
        delta1: mean(|m| m.delta1),
        delta2: mean(|m| m.delta2),
        delta3: mean(|m| m.delta3),
        scale: mean(|m| m.scale),
        pixels: per_frame.iter().map(|m| m.pixels).sum(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FrameMatch {
    pub frame_a: usize,
    pub kp_a: usize,
    pub frame_b: usize,
    pub kp_b: usize,
}

/// Ground-truth data of one frame: keypoint pixels, true depth and pose.
#[derive(Debug, Clone, Copy)]
pub struct GtFrame<'a> {
    pub keypoints: &'a [[f64; 2]],
    pub depth: &'a DepthRaster,
    pub pose: &'a RigidPose,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrReport {
    /// `None` when nothing was predicted.
    pub precision: Option<f64>,
    /// `None` when the ground-truth set is empty.
    pub recall: Option<f64>,
    pub true_positives: usize,
    pub predicted: usize,
    pub ground_truth: usize,
}

impl PrReport {
    pub fn to_kv(&self) -> String {
        let f = |v: Option<f64>| v.map_or("undefined".to_string(), |x| x.to_string());
        let mut s = String::new();
        let _ = writeln!(s, "precision={}", f(self.precision));
        let _ = writeln!(s, "recall={}", f(self.recall));
        let _ = writeln!(s, "true_positives={}", self.true_positives);
        let _ = writeln!(s, "predicted={}", self.predicted);
        let _ = writeln!(s, "ground_truth={}", self.ground_truth);
        s
    }
}

/// Precision and recall of a predicted match set against a reference set.
/// Duplicates are ignored.
pub fn precision_recall(pred: &[FrameMatch], gt: &[FrameMatch]) -> PrReport {
    let p: BTreeSet<_> = pred.iter().copied().collect();
    let g: BTreeSet<_> = gt.iter().copied().collect();
    let tp = p.intersection(&g).count();
    PrReport {
        precision: (!p.is_empty()).then(|| tp as f64 / p.len() as f64),
        recall: (!g.is_empty()).then(|| tp as f64 / g.len() as f64),
        true_positives: tp,
        predicted: p.len(),
        ground_truth: g.len(),
    }
}

fn world_points(f: &GtFrame, k: &Intrinsics) -> Vec<Option<Vec3>> {
    f.keypoints
        .iter()
        .map(|&uv| {
            let z = f.depth.sample_inverse_bicubic(uv)?;
            Some(f.pose.transform_point(&k.backproject(uv, z).ok()?))
        })
        .collect()
}

/// Bounding-box diagonal of the valid depth points of both frames (world).
pub fn scene_diameter(a: &GtFrame, b: &GtFrame, k: &Intrinsics) -> f64 {
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    for f in [a, b] {
        for y in 0..f.depth.height {
            for x in 0..f.depth.width {
                if f.depth.is_valid_at(x, y) {
                    let p = f.pose.transform_point(&k.backproject_unchecked([x as f64, y as f64], f.depth.get(x, y)));
                    lo = lo.inf(&p);
                    hi = hi.sup(&p);
                }
            }
        }
    }
    if lo.x.is_finite() {
        (hi - lo).norm()
    } else {
        0.0
    }
}

/// Ground-truth matches between two frames: keypoints of `a` are lifted
/// with true depth and pose, checked for visibility in `b` (inside the
/// image, in front of the camera and agreeing with `b`'s true depth), and
/// paired mutually with the nearest keypoint of `b` within 1% of the scene
/// diameter.
pub fn ground_truth_matches(
    frame_a: usize,
    a: &GtFrame,
    frame_b: usize,
    b: &GtFrame,
    k: &Intrinsics,
) -> Vec<FrameMatch> {
    let tol = 0.01 * scene_diameter(a, b, k);
    let pa = world_points(a, k);
    let pb = world_points(b, k);
    let b_inv = b.pose.inverse();
    let visible = |p: &Vec3| {
        let q = b_inv.transform_point(p);
        let Some(uv) = k.project(&q) else { return false };
        match b.depth.sample_inverse_bilinear(uv).or_else(|| b.depth.sample_nearest(uv)) {
            Some(d) => (d - q.z).abs() <= tol,
            None => false,
        }
    };
    let nearest = |p: &Vec3, set: &[Option<Vec3>]| {
        set.iter().enumerate().filter_map(|(i, q)| q.map(|q| (i, (q - p).norm()))).min_by(|x, y| x.1.total_cmp(&y.1))
    };
    let mut out = Vec::new();
    for (i, p) in pa.iter().enumerate() {
        let Some(p) = p else { continue };
        if !visible(p) {
            continue;
        }
        let Some((j, d)) = nearest(p, &pb) else { continue };
        if d > tol {
            continue;
        }
        if nearest(&pb[j].unwrap(), &pa).map(|x| x.0) == Some(i) {
            out.push(FrameMatch { frame_a, kp_a: i, frame_b, kp_b: j });
        }
    }
    out
}

/// Precision/recall over the listed frame pairs; predictions on other pairs
/// are ignored.
pub fn correspondence_pr(
    pred: &[FrameMatch],
    frames: &[GtFrame],
    pairs: &[(usize, usize)],
    k: &Intrinsics,
) -> Result<PrReport> {
    let mut gt = Vec::new();
    for &(a, b) in pairs {
        if a >= frames.len() || b >= frames.len() {
            return Err(ReconError::InvalidInput(format!("pair ({a},{b}) outside {} frames", frames.len())));
        }
        gt.extend(ground_truth_matches(a, &frames[a], b, &frames[b], k));
    }
    let wanted: BTreeSet<(usize, usize)> = pairs.iter().copied().collect();
    let pred: Vec<FrameMatch> = pred.iter().filter(|m| wanted.contains(&(m.frame_a, m.frame_b))).copied().collect();
    Ok(precision_recall(&pred, &gt))
}

/// Matches implied by per-keypoint landmark identities.
pub fn landmark_matches(
    frame_a: usize,
    ids_a: &[Option<u64>],
    frame_b: usize,
    ids_b: &[Option<u64>],
) -> Vec<FrameMatch> {
    let mut out = Vec::new();
    for (i, la) in ids_a.iter().enumerate() {
        let Some(la) = la else { continue };
        if let Some(j) = ids_b.iter().position(|lb| lb.as_ref() == Some(la)) {
            out.push(FrameMatch { frame_a, kp_a: i, frame_b, kp_b: j });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct AteReport {
    pub rmse: f64,
    pub std: f64,
    pub errors: Vec<f64>,
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
}

impl AteReport {
    pub fn to_kv(&self) -> String {
        format!("ate_rmse={}\nate_std={}\nscale={}\nframes={}\n", self.rmse, self.std, self.scale, self.errors.len())
    }
}

/// Similarity `(s, R, t)` minimising `sum |s R p_i + t - g_i|^2`.
pub fn umeyama(pred: &[Vec3], gt: &[Vec3]) -> Result<(f64, Matrix3<f64>, Vec3)> {
    if pred.len() != gt.len() {
        return Err(ReconError::DimensionMismatch(format!("{} vs {} positions", pred.len(), gt.len())));
    }
    let n = pred.len() as f64;
    let mp = pred.iter().fold(Vec3::zeros(), |a, p| a + p) / n;
    let mg = gt.iter().fold(Vec3::zeros(), |a, p| a + p) / n;
    let mut cov = Matrix3::zeros();
    let mut var = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        cov += (g - mg) * (p - mp).transpose();
        var += (p - mp).norm_squared();
    }
    cov /= n;
    var /= n;
    if var <= 1e-300 {
        return Err(ReconError::Degenerate("predicted positions are all identical".into()));
    }
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut s = Matrix3::identity();
    if (u.determinant() * vt.determinant()) < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let r = u * s * vt;
    let scale = (Matrix3::from_diagonal(&svd.singular_values) * s).trace() / var;
    let t = mg - scale * r * mp;
    Ok((scale, r, t))
}

/// Absolute trajectory error on positions after similarity alignment.
/// Both trajectories must list the same frame ids in the same order.
pub fn ate(pred: &[(usize, RigidPose)], gt: &[(usize, RigidPose)]) -> Result<AteReport> {
    if pred.len() != gt.len() {
        return Err(ReconError::DimensionMismatch(format!("{} predicted vs {} gt poses", pred.len(), gt.len())));
    }
    if pred.len() < 3 {
        return Err(ReconError::InvalidInput(format!("ATE needs at least 3 poses, got {}", pred.len())));
    }
    if let Some((a, b)) = pred.iter().zip(gt).find(|(a, b)| a.0 != b.0) {
        return Err(ReconError::InvalidInput(format!("frame id mismatch: {} vs {}", a.0, b.0)));
    }
    let p: Vec<Vec3> = pred.iter().map(|x| x.1.translation).collect();
    let g: Vec<Vec3> = gt.iter().map(|x| x.1.translation).collect();
    let (scale, rotation, translation) = umeyama(&p, &g)?;
    let errors: Vec<f64> = p.iter().zip(&g).map(|(p, g)| (scale * rotation * p + translation - g).norm()).collect();
    let n = errors.len() as f64;
    let mean = errors.iter().sum::<f64>() / n;
    let rmse = (errors.iter().map(|e| e * e).sum::<f64>() / n).sqrt();
    let std = (errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok(AteReport { rmse, std, errors, scale, rotation, translation })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn random_depth(rng: &mut ChaCha8Rng, w: usize, h: usize, invalid: f64) -> DepthRaster {
        let v = (0..w * h).map(|_| if rng.random_bool(invalid) { 0.0 } else { rng.random_range(1.0..20.0) }).collect();
        DepthRaster::new(w, h, v).unwrap()
    }

    #[test]
    fn identity_and_scale_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gt = random_depth(&mut rng, 16, 12, 0.1);
        let m = depth_metrics(&gt, &gt).unwrap();
        assert_eq!((m.abs_rel, m.sq_rel, m.rmse, m.rmse_log), (0.0, 0.0, 0.0, 0.0));
        assert_eq!((m.delta1, m.delta2, m.delta3), (1.0, 1.0, 1.0));
        let doubled = DepthRaster::new(16, 12, gt.values.iter().map(|v| 2.0 * v).collect()).unwrap();
        let m = depth_metrics(&doubled, &gt).unwrap();
        assert!(m.abs_rel < 1e-15 && m.rmse < 1e-12);
        assert!(depth_metrics(&DepthRaster::filled(4, 4, 0.0), &DepthRaster::filled(4, 4, 1.0)).is_err());
    }

    /// Straightforward re-derivation of the metrics, pixel by pixel.
    fn depth_oracle(pred: &DepthRaster, gt: &DepthRaster) -> [f64; 7] {
        let mut ps = Vec::new();
        let mut gs = Vec::new();
        for i in 0..pred.values.len() {
            let (p, g) = (pred.values[i], gt.values[i]);
            if p > 0.0 && g > 0.0 && p.is_finite() && g.is_finite() {
                ps.push(p);
                gs.push(g);
            }
        }
        let med = |v: &Vec<f64>| {
            let mut s = v.clone();
            s.sort_by(|a, b| a.partial_cmp(b).unwrap());
            if s.len() % 2 == 1 {
                s[s.len() / 2]
            } else {
                (s[s.len() / 2 - 1] + s[s.len() / 2]) / 2.0
            }
        };
        let sc = med(&gs) / med(&ps);
        let n = ps.len() as f64;
        let mut out = [0.0; 7];
        for i in 0..ps.len() {
            let p = ps[i] * sc;
            let g = gs[i];
            out[0] += (p - g).abs() / g / n;
            out[1] += (p - g) * (p - g) / g / n;
            out[2] += (p - g) * (p - g) / n;
            out[3] += (p.ln() - g.ln()) * (p.ln() - g.ln()) / n;
            let r = if p > g { p / g } else { g / p };
            out[4] += if r < 1.25 { 1.0 } else { 0.0 } / n;
            out[5] += if r < 1.5625 { 1.0 } else { 0.0 } / n;
            out[6] += if r < 1.953125 { 1.0 } else { 0.0 } / n;
        }
        out[2] = out[2].sqrt();
        out[3] = out[3].sqrt();
        out
    }

    #[test]
    fn depth_metrics_match_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let p = random_depth(&mut rng, 9, 7, 0.2);
            let g = random_depth(&mut rng, 9, 7, 0.2);
            let m = depth_metrics(&p, &g).unwrap();
            let o = depth_oracle(&p, &g);
            let got = [m.abs_rel, m.sq_rel, m.rmse, m.rmse_log, m.delta1, m.delta2, m.delta3];
            for i in 0..7 {
                assert!((got[i] - o[i]).abs() <= 1e-12 * o[i].abs().max(1.0), "metric {i}: {} vs {}", got[i], o[i]);
            }
            assert!(m.delta1 <= m.delta2 && m.delta2 <= m.delta3);
        }
    }

    fn fm(a: usize, b: usize) -> FrameMatch {
        FrameMatch { frame_a: 0, kp_a: a, frame_b: 1, kp_b: b }
    }

    #[test]
    fn precision_recall_cases() {
        let gt: Vec<_> = (0..10).map(|i| fm(i, i)).collect();
        let r = precision_recall(&gt, &gt);
        assert_eq!((r.precision, r.recall), (Some(1.0), Some(1.0)));
        let r = precision_recall(&gt[..5], &gt);
        assert_eq!((r.precision, r.recall), (Some(1.0), Some(0.5)));
        let r = precision_recall(&[fm(0, 1)], &[]);
        assert_eq!((r.precision, r.recall), (Some(0.0), None));
        assert_eq!(precision_recall(&[], &gt).precision, None);
        // Adding a correct match never lowers either number.
        let mut pred = vec![fm(0, 0), fm(3, 4), fm(5, 9)];
        let before = precision_recall(&pred, &gt);
        pred.push(fm(7, 7));
        let after = precision_recall(&pred, &gt);
        assert!(after.precision >= before.precision && after.recall >= before.recall);
    }

    #[test]
    fn ground_truth_matches_on_plane() {
        let k = Intrinsics::new(50.0, 50.0, 19.5, 14.5, 40, 30).unwrap();
        let depth = DepthRaster::filled(40, 30, 10.0);
        let pa = RigidPose::identity();
        let pb = RigidPose::from_translation(Vec3::new(3.5, 0.0, 0.0));
        // Same surface points seen from both cameras, plus one point of `a`
        // that leaves `b`'s image.
        let world: Vec<Vec3> = (0..8).map(|i| Vec3::new(-1.5 + 0.45 * i as f64, 0.3 * (i % 3) as f64, 10.0)).collect();
        let uv_a: Vec<[f64; 2]> = world.iter().map(|p| k.project(p).unwrap()).collect();
        let uv_b: Vec<[f64; 2]> = world.iter().filter_map(|p| k.project(&pb.inverse().transform_point(p))).collect();
        let a = GtFrame { keypoints: &uv_a, depth: &depth, pose: &pa };
        let b = GtFrame { keypoints: &uv_b, depth: &depth, pose: &pb };
        let gt = ground_truth_matches(0, &a, 1, &b, &k);
        let offset = world.len() - uv_b.len();
        assert_eq!(gt.len(), uv_b.len());
        for m in &gt {
            assert_eq!(m.kp_b + offset, m.kp_a);
        }
        let r = correspondence_pr(&gt, &[a, b], &[(0, 1)], &k).unwrap();
        assert_eq!(r.precision, Some(1.0));
        assert_eq!(r.recall, Some(1.0));
    }

    fn traj(points: &[Vec3]) -> Vec<(usize, RigidPose)> {
        points.iter().enumerate().map(|(i, p)| (i, RigidPose::from_translation(*p))).collect()
    }

    #[test]
    fn ate_identity_and_similarity_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g: Vec<Vec3> = (0..30)
            .map(|_| Vec3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)))
            .collect();
        let r = ate(&traj(&g), &traj(&g)).unwrap();
        assert!(r.rmse < 1e-12 && (r.scale - 1.0).abs() < 1e-12);

        let sim = RigidPose::from_axis_angle(Vec3::new(0.3, -1.1, 0.4), Vec3::new(4.0, -2.0, 7.0));
        let moved: Vec<Vec3> = g.iter().map(|p| sim.transform_point(&(2.0 * p))).collect();
        let r = ate(&traj(&moved), &traj(&g)).unwrap();
        assert!(r.rmse < 1e-9);
        assert!((r.scale - 0.5).abs() < 1e-12);

        let n = Normal::new(0.0, 0.3).unwrap();
        let noisy: Vec<Vec3> =
            g.iter().map(|p| p + Vec3::new(n.sample(&mut rng), n.sample(&mut rng), n.sample(&mut rng))).collect();
        let base = ate(&traj(&noisy), &traj(&g)).unwrap();
        let moved: Vec<Vec3> = noisy.iter().map(|p| sim.transform_point(&(0.7 * p))).collect();
        let again = ate(&traj(&moved), &traj(&g)).unwrap();
        assert!((base.rmse - again.rmse).abs() < 1e-9);
        assert!(ate(&traj(&g[..2]), &traj(&g[..2])).is_err());
        assert!(ate(&traj(&g[..5]), &traj(&g[..6])).is_err());
    }

    #[test]
    fn ate_noise_expectation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let sigma = 0.1;
        let n = Normal::new(0.0, sigma).unwrap();
        let frames = 100;
        let g: Vec<Vec3> = (0..frames)
            .map(|i| Vec3::new((i as f64 * 0.1).sin() * 5.0, 0.2 * i as f64, (i as f64 * 0.07).cos() * 3.0))
            .collect();
        let mut total = 0.0;
        for _ in 0..100 {
            let p: Vec<Vec3> =
                g.iter().map(|x| x + Vec3::new(n.sample(&mut rng), n.sample(&mut rng), n.sample(&mut rng))).collect();
            total += ate(&traj(&p), &traj(&g)).unwrap().rmse;
        }
        let mean = total / 100.0;
        let expect = sigma * 3f64.sqrt();
        assert!((mean - expect).abs() < 0.2 * expect, "{mean} vs {expect}");
    }

    #[test]
    fn ate_matches_bruteforce_residuals() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g: Vec<Vec3> = (0..12).map(|_| Vec3::new(rng.random(), rng.random(), rng.random())).collect();
        let p: Vec<Vec3> = (0..12).map(|_| Vec3::new(rng.random(), rng.random(), rng.random())).collect();
        let r = ate(&traj(&p), &traj(&g)).unwrap();
        // Any perturbation of the optimal similarity can only increase the cost.
        let cost = |s: f64, rot: &Matrix3<f64>, t: &Vec3| {
            p.iter().zip(&g).map(|(a, b)| (s * rot * a + t - b).norm_squared()).sum::<f64>()
        };
        let best = cost(r.scale, &r.rotation, &r.translation);
        assert!((best / 12.0).sqrt() - r.rmse < 1e-12);
        for _ in 0..200 {
            let d = RigidPose::from_axis_angle(
                Vec3::new(rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05), 0.0),
                Vec3::zeros(),
            );
            let s = r.scale * rng.random_range(0.95..1.05);
            let t = r.translation + Vec3::new(rng.random_range(-0.05..0.05), 0.0, 0.0);
            assert!(cost(s, &(d.rotation * r.rotation), &t) >= best - 1e-12);
        }
    }
}
