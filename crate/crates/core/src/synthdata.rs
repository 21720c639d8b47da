//! Procedural tube scenes with exact ground truth: a B-spline centreline,
//! a bumpy radius profile, surface landmarks with fixed signatures, and
//! camera paths with optional noise and occlusion events.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{ReconError, Result};
use crate::geometry::{DepthRaster, ImageRaster, Intrinsics, RigidPose, Vec3};
use crate::io::{Frame, GroundTruth, Sequence};
use crate::matching::{Descriptor, DESCRIPTOR_DIM};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TubeParams {
    pub seed: u64,
    pub length_cm: f64,
    /// Spacing of the centreline control points along the tube axis.
    pub segment_cm: f64,
    /// Lateral jitter of the control points.
    pub wiggle_cm: f64,
    pub radius_cm: f64,
    pub bump_amplitude_cm: f64,
    pub bump_wavelength_cm: f64,
    /// Landmarks per cm^2 of wall.
    pub landmark_density: f64,
}

impl Default for TubeParams {
    fn default() -> Self {
        TubeParams {
            seed: 7,
            length_cm: 60.0,
            segment_cm: 2.0,
            wiggle_cm: 0.3,
            radius_cm: 2.5,
            bump_amplitude_cm: 0.25,
            bump_wavelength_cm: 5.0,
            landmark_density: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Landmark {
    pub id: u64,
    pub position: Vec3,
    pub signature: Descriptor,
}

/// Tube around a uniform cubic B-spline `c(u)`; wall radius `r(u)`.
/// The implicit function `|x - c(u*)| - r(u*)`, with `u*` the closest
/// centreline parameter, is negative inside.
#[derive(Debug, Clone)]
pub struct TubeScene {
    pub params: TubeParams,
    control: Vec<Vec3>,
    /// Cumulative arclength at `u = i / ARC_STEPS`.
    arclength: Vec<f64>,
    pub landmarks: Vec<Landmark>,
}

const ARC_STEPS: usize = 256;

impl TubeScene {
    pub fn new(params: TubeParams) -> Result<Self> {
        let ok = params.length_cm > 4.0 * params.segment_cm
            && params.segment_cm > 0.0
            && params.radius_cm > params.bump_amplitude_cm.abs()
            && params.bump_wavelength_cm > 0.0
            && params.landmark_density >= 0.0
            && params.wiggle_cm >= 0.0;
        if !ok {
            return Err(ReconError::InvalidInput(format!("invalid tube parameters {params:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let n = (params.length_cm / params.segment_cm).ceil() as usize + 3;
        let control: Vec<Vec3> = (0..n)
            .map(|i| {
                let w = params.wiggle_cm;
                Vec3::new(
                    rng.random_range(-1.0..=1.0) * w,
                    rng.random_range(-1.0..=1.0) * w,
                    (i as f64 - 1.0) * params.segment_cm,
                )
            })
            .collect();
        let mut scene = TubeScene { params, control, arclength: Vec::new(), landmarks: Vec::new() };
        let steps = scene.u_max() as usize * ARC_STEPS;
        let mut acc = vec![0.0];
        let mut prev = scene.centre(0.0);
        for i in 1..=steps {
            let p = scene.centre(i as f64 / ARC_STEPS as f64);
            acc.push(acc[i - 1] + (p - prev).norm());
            prev = p;
        }
        scene.arclength = acc;
        scene.landmarks = scene.sample_landmarks(&mut rng)?;
        Ok(scene)
    }

    pub fn u_max(&self) -> f64 {
        (self.control.len() - 3) as f64
    }

    pub fn length(&self) -> f64 {
        *self.arclength.last().unwrap_or(&0.0)
    }

    fn segment(&self, u: f64) -> (usize, f64) {
        let u = u.clamp(0.0, self.u_max());
        let i = (u.floor() as usize).min(self.control.len() - 4);
        (i, u - i as f64)
    }

    /// Centreline point and its first two derivatives.
    pub fn centre_derivs(&self, u: f64) -> (Vec3, Vec3, Vec3) {
        let (i, t) = self.segment(u);
        let p = &self.control[i..i + 4];
        let (t2, t3) = (t * t, t * t * t);
        let b = [
            (1.0 - t).powi(3) / 6.0,
            (3.0 * t3 - 6.0 * t2 + 4.0) / 6.0,
            (-3.0 * t3 + 3.0 * t2 + 3.0 * t + 1.0) / 6.0,
            t3 / 6.0,
        ];
        let db = [-(1.0 - t).powi(2) / 2.0, (3.0 * t2 - 4.0 * t) / 2.0, (-3.0 * t2 + 2.0 * t + 1.0) / 2.0, t2 / 2.0];
        let ddb = [1.0 - t, 3.0 * t - 2.0, -3.0 * t + 1.0, t];
        let mut out = (Vec3::zeros(), Vec3::zeros(), Vec3::zeros());
        for k in 0..4 {
            out.0 += p[k] * b[k];
            out.1 += p[k] * db[k];
            out.2 += p[k] * ddb[k];
        }
        out
    }

    pub fn centre(&self, u: f64) -> Vec3 {
        self.centre_derivs(u).0
    }

    pub fn radius(&self, u: f64) -> f64 {
        let s = self.arclength_at(u);
        self.params.radius_cm
            + self.params.bump_amplitude_cm * (2.0 * std::f64::consts::PI * s / self.params.bump_wavelength_cm).sin()
    }

    pub fn arclength_at(&self, u: f64) -> f64 {
        let x = u.clamp(0.0, self.u_max()) * ARC_STEPS as f64;
        let i = (x.floor() as usize).min(self.arclength.len() - 2);
        let f = x - i as f64;
        self.arclength[i] * (1.0 - f) + self.arclength[i + 1] * f
    }

    pub fn u_at_arclength(&self, s: f64) -> f64 {
        let s = s.clamp(0.0, self.length());
        let i = self.arclength.partition_point(|&a| a <= s).clamp(1, self.arclength.len() - 1);
        let (a, b) = (self.arclength[i - 1], self.arclength[i]);
        let f = if b > a { (s - a) / (b - a) } else { 0.0 };
        ((i - 1) as f64 + f) / ARC_STEPS as f64
    }

    /// Closest centreline parameter to `x` (Newton, optionally warm started).
    pub fn closest_param(&self, x: &Vec3, guess: Option<f64>) -> f64 {
        let mut u = match guess {
            Some(g) => g,
            None => {
                let n = (self.u_max() * 20.0) as usize;
                (0..=n)
                    .map(|i| i as f64 / 20.0)
                    .min_by(|a, b| {
                        (self.centre(*a) - x).norm_squared().total_cmp(&(self.centre(*b) - x).norm_squared())
                    })
                    .unwrap_or(0.0)
            }
        };
        for _ in 0..30 {
            let (c, d1, d2) = self.centre_derivs(u);
            let f = (c - x).dot(&d1);
            let df = d1.dot(&d1) + (c - x).dot(&d2);
            let step = if df > 1e-12 { f / df } else { f / d1.norm_squared() };
            let next = (u - step).clamp(0.0, self.u_max());
            if (next - u).abs() < 1e-13 {
                return next;
            }
            u = next;
        }
        u
    }

    /// Signed wall distance (negative inside) and the closest parameter.
    pub fn implicit(&self, x: &Vec3, guess: Option<f64>) -> (f64, f64) {
        let u = self.closest_param(x, guess);
        ((x - self.centre(u)).norm() - self.radius(u), u)
    }

    /// Unit normal frame orthogonal to the tangent at `u`.
    fn normal_frame(&self, u: f64) -> (Vec3, Vec3, Vec3) {
        let t = self.centre_derivs(u).1.normalize();
        let reference = Vec3::new(0.0, 1.0, 0.0);
        let n1 = (reference - t * reference.dot(&t)).normalize();
        let n2 = t.cross(&n1);
        (t, n1, n2)
    }

    fn sample_landmarks(&self, rng: &mut ChaCha8Rng) -> Result<Vec<Landmark>> {
        let area = 2.0 * std::f64::consts::PI * self.params.radius_cm * self.length();
        let count = (area * self.params.landmark_density).round() as usize;
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut out = Vec::with_capacity(count);
        for id in 0..count {
            let s = rng.random_range(0.0..self.length());
            let theta = rng.random_range(0.0..std::f64::consts::TAU);
            let u = self.u_at_arclength(s);
            let (_, n1, n2) = self.normal_frame(u);
            let position = self.centre(u) + (n1 * theta.cos() + n2 * theta.sin()) * self.radius(u);
            let raw: Vec<f64> = (0..DESCRIPTOR_DIM).map(|_| normal.sample(rng)).collect();
            out.push(Landmark { id: id as u64, position, signature: Descriptor::from_unnormalized(&raw)? });
        }
        Ok(out)
    }

    /// Camera at arclength `s` on the centreline looking towards larger `s`.
    pub fn camera_pose(&self, s: f64) -> RigidPose {
        let u = self.u_at_arclength(s);
        let (t, n1, n2) = self.normal_frame(u);
        // Columns: camera x, y (down), z (forward) in world coordinates.
        RigidPose { rotation: nalgebra::Matrix3::from_columns(&[-n2, n1, t]), translation: self.centre(u) }
    }

    fn shade(&self, x: &Vec3, u: f64, dir: &Vec3) -> [f64; 3] {
        let n = (x - self.centre(u)).normalize();
        let lambert = n.dot(dir).abs();
        let s = self.arclength_at(u);
        let (_, n1, n2) = self.normal_frame(u);
        let theta = n.dot(&n2).atan2(n.dot(&n1));
        let pattern = 0.5 + 0.5 * (1.7 * s).sin() * (3.0 * theta).cos();
        let base = [0.75 + 0.15 * pattern, 0.35 + 0.2 * pattern, 0.3 + 0.1 * pattern];
        base.map(|c| (c * (0.3 + 0.7 * lambert)).clamp(0.0, 1.0))
    }

    /// Renders depth and colour from `pose`. Rays are sphere traced through
    /// the implicit function and refined by bisection to 1e-4 cm. Pixels
    /// whose hit lies beyond `max_depth` are invalid (0).
    pub fn raycast(&self, pose: &RigidPose, k: &Intrinsics, max_depth: f64) -> Result<(DepthRaster, ImageRaster)> {
        let (f0, u0) = self.implicit(&pose.translation, None);
        if f0 >= 0.0 {
            return Err(ReconError::InvalidInput("camera is outside the tube".into()));
        }
        let row = |y: usize| -> Vec<(f64, [f64; 3])> {
            (0..k.width)
                .map(|x| {
                    let ray = k.ray([x as f64, y as f64]);
                    let cos_z = 1.0 / ray.norm();
                    let dir = pose.rotation * ray.normalize();
                    match self.trace(&pose.translation, &dir, u0, max_depth / cos_z) {
                        Some((t, u)) if t * cos_z <= max_depth => {
                            let hit = pose.translation + dir * t;
                            (t * cos_z, self.shade(&hit, u, &dir))
                        }
                        _ => (0.0, [0.0; 3]),
                    }
                })
                .collect()
        };
        #[cfg(feature = "parallel")]
        let rows: Vec<Vec<(f64, [f64; 3])>> = {
            use rayon::prelude::*;
            (0..k.height).into_par_iter().map(row).collect()
        };
        #[cfg(not(feature = "parallel"))]
        let rows: Vec<Vec<(f64, [f64; 3])>> = (0..k.height).map(row).collect();
        let px: Vec<(f64, [f64; 3])> = rows.into_iter().flatten().collect();
        Ok((
            DepthRaster::new(k.width, k.height, px.iter().map(|p| p.0).collect())?,
            ImageRaster::new(k.width, k.height, px.iter().map(|p| p.1).collect())?,
        ))
    }

    /// Distance along `dir` to the wall, with the hit's centreline parameter.
    pub fn trace(&self, origin: &Vec3, dir: &Vec3, u0: f64, t_max: f64) -> Option<(f64, f64)> {
        let mut t = 0.0;
        let mut u = u0;
        let (mut f, _) = self.implicit(origin, Some(u));
        if f >= 0.0 {
            return None;
        }
        loop {
            let prev = (t, u);
            t += (0.6 * -f).max(0.01);
            if t > t_max * 1.05 {
                return None;
            }
            let (nf, nu) = self.implicit(&(origin + dir * t), Some(u));
            u = nu;
            if nf >= 0.0 {
                let (mut lo, mut hi) = (prev.0, t);
                let mut ul = prev.1;
                while hi - lo > 1e-4 {
                    let mid = 0.5 * (lo + hi);
                    let (fm, um) = self.implicit(&(origin + dir * mid), Some(ul));
                    if fm < 0.0 {
                        lo = mid;
                        ul = um;
                    } else {
                        hi = mid;
                    }
                }
                let t_hit = 0.5 * (lo + hi);
                if t_hit > t_max {
                    return None;
                }
                let (_, uh) = self.implicit(&(origin + dir * t_hit), Some(ul));
                return Some((t_hit, uh));
            }
            f = nf;
        }
    }
}

/// Piece of a camera path: `frames` frames moving `speed_cm` per frame
/// along the centreline. Occluded legs render a near wall instead of the
/// tube.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Leg {
    pub frames: usize,
    pub speed_cm: f64,
    pub occluded: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceSpec {
    pub seed: u64,
    pub intrinsics: Intrinsics,
    /// Arclength of the first camera position.
    pub start_cm: f64,
    pub legs: Vec<Leg>,
    /// Append the reversed path (poses mirrored, noise redrawn).
    pub forward_backward: bool,
    pub jitter_cm: f64,
    /// Per-component standard deviation added to landmark signatures.
    pub descriptor_sigma: f64,
    pub depth_sigma_cm: f64,
    /// Probability of dropping a visible landmark in a frame.
    pub dropout: f64,
    pub max_depth_cm: f64,
    pub occluder_depth_cm: f64,
    /// Spurious keypoints on an occluded frame.
    pub occluded_keypoints: usize,
    /// A landmark becomes a keypoint only if the sampled wall depth at its
    /// pixel reproduces its depth this closely.
    pub keypoint_depth_tol_cm: f64,
}

impl Default for SequenceSpec {
    fn default() -> Self {
        SequenceSpec {
            seed: 1,
            intrinsics: default_intrinsics(),
            start_cm: 40.0,
            legs: vec![Leg { frames: 200, speed_cm: -0.1, occluded: false }],
            forward_backward: false,
            jitter_cm: 0.0,
            descriptor_sigma: 0.0,
            depth_sigma_cm: 0.0,
            dropout: 0.0,
            max_depth_cm: 15.0,
            occluder_depth_cm: 0.8,
            occluded_keypoints: 5,
            keypoint_depth_tol_cm: 5e-4,
        }
    }
}

pub fn default_intrinsics() -> Intrinsics {
    Intrinsics { fx: 60.0, fy: 60.0, cx: 39.5, cy: 31.5, width: 80, height: 64 }
}

impl SequenceSpec {
    pub fn frame_count(&self) -> usize {
        let n: usize = self.legs.iter().map(|l| l.frames).sum();
        if self.forward_backward {
            2 * n
        } else {
            n
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        let bad = |m: &str| Err(ReconError::InvalidInput(m.to_string()));
        if self.legs.is_empty() || self.frame_count() == 0 {
            return bad("sequence needs at least one frame");
        }
        if [self.jitter_cm, self.descriptor_sigma, self.depth_sigma_cm].iter().any(|v| !(*v >= 0.0)) {
            return bad("noise levels must be nonnegative");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        if !(self.max_depth_cm > 0.0) || !(self.occluder_depth_cm > 0.0) || !(self.keypoint_depth_tol_cm > 0.0) {
            return bad("depth limits must be positive");
        }
        Ok(())
    }

    /// Arclength and occlusion flag of every frame.
    pub fn path(&self) -> Vec<(f64, bool)> {
        let mut out = Vec::new();
        let mut s = self.start_cm;
        for leg in &self.legs {
            for _ in 0..leg.frames {
                if !out.is_empty() {
                    s += leg.speed_cm;
                }
                out.push((s, leg.occluded));
            }
        }
        if self.forward_backward {
            let back: Vec<(f64, bool)> = out.iter().rev().copied().collect();
            out.extend(back);
        }
        out
    }
}

/// Named presets used by the command line and the tests.
pub fn scenario(name: &str, seed: u64) -> Result<(TubeParams, SequenceSpec)> {
    let tube = TubeParams { seed, ..TubeParams::default() };
    let base = SequenceSpec { seed, ..SequenceSpec::default() };
    let leg = |frames, speed_cm, occluded| Leg { frames, speed_cm, occluded };
    let spec = match name {
        "default" => base,
        "noisy" => SequenceSpec { descriptor_sigma: 0.05, ..base },
        "occlusion" => SequenceSpec {
            start_cm: 38.0,
            legs: vec![leg(120, -0.1, false), leg(30, -0.6, true), leg(60, 0.3, false), leg(90, -0.1, false)],
            ..base
        },
        "loop" => SequenceSpec {
            start_cm: 18.0,
            legs: vec![leg(120, 0.1, false)],
            forward_backward: true,
            depth_sigma_cm: 0.005,
            ..base
        },
        "short" => SequenceSpec { legs: vec![leg(40, -0.1, false)], ..base },
        other => return Err(ReconError::InvalidInput(format!("unknown scenario '{other}'"))),
    };
    Ok((tube, spec))
}

pub const SCENARIOS: [&str; 5] = ["default", "noisy", "occlusion", "loop", "short"];

fn quantize(v: f64) -> f64 {
    v as f32 as f64
}

fn occluded_frame(spec: &SequenceSpec, rng: &mut ChaCha8Rng) -> Result<(Frame, DepthRaster, Vec<Option<u64>>)> {
    let k = &spec.intrinsics;
    let tilt = rng.random_range(-0.002..0.002);
    let depth: Vec<f64> =
        (0..k.pixel_count()).map(|i| quantize(spec.occluder_depth_cm + tilt * ((i % k.width) as f64 - k.cx))).collect();
    let image: Vec<[f64; 3]> = (0..k.pixel_count())
        .map(|_| {
            let g = rng.random_range(0.0..0.1);
            [quantize(0.55 + g), quantize(0.25 + g), quantize(0.2 + g)]
        })
        .collect();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut keypoints = Vec::new();
    let mut descriptors = Vec::new();
    for _ in 0..spec.occluded_keypoints {
        keypoints.push([
            quantize(rng.random_range(1.0..k.width as f64 - 2.0)),
            quantize(rng.random_range(1.0..k.height as f64 - 2.0)),
        ]);
        let raw: Vec<f64> = (0..DESCRIPTOR_DIM).map(|_| normal.sample(rng)).collect();
        descriptors.push(Descriptor::from_unnormalized(&raw)?);
    }
    let depth = DepthRaster::new(k.width, k.height, depth)?;
    let ids = vec![None; keypoints.len()];
    Ok((
        Frame { image: ImageRaster::new(k.width, k.height, image)?, depth: depth.clone(), keypoints, descriptors },
        depth,
        ids,
    ))
}

fn render_frame(
    scene: &TubeScene,
    spec: &SequenceSpec,
    pose: &RigidPose,
    rng: &mut ChaCha8Rng,
) -> Result<(Frame, DepthRaster, Vec<Option<u64>>)> {
    let k = &spec.intrinsics;
    let (clean, image) = scene.raycast(pose, k, spec.max_depth_cm)?;
    let clean = DepthRaster::new(k.width, k.height, clean.values.iter().map(|&v| quantize(v)).collect())?;
    let image = ImageRaster::new(k.width, k.height, image.data.iter().map(|c| c.map(quantize)).collect())?;
    let inv = pose.inverse();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut keypoints = Vec::new();
    let mut descriptors = Vec::new();
    let mut ids = Vec::new();
    for lm in &scene.landmarks {
        let q = inv.transform_point(&lm.position);
        let Some(uv) = k.project(&q) else { continue };
        let uv = [quantize(uv[0]), quantize(uv[1])];
        // Visible and not on a depth edge: the wall depth around the pixel
        // reproduces the landmark depth.
        let Some(z) = clean.sample_inverse_bicubic(uv) else { continue };
        if (z - q.z).abs() > spec.keypoint_depth_tol_cm {
            continue;
        }
        if spec.dropout > 0.0 && rng.random_bool(spec.dropout) {
            continue;
        }
        let desc = if spec.descriptor_sigma > 0.0 {
            let raw: Vec<f64> =
                (0..DESCRIPTOR_DIM).map(|c| lm.signature.get(c) + spec.descriptor_sigma * normal.sample(rng)).collect();
            Descriptor::from_unnormalized(&raw)?
        } else {
            lm.signature.clone()
        };
        keypoints.push(uv);
        descriptors.push(desc);
        ids.push(Some(lm.id));
    }
    let depth = if spec.depth_sigma_cm > 0.0 {
        let noise = Normal::new(0.0, spec.depth_sigma_cm).expect("depth noise");
        let v = clean
            .values
            .iter()
            .map(|&d| if d > 0.0 { quantize((d + noise.sample(rng)).max(1e-3)) } else { 0.0 })
            .collect();
        DepthRaster::new(k.width, k.height, v)?
    } else {
        clean.clone()
    };
    Ok((Frame { image, depth, keypoints, descriptors }, clean, ids))
}

/// Renders a full sequence with ground truth. Each frame draws from its own
/// random stream, so output does not depend on scheduling.
pub fn generate_sequence(scene: &TubeScene, spec: &SequenceSpec) -> Result<Sequence> {
    spec.validate()?;
    let path = spec.path();
    let mut jitter_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed);
    let jitter = Normal::new(0.0, spec.jitter_cm.max(1e-300)).expect("jitter");
    let forward = if spec.forward_backward { path.len() / 2 } else { path.len() };
    let mut poses: Vec<RigidPose> = path[..forward]
        .iter()
        .map(|&(s, _)| {
            let mut p = scene.camera_pose(s);
            if spec.jitter_cm > 0.0 {
                p.translation += Vec3::new(
                    jitter.sample(&mut jitter_rng),
                    jitter.sample(&mut jitter_rng),
                    jitter.sample(&mut jitter_rng),
                );
            }
            p
        })
        .collect();
    if spec.forward_backward {
        let back: Vec<RigidPose> = poses.iter().rev().cloned().collect();
        poses.extend(back);
    }
    let render = |i: usize| -> Result<(Frame, DepthRaster, Vec<Option<u64>>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(i as u64 + 1);
        if path[i].1 {
            occluded_frame(spec, &mut rng)
        } else {
            render_frame(scene, spec, &poses[i], &mut rng)
        }
    };
    #[cfg(feature = "parallel")]
    let rendered: Vec<Result<_>> = {
        use rayon::prelude::*;
        (0..path.len()).into_par_iter().map(render).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let rendered: Vec<Result<_>> = (0..path.len()).map(render).collect();

    let mut frames = Vec::with_capacity(path.len());
    let mut gt = GroundTruth { poses: poses.clone(), ..Default::default() };
    let mut empty = 0;
    for r in rendered {
        let (frame, clean, ids) = r?;
        if ids.iter().all(Option::is_none) {
            empty += 1;
        }
        frames.push(frame);
        gt.depth.push(clean);
        gt.landmarks.push(ids);
    }
    if 2 * empty > frames.len() {
        return Err(ReconError::InvalidInput(format!("{empty} of {} frames see no landmark", frames.len())));
    }
    Ok(Sequence { intrinsics: spec.intrinsics, frames, gt: Some(gt) })
}
