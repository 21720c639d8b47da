//! Sequence directory format, trajectory files and atomic output writes.
//!
//! Layout:
//! ```text
//! intrinsics.txt            fx fy cx cy width height
//! frames/NNNNNN.rgb         f32 LE, H x W x 3
//! frames/NNNNNN.depth       f32 LE, H x W, cm, 0 = invalid
//! frames/NNNNNN.feat        u32 count, then per keypoint 2 x f32 uv, 128 x f32 descriptor
//! gt/poses.txt              frame_id tx ty tz qx qy qz qw (camera to world)
//! gt/matches.txt            frame kp_index landmark_id
//! gt/depth/NNNNNN.depth     noiseless depth
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{ReconError, Result};
use crate::eval::FrameMatch;
use crate::geometry::{DepthRaster, ImageRaster, Intrinsics, RigidPose, Vec3};
use crate::matching::{Descriptor, DESCRIPTOR_DIM};

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub image: ImageRaster,
    pub depth: DepthRaster,
    pub keypoints: Vec<[f64; 2]>,
    pub descriptors: Vec<Descriptor>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroundTruth {
    pub poses: Vec<RigidPose>,
    /// Landmark id of every keypoint; `None` for spurious keypoints.
    pub landmarks: Vec<Vec<Option<u64>>>,
    pub depth: Vec<DepthRaster>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub intrinsics: Intrinsics,
    pub frames: Vec<Frame>,
    pub gt: Option<GroundTruth>,
}

/// Writes `bytes` to a temporary sibling and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| ReconError::io(dir, e))?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    let mut f = fs::File::create(&tmp).map_err(|e| ReconError::io(&tmp, e))?;
    f.write_all(bytes).and_then(|_| f.sync_all()).map_err(|e| ReconError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| ReconError::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| ReconError::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| ReconError::io(path, e))
}

fn f32s(bytes: &[u8]) -> impl Iterator<Item = f64> + '_ {
    bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
}

fn push_f32(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&(v as f32).to_le_bytes());
}

pub fn frame_name(id: usize) -> String {
    format!("{id:06}")
}

pub fn intrinsics_text(k: &Intrinsics) -> String {
    format!("{} {} {} {} {} {}\n", k.fx, k.fy, k.cx, k.cy, k.width, k.height)
}

pub fn parse_intrinsics(text: &str, path: &Path) -> Result<Intrinsics> {
    let tok: Vec<&str> = text.split_whitespace().collect();
    if tok.len() != 6 {
        return Err(ReconError::format(path, format!("expected 6 values, found {}", tok.len())));
    }
    let f = |i: usize| tok[i].parse::<f64>().map_err(|_| ReconError::format(path, format!("bad number '{}'", tok[i])));
    let u = |i: usize| tok[i].parse::<usize>().map_err(|_| ReconError::format(path, format!("bad size '{}'", tok[i])));
    Intrinsics::new(f(0)?, f(1)?, f(2)?, f(3)?, u(4)?, u(5)?).map_err(|e| ReconError::format(path, e.to_string()))
}

pub fn encode_depth(d: &DepthRaster) -> Vec<u8> {
    let mut out = Vec::with_capacity(d.values.len() * 4);
    for &v in &d.values {
        push_f32(&mut out, if v.is_finite() && v > 0.0 { v } else { 0.0 });
    }
    out
}

pub fn decode_depth(bytes: &[u8], k: &Intrinsics, path: &Path) -> Result<DepthRaster> {
    if bytes.len() != k.pixel_count() * 4 {
        return Err(ReconError::format(path, format!("{} bytes, expected {}", bytes.len(), k.pixel_count() * 4)));
    }
    DepthRaster::new(k.width, k.height, f32s(bytes).collect())
}

pub fn encode_rgb(img: &ImageRaster) -> Vec<u8> {
    let mut out = Vec::with_capacity(img.data.len() * 12);
    for px in &img.data {
        for &c in px {
            push_f32(&mut out, c);
        }
    }
    out
}

pub fn decode_rgb(bytes: &[u8], k: &Intrinsics, path: &Path) -> Result<ImageRaster> {
    if bytes.len() != k.pixel_count() * 12 {
        return Err(ReconError::format(path, format!("{} bytes, expected {}", bytes.len(), k.pixel_count() * 12)));
    }
    let v: Vec<f64> = f32s(bytes).collect();
    let data = v.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    ImageRaster::new(k.width, k.height, data).map_err(|e| ReconError::format(path, e.to_string()))
}

pub fn encode_features(uv: &[[f64; 2]], desc: &[Descriptor]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + uv.len() * 4 * (2 + DESCRIPTOR_DIM));
    out.extend_from_slice(&(uv.len() as u32).to_le_bytes());
    for (p, d) in uv.iter().zip(desc) {
        push_f32(&mut out, p[0]);
        push_f32(&mut out, p[1]);
        for &c in d.as_slice() {
            out.extend_from_slice(&c.to_le_bytes());
        }
    }
    out
}

pub fn decode_features(bytes: &[u8], path: &Path) -> Result<(Vec<[f64; 2]>, Vec<Descriptor>)> {
    if bytes.len() < 4 {
        return Err(ReconError::format(path, "missing keypoint count"));
    }
    let n = u32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) as usize;
    let rec = 4 * (2 + DESCRIPTOR_DIM);
    if bytes.len() != 4 + n * rec {
        return Err(ReconError::format(
            path,
            format!("{} bytes for {n} keypoints, expected {}", bytes.len(), 4 + n * rec),
        ));
    }
    let mut uv = Vec::with_capacity(n);
    let mut desc = Vec::with_capacity(n);
    for r in bytes[4..].chunks_exact(rec) {
        let v: Vec<f32> = r.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        uv.push([v[0] as f64, v[1] as f64]);
        let raw: [f32; DESCRIPTOR_DIM] = v[2..].try_into().expect("descriptor length");
        let d = match Descriptor::new(raw) {
            Ok(d) => d,
            Err(_) => {
                let as64: Vec<f64> = raw.iter().map(|&x| x as f64).collect();
                Descriptor::from_unnormalized(&as64).map_err(|e| ReconError::format(path, e.to_string()))?
            }
        };
        desc.push(d);
    }
    Ok((uv, desc))
}

pub fn trajectory_text(poses: &[(usize, RigidPose)]) -> String {
    let mut s = String::new();
    for (id, p) in poses {
        let q = p.quaternion();
        let t = p.translation;
        s.push_str(&format!("{id} {} {} {} {} {} {} {}\n", t.x, t.y, t.z, q[0], q[1], q[2], q[3]));
    }
    s
}

pub fn parse_trajectory(text: &str, path: &Path) -> Result<Vec<(usize, RigidPose)>> {
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let tok: Vec<&str> = line.split_whitespace().collect();
        let bad = || ReconError::format(path, format!("line {}: expected 'id tx ty tz qx qy qz qw'", ln + 1));
        if tok.len() != 8 {
            return Err(bad());
        }
        let id = tok[0].parse::<usize>().map_err(|_| bad())?;
        let v: Vec<f64> =
            tok[1..].iter().map(|t| t.parse::<f64>()).collect::<std::result::Result<_, _>>().map_err(|_| bad())?;
        let qn = (v[3] * v[3] + v[4] * v[4] + v[5] * v[5] + v[6] * v[6]).sqrt();
        if !(qn > 0.0) || v.iter().any(|x| !x.is_finite()) {
            return Err(bad());
        }
        out.push((id, RigidPose::from_quaternion([v[3], v[4], v[5], v[6]], Vec3::new(v[0], v[1], v[2]))));
    }
    Ok(out)
}

pub fn read_trajectory(path: &Path) -> Result<Vec<(usize, RigidPose)>> {
    parse_trajectory(&read_text(path)?, path)
}

fn landmark_text(landmarks: &[Vec<Option<u64>>]) -> String {
    let mut s = String::new();
    for (f, ids) in landmarks.iter().enumerate() {
        for (k, id) in ids.iter().enumerate() {
            if let Some(id) = id {
                s.push_str(&format!("{f} {k} {id}\n"));
            }
        }
    }
    s
}

fn parse_landmarks(text: &str, counts: &[usize], path: &Path) -> Result<Vec<Vec<Option<u64>>>> {
    let mut out: Vec<Vec<Option<u64>>> = counts.iter().map(|&n| vec![None; n]).collect();
    for (ln, line) in text.lines().enumerate() {
        let tok: Vec<&str> = line.split_whitespace().collect();
        if tok.is_empty() {
            continue;
        }
        let bad = || ReconError::format(path, format!("line {}: expected 'frame kp_index landmark_id'", ln + 1));
        if tok.len() != 3 {
            return Err(bad());
        }
        let f = tok[0].parse::<usize>().map_err(|_| bad())?;
        let k = tok[1].parse::<usize>().map_err(|_| bad())?;
        let id = tok[2].parse::<u64>().map_err(|_| bad())?;
        let slot = out.get_mut(f).and_then(|v| v.get_mut(k)).ok_or_else(bad)?;
        *slot = Some(id);
    }
    Ok(out)
}

/// Writes the whole directory; every file goes through [`write_atomic`].
pub fn write_sequence(dir: &Path, seq: &Sequence) -> Result<()> {
    write_atomic(&dir.join("intrinsics.txt"), intrinsics_text(&seq.intrinsics).as_bytes())?;
    let frames = dir.join("frames");
    for (i, f) in seq.frames.iter().enumerate() {
        let n = frame_name(i);
        write_atomic(&frames.join(format!("{n}.rgb")), &encode_rgb(&f.image))?;
        write_atomic(&frames.join(format!("{n}.depth")), &encode_depth(&f.depth))?;
        write_atomic(&frames.join(format!("{n}.feat")), &encode_features(&f.keypoints, &f.descriptors))?;
    }
    if let Some(gt) = &seq.gt {
        let g = dir.join("gt");
        let poses: Vec<(usize, RigidPose)> = gt.poses.iter().cloned().enumerate().collect();
        write_atomic(&g.join("poses.txt"), trajectory_text(&poses).as_bytes())?;
        write_atomic(&g.join("matches.txt"), landmark_text(&gt.landmarks).as_bytes())?;
        for (i, d) in gt.depth.iter().enumerate() {
            write_atomic(&g.join("depth").join(format!("{}.depth", frame_name(i))), &encode_depth(d))?;
        }
    }
    Ok(())
}

fn frame_ids(frames: &Path) -> Result<Vec<usize>> {
    let rd = fs::read_dir(frames).map_err(|e| ReconError::io(frames, e))?;
    let mut ids = Vec::new();
    for entry in rd {
        let entry = entry.map_err(|e| ReconError::io(frames, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(stem) = name.strip_suffix(".depth") {
            let id = stem
                .parse::<usize>()
                .map_err(|_| ReconError::format(entry.path(), "frame files must be named NNNNNN"))?;
            ids.push(id);
        }
    }
    ids.sort_unstable();
    if ids.is_empty() {
        return Err(ReconError::format(frames.join(format!("{}.depth", frame_name(0))), "sequence has no frames"));
    }
    for (expect, &id) in ids.iter().enumerate() {
        if id != expect {
            return Err(ReconError::format(
                frames.join(format!("{}.depth", frame_name(expect))),
                "frame ids must be contiguous from 0",
            ));
        }
    }
    Ok(ids)
}

pub fn read_intrinsics(dir: &Path) -> Result<Intrinsics> {
    let p = dir.join("intrinsics.txt");
    parse_intrinsics(&read_text(&p)?, &p)
}

/// Reads a sequence directory. Errors name the first offending file.
pub fn read_sequence(dir: &Path) -> Result<Sequence> {
    let k = read_intrinsics(dir)?;
    let frames_dir = dir.join("frames");
    let ids = frame_ids(&frames_dir)?;
    let mut frames = Vec::with_capacity(ids.len());
    for id in &ids {
        let n = frame_name(*id);
        let p_rgb = frames_dir.join(format!("{n}.rgb"));
        let p_depth = frames_dir.join(format!("{n}.depth"));
        let p_feat = frames_dir.join(format!("{n}.feat"));
        let image = decode_rgb(&read(&p_rgb)?, &k, &p_rgb)?;
        let depth = decode_depth(&read(&p_depth)?, &k, &p_depth)?;
        let (keypoints, descriptors) = decode_features(&read(&p_feat)?, &p_feat)?;
        frames.push(Frame { image, depth, keypoints, descriptors });
    }
    let gt_dir = dir.join("gt");
    let gt = if gt_dir.join("poses.txt").exists() {
        let p = gt_dir.join("poses.txt");
        let traj = read_trajectory(&p)?;
        let by_id: BTreeMap<usize, RigidPose> = traj.into_iter().collect();
        if by_id.len() != ids.len() || by_id.keys().copied().ne(0..ids.len()) {
            return Err(ReconError::format(&p, format!("expected one pose per frame ({} frames)", ids.len())));
        }
        let counts: Vec<usize> = frames.iter().map(|f| f.keypoints.len()).collect();
        let pm = gt_dir.join("matches.txt");
        let landmarks = if pm.exists() {
            parse_landmarks(&read_text(&pm)?, &counts, &pm)?
        } else {
            counts.iter().map(|&n| vec![None; n]).collect()
        };
        let mut depth = Vec::new();
        if gt_dir.join("depth").exists() {
            for id in &ids {
                let p = gt_dir.join("depth").join(format!("{}.depth", frame_name(*id)));
                depth.push(decode_depth(&read(&p)?, &k, &p)?);
            }
        }
        Some(GroundTruth { poses: by_id.into_values().collect(), landmarks, depth })
    } else {
        None
    };
    Ok(Sequence { intrinsics: k, frames, gt })
}

/// One `frame_a kp_a frame_b kp_b` line per match.
pub fn matches_text(matches: &[FrameMatch]) -> String {
    matches.iter().map(|m| format!("{} {} {} {}\n", m.frame_a, m.kp_a, m.frame_b, m.kp_b)).collect()
}

pub fn parse_matches(text: &str, path: &Path) -> Result<Vec<FrameMatch>> {
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let tok: Vec<&str> = line.split_whitespace().collect();
        if tok.is_empty() {
            continue;
        }
        let v: Vec<usize> = tok.iter().filter_map(|t| t.parse().ok()).collect();
        if tok.len() != 4 || v.len() != 4 {
            return Err(ReconError::format(path, format!("line {}: expected 'frame_a kp_a frame_b kp_b'", ln + 1)));
        }
        out.push(FrameMatch { frame_a: v[0], kp_a: v[1], frame_b: v[2], kp_b: v[3] });
    }
    Ok(out)
}

/// Output paths of a run.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub trajectory: PathBuf,
    pub mesh: PathBuf,
    pub edges: PathBuf,
    pub report: PathBuf,
    pub matches: PathBuf,
}

impl RunPaths {
    pub fn in_dir(dir: &Path) -> Self {
        RunPaths {
            trajectory: dir.join("trajectory.txt"),
            mesh: dir.join("mesh.ply"),
            edges: dir.join("connectivity.txt"),
            report: dir.join("report.txt"),
            matches: dir.join("matches.txt"),
        }
    }
}
