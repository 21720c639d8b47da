//! Sparse TSDF volume, surface extraction and the fragment fusion gate.

pub mod marching_cubes;

use std::collections::{BTreeSet, HashMap};
use std::io::Write;

use crate::error::{ReconError, Result};
use crate::geometry::{DepthRaster, ImageRaster, Intrinsics, RigidPose, Vec3};

pub const BLOCK: i64 = 8;
const BLOCK_VOXELS: usize = (BLOCK * BLOCK * BLOCK) as usize;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TsdfConfig {
    pub voxel_size_cm: f64,
    /// Truncation distance in voxels.
    pub truncation_voxels: f64,
    pub max_weight: f64,
}

impl Default for TsdfConfig {
    fn default() -> Self {
        TsdfConfig { voxel_size_cm: 0.2, truncation_voxels: 3.0, max_weight: 128.0 }
    }
}

impl TsdfConfig {
    pub fn truncation_cm(&self) -> f64 {
        self.voxel_size_cm * self.truncation_voxels
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.voxel_size_cm > 0.0) || !(self.truncation_voxels > 0.0) || !(self.max_weight >= 1.0) {
            return Err(ReconError::Config(format!("invalid tsdf settings {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub tsdf: Vec<f64>,
    pub weight: Vec<f64>,
    pub color: Vec<[f64; 3]>,
}

impl Block {
    fn new() -> Self {
        Block { tsdf: vec![1.0; BLOCK_VOXELS], weight: vec![0.0; BLOCK_VOXELS], color: vec![[0.0; 3]; BLOCK_VOXELS] }
    }
}

pub type BlockKey = [i64; 3];

fn local_index(v: [i64; 3]) -> usize {
    let l = v.map(|c| c.rem_euclid(BLOCK) as usize);
    l[0] + 8 * (l[1] + 8 * l[2])
}

fn block_of(v: [i64; 3]) -> BlockKey {
    v.map(|c| c.div_euclid(BLOCK))
}

/// Voxel `v` sits at `v * voxel_size` in world coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct TsdfVolume {
    pub config: TsdfConfig,
    blocks: HashMap<BlockKey, Block>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Voxel {
    pub tsdf: f64,
    pub weight: f64,
    pub color: [f64; 3],
}

impl TsdfVolume {
    pub fn new(config: TsdfConfig) -> Result<Self> {
        config.validate()?;
        Ok(TsdfVolume { config, blocks: HashMap::new() })
    }

    /// Volume sampled from an analytic signed distance over the box
    /// `[min, max]`, every voxel with weight 1.
    pub fn from_sdf(config: TsdfConfig, min: Vec3, max: Vec3, sdf: impl Fn(&Vec3) -> f64) -> Result<Self> {
        let mut vol = TsdfVolume::new(config)?;
        let s = config.voxel_size_cm;
        let trunc = config.truncation_cm();
        let lo = [min.x, min.y, min.z].map(|c| (c / s).floor() as i64);
        let hi = [max.x, max.y, max.z].map(|c| (c / s).ceil() as i64);
        for z in lo[2]..=hi[2] {
            for y in lo[1]..=hi[1] {
                for x in lo[0]..=hi[0] {
                    let p = Vec3::new(x as f64, y as f64, z as f64) * s;
                    let b = vol.blocks.entry(block_of([x, y, z])).or_insert_with(Block::new);
                    let i = local_index([x, y, z]);
                    b.tsdf[i] = (sdf(&p) / trunc).clamp(-1.0, 1.0);
                    b.weight[i] = 1.0;
                    b.color[i] = [0.5; 3];
                }
            }
        }
        Ok(vol)
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn block_keys(&self) -> Vec<BlockKey> {
        let mut k: Vec<BlockKey> = self.blocks.keys().copied().collect();
        k.sort();
        k
    }

    pub fn voxel(&self, v: [i64; 3]) -> Option<Voxel> {
        let b = self.blocks.get(&block_of(v))?;
        let i = local_index(v);
        Some(Voxel { tsdf: b.tsdf[i], weight: b.weight[i], color: b.color[i] })
    }

    pub fn voxel_position(&self, v: [i64; 3]) -> Vec3 {
        Vec3::new(v[0] as f64, v[1] as f64, v[2] as f64) * self.config.voxel_size_cm
    }

    /// Blocks that can contain a voxel within truncation of an observed
    /// surface point: the union over valid pixels of the bounding boxes of
    /// the pixel's frustum slab `[d - trunc, d + trunc]`.
    pub fn touched_blocks(&self, depth: &DepthRaster, pose: &RigidPose, k: &Intrinsics) -> Result<BTreeSet<BlockKey>> {
        depth.check_shape(k)?;
        let s = self.config.voxel_size_cm;
        let trunc = self.config.truncation_cm();
        let mut out = BTreeSet::new();
        for y in 0..depth.height {
            for x in 0..depth.width {
                if !depth.is_valid_at(x, y) {
                    continue;
                }
                let d = depth.get(x, y);
                let mut lo = Vec3::repeat(f64::INFINITY);
                let mut hi = Vec3::repeat(f64::NEG_INFINITY);
                for z in [(d - trunc).max(1e-6), d + trunc] {
                    for (du, dv) in [(-0.5, -0.5), (0.5, -0.5), (-0.5, 0.5), (0.5, 0.5)] {
                        let p = pose.transform_point(&k.backproject_unchecked([x as f64 + du, y as f64 + dv], z));
                        lo = lo.inf(&p);
                        hi = hi.sup(&p);
                    }
                }
                let vlo = [lo.x, lo.y, lo.z].map(|c| ((c / s).floor() as i64).div_euclid(BLOCK));
                let vhi = [hi.x, hi.y, hi.z].map(|c| ((c / s).ceil() as i64).div_euclid(BLOCK));
                for bz in vlo[2]..=vhi[2] {
                    for by in vlo[1]..=vhi[1] {
                        for bx in vlo[0]..=vhi[0] {
                            out.insert([bx, by, bz]);
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Integrates one posed RGB-D frame (`pose` maps camera to world).
    /// Voxels in the touched blocks are updated with a running weighted
    /// average when their projective signed distance is at least `-trunc`.
    pub fn integrate(
        &mut self,
        depth: &DepthRaster,
        image: &ImageRaster,
        pose: &RigidPose,
        k: &Intrinsics,
    ) -> Result<()> {
        if image.width != depth.width || image.height != depth.height {
            return Err(ReconError::DimensionMismatch(format!(
                "image {}x{} vs depth {}x{}",
                image.width, image.height, depth.width, depth.height
            )));
        }
        let touched = self.touched_blocks(depth, pose, k)?;
        let mut work: Vec<(BlockKey, Block)> =
            touched.into_iter().map(|key| (key, self.blocks.remove(&key).unwrap_or_else(Block::new))).collect();
        let world_to_cam = pose.inverse();
        let cfg = self.config;
        let update =
            |(key, block): &mut (BlockKey, Block)| update_block(*key, block, depth, image, &world_to_cam, k, &cfg);
        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            work.par_iter_mut().for_each(update);
        }
        #[cfg(not(feature = "parallel"))]
        work.iter_mut().for_each(update);
        self.blocks.extend(work);
        Ok(())
    }

    /// Marching-cubes surface over all cubes whose eight corners have been
    /// observed.
    pub fn extract_mesh(&self) -> Mesh {
        let table = marching_cubes::case_table();
        let mut mesh = Mesh::default();
        let mut vertex_ids: HashMap<([i64; 3], usize), u32> = HashMap::new();
        for key in self.block_keys() {
            for lz in 0..BLOCK {
                for ly in 0..BLOCK {
                    for lx in 0..BLOCK {
                        let v = [key[0] * BLOCK + lx, key[1] * BLOCK + ly, key[2] * BLOCK + lz];
                        let mut corners = [Voxel { tsdf: 0.0, weight: 0.0, color: [0.0; 3] }; 8];
                        let mut complete = true;
                        for (c, off) in marching_cubes::CORNERS.iter().enumerate() {
                            match self.voxel([v[0] + off[0], v[1] + off[1], v[2] + off[2]]) {
                                Some(vx) if vx.weight > 0.0 => corners[c] = vx,
                                _ => {
                                    complete = false;
                                    break;
                                }
                            }
                        }
                        if !complete {
                            continue;
                        }
                        let case = (0..8).fold(0usize, |acc, c| acc | (usize::from(corners[c].tsdf < 0.0) << c));
                        for tri in &table[case] {
                            let ids = tri.map(|e| self.edge_vertex(v, e, &corners, &mut vertex_ids, &mut mesh));
                            if ids[0] != ids[1]
                                && ids[1] != ids[2]
                                && ids[0] != ids[2]
                                && mesh.triangle_area(ids) > 1e-14
                            {
                                mesh.triangles.push(ids);
                            }
                        }
                    }
                }
            }
        }
        mesh
    }

    fn edge_vertex(
        &self,
        v: [i64; 3],
        edge: usize,
        corners: &[Voxel; 8],
        ids: &mut HashMap<([i64; 3], usize), u32>,
        mesh: &mut Mesh,
    ) -> u32 {
        let [a, b] = marching_cubes::EDGES[edge];
        let (oa, ob) = (marching_cubes::CORNERS[a], marching_cubes::CORNERS[b]);
        let ga = [v[0] + oa[0], v[1] + oa[1], v[2] + oa[2]];
        let gb = [v[0] + ob[0], v[1] + ob[1], v[2] + ob[2]];
        let (lo, hi, clo, chi) =
            if ga <= gb { (ga, gb, corners[a], corners[b]) } else { (gb, ga, corners[b], corners[a]) };
        let axis = (0..3).find(|&i| lo[i] != hi[i]).expect("axis edge");
        // A crossing that lands exactly on a voxel is shared by every edge
        // touching it; key it by the voxel or neighbouring cells disagree.
        let key = if clo.tsdf == 0.0 {
            (lo, 3)
        } else if chi.tsdf == 0.0 {
            (hi, 3)
        } else {
            (lo, axis)
        };
        *ids.entry(key).or_insert_with(|| {
            let t = clo.tsdf / (clo.tsdf - chi.tsdf);
            let p = self.voxel_position(lo) * (1.0 - t) + self.voxel_position(hi) * t;
            let c: [f64; 3] = std::array::from_fn(|i| clo.color[i] * (1.0 - t) + chi.color[i] * t);
            mesh.vertices.push(p);
            mesh.colors.push(c);
            (mesh.vertices.len() - 1) as u32
        })
    }
}

fn update_block(
    key: BlockKey,
    block: &mut Block,
    depth: &DepthRaster,
    image: &ImageRaster,
    world_to_cam: &RigidPose,
    k: &Intrinsics,
    cfg: &TsdfConfig,
) {
    let trunc = cfg.truncation_cm();
    for lz in 0..BLOCK {
        for ly in 0..BLOCK {
            for lx in 0..BLOCK {
                let v = [key[0] * BLOCK + lx, key[1] * BLOCK + ly, key[2] * BLOCK + lz];
                let p = Vec3::new(v[0] as f64, v[1] as f64, v[2] as f64) * cfg.voxel_size_cm;
                let q = world_to_cam.transform_point(&p);
                let Some(uv) = k.project(&q) else { continue };
                let (x, y) = (uv[0].round() as usize, uv[1].round() as usize);
                if !depth.is_valid_at(x, y) {
                    continue;
                }
                let sdf = depth.get(x, y) - q.z;
                if sdf < -trunc {
                    continue;
                }
                let obs = (sdf / trunc).min(1.0);
                let rgb = image.get(x, y);
                let i = local_index(v);
                let w = block.weight[i];
                if w == 0.0 {
                    block.tsdf[i] = obs;
                    block.color[i] = rgb;
                    block.weight[i] = 1.0;
                } else {
                    block.tsdf[i] = (w * block.tsdf[i] + obs) / (w + 1.0);
                    for (c, v) in block.color[i].iter_mut().zip(rgb) {
                        *c = (w * *c + v) / (w + 1.0);
                    }
                    block.weight[i] = (w + 1.0).min(cfg.max_weight);
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Mesh {
    pub vertices: Vec<Vec3>,
    pub colors: Vec<[f64; 3]>,
    pub triangles: Vec<[u32; 3]>,
}

impl Mesh {
    pub fn triangle_area(&self, t: [u32; 3]) -> f64 {
        let [a, b, c] = t.map(|i| self.vertices[i as usize]);
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    pub fn write_ply(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "ply\nformat ascii 1.0")?;
        writeln!(out, "element vertex {}", self.vertices.len())?;
        writeln!(out, "property float x\nproperty float y\nproperty float z")?;
        writeln!(out, "property uchar red\nproperty uchar green\nproperty uchar blue")?;
        writeln!(out, "element face {}", self.triangles.len())?;
        writeln!(out, "property list uchar int vertex_indices\nend_header")?;
        for (p, c) in self.vertices.iter().zip(&self.colors) {
            let [r, g, b] = c.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8);
            writeln!(out, "{} {} {} {r} {g} {b}", p.x as f32, p.y as f32, p.z as f32)?;
        }
        for t in &self.triangles {
            writeln!(out, "3 {} {} {}", t[0], t[1], t[2])?;
        }
        Ok(())
    }

    /// Undirected edges used by exactly one triangle.
    pub fn boundary_edge_count(&self) -> usize {
        let mut count: HashMap<(u32, u32), usize> = HashMap::new();
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                *count.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
        count.values().filter(|&&n| n == 1).count()
    }
}

/// Fusion bookkeeping of one fragment.
#[derive(Debug, Clone, PartialEq)]
pub struct FragmentFusionState {
    pub fragment: usize,
    pub keyframe_position: Vec3,
    /// Latest frame index at which the fragment was observed.
    pub last_inspected: usize,
    pub fused: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionGate {
    pub min_frame_gap: usize,
    pub min_distance_cm: f64,
}

impl Default for FusionGate {
    fn default() -> Self {
        FusionGate { min_frame_gap: 90, min_distance_cm: 3.0 }
    }
}

impl FusionGate {
    pub fn validate(&self) -> Result<()> {
        if self.min_frame_gap == 0 || !(self.min_distance_cm > 0.0) {
            return Err(ReconError::Config(format!("invalid fusion gate {self:?}")));
        }
        Ok(())
    }
}

/// Fragments that are ready for integration at `current_frame`: not fused
/// yet, unobserved for more than `min_frame_gap` frames and farther than
/// `min_distance_cm` from the camera. Returned fragments are marked fused.
pub fn fusion_scheduler(
    states: &mut [FragmentFusionState],
    current_frame: usize,
    camera_position: &Vec3,
    gate: &FusionGate,
) -> Vec<usize> {
    let mut out = Vec::new();
    for s in states.iter_mut() {
        if s.fused {
            continue;
        }
        let gap = current_frame.saturating_sub(s.last_inspected);
        let dist = (s.keyframe_position - camera_position).norm();
        if gap > gate.min_frame_gap && dist > gate.min_distance_cm {
            s.fused = true;
            out.push(s.fragment);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn k() -> Intrinsics {
        Intrinsics::new(60.0, 60.0, 39.5, 31.5, 80, 64).unwrap()
    }

    fn sphere_sdf(c: Vec3, r: f64) -> impl Fn(&Vec3) -> f64 {
        move |p| (p - c).norm() - r
    }

    fn euler_characteristic(m: &Mesh) -> i64 {
        let mut edges = std::collections::HashSet::new();
        for t in &m.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                edges.insert((a.min(b), a.max(b)));
            }
        }
        let used: std::collections::HashSet<u32> = m.triangles.iter().flatten().copied().collect();
        used.len() as i64 - edges.len() as i64 + m.triangles.len() as i64
    }

    #[test]
    fn surface_through_voxel_centres_stays_closed() {
        // Radius 1 on a 0.2 grid puts exact zeros on the axes.
        let vol = TsdfVolume::from_sdf(
            TsdfConfig::default(),
            Vec3::repeat(-1.5),
            Vec3::repeat(1.5),
            sphere_sdf(Vec3::zeros(), 1.0),
        )
        .unwrap();
        let m = vol.extract_mesh();
        assert_eq!(m.boundary_edge_count(), 0);
        assert_eq!(euler_characteristic(&m), 2);
    }

    #[test]
    fn sphere_mesh_is_closed_and_accurate() {
        let cfg = TsdfConfig::default();
        let c = Vec3::new(0.31, -0.17, 0.07);
        let vol = TsdfVolume::from_sdf(cfg, Vec3::repeat(-1.5), Vec3::repeat(1.5), sphere_sdf(c, 1.0)).unwrap();
        let m = vol.extract_mesh();
        assert!(!m.triangles.is_empty());
        assert_eq!(m.boundary_edge_count(), 0);
        assert_eq!(euler_characteristic(&m), 2);
        for p in &m.vertices {
            assert!(((p - c).norm() - 1.0).abs() < cfg.voxel_size_cm / 2.0);
        }
        // Triangles face outwards (towards positive distance).
        let mut outward = 0;
        for t in &m.triangles {
            let [a, b, cc] = t.map(|i| m.vertices[i as usize]);
            let n = (b - a).cross(&(cc - a));
            if n.dot(&((a + b + cc) / 3.0 - c)) > 0.0 {
                outward += 1;
            }
        }
        assert_eq!(outward, m.triangles.len());
    }

    #[test]
    fn random_fields_are_watertight() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..5 {
            let cfg = TsdfConfig { voxel_size_cm: 0.1, truncation_voxels: 1e6, max_weight: 128.0 };
            let waves: Vec<(Vec3, f64)> = (0..4)
                .map(|_| {
                    (
                        Vec3::new(
                            rng.random_range(-6.0..6.0),
                            rng.random_range(-6.0..6.0),
                            rng.random_range(-6.0..6.0),
                        ),
                        rng.random_range(0.0..6.3),
                    )
                })
                .collect();
            let field = move |p: &Vec3| {
                // Closed surface: bounded bumpy sphere.
                let bump: f64 = waves.iter().map(|(w, ph)| 0.08 * (w.dot(p) + ph).sin()).sum();
                p.norm() - 0.6 + bump
            };
            let vol = TsdfVolume::from_sdf(cfg, Vec3::repeat(-1.2), Vec3::repeat(1.2), field).unwrap();
            let m = vol.extract_mesh();
            assert!(m.triangles.len() > 100);
            assert_eq!(m.boundary_edge_count(), 0);
        }
    }

    fn plane_depth(z: f64) -> DepthRaster {
        DepthRaster::filled(80, 64, z)
    }

    #[test]
    fn plane_zero_crossing() {
        let mut vol = TsdfVolume::new(TsdfConfig::default()).unwrap();
        let img = ImageRaster::filled(80, 64, [0.2, 0.4, 0.6]);
        vol.integrate(&plane_depth(10.0), &img, &RigidPose::identity(), &k()).unwrap();
        let s = vol.config.voxel_size_cm;
        let mut checked = 0;
        for x in -5..5 {
            for y in -5..5 {
                let col: Vec<(i64, f64)> = (40..60)
                    .filter_map(|z| vol.voxel([x, y, z]).filter(|v| v.weight > 0.0).map(|v| (z, v.tsdf)))
                    .collect();
                for w in col.windows(2) {
                    if w[0].1 >= 0.0 && w[1].1 < 0.0 && w[1].0 == w[0].0 + 1 {
                        let t = w[0].1 / (w[0].1 - w[1].1);
                        let z = (w[0].0 as f64 + t) * s;
                        assert!((z - 10.0).abs() < s / 2.0, "z {z}");
                        checked += 1;
                    }
                }
            }
        }
        assert!(checked > 50);
        let v = vol.voxel([0, 0, 50]).unwrap();
        assert!((v.color[1] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn repeated_frame_doubles_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let noise = Normal::new(0.0, 0.05).unwrap();
        let vals = (0..80 * 64).map(|_| 9.0 + noise.sample(&mut rng)).collect();
        let depth = DepthRaster::new(80, 64, vals).unwrap();
        let img = ImageRaster::filled(80, 64, [0.5; 3]);
        let pose = RigidPose::from_axis_angle(Vec3::new(0.0, 0.1, 0.0), Vec3::new(0.3, 0.0, 0.0));
        let mut once = TsdfVolume::new(TsdfConfig::default()).unwrap();
        once.integrate(&depth, &img, &pose, &k()).unwrap();
        let mut twice = once.clone();
        twice.integrate(&depth, &img, &pose, &k()).unwrap();
        assert_eq!(once.block_keys(), twice.block_keys());
        for key in once.block_keys() {
            let (a, b) = (&once.blocks[&key], &twice.blocks[&key]);
            for i in 0..BLOCK_VOXELS {
                assert!((a.tsdf[i] - b.tsdf[i]).abs() < 1e-12);
                assert_eq!(b.weight[i], 2.0 * a.weight[i]);
            }
        }
    }

    #[test]
    fn weight_is_capped() {
        let cfg = TsdfConfig { max_weight: 3.0, ..TsdfConfig::default() };
        let mut vol = TsdfVolume::new(cfg).unwrap();
        let img = ImageRaster::filled(80, 64, [0.5; 3]);
        for _ in 0..5 {
            vol.integrate(&plane_depth(8.0), &img, &RigidPose::identity(), &k()).unwrap();
        }
        let v = vol.voxel([0, 0, 40]).unwrap();
        assert_eq!(v.weight, 3.0);
    }

    #[test]
    fn integration_order_does_not_matter() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let noise = Normal::new(0.0, 0.05).unwrap();
        let frames: Vec<(DepthRaster, RigidPose)> = (0..3)
            .map(|i| {
                let vals = (0..80 * 64).map(|_| 10.0 + noise.sample(&mut rng)).collect();
                (
                    DepthRaster::new(80, 64, vals).unwrap(),
                    RigidPose::from_translation(Vec3::new(0.5 * i as f64, 0.2, -0.3 * i as f64)),
                )
            })
            .collect();
        let img = ImageRaster::filled(80, 64, [0.3; 3]);
        let run = |order: &[usize]| {
            let mut vol = TsdfVolume::new(TsdfConfig::default()).unwrap();
            for &i in order {
                vol.integrate(&frames[i].0, &img, &frames[i].1, &k()).unwrap();
            }
            vol
        };
        let a = run(&[0, 1, 2]);
        let b = run(&[2, 0, 1]);
        assert_eq!(a.block_keys(), b.block_keys());
        for key in a.block_keys() {
            for i in 0..BLOCK_VOXELS {
                assert!((a.blocks[&key].tsdf[i] - b.blocks[&key].tsdf[i]).abs() < 1e-9);
                assert_eq!(a.blocks[&key].weight[i], b.blocks[&key].weight[i]);
            }
        }
    }

    #[test]
    fn allocation_stays_near_observed_surface() {
        let mut vol = TsdfVolume::new(TsdfConfig::default()).unwrap();
        let img = ImageRaster::filled(80, 64, [0.3; 3]);
        vol.integrate(&plane_depth(10.0), &img, &RigidPose::identity(), &k()).unwrap();
        let s = vol.config.voxel_size_cm;
        let trunc = vol.config.truncation_cm();
        let slack = BLOCK as f64 * s;
        for key in vol.block_keys() {
            let zmin = key[2] as f64 * BLOCK as f64 * s;
            let zmax = zmin + (BLOCK - 1) as f64 * s;
            assert!(zmax >= 10.0 - trunc - slack && zmin <= 10.0 + trunc + slack, "block {key:?}");
        }
        let empty = DepthRaster::filled(80, 64, 0.0);
        let mut v2 = TsdfVolume::new(TsdfConfig::default()).unwrap();
        v2.integrate(&empty, &img, &RigidPose::identity(), &k()).unwrap();
        assert_eq!(v2.block_count(), 0);
    }

    /// Raycast depth of a sphere seen from the origin.
    fn sphere_depth(c: Vec3, r: f64, noise: &Normal<f64>, rng: &mut ChaCha8Rng) -> DepthRaster {
        let k = k();
        let mut vals = vec![0.0; 80 * 64];
        for y in 0..64 {
            for x in 0..80 {
                let d = k.ray([x as f64, y as f64]);
                let dn = d.normalize();
                let b = dn.dot(&c);
                let disc = b * b - (c.norm_squared() - r * r);
                if disc > 0.0 {
                    let t = b - disc.sqrt();
                    vals[y * 80 + x] = t * dn.z + noise.sample(rng);
                }
            }
        }
        DepthRaster::new(80, 64, vals).unwrap()
    }

    #[test]
    fn averaging_two_noisy_views_reduces_error() {
        let c = Vec3::new(0.0, 0.0, 12.0);
        let r = 4.0;
        let noise = Normal::new(0.0, 0.08).unwrap();
        let img = ImageRaster::filled(80, 64, [0.5; 3]);
        let mut e1 = 0.0;
        let mut e2 = 0.0;
        for seed in 0..4 {
            let mut rng = ChaCha8Rng::seed_from_u64(10 + seed);
            let d1 = sphere_depth(c, r, &noise, &mut rng);
            let d2 = sphere_depth(c, r, &noise, &mut rng);
            let mut vol = TsdfVolume::new(TsdfConfig::default()).unwrap();
            vol.integrate(&d1, &img, &RigidPose::identity(), &k()).unwrap();
            let err = |m: &Mesh| {
                (m.vertices.iter().map(|p| ((p - c).norm() - r).powi(2)).sum::<f64>() / m.vertices.len() as f64).sqrt()
            };
            e1 += err(&vol.extract_mesh());
            vol.integrate(&d2, &img, &RigidPose::identity(), &k()).unwrap();
            e2 += err(&vol.extract_mesh());
        }
        assert!(e2 < e1, "two views {e2} vs one {e1}");
    }

    #[test]
    fn ply_header_and_counts() {
        let vol = TsdfVolume::from_sdf(
            TsdfConfig::default(),
            Vec3::repeat(-1.0),
            Vec3::repeat(1.0),
            sphere_sdf(Vec3::zeros(), 0.5),
        )
        .unwrap();
        let m = vol.extract_mesh();
        let mut buf = Vec::new();
        m.write_ply(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("ply\nformat ascii 1.0\n"));
        assert!(text.contains(&format!("element vertex {}\n", m.vertices.len())));
        let body = text.split("end_header\n").nth(1).unwrap();
        assert_eq!(body.lines().count(), m.vertices.len() + m.triangles.len());
    }

    #[test]
    fn scheduler_gate() {
        let gate = FusionGate::default();
        let mut s = vec![FragmentFusionState {
            fragment: 0,
            keyframe_position: Vec3::zeros(),
            last_inspected: 10,
            fused: false,
        }];
        assert!(fusion_scheduler(&mut s, 100, &Vec3::new(5.0, 0.0, 0.0), &gate).is_empty());
        assert!(fusion_scheduler(&mut s, 101, &Vec3::new(2.0, 0.0, 0.0), &gate).is_empty());
        assert_eq!(fusion_scheduler(&mut s, 101, &Vec3::new(5.0, 0.0, 0.0), &gate), vec![0]);
        assert!(s[0].fused);
        assert!(fusion_scheduler(&mut s, 500, &Vec3::new(50.0, 0.0, 0.0), &gate).is_empty());
    }
}
