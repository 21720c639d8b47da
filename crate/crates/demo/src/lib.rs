//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Each exported function takes plain numbers and returns flat arrays or a
//! string so the page needs no generated glue beyond `wasm-bindgen`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use wasm_bindgen::prelude::*;

use recon_core::fragments::{should_create_fragment, FragmentConfig, FragmentDecision};
use recon_core::fusion::{Mesh, TsdfConfig, TsdfVolume};
use recon_core::geometry::{RigidPose, Vec3};
use recon_core::matching::estimate_rigid;

fn text(e: impl std::fmt::Display) -> String {
    e.to_string()
}

/// Plants a random rigid motion on `n` points in a 20 cm cube, perturbs the
/// targets with Gaussian noise and recovers the motion.
///
/// Returns `[rotation error deg, translation error cm, rms residual cm]`.
#[wasm_bindgen]
pub fn rigid_fit(n: usize, noise_cm: f64, seed: u32) -> Result<Vec<f64>, String> {
    if !(noise_cm.is_finite() && noise_cm >= 0.0) {
        return Err(format!("noise must be a non-negative number, got {noise_cm}"));
    }
    let mut r = ChaCha8Rng::seed_from_u64(seed.into());
    let gauss = Normal::new(0.0, 1.0).map_err(text)?;
    let q: [f64; 4] = std::array::from_fn(|_| gauss.sample(&mut r));
    let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let t = Vec3::from_fn(|_, _| r.random_range(-30.0..30.0));
    let truth = RigidPose::from_quaternion(q.map(|v| v / norm), t);

    let src: Vec<Vec3> = (0..n).map(|_| Vec3::from_fn(|_, _| r.random_range(-10.0..10.0))).collect();
    let dst: Vec<Vec3> =
        src.iter().map(|p| truth.transform_point(p) + Vec3::from_fn(|_, _| noise_cm * gauss.sample(&mut r))).collect();
    let est = estimate_rigid(&src, &dst).map_err(text)?;
    let rms =
        (src.iter().zip(&dst).map(|(p, q)| (est.transform_point(p) - q).norm_squared()).sum::<f64>() / n as f64).sqrt();
    Ok(vec![est.rotation_angle_to(&truth).to_degrees(), (est.translation - truth.translation).norm(), rms])
}

fn sphere(radius: f64, voxel: f64) -> Result<Mesh, String> {
    if !(radius > 0.0 && voxel > 0.0 && radius / voxel <= 80.0) {
        return Err(format!("need radius > 0, voxel > 0 and radius/voxel <= 80 (got {radius}, {voxel})"));
    }
    let cfg = TsdfConfig { voxel_size_cm: voxel, ..TsdfConfig::default() };
    let extent = Vec3::repeat(radius + 3.0 * voxel);
    let vol = TsdfVolume::from_sdf(cfg, -extent, extent, |p| p.norm() - radius).map_err(text)?;
    Ok(vol.extract_mesh())
}

/// Fuses the signed distance of a sphere and extracts its mesh.
///
/// Returns `[vertices, triangles, boundary edges, mean radial error cm]`.
#[wasm_bindgen]
pub fn sphere_mesh_stats(radius: f64, voxel: f64) -> Result<Vec<f64>, String> {
    let m = sphere(radius, voxel)?;
    let radial = m.vertices.iter().map(|v| (v.norm() - radius).abs()).sum::<f64>() / m.vertices.len().max(1) as f64;
    Ok(vec![m.vertices.len() as f64, m.triangles.len() as f64, m.boundary_edge_count() as f64, radial])
}

/// Wireframe of the sphere mesh, rotated by `yaw` and `pitch` (radians) and
/// projected orthographically. Flat `[x0, y0, x1, y1, ...]` per edge, in cm.
#[wasm_bindgen]
pub fn sphere_wireframe(radius: f64, voxel: f64, yaw: f64, pitch: f64) -> Result<Vec<f32>, String> {
    let m = sphere(radius, voxel)?;
    let view = RigidPose::from_axis_angle(Vec3::new(pitch, 0.0, 0.0), Vec3::zeros())
        .compose(&RigidPose::from_axis_angle(Vec3::new(0.0, yaw, 0.0), Vec3::zeros()));
    let pts: Vec<Vec3> = m.vertices.iter().map(|v| view.transform_point(v)).collect();
    let mut out = Vec::with_capacity(m.triangles.len() * 12);
    for tri in &m.triangles {
        let [a, b, c] = tri.map(|i| pts[i as usize]);
        // Back faces are skipped so the far side does not clutter the view.
        if (b - a).cross(&(c - a)).z < 0.0 {
            continue;
        }
        for (p, q) in [(a, b), (b, c), (c, a)] {
            out.extend([p.x as f32, p.y as f32, q.x as f32, q.y as f32]);
        }
    }
    Ok(out)
}

/// Whether a keyframe with `corrs` filtered matches and the given overlap
/// stays in the current fragment. A negative overlap means no pose.
#[wasm_bindgen]
pub fn fragment_decision(corrs: usize, overlap: f64) -> String {
    let overlap = (overlap >= 0.0).then_some(overlap);
    let cfg = FragmentConfig::default();
    let decision = should_create_fragment(corrs, overlap, &cfg);
    let why = match overlap {
        None => "no relative pose".to_string(),
        Some(o) if corrs < cfg.min_consecutive_corrs && o < cfg.min_frustum_overlap => {
            format!(
                "{corrs} < {} matches and overlap {o:.2} < {:.2}",
                cfg.min_consecutive_corrs, cfg.min_frustum_overlap
            )
        }
        Some(_) if corrs < cfg.min_consecutive_corrs => format!("{corrs} < {} matches", cfg.min_consecutive_corrs),
        Some(o) if o < cfg.min_frustum_overlap => format!("overlap {o:.2} < {:.2}", cfg.min_frustum_overlap),
        Some(_) => "enough matches and overlap".to_string(),
    };
    match decision {
        FragmentDecision::Append => format!("append: {why}"),
        FragmentDecision::NewFragment => format!("new fragment: {why}"),
    }
}
