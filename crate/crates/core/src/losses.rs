//! Forward numeric kernels of the self-supervised depth losses and the
//! contrastive descriptor loss, plus the masking procedures around them.
//! Nothing here learns; the kernels score warps and matches.

use crate::error::{ReconError, Result};
use crate::geometry::{is_valid_depth, DepthRaster, ImageRaster};
use crate::matching::Descriptor;

pub use crate::geometry::PixelMask;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_ph_extra: f64,
    pub lambda_dc: f64,
    /// Temperature of the contrastive loss.
    pub tau: f64,
    pub alpha_ssim: f64,
    /// Pixels whose error exceeds this percentile of their pair are dropped.
    pub outlier_percentile: f64,
    /// Side of the square SSIM window (odd).
    pub ssim_window: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_ph_extra: 0.1,
            lambda_dc: 0.1,
            tau: 0.01,
            alpha_ssim: 0.85,
            outlier_percentile: 80.0,
            ssim_window: 3,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lambda_ph_extra > 0.0
            && self.lambda_dc > 0.0
            && self.tau > 0.0
            && (0.0..=1.0).contains(&self.alpha_ssim)
            && self.outlier_percentile > 0.0
            && self.outlier_percentile <= 100.0
            && self.ssim_window % 2 == 1;
        if ok {
            Ok(())
        } else {
            Err(ReconError::InvalidInput(format!("invalid loss weights {self:?}")))
        }
    }
}

/// Per-pixel scalar field (SSIM, photometric error, ...).
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarRaster {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl ScalarRaster {
    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }
}

pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

fn check_same(a: &ImageRaster, b: &ImageRaster) -> Result<()> {
    if !a.same_shape(b) {
        return Err(ReconError::DimensionMismatch(format!("{}x{} vs {}x{}", a.width, a.height, b.width, b.height)));
    }
    Ok(())
}

#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * (n - 1) - i;
    }
    i.clamp(0, n - 1) as usize
}

/// SSIM with the default 3x3 window.
pub fn ssim(a: &ImageRaster, b: &ImageRaster) -> Result<ScalarRaster> {
    ssim_windowed(a, b, 3)
}

/// Per-pixel SSIM over a `window x window` box with reflection padding,
/// averaged over the three channels.
pub fn ssim_windowed(a: &ImageRaster, b: &ImageRaster, window: usize) -> Result<ScalarRaster> {
    check_same(a, b)?;
    if window.is_multiple_of(2) || window == 0 {
        return Err(ReconError::InvalidInput(format!("SSIM window must be odd, got {window}")));
    }
    let r = (window / 2) as isize;
    let (w, h) = (a.width, a.height);
    if r > 0 && (w <= r as usize || h <= r as usize) {
        return Err(ReconError::InvalidInput("raster smaller than SSIM window".into()));
    }
    let n = (window * window) as f64;
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for ch in 0..3 {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in -r..=r {
                    let yy = reflect(y as isize + dy, h);
                    for dx in -r..=r {
                        let xx = reflect(x as isize + dx, w);
                        let va = a.get(xx, yy)[ch];
                        let vb = b.get(xx, yy)[ch];
                        sa += va;
                        sb += vb;
                        saa += va * va;
                        sbb += vb * vb;
                        sab += va * vb;
                    }
                }
                let (mu_a, mu_b) = (sa / n, sb / n);
                let var_a = saa / n - mu_a * mu_a;
                let var_b = sbb / n - mu_b * mu_b;
                let cov = sab / n - mu_a * mu_b;
                let num = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2);
                let den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2);
                acc += num / den;
            }
            out[y * w + x] = acc / 3.0;
        }
    }
    Ok(ScalarRaster { width: w, height: h, values: out })
}

/// `alpha * (1 - SSIM) / 2 + (1 - alpha) * L1`, channel averaged.
pub fn photometric_error(a: &ImageRaster, b: &ImageRaster, w: &LossWeights) -> Result<ScalarRaster> {
    let s = ssim_windowed(a, b, w.ssim_window)?;
    let values = s
        .values
        .iter()
        .zip(a.data.iter().zip(&b.data))
        .map(|(&ss, (pa, pb))| {
            let l1 = (0..3).map(|c| (pa[c] - pb[c]).abs()).sum::<f64>() / 3.0;
            let dssim = ((1.0 - ss) / 2.0).clamp(0.0, 1.0);
            w.alpha_ssim * dssim + (1.0 - w.alpha_ssim) * l1
        })
        .collect();
    Ok(ScalarRaster { width: a.width, height: a.height, values })
}

fn per_pixel_min(
    target: &ImageRaster,
    candidates: &[(&ImageRaster, Option<&PixelMask>)],
    w: &LossWeights,
) -> Result<Vec<f64>> {
    let mut best = vec![f64::INFINITY; target.width * target.height];
    for (img, mask) in candidates {
        if let Some(m) = mask {
            if !m.same_shape(target.width, target.height) {
                return Err(ReconError::DimensionMismatch("mask shape".into()));
            }
        }
        let pe = photometric_error(target, img, w)?;
        for (i, &e) in pe.values.iter().enumerate() {
            if mask.is_none_or(|m| m.data[i]) && e < best[i] {
                best[i] = e;
            }
        }
    }
    Ok(best)
}

/// Auto-mask: keeps pixels where the best warped candidate explains the
/// target better than the best unwarped source does (static pixels and
/// pixels moving with the camera fail this test).
pub fn auto_mask(
    target: &ImageRaster,
    warps: &[(ImageRaster, PixelMask)],
    sources: &[ImageRaster],
    w: &LossWeights,
) -> Result<PixelMask> {
    if warps.is_empty() {
        return Err(ReconError::Empty("no warped candidates".into()));
    }
    let warped: Vec<_> = warps.iter().map(|(i, m)| (i, Some(m))).collect();
    let unwarped: Vec<_> = sources.iter().map(|i| (i, None)).collect();
    let best_warped = per_pixel_min(target, &warped, w)?;
    let best_identity = per_pixel_min(target, &unwarped, w)?;
    Ok(PixelMask {
        width: target.width,
        height: target.height,
        data: best_warped.iter().zip(&best_identity).map(|(a, b)| a < b).collect(),
    })
}

/// Per-pixel minimum photometric error over the warped candidates, averaged
/// over pixels that pass `mu` and have at least one valid candidate.
/// Returns 0 when no pixel qualifies.
pub fn min_photometric_loss(
    target: &ImageRaster,
    warps: &[(ImageRaster, PixelMask)],
    mu: &PixelMask,
    w: &LossWeights,
) -> Result<f64> {
    if warps.is_empty() {
        return Err(ReconError::Empty("no warped candidates".into()));
    }
    if !mu.same_shape(target.width, target.height) {
        return Err(ReconError::DimensionMismatch("auto-mask shape".into()));
    }
    let cands: Vec<_> = warps.iter().map(|(i, m)| (i, Some(m))).collect();
    let best = per_pixel_min(target, &cands, w)?;
    let (sum, n) = best
        .iter()
        .zip(&mu.data)
        .filter(|(e, &m)| m && e.is_finite())
        .fold((0.0, 0usize), |(s, n), (e, _)| (s + e, n + 1));
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// Ordered frame pairs `(i, j)` of the spatio-temporal consistency set
/// around frame `t`: `i ∈ {t-1, t+1}`, `j ∈ {t-1, t, t+1}`, `i != j`.
pub fn consistency_pairs(t: i64) -> Vec<(i64, i64)> {
    let mut out = Vec::with_capacity(4);
    for i in [t - 1, t + 1] {
        for j in [t - 1, t, t + 1] {
            if i != j {
                out.push((i, j));
            }
        }
    }
    out
}

/// Percentile by linear interpolation on the sorted sample
/// (position `p/100 * (n-1)`).
pub fn percentile(values: &[f64], p: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let pos = (p / 100.0).clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    Some(v[lo] + (v[hi] - v[lo]) * frac)
}

/// Mean of the values not above the given percentile of the sample.
pub fn trimmed_mean(values: &[f64], p: f64) -> Option<f64> {
    let cut = percentile(values, p)?;
    let (s, n) = values.iter().filter(|&&v| v <= cut).fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// One `(I_i, I_{j->i})` pair and the pixels it may use (auto-mask, warp
/// validity and specular exclusion already combined).
#[derive(Debug, Clone)]
pub struct PhotometricPair {
    pub target: ImageRaster,
    pub warped: ImageRaster,
    pub valid: PixelMask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtraLossReport {
    /// Average over all pairs of the outlier-trimmed per-pair means.
    pub value: f64,
    pub per_pair: Vec<f64>,
    /// Indices of pairs with no valid pixel (they contribute 0).
    pub flagged: Vec<usize>,
}

pub fn extra_photometric_loss(pairs: &[PhotometricPair], w: &LossWeights) -> Result<ExtraLossReport> {
    if pairs.is_empty() {
        return Err(ReconError::Empty("no consistency pairs".into()));
    }
    let mut per_pair = Vec::with_capacity(pairs.len());
    let mut flagged = Vec::new();
    for (idx, pair) in pairs.iter().enumerate() {
        if !pair.valid.same_shape(pair.target.width, pair.target.height) {
            return Err(ReconError::DimensionMismatch("pair mask shape".into()));
        }
        let pe = photometric_error(&pair.target, &pair.warped, w)?;
        let sample: Vec<f64> = pe.values.iter().zip(&pair.valid.data).filter(|(_, &m)| m).map(|(&e, _)| e).collect();
        match trimmed_mean(&sample, w.outlier_percentile) {
            Some(v) => per_pair.push(v),
            None => {
                flagged.push(idx);
                per_pair.push(0.0);
            }
        }
    }
    let value = per_pair.iter().sum::<f64>() / pairs.len() as f64;
    Ok(ExtraLossReport { value, per_pair, flagged })
}

fn depth_ratios(d_warped: &DepthRaster, d_interp: &DepthRaster) -> Result<Vec<f64>> {
    if d_warped.width != d_interp.width || d_warped.height != d_interp.height {
        return Err(ReconError::DimensionMismatch("depth rasters differ in shape".into()));
    }
    let ratios: Vec<f64> = d_warped
        .values
        .iter()
        .zip(&d_interp.values)
        .filter(|(&a, &b)| is_valid_depth(a) && is_valid_depth(b))
        .map(|(&a, &b)| (a - b).abs() / (a + b))
        .collect();
    if ratios.is_empty() {
        return Err(ReconError::Empty("no jointly valid depth pixels".into()));
    }
    Ok(ratios)
}

/// Normalised depth difference `|a - b| / (a + b)` averaged over jointly
/// valid pixels.
pub fn depth_consistency_loss(d_warped: &DepthRaster, d_interp: &DepthRaster) -> Result<f64> {
    let r = depth_ratios(d_warped, d_interp)?;
    Ok(r.iter().sum::<f64>() / r.len() as f64)
}

/// As [`depth_consistency_loss`], dropping pixels above the outlier percentile.
pub fn depth_consistency_loss_trimmed(d_warped: &DepthRaster, d_interp: &DepthRaster, percentile: f64) -> Result<f64> {
    let r = depth_ratios(d_warped, d_interp)?;
    Ok(trimmed_mean(&r, percentile).unwrap_or(0.0))
}

/// Inputs of the total loss: the minimum photometric term plus the per-pair
/// extra photometric and depth consistency terms over the pair set.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossComponents {
    pub photometric: f64,
    pub extra: Vec<f64>,
    pub depth_consistency: Vec<f64>,
}

pub fn total_loss(c: &LossComponents, w: &LossWeights) -> f64 {
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    c.photometric + w.lambda_ph_extra * mean(&c.extra) + w.lambda_dc * mean(&c.depth_consistency)
}

const UNIT_NORM_TOL: f64 = 1e-6;

/// Contrastive loss over candidate matches `candidates[m] = (a_m, b_m)`.
/// For each correct candidate `k` the loss is
/// `-log(exp(s_k / tau) / sum_m exp(s_m / tau))` with `s_m = z_i[a_m] . z_j[b_m]`;
/// the result is the mean over `correct`.
pub fn infonce_loss_with_candidates(
    desc_i: &[Descriptor],
    desc_j: &[Descriptor],
    candidates: &[(usize, usize)],
    correct: &[usize],
    tau: f64,
) -> Result<f64> {
    if candidates.is_empty() || correct.is_empty() {
        return Err(ReconError::Empty("no matches for the contrastive loss".into()));
    }
    if !(tau > 0.0) {
        return Err(ReconError::InvalidInput(format!("temperature must be positive, got {tau}")));
    }
    for d in desc_i.iter().chain(desc_j) {
        let n = d.norm();
        if (n - 1.0).abs() > UNIT_NORM_TOL {
            return Err(ReconError::InvalidInput(format!("descriptor norm {n} is not 1")));
        }
    }
    let mut logits = Vec::with_capacity(candidates.len());
    for &(a, b) in candidates {
        let (Some(za), Some(zb)) = (desc_i.get(a), desc_j.get(b)) else {
            return Err(ReconError::InvalidInput(format!("match ({a}, {b}) out of range")));
        };
        logits.push(za.dot(zb) / tau);
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    let mut total = 0.0;
    for &k in correct {
        let l = logits.get(k).ok_or_else(|| ReconError::InvalidInput(format!("correct index {k} out of range")))?;
        total += lse - l;
    }
    Ok(total / correct.len() as f64)
}

/// Contrastive loss where every listed pair is both a candidate and a
/// ground-truth match.
pub fn infonce_loss(
    desc_i: &[Descriptor],
    desc_j: &[Descriptor],
    gt_pairs: &[(usize, usize)],
    tau: f64,
) -> Result<f64> {
    let correct: Vec<usize> = (0..gt_pairs.len()).collect();
    infonce_loss_with_candidates(desc_i, desc_j, gt_pairs, &correct, tau)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpecularConfig {
    /// Threshold on the BT.601 luma, in [0, 1].
    pub y_threshold: f64,
    /// Side of the square dilation kernel in pixels.
    pub kernel: usize,
}

impl Default for SpecularConfig {
    fn default() -> Self {
        SpecularConfig { y_threshold: 0.9, kernel: 13 }
    }
}

#[inline]
pub fn luma(rgb: [f64; 3]) -> f64 {
    0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]
}

/// Mask of specular highlights to exclude (luma threshold then square
/// dilation), with the default threshold and kernel.
pub fn specular_mask(img: &ImageRaster) -> PixelMask {
    specular_mask_with(img, &SpecularConfig::default())
}

pub fn specular_mask_with(img: &ImageRaster, cfg: &SpecularConfig) -> PixelMask {
    let (w, h) = (img.width, img.height);
    let seed: Vec<bool> = img.data.iter().map(|&c| luma(c) >= cfg.y_threshold).collect();
    let lo = (cfg.kernel.max(1) - 1) / 2;
    let hi = cfg.kernel.max(1) - 1 - lo;
    // The square structuring element is separable: dilate rows, then columns.
    let mut rows = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let x0 = x.saturating_sub(hi);
            let x1 = (x + lo).min(w - 1);
            rows[y * w + x] = (x0..=x1).any(|xx| seed[y * w + xx]);
        }
    }
    let mut out = PixelMask::new(w, h, false);
    for y in 0..h {
        let y0 = y.saturating_sub(hi);
        let y1 = (y + lo).min(h - 1);
        for x in 0..w {
            out.data[y * w + x] = (y0..=y1).any(|yy| rows[yy * w + x]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> ImageRaster {
        let data = (0..w * h).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        ImageRaster::new(w, h, data).unwrap()
    }

    /// Direct SSIM formula on explicitly gathered reflected windows.
    fn ssim_oracle(a: &ImageRaster, b: &ImageRaster, x: usize, y: usize) -> f64 {
        let refl = |i: i64, n: usize| -> usize {
            if i < 0 {
                (-i) as usize
            } else if i as usize >= n {
                2 * (n - 1) - i as usize
            } else {
                i as usize
            }
        };
        let mut total = 0.0;
        for ch in 0..3 {
            let mut va = Vec::new();
            let mut vb = Vec::new();
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let xx = refl(x as i64 + dx, a.width);
                    let yy = refl(y as i64 + dy, a.height);
                    va.push(a.get(xx, yy)[ch]);
                    vb.push(b.get(xx, yy)[ch]);
                }
            }
            let n = va.len() as f64;
            let ma = va.iter().sum::<f64>() / n;
            let mb = vb.iter().sum::<f64>() / n;
            let sa = va.iter().map(|v| (v - ma).powi(2)).sum::<f64>() / n;
            let sb = vb.iter().map(|v| (v - mb).powi(2)).sum::<f64>() / n;
            let sab = va.iter().zip(&vb).map(|(p, q)| (p - ma) * (q - mb)).sum::<f64>() / n;
            total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * sab + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (sa + sb + SSIM_C2));
        }
        total / 3.0
    }

    #[test]
    fn ssim_identity_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_image(&mut rng, 9, 7);
        let s = ssim(&a, &a).unwrap();
        assert!(s.values.iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn ssim_constant_black_white_is_near_zero() {
        let a = ImageRaster::filled(5, 5, [0.0; 3]);
        let b = ImageRaster::filled(5, 5, [1.0; 3]);
        let s = ssim(&a, &b).unwrap();
        let expect = SSIM_C1 / (1.0 + SSIM_C1);
        assert!(s.values.iter().all(|v| (v - expect).abs() < 1e-15));
        assert!(expect < 1e-3);
    }

    #[test]
    fn ssim_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_image(&mut rng, 8, 6);
        let b = random_image(&mut rng, 8, 6);
        let s = ssim(&a, &b).unwrap();
        for y in 0..6 {
            for x in 0..8 {
                let v = s.get(x, y);
                assert!((v - ssim_oracle(&a, &b, x, y)).abs() < 1e-9);
                assert!((-1.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn ssim_dimension_mismatch() {
        let a = ImageRaster::filled(5, 5, [0.0; 3]);
        let b = ImageRaster::filled(5, 4, [0.0; 3]);
        assert!(matches!(ssim(&a, &b), Err(ReconError::DimensionMismatch(_))));
    }

    #[test]
    fn photometric_error_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_image(&mut rng, 6, 6);
        let w = LossWeights::default();
        let pe = photometric_error(&a, &a, &w).unwrap();
        assert!(pe.values.iter().all(|&v| v.abs() < 1e-12));

        let a = ImageRaster::filled(6, 6, [0.2, 0.3, 0.4]);
        let b = ImageRaster::filled(6, 6, [0.7, 0.8, 0.9]);
        let l1 = LossWeights { alpha_ssim: 0.0, ..w };
        let pe = photometric_error(&a, &b, &l1).unwrap();
        assert!(pe.values.iter().all(|&v| (v - 0.5).abs() < 1e-12));

        let a = random_image(&mut rng, 6, 5);
        let b = random_image(&mut rng, 6, 5);
        let pe = photometric_error(&a, &b, &w).unwrap();
        for y in 0..5 {
            for x in 0..6 {
                let (pa, pb) = (a.get(x, y), b.get(x, y));
                let l1 = ((pa[0] - pb[0]).abs() + (pa[1] - pb[1]).abs() + (pa[2] - pb[2]).abs()) / 3.0;
                let expect = 0.85 * (1.0 - ssim_oracle(&a, &b, x, y)) / 2.0 + 0.15 * l1;
                assert!((pe.get(x, y) - expect).abs() < 1e-9);
                assert!(pe.get(x, y) >= 0.0);
            }
        }
    }

    #[test]
    fn min_photometric_selects_best() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let t = random_image(&mut rng, 8, 8);
        let garbage = random_image(&mut rng, 8, 8);
        let w = LossWeights::default();
        let all = PixelMask::new(8, 8, true);
        assert_eq!(min_photometric_loss(&t, &[(t.clone(), all.clone())], &all, &w).unwrap(), 0.0);
        let two = [(garbage.clone(), all.clone()), (t.clone(), all.clone())];
        assert!(min_photometric_loss(&t, &two, &all, &w).unwrap().abs() < 1e-12);
        assert!(min_photometric_loss(&t, &[], &all, &w).is_err());
    }

    #[test]
    fn min_photometric_matches_bruteforce() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (wd, ht) = (7, 6);
        let t = random_image(&mut rng, wd, ht);
        let w = LossWeights::default();
        let mut warps = Vec::new();
        for _ in 0..3 {
            let img = random_image(&mut rng, wd, ht);
            let mask = PixelMask { width: wd, height: ht, data: (0..wd * ht).map(|_| rng.random_bool(0.7)).collect() };
            warps.push((img, mask));
        }
        let mu = PixelMask { width: wd, height: ht, data: (0..wd * ht).map(|_| rng.random_bool(0.8)).collect() };
        let pes: Vec<_> = warps.iter().map(|(i, _)| photometric_error(&t, i, &w).unwrap()).collect();
        let mut sum = 0.0;
        let mut n = 0;
        for p in 0..wd * ht {
            if !mu.data[p] {
                continue;
            }
            let mut best: Option<f64> = None;
            for (k, (_, m)) in warps.iter().enumerate() {
                if m.data[p] {
                    let e = pes[k].values[p];
                    best = Some(best.map_or(e, |b: f64| b.min(e)));
                }
            }
            if let Some(b) = best {
                sum += b;
                n += 1;
            }
        }
        let got = min_photometric_loss(&t, &warps, &mu, &w).unwrap();
        assert!((got - sum / n as f64).abs() < 1e-12);
    }

    #[test]
    fn auto_mask_rejects_static_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let t = random_image(&mut rng, 8, 8);
        let w = LossWeights::default();
        let all = PixelMask::new(8, 8, true);
        // Source identical to target: nothing can beat the identity warp.
        let mu = auto_mask(&t, &[(t.clone(), all.clone())], std::slice::from_ref(&t), &w).unwrap();
        assert_eq!(mu.count(), 0);
        let other = random_image(&mut rng, 8, 8);
        let mu = auto_mask(&t, &[(t.clone(), all)], &[other], &w).unwrap();
        assert_eq!(mu.count(), 64);
    }

    #[test]
    fn consistency_pair_set() {
        assert_eq!(consistency_pairs(5), vec![(4, 5), (4, 6), (6, 4), (6, 5)]);
    }

    #[test]
    fn extra_loss_identical_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = random_image(&mut rng, 6, 6);
        let pair = PhotometricPair { target: img.clone(), warped: img, valid: PixelMask::new(6, 6, true) };
        let r = extra_photometric_loss(&[pair.clone(), pair], &LossWeights::default()).unwrap();
        assert!(r.value.abs() < 1e-12);
        assert!(r.flagged.is_empty());
    }

    #[test]
    fn extra_loss_drops_outlier_pixel() {
        // 10x10 raster with an L1-only error of 0.1 everywhere except one
        // pixel at 0.9; the 80th percentile is 0.1 so only that pixel goes.
        let w = LossWeights { alpha_ssim: 0.0, ..LossWeights::default() };
        let target = ImageRaster::filled(10, 10, [0.5; 3]);
        let mut warped = ImageRaster::filled(10, 10, [0.6; 3]);
        warped.data[37] = [1.0, 1.0, 0.0];
        let valid = PixelMask::new(10, 10, true);
        let pe = photometric_error(&target, &warped, &w).unwrap();
        let kept: Vec<f64> = pe.values.iter().cloned().filter(|&e| e < 0.5).collect();
        assert_eq!(kept.len(), 99);
        let oracle = kept.iter().sum::<f64>() / 99.0;
        let r = extra_photometric_loss(&[PhotometricPair { target, warped, valid }], &w).unwrap();
        assert!((r.value - oracle).abs() < 1e-12);
        assert!((r.value - 0.1).abs() < 1e-12);
    }

    #[test]
    fn extra_loss_flags_empty_pairs() {
        let img = ImageRaster::filled(4, 4, [0.5; 3]);
        let other = ImageRaster::filled(4, 4, [0.7; 3]);
        let pairs = [
            PhotometricPair { target: img.clone(), warped: other.clone(), valid: PixelMask::new(4, 4, false) },
            PhotometricPair { target: img, warped: other, valid: PixelMask::new(4, 4, true) },
        ];
        let w = LossWeights { alpha_ssim: 0.0, ..LossWeights::default() };
        let r = extra_photometric_loss(&pairs, &w).unwrap();
        assert_eq!(r.flagged, vec![0]);
        assert!((r.value - 0.1).abs() < 1e-12);
    }

    #[test]
    fn percentile_linear_interpolation() {
        let v = [4.0, 1.0, 3.0, 2.0, 5.0];
        assert_eq!(percentile(&v, 50.0), Some(3.0));
        assert_eq!(percentile(&v, 80.0), Some(4.2));
        assert_eq!(percentile(&v, 100.0), Some(5.0));
        assert_eq!(percentile(&[], 10.0), None);
    }

    #[test]
    fn raising_percentile_keeps_more() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let v: Vec<f64> = (0..200).map(|_| rng.random::<f64>()).collect();
        let mut last = 0;
        for p in [10.0, 30.0, 50.0, 80.0, 95.0, 100.0] {
            let cut = percentile(&v, p).unwrap();
            let kept = v.iter().filter(|&&x| x <= cut).count();
            assert!(kept >= last);
            last = kept;
        }
    }

    #[test]
    fn depth_consistency_cases() {
        let a = DepthRaster::filled(4, 4, 1.0);
        let b = DepthRaster::filled(4, 4, 3.0);
        assert_eq!(depth_consistency_loss(&a, &a).unwrap(), 0.0);
        assert!((depth_consistency_loss(&a, &b).unwrap() - 0.5).abs() < 1e-15);
        let z = DepthRaster::filled(4, 4, 0.0);
        assert!(matches!(depth_consistency_loss(&a, &z), Err(ReconError::Empty(_))));

        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let va: Vec<f64> = (0..30).map(|_| rng.random_range(0.1..20.0)).collect();
        let vb: Vec<f64> = (0..30).map(|_| rng.random_range(0.1..20.0)).collect();
        let oracle = va.iter().zip(&vb).map(|(p, q)| (p - q).abs() / (p + q)).sum::<f64>() / 30.0;
        let got =
            depth_consistency_loss(&DepthRaster::new(6, 5, va).unwrap(), &DepthRaster::new(6, 5, vb).unwrap()).unwrap();
        assert!((got - oracle).abs() < 1e-12);
        assert!((0.0..1.0).contains(&got));
    }

    #[test]
    fn total_loss_cases() {
        let w = LossWeights::default();
        assert_eq!(total_loss(&LossComponents::default(), &w), 0.0);
        let c = LossComponents { photometric: 1.0, extra: vec![2.0, 2.0], depth_consistency: vec![3.0] };
        assert!((total_loss(&c, &w) - 1.5).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let c = LossComponents {
                photometric: rng.random(),
                extra: (0..4).map(|_| rng.random()).collect(),
                depth_consistency: (0..4).map(|_| rng.random()).collect(),
            };
            let hand = c.photometric
                + 0.1 * (c.extra.iter().sum::<f64>() / 4.0)
                + 0.1 * (c.depth_consistency.iter().sum::<f64>() / 4.0);
            assert!((total_loss(&c, &w) - hand).abs() < 1e-12);
        }
    }

    fn random_descriptor(rng: &mut ChaCha8Rng) -> Descriptor {
        let raw: Vec<f64> = (0..crate::matching::DESCRIPTOR_DIM).map(|_| rng.random::<f64>() - 0.5).collect();
        Descriptor::from_unnormalized(&raw).unwrap()
    }

    #[test]
    fn infonce_single_and_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = random_descriptor(&mut rng);
        assert!(
            infonce_loss(std::slice::from_ref(&d), std::slice::from_ref(&d), &[(0, 0)], 0.01).unwrap().abs() < 1e-12
        );
        // Identical pairs give equal similarities: the softmax is uniform.
        let m = 6;
        let di: Vec<_> = (0..m).map(|_| random_descriptor(&mut rng)).collect();
        let pairs: Vec<_> = (0..m).map(|k| (k, k)).collect();
        let l = infonce_loss(&di, &di, &pairs, 0.01).unwrap();
        assert!((l - (m as f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn infonce_matches_naive_exponentials() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = 5;
        let di: Vec<_> = (0..m).map(|_| random_descriptor(&mut rng)).collect();
        let dj: Vec<_> = (0..m).map(|_| random_descriptor(&mut rng)).collect();
        let pairs: Vec<_> = (0..m).map(|k| (k, (k + 2) % m)).collect();
        let tau = 0.5;
        let sims: Vec<f64> = pairs.iter().map(|&(a, b)| di[a].dot(&dj[b])).collect();
        let denom: f64 = sims.iter().map(|s| (s / tau).exp()).sum();
        let oracle = sims.iter().map(|s| -((s / tau).exp() / denom).ln()).sum::<f64>() / m as f64;
        let got = infonce_loss(&di, &dj, &pairs, tau).unwrap();
        assert!((got - oracle).abs() < 1e-9);
    }

    #[test]
    fn infonce_permutation_invariant_and_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let m = 5;
        let di: Vec<_> = (0..m).map(|_| random_descriptor(&mut rng)).collect();
        let dj: Vec<_> = (0..m).map(|_| random_descriptor(&mut rng)).collect();
        let pairs: Vec<_> = (0..m).map(|k| (k, k)).collect();
        let base = infonce_loss_with_candidates(&di, &dj, &pairs, &[0], 0.1).unwrap();
        let perm = [3usize, 0, 4, 1, 2];
        let permuted: Vec<_> = perm.iter().map(|&p| pairs[p]).collect();
        let moved = infonce_loss_with_candidates(&di, &dj, &permuted, &[1], 0.1).unwrap();
        assert!((base - moved).abs() < 1e-12);

        // Pull the true partner of candidate 0 towards z_i[0] step by step.
        let mut last = f64::INFINITY;
        for step in 0..5 {
            let t = step as f64 / 4.0;
            let raw: Vec<f64> =
                (0..crate::matching::DESCRIPTOR_DIM).map(|c| (1.0 - t) * dj[0].get(c) + t * di[0].get(c)).collect();
            let mut dj2 = dj.clone();
            dj2[0] = Descriptor::from_unnormalized(&raw).unwrap();
            let l = infonce_loss_with_candidates(&di, &dj2, &pairs, &[0], 0.1).unwrap();
            assert!(l < last);
            last = l;
        }
    }

    #[test]
    fn infonce_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = random_descriptor(&mut rng);
        assert!(infonce_loss(std::slice::from_ref(&d), std::slice::from_ref(&d), &[], 0.01).is_err());
        let bad = Descriptor::from_raw_unchecked([0.5; crate::matching::DESCRIPTOR_DIM]);
        assert!(matches!(infonce_loss(&[bad], &[d], &[(0, 0)], 0.01), Err(ReconError::InvalidInput(_))));
    }

    #[test]
    fn specular_cases() {
        let black = ImageRaster::filled(30, 30, [0.0; 3]);
        assert_eq!(specular_mask(&black).count(), 0);
        let mut img = ImageRaster::filled(30, 30, [0.1; 3]);
        img.data[15 * 30 + 14] = [1.0; 3];
        let m = specular_mask(&img);
        assert_eq!(m.count(), 169);
        for y in 0..30 {
            for x in 0..30 {
                let inside = (8..=20).contains(&x) && (9..=21).contains(&y);
                assert_eq!(m.get(x, y), inside, "({x},{y})");
            }
        }
    }

    #[test]
    fn specular_matches_bruteforce_dilation() {
        let (w, h) = (25, 20);
        let data = (0..w * h)
            .map(|i| {
                let (x, y) = ((i % w) as f64, (i / w) as f64);
                let v = ((x / w as f64) * 0.6 + (y / h as f64) * 0.45).min(1.0);
                [v, v, v]
            })
            .collect();
        let img = ImageRaster::new(w, h, data).unwrap();
        let seed: Vec<bool> = img.data.iter().map(|&c| luma(c) >= 0.9).collect();
        let mut oracle = vec![false; w * h];
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                'k: for dy in -6..=6 {
                    for dx in -6..=6 {
                        let (xx, yy) = (x + dx, y + dy);
                        if xx >= 0 && yy >= 0 && xx < w as i64 && yy < h as i64 && seed[(yy as usize) * w + xx as usize]
                        {
                            oracle[y as usize * w + x as usize] = true;
                            break 'k;
                        }
                    }
                }
            }
        }
        let m = specular_mask(&img);
        assert!(seed.iter().any(|&s| s));
        assert_eq!(m.data, oracle);
    }
}
