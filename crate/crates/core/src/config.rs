//! Run configuration as a flat `key = value` text file.
//!
//! Every key has a default; `RunConfig::default().to_text()` writes them all
//! with a one-line description. Unknown or repeated keys are errors.

use std::collections::BTreeSet;
use std::path::Path;

use crate::error::{ReconError, Result};
use crate::fragments::FragmentConfig;
use crate::fusion::{FusionGate, TsdfConfig};
use crate::losses::{LossWeights, SpecularConfig};
use crate::matching::FilterConfig;
use crate::posegraph::SolverConfig;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunConfig {
    pub filter: FilterConfig,
    pub fragment: FragmentConfig,
    pub solver: SolverConfig,
    pub gate: FusionGate,
    pub tsdf: TsdfConfig,
    pub loss: LossWeights,
    pub specular: SpecularConfig,
    /// Optimise the keyframe graph; when off, keyframes are chained by
    /// odometry only.
    pub inter_optimization: bool,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            filter: FilterConfig::default(),
            fragment: FragmentConfig::default(),
            solver: SolverConfig::default(),
            gate: FusionGate::default(),
            tsdf: TsdfConfig::default(),
            loss: LossWeights::default(),
            specular: SpecularConfig::default(),
            inter_optimization: true,
            seed: 1,
        }
    }
}

trait Value: Sized {
    fn parse_value(raw: &str) -> Option<Self>;
    fn show(&self) -> String;
}

impl Value for f64 {
    fn parse_value(raw: &str) -> Option<Self> {
        raw.parse::<f64>().ok().filter(|v| v.is_finite())
    }
    fn show(&self) -> String {
        format!("{self}")
    }
}

impl Value for usize {
    fn parse_value(raw: &str) -> Option<Self> {
        raw.parse().ok()
    }
    fn show(&self) -> String {
        self.to_string()
    }
}

impl Value for u64 {
    fn parse_value(raw: &str) -> Option<Self> {
        raw.parse().ok()
    }
    fn show(&self) -> String {
        self.to_string()
    }
}

impl Value for bool {
    fn parse_value(raw: &str) -> Option<Self> {
        match raw {
            "true" => Some(true),
            "false" => Some(false),
            _ => None,
        }
    }
    fn show(&self) -> String {
        self.to_string()
    }
}

macro_rules! config_keys {
    ($( $key:literal => $($field:ident).+ , $doc:literal ;)*) => {
        /// All keys with their descriptions, in file order.
        pub const KEYS: &[(&str, &str)] = &[$(($key, $doc)),*];

        fn get_value(cfg: &RunConfig, key: &str) -> Option<String> {
            match key {
                $($key => Some(cfg.$($field).+.show()),)*
                _ => None,
            }
        }

        fn set_value(cfg: &mut RunConfig, key: &str, raw: &str) -> Option<bool> {
            match key {
                $($key => {
                    cfg.$($field).+ = Value::parse_value(raw)?;
                    Some(true)
                })*
                _ => Some(false),
            }
        }
    };
}

config_keys! {
    "filter.min_matches" => filter.min_matches, "minimum inliers for a valid transform";
    "filter.max_residual_cm" => filter.max_residual_cm, "inlier threshold on the 3D residual, cm";
    "filter.cond_threshold" => filter.cond_threshold, "maximum condition number of the inlier covariance";
    "filter.kpf_distance_tol_cm" => filter.kpf_distance_tol_cm, "pairwise distance tolerance of the keypoint filter, cm";
    "filter.min_span_area_fraction" => filter.min_span_area_fraction, "minimum matched area as a fraction of the view footprint";
    "filter.similarity_floor" => filter.similarity_floor, "minimum cosine similarity of a descriptor match";
    "fragment.min_consecutive_corrs" => fragment.min_consecutive_corrs, "start a new fragment below this many consecutive matches";
    "fragment.min_frustum_overlap" => fragment.min_frustum_overlap, "start a new fragment below this keyframe overlap";
    "fragment.frustum_stride" => fragment.frustum_stride, "pixel stride of the overlap estimate";
    "fragment.depth_agreement" => fragment.depth_agreement, "relative depth agreement of the overlap estimate";
    "solver.huber_delta_cm" => solver.huber_delta_cm, "Huber threshold on point residuals, cm";
    "solver.max_iterations" => solver.max_iterations, "iteration cap of the pose-graph solver";
    "solver.rel_tol" => solver.rel_tol, "stop when the relative cost decrease falls below this";
    "solver.initial_damping" => solver.initial_damping, "initial Levenberg-Marquardt damping";
    "solver.prune_factor" => solver.prune_factor, "prune edges above this multiple of the median edge residual";
    "solver.prune_min_residual_cm" => solver.prune_min_residual_cm, "edges below this mean residual are never pruned, cm";
    "solver.prune_rounds" => solver.prune_rounds, "pruning rounds, each followed by re-optimisation";
    "fusion.min_frame_gap" => gate.min_frame_gap, "fuse a fragment unobserved for more than this many frames";
    "fusion.min_distance_cm" => gate.min_distance_cm, "and farther than this from the camera, cm";
    "tsdf.voxel_size_cm" => tsdf.voxel_size_cm, "voxel edge length, cm";
    "tsdf.truncation_voxels" => tsdf.truncation_voxels, "truncation distance in voxels";
    "tsdf.max_weight" => tsdf.max_weight, "voxel weight cap";
    "loss.lambda_ph_extra" => loss.lambda_ph_extra, "weight of the extra photometric term";
    "loss.lambda_dc" => loss.lambda_dc, "weight of the depth consistency term";
    "loss.tau" => loss.tau, "temperature of the contrastive loss";
    "loss.alpha_ssim" => loss.alpha_ssim, "SSIM share of the photometric error";
    "loss.outlier_percentile" => loss.outlier_percentile, "photometric errors above this percentile are dropped";
    "loss.ssim_window" => loss.ssim_window, "SSIM window side (odd)";
    "specular.y_threshold" => specular.y_threshold, "luma threshold of the specular mask";
    "specular.kernel" => specular.kernel, "dilation kernel side of the specular mask, px";
    "pipeline.inter_optimization" => inter_optimization, "optimise the keyframe graph (false: odometry chaining)";
    "seed" => seed, "random seed";
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.filter.validate()?;
        self.fragment.validate()?;
        self.solver.validate()?;
        self.gate.validate()?;
        self.tsdf.validate()?;
        self.loss.validate()?;
        if !(0.0..=1.0).contains(&self.specular.y_threshold) || self.specular.kernel.is_multiple_of(2) {
            return Err(ReconError::Config(format!("invalid specular settings {:?}", self.specular)));
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        get_value(self, key)
    }

    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        match set_value(self, key, raw.trim()) {
            Some(true) => Ok(()),
            Some(false) => Err(ReconError::Config(format!("unknown key `{key}`"))),
            None => Err(ReconError::Config(format!("bad value `{raw}` for `{key}`"))),
        }
    }

    /// Every key with its current value, each preceded by its description.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# recon run configuration\n");
        for (key, doc) in KEYS {
            let value = get_value(self, key).expect("listed key");
            out.push_str(&format!("\n# {doc}\n{key} = {value}\n"));
        }
        out
    }

    /// Starts from the defaults and applies every assignment in `text`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = BTreeSet::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ReconError::Config(format!("line {}: expected `key = value`", n + 1)));
            };
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(ReconError::Config(format!("line {}: `{key}` set twice", n + 1)));
            }
            cfg.set(key, value).map_err(|e| ReconError::Config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ReconError::io(path, e))?;
        Self::parse(&text).map_err(|e| ReconError::Config(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        assert!(cfg.validate().is_ok());
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
        assert_eq!(RunConfig::parse("").unwrap(), cfg);
    }

    #[test]
    fn every_key_round_trips_a_changed_value() {
        for (key, _) in KEYS {
            let mut cfg = RunConfig::default();
            let current = cfg.get(key).unwrap();
            let changed = match current.as_str() {
                "true" => "false".to_string(),
                "false" => "true".to_string(),
                v if v.contains('.') || v.contains('e') => format!("{}", v.parse::<f64>().unwrap() * 0.75),
                v if *key == "loss.ssim_window" || *key == "specular.kernel" => {
                    (v.parse::<usize>().unwrap() + 2).to_string()
                }
                v => (v.parse::<u64>().unwrap() + 1).to_string(),
            };
            cfg.set(key, &changed).unwrap();
            assert_eq!(cfg.get(key).unwrap(), changed, "{key}");
            assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg, "{key}");
        }
    }

    #[test]
    fn rejects_bad_input() {
        assert!(RunConfig::parse("nonsense.key = 1").is_err());
        assert!(RunConfig::parse("seed = 1\nseed = 2").is_err());
        assert!(RunConfig::parse("filter.min_matches = ten").is_err());
        assert!(RunConfig::parse("tsdf.voxel_size_cm = -1").is_err());
        assert!(RunConfig::parse("tsdf.voxel_size_cm = NaN").is_err());
        assert!(RunConfig::parse("just words").is_err());
        let e = RunConfig::parse("x = 1").unwrap_err();
        assert_eq!(e.category(), "config");
    }

    #[test]
    fn overrides_apply() {
        let cfg = RunConfig::parse("# comment\nseed = 42\npipeline.inter_optimization = false\n").unwrap();
        assert_eq!(cfg.seed, 42);
        assert!(!cfg.inter_optimization);
        assert_eq!(cfg.filter, FilterConfig::default());
    }
}
