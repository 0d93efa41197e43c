//! Flat `key = value` pipeline configuration with command-line overrides.

use std::path::Path;

use cr3d_core::ics::IcsConfig;
use cr3d_core::registration::{IcpParams, MapConfig, PairMiningConfig};
use cr3d_core::retrieval::{BowConfig, NbnnMode};
use cr3d_core::synth::SceneParams;
use cr3d_core::tdf::TdfConfig;
use cr3d_core::vocabulary::KMeansConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    // keypoints and descriptors
    pub n_keypoints: usize,
    pub keypoint_seed: u64,
    pub normal_radius: f64,
    pub fpfh_radius: f64,

    // invariant coordinate system
    pub use_ics: bool,
    pub ics_resolution: f64,
    pub ics_bin_width: f64,
    pub ics_refine: bool,

    // vocabulary
    pub words: usize,
    pub kmeans_max_iters: usize,
    pub vocab_seed: u64,

    // localization and change detection
    pub nbnn_mode: NbnnMode,
    pub n_hypotheses: usize,

    // TDF patches
    pub tdf_region_size: f64,
    pub tdf_grid_dim: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tdf_truncation: Option<f64>,

    // local maps
    pub segment_length: f64,
    pub dedup_voxel: f64,
    pub icp_max_iters: usize,
    pub icp_max_corr_dist: f64,
    pub icp_tol: f64,

    // training pairs
    pub pair_dt: f64,
    pub n_pairs: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pair_crop_size: Option<f64>,
    pub pair_max_rmse: f64,
    pub pair_overlap_dist: f64,
    pub pair_seed: u64,

    // synthetic scenes
    pub synth_n_structures: usize,
    pub synth_extent: f64,
    pub synth_points_per_structure: usize,
    pub synth_noise_sigma: f64,
    pub synth_dropout: f64,
    pub synth_object_points: usize,
    pub synth_view_yaw_range: f64,
    pub synth_view_translation_range: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let bow = BowConfig::default();
        let km = KMeansConfig::default();
        let tdf = TdfConfig::default();
        let map = MapConfig::default();
        let pairs = PairMiningConfig::default();
        let scene = SceneParams::default();
        Self {
            n_keypoints: bow.n_keypoints,
            keypoint_seed: bow.keypoint_seed,
            normal_radius: bow.normal_radius,
            fpfh_radius: bow.fpfh_radius,
            use_ics: bow.use_ics,
            ics_resolution: bow.ics.resolution,
            ics_bin_width: bow.ics.bin_width,
            ics_refine: bow.ics.refine,
            words: km.words,
            kmeans_max_iters: km.max_iters,
            vocab_seed: km.seed,
            nbnn_mode: NbnnMode::default(),
            n_hypotheses: 1,
            tdf_region_size: tdf.region_size,
            tdf_grid_dim: tdf.grid_dim,
            tdf_truncation: tdf.truncation,
            segment_length: map.segment_length,
            dedup_voxel: map.dedup_voxel,
            icp_max_iters: map.icp.max_iters,
            icp_max_corr_dist: map.icp.max_corr_dist,
            icp_tol: map.icp.tol,
            pair_dt: pairs.dt,
            n_pairs: pairs.n_pairs,
            pair_crop_size: pairs.crop_size,
            pair_max_rmse: pairs.max_rmse,
            pair_overlap_dist: pairs.overlap_dist,
            pair_seed: pairs.seed,
            synth_n_structures: scene.n_structures,
            synth_extent: scene.extent,
            synth_points_per_structure: scene.points_per_structure,
            synth_noise_sigma: scene.noise_sigma,
            synth_dropout: scene.dropout,
            synth_object_points: scene.object_points,
            synth_view_yaw_range: scene.view_yaw_range,
            synth_view_translation_range: scene.view_translation_range,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config {0}")]
    Syntax(String),
    #[error("override {0:?} is not of the form key=value")]
    Override(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Parse an override value as a TOML scalar, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

impl PipelineConfig {
    /// Defaults, then the optional file, then `key=value` overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Read {
                    path: p.display().to_string(),
                    source,
                })?;
                toml::from_str::<toml::Table>(&text).map_err(|e| ConfigError::Syntax(e.to_string()))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| ConfigError::Override(o.clone()))?;
            table.insert(k.trim().to_string(), parse_value(v.trim()));
        }
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Syntax(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        self.ics().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.tdf().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.scene().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.n_keypoints == 0 {
            return bad("n_keypoints must be >= 1".into());
        }
        if !(self.normal_radius > 0.0 && self.fpfh_radius > 0.0) {
            return bad("normal_radius and fpfh_radius must be > 0".into());
        }
        if self.words == 0 || self.kmeans_max_iters == 0 {
            return bad("words and kmeans_max_iters must be >= 1".into());
        }
        if self.n_hypotheses == 0 {
            return bad("n_hypotheses must be >= 1".into());
        }
        if !(self.segment_length > 0.0 && self.dedup_voxel > 0.0) {
            return bad("segment_length and dedup_voxel must be > 0".into());
        }
        if self.icp_max_iters == 0 || !(self.icp_max_corr_dist > 0.0) || !(self.icp_tol >= 0.0) {
            return bad("icp settings out of range".into());
        }
        if !(self.pair_dt > 0.0) || self.n_pairs < 2 || self.pair_crop_size.is_some_and(|c| !(c > 0.0)) {
            return bad("pair mining settings out of range".into());
        }
        Ok(())
    }

    pub fn ics(&self) -> IcsConfig {
        IcsConfig {
            resolution: self.ics_resolution,
            bin_width: self.ics_bin_width,
            refine: self.ics_refine,
        }
    }

    pub fn bow(&self) -> BowConfig {
        BowConfig {
            n_keypoints: self.n_keypoints,
            keypoint_seed: self.keypoint_seed,
            normal_radius: self.normal_radius,
            fpfh_radius: self.fpfh_radius,
            ics: self.ics(),
            use_ics: self.use_ics,
        }
    }

    pub fn kmeans(&self) -> KMeansConfig {
        KMeansConfig {
            words: self.words,
            max_iters: self.kmeans_max_iters,
            seed: self.vocab_seed,
        }
    }

    pub fn tdf(&self) -> TdfConfig {
        TdfConfig {
            n_keypoints: self.n_keypoints,
            region_size: self.tdf_region_size,
            grid_dim: self.tdf_grid_dim,
            truncation: self.tdf_truncation,
            seed: self.keypoint_seed,
        }
    }

    fn icp(&self) -> IcpParams {
        IcpParams {
            max_iters: self.icp_max_iters,
            max_corr_dist: self.icp_max_corr_dist,
            tol: self.icp_tol,
        }
    }

    pub fn map(&self) -> MapConfig {
        MapConfig {
            segment_length: self.segment_length,
            dedup_voxel: self.dedup_voxel,
            icp: self.icp(),
        }
    }

    pub fn mining(&self) -> PairMiningConfig {
        PairMiningConfig {
            dt: self.pair_dt,
            n_pairs: self.n_pairs,
            crop_size: self.pair_crop_size,
            max_rmse: self.pair_max_rmse,
            overlap_dist: self.pair_overlap_dist,
            icp: self.icp(),
            seed: self.pair_seed,
        }
    }

    pub fn scene(&self) -> SceneParams {
        SceneParams {
            n_structures: self.synth_n_structures,
            extent: self.synth_extent,
            points_per_structure: self.synth_points_per_structure,
            noise_sigma: self.synth_noise_sigma,
            dropout: self.synth_dropout,
            insert_object: true,
            object_points: self.synth_object_points,
            view_yaw_range: self.synth_view_yaw_range,
            view_translation_range: self.synth_view_translation_range,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_mirror_module_defaults() {
        let c = PipelineConfig::default();
        c.validate().unwrap();
        assert_eq!(c.bow(), BowConfig::default());
        assert_eq!(c.kmeans(), KMeansConfig::default());
        assert_eq!(c.map(), MapConfig::default());
        assert_eq!(c.mining(), PairMiningConfig::default());
        assert_eq!(c.scene(), SceneParams::default());
    }

    #[test]
    fn toml_round_trip() {
        let c = PipelineConfig {
            words: 32,
            tdf_truncation: Some(0.5),
            nbnn_mode: NbnnMode::Exact,
            ..Default::default()
        };
        let text = c.to_toml();
        assert!(text.contains("nbnn_mode = \"exact\""), "{text}");
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, &text).unwrap();
        assert_eq!(PipelineConfig::load(Some(&p), &[]).unwrap(), c);
    }

    #[test]
    fn overrides_apply_after_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "words = 16\nuse_ics = true\n").unwrap();
        let c = PipelineConfig::load(Some(&p), &["use_ics=false".into(), "words = 8".into(), "nbnn_mode=exact".into()]).unwrap();
        assert_eq!(c.words, 8);
        assert!(!c.use_ics);
        assert_eq!(c.nbnn_mode, NbnnMode::Exact);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(PipelineConfig::load(None, &["nope=1".into()]), Err(ConfigError::Syntax(_))));
        assert!(matches!(PipelineConfig::load(None, &["words".into()]), Err(ConfigError::Override(_))));
        assert!(matches!(PipelineConfig::load(None, &["words=0".into()]), Err(ConfigError::Invalid(_))));
        assert!(matches!(PipelineConfig::load(None, &["ics_resolution=90".into()]), Err(ConfigError::Invalid(_))));
        assert!(matches!(PipelineConfig::load(None, &["words=\"many\"".into()]), Err(ConfigError::Syntax(_))));
        assert!(matches!(
            PipelineConfig::load(Some(Path::new("/nonexistent/c.toml")), &[]),
            Err(ConfigError::Read { .. })
        ));
    }
}
