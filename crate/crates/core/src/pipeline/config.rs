use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::anomaly::{ImageRejection, DEFAULT_MIN_OBJECT_PIXELS, DEFAULT_MIN_SEGMENT_PIXELS, DEFAULT_TAU};
use crate::clustering::KnownRejection;
use crate::embedding::{TsneParams, DEFAULT_MIN_PATCH};
use crate::error::{Error, Result};
use crate::gbt::GbtParams;
use crate::pseudo::RehearsalPolicy;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DbscanConfig {
    pub epsilon: f64,
    pub n_min: usize,
    pub min_core: usize,
}

impl Default for DbscanConfig {
    fn default() -> Self {
        DbscanConfig { epsilon: 4.0, n_min: 5, min_core: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbeddingConfig {
    pub pca_k: usize,
    pub min_patch: usize,
    pub tsne: TsneParams,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig { pca_k: 50, min_patch: DEFAULT_MIN_PATCH, tsne: TsneParams::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    pub single_segment: bool,
    pub min_segment_pixels: usize,
    pub image_rejection: bool,
    pub rejection: ImageRejection,
    pub known_rejection: bool,
    pub known: KnownRejection,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            single_segment: false,
            min_segment_pixels: DEFAULT_MIN_SEGMENT_PIXELS,
            image_rejection: false,
            rejection: ImageRejection::default(),
            known_rejection: false,
            known: KnownRejection::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModeFlags {
    /// Pseudo labels keep only novel pixels; everything else is ignored.
    pub ignore_known: bool,
    /// Replay known-class training images alongside the pseudo labels.
    pub rehearsal: bool,
    /// Turn every sufficiently large cluster into its own class.
    pub multi_cluster: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_filters: usize,
    pub encoder_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { n_filters: 16, encoder_seed: 7 }
    }
}

/// Everything a pipeline run depends on besides the dataset contents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub dataset: PathBuf,
    pub seed: u64,
    pub tau: f64,
    pub min_object_pixels: usize,
    /// Folds used to score the discovery images with a regressor that has
    /// not seen them.
    pub regressor_folds: usize,
    pub regressor: GbtParams,
    pub filters: FilterConfig,
    pub embedding: EmbeddingConfig,
    pub dbscan: DbscanConfig,
    pub modes: ModeFlags,
    pub rehearsal: RehearsalPolicy,
    pub model: ModelConfig,
    /// Fit of the initial model to the stored softmax outputs.
    pub initial: TrainConfig,
    /// Incremental extension by the discovered classes.
    pub trainer: TrainConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            dataset: PathBuf::from("data"),
            seed: 0,
            tau: DEFAULT_TAU,
            min_object_pixels: DEFAULT_MIN_OBJECT_PIXELS,
            regressor_folds: 2,
            regressor: GbtParams::default(),
            filters: FilterConfig::default(),
            embedding: EmbeddingConfig::default(),
            dbscan: DbscanConfig::default(),
            modes: ModeFlags { rehearsal: true, ..Default::default() },
            rehearsal: RehearsalPolicy::default(),
            model: ModelConfig::default(),
            initial: TrainConfig { epochs: 30, lr: 2e-2, lambda: 0.0, ..TrainConfig::default() },
            trainer: TrainConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Settings for the built-in synthetic scenario: smaller patches and a
    /// larger incremental learning rate suited to the tiny decoder.
    pub fn synthetic(dataset: impl Into<PathBuf>) -> Self {
        let mut cfg = PipelineConfig { dataset: dataset.into(), ..Default::default() };
        cfg.embedding.min_patch = 16;
        // t-SNE spreads a few dozen similar patches over a disk about 40 units wide
        cfg.dbscan.epsilon = 20.0;
        cfg.trainer.lr = 5e-3;
        cfg.trainer.epochs = 40;
        cfg
    }

    /// Named settings: `synthetic`, `default`, and `exp1` to `exp5`, which
    /// switch on the filter and mode combinations of the five experiment setups
    /// on top of `synthetic`.
    pub fn preset(name: &str, dataset: impl Into<PathBuf>) -> Result<Self> {
        match name {
            "synthetic" | "exp4" => Ok(Self::synthetic(dataset)),
            // pseudo labels keep the novel class only
            "exp1" => {
                let mut cfg = Self::synthetic(dataset);
                cfg.modes.ignore_known = true;
                Ok(cfg)
            }
            // drop objects made of one small predicted segment
            "exp2" => {
                let mut cfg = Self::synthetic(dataset);
                cfg.filters.single_segment = true;
                Ok(cfg)
            }
            "exp3" => {
                let mut cfg = Self::synthetic(dataset);
                cfg.modes.multi_cluster = true;
                cfg.filters.known_rejection = true;
                Ok(cfg)
            }
            // poorly predicted images are skipped and nothing is replayed
            "exp5" => {
                let mut cfg = Self::synthetic(dataset);
                cfg.filters.image_rejection = true;
                cfg.modes.rehearsal = false;
                Ok(cfg)
            }
            "default" => Ok(PipelineConfig { dataset: dataset.into(), ..Default::default() }),
            other => Err(Error::Config(format!("unknown preset {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config(format!("tau must lie in [0,1], got {}", self.tau)));
        }
        if !(self.dbscan.epsilon > 0.0) || self.dbscan.n_min == 0 {
            return Err(Error::Config("dbscan needs epsilon > 0 and n_min >= 1".into()));
        }
        if self.embedding.pca_k == 0 || self.embedding.min_patch == 0 {
            return Err(Error::Config("pca_k and min_patch must be positive".into()));
        }
        if self.regressor_folds < 2 {
            return Err(Error::Config("regressor_folds must be at least 2".into()));
        }
        if self.model.n_filters == 0 {
            return Err(Error::Config("the encoder needs at least one filter".into()));
        }
        let k = &self.filters.known;
        if !(0.0..=1.0).contains(&k.majority) || !(k.radius > 0.0) {
            return Err(Error::Config("known rejection needs radius > 0 and majority in [0,1]".into()));
        }
        self.regressor.validate()?;
        self.initial.validate()?;
        self.trainer.validate()
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::NotFound(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    /// Stage-specific seed derived from the run seed.
    pub fn derived_seed(&self, stream: u64) -> u64 {
        let mut z = self.seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for name in ["synthetic", "default", "exp1", "exp2", "exp3", "exp4", "exp5"] {
            PipelineConfig::preset(name, "/tmp/x").unwrap().validate().unwrap();
        }
        assert!(PipelineConfig::preset("exp5", "d").map(|c| !c.modes.rehearsal).unwrap());
        assert!(matches!(PipelineConfig::preset("exp9", "d"), Err(Error::Config(_))));
    }

    #[test]
    fn json_round_trip_preserves_hash() {
        let cfg = PipelineConfig::synthetic("/tmp/x");
        let back = PipelineConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_eq!(cfg.hash().len(), 64);
        let other = PipelineConfig { seed: 1, ..cfg.clone() };
        assert_ne!(other.hash(), cfg.hash());
    }

    #[test]
    fn partial_json_uses_defaults() {
        let cfg = PipelineConfig::from_json(r#"{"tau": 0.3, "dbscan": {"epsilon": 2.0}}"#).unwrap();
        assert_eq!(cfg.tau, 0.3);
        assert_eq!(cfg.dbscan.epsilon, 2.0);
        assert_eq!(cfg.dbscan.min_core, 10);
        assert_eq!(cfg.trainer.lr, 5e-5);
    }

    #[test]
    fn validation() {
        assert!(PipelineConfig::from_json(r#"{"tau": 1.5}"#).is_err());
        assert!(PipelineConfig::from_json(r#"{"dbscan": {"epsilon": 0.0}}"#).is_err());
        assert!(PipelineConfig::from_json(r#"{"trainer": {"lambda": 2.0}}"#).is_err());
        assert!(PipelineConfig::preset("nope", "x").is_err());
    }

    #[test]
    fn derived_seeds_differ_by_stream_and_seed() {
        let a = PipelineConfig::default();
        let b = PipelineConfig { seed: 1, ..Default::default() };
        assert_ne!(a.derived_seed(1), a.derived_seed(2));
        assert_ne!(a.derived_seed(1), b.derived_seed(1));
        assert_eq!(a.derived_seed(3), a.derived_seed(3));
    }
}
