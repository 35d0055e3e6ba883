use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;

/// `manifest.json` at the dataset root. Known class `i` (0-based in
/// `classes`) has id `i + 1`; ground-truth ids above `classes.len()` belong
/// to `novel_classes` and are only used for evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub source_model: String,
    pub classes: Vec<String>,
    #[serde(default)]
    pub novel_classes: Vec<String>,
    pub train: Vec<String>,
    #[serde(default)]
    pub test: Vec<String>,
    #[serde(default)]
    pub feature_extractor: Option<String>,
    #[serde(default)]
    pub feature_dim: Option<usize>,
    /// Free-form description of how the data was produced.
    #[serde(default)]
    pub generator: Option<serde_json::Value>,
}

impl DatasetManifest {
    pub fn n_known(&self) -> usize {
        self.classes.len()
    }

    pub fn novel_ids(&self) -> Vec<i32> {
        let c = self.classes.len() as i32;
        (1..=self.novel_classes.len() as i32).map(|i| c + i).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::Format(format!("unsupported manifest version {}", self.version)));
        }
        if self.classes.len() < 2 {
            return Err(Error::Validation("manifest needs at least two known classes".into()));
        }
        if self.train.is_empty() {
            return Err(Error::Validation("manifest lists no training images".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for id in self.train.iter().chain(&self.test) {
            if id.is_empty() || id.contains(['/', '\\']) {
                return Err(Error::Validation(format!("invalid image id {id:?}")));
            }
            if !seen.insert(id) {
                return Err(Error::Validation(format!("image id {id} listed twice")));
            }
        }
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::NotFound(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        let m: DatasetManifest = serde_json::from_str(&text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}
