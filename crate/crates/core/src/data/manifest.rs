use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledEntry {
    pub image: PathBuf,
    pub label: PathBuf,
}

/// Labeled/unlabeled split of a dataset.
///
/// Relative paths are resolved against the manifest file's directory when
/// loaded with [`DatasetManifest::load`]. The optional `validation` list is a
/// held-out labeled split used for best-checkpoint selection and evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub class_count: usize,
    pub labeled: Vec<LabeledEntry>,
    #[serde(default)]
    pub unlabeled: Vec<PathBuf>,
    #[serde(default)]
    pub validation: Vec<LabeledEntry>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.labeled.is_empty() {
            return Err(Error::Config("manifest lists no labeled entries".into()));
        }
        if self.class_count < 2 {
            return Err(Error::Config(format!(
                "class_count must be at least 2, got {}",
                self.class_count
            )));
        }
        let labeled: HashSet<&Path> = self.labeled.iter().map(|e| e.image.as_path()).collect();
        if let Some(p) = self.unlabeled.iter().find(|p| labeled.contains(p.as_path())) {
            return Err(Error::Config(format!(
                "{} is listed as both labeled and unlabeled",
                p.display()
            )));
        }
        Ok(())
    }

    /// Entries used for validation; falls back to the labeled split.
    pub fn validation_entries(&self) -> &[LabeledEntry] {
        if self.validation.is_empty() {
            &self.labeled
        } else {
            &self.validation
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: DatasetManifest =
            toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for e in m.labeled.iter_mut().chain(m.validation.iter_mut()) {
            resolve(&mut e.image);
            resolve(&mut e.label);
        }
        m.unlabeled.iter_mut().for_each(resolve);
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self)
            .map_err(|e| Error::format(path, format!("cannot serialize manifest: {e}")))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}
