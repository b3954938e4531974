use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::Pose;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Live,
    Reference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub frame_id: String,
    /// Image path relative to the manifest's directory.
    pub path: String,
    pub role: Role,
    pub pose: Pose,
}

/// Contents of a scene's `manifest.json`. Reference entries are listed in
/// traversal order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub const FILE_NAME: &'static str = "manifest.json";

    pub fn live(&self) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(|e| e.role == Role::Live)
    }

    pub fn references(&self) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(|e| e.role == Role::Reference)
    }

    pub fn check_unique_ids(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.frame_id.as_str()) {
                return Err(Error::Data(format!(
                    "manifest {}: duplicate frame_id {:?}",
                    self.name, e.frame_id
                )));
            }
        }
        Ok(())
    }

    pub fn resolve(dir: &Path, entry: &ManifestEntry) -> PathBuf {
        dir.join(&entry.path)
    }

    /// Reads `path` (a manifest file, or a directory containing one) and checks
    /// that frame ids are unique and every referenced image exists.
    pub fn load(path: impl AsRef<Path>) -> Result<(Manifest, PathBuf)> {
        let mut path = path.as_ref().to_path_buf();
        if path.is_dir() {
            path.push(Self::FILE_NAME);
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.clone(),
            source,
        })?;
        manifest.check_unique_ids()?;
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        for e in &manifest.entries {
            let p = Self::resolve(&dir, e);
            if !p.is_file() {
                return Err(Error::io(
                    p,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "image listed in manifest not found"),
                ));
            }
        }
        Ok((manifest, dir))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}
