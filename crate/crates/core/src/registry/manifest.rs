use std::path::{Component, Path};

use serde::{Deserialize, Serialize};

use super::RegistryError;
use crate::model::ModelConfig;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Paths of the package payload, relative to the package root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestFiles {
    pub weights: String,
    pub vocab_src: String,
    pub vocab_trg: String,
    pub shortlist: String,
}

impl ManifestFiles {
    pub fn all(&self) -> [(&'static str, &str); 4] {
        [
            ("weights", &self.weights),
            ("vocab_src", &self.vocab_src),
            ("vocab_trg", &self.vocab_trg),
            ("shortlist", &self.shortlist),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub id: String,
    pub name: String,
    pub src_lang: String,
    pub trg_lang: String,
    pub version: String,
    pub architecture: ModelConfig,
    pub files: ManifestFiles,
    pub license: String,
}

/// Ids are `[a-z0-9-]+`.
pub fn validate_id(id: &str) -> Result<(), RegistryError> {
    if !id.is_empty() && id.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'-') {
        Ok(())
    } else {
        Err(RegistryError::Manifest(format!("id {id:?} must match [a-z0-9-]+")))
    }
}

pub(crate) fn parse_version(v: &str) -> Result<semver::Version, RegistryError> {
    semver::Version::parse(v).map_err(|e| RegistryError::Manifest(format!("version {v:?}: {e}")))
}

/// A relative path that stays inside the package root.
pub(crate) fn validate_relative(path: &str) -> Result<(), RegistryError> {
    let p = Path::new(path);
    let ok = !path.is_empty() && p.components().all(|c| matches!(c, Component::Normal(_)));
    if ok {
        Ok(())
    } else {
        Err(RegistryError::Manifest(format!("file path {path:?} must be relative and inside the package")))
    }
}

impl ModelManifest {
    pub fn parse(bytes: &[u8]) -> Result<Self, RegistryError> {
        let m: Self = serde_json::from_slice(bytes).map_err(|e| RegistryError::Manifest(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    /// Field-level checks; file presence is checked when unpacking.
    pub fn validate(&self) -> Result<(), RegistryError> {
        validate_id(&self.id)?;
        parse_version(&self.version)?;
        self.architecture.validate()?;
        for (_, path) in self.files.all() {
            validate_relative(path)?;
            if path == MANIFEST_FILE {
                return Err(RegistryError::Manifest("payload file may not be named manifest.json".into()));
            }
        }
        Ok(())
    }

    /// Store directory name, `<id>-<version>`.
    pub fn dir_name(&self) -> String {
        format!("{}-{}", self.id, self.version)
    }

    pub fn semver(&self) -> semver::Version {
        parse_version(&self.version).expect("validated manifest")
    }
}
