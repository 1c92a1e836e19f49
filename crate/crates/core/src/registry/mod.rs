//! Model packages, the on-disk store, and the remote catalog.
//!
//! A package is a gzip tar archive holding `manifest.json` plus the files it
//! references. Installed packages live under `<data-dir>/models/<id>-<version>/`
//! and are only ever created or removed by a directory rename, so a reader
//! never observes a half-written model.
//!
//! Only [`fetch_catalog`] and [`download_install`] talk to the network.

mod catalog;
pub mod demo;
mod manifest;
mod net;
mod package;
mod store;

pub use catalog::{parse_catalog, Catalog, CatalogEntry, CATALOG_SCHEMA};
pub use manifest::{validate_id, ManifestFiles, ModelManifest, MANIFEST_FILE};
pub use net::{
    download_install, fetch_catalog, file_sha256, network_requests, HttpClient, APP_NAME, APP_VERSION, USER_AGENT,
};
pub use package::{build_package, unpack_package, PackageContents};
pub use store::{
    default_data_dir, FaultPoint, InstallOrigin, InstalledModel, Store, StoreModelSource, CHECKSUM_FILE,
    DATA_DIR_ENV,
};

use thiserror::Error;

use crate::model::ModelError;
use crate::shortlist::ShortlistError;
use crate::textops::TextError;

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("invalid package: {0}")]
    Package(String),
    #[error("malformed catalog: {0}")]
    MalformedCatalog(String),
    #[error("unsupported catalog schema version {0}")]
    UnknownSchema(u64),
    #[error("network error: {0}")]
    Network(String),
    #[error("checksum mismatch: expected {expected}, got {actual}")]
    ChecksumMismatch { expected: String, actual: String },
    #[error("size mismatch: expected {expected} bytes, got {actual}")]
    SizeMismatch { expected: u64, actual: u64 },
    #[error("model not found: {0}")]
    NotFound(String),
    #[error("an install of {0} is already in progress")]
    InstallInProgress(String),
    #[error("injected failure at {0:?}")]
    Injected(FaultPoint),
    #[error("model weights: {0}")]
    Model(#[from] ModelError),
    #[error("shortlist: {0}")]
    Shortlist(#[from] ShortlistError),
    #[error("vocabulary: {0}")]
    Text(#[from] TextError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl RegistryError {
    /// True for errors caused by bad input rather than the environment.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Self::Network(_) | Self::Io(_) | Self::InstallInProgress(_))
    }
}

/// Lowercase hex sha256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}

fn is_sha256_hex(s: &str) -> bool {
    s.len() == 64 && s.bytes().all(|b| b.is_ascii_hexdigit())
}
