//! The only code in the crate that opens network connections.
//!
//! Requests carry `User-Agent: localmt/<version>` and nothing else that could
//! identify the user: there is no cookie jar, and nothing is fetched unless
//! one of the two public functions here is called.

use std::fs;
use std::io::{Read, Write};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use super::store::{FaultPoint, InstallOrigin, InstalledModel, Store};
use super::{parse_catalog, sha256_hex, CatalogEntry, RegistryError};

pub const APP_NAME: &str = "localmt";
pub const APP_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const USER_AGENT: &str = concat!("localmt/", env!("CARGO_PKG_VERSION"));

/// Catalog documents larger than this are rejected.
const MAX_CATALOG_BYTES: u64 = 8 << 20;

static REQUESTS: AtomicUsize = AtomicUsize::new(0);

/// Number of HTTP requests issued by this process so far.
pub fn network_requests() -> usize {
    REQUESTS.load(Ordering::SeqCst)
}

/// A cookie-less HTTP client that never retries on its own.
pub struct HttpClient {
    agent: ureq::Agent,
}

impl Default for HttpClient {
    fn default() -> Self {
        Self::new()
    }
}

impl HttpClient {
    pub fn new() -> Self {
        let agent = ureq::Agent::config_builder()
            .user_agent(USER_AGENT)
            .http_status_as_error(false)
            .max_redirects(5)
            .timeout_connect(Some(Duration::from_secs(20)))
            .timeout_recv_body(Some(Duration::from_secs(600)))
            .build()
            .into();
        Self { agent }
    }

    fn get(&self, url: &str) -> Result<ureq::http::Response<ureq::Body>, RegistryError> {
        REQUESTS.fetch_add(1, Ordering::SeqCst);
        tracing::info!(%url, "GET");
        let resp = self.agent.get(url).call().map_err(|e| RegistryError::Network(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(RegistryError::Network(format!("{url}: HTTP {}", resp.status())));
        }
        Ok(resp)
    }
}

/// Downloads and validates the catalog at `url`.
pub fn fetch_catalog(client: &HttpClient, url: &str) -> Result<Vec<CatalogEntry>, RegistryError> {
    let mut resp = client.get(url)?;
    let body = resp
        .body_mut()
        .with_config()
        .limit(MAX_CATALOG_BYTES)
        .read_to_string()
        .map_err(|e| RegistryError::Network(e.to_string()))?;
    parse_catalog(&body, Some(url))
}

/// Downloads `entry` to a temporary file, checks its size and sha256, then
/// installs it. Nothing is downloaded when the same id and version is
/// already installed and intact.
pub fn download_install(
    client: &HttpClient,
    store: &Store,
    entry: &CatalogEntry,
) -> Result<InstalledModel, RegistryError> {
    entry.validate()?;
    let _reservation = store.reserve(&entry.id)?;
    if let Ok(existing) = store.resolve(&format!("{}@{}", entry.id, entry.version)) {
        if store.verify(&existing).is_ok() {
            return Ok(existing);
        }
    }

    let mut tmp = tempfile::Builder::new().prefix("download-").tempfile_in(store.tmp_dir())?;
    let mut resp = client.get(&entry.url)?;
    let mut reader = resp.body_mut().with_config().limit(entry.size_bytes.saturating_add(1)).reader();
    let mut buf = vec![0u8; 64 * 1024];
    let mut received = 0u64;
    loop {
        let n = match reader.read(&mut buf) {
            Ok(0) => break,
            Ok(n) => n,
            // Hitting the limit means the server sent more than advertised.
            Err(_) if received > entry.size_bytes => break,
            Err(e) => return Err(RegistryError::Network(e.to_string())),
        };
        received += n as u64;
        if received > entry.size_bytes {
            break;
        }
        tmp.write_all(&buf[..n])?;
    }
    tmp.flush()?;
    if received != entry.size_bytes {
        return Err(RegistryError::SizeMismatch { expected: entry.size_bytes, actual: received });
    }
    store.fault(FaultPoint::AfterDownload)?;
    let installed =
        store.install_file(tmp.path(), Some(&entry.sha256), InstallOrigin::Catalog, Some((&entry.id, &entry.version)))?;
    Ok(installed)
}

/// sha256 of a file on disk; used by tooling that writes catalogs.
pub fn file_sha256(path: &std::path::Path) -> Result<(String, u64), RegistryError> {
    let bytes = fs::read(path)?;
    Ok((sha256_hex(&bytes), bytes.len() as u64))
}
