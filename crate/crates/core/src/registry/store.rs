use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::manifest::{parse_version, validate_id, ModelManifest, MANIFEST_FILE};
use super::package::{unpack_package, PackageContents};
use super::{sha256_hex, RegistryError};
use crate::pipeline::{LoadedModel, ModelSource, NeuralTranslator, PipelineError, COPY_MODEL_ID};
use crate::textops::Abbreviations;

pub const DATA_DIR_ENV: &str = "APP_DATA_DIR";
/// Install record written next to the package files.
pub const CHECKSUM_FILE: &str = ".install.json";
const LOCK_FILE: &str = "store.lock";

/// `$APP_DATA_DIR`, else the XDG data directory, else `./localmt-data`.
pub fn default_data_dir() -> PathBuf {
    if let Some(dir) = std::env::var_os(DATA_DIR_ENV).filter(|d| !d.is_empty()) {
        return PathBuf::from(dir);
    }
    if let Some(xdg) = std::env::var_os("XDG_DATA_HOME").filter(|d| !d.is_empty()) {
        return PathBuf::from(xdg).join("localmt");
    }
    if let Some(home) = std::env::var_os("HOME").filter(|d| !d.is_empty()) {
        return PathBuf::from(home).join(".local/share/localmt");
    }
    PathBuf::from("localmt-data")
}

/// Steps of an install or delete at which a test can inject a failure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FaultPoint {
    AfterDownload,
    AfterUnpack,
    BeforeRename,
    AfterRename,
    BeforeDeleteRename,
    AfterDeleteRename,
}

impl FaultPoint {
    pub const ALL: [FaultPoint; 6] = [
        FaultPoint::AfterDownload,
        FaultPoint::AfterUnpack,
        FaultPoint::BeforeRename,
        FaultPoint::AfterRename,
        FaultPoint::BeforeDeleteRename,
        FaultPoint::AfterDeleteRename,
    ];
}

type FaultHook = Arc<dyn Fn(FaultPoint) -> bool + Send + Sync>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InstallOrigin {
    Catalog,
    Import,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct InstallRecord {
    archive_sha256: String,
    origin: InstallOrigin,
    files: BTreeMap<String, String>,
}

/// A package present in the store.
#[derive(Debug, Clone, PartialEq)]
pub struct InstalledModel {
    pub manifest: ModelManifest,
    pub dir: PathBuf,
    pub archive_sha256: String,
    pub origin: InstallOrigin,
    pub size_bytes: u64,
}

/// The model directory under a data dir.
///
/// Mutations take an in-process mutex plus an advisory lock on
/// `<data-dir>/store.lock`; reads never lock because installed directories
/// are immutable.
pub struct Store {
    data_dir: PathBuf,
    mutation: Mutex<()>,
    installing: Mutex<HashSet<String>>,
    fault: Option<FaultHook>,
}

/// Releases an id reserved with [`Store::reserve`].
pub(crate) struct Reservation<'a> {
    store: &'a Store,
    id: String,
}

impl Drop for Reservation<'_> {
    fn drop(&mut self) {
        self.store.installing.lock().expect("install set").remove(&self.id);
    }
}

impl Store {
    pub fn open(data_dir: impl Into<PathBuf>) -> Result<Self, RegistryError> {
        let data_dir = data_dir.into();
        fs::create_dir_all(data_dir.join("models"))?;
        fs::create_dir_all(data_dir.join("tmp"))?;
        Ok(Self {
            data_dir,
            mutation: Mutex::new(()),
            installing: Mutex::new(HashSet::new()),
            fault: None,
        })
    }

    /// Calls `hook` at every [`FaultPoint`]; returning true aborts the
    /// operation there with [`RegistryError::Injected`].
    pub fn with_fault_hook(mut self, hook: impl Fn(FaultPoint) -> bool + Send + Sync + 'static) -> Self {
        self.fault = Some(Arc::new(hook));
        self
    }

    pub fn data_dir(&self) -> &Path {
        &self.data_dir
    }

    pub fn models_dir(&self) -> PathBuf {
        self.data_dir.join("models")
    }

    pub(crate) fn tmp_dir(&self) -> PathBuf {
        self.data_dir.join("tmp")
    }

    pub(crate) fn fault(&self, point: FaultPoint) -> Result<(), RegistryError> {
        match &self.fault {
            Some(hook) if hook(point) => Err(RegistryError::Injected(point)),
            _ => Ok(()),
        }
    }

    /// Marks `id` as being installed; fails if another install holds it.
    pub(crate) fn reserve(&self, id: &str) -> Result<Reservation<'_>, RegistryError> {
        let mut set = self.installing.lock().expect("install set");
        if !set.insert(id.to_string()) {
            return Err(RegistryError::InstallInProgress(id.to_string()));
        }
        Ok(Reservation { store: self, id: id.to_string() })
    }

    pub fn is_installing(&self, id: &str) -> bool {
        self.installing.lock().expect("install set").contains(id)
    }

    fn lock_mutations(&self) -> Result<(std::sync::MutexGuard<'_, ()>, fs::File), RegistryError> {
        let guard = self.mutation.lock().expect("store lock");
        let file = fs::OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(self.data_dir.join(LOCK_FILE))?;
        file.lock()?;
        Ok((guard, file))
    }

    /// All installed packages, by id and then newest version first.
    /// Directories that do not hold a readable manifest are skipped.
    pub fn list_local(&self) -> Result<Vec<InstalledModel>, RegistryError> {
        let mut out = Vec::new();
        for entry in fs::read_dir(self.models_dir())? {
            let entry = entry?;
            if !entry.file_type()?.is_dir() || entry.file_name().to_string_lossy().starts_with('.') {
                continue;
            }
            if let Ok(m) = read_installed(&entry.path()) {
                out.push(m);
            }
        }
        out.sort_by(|a, b| {
            a.manifest.id.cmp(&b.manifest.id).then_with(|| b.manifest.semver().cmp(&a.manifest.semver()))
        });
        Ok(out)
    }

    /// Looks up `id` (highest version) or `id@version`.
    pub fn resolve(&self, spec: &str) -> Result<InstalledModel, RegistryError> {
        let (id, version) = match spec.split_once('@') {
            Some((id, v)) => (id, Some(parse_version(v)?)),
            None => (spec, None),
        };
        self.list_local()?
            .into_iter()
            .find(|m| m.manifest.id == id && version.as_ref().is_none_or(|v| *v == m.manifest.semver()))
            .ok_or_else(|| RegistryError::NotFound(spec.to_string()))
    }

    /// Installs a package file from local disk, computing its checksum here.
    pub fn import_archive(&self, path: &Path) -> Result<InstalledModel, RegistryError> {
        self.install_file(path, None, InstallOrigin::Import, None)
    }

    /// Verifies (when `expected_sha256` is given), unpacks, validates and
    /// renames into place. `reserved` is the id already reserved by the caller.
    pub(crate) fn install_file(
        &self,
        archive: &Path,
        expected_sha256: Option<&str>,
        origin: InstallOrigin,
        reserved: Option<(&str, &str)>,
    ) -> Result<InstalledModel, RegistryError> {
        let archive_sha256 = hash_file(archive)?;
        if let Some(expected) = expected_sha256 {
            if !expected.eq_ignore_ascii_case(&archive_sha256) {
                return Err(RegistryError::ChecksumMismatch {
                    expected: expected.to_ascii_lowercase(),
                    actual: archive_sha256,
                });
            }
        }
        let staging = tempfile::Builder::new().prefix("unpack-").tempdir_in(self.tmp_dir())?;
        let contents = unpack_package(fs::File::open(archive)?, staging.path())?;
        self.fault(FaultPoint::AfterUnpack)?;
        let manifest = contents.manifest;
        if let Some((id, version)) = reserved {
            if manifest.id != id || manifest.semver() != parse_version(version)? {
                return Err(RegistryError::Package(format!(
                    "package is {}@{}, catalog promised {id}@{version}",
                    manifest.id, manifest.version
                )));
            }
        }
        let _reservation = match reserved {
            Some(_) => None,
            None => Some(self.reserve(&manifest.id)?),
        };

        let record = InstallRecord { archive_sha256, origin, files: hash_tree(staging.path())? };
        fs::write(
            staging.path().join(CHECKSUM_FILE),
            serde_json::to_vec_pretty(&record).expect("record serializes"),
        )?;

        let target = self.models_dir().join(manifest.dir_name());
        let (_guard, _lock) = self.lock_mutations()?;
        if target.exists() {
            // Same id and version already present: keep the installed copy.
            tracing::info!(model = %manifest.dir_name(), "already installed");
            return read_installed(&target);
        }
        self.fault(FaultPoint::BeforeRename)?;
        fs::rename(staging.path(), &target)?;
        tracing::info!(model = %manifest.dir_name(), "installed");
        self.fault(FaultPoint::AfterRename)?;
        read_installed(&target)
    }

    /// Removes `id` (every version) or `id@version`. Each directory is
    /// renamed out of the store before its contents are deleted.
    pub fn delete(&self, spec: &str) -> Result<Vec<InstalledModel>, RegistryError> {
        let (id, version) = match spec.split_once('@') {
            Some((id, v)) => (id, Some(parse_version(v)?)),
            None => (spec, None),
        };
        validate_id(id).map_err(|_| RegistryError::NotFound(spec.to_string()))?;
        let (_guard, _lock) = self.lock_mutations()?;
        let doomed: Vec<InstalledModel> = self
            .list_local()?
            .into_iter()
            .filter(|m| m.manifest.id == id && version.as_ref().is_none_or(|v| *v == m.manifest.semver()))
            .collect();
        if doomed.is_empty() {
            return Err(RegistryError::NotFound(spec.to_string()));
        }
        for m in &doomed {
            self.fault(FaultPoint::BeforeDeleteRename)?;
            let trash = tempfile::Builder::new().prefix("delete-").tempdir_in(self.tmp_dir())?;
            let parked = trash.path().join("pkg");
            fs::rename(&m.dir, &parked)?;
            tracing::info!(model = %m.manifest.dir_name(), "deleted");
            self.fault(FaultPoint::AfterDeleteRename)?;
            drop(trash);
        }
        Ok(doomed)
    }

    /// Recomputes file checksums and compares them with the install record.
    pub fn verify(&self, model: &InstalledModel) -> Result<(), RegistryError> {
        let record = read_record(&model.dir)?;
        let actual = hash_tree(&model.dir)?;
        if actual != record.files {
            let differing = actual
                .keys()
                .chain(record.files.keys())
                .find(|k| actual.get(*k) != record.files.get(*k))
                .cloned()
                .unwrap_or_default();
            return Err(RegistryError::ChecksumMismatch {
                expected: record.files.get(&differing).cloned().unwrap_or_else(|| "<absent>".into()),
                actual: actual.get(&differing).cloned().unwrap_or_else(|| "<absent>".into()),
            });
        }
        Ok(())
    }

    /// Leftover staging directories from interrupted operations.
    pub fn staging_entries(&self) -> Result<usize, RegistryError> {
        Ok(fs::read_dir(self.tmp_dir())?.count())
    }

    /// Removes staging entries left behind by a crashed process. Entries
    /// younger than `min_age` are kept since another process may own them.
    pub fn sweep_staging(&self, min_age: std::time::Duration) -> Result<usize, RegistryError> {
        let (_guard, _lock) = self.lock_mutations()?;
        let mut removed = 0;
        for entry in fs::read_dir(self.tmp_dir())? {
            let entry = entry?;
            let age = entry.metadata()?.modified()?.elapsed().unwrap_or_default();
            if age < min_age {
                continue;
            }
            let path = entry.path();
            if entry.file_type()?.is_dir() {
                fs::remove_dir_all(&path)?;
            } else {
                fs::remove_file(&path)?;
            }
            removed += 1;
        }
        if removed > 0 {
            tracing::info!(removed, "swept stale staging entries");
        }
        Ok(removed)
    }
}

fn read_record(dir: &Path) -> Result<InstallRecord, RegistryError> {
    let bytes = fs::read(dir.join(CHECKSUM_FILE))?;
    serde_json::from_slice(&bytes).map_err(|e| RegistryError::Package(format!("install record: {e}")))
}

fn read_installed(dir: &Path) -> Result<InstalledModel, RegistryError> {
    let manifest = ModelManifest::parse(&fs::read(dir.join(MANIFEST_FILE))?)?;
    let record = read_record(dir)?;
    let mut size_bytes = 0;
    for rel in record.files.keys() {
        size_bytes += fs::metadata(dir.join(rel)).map(|m| m.len()).unwrap_or(0);
    }
    Ok(InstalledModel {
        manifest,
        dir: dir.to_path_buf(),
        archive_sha256: record.archive_sha256,
        origin: record.origin,
        size_bytes,
    })
}

pub(crate) fn hash_file(path: &Path) -> Result<String, RegistryError> {
    let mut file = fs::File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 64 * 1024];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

/// sha256 of every regular file below `root`, keyed by `/`-separated path.
fn hash_tree(root: &Path) -> Result<BTreeMap<String, String>, RegistryError> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) -> Result<(), RegistryError> {
        for entry in fs::read_dir(dir)? {
            let entry = entry?;
            let path = entry.path();
            let kind = entry.file_type()?;
            if kind.is_dir() {
                walk(root, &path, out)?;
            } else if kind.is_file() {
                let rel = path.strip_prefix(root).expect("below root");
                let rel = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
                if rel != CHECKSUM_FILE {
                    out.insert(rel, sha256_hex(&fs::read(&path)?));
                }
            }
        }
        Ok(())
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out)?;
    Ok(out)
}

/// Loads installed packages on demand, plus the built-in `copy` model.
pub struct StoreModelSource {
    store: Arc<Store>,
    cache: Mutex<HashMap<PathBuf, Arc<LoadedModel>>>,
    copy: Arc<LoadedModel>,
}

impl StoreModelSource {
    pub fn new(store: Arc<Store>) -> Self {
        Self { store, cache: Mutex::new(HashMap::new()), copy: Arc::new(LoadedModel::copy()) }
    }

    pub fn store(&self) -> &Arc<Store> {
        &self.store
    }

    /// Reads and validates a package directory into a ready model.
    pub fn load_dir(dir: &Path) -> Result<LoadedModel, RegistryError> {
        let c = PackageContents::load(dir)?;
        Ok(LoadedModel {
            id: c.manifest.id.clone(),
            translator: Arc::new(NeuralTranslator::new(c.model, Some(c.shortlist))),
            src_vocab: Arc::new(c.src_vocab),
            trg_vocab: Arc::new(c.trg_vocab),
            abbreviations: Arc::new(Abbreviations::for_language(&c.manifest.src_lang)),
        })
    }
}

impl StoreModelSource {
    /// Resolves and reads `model_id` from disk, bypassing the cache.
    pub fn load_uncached(&self, model_id: &str) -> Result<LoadedModel, PipelineError> {
        if model_id == COPY_MODEL_ID {
            return Ok(LoadedModel::copy());
        }
        let installed = self.resolve(model_id)?;
        self.load_installed(model_id, &installed)
    }

    fn resolve(&self, model_id: &str) -> Result<InstalledModel, PipelineError> {
        self.store.resolve(model_id).map_err(|e| match e {
            RegistryError::NotFound(_) => PipelineError::ModelNotFound(model_id.to_string()),
            e => PipelineError::ModelLoad { id: model_id.to_string(), message: e.to_string() },
        })
    }

    fn load_installed(&self, model_id: &str, installed: &InstalledModel) -> Result<LoadedModel, PipelineError> {
        Self::load_dir(&installed.dir)
            .map_err(|e| PipelineError::ModelLoad { id: model_id.to_string(), message: e.to_string() })
    }
}

impl ModelSource for StoreModelSource {
    fn load(&self, model_id: &str) -> Result<Arc<LoadedModel>, PipelineError> {
        if model_id == COPY_MODEL_ID {
            return Ok(self.copy.clone());
        }
        let installed = self.resolve(model_id)?;
        let mut cache = self.cache.lock().expect("model cache");
        cache.retain(|dir, _| dir.exists());
        if let Some(m) = cache.get(&installed.dir) {
            return Ok(m.clone());
        }
        let loaded = Arc::new(self.load_installed(model_id, &installed)?);
        cache.insert(installed.dir, loaded.clone());
        Ok(loaded)
    }
}
