use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use super::manifest::{validate_relative, ModelManifest, MANIFEST_FILE};
use super::RegistryError;
use crate::model::{load_model, Model};
use crate::shortlist::Shortlist;
use crate::textops::Vocabulary;

/// Refuse archives that expand beyond this.
const MAX_UNPACKED_BYTES: u64 = 4 << 30;

/// Builds a package archive. `files` maps package-relative paths to contents;
/// the manifest is written first. Entries carry fixed metadata so identical
/// inputs give identical archives.
pub fn build_package(manifest: &ModelManifest, files: &[(&str, &[u8])]) -> Result<Vec<u8>, RegistryError> {
    manifest.validate()?;
    let mut tar = tar::Builder::new(GzEncoder::new(Vec::new(), Compression::default()));
    let mut append = |path: &str, data: &[u8]| -> Result<(), RegistryError> {
        validate_relative(path)?;
        let mut header = tar::Header::new_gnu();
        header.set_size(data.len() as u64);
        header.set_mode(0o644);
        header.set_mtime(0);
        header.set_entry_type(tar::EntryType::Regular);
        tar.append_data(&mut header, path, data)?;
        Ok(())
    };
    append(MANIFEST_FILE, manifest.to_json().as_bytes())?;
    for (path, data) in files {
        append(path, data)?;
    }
    Ok(tar.into_inner()?.finish()?)
}

/// Everything a package provides, parsed and cross-checked.
pub struct PackageContents {
    pub manifest: ModelManifest,
    pub model: Model,
    pub src_vocab: Vocabulary,
    pub trg_vocab: Vocabulary,
    pub shortlist: Shortlist,
}

impl PackageContents {
    /// Loads and validates an unpacked package directory.
    pub fn load(dir: &Path) -> Result<Self, RegistryError> {
        let manifest = ModelManifest::parse(&read_member(dir, MANIFEST_FILE)?)?;
        let arch = manifest.architecture.clone();
        let model = load_model(&read_member(dir, &manifest.files.weights)?, arch.clone())?;
        let vocab = |path: &str| -> Result<Vocabulary, RegistryError> {
            let text = String::from_utf8(read_member(dir, path)?)
                .map_err(|_| RegistryError::Package(format!("{path} is not UTF-8")))?;
            let v = Vocabulary::parse(&text)?;
            if v.len() != arch.vocab_size {
                return Err(RegistryError::Package(format!(
                    "{path} has {} entries, architecture declares vocab_size {}",
                    v.len(),
                    arch.vocab_size
                )));
            }
            if (v.pad_id(), v.unk_id(), v.eos_id()) != (arch.pad_id, arch.unk_id, arch.eos_id) {
                return Err(RegistryError::Package(format!("{path} special ids differ from the architecture")));
            }
            Ok(v)
        };
        let src_vocab = vocab(&manifest.files.vocab_src)?;
        let trg_vocab = vocab(&manifest.files.vocab_trg)?;
        let shortlist = Shortlist::deserialize(&read_member(dir, &manifest.files.shortlist)?)?;
        if shortlist.vocab_size() != arch.vocab_size {
            return Err(RegistryError::Package(format!(
                "shortlist vocab_size {} differs from architecture {}",
                shortlist.vocab_size(),
                arch.vocab_size
            )));
        }
        Ok(Self { manifest, model, src_vocab, trg_vocab, shortlist })
    }
}

fn read_member(dir: &Path, rel: &str) -> Result<Vec<u8>, RegistryError> {
    match fs::read(dir.join(rel)) {
        Ok(b) => Ok(b),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            Err(RegistryError::Manifest(format!("referenced file {rel} is missing from the package")))
        }
        Err(e) => Err(e.into()),
    }
}

/// Extracts a package into the empty directory `dest` and validates it.
/// Only regular files and directories with plain relative paths are accepted.
pub fn unpack_package<R: Read>(archive: R, dest: &Path) -> Result<PackageContents, RegistryError> {
    let mut tar = tar::Archive::new(GzDecoder::new(archive));
    let mut total = 0u64;
    let bad = |m: String| RegistryError::Package(m);
    for entry in tar.entries().map_err(|e| bad(e.to_string()))? {
        let mut entry = entry.map_err(|e| bad(e.to_string()))?;
        let path = entry.path().map_err(|e| bad(e.to_string()))?.into_owned();
        let rel = path.to_str().ok_or_else(|| bad("non UTF-8 path".into()))?.trim_end_matches('/').to_string();
        let kind = entry.header().entry_type();
        if kind.is_dir() {
            validate_relative(&rel).map_err(|e| bad(e.to_string()))?;
            fs::create_dir_all(dest.join(&rel))?;
            continue;
        }
        if !kind.is_file() {
            return Err(bad(format!("{rel}: only regular files are allowed")));
        }
        validate_relative(&rel).map_err(|e| bad(e.to_string()))?;
        total += entry.size();
        if total > MAX_UNPACKED_BYTES {
            return Err(bad("package expands beyond the size limit".into()));
        }
        let target = dest.join(&rel);
        if let Some(parent) = target.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut out = fs::File::create_new(&target)
            .map_err(|e| if e.kind() == std::io::ErrorKind::AlreadyExists { bad(format!("duplicate entry {rel}")) } else { e.into() })?;
        // Read fully first so corrupt input and a failing disk give different errors.
        let mut data = Vec::with_capacity(entry.size() as usize);
        entry.read_to_end(&mut data).map_err(|e| bad(format!("{rel}: {e}")))?;
        out.write_all(&data)?;
        out.flush()?;
    }
    PackageContents::load(dest)
}
