use serde::{Deserialize, Serialize};

use super::manifest::{parse_version, validate_id};
use super::{is_sha256_hex, RegistryError};

pub const CATALOG_SCHEMA: u64 = 1;

/// One downloadable package as advertised by the catalog.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub id: String,
    pub name: String,
    pub src_lang: String,
    pub trg_lang: String,
    pub version: String,
    pub url: String,
    pub sha256: String,
    pub size_bytes: u64,
}

impl CatalogEntry {
    pub fn validate(&self) -> Result<(), RegistryError> {
        let bad = |m: String| RegistryError::MalformedCatalog(m);
        validate_id(&self.id).map_err(|e| bad(e.to_string()))?;
        parse_version(&self.version).map_err(|e| bad(e.to_string()))?;
        if !is_sha256_hex(&self.sha256) {
            return Err(bad(format!("{}: sha256 must be 64 hex characters", self.id)));
        }
        if self.url.is_empty() {
            return Err(bad(format!("{}: empty url", self.id)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Catalog {
    pub schema: u64,
    pub models: Vec<CatalogEntry>,
}

/// Parses and validates a catalog document. Relative entry urls are resolved
/// against `base_url` when one is given.
pub fn parse_catalog(body: &str, base_url: Option<&str>) -> Result<Vec<CatalogEntry>, RegistryError> {
    let value: serde_json::Value =
        serde_json::from_str(body).map_err(|e| RegistryError::MalformedCatalog(e.to_string()))?;
    let schema = value
        .get("schema")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| RegistryError::MalformedCatalog("missing integer field `schema`".into()))?;
    if schema != CATALOG_SCHEMA {
        return Err(RegistryError::UnknownSchema(schema));
    }
    let catalog: Catalog =
        serde_json::from_value(value).map_err(|e| RegistryError::MalformedCatalog(e.to_string()))?;
    let base = base_url.and_then(|b| url::Url::parse(b).ok());
    catalog
        .models
        .into_iter()
        .map(|mut entry| {
            entry.validate()?;
            if let (Some(base), Err(url::ParseError::RelativeUrlWithoutBase)) = (&base, url::Url::parse(&entry.url)) {
                entry.url = base
                    .join(&entry.url)
                    .map_err(|e| RegistryError::MalformedCatalog(format!("{}: {e}", entry.id)))?
                    .to_string();
            }
            Ok(entry)
        })
        .collect()
}
