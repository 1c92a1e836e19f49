//! Binary lexical shortlists.
//!
//! For every source token the shortlist keeps its `k` most co-occurring target
//! tokens; the `f` globally most frequent targets are always allowed. At query
//! time the union of those lists and the special ids restricts the output
//! layer.
//!
//! File layout, little-endian:
//!
//! ```text
//! "LSHL" | version u32 = 1 | vocab_size u32 | f u32 | k u32 | first_f u32 x f
//! entry_count u32 | per entry: source u32 | len u32 | targets u32 x len
//! ```

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::BufRead;

use thiserror::Error;

use crate::model::TokenId;

pub const SHORTLIST_MAGIC: &[u8; 4] = b"LSHL";
pub const SHORTLIST_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum ShortlistError {
    #[error("bad shortlist magic")]
    BadMagic,
    #[error("unsupported shortlist version {0}")]
    UnknownVersion(u32),
    #[error("token id {id} out of range for vocabulary of {vocab_size}")]
    IdOutOfRange { id: TokenId, vocab_size: usize },
    #[error("shortlist data truncated")]
    Truncated,
    #[error("malformed shortlist: {0}")]
    Malformed(String),
    #[error("count table line {line}: {message}")]
    CountTable { line: usize, message: String },
}

/// Non-fatal adjustments made while building.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ShortlistWarning {
    FClamped { requested: usize, used: usize },
    KClamped { requested: usize, used: usize },
}

/// Sparse source-by-target co-occurrence counts.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CountTable {
    counts: HashMap<(TokenId, TokenId), u64>,
}

impl CountTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, source: TokenId, target: TokenId, count: u64) {
        *self.counts.entry((source, target)).or_insert(0) += count;
    }

    pub fn get(&self, source: TokenId, target: TokenId) -> u64 {
        self.counts.get(&(source, target)).copied().unwrap_or(0)
    }

    pub fn iter(&self) -> impl Iterator<Item = ((TokenId, TokenId), u64)> + '_ {
        self.counts.iter().map(|(&k, &v)| (k, v))
    }

    /// Reads whitespace-separated `source target count` lines. Blank lines and
    /// lines starting with `#` are skipped.
    pub fn parse<R: BufRead>(reader: R) -> Result<Self, ShortlistError> {
        let mut table = Self::new();
        for (n, line) in reader.lines().enumerate() {
            let err = |message: String| ShortlistError::CountTable { line: n + 1, message };
            let line = line.map_err(|e| err(e.to_string()))?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 3 {
                return Err(err(format!("expected 3 fields, found {}", fields.len())));
            }
            let num = |s: &str| s.parse::<u64>().map_err(|e| err(format!("{s:?}: {e}")));
            let (s, t, c) = (num(fields[0])?, num(fields[1])?, num(fields[2])?);
            let id = |v: u64| TokenId::try_from(v).map_err(|_| err(format!("id {v} too large")));
            table.add(id(s)?, id(t)?, c);
        }
        Ok(table)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Shortlist {
    vocab_size: usize,
    k: usize,
    first_f: Vec<TokenId>,
    per_source: BTreeMap<TokenId, Vec<TokenId>>,
}

/// Sorts `(id, count)` by count descending, then id ascending, and keeps `n`.
fn top_n(mut scored: Vec<(TokenId, u64)>, n: usize) -> Vec<TokenId> {
    scored.sort_unstable_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut ids: Vec<TokenId> = scored.into_iter().take(n).map(|(id, _)| id).collect();
    ids.sort_unstable();
    ids
}

impl Shortlist {
    /// Builds a shortlist from co-occurrence counts. `f` and `k` larger than
    /// the vocabulary are clamped and reported in the returned warnings.
    pub fn build(
        counts: &CountTable,
        f: usize,
        k: usize,
        vocab_size: usize,
    ) -> Result<(Self, Vec<ShortlistWarning>), ShortlistError> {
        let mut warnings = Vec::new();
        let f_used = f.min(vocab_size);
        if f_used != f {
            warnings.push(ShortlistWarning::FClamped { requested: f, used: f_used });
        }
        let k_used = k.min(vocab_size);
        if k_used != k {
            warnings.push(ShortlistWarning::KClamped { requested: k, used: k_used });
        }
        for w in &warnings {
            tracing::warn!(?w, "shortlist parameter clamped");
        }

        let mut totals = vec![0u64; vocab_size];
        let mut by_source: BTreeMap<TokenId, Vec<(TokenId, u64)>> = BTreeMap::new();
        for ((s, t), c) in counts.iter() {
            for id in [s, t] {
                if id as usize >= vocab_size {
                    return Err(ShortlistError::IdOutOfRange { id, vocab_size });
                }
            }
            totals[t as usize] += c;
            if c > 0 {
                by_source.entry(s).or_default().push((t, c));
            }
        }
        let first_f = top_n(
            totals.into_iter().enumerate().map(|(id, c)| (id as TokenId, c)).collect(),
            f_used,
        );
        let per_source = by_source
            .into_iter()
            .map(|(s, scored)| (s, top_n(scored, k_used)))
            .filter(|(_, list)| !list.is_empty())
            .collect();
        Ok((Self { vocab_size, k: k_used, first_f, per_source }, warnings))
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn first_f(&self) -> &[TokenId] {
        &self.first_f
    }

    pub fn targets_for(&self, source: TokenId) -> &[TokenId] {
        self.per_source.get(&source).map_or(&[], Vec::as_slice)
    }

    pub fn entries(&self) -> impl Iterator<Item = (TokenId, &[TokenId])> {
        self.per_source.iter().map(|(&s, l)| (s, l.as_slice()))
    }

    /// Sorted union of the frequent targets, each source token's targets and
    /// `specials`. Unknown source ids contribute nothing.
    pub fn candidates(&self, source_tokens: &[TokenId], specials: &[TokenId]) -> Vec<TokenId> {
        let mut set: BTreeSet<TokenId> = self.first_f.iter().copied().collect();
        for s in source_tokens {
            set.extend(self.targets_for(*s));
        }
        set.extend(specials);
        set.into_iter().collect()
    }

    pub fn serialize(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(SHORTLIST_MAGIC);
        let mut put = |v: u32| out.extend_from_slice(&v.to_le_bytes());
        put(SHORTLIST_VERSION);
        put(self.vocab_size as u32);
        put(self.first_f.len() as u32);
        put(self.k as u32);
        self.first_f.iter().for_each(|&id| put(id));
        put(self.per_source.len() as u32);
        for (&s, list) in &self.per_source {
            put(s);
            put(list.len() as u32);
            list.iter().for_each(|&id| put(id));
        }
        out
    }

    pub fn deserialize(bytes: &[u8]) -> Result<Self, ShortlistError> {
        if bytes.len() < 4 {
            return Err(ShortlistError::Truncated);
        }
        if &bytes[..4] != SHORTLIST_MAGIC {
            return Err(ShortlistError::BadMagic);
        }
        let mut cur = Cursor { buf: &bytes[4..] };
        let version = cur.u32()?;
        if version != SHORTLIST_VERSION {
            return Err(ShortlistError::UnknownVersion(version));
        }
        let vocab_size = cur.u32()? as usize;
        let f = cur.u32()? as usize;
        let k = cur.u32()? as usize;
        let first_f = cur.ids(f, vocab_size)?;
        let entries = cur.u32()? as usize;
        let mut per_source = BTreeMap::new();
        let mut last_source = None;
        for _ in 0..entries {
            let source = cur.u32()?;
            if source as usize >= vocab_size {
                return Err(ShortlistError::IdOutOfRange { id: source, vocab_size });
            }
            if last_source.is_some_and(|p| p >= source) {
                return Err(ShortlistError::Malformed("entries not in ascending source order".into()));
            }
            last_source = Some(source);
            let len = cur.u32()? as usize;
            if len > k {
                return Err(ShortlistError::Malformed(format!(
                    "source {source} lists {len} targets, more than k = {k}"
                )));
            }
            per_source.insert(source, cur.ids(len, vocab_size)?);
        }
        if !cur.buf.is_empty() {
            return Err(ShortlistError::Malformed(format!("{} trailing bytes", cur.buf.len())));
        }
        Ok(Self { vocab_size, k, first_f, per_source })
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
}

impl Cursor<'_> {
    fn u32(&mut self) -> Result<u32, ShortlistError> {
        if self.buf.len() < 4 {
            return Err(ShortlistError::Truncated);
        }
        let (head, tail) = self.buf.split_at(4);
        self.buf = tail;
        Ok(u32::from_le_bytes([head[0], head[1], head[2], head[3]]))
    }

    /// `n` strictly ascending ids below `vocab_size`.
    fn ids(&mut self, n: usize, vocab_size: usize) -> Result<Vec<TokenId>, ShortlistError> {
        if self.buf.len() / 4 < n {
            return Err(ShortlistError::Truncated);
        }
        let ids = (0..n).map(|_| self.u32()).collect::<Result<Vec<_>, _>>()?;
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= vocab_size) {
            return Err(ShortlistError::IdOutOfRange { id, vocab_size });
        }
        if ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(ShortlistError::Malformed("id list not strictly ascending".into()));
        }
        Ok(ids)
    }
}
