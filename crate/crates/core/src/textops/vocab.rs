//! Subword vocabulary with greedy longest-match tokenization and byte
//! fallback, so every byte string is representable and reversible.

use std::collections::HashMap;

use super::TextError;
use crate::model::TokenId;

pub const PAD_MARKER: &str = "<pad>";
pub const UNK_MARKER: &str = "<unk>";
pub const EOS_MARKER: &str = "</s>";

/// Text rendered for an unknown token.
const UNK_RENDERING: &str = "\u{FFFD}";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    /// Raw bytes of each piece; specials have empty bytes.
    pieces: Vec<Vec<u8>>,
    /// Text form of each piece as written in the vocabulary file.
    names: Vec<String>,
    lookup: HashMap<Vec<u8>, TokenId>,
    byte_ids: [TokenId; 256],
    max_piece_len: usize,
    pad_id: TokenId,
    unk_id: TokenId,
    eos_id: TokenId,
}

fn byte_piece_name(b: u8) -> String {
    format!("<0x{b:02X}>")
}

fn parse_byte_piece(name: &str) -> Option<u8> {
    let hex = name.strip_prefix("<0x")?.strip_suffix('>')?;
    if hex.len() != 2 {
        return None;
    }
    u8::from_str_radix(hex, 16).ok()
}

impl Vocabulary {
    /// Builds a vocabulary from piece names. The first three names are the
    /// pad, unk and eos markers; names of the form `<0xNN>` are single-byte
    /// pieces and all 256 must be present.
    pub fn from_names<I, S>(names: I) -> Result<Self, TextError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.len() < 3 {
            return Err(TextError::Vocabulary("missing pad/unk/eos lines".into()));
        }
        let mut seen = HashMap::new();
        for (i, n) in names.iter().enumerate() {
            if let Some(prev) = seen.insert(n.as_str(), i) {
                return Err(TextError::Vocabulary(format!(
                    "duplicate piece {n:?} on lines {} and {}",
                    prev + 1,
                    i + 1
                )));
            }
        }
        let mut pieces = Vec::with_capacity(names.len());
        let mut lookup = HashMap::new();
        let mut byte_ids = [TokenId::MAX; 256];
        let mut max_piece_len = 1;
        for (i, name) in names.iter().enumerate() {
            let id = i as TokenId;
            if i < 3 {
                pieces.push(Vec::new());
                continue;
            }
            if let Some(b) = parse_byte_piece(name) {
                byte_ids[b as usize] = id;
                pieces.push(vec![b]);
                continue;
            }
            if name.is_empty() {
                return Err(TextError::Vocabulary(format!("empty piece on line {}", i + 1)));
            }
            let bytes = name.as_bytes().to_vec();
            max_piece_len = max_piece_len.max(bytes.len());
            lookup.insert(bytes.clone(), id);
            pieces.push(bytes);
        }
        if let Some(b) = byte_ids.iter().position(|&id| id == TokenId::MAX) {
            return Err(TextError::Vocabulary(format!(
                "missing byte fallback piece {}",
                byte_piece_name(b as u8)
            )));
        }
        Ok(Self {
            pieces,
            names,
            lookup,
            byte_ids,
            max_piece_len,
            pad_id: 0,
            unk_id: 1,
            eos_id: 2,
        })
    }

    /// Specials plus the 256 byte pieces, nothing else (259 entries).
    pub fn byte_level() -> Self {
        Self::with_pieces(std::iter::empty::<String>()).expect("byte vocabulary is valid")
    }

    /// Specials, the 256 byte pieces, then `extra` multi-byte pieces.
    pub fn with_pieces<I, S>(extra: I) -> Result<Self, TextError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut names: Vec<String> = vec![PAD_MARKER.into(), UNK_MARKER.into(), EOS_MARKER.into()];
        names.extend((0..=255u8).map(byte_piece_name));
        names.extend(extra.into_iter().map(Into::into));
        Self::from_names(names)
    }

    /// Parses a vocabulary file: one piece per line.
    pub fn parse(text: &str) -> Result<Self, TextError> {
        let body = text.strip_suffix('\n').unwrap_or(text);
        Self::from_names(body.split('\n').map(|l| l.strip_suffix('\r').unwrap_or(l)))
    }

    pub fn to_file_string(&self) -> String {
        let mut out = self.names.join("\n");
        out.push('\n');
        out
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn pad_id(&self) -> TokenId {
        self.pad_id
    }

    pub fn unk_id(&self) -> TokenId {
        self.unk_id
    }

    pub fn eos_id(&self) -> TokenId {
        self.eos_id
    }

    pub fn piece(&self, id: TokenId) -> Option<&str> {
        self.names.get(id as usize).map(String::as_str)
    }

    pub fn id_of(&self, piece: &str) -> Option<TokenId> {
        self.names.iter().position(|n| n == piece).map(|i| i as TokenId)
    }

    /// Greedy longest match over the piece inventory, falling back to single
    /// bytes.
    pub fn tokenize_bytes(&self, bytes: &[u8]) -> Vec<TokenId> {
        let mut out = Vec::with_capacity(bytes.len());
        let mut i = 0;
        while i < bytes.len() {
            let longest = self.max_piece_len.min(bytes.len() - i);
            let hit = (1..=longest)
                .rev()
                .find_map(|len| self.lookup.get(&bytes[i..i + len]).map(|&id| (id, len)));
            match hit {
                Some((id, len)) => {
                    out.push(id);
                    i += len;
                }
                None => {
                    out.push(self.byte_ids[bytes[i] as usize]);
                    i += 1;
                }
            }
        }
        out
    }

    pub fn tokenize(&self, sentence: &str) -> Vec<TokenId> {
        self.tokenize_bytes(sentence.as_bytes())
    }

    /// Concatenates piece bytes. Pad and eos render as nothing; unk renders as
    /// U+FFFD.
    pub fn detokenize_bytes(&self, ids: &[TokenId]) -> Result<Vec<u8>, TextError> {
        let mut out = Vec::new();
        for &id in ids {
            let piece = self.pieces.get(id as usize).ok_or(TextError::TokenOutOfRange {
                id,
                vocab_size: self.pieces.len(),
            })?;
            if id == self.unk_id {
                out.extend_from_slice(UNK_RENDERING.as_bytes());
            } else {
                out.extend_from_slice(piece);
            }
        }
        Ok(out)
    }

    /// Like [`Vocabulary::detokenize_bytes`]; invalid UTF-8 (possible when a
    /// model emits stray byte pieces) is replaced with U+FFFD.
    pub fn detokenize(&self, ids: &[TokenId]) -> Result<String, TextError> {
        let bytes = self.detokenize_bytes(ids)?;
        Ok(match String::from_utf8(bytes) {
            Ok(s) => s,
            Err(e) => String::from_utf8_lossy(e.as_bytes()).into_owned(),
        })
    }
}
