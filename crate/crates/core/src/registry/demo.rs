//! Self-contained demo packages with random weights.
//!
//! They translate nonsense, but exercise every part of the stack: package
//! format, installation, shortlist, model loading and decoding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{build_package, ManifestFiles, ModelManifest, RegistryError};
use crate::model::{save_model, Model, ModelConfig, TokenId};
use crate::shortlist::{CountTable, Shortlist};
use crate::textops::Vocabulary;

/// Desk-sized architecture over the 259-entry byte vocabulary.
pub fn desk_config() -> ModelConfig {
    ModelConfig { vocab_size: 259, ..ModelConfig::desk() }
}

/// Roughly the size of a small production student: 32000 pieces, 256-wide,
/// 6 encoder and 2 decoder layers. Packages come out at about 15 MB.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 32000,
        emb_dim: 256,
        enc_layers: 6,
        dec_layers: 2,
        heads: 8,
        ffn_dim: 1536,
        max_src_len: 256,
        ..ModelConfig::desk()
    }
}

/// Byte vocabulary extended with lowercase letter pairs, triples and so on
/// until it holds `size` entries.
pub fn demo_vocabulary(size: usize) -> Result<Vocabulary, RegistryError> {
    let base = Vocabulary::byte_level().len();
    let needed = size.checked_sub(base).ok_or_else(|| {
        RegistryError::Manifest(format!("vocab_size {size} is below the byte vocabulary size {base}"))
    })?;
    let mut extra = Vec::with_capacity(needed);
    let mut len = 2;
    while extra.len() < needed {
        let total = 26usize.pow(len as u32);
        for mut n in 0..total {
            if extra.len() == needed {
                break;
            }
            let mut piece = vec![b'a'; len];
            for slot in piece.iter_mut().rev() {
                *slot = b'a' + (n % 26) as u8;
                n /= 26;
            }
            extra.push(String::from_utf8(piece).expect("ascii"));
        }
        len += 1;
    }
    Ok(Vocabulary::with_pieces(extra)?)
}

/// Every source token maps to itself and a few seeded random targets.
pub fn demo_shortlist(vocab_size: usize, seed: u64) -> Result<Shortlist, RegistryError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = CountTable::new();
    for s in 0..vocab_size as TokenId {
        counts.add(s, s, 20);
        for _ in 0..4 {
            counts.add(s, rng.random_range(0..vocab_size as TokenId), rng.random_range(1..10));
        }
    }
    let (shortlist, _) = Shortlist::build(&counts, 50.min(vocab_size), 20.min(vocab_size), vocab_size)?;
    Ok(shortlist)
}

pub fn demo_manifest(id: &str, version: &str, config: ModelConfig) -> ModelManifest {
    ModelManifest {
        id: id.to_string(),
        name: format!("Demo model {id}"),
        src_lang: "en".into(),
        trg_lang: "xx".into(),
        version: version.to_string(),
        architecture: config,
        files: ManifestFiles {
            weights: "model.bin".into(),
            vocab_src: "vocab.txt".into(),
            vocab_trg: "vocab.txt".into(),
            shortlist: "lex.bin".into(),
        },
        license: "CC0-1.0".into(),
    }
}

/// A complete package archive with random weights derived from `seed`.
pub fn demo_package(id: &str, version: &str, config: ModelConfig, seed: u64) -> Result<Vec<u8>, RegistryError> {
    let manifest = demo_manifest(id, version, config.clone());
    manifest.validate()?;
    let vocab = demo_vocabulary(config.vocab_size)?;
    let model = Model::random(config.clone(), seed)?;
    let mut weights = Vec::new();
    save_model(&model, &mut weights)?;
    let shortlist = demo_shortlist(config.vocab_size, seed ^ 0x5eed)?.serialize();
    build_package(
        &manifest,
        &[
            ("model.bin", &weights),
            ("vocab.txt", vocab.to_file_string().as_bytes()),
            ("lex.bin", &shortlist),
        ],
    )
}
