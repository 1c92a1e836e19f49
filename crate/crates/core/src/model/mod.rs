//! Student translation model: transformer encoder, SSRU decoder, tied
//! embeddings, and an output layer that only scores candidate tokens.

mod decode;
mod io;
pub mod layers;

pub use decode::{DecoderState, EncodedSentence, OutputVocab};
pub use io::{load_model, save_model, BLOB_MAGIC, BLOB_VERSION};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{quantize, FloatMatrix, PackedQ8, QuantizedMatrix, TensorError};
use layers::{Attention, FeedForward, LayerNorm, Linear};

pub type TokenId = u32;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("model blob is truncated: {0}")]
    Truncated(String),
    #[error("model blob has bad magic bytes")]
    BadMagic,
    #[error("unsupported model blob version {0}")]
    UnknownVersion(u32),
    #[error("shape mismatch for {tensor}: expected {expected}, found {found}")]
    ShapeMismatch { tensor: String, expected: String, found: String },
    #[error("{0} trailing bytes after the last tensor")]
    TrailingData(usize),
    #[error("token id {id} out of range for vocabulary of {vocab_size}")]
    TokenOutOfRange { id: TokenId, vocab_size: usize },
    #[error("sequence of {len} tokens exceeds max_src_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("invalid candidate list: {0}")]
    Candidates(String),
    #[error("decoding cancelled")]
    Cancelled,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Architecture hyperparameters, carried in the package manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub emb_dim: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_src_len: usize,
    pub max_len_factor: f32,
    pub eos_id: TokenId,
    pub unk_id: TokenId,
    pub pad_id: TokenId,
}

impl ModelConfig {
    /// Small fixed configuration used for tests and demo packages.
    pub fn desk() -> Self {
        Self {
            vocab_size: 256,
            emb_dim: 64,
            enc_layers: 2,
            dec_layers: 2,
            heads: 4,
            ffn_dim: 128,
            max_src_len: 128,
            max_len_factor: 1.5,
            pad_id: 0,
            unk_id: 1,
            eos_id: 2,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let counts = [
            ("vocab_size", self.vocab_size),
            ("emb_dim", self.emb_dim),
            ("enc_layers", self.enc_layers),
            ("dec_layers", self.dec_layers),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
            ("max_src_len", self.max_src_len),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::Config(format!("{name} must be positive")));
        }
        if !self.emb_dim.is_multiple_of(self.heads) {
            return Err(ModelError::Config(format!(
                "emb_dim {} not divisible by heads {}",
                self.emb_dim, self.heads
            )));
        }
        if !self.emb_dim.is_multiple_of(2) {
            return Err(ModelError::Config("emb_dim must be even".into()));
        }
        if !(self.max_len_factor.is_finite() && self.max_len_factor > 0.0) {
            return Err(ModelError::Config("max_len_factor must be positive".into()));
        }
        let specials = [self.eos_id, self.unk_id, self.pad_id];
        if specials.iter().any(|&id| id as usize >= self.vocab_size) {
            return Err(ModelError::Config("special ids must be below vocab_size".into()));
        }
        if specials[0] == specials[1] || specials[0] == specials[2] || specials[1] == specials[2] {
            return Err(ModelError::Config("special ids must be distinct".into()));
        }
        Ok(())
    }

    /// Output length cap: `ceil(src_len * max_len_factor) + 1`.
    pub fn max_target_len(&self, src_len: usize) -> usize {
        (src_len as f64 * self.max_len_factor as f64).ceil() as usize + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub attn_norm: LayerNorm,
    pub attn: Attention,
    pub ffn_norm: LayerNorm,
    pub ffn: FeedForward,
}

/// One decoder block: SSRU in place of self-attention, then cross-attention
/// and a feed-forward sublayer.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayerWeights {
    pub ssru_norm: LayerNorm,
    /// `W_f`, `b_f`.
    pub forget: Linear,
    /// `W_c` (no bias).
    pub cell: Linear,
    pub cross_norm: LayerNorm,
    pub cross: Attention,
    pub ffn_norm: LayerNorm,
    pub ffn: FeedForward,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    embeddings: QuantizedMatrix,
    /// The embedding table seen as a `emb x vocab` column-major output
    /// projection; column `t` is embedding row `t`.
    output: PackedQ8,
    encoder: Vec<EncoderLayer>,
    enc_norm: LayerNorm,
    decoder: Vec<DecoderLayerWeights>,
    dec_norm: LayerNorm,
}

impl PartialEq for Model {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.embeddings == other.embeddings
            && self.encoder == other.encoder
            && self.enc_norm == other.enc_norm
            && self.decoder == other.decoder
            && self.dec_norm == other.dec_norm
    }
}

impl Model {
    pub fn from_parts(
        config: ModelConfig,
        embeddings: QuantizedMatrix,
        encoder: Vec<EncoderLayer>,
        enc_norm: LayerNorm,
        decoder: Vec<DecoderLayerWeights>,
        dec_norm: LayerNorm,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let d = config.emb_dim;
        let shape = |name: &str, expected: (usize, usize), found: (usize, usize)| {
            if expected == found {
                Ok(())
            } else {
                Err(ModelError::ShapeMismatch {
                    tensor: name.to_string(),
                    expected: format!("{}x{}", expected.0, expected.1),
                    found: format!("{}x{}", found.0, found.1),
                })
            }
        };
        shape(
            "embeddings",
            (config.vocab_size, d),
            (embeddings.rows(), embeddings.cols()),
        )?;
        if encoder.len() != config.enc_layers {
            return Err(ModelError::ShapeMismatch {
                tensor: "encoder".into(),
                expected: format!("{} layers", config.enc_layers),
                found: format!("{} layers", encoder.len()),
            });
        }
        if decoder.len() != config.dec_layers {
            return Err(ModelError::ShapeMismatch {
                tensor: "decoder".into(),
                expected: format!("{} layers", config.dec_layers),
                found: format!("{} layers", decoder.len()),
            });
        }
        let lin = |name: String, l: &Linear, i: usize, o: usize| {
            shape(&name, (i, o), (l.in_dim(), l.out_dim()))
        };
        let attn = |prefix: String, a: &Attention| -> Result<(), ModelError> {
            lin(format!("{prefix}.query"), &a.query, d, d)?;
            lin(format!("{prefix}.key"), &a.key, d, d)?;
            lin(format!("{prefix}.value"), &a.value, d, d)?;
            lin(format!("{prefix}.output"), &a.output, d, d)
        };
        let ffn = |prefix: String, f: &FeedForward| -> Result<(), ModelError> {
            lin(format!("{prefix}.up"), &f.up, d, config.ffn_dim)?;
            lin(format!("{prefix}.down"), &f.down, config.ffn_dim, d)
        };
        for (i, l) in encoder.iter().enumerate() {
            attn(format!("encoder.{i}.attn"), &l.attn)?;
            ffn(format!("encoder.{i}.ffn"), &l.ffn)?;
        }
        for (i, l) in decoder.iter().enumerate() {
            lin(format!("decoder.{i}.forget"), &l.forget, d, d)?;
            lin(format!("decoder.{i}.cell"), &l.cell, d, d)?;
            attn(format!("decoder.{i}.cross"), &l.cross)?;
            ffn(format!("decoder.{i}.ffn"), &l.ffn)?;
        }
        let output = PackedQ8::from_columns(
            d,
            config.vocab_size,
            embeddings.data().to_vec(),
            vec![1.0; config.vocab_size],
        );
        Ok(Self { config, embeddings, output, encoder, enc_norm, decoder, dec_norm })
    }

    /// Randomly initialised weights, deterministic in `seed`.
    pub fn random(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.emb_dim;
        let f = config.ffn_dim;
        let embeddings = {
            let data = (0..config.vocab_size * d)
                .map(|_| rng.random_range(-1.0f32..1.0))
                .collect();
            quantize(&FloatMatrix::from_raw(config.vocab_size, d, data)).expect("finite init")
        };
        let mut encoder = Vec::new();
        for _ in 0..config.enc_layers {
            let attn = rand_attention(&mut rng, d);
            encoder.push(EncoderLayer {
                attn_norm: LayerNorm::identity(d),
                attn,
                ffn_norm: LayerNorm::identity(d),
                ffn: FeedForward {
                    up: rand_linear(&mut rng, d, f, true),
                    down: rand_linear(&mut rng, f, d, true),
                },
            });
        }
        let mut decoder = Vec::new();
        for _ in 0..config.dec_layers {
            let forget = rand_linear(&mut rng, d, d, true);
            let cell = rand_linear(&mut rng, d, d, false);
            let cross = rand_attention(&mut rng, d);
            decoder.push(DecoderLayerWeights {
                ssru_norm: LayerNorm::identity(d),
                forget,
                cell,
                cross_norm: LayerNorm::identity(d),
                cross,
                ffn_norm: LayerNorm::identity(d),
                ffn: FeedForward {
                    up: rand_linear(&mut rng, d, f, true),
                    down: rand_linear(&mut rng, f, d, true),
                },
            });
        }
        Self::from_parts(
            config,
            embeddings,
            encoder,
            LayerNorm::identity(d),
            decoder,
            LayerNorm::identity(d),
        )
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn embeddings(&self) -> &QuantizedMatrix {
        &self.embeddings
    }

    pub fn encoder_layers(&self) -> &[EncoderLayer] {
        &self.encoder
    }

    pub fn decoder_layers(&self) -> &[DecoderLayerWeights] {
        &self.decoder
    }

    pub fn encoder_norm(&self) -> &LayerNorm {
        &self.enc_norm
    }

    pub fn decoder_norm(&self) -> &LayerNorm {
        &self.dec_norm
    }

    /// Swaps one decoder layer. Shapes are checked against the config.
    pub fn replace_decoder_layer(
        &mut self,
        index: usize,
        layer: DecoderLayerWeights,
    ) -> Result<(), ModelError> {
        let mut decoder = self.decoder.clone();
        decoder[index] = layer;
        *self = Self::from_parts(
            self.config.clone(),
            self.embeddings.clone(),
            self.encoder.clone(),
            self.enc_norm.clone(),
            decoder,
            self.dec_norm.clone(),
        )?;
        Ok(())
    }

    /// Total parameter bytes as stored (i8 weights, f32 scales and vectors).
    pub fn weight_bytes(&self) -> usize {
        let mut out = Vec::new();
        save_model(self, &mut out).expect("in-memory write");
        out.len()
    }
}

fn rand_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> QuantizedMatrix {
    let limit = (6.0 / (rows + cols) as f32).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-limit..limit)).collect();
    quantize(&FloatMatrix::from_raw(rows, cols, data)).expect("finite init")
}

fn rand_linear(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bias: bool) -> Linear {
    let w = rand_matrix(rng, rows, cols);
    let b = bias.then(|| (0..cols).map(|_| rng.random_range(-0.1f32..0.1)).collect());
    Linear::new(w, b)
}

fn rand_attention(rng: &mut ChaCha8Rng, d: usize) -> Attention {
    Attention {
        query: rand_linear(rng, d, d, true),
        key: rand_linear(rng, d, d, true),
        value: rand_linear(rng, d, d, true),
        output: rand_linear(rng, d, d, true),
    }
}
