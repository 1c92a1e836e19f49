//! Single-pass binary model loading.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic "LMTM" | version u32 | vocab u32 | emb u32 | ffn u32 | enc_layers u32 | dec_layers u32
//! embeddings                                  (quantized, vocab x emb)
//! per encoder layer:
//!   attn_norm.gain attn_norm.bias             (f32 vectors)
//!   query.w query.b key.w key.b value.w value.b output.w output.b
//!   ffn_norm.gain ffn_norm.bias up.w up.b down.w down.b
//! enc_norm.gain enc_norm.bias
//! per decoder layer:
//!   ssru_norm.gain ssru_norm.bias forget.w forget.b cell.w
//!   cross_norm.gain cross_norm.bias query.w query.b key.w key.b value.w value.b output.w output.b
//!   ffn_norm.gain ffn_norm.bias up.w up.b down.w down.b
//! dec_norm.gain dec_norm.bias
//! ```
//!
//! Matrices use the tensor layout; vectors are `len u32 | f32 x len`.

use std::io::{self, Write};

use super::layers::{Attention, FeedForward, LayerNorm, Linear};
use super::{DecoderLayerWeights, EncoderLayer, Model, ModelConfig, ModelError};
use crate::tensor::{
    read_f32_vec, read_quantized, read_u32, write_f32_vec, write_quantized, QuantizedMatrix,
    TensorReadError,
};

pub const BLOB_MAGIC: &[u8; 4] = b"LMTM";
pub const BLOB_VERSION: u32 = 1;

pub fn save_model<W: Write>(model: &Model, w: &mut W) -> io::Result<()> {
    let c = model.config();
    w.write_all(BLOB_MAGIC)?;
    for v in [BLOB_VERSION, c.vocab_size as u32, c.emb_dim as u32, c.ffn_dim as u32] {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&(c.enc_layers as u32).to_le_bytes())?;
    w.write_all(&(c.dec_layers as u32).to_le_bytes())?;
    write_quantized(w, model.embeddings())?;
    for l in model.encoder_layers() {
        write_norm(w, &l.attn_norm)?;
        write_attention(w, &l.attn)?;
        write_norm(w, &l.ffn_norm)?;
        write_ffn(w, &l.ffn)?;
    }
    write_norm(w, model.encoder_norm())?;
    for l in model.decoder_layers() {
        write_norm(w, &l.ssru_norm)?;
        write_linear(w, &l.forget)?;
        write_linear(w, &l.cell)?;
        write_norm(w, &l.cross_norm)?;
        write_attention(w, &l.cross)?;
        write_norm(w, &l.ffn_norm)?;
        write_ffn(w, &l.ffn)?;
    }
    write_norm(w, model.decoder_norm())
}

fn write_norm<W: Write>(w: &mut W, n: &LayerNorm) -> io::Result<()> {
    write_f32_vec(w, &n.gain)?;
    write_f32_vec(w, &n.bias)
}

fn write_linear<W: Write>(w: &mut W, l: &Linear) -> io::Result<()> {
    write_quantized(w, l.weight())?;
    if let Some(b) = l.bias() {
        write_f32_vec(w, b)?;
    }
    Ok(())
}

fn write_attention<W: Write>(w: &mut W, a: &Attention) -> io::Result<()> {
    for l in [&a.query, &a.key, &a.value, &a.output] {
        write_linear(w, l)?;
    }
    Ok(())
}

fn write_ffn<W: Write>(w: &mut W, f: &FeedForward) -> io::Result<()> {
    write_linear(w, &f.up)?;
    write_linear(w, &f.down)
}

struct Reader<'a> {
    buf: &'a [u8],
    d: usize,
    ffn: usize,
}

impl<'a> Reader<'a> {
    fn lift(name: &str, e: TensorReadError) -> ModelError {
        match e {
            TensorReadError::Truncated { .. } => ModelError::Truncated(format!("{name}: {e}")),
            TensorReadError::Invalid(t) => ModelError::Tensor(t),
        }
    }

    fn u32(&mut self, name: &str) -> Result<u32, ModelError> {
        read_u32(&mut self.buf).map_err(|e| Self::lift(name, e))
    }

    fn matrix(&mut self, name: &str, rows: usize, cols: usize) -> Result<QuantizedMatrix, ModelError> {
        let m = read_quantized(&mut self.buf).map_err(|e| Self::lift(name, e))?;
        if (m.rows(), m.cols()) != (rows, cols) {
            return Err(ModelError::ShapeMismatch {
                tensor: name.to_string(),
                expected: format!("{rows}x{cols}"),
                found: format!("{}x{}", m.rows(), m.cols()),
            });
        }
        Ok(m)
    }

    fn vector(&mut self, name: &str, len: usize) -> Result<Vec<f32>, ModelError> {
        let v = read_f32_vec(&mut self.buf).map_err(|e| Self::lift(name, e))?;
        if v.len() != len {
            return Err(ModelError::ShapeMismatch {
                tensor: name.to_string(),
                expected: format!("{len}"),
                found: format!("{}", v.len()),
            });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(ModelError::ShapeMismatch {
                tensor: name.to_string(),
                expected: "finite values".into(),
                found: "non-finite value".into(),
            });
        }
        Ok(v)
    }

    fn linear(&mut self, name: &str, i: usize, o: usize, bias: bool) -> Result<Linear, ModelError> {
        let w = self.matrix(&format!("{name}.w"), i, o)?;
        let b = if bias { Some(self.vector(&format!("{name}.b"), o)?) } else { None };
        Ok(Linear::new(w, b))
    }

    fn norm(&mut self, name: &str) -> Result<LayerNorm, ModelError> {
        Ok(LayerNorm {
            gain: self.vector(&format!("{name}.gain"), self.d)?,
            bias: self.vector(&format!("{name}.bias"), self.d)?,
        })
    }

    fn attention(&mut self, name: &str) -> Result<Attention, ModelError> {
        let d = self.d;
        Ok(Attention {
            query: self.linear(&format!("{name}.query"), d, d, true)?,
            key: self.linear(&format!("{name}.key"), d, d, true)?,
            value: self.linear(&format!("{name}.value"), d, d, true)?,
            output: self.linear(&format!("{name}.output"), d, d, true)?,
        })
    }

    fn ffn(&mut self, name: &str) -> Result<FeedForward, ModelError> {
        let (d, f) = (self.d, self.ffn);
        Ok(FeedForward {
            up: self.linear(&format!("{name}.up"), d, f, true)?,
            down: self.linear(&format!("{name}.down"), f, d, true)?,
        })
    }
}

/// Loads a model blob written by [`save_model`], checking every tensor shape
/// against `config`.
pub fn load_model(blob: &[u8], config: ModelConfig) -> Result<Model, ModelError> {
    config.validate()?;
    if blob.len() < 4 {
        return Err(ModelError::Truncated("header".into()));
    }
    if &blob[..4] != BLOB_MAGIC {
        return Err(ModelError::BadMagic);
    }
    let mut r = Reader { buf: &blob[4..], d: config.emb_dim, ffn: config.ffn_dim };
    let version = r.u32("version")?;
    if version != BLOB_VERSION {
        return Err(ModelError::UnknownVersion(version));
    }
    let header = [
        ("vocab_size", config.vocab_size),
        ("emb_dim", config.emb_dim),
        ("ffn_dim", config.ffn_dim),
        ("enc_layers", config.enc_layers),
        ("dec_layers", config.dec_layers),
    ];
    for (name, expected) in header {
        let found = r.u32(name)? as usize;
        if found != expected {
            return Err(ModelError::ShapeMismatch {
                tensor: name.to_string(),
                expected: expected.to_string(),
                found: found.to_string(),
            });
        }
    }
    let d = config.emb_dim;
    let embeddings = r.matrix("embeddings", config.vocab_size, d)?;
    let mut encoder = Vec::with_capacity(config.enc_layers);
    for i in 0..config.enc_layers {
        let p = format!("encoder.{i}");
        encoder.push(EncoderLayer {
            attn_norm: r.norm(&format!("{p}.attn_norm"))?,
            attn: r.attention(&format!("{p}.attn"))?,
            ffn_norm: r.norm(&format!("{p}.ffn_norm"))?,
            ffn: r.ffn(&format!("{p}.ffn"))?,
        });
    }
    let enc_norm = r.norm("enc_norm")?;
    let mut decoder = Vec::with_capacity(config.dec_layers);
    for i in 0..config.dec_layers {
        let p = format!("decoder.{i}");
        decoder.push(DecoderLayerWeights {
            ssru_norm: r.norm(&format!("{p}.ssru_norm"))?,
            forget: r.linear(&format!("{p}.forget"), d, d, true)?,
            cell: r.linear(&format!("{p}.cell"), d, d, false)?,
            cross_norm: r.norm(&format!("{p}.cross_norm"))?,
            cross: r.attention(&format!("{p}.cross"))?,
            ffn_norm: r.norm(&format!("{p}.ffn_norm"))?,
            ffn: r.ffn(&format!("{p}.ffn"))?,
        });
    }
    let dec_norm = r.norm("dec_norm")?;
    if !r.buf.is_empty() {
        return Err(ModelError::TrailingData(r.buf.len()));
    }
    Model::from_parts(config, embeddings, encoder, enc_norm, decoder, dec_norm)
}
