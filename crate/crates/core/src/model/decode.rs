//! Encoder forward pass, SSRU decoder steps and batched greedy search.
//!
//! Every sentence is computed on its own rows: linear layers quantize
//! activations per row and attention never crosses sentence boundaries, so a
//! sentence's output does not depend on what else is in the batch.

use super::layers::{add_in_place, position_encoding, sigmoid, Attention};
use super::{Model, ModelError, TokenId};
use crate::tensor::{quantize_rows, FloatMatrix, Kernel};

/// Encoder output for one sentence: `len x emb_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSentence {
    pub states: FloatMatrix,
}

/// Which output rows the decoder scores.
#[derive(Debug, Clone, Copy)]
pub enum OutputVocab<'a> {
    /// Every token in the vocabulary.
    Full,
    /// One sorted candidate list shared by every row.
    Shared(&'a [TokenId]),
    /// One sorted candidate list per row / sentence.
    PerSentence(&'a [Vec<TokenId>]),
}

impl<'a> OutputVocab<'a> {
    fn for_row(&self, row: usize) -> Option<&'a [TokenId]> {
        match *self {
            OutputVocab::Full => None,
            OutputVocab::Shared(c) => Some(c),
            OutputVocab::PerSentence(c) => Some(&c[row]),
        }
    }
}

/// Per-sentence decoder state: one SSRU cell per layer plus the projected
/// encoder memory used by cross-attention.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderState {
    cells: Vec<Vec<f32>>,
    cross_keys: Vec<Vec<f32>>,
    cross_values: Vec<Vec<f32>>,
    position: usize,
}

impl DecoderState {
    /// SSRU cells `c_t`, one per decoder layer.
    pub fn cells(&self) -> &[Vec<f32>] {
        &self.cells
    }

    pub fn set_cells(&mut self, cells: Vec<Vec<f32>>) {
        assert_eq!(cells.len(), self.cells.len());
        self.cells = cells;
    }

    /// Number of steps decoded so far.
    pub fn position(&self) -> usize {
        self.position
    }
}

impl Model {
    fn check_tokens(&self, ids: &[TokenId]) -> Result<(), ModelError> {
        let vocab_size = self.config.vocab_size;
        match ids.iter().find(|&&id| id as usize >= vocab_size) {
            Some(&id) => Err(ModelError::TokenOutOfRange { id, vocab_size }),
            None => Ok(()),
        }
    }

    fn check_candidates(&self, cands: &[TokenId]) -> Result<(), ModelError> {
        if cands.is_empty() {
            return Err(ModelError::Candidates("empty".into()));
        }
        self.check_tokens(cands)?;
        if cands.windows(2).any(|w| w[0] >= w[1]) {
            return Err(ModelError::Candidates("not sorted and deduplicated".into()));
        }
        for (name, id) in [("eos", self.config.eos_id), ("unk", self.config.unk_id)] {
            if cands.binary_search(&id).is_err() {
                return Err(ModelError::Candidates(format!("missing {name} id {id}")));
            }
        }
        Ok(())
    }

    /// Scaled embedding plus position encoding, written into `out`.
    fn embed_into(&self, token: Option<TokenId>, pos: usize, out: &mut [f32]) {
        let d = self.config.emb_dim;
        position_encoding(pos, d, out);
        if let Some(t) = token {
            let scale = (d as f32).sqrt();
            let row = &self.embeddings.data()[t as usize * d..(t as usize + 1) * d];
            for ((o, &q), &s) in out.iter_mut().zip(row).zip(self.embeddings.scales()) {
                *o += q as f32 / s * scale;
            }
        }
    }

    /// Runs the encoder over each sentence. Sentences may differ in length.
    pub fn encode(&self, batch: &[Vec<TokenId>]) -> Result<Vec<EncodedSentence>, ModelError> {
        let d = self.config.emb_dim;
        for s in batch {
            if s.len() > self.config.max_src_len {
                return Err(ModelError::SequenceTooLong {
                    len: s.len(),
                    max: self.config.max_src_len,
                });
            }
            self.check_tokens(s)?;
        }
        let total: usize = batch.iter().map(Vec::len).sum();
        let mut x = vec![0f32; total * d];
        let mut row = 0;
        for s in batch {
            for (pos, &t) in s.iter().enumerate() {
                self.embed_into(Some(t), pos, &mut x[row * d..(row + 1) * d]);
                row += 1;
            }
        }
        let mut x = FloatMatrix::from_raw(total, d, x);
        let heads = self.config.heads;
        for layer in &self.encoder {
            let a = layer.attn_norm.forward(&x);
            let q = layer.attn.query.forward(&a);
            let k = layer.attn.key.forward(&a);
            let v = layer.attn.value.forward(&a);
            let mut ctx = Vec::with_capacity(total * d);
            let mut start = 0;
            for s in batch {
                let span = start * d..(start + s.len()) * d;
                ctx.extend(Attention::attend(
                    &q.data()[span.clone()],
                    &k.data()[span.clone()],
                    &v.data()[span],
                    d,
                    heads,
                ));
                start += s.len();
            }
            let o = layer.attn.output.forward(&FloatMatrix::from_raw(total, d, ctx));
            let mut data = x.into_data();
            add_in_place(&mut data, o.data());
            x = FloatMatrix::from_raw(total, d, data);

            let f = layer.ffn.forward(&layer.ffn_norm.forward(&x));
            let mut data = x.into_data();
            add_in_place(&mut data, f.data());
            x = FloatMatrix::from_raw(total, d, data);
        }
        let x = self.enc_norm.forward(&x);
        let mut out = Vec::with_capacity(batch.len());
        let mut start = 0;
        for s in batch {
            let rows = x.data()[start * d..(start + s.len()) * d].to_vec();
            out.push(EncodedSentence { states: FloatMatrix::from_raw(s.len(), d, rows) });
            start += s.len();
        }
        Ok(out)
    }

    /// Encoder over a padded `batch x src_len` id matrix. Returns a
    /// `batch x src_len x emb_dim` buffer with zeros at padded positions.
    pub fn encode_padded(
        &self,
        ids: &[TokenId],
        lengths: &[usize],
        src_len: usize,
    ) -> Result<Vec<f32>, ModelError> {
        if ids.len() != lengths.len() * src_len || lengths.iter().any(|&l| l > src_len) {
            return Err(ModelError::ShapeMismatch {
                tensor: "padded batch".into(),
                expected: format!("{} x {src_len}", lengths.len()),
                found: format!("{} ids", ids.len()),
            });
        }
        let batch: Vec<Vec<TokenId>> = lengths
            .iter()
            .enumerate()
            .map(|(b, &l)| ids[b * src_len..b * src_len + l].to_vec())
            .collect();
        let encoded = self.encode(&batch)?;
        let d = self.config.emb_dim;
        let mut out = vec![0f32; lengths.len() * src_len * d];
        for (b, e) in encoded.iter().enumerate() {
            let off = b * src_len * d;
            out[off..off + e.states.data().len()].copy_from_slice(e.states.data());
        }
        Ok(out)
    }

    /// Initial decoder states: zero cells and projected cross-attention memory.
    pub fn start_states(&self, encoded: &[EncodedSentence]) -> Vec<DecoderState> {
        let d = self.config.emb_dim;
        let total: usize = encoded.iter().map(|e| e.states.rows()).sum();
        let mut all = Vec::with_capacity(total * d);
        for e in encoded {
            all.extend_from_slice(e.states.data());
        }
        let memory = FloatMatrix::from_raw(total, d, all);
        let mut states: Vec<DecoderState> = encoded
            .iter()
            .map(|_| DecoderState {
                cells: vec![vec![0.0; d]; self.decoder.len()],
                cross_keys: Vec::with_capacity(self.decoder.len()),
                cross_values: Vec::with_capacity(self.decoder.len()),
                position: 0,
            })
            .collect();
        for layer in &self.decoder {
            let k = layer.cross.key.forward(&memory);
            let v = layer.cross.value.forward(&memory);
            let mut start = 0;
            for (state, e) in states.iter_mut().zip(encoded) {
                let span = start * d..(start + e.states.rows()) * d;
                state.cross_keys.push(k.data()[span.clone()].to_vec());
                state.cross_values.push(v.data()[span].to_vec());
                start += e.states.rows();
            }
        }
        states
    }

    /// One decoder step for each state. `prev[i]` is the previously emitted
    /// token of row `i` (`None` at the first step). Returns, per row, the
    /// logits of that row's candidates in candidate order.
    pub fn decode_step(
        &self,
        states: &mut [&mut DecoderState],
        prev: &[Option<TokenId>],
        vocab: OutputVocab<'_>,
    ) -> Result<Vec<Vec<f32>>, ModelError> {
        assert_eq!(states.len(), prev.len(), "one previous token per state");
        let rows = states.len();
        let cands: Vec<Option<&[TokenId]>> = (0..rows).map(|r| vocab.for_row(r)).collect();
        for c in cands.iter().flatten() {
            self.check_candidates(c)?;
        }
        self.check_tokens(&prev.iter().flatten().copied().collect::<Vec<_>>())?;
        Ok(self.step_rows(states, prev, &cands))
    }

    fn step_rows(
        &self,
        states: &mut [&mut DecoderState],
        prev: &[Option<TokenId>],
        cands: &[Option<&[TokenId]>],
    ) -> Vec<Vec<f32>> {
        let d = self.config.emb_dim;
        let heads = self.config.heads;
        let rows = states.len();
        let mut x = vec![0f32; rows * d];
        for (r, (state, &tok)) in states.iter().zip(prev).enumerate() {
            self.embed_into(tok, state.position, &mut x[r * d..(r + 1) * d]);
        }
        let mut x = FloatMatrix::from_raw(rows, d, x);

        for (l, layer) in self.decoder.iter().enumerate() {
            // SSRU: f = sigmoid(W_f a + b_f); c = f*c_prev + (1-f)*(W_c a); x += relu(c)
            let a = layer.ssru_norm.forward(&x);
            let forget = layer.forget.forward(&a);
            let cand = layer.cell.forward(&a);
            let mut data = x.into_data();
            for (r, state) in states.iter_mut().enumerate() {
                let c = &mut state.cells[l];
                let f = &forget.data()[r * d..(r + 1) * d];
                let u = &cand.data()[r * d..(r + 1) * d];
                for j in 0..d {
                    let g = sigmoid(f[j]);
                    c[j] = g * c[j] + (1.0 - g) * u[j];
                }
                let out = &mut data[r * d..(r + 1) * d];
                for (o, &cj) in out.iter_mut().zip(c.iter()) {
                    *o += cj.max(0.0);
                }
            }
            x = FloatMatrix::from_raw(rows, d, data);

            let q = layer.cross.query.forward(&layer.cross_norm.forward(&x));
            let mut ctx = Vec::with_capacity(rows * d);
            for (r, state) in states.iter().enumerate() {
                ctx.extend(Attention::attend(
                    &q.data()[r * d..(r + 1) * d],
                    &state.cross_keys[l],
                    &state.cross_values[l],
                    d,
                    heads,
                ));
            }
            let o = layer.cross.output.forward(&FloatMatrix::from_raw(rows, d, ctx));
            let mut data = x.into_data();
            add_in_place(&mut data, o.data());
            x = FloatMatrix::from_raw(rows, d, data);

            let f = layer.ffn.forward(&layer.ffn_norm.forward(&x));
            let mut data = x.into_data();
            add_in_place(&mut data, f.data());
            x = FloatMatrix::from_raw(rows, d, data);
        }
        for state in states.iter_mut() {
            state.position += 1;
        }
        self.output_logits(&self.dec_norm.forward(&x), cands)
    }

    /// Logits against the tied embedding table, restricted per row to its
    /// candidates. The embedding column scales are folded into the hidden
    /// state so the product runs in integer arithmetic:
    /// `logit[c] = sum_d (h_d / s_d) * q[c,d]`.
    fn output_logits(&self, h: &FloatMatrix, cands: &[Option<&[TokenId]>]) -> Vec<Vec<f32>> {
        let d = self.config.emb_dim;
        let mut folded = h.data().to_vec();
        for row in folded.chunks_exact_mut(d) {
            for (v, s) in row.iter_mut().zip(self.embeddings.scales()) {
                *v /= s;
            }
        }
        let (qa, row_scales) = quantize_rows(&FloatMatrix::from_raw(h.rows(), d, folded));
        let kernel = Kernel::detect();
        let score = |r: usize, tok: usize| {
            kernel.dot(&qa[r * d..(r + 1) * d], self.output.column(tok)) as f32 / row_scales[r]
        };
        cands
            .iter()
            .enumerate()
            .map(|(r, c)| match c {
                Some(c) => c.iter().map(|&t| score(r, t as usize)).collect(),
                None => (0..self.config.vocab_size).map(|t| score(r, t)).collect(),
            })
            .collect()
    }

    /// Greedy batched decoding. Output order matches input order.
    pub fn translate_batch(
        &self,
        sentences: &[Vec<TokenId>],
        vocab: OutputVocab<'_>,
    ) -> Result<Vec<Vec<TokenId>>, ModelError> {
        self.translate_batch_with(sentences, vocab, &|| false)
    }

    /// Like [`Model::translate_batch`], polling `should_stop` before every
    /// decoder step and returning [`ModelError::Cancelled`] once it fires.
    pub fn translate_batch_with(
        &self,
        sentences: &[Vec<TokenId>],
        vocab: OutputVocab<'_>,
        should_stop: &dyn Fn() -> bool,
    ) -> Result<Vec<Vec<TokenId>>, ModelError> {
        if let OutputVocab::PerSentence(c) = vocab {
            if c.len() != sentences.len() {
                return Err(ModelError::Candidates(format!(
                    "{} candidate lists for {} sentences",
                    c.len(),
                    sentences.len()
                )));
            }
        }
        for r in 0..sentences.len() {
            if let Some(c) = vocab.for_row(r) {
                self.check_candidates(c)?;
            }
        }
        let eos = self.config.eos_id;
        let mut outputs: Vec<Vec<TokenId>> = vec![Vec::new(); sentences.len()];
        // Empty sources have nothing to attend to; they translate to [eos].
        let live: Vec<usize> = (0..sentences.len()).filter(|&i| !sentences[i].is_empty()).collect();
        for (i, s) in sentences.iter().enumerate() {
            if s.is_empty() {
                outputs[i].push(eos);
            }
        }
        if live.is_empty() {
            return Ok(outputs);
        }
        let batch: Vec<Vec<TokenId>> = live.iter().map(|&i| sentences[i].clone()).collect();
        let encoded = self.encode(&batch)?;
        let mut states = self.start_states(&encoded);
        let caps: Vec<usize> = batch.iter().map(|s| self.config.max_target_len(s.len())).collect();
        let mut active = vec![true; live.len()];
        let mut prev: Vec<Option<TokenId>> = vec![None; live.len()];

        while active.iter().any(|&a| a) {
            if should_stop() {
                return Err(ModelError::Cancelled);
            }
            let idx: Vec<usize> = (0..live.len()).filter(|&j| active[j]).collect();
            let step_prev: Vec<Option<TokenId>> = idx.iter().map(|&j| prev[j]).collect();
            let step_cands: Vec<Option<&[TokenId]>> =
                idx.iter().map(|&j| vocab.for_row(live[j])).collect();
            let mut refs: Vec<&mut DecoderState> = states
                .iter_mut()
                .enumerate()
                .filter(|(j, _)| active[*j])
                .map(|(_, s)| s)
                .collect();
            let logits = self.step_rows(&mut refs, &step_prev, &step_cands);
            for ((&j, row), cands) in idx.iter().zip(&logits).zip(&step_cands) {
                // First maximum wins, i.e. the lowest id among ties.
                let mut best = 0;
                for (c, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = c;
                    }
                }
                let token = cands.map_or(best as TokenId, |c| c[best]);
                let out = &mut outputs[live[j]];
                out.push(token);
                prev[j] = Some(token);
                if token == eos || out.len() >= caps[j] {
                    active[j] = false;
                }
            }
        }
        Ok(outputs)
    }
}
