use std::sync::Arc;

use super::PipelineError;
use crate::model::{Model, ModelError, OutputVocab, TokenId};
use crate::shortlist::Shortlist;
use crate::textops::{Abbreviations, Vocabulary};

/// Anything that maps batches of source token ids to target token ids.
///
/// Implementations must translate each unit independently of the others in
/// the batch, and poll `should_stop` often enough to bound cancellation
/// latency.
pub trait Translator: Send + Sync {
    fn max_src_len(&self) -> usize;

    fn eos_id(&self) -> TokenId;

    fn translate_units(
        &self,
        units: &[Vec<TokenId>],
        should_stop: &dyn Fn() -> bool,
    ) -> Result<Vec<Vec<TokenId>>, PipelineError>;
}

/// The quantized student model, optionally restricted by a shortlist.
pub struct NeuralTranslator {
    model: Model,
    shortlist: Option<Shortlist>,
}

impl NeuralTranslator {
    pub fn new(model: Model, shortlist: Option<Shortlist>) -> Self {
        Self { model, shortlist }
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn shortlist(&self) -> Option<&Shortlist> {
        self.shortlist.as_ref()
    }
}

impl Translator for NeuralTranslator {
    fn max_src_len(&self) -> usize {
        self.model.config().max_src_len
    }

    fn eos_id(&self) -> TokenId {
        self.model.config().eos_id
    }

    fn translate_units(
        &self,
        units: &[Vec<TokenId>],
        should_stop: &dyn Fn() -> bool,
    ) -> Result<Vec<Vec<TokenId>>, PipelineError> {
        let c = self.model.config();
        let result = match &self.shortlist {
            None => self.model.translate_batch_with(units, OutputVocab::Full, should_stop),
            Some(sl) => {
                // Candidates per sentence, so a sentence decodes the same in any batch.
                let specials = [c.eos_id, c.unk_id];
                let cands: Vec<Vec<TokenId>> =
                    units.iter().map(|u| sl.candidates(u, &specials)).collect();
                self.model.translate_batch_with(units, OutputVocab::PerSentence(&cands), should_stop)
            }
        };
        result.map_err(|e| match e {
            ModelError::Cancelled => PipelineError::Cancelled,
            e => e.into(),
        })
    }
}

/// Echoes its input; the identity model used for format-preservation checks
/// and as the built-in `copy` model.
pub struct CopyTranslator {
    pub eos_id: TokenId,
    pub max_src_len: usize,
}

impl Translator for CopyTranslator {
    fn max_src_len(&self) -> usize {
        self.max_src_len
    }

    fn eos_id(&self) -> TokenId {
        self.eos_id
    }

    fn translate_units(
        &self,
        units: &[Vec<TokenId>],
        should_stop: &dyn Fn() -> bool,
    ) -> Result<Vec<Vec<TokenId>>, PipelineError> {
        if should_stop() {
            return Err(PipelineError::Cancelled);
        }
        Ok(units
            .iter()
            .map(|u| u.iter().copied().chain([self.eos_id]).collect())
            .collect())
    }
}

/// A model ready to serve: translator plus the text-side resources.
pub struct LoadedModel {
    pub id: String,
    pub translator: Arc<dyn Translator>,
    pub src_vocab: Arc<Vocabulary>,
    pub trg_vocab: Arc<Vocabulary>,
    pub abbreviations: Arc<Abbreviations>,
}

/// Id of the always-available identity model.
pub const COPY_MODEL_ID: &str = "copy";

impl LoadedModel {
    /// The built-in identity model over a byte-level vocabulary.
    pub fn copy() -> Self {
        let vocab = Arc::new(Vocabulary::byte_level());
        Self {
            id: COPY_MODEL_ID.to_string(),
            translator: Arc::new(CopyTranslator { eos_id: vocab.eos_id(), max_src_len: 256 }),
            src_vocab: vocab.clone(),
            trg_vocab: vocab,
            abbreviations: Arc::new(Abbreviations::for_language("en")),
        }
    }

    pub fn with_translator(id: &str, translator: Arc<dyn Translator>, vocab: Vocabulary) -> Self {
        let vocab = Arc::new(vocab);
        Self {
            id: id.to_string(),
            translator,
            src_vocab: vocab.clone(),
            trg_vocab: vocab,
            abbreviations: Arc::new(Abbreviations::for_language("en")),
        }
    }
}
