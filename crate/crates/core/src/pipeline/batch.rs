use std::sync::Arc;

use rayon::prelude::*;
use rayon::ThreadPool;

use super::{CancelToken, EngineConfig, LoadedModel, PipelineError};
use crate::model::TokenId;
use crate::textops::{reassemble, split_sentences, AnnotatedText};

/// Groups unit indices into batches: units are visited shortest first and
/// added to the current batch while `batch_size * longest <= max_tokens`.
/// A unit that alone exceeds the budget gets a batch of its own.
pub fn plan_batches(lengths: &[usize], max_tokens: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.sort_by_key(|&i| (lengths[i], i));
    let mut batches = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    for i in order {
        let longest = lengths[i].max(1);
        if !current.is_empty() && (current.len() + 1) * longest > max_tokens {
            batches.push(std::mem::take(&mut current));
        }
        current.push(i);
    }
    if !current.is_empty() {
        batches.push(current);
    }
    batches
}

/// A worker pool plus the batching policy that feeds it.
pub struct Pipeline {
    config: EngineConfig,
    pool: Arc<ThreadPool>,
}

impl Pipeline {
    pub fn new(config: EngineConfig) -> Result<Self, PipelineError> {
        config.validate()?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.threads)
            .thread_name(|i| format!("translate-{i}"))
            .build()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        Ok(Self { config, pool: Arc::new(pool) })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    /// Same worker pool, different batching. `config.threads` is ignored.
    pub fn reconfigured(&self, config: EngineConfig) -> Self {
        Self {
            config: EngineConfig { threads: self.config.threads, ..config },
            pool: self.pool.clone(),
        }
    }

    pub(crate) fn pool(&self) -> &ThreadPool {
        &self.pool
    }

    /// Split, translate and reassemble, keeping all inter-sentence whitespace.
    pub fn translate_text(
        &self,
        model: &LoadedModel,
        text: &str,
        cancel: &CancelToken,
    ) -> Result<String, PipelineError> {
        let annotated = split_sentences(text, &model.abbreviations);
        self.translate_annotated(model, &annotated, cancel)
    }

    pub fn translate_annotated(
        &self,
        model: &LoadedModel,
        annotated: &AnnotatedText,
        cancel: &CancelToken,
    ) -> Result<String, PipelineError> {
        let translated = self.translate_sentences(model, &annotated.sentences, cancel)?;
        Ok(reassemble(annotated, &translated)?)
    }

    /// Translates already-split sentences, returning them in input order.
    pub fn translate_sentences(
        &self,
        model: &LoadedModel,
        sentences: &[String],
        cancel: &CancelToken,
    ) -> Result<Vec<String>, PipelineError> {
        let translator = &model.translator;
        let max_len = translator.max_src_len().max(1);
        let eos = translator.eos_id();

        // Over-long sentences are cut at token boundaries into chunks whose
        // outputs are concatenated again afterwards.
        let mut units: Vec<Vec<TokenId>> = Vec::new();
        let mut owner: Vec<usize> = Vec::new();
        for (i, s) in sentences.iter().enumerate() {
            let ids = model.src_vocab.tokenize(s);
            if ids.is_empty() {
                units.push(ids);
                owner.push(i);
            } else {
                for chunk in ids.chunks(max_len) {
                    units.push(chunk.to_vec());
                    owner.push(i);
                }
            }
        }
        let lengths: Vec<usize> = units.iter().map(Vec::len).collect();
        let batches = plan_batches(&lengths, self.config.max_batch_tokens);
        let should_stop = || cancel.is_cancelled();

        let results: Vec<Vec<Vec<TokenId>>> = self.pool.install(|| {
            batches
                .par_iter()
                .map(|batch| {
                    let input: Vec<Vec<TokenId>> = batch.iter().map(|&u| units[u].clone()).collect();
                    translator.translate_units(&input, &should_stop)
                })
                .collect::<Result<_, _>>()
        })?;

        let mut unit_out: Vec<Vec<TokenId>> = vec![Vec::new(); units.len()];
        for (batch, outs) in batches.iter().zip(results) {
            for (&u, out) in batch.iter().zip(outs) {
                unit_out[u] = out;
            }
        }
        let mut per_sentence: Vec<Vec<TokenId>> = vec![Vec::new(); sentences.len()];
        for (u, mut out) in unit_out.into_iter().enumerate() {
            while out.last() == Some(&eos) {
                out.pop();
            }
            per_sentence[owner[u]].extend(out);
        }
        per_sentence
            .iter()
            .map(|ids| model.trg_vocab.detokenize(ids).map_err(Into::into))
            .collect()
    }
}
