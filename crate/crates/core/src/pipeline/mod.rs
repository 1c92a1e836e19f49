//! Request orchestration: engine sizing, length-sorted batching across a
//! worker pool, and per-session supersession of as-you-type requests.

mod batch;
mod session;
mod translator;

pub use batch::{plan_batches, Pipeline};
pub use session::{
    ModelSource, Outcome, RequestOptions, ResponseHandle, Scheduler, TranslationRequest,
};
pub use translator::{CopyTranslator, LoadedModel, NeuralTranslator, Translator, COPY_MODEL_ID};

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelConfig, ModelError};
use crate::textops::TextError;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("model not found: {0}")]
    ModelNotFound(String),
    #[error("failed to load model {id}: {message}")]
    ModelLoad { id: String, message: String },
    #[error("generation {got} is not above the latest generation {latest} for this session")]
    NonMonotoneGeneration { latest: u64, got: u64 },
    #[error("invalid engine configuration: {0}")]
    Config(String),
    #[error("request cancelled")]
    Cancelled,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Text(#[from] TextError),
}

/// Shared cancellation flag, checked between decoder steps.
#[derive(Debug, Clone, Default)]
pub struct CancelToken(Arc<AtomicBool>);

impl CancelToken {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn cancel(&self) {
        self.0.store(true, Ordering::SeqCst);
    }

    pub fn is_cancelled(&self) -> bool {
        self.0.load(Ordering::SeqCst)
    }
}

/// Worker count and batch sizing for one engine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub threads: usize,
    pub max_batch_tokens: usize,
    pub workspace_bytes: u64,
}

pub const GIB: u64 = 1 << 30;
pub const MIN_BATCH_TOKENS: usize = 256;
pub const MAX_BATCH_TOKENS: usize = 8192;
/// Multiplier over the raw activation footprint of one token.
pub const TOKEN_COST_SAFETY: u64 = 8;

/// Activation bytes budgeted per batched token:
/// `4 * emb_dim * (enc_layers + dec_layers) * TOKEN_COST_SAFETY`.
pub fn per_token_cost(model: &ModelConfig) -> u64 {
    4 * model.emb_dim as u64 * (model.enc_layers + model.dec_layers) as u64 * TOKEN_COST_SAFETY
}

/// Sizes an engine from the machine: one worker per physical core, a
/// workspace of a quarter of free RAM (at most 1 GiB), and as many batch
/// tokens as that workspace allows, clamped to `[256, 8192]`.
pub fn auto_config(physical_cores: usize, free_ram_bytes: u64, model: &ModelConfig) -> EngineConfig {
    let workspace_bytes = (free_ram_bytes / 4).min(GIB);
    let tokens = (workspace_bytes / per_token_cost(model)).min(MAX_BATCH_TOKENS as u64) as usize;
    EngineConfig {
        threads: physical_cores.max(1),
        max_batch_tokens: tokens.max(MIN_BATCH_TOKENS).max(model.max_src_len),
        workspace_bytes,
    }
}

/// Physical core count of this machine.
pub fn physical_cores() -> usize {
    num_cpus::get_physical().max(1)
}

/// Available memory from `/proc/meminfo`, or 2 GiB when unknown.
pub fn free_ram_bytes() -> u64 {
    std::fs::read_to_string("/proc/meminfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("MemAvailable:"))
                .and_then(|l| l.split_whitespace().nth(1))
                .and_then(|kb| kb.parse::<u64>().ok())
        })
        .map_or(2 * GIB, |kb| kb * 1024)
}

impl EngineConfig {
    /// [`auto_config`] for the current machine.
    pub fn detect(model: &ModelConfig) -> Self {
        auto_config(physical_cores(), free_ram_bytes(), model)
    }

    pub fn with_overrides(mut self, threads: Option<usize>, max_batch_tokens: Option<usize>) -> Self {
        if let Some(t) = threads {
            self.threads = t;
        }
        if let Some(b) = max_batch_tokens {
            self.max_batch_tokens = b;
        }
        self
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.threads == 0 {
            return Err(PipelineError::Config("threads must be at least 1".into()));
        }
        if self.max_batch_tokens == 0 {
            return Err(PipelineError::Config("max_batch_tokens must be at least 1".into()));
        }
        Ok(())
    }
}
