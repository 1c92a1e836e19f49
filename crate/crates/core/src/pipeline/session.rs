//! As-you-type request handling.
//!
//! Each session carries a generation counter. Submitting generation `g`
//! cancels every older pending or running request of the same session, and a
//! result is only delivered as a translation if no newer generation has been
//! submitted by the time it completes. The decision is made under the session
//! lock, so delivered generations are strictly increasing per session.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};
use tokio::sync::oneshot;

use super::{CancelToken, EngineConfig, LoadedModel, Pipeline, PipelineError};

/// Resolves model ids to loaded models.
pub trait ModelSource: Send + Sync {
    fn load(&self, model_id: &str) -> Result<Arc<LoadedModel>, PipelineError>;
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestOptions {
    pub threads_override: Option<usize>,
    pub max_batch_tokens_override: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranslationRequest {
    pub session_id: String,
    pub generation: u64,
    pub model_id: String,
    pub text: String,
    #[serde(default)]
    pub options: RequestOptions,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    Translated(String),
    /// Superseded by a newer generation of the same session.
    Cancelled,
}

type Delivery = Result<Outcome, PipelineError>;

/// Awaitable result of a submitted request.
pub struct ResponseHandle {
    generation: u64,
    rx: oneshot::Receiver<Delivery>,
}

impl ResponseHandle {
    pub fn generation(&self) -> u64 {
        self.generation
    }

    /// Blocks the current thread. Must not be called from an async context.
    pub fn wait(self) -> Delivery {
        self.rx.blocking_recv().unwrap_or(Ok(Outcome::Cancelled))
    }

    pub async fn recv(self) -> Delivery {
        self.rx.await.unwrap_or(Ok(Outcome::Cancelled))
    }
}

#[derive(Default)]
struct Session {
    latest: u64,
    last_delivered: u64,
    pending: Vec<(u64, CancelToken)>,
}

struct Inner {
    config: RwLock<EngineConfig>,
    pools: Mutex<HashMap<usize, Arc<Pipeline>>>,
    models: Arc<dyn ModelSource>,
    sessions: Mutex<HashMap<String, Session>>,
    in_flight: AtomicUsize,
}

/// Queues requests onto the worker pool and enforces supersession.
#[derive(Clone)]
pub struct Scheduler {
    inner: Arc<Inner>,
}

impl Scheduler {
    pub fn new(config: EngineConfig, models: Arc<dyn ModelSource>) -> Result<Self, PipelineError> {
        config.validate()?;
        let s = Self {
            inner: Arc::new(Inner {
                config: RwLock::new(config),
                pools: Mutex::new(HashMap::new()),
                models,
                sessions: Mutex::new(HashMap::new()),
                in_flight: AtomicUsize::new(0),
            }),
        };
        s.pipeline_for(&RequestOptions::default())?;
        Ok(s)
    }

    pub fn engine_config(&self) -> EngineConfig {
        *self.inner.config.read().expect("config lock")
    }

    pub fn set_engine_config(&self, config: EngineConfig) -> Result<(), PipelineError> {
        config.validate()?;
        *self.inner.config.write().expect("config lock") = config;
        Ok(())
    }

    /// Requests submitted but not yet answered.
    pub fn in_flight(&self) -> usize {
        self.inner.in_flight.load(Ordering::SeqCst)
    }

    pub fn models(&self) -> &Arc<dyn ModelSource> {
        &self.inner.models
    }

    /// Pipeline for the effective configuration of a request. Pools are
    /// cached per thread count.
    pub fn pipeline_for(&self, options: &RequestOptions) -> Result<Arc<Pipeline>, PipelineError> {
        let config = self
            .engine_config()
            .with_overrides(options.threads_override, options.max_batch_tokens_override);
        config.validate()?;
        let mut pools = self.inner.pools.lock().expect("pool lock");
        let base = match pools.get(&config.threads) {
            Some(p) => p.clone(),
            None => {
                let p = Arc::new(Pipeline::new(config)?);
                pools.insert(config.threads, p.clone());
                p
            }
        };
        if *base.config() == config {
            Ok(base)
        } else {
            Ok(Arc::new(base.reconfigured(config)))
        }
    }

    /// Queues `request`, cancelling older generations of its session.
    pub fn submit(&self, request: TranslationRequest) -> Result<ResponseHandle, PipelineError> {
        let pipeline = self.pipeline_for(&request.options)?;
        let generation = request.generation;
        let token = CancelToken::new();
        {
            let mut sessions = self.inner.sessions.lock().expect("session lock");
            let session = sessions.entry(request.session_id.clone()).or_default();
            if generation <= session.latest {
                return Err(PipelineError::NonMonotoneGeneration {
                    latest: session.latest,
                    got: generation,
                });
            }
            session.latest = generation;
            for (_, older) in session.pending.drain(..) {
                older.cancel();
            }
            session.pending.push((generation, token.clone()));
        }
        self.inner.in_flight.fetch_add(1, Ordering::SeqCst);
        tracing::debug!(
            session = %request.session_id,
            generation,
            model = %request.model_id,
            chars = request.text.chars().count(),
            "translation queued"
        );

        let (tx, rx) = oneshot::channel();
        let inner = self.inner.clone();
        let job_pipeline = pipeline.clone();
        pipeline.pool().spawn(move || {
            let result = if token.is_cancelled() {
                Err(PipelineError::Cancelled)
            } else {
                inner
                    .models
                    .load(&request.model_id)
                    .and_then(|m| job_pipeline.translate_text(&m, &request.text, &token))
            };
            inner.finish(&request.session_id, generation, result, tx);
        });
        Ok(ResponseHandle { generation, rx })
    }

    /// Drops the bookkeeping of an idle session. A later request for the same
    /// id starts from generation zero again.
    pub fn end_session(&self, session_id: &str) {
        let mut sessions = self.inner.sessions.lock().expect("session lock");
        if sessions.get(session_id).is_some_and(|s| s.pending.is_empty()) {
            sessions.remove(session_id);
        }
    }

    /// Submits and blocks until the request resolves.
    pub fn translate(&self, request: TranslationRequest) -> Delivery {
        self.submit(request)?.wait()
    }
}

impl Inner {
    fn finish(
        &self,
        session_id: &str,
        generation: u64,
        result: Result<String, PipelineError>,
        tx: oneshot::Sender<Delivery>,
    ) {
        let mut sessions = self.sessions.lock().expect("session lock");
        let session = sessions.get_mut(session_id).expect("session registered at submit");
        session.pending.retain(|(g, _)| *g != generation);
        let delivery = match result {
            Ok(text) if generation == session.latest && generation > session.last_delivered => {
                session.last_delivered = generation;
                Ok(Outcome::Translated(text))
            }
            Ok(_) | Err(PipelineError::Cancelled) => Ok(Outcome::Cancelled),
            Err(e) => Err(e),
        };
        tracing::debug!(
            session = %session_id,
            generation,
            delivered = matches!(delivery, Ok(Outcome::Translated(_))),
            "translation finished"
        );
        // Sent while holding the lock so no newer generation can slip in between.
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        let _ = tx.send(delivery);
    }
}
