//! Words-per-second measurement.
//!
//! A warm-up load and translation of unrelated text runs first and is not
//! timed. The timed region then covers loading the model and translating the
//! corpus. With `pre_split` the input holds one sentence per line and no
//! sentence splitting happens inside the timed region.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pipeline::{CancelToken, EngineConfig, LoadedModel, Pipeline, PipelineError};

const WARM_UP_TEXT: &str = "The weather was mild for the season. Nobody expected the bridge to reopen so soon.";

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("cannot read benchmark input: {0}")]
    Input(#[from] std::io::Error),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    /// Source words per wall-clock second.
    pub wps: f64,
    pub wall_seconds: f64,
    pub cpu_seconds: f64,
    pub loaded_in_seconds: f64,
    pub words: u64,
    pub sentences: u64,
    pub threads: u64,
}

impl BenchReport {
    /// Single-line JSON.
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }

    pub fn to_human(&self) -> String {
        format!(
            "words      {}\nsentences  {}\nthreads    {}\nload       {:.3} s\nwall       {:.3} s\ncpu        {:.3} s\nwps        {:.1}\n",
            self.words,
            self.sentences,
            self.threads,
            self.loaded_in_seconds,
            self.wall_seconds,
            self.cpu_seconds,
            self.wps
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchOptions {
    pub threads: usize,
    pub max_batch_tokens: usize,
    pub pre_split: bool,
}

/// Report plus what was produced, so callers can compare outputs across runs.
#[derive(Debug, Clone)]
pub struct BenchRun {
    pub report: BenchReport,
    /// One entry per input line when pre-split, else a single entry.
    pub translations: Vec<String>,
}

/// Whitespace-delimited source tokens.
pub fn count_words(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

/// Process CPU time (user plus system) in seconds.
pub fn process_cpu_seconds() -> f64 {
    let mut usage = std::mem::MaybeUninit::<libc::rusage>::zeroed();
    // SAFETY: getrusage fills the struct it is given and has no other effects.
    let rc = unsafe { libc::getrusage(libc::RUSAGE_SELF, usage.as_mut_ptr()) };
    if rc != 0 {
        return 0.0;
    }
    // SAFETY: initialised by the successful call above.
    let usage = unsafe { usage.assume_init() };
    let tv = |t: libc::timeval| t.tv_sec as f64 + t.tv_usec as f64 * 1e-6;
    tv(usage.ru_utime) + tv(usage.ru_stime)
}

/// Runs one benchmark. `load` is called twice: once for the untimed warm-up
/// and once inside the timed region, so it should read the model from disk
/// rather than from a cache.
pub fn run_bench<F>(load: F, input: &str, options: BenchOptions) -> Result<BenchRun, BenchError>
where
    F: Fn() -> Result<LoadedModel, PipelineError>,
{
    let config = EngineConfig { threads: options.threads, max_batch_tokens: options.max_batch_tokens, workspace_bytes: 0 };
    let pipeline = Pipeline::new(config)?;
    let never = CancelToken::new();

    let warm = load()?;
    pipeline.translate_text(&warm, WARM_UP_TEXT, &never)?;
    drop(warm);

    let lines: Vec<String> = if options.pre_split {
        input.lines().map(str::to_string).collect()
    } else {
        Vec::new()
    };

    let cpu_start = process_cpu_seconds();
    let start = Instant::now();
    let model = load()?;
    let loaded_in = start.elapsed().as_secs_f64();
    let (translations, sentences) = if options.pre_split {
        let n = lines.len() as u64;
        (pipeline.translate_sentences(&model, &lines, &never)?, n)
    } else {
        let annotated = crate::textops::split_sentences(input, &model.abbreviations);
        let n = annotated.sentences.len() as u64;
        (vec![pipeline.translate_annotated(&model, &annotated, &never)?], n)
    };
    let wall = start.elapsed().as_secs_f64();
    let cpu = (process_cpu_seconds() - cpu_start).max(0.0);

    let words = count_words(input);
    let wps = if wall > 0.0 { words as f64 / wall } else { 0.0 };
    Ok(BenchRun {
        report: BenchReport {
            wps,
            wall_seconds: wall,
            cpu_seconds: cpu,
            loaded_in_seconds: loaded_in,
            words,
            sentences,
            threads: options.threads as u64,
        },
        translations,
    })
}
