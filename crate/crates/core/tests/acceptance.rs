//! Acceptance suite. Prints one `PASS`, `FAIL` or `SKIP` line per criterion
//! and fails if any criterion fails.
//!
//! Run with `cargo test -p localmt-core --test acceptance`.

mod common;

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Instant;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tracing::field::{Field, Visit};
use tracing_subscriber::layer::{Context, SubscriberExt};
use tracing_subscriber::Layer;

use common::{catalog_json, entry_json, StubServer};
use localmt::bench::{run_bench, BenchOptions};
use localmt::model::{Model, OutputVocab, TokenId};
use localmt::pipeline::{
    physical_cores, CancelToken, EngineConfig, LoadedModel, ModelSource, Outcome, Pipeline, PipelineError,
    RequestOptions, Scheduler, TranslationRequest,
};
use localmt::registry::demo::{demo_package, demo_shortlist, demo_vocabulary, desk_config, tiny_config};
use localmt::registry::{
    download_install, fetch_catalog, network_requests, FaultPoint, HttpClient, RegistryError, Store,
    StoreModelSource, USER_AGENT,
};
use localmt::shortlist::{CountTable, Shortlist};
use localmt::tensor::{gemm_q8_accumulate_with, quantize, FloatMatrix, Kernel, PackedQ8};
use localmt::textops::{reassemble, split_sentences, Abbreviations};

const SEED: u64 = 0x5eed;
const SECRET: &str = "Obsidian-Walrus quincunx tamarind lighthouse";

#[derive(PartialEq)]
enum Status {
    Pass,
    Fail,
    Skip,
}

struct Verdict {
    status: Status,
    detail: String,
}

impl Verdict {
    fn check(ok: bool, detail: impl Into<String>) -> Self {
        Self { status: if ok { Status::Pass } else { Status::Fail }, detail: detail.into() }
    }

    fn skip(detail: impl Into<String>) -> Self {
        Self { status: Status::Skip, detail: detail.into() }
    }
}

// ---------------------------------------------------------------------------
// Log capture

#[derive(Debug, Clone)]
struct Event {
    fields: HashMap<String, String>,
}

impl Event {
    fn message(&self) -> &str {
        self.fields.get("message").map_or("", String::as_str)
    }
}

struct FieldVisitor<'a>(&'a mut HashMap<String, String>);

impl Visit for FieldVisitor<'_> {
    fn record_debug(&mut self, field: &Field, value: &dyn fmt::Debug) {
        self.0.insert(field.name().to_string(), format!("{value:?}"));
    }

    fn record_str(&mut self, field: &Field, value: &str) {
        self.0.insert(field.name().to_string(), value.to_string());
    }
}

/// Records every event at every level while [`RECORDING`] is set.
struct Recorder;

static RECORDING: AtomicBool = AtomicBool::new(false);

fn events() -> &'static Mutex<Vec<Event>> {
    static EVENTS: OnceLock<Mutex<Vec<Event>>> = OnceLock::new();
    EVENTS.get_or_init(|| Mutex::new(Vec::new()))
}

impl<S: tracing::Subscriber> Layer<S> for Recorder {
    fn on_event(&self, event: &tracing::Event<'_>, _ctx: Context<'_, S>) {
        if !RECORDING.load(Ordering::SeqCst) {
            return;
        }
        let mut fields = HashMap::new();
        fields.insert("target".to_string(), event.metadata().target().to_string());
        event.record(&mut FieldVisitor(&mut fields));
        events().lock().unwrap().push(Event { fields });
    }
}

fn record<T>(f: impl FnOnce() -> T) -> (T, Vec<Event>) {
    events().lock().unwrap().clear();
    RECORDING.store(true, Ordering::SeqCst);
    let out = f();
    RECORDING.store(false, Ordering::SeqCst);
    (out, std::mem::take(&mut *events().lock().unwrap()))
}

// ---------------------------------------------------------------------------
// Shared fixtures

fn random_model(seed: u64) -> Model {
    Model::random(desk_config(), seed).unwrap()
}

fn random_sources(rng: &mut ChaCha8Rng, n: usize, max_len: usize, vocab: usize) -> Vec<Vec<TokenId>> {
    (0..n)
        .map(|_| {
            let len = rng.random_range(1..=max_len);
            (0..len).map(|_| rng.random_range(3..vocab as TokenId)).collect()
        })
        .collect()
}

const WORDS: &[&str] = &[
    "the", "model", "runs", "locally", "on", "your", "CPU", "translation", "privacy", "Dr.", "e.g.", "3.14",
    "naïve", "café", "Zürich", "東京", "😀", "quickly", "(see", "above)", "\"quoted\"", "U.S.", "it's", "no",
];

fn random_sentence(rng: &mut ChaCha8Rng) -> String {
    let n = rng.random_range(1..12);
    let mut s: Vec<&str> = (0..n).map(|_| *WORDS.choose(rng).unwrap()).collect();
    let mut out = s.remove(0).to_string();
    for w in s {
        out.push_str([" ", " ", " ", "  ", "\t"].choose(rng).unwrap());
        out.push_str(w);
    }
    out.push_str([".", "!", "?", "...", "", ".)", "?!"].choose(rng).unwrap());
    out
}

/// Paragraphs of sentences with irregular whitespace, blank lines, empty
/// documents and trailing whitespace.
fn random_document(rng: &mut ChaCha8Rng) -> String {
    if rng.random_bool(0.05) {
        return [String::new(), " ".into(), "\n\n".into(), "\t \n".into()].choose(rng).unwrap().clone();
    }
    let mut doc = String::new();
    if rng.random_bool(0.3) {
        doc.push_str(["  ", "\n", "\t", "\r\n"].choose(rng).unwrap());
    }
    for p in 0..rng.random_range(1..6) {
        if p > 0 {
            doc.push_str(["\n\n", "\n", "\n \n", "\r\n\r\n", "\n\n\n", "\n\t\n"].choose(rng).unwrap());
        }
        for s in 0..rng.random_range(1..6) {
            if s > 0 {
                doc.push_str([" ", "  ", "\n", " \t"].choose(rng).unwrap());
            }
            doc.push_str(&random_sentence(rng));
        }
    }
    if rng.random_bool(0.5) {
        doc.push_str([" ", "\n", "  \n", "\n\n", "\t"].choose(rng).unwrap());
    }
    doc
}

fn documents() -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 5);
    let mut docs: Vec<String> = (0..100).map(|_| random_document(&mut rng)).collect();
    docs[0] = String::new();
    docs
}

/// Random byte strings biased toward text so that multi-byte pieces match.
fn byte_strings() -> Vec<Vec<u8>> {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 6);
    (0..10_000)
        .map(|_| {
            let len = rng.random_range(0..64);
            (0..len)
                .map(|_| match rng.random_range(0..4) {
                    0 => rng.random(),
                    1 => *b" .!?\n\t".choose(&mut rng).unwrap(),
                    _ => rng.random_range(b'a'..=b'z'),
                })
                .collect()
        })
        .collect()
}

fn engine(threads: usize) -> EngineConfig {
    EngineConfig::detect(&desk_config()).with_overrides(Some(threads), None)
}

// ---------------------------------------------------------------------------
// Criteria

fn gemm_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let kernels = Kernel::available();
    let mut mismatches = 0;
    for _ in 0..1000 {
        let (m, k, n) = (rng.random_range(1..=64), rng.random_range(1..=64), rng.random_range(1..=64));
        let qa: Vec<i8> = (0..m * k).map(|_| rng.random_range(-127..=127)).collect();
        // Column-major, as packed weights are stored.
        let cols: Vec<i8> = (0..k * n).map(|_| rng.random_range(-127..=127)).collect();
        let b = PackedQ8::from_columns(k, n, cols.clone(), vec![1.0; n]);
        let mut oracle = vec![0i64; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    oracle[i * n + j] += qa[i * k + p] as i64 * cols[j * k + p] as i64;
                }
            }
        }
        for &kernel in &kernels {
            let acc = gemm_q8_accumulate_with(kernel, &qa, m, &b);
            if acc.iter().zip(&oracle).any(|(&a, &o)| a as i64 != o) {
                mismatches += 1;
            }
        }
    }
    let names: Vec<_> = kernels.iter().map(|k| k.name()).collect();
    Verdict::check(mismatches == 0, format!("1000 cases up to 64x64x64, kernels {names:?}, {mismatches} mismatches (tolerance 0)"))
}

fn quantization_bound() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 1);
    let mut violations = 0;
    let mut worst = 0f64;
    for case in 0..1000 {
        let (rows, cols) = (rng.random_range(1..=64), rng.random_range(1..=64));
        let magnitude = 10f32.powi(rng.random_range(-6..=6));
        let mut data: Vec<f32> = (0..rows * cols).map(|_| rng.random_range(-1.0f32..=1.0) * magnitude).collect();
        if case % 10 == 0 {
            // An all-zero column.
            for r in 0..rows {
                data[r * cols] = 0.0;
            }
        }
        let m = FloatMatrix::new(rows, cols, data).unwrap();
        let q = quantize(&m).unwrap();
        for r in 0..rows {
            for c in 0..cols {
                let s = q.scales()[c] as f64;
                // |x - q/s| <= 0.5/s, multiplied through by s > 0; exact in f64.
                let err = (m.get(r, c) as f64 * s - q.get(r, c) as f64).abs();
                worst = worst.max(err);
                if err > 0.5 {
                    violations += 1;
                }
            }
        }
    }
    Verdict::check(violations == 0, format!("1000 matrices, worst |x*s - q| = {worst:.6} (bound 0.5), {violations} violations"))
}

fn batched_equals_sequential() -> Verdict {
    let model = random_model(SEED);
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 2);
    let sources = random_sources(&mut rng, 200, 30, desk_config().vocab_size);
    let mut order: Vec<usize> = (0..sources.len()).collect();
    order.shuffle(&mut rng);
    let mut batched = vec![Vec::new(); sources.len()];
    let mut rest = &order[..];
    while !rest.is_empty() {
        let take = rng.random_range(1..=16).min(rest.len());
        let (chunk, tail) = rest.split_at(take);
        let batch: Vec<Vec<TokenId>> = chunk.iter().map(|&i| sources[i].clone()).collect();
        for (&i, out) in chunk.iter().zip(model.translate_batch(&batch, OutputVocab::Full).unwrap()) {
            batched[i] = out;
        }
        rest = tail;
    }
    let differing = sources
        .iter()
        .zip(&batched)
        .filter(|(s, b)| model.translate_batch(&[(*s).clone()], OutputVocab::Full).unwrap()[0] != **b)
        .count();
    Verdict::check(differing == 0, format!("200 inputs in random batches of 1-16, {differing} differ (tolerance 0)"))
}

fn shortlist_soundness() -> Verdict {
    let config = desk_config();
    let v = config.vocab_size;
    let model = random_model(SEED + 3);
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 3);
    let sources = random_sources(&mut rng, 100, 24, v);

    let mut counts = CountTable::new();
    for s in 0..v as TokenId {
        for t in 0..v as TokenId {
            counts.add(s, t, 1);
        }
    }
    let (full_coverage, _) = Shortlist::build(&counts, v, v, v).unwrap();
    let specials = [config.eos_id, config.unk_id];
    let cands: Vec<Vec<TokenId>> = sources.iter().map(|s| full_coverage.candidates(s, &specials)).collect();
    let covered = cands.iter().all(|c| c.len() == v);
    let shortlisted = model.translate_batch(&sources, OutputVocab::PerSentence(&cands)).unwrap();
    let full = model.translate_batch(&sources, OutputVocab::Full).unwrap();
    let differing = shortlisted.iter().zip(&full).filter(|(a, b)| a != b).count();

    // Logits under a partial shortlist against the matching full-vocab entries.
    let partial = demo_shortlist(v, SEED).unwrap();
    let mut worst_rel = 0f64;
    let mut compared = 0usize;
    for src in &sources {
        let cands = partial.candidates(src, &specials);
        let encoded = model.encode(std::slice::from_ref(src)).unwrap();
        let mut full_state = model.start_states(&encoded).remove(0);
        let mut short_state = full_state.clone();
        let mut prev = None;
        for _ in 0..8 {
            let full_logits = model.decode_step(&mut [&mut full_state], &[prev], OutputVocab::Full).unwrap().remove(0);
            let short_logits =
                model.decode_step(&mut [&mut short_state], &[prev], OutputVocab::Shared(&cands)).unwrap().remove(0);
            for (&t, &s) in cands.iter().zip(&short_logits) {
                let f = full_logits[t as usize];
                let rel = if f == s { 0.0 } else { ((s - f) as f64).abs() / (f.abs() as f64).max(f64::MIN_POSITIVE) };
                worst_rel = worst_rel.max(rel);
                compared += 1;
            }
            let next = (0..v).max_by(|&a, &b| full_logits[a].total_cmp(&full_logits[b])).unwrap() as TokenId;
            if next == config.eos_id {
                break;
            }
            prev = Some(next);
        }
    }
    Verdict::check(
        covered && differing == 0 && worst_rel <= 1e-5,
        format!(
            "100 inputs, full coverage {covered}, {differing} outputs differ (tolerance 0); \
             {compared} shortlisted logits, worst relative error {worst_rel:.2e} (tolerance 1e-5)"
        ),
    )
}

fn format_preservation() -> Verdict {
    let pipeline = Pipeline::new(engine(2)).unwrap();
    let copy = LoadedModel::copy();
    let docs = documents();
    let failures = docs
        .iter()
        .filter(|d| pipeline.translate_text(&copy, d, &CancelToken::new()).unwrap() != **d)
        .count();
    let empty = docs.iter().filter(|d| d.is_empty()).count();
    let blank = docs.iter().filter(|d| d.contains("\n\n")).count();
    let trailing = docs.iter().filter(|d| d.ends_with(char::is_whitespace)).count();
    Verdict::check(
        failures == 0,
        format!("100 documents ({empty} empty, {blank} with blank lines, {trailing} with trailing whitespace), {failures} altered"),
    )
}

fn tokenizer_reversibility() -> Verdict {
    let vocab = demo_vocabulary(2000).unwrap();
    let mut failures = 0;
    let mut multi = 0usize;
    for bytes in byte_strings() {
        let ids = vocab.tokenize_bytes(&bytes);
        multi += usize::from(ids.len() < bytes.len());
        if vocab.detokenize_bytes(&ids).ok().as_deref() != Some(&bytes[..]) {
            failures += 1;
        }
        let text = String::from_utf8_lossy(&bytes);
        if vocab.detokenize(&vocab.tokenize(&text)).ok().as_deref() != Some(&*text) {
            failures += 1;
        }
    }
    Verdict::check(
        failures == 0,
        format!("10000 byte strings over a 2000-piece vocabulary ({multi} used multi-byte pieces), {failures} failures"),
    )
}

fn segmentation_losslessness() -> Verdict {
    let abbreviations = Abbreviations::for_language("en");
    let mut inputs: Vec<String> = byte_strings().iter().map(|b| String::from_utf8_lossy(b).into_owned()).collect();
    inputs.extend(documents());
    let mut failures = 0;
    for text in &inputs {
        let a = split_sentences(text, &abbreviations);
        let ok = a.gaps.len() == a.sentences.len() + 1
            && a.source() == *text
            && reassemble(&a, &a.sentences).ok().as_deref() == Some(text.as_str());
        failures += usize::from(!ok);
    }
    Verdict::check(failures == 0, format!("{} inputs, {failures} failures", inputs.len()))
}

struct CopySource(Arc<LoadedModel>);

impl ModelSource for CopySource {
    fn load(&self, _model_id: &str) -> Result<Arc<LoadedModel>, PipelineError> {
        Ok(self.0.clone())
    }
}

fn supersession() -> Verdict {
    const SESSIONS: usize = 100;
    const GENERATIONS: u64 = 100;
    let scheduler = Scheduler::new(engine(2), Arc::new(CopySource(Arc::new(LoadedModel::copy())))).unwrap();
    let text = |s: usize, g: u64| format!("Session {s} draft {g}. More words follow here.");

    let (handles, log) = record(|| {
        let per_client = SESSIONS / 4;
        let clients: Vec<_> = (0..4)
            .map(|c| {
                let scheduler = scheduler.clone();
                std::thread::spawn(move || {
                    let mut handles = Vec::new();
                    for g in 1..=GENERATIONS {
                        for s in c * per_client..(c + 1) * per_client {
                            let request = TranslationRequest {
                                session_id: format!("s{s}"),
                                generation: g,
                                model_id: "copy".into(),
                                text: text(s, g),
                                options: RequestOptions::default(),
                            };
                            handles.push((s, g, scheduler.submit(request).unwrap()));
                        }
                    }
                    handles.into_iter().map(|(s, g, h)| (s, g, h.wait())).collect::<Vec<_>>()
                })
            })
            .collect();
        clients.into_iter().flat_map(|c| c.join().unwrap()).collect::<Vec<_>>()
    });

    let mut violations = 0;
    let mut delivered: HashMap<String, Vec<u64>> = HashMap::new();
    for e in log.iter().filter(|e| e.message() == "translation finished" && e.fields["delivered"] == "true") {
        let gens = delivered.entry(e.fields["session"].clone()).or_default();
        let g: u64 = e.fields["generation"].parse().unwrap();
        if gens.last().is_some_and(|&last| last >= g) {
            violations += 1;
        }
        gens.push(g);
    }
    let mut translated: HashMap<String, Vec<u64>> = HashMap::new();
    let mut final_ok = 0;
    for (s, g, outcome) in &handles {
        match outcome {
            Ok(Outcome::Translated(t)) => {
                translated.entry(format!("s{s}")).or_default().push(*g);
                if *g == GENERATIONS && *t == text(*s, *g) {
                    final_ok += 1;
                }
            }
            Ok(Outcome::Cancelled) => {}
            Err(_) => violations += 1,
        }
    }
    for gens in translated.values_mut() {
        gens.sort_unstable();
    }
    if translated != delivered {
        violations += 1;
    }
    let total: usize = delivered.values().map(Vec::len).sum();
    Verdict::check(
        violations == 0 && final_ok == SESSIONS && scheduler.in_flight() == 0,
        format!(
            "{SESSIONS} sessions x {GENERATIONS} generations, {total} delivered, \
             {final_ok}/{SESSIONS} final generations delivered, {violations} violations"
        ),
    )
}

fn privacy(dir: &Path) -> Verdict {
    let mut problems = Vec::new();

    // Static guard: the HTTP client is referenced from one module only, and
    // nothing in the library opens sockets directly.
    let src = Path::new(env!("CARGO_MANIFEST_DIR")).join("src");
    for file in rust_files(&src) {
        let code = fs::read_to_string(&file).unwrap();
        let name = file.strip_prefix(&src).unwrap().to_string_lossy().into_owned();
        if code.contains("ureq") && name != "registry/net.rs" {
            problems.push(format!("{name} references the HTTP client"));
        }
        if code.contains("TcpStream") || code.contains("UdpSocket") {
            problems.push(format!("{name} opens sockets"));
        }
    }

    let stub = StubServer::start();
    let archive = demo_package("priv", "1.0.0", desk_config(), 4).unwrap();
    stub.put("/priv.tgz", archive.clone());
    stub.put("/catalog.json", catalog_json(&[entry_json("priv", "1.0.0", "priv.tgz", &archive)]));
    let store = Arc::new(Store::open(dir.join("privacy")).unwrap());
    let archive_path = dir.join("priv-local.tgz");
    fs::write(&archive_path, demo_package("local", "1.0.0", desk_config(), 5).unwrap()).unwrap();

    let ((), log) = record(|| {
        // Everything except catalog fetch and download.
        let before = (network_requests(), stub.accepted());
        let installed = store.import_archive(&archive_path).unwrap();
        store.verify(&installed).unwrap();
        store.list_local().unwrap();
        let source = Arc::new(StoreModelSource::new(store.clone()));
        let pipeline = Pipeline::new(engine(2)).unwrap();
        for id in ["copy", "local"] {
            let model = source.load(id).unwrap();
            pipeline.translate_text(&model, SECRET, &CancelToken::new()).unwrap();
        }
        let scheduler = Scheduler::new(engine(2), source.clone()).unwrap();
        for (g, id) in [(1, "local"), (2, "copy"), (3, "missing")] {
            let _ = scheduler.translate(TranslationRequest {
                session_id: "p".into(),
                generation: g,
                model_id: id.into(),
                text: SECRET.into(),
                options: RequestOptions::default(),
            });
        }
        let bench_input = format!("{SECRET}\n{SECRET}\n");
        let options = BenchOptions { threads: 1, max_batch_tokens: 1024, pre_split: true };
        run_bench(|| source.load_uncached("local"), &bench_input, options).unwrap();
        store.delete("local").unwrap();
        if (network_requests(), stub.accepted()) != before {
            problems.push("an offline operation touched the network".into());
        }

        // The two network operations.
        let client = HttpClient::new();
        let entries = fetch_catalog(&client, &stub.url("/catalog.json")).unwrap();
        download_install(&client, &store, &entries[0]).unwrap();
        if stub.accepted() != before.1 + 2 || network_requests() != before.0 + 2 {
            problems.push(format!("expected 2 connections, saw {}", stub.accepted() - before.1));
        }
    });

    let requests = stub.requests();
    for r in &requests {
        let uas: Vec<_> = r.headers.iter().filter(|(k, _)| k == "user-agent").map(|(_, v)| v).collect();
        if uas != [&format!("localmt/{}", env!("CARGO_PKG_VERSION"))] || USER_AGENT != uas[0] {
            problems.push(format!("{} sent user-agent {uas:?}", r.path));
        }
        for (k, _) in &r.headers {
            if !["host", "user-agent", "accept", "accept-encoding", "connection"].contains(&k.as_str()) {
                problems.push(format!("{} sent header {k}", r.path));
            }
        }
    }

    let leaked: Vec<_> = SECRET
        .split_whitespace()
        .filter(|w| log.iter().any(|e| e.fields.values().any(|v| v.contains(w))))
        .collect();
    if !leaked.is_empty() {
        problems.push(format!("log contains {leaked:?}"));
    }
    let queued = log.iter().filter(|e| e.message() == "translation queued").count();
    if queued < 3 {
        problems.push("log capture saw no scheduler events".into());
    }
    Verdict::check(
        problems.is_empty(),
        format!(
            "{} requests with headers limited to user-agent {USER_AGENT:?} and transport headers, \
             {} log events captured at trace level{}",
            requests.len(),
            log.len(),
            if problems.is_empty() { String::new() } else { format!("; problems: {problems:?}") }
        ),
    )
}

fn rust_files(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            out.extend(rust_files(&path));
        } else if path.extension().is_some_and(|e| e == "rs") {
            out.push(path);
        }
    }
    out
}

/// Every directory under `models/` is a complete, verified package.
fn store_is_consistent(store: &Store) -> Result<usize, String> {
    let dirs = fs::read_dir(store.models_dir()).unwrap().count();
    let listed = store.list_local().map_err(|e| e.to_string())?;
    if listed.len() != dirs {
        return Err(format!("{dirs} directories but {} readable packages", listed.len()));
    }
    for m in &listed {
        store.verify(m).map_err(|e| format!("{}: {e}", m.dir.display()))?;
        StoreModelSource::load_dir(&m.dir).map_err(|e| format!("{}: {e}", m.dir.display()))?;
    }
    Ok(listed.len())
}

const CRASH_DIR: &str = "LOCALMT_ACCEPTANCE_CRASH_DIR";
const CRASH_AT: &str = "LOCALMT_ACCEPTANCE_CRASH_AT";
const CRASH_CATALOG: &str = "LOCALMT_ACCEPTANCE_CRASH_CATALOG";

/// Child side of the crash tests: aborts the process at the requested step.
#[test]
fn crash_child() {
    let (Ok(dir), Ok(at), Ok(catalog)) = (std::env::var(CRASH_DIR), std::env::var(CRASH_AT), std::env::var(CRASH_CATALOG))
    else {
        return;
    };
    let point = FaultPoint::ALL[at.parse::<usize>().unwrap()];
    let store = Store::open(dir).unwrap().with_fault_hook(move |p| {
        if p == point {
            std::process::abort();
        }
        false
    });
    if matches!(point, FaultPoint::BeforeDeleteRename | FaultPoint::AfterDeleteRename) {
        store.delete("atom").unwrap();
    } else {
        let client = HttpClient::new();
        let entries = fetch_catalog(&client, &catalog).unwrap();
        download_install(&client, &store, &entries[0]).unwrap();
    }
    unreachable!("the fault hook aborts first");
}

fn crash_in_child(data: &Path, point: usize, catalog: &str) -> bool {
    let status = std::process::Command::new(std::env::current_exe().unwrap())
        .args(["crash_child", "--exact", "--test-threads=1", "--nocapture"])
        .env(CRASH_DIR, data)
        .env(CRASH_AT, point.to_string())
        .env(CRASH_CATALOG, catalog)
        .stdout(std::process::Stdio::null())
        .stderr(std::process::Stdio::null())
        .status()
        .unwrap();
    !status.success()
}

fn install_atomicity(dir: &Path) -> Verdict {
    let data = dir.join("atomicity");
    let stub = StubServer::start();
    let archive = demo_package("atom", "1.0.0", desk_config(), 6).unwrap();
    stub.put("/atom.tgz", archive.clone());
    stub.put("/catalog.json", catalog_json(&[entry_json("atom", "1.0.0", "atom.tgz", &archive)]));
    let catalog = stub.url("/catalog.json");

    let inject = Arc::new(AtomicUsize::new(usize::MAX));
    let hook = inject.clone();
    let store =
        Store::open(&data).unwrap().with_fault_hook(move |p| FaultPoint::ALL.get(hook.load(Ordering::SeqCst)) == Some(&p));
    let client = HttpClient::new();
    let entry = fetch_catalog(&client, &catalog).unwrap().remove(0);
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 7);

    let set_installed = |want: bool| {
        inject.store(usize::MAX, Ordering::SeqCst);
        let present = store.resolve("atom").is_ok();
        if want && !present {
            download_install(&client, &store, &entry).unwrap();
        } else if !want && present {
            store.delete("atom").unwrap();
        }
    };

    let mut failures_injected = 0;
    let (mut injected, mut flips, mut crashes) = (0, 0, 0);
    let mut problems = Vec::new();
    for i in 0..100 {
        let kind = i % 8;
        let outcome: Result<(), RegistryError>;
        if kind < 6 {
            let point = FaultPoint::ALL[kind];
            let deleting = matches!(point, FaultPoint::BeforeDeleteRename | FaultPoint::AfterDeleteRename);
            set_installed(deleting);
            inject.store(kind, Ordering::SeqCst);
            outcome = if deleting { store.delete("atom").map(drop) } else { download_install(&client, &store, &entry).map(drop) };
            inject.store(usize::MAX, Ordering::SeqCst);
            injected += 1;
            if !matches!(outcome, Err(RegistryError::Injected(p)) if p == point) {
                problems.push(format!("run {i}: {point:?} not injected: {outcome:?}"));
            }
        } else if kind == 6 {
            set_installed(false);
            let mut flipped = archive.clone();
            let at = rng.random_range(0..flipped.len());
            flipped[at] ^= 1 << rng.random_range(0..8);
            let path = format!("/flip-{i}.tgz");
            stub.put(&path, flipped);
            let flipped_entry = localmt::registry::CatalogEntry { url: stub.url(&path), ..entry.clone() };
            outcome = download_install(&client, &store, &flipped_entry).map(drop);
            flips += 1;
            if !matches!(outcome, Err(RegistryError::ChecksumMismatch { .. })) {
                problems.push(format!("run {i}: bit flip at byte {at} not detected: {outcome:?}"));
            }
        } else {
            let point = (i / 8) % 6;
            set_installed(point >= 4);
            if !crash_in_child(&data, point, &catalog) {
                problems.push(format!("run {i}: child survived {:?}", FaultPoint::ALL[point]));
            }
            crashes += 1;
            // The next process to open the store reclaims the dead one's staging.
            Store::open(&data).unwrap().sweep_staging(std::time::Duration::ZERO).unwrap();
        }
        failures_injected += 1;
        match store_is_consistent(&store) {
            Ok(_) => {}
            Err(e) => problems.push(format!("run {i}: {e}")),
        }
        if store.staging_entries().unwrap() != 0 {
            problems.push(format!("run {i}: staging not cleaned up"));
        }
    }
    Verdict::check(
        problems.is_empty(),
        format!(
            "{failures_injected} injected failures ({injected} step errors, {flips} bit flips, {crashes} process aborts), \
             partial packages found: {}{}",
            problems.iter().filter(|p| !p.contains("not injected") && !p.contains("not detected")).count(),
            if problems.is_empty() { String::new() } else { format!("; problems: {problems:?}") }
        ),
    )
}

fn bench_corpus() -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 8);
    (0..1200).map(|_| random_sentence(&mut rng) + "\n").collect()
}

fn throughput(dir: &Path) -> Verdict {
    let store = Arc::new(Store::open(dir.join("bench")).unwrap());
    let archive = dir.join("bench.tgz");
    fs::write(&archive, demo_package("bench", "1.0.0", desk_config(), 8).unwrap()).unwrap();
    store.import_archive(&archive).unwrap();
    let source = StoreModelSource::new(store);
    let corpus = bench_corpus();
    let wps = |threads: usize| {
        let options = BenchOptions { threads, max_batch_tokens: 1024, pre_split: true };
        run_bench(|| source.load_uncached("bench"), &corpus, options).unwrap().report.wps
    };
    // One discarded run first, so process start-up costs do not land in run one.
    wps(1);
    let single: Vec<f64> = (0..3).map(|_| wps(1)).collect();
    let mean = single.iter().sum::<f64>() / 3.0;
    let deviation = single.iter().map(|w| (w - mean).abs() / mean).fold(0.0, f64::max);
    let variance_ok = deviation <= 0.15;
    let cores = physical_cores();
    let runs = format!(
        "threads=1 WPS {:.0}/{:.0}/{:.0}, max deviation from mean {:.1}% (tolerance 15%)",
        single[0],
        single[1],
        single[2],
        deviation * 100.0
    );
    if cores < 4 {
        let v = Verdict::check(variance_ok, format!("{runs}; scaling check needs >= 4 cores, machine has {cores}"));
        return if variance_ok { Verdict::skip(v.detail) } else { v };
    }
    let n = cores.min(8);
    let multi = wps(n);
    let ratio = multi / mean;
    Verdict::check(variance_ok && ratio >= 2.0, format!("{runs}; threads={n} WPS {multi:.0}, {ratio:.2}x (tolerance >= 2x)"))
}

/// Packages of the small production size come out near the 15 MB quoted for
/// real tiny models.
fn tiny_package_size() -> Verdict {
    let bytes = demo_package("tiny", "1.0.0", tiny_config(), 1).unwrap().len() as f64 / 1e6;
    Verdict::check((bytes - 15.0).abs() <= 0.2 * 15.0, format!("{bytes:.1} MB (expected 15 MB +- 20%)"))
}

#[test]
fn acceptance() {
    if std::env::var_os(CRASH_DIR).is_some() {
        return;
    }
    tracing::subscriber::set_global_default(tracing_subscriber::registry().with(Recorder)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    type Criterion<'a> = (&'a str, Box<dyn Fn() -> Verdict + 'a>);
    let criteria: Vec<Criterion> = vec![
        ("integer GEMM oracle equivalence", Box::new(gemm_oracle)),
        ("quantization bound", Box::new(quantization_bound)),
        ("batched equals sequential", Box::new(batched_equals_sequential)),
        ("shortlist soundness", Box::new(shortlist_soundness)),
        ("format preservation", Box::new(format_preservation)),
        ("tokenizer reversibility", Box::new(tokenizer_reversibility)),
        ("segmentation losslessness", Box::new(segmentation_losslessness)),
        ("supersession ordering", Box::new(supersession)),
        ("privacy contract", Box::new(|| privacy(dir.path()))),
        ("install atomicity", Box::new(|| install_atomicity(dir.path()))),
        ("throughput sanity", Box::new(|| throughput(dir.path()))),
        ("tiny package size", Box::new(tiny_package_size)),
    ];
    let mut failed = Vec::new();
    for (name, run) in &criteria {
        let start = Instant::now();
        let verdict = catch_unwind(AssertUnwindSafe(run))
            .unwrap_or_else(|e| Verdict::check(false, format!("panicked: {:?}", e.downcast_ref::<String>())));
        let label = match verdict.status {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::Skip => "SKIP",
        };
        // Straight to stdout so the verdicts show without `--nocapture`.
        let line = format!("{label} {name}: {} [{:.1}s]\n", verdict.detail, start.elapsed().as_secs_f64());
        std::io::stdout().write_all(line.as_bytes()).unwrap();
        if verdict.status == Status::Fail {
            failed.push(*name);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
