//! Python bindings: int8 matrices, the tokenizer and sentence splitter,
//! shortlists, the model store, and a translation engine.

use std::path::PathBuf;
use std::sync::Arc;

use pyo3::exceptions::{PyKeyError, PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

use engine::bench::{run_bench, BenchOptions};
use engine::model::{Model as CoreModel, ModelConfig, OutputVocab, TokenId};
use engine::pipeline::{CancelToken, EngineConfig, LoadedModel, ModelSource, Pipeline, PipelineError};
use engine::registry::demo::{demo_package, desk_config};
use engine::registry::{default_data_dir, RegistryError, Store as CoreStore, StoreModelSource};
use engine::shortlist::{CountTable, Shortlist as CoreShortlist};
use engine::tensor::{self, FloatMatrix};
use engine::textops::{self, Abbreviations, AnnotatedText};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn registry_err(e: RegistryError) -> PyErr {
    match e {
        RegistryError::NotFound(id) => PyKeyError::new_err(id),
        RegistryError::Io(e) => PyOSError::new_err(e.to_string()),
        RegistryError::Network(m) => PyOSError::new_err(m),
        e => value_err(e),
    }
}

fn pipeline_err(e: PipelineError) -> PyErr {
    match e {
        PipelineError::ModelNotFound(id) => PyKeyError::new_err(id),
        e => value_err(e),
    }
}

fn matrix(rows: Vec<Vec<f32>>) -> PyResult<FloatMatrix> {
    FloatMatrix::from_rows(&rows).map_err(value_err)
}

fn to_rows(m: &FloatMatrix) -> Vec<Vec<f32>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

/// A matrix quantized to int8 with one scale per column.
#[pyclass(frozen, module = "localmt")]
struct QuantizedMatrix(tensor::QuantizedMatrix);

#[pymethods]
impl QuantizedMatrix {
    #[new]
    fn new(rows: Vec<Vec<f32>>) -> PyResult<Self> {
        Ok(Self(tensor::quantize(&matrix(rows)?).map_err(value_err)?))
    }

    #[getter]
    fn shape(&self) -> (usize, usize) {
        (self.0.rows(), self.0.cols())
    }

    #[getter]
    fn scales(&self) -> Vec<f32> {
        self.0.scales().to_vec()
    }

    /// Quantized values as a list of rows.
    fn values(&self) -> Vec<Vec<i8>> {
        self.0.data().chunks(self.0.cols().max(1)).map(<[i8]>::to_vec).collect()
    }

    fn dequantize(&self) -> Vec<Vec<f32>> {
        to_rows(&tensor::dequantize(&self.0))
    }

    /// `a @ self + bias` in 8-bit arithmetic.
    #[pyo3(signature = (a, bias=None))]
    fn matmul(&self, a: Vec<Vec<f32>>, bias: Option<Vec<f32>>) -> PyResult<Vec<Vec<f32>>> {
        let out = tensor::gemm_q8(&matrix(a)?, &self.0, bias.as_deref()).map_err(value_err)?;
        Ok(to_rows(&out))
    }

    fn __repr__(&self) -> String {
        format!("QuantizedMatrix({}x{})", self.0.rows(), self.0.cols())
    }
}

/// Subword vocabulary with byte fallback; tokenization is lossless.
#[pyclass(frozen, module = "localmt")]
struct Vocabulary(textops::Vocabulary);

#[pymethods]
impl Vocabulary {
    /// Specials and the 256 byte pieces, plus optional multi-byte pieces.
    #[new]
    #[pyo3(signature = (pieces=Vec::new()))]
    fn new(pieces: Vec<String>) -> PyResult<Self> {
        Ok(Self(textops::Vocabulary::with_pieces(pieces).map_err(value_err)?))
    }

    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        Ok(Self(textops::Vocabulary::parse(text).map_err(value_err)?))
    }

    fn tokenize(&self, text: &str) -> Vec<TokenId> {
        self.0.tokenize(text)
    }

    fn tokenize_bytes(&self, data: &[u8]) -> Vec<TokenId> {
        self.0.tokenize_bytes(data)
    }

    fn detokenize(&self, ids: Vec<TokenId>) -> PyResult<String> {
        self.0.detokenize(&ids).map_err(value_err)
    }

    fn detokenize_bytes<'py>(&self, py: Python<'py>, ids: Vec<TokenId>) -> PyResult<Bound<'py, PyBytes>> {
        let bytes = self.0.detokenize_bytes(&ids).map_err(value_err)?;
        Ok(PyBytes::new(py, &bytes))
    }

    fn piece(&self, id: TokenId) -> Option<String> {
        self.0.piece(id).map(str::to_string)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }
}

/// Splits text into `(gaps, sentences)` with `len(gaps) == len(sentences) + 1`.
#[pyfunction]
#[pyo3(signature = (text, lang="en"))]
fn split_sentences(text: &str, lang: &str) -> (Vec<String>, Vec<String>) {
    let a = textops::split_sentences(text, &Abbreviations::for_language(lang));
    (a.gaps, a.sentences)
}

/// Interleaves gaps and (translated) sentences back into one string.
#[pyfunction]
fn reassemble(gaps: Vec<String>, sentences: Vec<String>) -> PyResult<String> {
    let expected = gaps.len().saturating_sub(1);
    if sentences.len() != expected {
        return Err(PyValueError::new_err(format!("expected {expected} sentences, got {}", sentences.len())));
    }
    let annotated = AnnotatedText { gaps, sentences: vec![String::new(); expected] };
    textops::reassemble(&annotated, &sentences).map_err(value_err)
}

/// Per-source candidate target lists.
#[pyclass(frozen, module = "localmt")]
struct Shortlist(CoreShortlist);

#[pymethods]
impl Shortlist {
    /// Builds from `(source, target, count)` triples.
    #[staticmethod]
    fn build(counts: Vec<(TokenId, TokenId, u64)>, f: usize, k: usize, vocab_size: usize) -> PyResult<Self> {
        let mut table = CountTable::new();
        for (s, t, c) in counts {
            table.add(s, t, c);
        }
        let (shortlist, _warnings) = CoreShortlist::build(&table, f, k, vocab_size).map_err(value_err)?;
        Ok(Self(shortlist))
    }

    #[staticmethod]
    fn deserialize(data: &[u8]) -> PyResult<Self> {
        Ok(Self(CoreShortlist::deserialize(data).map_err(value_err)?))
    }

    fn serialize<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.0.serialize())
    }

    /// Sorted candidate ids for a source sentence, plus `specials`.
    #[pyo3(signature = (source, specials=Vec::new()))]
    fn candidates(&self, source: Vec<TokenId>, specials: Vec<TokenId>) -> Vec<TokenId> {
        self.0.candidates(&source, &specials)
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.0.vocab_size()
    }
}

/// A student model with random weights, for experiments at token level.
#[pyclass(frozen, module = "localmt")]
struct Model(CoreModel);

#[pymethods]
impl Model {
    #[staticmethod]
    #[pyo3(signature = (seed=0, vocab_size=None))]
    fn random(seed: u64, vocab_size: Option<usize>) -> PyResult<Self> {
        let config = ModelConfig { vocab_size: vocab_size.unwrap_or(256), ..ModelConfig::desk() };
        Ok(Self(CoreModel::random(config, seed).map_err(value_err)?))
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.0.config().vocab_size
    }

    /// Greedy decoding; `candidates` restricts the output vocabulary.
    #[pyo3(signature = (sentences, candidates=None))]
    fn translate_batch(
        &self,
        py: Python<'_>,
        sentences: Vec<Vec<TokenId>>,
        candidates: Option<Vec<TokenId>>,
    ) -> PyResult<Vec<Vec<TokenId>>> {
        py.detach(|| {
            let vocab = match &candidates {
                Some(c) => OutputVocab::Shared(c),
                None => OutputVocab::Full,
            };
            self.0.translate_batch(&sentences, vocab)
        })
        .map_err(value_err)
    }
}

/// The on-disk model store.
#[pyclass(frozen, module = "localmt")]
struct Store(Arc<CoreStore>);

#[pymethods]
impl Store {
    /// Opens `data_dir`, or the default data directory.
    #[new]
    #[pyo3(signature = (data_dir=None))]
    fn new(data_dir: Option<PathBuf>) -> PyResult<Self> {
        let dir = data_dir.unwrap_or_else(default_data_dir);
        Ok(Self(Arc::new(CoreStore::open(dir).map_err(registry_err)?)))
    }

    /// Installed models as `(id, version, name)` tuples, newest version first.
    fn list(&self) -> PyResult<Vec<(String, String, String)>> {
        let models = self.0.list_local().map_err(registry_err)?;
        Ok(models.into_iter().map(|m| (m.manifest.id, m.manifest.version, m.manifest.name)).collect())
    }

    /// Installs a package file and returns its id.
    fn import_archive(&self, py: Python<'_>, path: PathBuf) -> PyResult<String> {
        let installed = py.detach(|| self.0.import_archive(&path)).map_err(registry_err)?;
        Ok(installed.manifest.id)
    }

    fn delete(&self, id: &str) -> PyResult<usize> {
        Ok(self.0.delete(id).map_err(registry_err)?.len())
    }

    fn verify(&self, id: &str) -> PyResult<()> {
        let m = self.0.resolve(id).map_err(registry_err)?;
        self.0.verify(&m).map_err(registry_err)
    }
}

/// Writes a demo package with random weights to `path`.
#[pyfunction]
#[pyo3(signature = (id, path, version="1.0.0", seed=0))]
fn make_demo_package(id: &str, path: PathBuf, version: &str, seed: u64) -> PyResult<()> {
    let bytes = demo_package(id, version, desk_config(), seed).map_err(registry_err)?;
    std::fs::write(path, bytes).map_err(|e| PyOSError::new_err(e.to_string()))
}

/// Translates text with an installed model or the built-in `copy` model.
#[pyclass(frozen, module = "localmt")]
struct Translator {
    model: Arc<LoadedModel>,
    pipeline: Pipeline,
    source: StoreModelSource,
    model_id: String,
}

#[pymethods]
impl Translator {
    #[new]
    #[pyo3(signature = (model="copy", data_dir=None, threads=None))]
    fn new(model: &str, data_dir: Option<PathBuf>, threads: Option<usize>) -> PyResult<Self> {
        let store = CoreStore::open(data_dir.unwrap_or_else(default_data_dir)).map_err(registry_err)?;
        let source = StoreModelSource::new(Arc::new(store));
        let loaded = source.load(model).map_err(pipeline_err)?;
        let config = EngineConfig::detect(&desk_config()).with_overrides(threads, None);
        let pipeline = Pipeline::new(config).map_err(pipeline_err)?;
        Ok(Self { model: loaded, pipeline, source, model_id: model.to_string() })
    }

    #[getter]
    fn threads(&self) -> usize {
        self.pipeline.config().threads
    }

    fn translate(&self, py: Python<'_>, text: &str) -> PyResult<String> {
        py.detach(|| self.pipeline.translate_text(&self.model, text, &CancelToken::new())).map_err(pipeline_err)
    }

    /// Translates already-split sentences.
    fn translate_sentences(&self, py: Python<'_>, sentences: Vec<String>) -> PyResult<Vec<String>> {
        py.detach(|| self.pipeline.translate_sentences(&self.model, &sentences, &CancelToken::new()))
            .map_err(pipeline_err)
    }

    /// Runs the words-per-second benchmark on `text` and returns the report
    /// as a dict-compatible JSON string.
    #[pyo3(signature = (text, pre_split=false))]
    fn bench(&self, py: Python<'_>, text: &str, pre_split: bool) -> PyResult<String> {
        let config = self.pipeline.config();
        let options = BenchOptions { threads: config.threads, max_batch_tokens: config.max_batch_tokens, pre_split };
        let run = py
            .detach(|| run_bench(|| self.source.load_uncached(&self.model_id), text, options))
            .map_err(value_err)?;
        Ok(run.report.to_json_line())
    }
}

#[pymodule(name = "localmt")]
fn localmt_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<QuantizedMatrix>()?;
    m.add_class::<Vocabulary>()?;
    m.add_class::<Shortlist>()?;
    m.add_class::<Model>()?;
    m.add_class::<Store>()?;
    m.add_class::<Translator>()?;
    m.add_function(wrap_pyfunction!(split_sentences, m)?)?;
    m.add_function(wrap_pyfunction!(reassemble, m)?)?;
    m.add_function(wrap_pyfunction!(make_demo_package, m)?)?;
    Ok(())
}
