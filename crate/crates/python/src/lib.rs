use std::time::Duration;

use hierdraft::{
    engine::{DecodeOutput, DecodeTrace},
    AccessOrder, Corpus, DbSet, DecodeConfig, HierarchyConfig, SharedDbs, TargetModel, TokenId,
};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: hierdraft::Error) -> PyErr {
    match e {
        hierdraft::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Word-level vocabulary; ids 0, 1, 2 are `<unk>`, EOS and the separator.
#[pyclass(name = "Vocab", skip_from_py_object)]
#[derive(Clone)]
struct PyVocab {
    inner: hierdraft::Vocab,
}

#[pymethods]
impl PyVocab {
    #[staticmethod]
    fn build(texts: Vec<String>) -> PyResult<Self> {
        Ok(PyVocab {
            inner: hierdraft::Vocab::build(&texts).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyVocab {
            inner: hierdraft::Vocab::load(path).map_err(to_py)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(to_py)
    }

    fn __len__(&self) -> usize {
        self.inner.size()
    }

    fn id(&self, word: &str) -> Option<TokenId> {
        self.inner.id(word)
    }

    fn word(&self, id: TokenId) -> Option<String> {
        self.inner.word(id).map(str::to_owned)
    }

    fn tokenize(&self, text: &str) -> Vec<TokenId> {
        self.inner.tokenize(text)
    }

    fn detokenize(&self, tokens: Vec<TokenId>) -> PyResult<String> {
        self.inner.detokenize(&tokens).map_err(to_py)
    }
}

fn corpus(texts: &[String], vocab: &PyVocab) -> Corpus {
    Corpus::from_texts(texts, vocab.inner.clone())
}

/// Smoothed k-gram target model with stupid backoff.
#[pyclass(name = "KGramModel")]
struct PyKGramModel {
    inner: hierdraft::KGramModel,
}

#[pymethods]
impl PyKGramModel {
    /// Fits on `texts`, one document each.
    #[staticmethod]
    #[pyo3(signature = (texts, vocab, k = 3, alpha = 0.01))]
    fn fit(texts: Vec<String>, vocab: &PyVocab, k: usize, alpha: f64) -> PyResult<Self> {
        Ok(PyKGramModel {
            inner: hierdraft::KGramModel::fit(&corpus(&texts, vocab), k, alpha).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyKGramModel {
            inner: hierdraft::KGramModel::load(path).map_err(to_py)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(to_py)
    }

    /// Sets the busy-wait added to every model call.
    fn set_call_cost_ms(&mut self, ms: f64) -> PyResult<()> {
        if !(ms >= 0.0) {
            return Err(PyValueError::new_err("call cost must be >= 0"));
        }
        self.inner.set_call_cost(Duration::from_secs_f64(ms / 1000.0));
        Ok(())
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.vocab_size()
    }

    #[getter]
    fn order(&self) -> usize {
        self.inner.order()
    }

    fn next_distribution(&self, context: Vec<TokenId>) -> Vec<f64> {
        self.inner.next_distribution(&context).probs
    }

    fn greedy_next(&self, context: Vec<TokenId>) -> TokenId {
        self.inner.greedy_next(&context)
    }
}

/// Session-local recency database.
#[pyclass(name = "ContextDb")]
struct PyContextDb {
    inner: hierdraft::ContextDb,
}

#[pymethods]
impl PyContextDb {
    #[new]
    #[pyo3(signature = (max_values_per_key = 7, value_len = 4, capacity = 4096))]
    fn new(max_values_per_key: usize, value_len: usize, capacity: usize) -> PyResult<Self> {
        if max_values_per_key == 0 || value_len == 0 || capacity == 0 {
            return Err(PyValueError::new_err("all sizes must be >= 1"));
        }
        Ok(PyContextDb {
            inner: hierdraft::ContextDb::new(max_values_per_key, value_len, capacity),
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// Returns the evicted (key, value) pair, if any.
    fn insert(&mut self, key: TokenId, value: Vec<TokenId>) -> Option<(TokenId, Vec<TokenId>)> {
        self.inner.insert(key, &value)
    }

    fn ingest(&mut self, tokens: Vec<TokenId>) -> Vec<(TokenId, Vec<TokenId>)> {
        self.inner.ingest(&tokens)
    }

    fn lookup(&mut self, key: TokenId, want: usize) -> Vec<Vec<TokenId>> {
        self.inner.lookup(key, want)
    }

    fn reset(&mut self) {
        self.inner.reset()
    }
}

/// Frequent (1+m)-grams of model generations.
#[pyclass(name = "ModelDb")]
struct PyModelDb {
    inner: hierdraft::ModelDb,
}

#[pymethods]
impl PyModelDb {
    #[staticmethod]
    #[pyo3(signature = (generations, vocab, top_k = 100_000, m = 4, max_values_per_key = 7))]
    fn build(generations: Vec<String>, vocab: &PyVocab, top_k: usize, m: usize, max_values_per_key: usize) -> PyResult<Self> {
        Ok(PyModelDb {
            inner: hierdraft::ModelDb::build(&corpus(&generations, vocab), top_k, m, max_values_per_key).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyModelDb {
            inner: hierdraft::ModelDb::load(path).map_err(to_py)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(to_py)
    }

    #[getter]
    fn key_count(&self) -> usize {
        self.inner.key_count()
    }

    #[getter]
    fn sequence_count(&self) -> usize {
        self.inner.sequence_count()
    }

    fn lookup(&self, key: TokenId, want: usize) -> Vec<Vec<TokenId>> {
        self.inner.lookup(key, want)
    }
}

/// Suffix-array index over a token corpus.
#[pyclass(name = "StatsDb")]
struct PyStatsDb {
    inner: hierdraft::StatsDb,
}

#[pymethods]
impl PyStatsDb {
    #[staticmethod]
    fn build(texts: Vec<String>, vocab: &PyVocab) -> PyResult<Self> {
        Ok(PyStatsDb {
            inner: hierdraft::StatsDb::build(&corpus(&texts, vocab)).map_err(to_py)?,
        })
    }

    #[staticmethod]
    #[pyo3(signature = (path, verify = false))]
    fn load(path: &str, verify: bool) -> PyResult<Self> {
        let inner = if verify {
            hierdraft::StatsDb::load_verified(path)
        } else {
            hierdraft::StatsDb::load(path)
        };
        Ok(PyStatsDb {
            inner: inner.map_err(to_py)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(to_py)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn count(&self, query: Vec<TokenId>) -> usize {
        self.inner.count(&query)
    }

    fn find_range(&self, query: Vec<TokenId>) -> (usize, usize) {
        let r = self.inner.find_range(&query);
        (r.start, r.end)
    }

    /// Ranked (continuation, count) pairs for the longest matching suffix of
    /// `tail`.
    fn retrieve(&self, tail: Vec<TokenId>, m: usize, want: usize) -> Vec<(Vec<TokenId>, u32)> {
        self.inner.retrieve(&tail, m, want)
    }
}

/// Output of one decode.
#[pyclass(name = "DecodeResult")]
struct PyDecodeResult {
    #[pyo3(get)]
    tokens: Vec<TokenId>,
    #[pyo3(get)]
    steps: u64,
    #[pyo3(get)]
    tau: f64,
    #[pyo3(get)]
    alpha: Option<f64>,
    #[pyo3(get)]
    alpha_all: Option<f64>,
    #[pyo3(get)]
    accepted_tokens: u64,
    #[pyo3(get)]
    wall_time_ns: u64,
    metrics: hierdraft::DecodeMetrics,
    trace: Option<DecodeTrace>,
}

#[pymethods]
impl PyDecodeResult {
    /// All metrics as a JSON object string.
    fn metrics_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.metrics).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    /// The per-step trace as JSON lines, when tracing was requested.
    fn trace_jsonl(&self) -> PyResult<Option<String>> {
        self.trace.as_ref().map(|t| t.to_jsonl()).transpose().map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!("DecodeResult(tokens={}, steps={}, tau={:.3})", self.tokens.len(), self.steps, self.tau)
    }
}

impl From<DecodeOutput> for PyDecodeResult {
    fn from(o: DecodeOutput) -> Self {
        let m = &o.metrics;
        PyDecodeResult {
            steps: m.steps,
            tau: m.tau,
            alpha: m.alpha,
            alpha_all: m.alpha_all,
            accepted_tokens: m.accepted_tokens,
            wall_time_ns: m.wall_time_ns,
            tokens: o.tokens,
            metrics: o.metrics,
            trace: o.trace,
        }
    }
}

/// Speculative decoding with hierarchical drafting. Databases left as
/// `None` must also be left out of `databases`.
#[pyfunction]
#[pyo3(signature = (
    model, prompt, model_db = None, stats_db = None, order = "cms", databases = "c,m,s",
    temperature = 0.0, max_tokens = 1024, seed = 7, max_candidates = 7, prefix_len = 2,
    draft_len = 4, recycle = true, trace = false
))]
#[allow(clippy::too_many_arguments)]
fn decode(
    py: Python<'_>,
    model: &PyKGramModel,
    prompt: Vec<TokenId>,
    model_db: Option<&PyModelDb>,
    stats_db: Option<&PyStatsDb>,
    order: &str,
    databases: &str,
    temperature: f64,
    max_tokens: usize,
    seed: u64,
    max_candidates: usize,
    prefix_len: usize,
    draft_len: usize,
    recycle: bool,
    trace: bool,
) -> PyResult<PyDecodeResult> {
    let config = DecodeConfig {
        max_tokens,
        temperature,
        seed,
        hierarchy: HierarchyConfig {
            order: order.parse::<AccessOrder>().map_err(to_py)?,
            enabled: databases.parse::<DbSet>().map_err(to_py)?,
            max_candidates,
            prefix_len,
            draft_len,
        },
        recycle,
        trace,
        ..Default::default()
    };
    let shared = SharedDbs {
        model: model_db.map(|d| &d.inner),
        stats: stats_db.map(|d| &d.inner),
    };
    let inner = &model.inner;
    let out = py.detach(|| hierdraft::decode(inner, &prompt, shared, &config));
    Ok(out.map_err(to_py)?.into())
}

/// One model call per token.
#[pyfunction]
#[pyo3(signature = (model, prompt, temperature = 0.0, max_tokens = 1024, seed = 7, trace = false))]
fn autoregressive_decode(
    py: Python<'_>,
    model: &PyKGramModel,
    prompt: Vec<TokenId>,
    temperature: f64,
    max_tokens: usize,
    seed: u64,
    trace: bool,
) -> PyResult<PyDecodeResult> {
    let config = DecodeConfig {
        max_tokens,
        temperature,
        seed,
        trace,
        ..Default::default()
    };
    let inner = &model.inner;
    let out = py.detach(|| hierdraft::autoregressive_decode(inner, &prompt, &config));
    Ok(out.map_err(to_py)?.into())
}

#[pymodule]
fn hierdraft_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyVocab>()?;
    m.add_class::<PyKGramModel>()?;
    m.add_class::<PyContextDb>()?;
    m.add_class::<PyModelDb>()?;
    m.add_class::<PyStatsDb>()?;
    m.add_class::<PyDecodeResult>()?;
    m.add_function(wrap_pyfunction!(decode, m)?)?;
    m.add_function(wrap_pyfunction!(autoregressive_decode, m)?)?;
    m.add("EOS", hierdraft::EOS)?;
    m.add("SEP", hierdraft::SEP)?;
    m.add("UNK", hierdraft::UNK)?;
    Ok(())
}
