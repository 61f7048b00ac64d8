//! Python bindings: the text pipeline, fact retrieval, schedule, span
//! decoding, and trained-model prediction, exposed as `readvqa_py`.

use std::path::{Path, PathBuf};

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use readvqa::cli::{cmd_train, load_model_dir, RunConfig};
use readvqa::model::{self, Model, TaskMode};
use readvqa::retrieval;
use readvqa::text::{self, TokenizedText};
use readvqa::train::Schedule;

fn err(e: readvqa::Error) -> PyErr {
    PyValueError::new_err(format!("[{}] {e}", e.category()))
}

/// Lowercased tokens with punctuation split off.
#[pyfunction]
fn tokenize(text: &str) -> Vec<String> {
    text::tokenize(text)
}

/// Answer normalization used by string-match evaluation.
#[pyfunction]
fn normalize_answer(s: &str) -> String {
    text::normalize_answer(s)
}

/// Join description sentences then fact sentences, truncated to `limit` tokens.
#[pyfunction]
fn assemble_context(descriptions: Vec<String>, facts: Vec<String>, limit: usize) -> PyResult<String> {
    text::assemble_context(&descriptions, &facts, limit).map_err(err)
}

/// Learning rate at `epoch` for the decaying schedule with a floor.
#[pyfunction]
fn lr_at(epoch: usize, base_lr: f64, decay: f64, interval: usize, floor: f64) -> PyResult<f64> {
    let schedule = Schedule::Decay {
        base_lr,
        decay,
        interval,
        floor,
    };
    schedule.validate().map_err(err)?;
    Ok(schedule.lr_at(epoch))
}

/// Best (start, end, score) span under the max-span constraint.
#[pyfunction]
#[pyo3(signature = (p_start, p_end, max_span = 30))]
fn decode_span(p_start: Vec<f64>, p_end: Vec<f64>, max_span: usize) -> PyResult<(usize, usize, f64)> {
    if p_start.len() != p_end.len() || p_start.is_empty() {
        return Err(PyValueError::new_err(
            "p_start and p_end must be equal-length and non-empty",
        ));
    }
    let span = model::decode_span(&p_start, &p_end, max_span);
    Ok((span.start, span.end, span.score))
}

/// Word and character symbol tables.
#[pyclass(name = "Vocabulary")]
struct PyVocabulary {
    inner: text::Vocabulary,
}

#[pymethods]
impl PyVocabulary {
    /// Build from a text corpus.
    #[staticmethod]
    #[pyo3(signature = (texts, min_freq = 1, max_words = 50_000))]
    fn build(texts: Vec<String>, min_freq: usize, max_words: usize) -> PyResult<Self> {
        let inner =
            text::Vocabulary::build(texts.iter().map(String::as_str), min_freq, max_words)
                .map_err(err)?;
        Ok(PyVocabulary { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyVocabulary {
            inner: text::Vocabulary::load(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    fn word_id(&self, word: &str) -> usize {
        self.inner.word_id(word)
    }

    fn words(&self) -> Vec<String> {
        self.inner.words().to_vec()
    }

    fn __len__(&self) -> usize {
        self.inner.word_count()
    }
}

/// One knowledge triple with its sentence rendering.
#[pyclass(name = "Fact", from_py_object)]
#[derive(Clone)]
struct PyFact {
    inner: retrieval::Fact,
}

#[pymethods]
impl PyFact {
    #[new]
    fn new(subject: String, relation: String, object: String, sentence: String) -> Self {
        PyFact {
            inner: retrieval::Fact {
                subject,
                relation,
                object,
                sentence,
            },
        }
    }

    #[getter]
    fn sentence(&self) -> String {
        self.inner.sentence.clone()
    }

    fn __repr__(&self) -> String {
        format!(
            "Fact({:?}, {:?}, {:?})",
            self.inner.subject, self.inner.relation, self.inner.object
        )
    }
}

/// Inverted keyword index over a fact base.
#[pyclass(name = "FactIndex")]
struct PyFactIndex {
    inner: retrieval::FactIndex,
}

#[pymethods]
impl PyFactIndex {
    #[new]
    fn new(facts: Vec<PyFact>) -> PyResult<Self> {
        let inner = retrieval::FactIndex::build(facts.into_iter().map(|f| f.inner).collect())
            .map_err(err)?;
        Ok(PyFactIndex { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let facts = retrieval::load_facts(&path).map_err(err)?;
        Ok(PyFactIndex {
            inner: retrieval::FactIndex::build(facts).map_err(err)?,
        })
    }

    /// Top-k (fact_id, score, sentence) by weighted keyword overlap.
    #[pyo3(signature = (question, concepts = vec![], k = 3))]
    fn retrieve(
        &self,
        question: &str,
        concepts: Vec<String>,
        k: usize,
    ) -> Vec<(usize, usize, String)> {
        self.inner
            .retrieve_top_k(question, &concepts, k)
            .into_iter()
            .map(|h| (h.fact_id, h.score, h.fact.sentence))
            .collect()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// A trained (or freshly initialized) model with its vocabulary and classes.
#[pyclass(name = "Model")]
struct PyModel {
    inner: Model,
}

impl PyModel {
    fn context(&self, sentences: &[String]) -> PyResult<TokenizedText> {
        TokenizedText::from_sentences(
            sentences,
            &self.inner.vocab,
            self.inner.context_limit,
            self.inner.config.max_word_len,
        )
        .map_err(err)
    }
}

#[pymethods]
impl PyModel {
    /// Load a training output directory (checkpoint + vocab + classes).
    #[staticmethod]
    fn load(model_dir: PathBuf) -> PyResult<Self> {
        let (inner, _echo) = load_model_dir(&model_dir).map_err(err)?;
        Ok(PyModel { inner })
    }

    /// Freshly initialized desk-profile model over a small corpus; useful for
    /// smoke tests and API exploration.
    #[staticmethod]
    #[pyo3(signature = (mode, corpus, labels = vec![], seed = 0))]
    fn untrained(mode: &str, corpus: Vec<String>, labels: Vec<String>, seed: u64) -> PyResult<Self> {
        let mode: TaskMode = mode.parse().map_err(err)?;
        let vocab = text::Vocabulary::build(corpus.iter().map(String::as_str), 1, 50_000)
            .map_err(err)?;
        let classes = match mode {
            TaskMode::OpenEnded => {
                if labels.is_empty() {
                    return Err(PyValueError::new_err(
                        "open_ended mode needs answer labels",
                    ));
                }
                let examples: Vec<text::QAExample> = labels
                    .iter()
                    .enumerate()
                    .map(|(i, l)| text::QAExample {
                        id: format!("label{i}"),
                        description_sentences: vec![l.clone()],
                        facts: vec![],
                        question: "q".into(),
                        answers: vec![l.clone()],
                        qtype: text::QType::Other,
                        choices: None,
                        correct_index: None,
                        visual_concepts: vec![],
                    })
                    .collect();
                Some(text::AnswerClasses::build(&examples, labels.len()).map_err(err)?)
            }
            _ => None,
        };
        let cfg = model::ModelConfig::desk();
        let mut rng = {
            use rand::SeedableRng;
            rand_chacha::ChaCha8Rng::seed_from_u64(seed)
        };
        let table = text::EmbeddingTable::random(vocab.word_count(), cfg.word_dim, &mut rng);
        let inner = Model::new(mode, cfg, 500, vocab, classes, table, seed).map_err(err)?;
        Ok(PyModel { inner })
    }

    #[getter]
    fn mode(&self) -> &'static str {
        self.inner.mode.as_str()
    }

    /// Ranked (label, probability) answers, best first.
    #[pyo3(signature = (sentences, question, top = 3))]
    fn predict_open(
        &self,
        sentences: Vec<String>,
        question: &str,
        top: usize,
    ) -> PyResult<Vec<(String, f64)>> {
        let classes = self
            .inner
            .classes
            .as_ref()
            .ok_or_else(|| PyValueError::new_err("model has no answer classes"))?;
        let ctx = self.context(&sentences)?;
        let q = self.inner.tokenize_query(question).map_err(err)?;
        let ranked = self.inner.predict_open(&ctx, &q).map_err(err)?;
        Ok(ranked
            .into_iter()
            .take(top)
            .map(|(id, p)| (classes.label(id).to_string(), p as f64))
            .collect())
    }

    /// Correctness probability per candidate answer.
    fn predict_choices(
        &self,
        sentences: Vec<String>,
        question: &str,
        choices: Vec<String>,
    ) -> PyResult<Vec<f64>> {
        let ctx = self.context(&sentences)?;
        let q = self.inner.tokenize_query(question).map_err(err)?;
        let probs = self
            .inner
            .predict_choices(&ctx, &q, &choices)
            .map_err(err)?;
        Ok(probs.into_iter().map(|p| p as f64).collect())
    }

    /// Decoded answer span as (text, start, end, score).
    fn predict_span(
        &self,
        sentences: Vec<String>,
        question: &str,
    ) -> PyResult<(String, usize, usize, f64)> {
        let ctx = self.context(&sentences)?;
        let q = self.inner.tokenize_query(question).map_err(err)?;
        let span = self.inner.predict_span(&ctx, &q).map_err(err)?;
        Ok((
            ctx.span_text(span.start, span.end),
            span.start,
            span.end,
            span.score,
        ))
    }
}

/// Run a training job from a JSON run-config string; returns the report JSON.
#[pyfunction]
fn train_run(config_json: &str) -> PyResult<String> {
    let cfg: RunConfig =
        serde_json::from_str(config_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let report = cmd_train(&cfg).map_err(err)?;
    serde_json::to_string_pretty(&report).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Evaluate a trained model directory on a JSONL dataset; returns report JSON.
#[pyfunction]
fn eval_run(model_dir: PathBuf, dataset: PathBuf) -> PyResult<String> {
    let out = readvqa::cli::cmd_eval(Path::new(&model_dir), Path::new(&dataset), None).map_err(err)?;
    serde_json::to_string_pretty(&out).map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pymodule]
fn readvqa_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_answer, m)?)?;
    m.add_function(wrap_pyfunction!(assemble_context, m)?)?;
    m.add_function(wrap_pyfunction!(lr_at, m)?)?;
    m.add_function(wrap_pyfunction!(decode_span, m)?)?;
    m.add_function(wrap_pyfunction!(train_run, m)?)?;
    m.add_function(wrap_pyfunction!(eval_run, m)?)?;
    m.add_class::<PyVocabulary>()?;
    m.add_class::<PyFact>()?;
    m.add_class::<PyFactIndex>()?;
    m.add_class::<PyModel>()?;
    Ok(())
}
