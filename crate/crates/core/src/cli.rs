//! Command implementations behind the `readvqa` binary: ingest, train, eval,
//! predict, and retrieve. Every command is deterministic given its config and
//! seed, and every output carries a reproducibility stamp.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, TaskMode};
use crate::retrieval::{facts_to_paragraph, load_facts, FactIndex};
use crate::text::{load_examples, save_examples, AnswerClasses, EmbeddingTable, QAExample, Vocabulary};
use crate::train::{
    evaluate, load_checkpoint, save_checkpoint, trace_to_csv, train, EvalReport, Schedule,
    TrainConfig,
};

/// One run's knobs: mode, model profile, paths, seed, schedule, limits.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub mode: TaskMode,
    pub profile: Profile,
    pub dataset: Option<PathBuf>,
    pub val_dataset: Option<PathBuf>,
    pub facts: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub require_embeddings: bool,
    /// When set, loaded word vectors stay trainable instead of frozen.
    pub fine_tune_embeddings: bool,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: Schedule,
    pub context_limit: usize,
    pub answer_classes: usize,
    pub retrieval_k: usize,
    pub min_word_freq: usize,
    pub max_words: usize,
    pub stop_at_perfect_train: bool,
    pub finetune_from: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mode: TaskMode::OpenEnded,
            profile: Profile::Desk,
            dataset: None,
            val_dataset: None,
            facts: None,
            embeddings: None,
            require_embeddings: false,
            fine_tune_embeddings: false,
            out_dir: PathBuf::from("runs/out"),
            seed: 0,
            epochs: 30,
            batch_size: 32,
            schedule: Schedule::scratch_default(),
            context_limit: 500,
            answer_classes: 5000,
            retrieval_k: 3,
            min_word_freq: 1,
            max_words: 50_000,
            stop_at_perfect_train: false,
            finetune_from: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Desk,
    Full,
}

impl Profile {
    pub fn model_config(&self) -> ModelConfig {
        match self {
            Profile::Desk => ModelConfig::desk(),
            Profile::Full => ModelConfig::full(),
        }
    }
}

impl std::str::FromStr for Profile {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "full" => Ok(Profile::Full),
            other => Err(Error::Config(format!(
                "unknown profile {other:?} (expected desk or full)"
            ))),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&raw)?)
    }

    fn validate_paths(&self) -> Result<()> {
        for (label, path) in [
            ("dataset", &self.dataset),
            ("val_dataset", &self.val_dataset),
            ("facts", &self.facts),
            ("embeddings", &self.embeddings),
            ("finetune_from", &self.finetune_from),
        ] {
            if let Some(p) = path {
                if !p.exists() {
                    return Err(Error::Config(format!(
                        "{label} path {} does not exist",
                        p.display()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Checkpoint config echo: the run settings plus the resolved model shape.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub run: RunConfig,
    pub model: ModelConfig,
}

/// Fill empty `facts` fields by retrieving top-k supporting facts for each
/// example's question and visual concepts.
pub fn augment_with_facts(examples: &mut [QAExample], index: &FactIndex, k: usize) {
    for ex in examples.iter_mut() {
        if ex.facts.is_empty() {
            ex.facts = index
                .retrieve_top_k(&ex.question, &ex.visual_concepts, k)
                .into_iter()
                .map(|s| s.fact.sentence)
                .collect();
        }
    }
}

fn corpus_texts(examples: &[QAExample]) -> Vec<String> {
    let mut texts = Vec::new();
    for ex in examples {
        texts.extend(ex.description_sentences.iter().cloned());
        texts.extend(ex.facts.iter().cloned());
        texts.push(ex.question.clone());
        texts.extend(ex.answers.iter().cloned());
        if let Some(choices) = &ex.choices {
            texts.extend(choices.iter().cloned());
        }
    }
    texts
}

fn load_dataset_with_facts(cfg: &RunConfig, path: &Path) -> Result<Vec<QAExample>> {
    let mut examples = load_examples(path)?;
    if let Some(facts_path) = &cfg.facts {
        let index = FactIndex::build(load_facts(facts_path)?)?;
        augment_with_facts(&mut examples, &index, cfg.retrieval_k);
    }
    Ok(examples)
}

#[derive(Serialize)]
pub struct IngestReport {
    pub examples_kept: usize,
    pub excluded_from_training: usize,
    pub answer_classes: usize,
    pub vocabulary_words: usize,
    pub out_dir: PathBuf,
    pub config: RunConfig,
}

/// Validate a raw dataset, build the vocabulary and (open-ended) answer-class
/// map, and write the processed files.
pub fn cmd_ingest(cfg: &RunConfig, input: &Path) -> Result<IngestReport> {
    cfg.validate_paths()?;
    let examples = load_dataset_with_facts(cfg, input)?;
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let texts = corpus_texts(&examples);
    let vocab = Vocabulary::build(texts.iter().map(String::as_str), cfg.min_word_freq, cfg.max_words)?;
    vocab.save(&cfg.out_dir.join("vocab.json"))?;
    let mut excluded = 0usize;
    let mut classes_len = 0usize;
    if cfg.mode == TaskMode::OpenEnded {
        let classes = AnswerClasses::build(&examples, cfg.answer_classes)?;
        excluded = examples
            .iter()
            .filter(|ex| classes.training_target(ex).is_none())
            .count();
        classes_len = classes.len();
        classes.save(&cfg.out_dir.join("classes.json"))?;
    }
    save_examples(&cfg.out_dir.join("examples.jsonl"), &examples)?;
    Ok(IngestReport {
        examples_kept: examples.len(),
        excluded_from_training: excluded,
        answer_classes: classes_len,
        vocabulary_words: vocab.word_count(),
        out_dir: cfg.out_dir.clone(),
        config: cfg.clone(),
    })
}

#[derive(Serialize)]
pub struct TrainReport {
    pub seed: u64,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub optimizer_steps: u64,
    pub final_train_top1: f64,
    pub excluded_from_training: usize,
    pub stopped_early: bool,
    pub out_dir: PathBuf,
    pub config: RunConfig,
}

/// Train a model from the run config; writes checkpoint, vocabulary, classes,
/// trace CSV, and the config echo into the output directory.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainReport> {
    cfg.validate_paths()?;
    let dataset_path = cfg
        .dataset
        .as_ref()
        .ok_or_else(|| Error::Config("train needs a dataset path".into()))?;
    let model_cfg = cfg.profile.model_config();
    model_cfg.validate()?;

    let train_set = load_dataset_with_facts(cfg, dataset_path)?;
    let val_set = cfg
        .val_dataset
        .as_ref()
        .map(|p| load_dataset_with_facts(cfg, p))
        .transpose()?;

    let texts = corpus_texts(&train_set);
    let vocab = Vocabulary::build(texts.iter().map(String::as_str), cfg.min_word_freq, cfg.max_words)?;
    let classes = match cfg.mode {
        TaskMode::OpenEnded => Some(AnswerClasses::build(&train_set, cfg.answer_classes)?),
        _ => None,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let word_table = match &cfg.embeddings {
        Some(path) => EmbeddingTable::load_pretrained(
            path,
            &vocab,
            model_cfg.word_dim,
            cfg.fine_tune_embeddings,
            &mut rng,
        )?,
        None if cfg.require_embeddings => {
            return Err(Error::Config(
                "require_embeddings is set but no embeddings path given".into(),
            ))
        }
        None => {
            eprintln!("note: no embeddings path; using trainable random-init fallback");
            EmbeddingTable::random(vocab.word_count(), model_cfg.word_dim, &mut rng)
        }
    };

    let mut model = Model::new(
        cfg.mode,
        model_cfg.clone(),
        cfg.context_limit,
        vocab,
        classes,
        word_table,
        cfg.seed,
    )?;

    let mut schedule = cfg.schedule.clone();
    let mut epochs = cfg.epochs;
    if let Some(ckpt_path) = &cfg.finetune_from {
        let ckpt = load_checkpoint(ckpt_path)?;
        for (name, tensor) in ckpt.params.iter() {
            if !model.params.contains(name) {
                return Err(Error::Data(format!(
                    "checkpoint parameter {name} unknown to this configuration"
                )));
            }
            if model.params.get(name).shape() != tensor.shape() {
                return Err(Error::Data(format!(
                    "checkpoint parameter {name} has shape {:?}, expected {:?}",
                    tensor.shape(),
                    model.params.get(name).shape()
                )));
            }
            model.params.insert(name.clone(), tensor.clone());
        }
        schedule = Schedule::finetune_default();
        epochs = cfg.epochs.min(20);
    }

    let train_cfg = TrainConfig {
        epochs,
        batch_size: cfg.batch_size,
        schedule,
        clip_norm: 5.0,
        seed: cfg.seed,
        stop_at_perfect_train: cfg.stop_at_perfect_train,
    };
    let outcome = train(&mut model, &train_set, val_set.as_deref(), &train_cfg)?;

    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let echo = ConfigEcho {
        run: cfg.clone(),
        model: model_cfg,
    };
    save_checkpoint(
        &cfg.out_dir.join("checkpoint.ckpt"),
        &outcome.best_params,
        &echo,
        cfg.seed,
    )?;
    model.vocab.save(&cfg.out_dir.join("vocab.json"))?;
    if let Some(classes) = &model.classes {
        classes.save(&cfg.out_dir.join("classes.json"))?;
    }
    let trace_path = cfg.out_dir.join("trace.csv");
    fs::write(&trace_path, trace_to_csv(&outcome.trace)).map_err(|e| Error::io(&trace_path, e))?;
    let echo_path = cfg.out_dir.join("config.json");
    fs::write(&echo_path, serde_json::to_string_pretty(&echo)?)
        .map_err(|e| Error::io(&echo_path, e))?;

    let final_train_top1 = outcome
        .trace
        .iter()
        .rev()
        .find(|r| r.split == "train")
        .map(|r| r.top1)
        .unwrap_or(0.0);
    let epochs_run = outcome
        .trace
        .last()
        .map(|r| r.epoch + 1)
        .unwrap_or(0);
    Ok(TrainReport {
        seed: cfg.seed,
        epochs_run,
        best_epoch: outcome.best_epoch,
        optimizer_steps: outcome.optimizer_steps,
        final_train_top1,
        excluded_from_training: outcome.excluded_from_training,
        stopped_early: outcome.stopped_early,
        out_dir: cfg.out_dir.clone(),
        config: cfg.clone(),
    })
}

/// Rebuild a model from a training output directory (checkpoint + vocab +
/// classes + config echo).
pub fn load_model_dir(dir: &Path) -> Result<(Model, ConfigEcho)> {
    let ckpt = load_checkpoint(&dir.join("checkpoint.ckpt"))?;
    let echo: ConfigEcho = serde_json::from_value(ckpt.config.clone())?;
    let vocab = Vocabulary::load(&dir.join("vocab.json"))?;
    let classes = match echo.run.mode {
        TaskMode::OpenEnded => Some(AnswerClasses::load(&dir.join("classes.json"))?),
        _ => None,
    };
    let model = Model {
        mode: echo.run.mode,
        config: echo.model.clone(),
        context_limit: echo.run.context_limit,
        vocab,
        classes,
        params: ckpt.params,
    };
    Ok((model, echo))
}

#[derive(Serialize)]
pub struct EvalOutput {
    pub seed: u64,
    pub mode: TaskMode,
    pub report: EvalReport,
    pub config: RunConfig,
}

/// Evaluate a trained model directory against a dataset; returns the report
/// for JSON output, table rendering is the caller's choice.
pub fn cmd_eval(model_dir: &Path, dataset: &Path, mode_override: Option<TaskMode>) -> Result<EvalOutput> {
    let (model, echo) = load_model_dir(model_dir)?;
    if let Some(mode) = mode_override {
        if mode != model.mode {
            return Err(Error::ModeMismatch(format!(
                "checkpoint was trained for {}, asked to evaluate {}",
                model.mode.as_str(),
                mode.as_str()
            )));
        }
    }
    let examples = load_dataset_with_facts(&echo.run, dataset)?;
    let report = evaluate(&model, &examples, model.mode)?;
    Ok(EvalOutput {
        seed: echo.run.seed,
        mode: model.mode,
        report,
        config: echo.run,
    })
}

/// Render the per-type accuracy table the way reports lay it out.
pub fn render_eval_table(out: &EvalOutput) -> String {
    let mut s = String::new();
    s.push_str(&format!(
        "# seed={} mode={}\n",
        out.seed,
        out.mode.as_str()
    ));
    s.push_str(&format!("{:<8} {:>8} {:>8}\n", "type", "top1", "count"));
    for (qtype, stats) in &out.report.per_qtype {
        s.push_str(&format!(
            "{:<8} {:>8.4} {:>8}\n",
            qtype, stats.top1, stats.count
        ));
    }
    s.push_str(&format!(
        "{:<8} {:>8.4} {:>8}   (top3 {:.4})\n",
        "overall", out.report.top1, out.report.num_examples, out.report.top3
    ));
    s
}

#[derive(Serialize)]
pub struct PredictOutput {
    pub seed: u64,
    pub mode: TaskMode,
    pub answers: Vec<PredictedAnswer>,
    pub config: RunConfig,
}

#[derive(Serialize)]
pub struct PredictedAnswer {
    pub text: String,
    pub probability: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source_sentence: Option<String>,
}

/// Answer a single question. Open-ended prints the top-3 classes, multiple
/// choice scores each provided choice, span mode decodes the best span and
/// reports its source sentence.
pub fn cmd_predict(
    model_dir: &Path,
    context_sentences: &[String],
    question: &str,
    choices: &[String],
    facts_path: Option<&Path>,
    concepts: &[String],
    k: usize,
) -> Result<PredictOutput> {
    let (model, echo) = load_model_dir(model_dir)?;
    let mut fact_sentences: Vec<String> = Vec::new();
    if let Some(path) = facts_path {
        let index = FactIndex::build(load_facts(path)?)?;
        fact_sentences = index
            .retrieve_top_k(question, concepts, k)
            .into_iter()
            .map(|s| s.fact.sentence)
            .collect();
    }
    if context_sentences.is_empty() && fact_sentences.is_empty() {
        return Err(Error::Usage(
            "predict needs --context sentences or --facts retrieval".into(),
        ));
    }
    let sentences: Vec<String> = context_sentences
        .iter()
        .cloned()
        .chain(fact_sentences)
        .collect();
    let ctx = crate::text::TokenizedText::from_sentences(
        &sentences,
        &model.vocab,
        model.context_limit,
        model.config.max_word_len,
    )?;
    let q = model.tokenize_query(question)?;

    let answers = match model.mode {
        TaskMode::OpenEnded => {
            let classes = model
                .classes
                .as_ref()
                .ok_or_else(|| Error::Config("model has no answer classes".into()))?;
            model
                .predict_open(&ctx, &q)?
                .into_iter()
                .take(3)
                .map(|(id, p)| PredictedAnswer {
                    text: classes.label(id).to_string(),
                    probability: p as f64,
                    source_sentence: None,
                })
                .collect()
        }
        TaskMode::MultipleChoice => {
            if choices.len() != 4 {
                return Err(Error::Usage(format!(
                    "multiple-choice predict needs exactly 4 --choice flags, got {}",
                    choices.len()
                )));
            }
            let probs = model.predict_choices(&ctx, &q, choices)?;
            choices
                .iter()
                .zip(probs)
                .map(|(c, p)| PredictedAnswer {
                    text: c.clone(),
                    probability: p as f64,
                    source_sentence: None,
                })
                .collect()
        }
        TaskMode::Span => {
            let span = model.predict_span(&ctx, &q)?;
            let sentence = sentences
                .get(ctx.spans[span.start].sentence)
                .cloned()
                .unwrap_or_default();
            vec![PredictedAnswer {
                text: ctx.span_text(span.start, span.end),
                probability: span.score,
                source_sentence: Some(sentence),
            }]
        }
    };
    Ok(PredictOutput {
        seed: echo.run.seed,
        mode: model.mode,
        answers,
        config: echo.run,
    })
}

#[derive(Serialize)]
pub struct RetrieveOutput {
    pub question: String,
    pub concepts: Vec<String>,
    pub k: usize,
    pub facts: Vec<RetrievedFact>,
    pub paragraph: Option<String>,
}

#[derive(Serialize)]
pub struct RetrievedFact {
    pub rank: usize,
    pub score: usize,
    pub sentence: String,
}

/// Rank facts for a question; prints top-k with scores, rank-stable.
pub fn cmd_retrieve(
    facts_path: &Path,
    question: &str,
    concepts: &[String],
    k: usize,
    context_limit: usize,
) -> Result<RetrieveOutput> {
    let index = FactIndex::build(load_facts(facts_path)?)?;
    let hits = index.retrieve_top_k(question, concepts, k);
    let paragraph = if hits.is_empty() {
        None
    } else {
        Some(facts_to_paragraph(&hits, context_limit)?)
    };
    Ok(RetrieveOutput {
        question: question.to_string(),
        concepts: concepts.to_vec(),
        k,
        facts: hits
            .iter()
            .enumerate()
            .map(|(i, h)| RetrievedFact {
                rank: i + 1,
                score: h.score,
                sentence: h.fact.sentence.clone(),
            })
            .collect(),
        paragraph,
    })
}
