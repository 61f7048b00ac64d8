//! Optimization loop: batching, negative sampling, the ADAM update with
//! gradient clipping, the learning-rate schedule, checkpointing, and the
//! accuracy evaluation protocol.

mod adam;
mod checkpoint;
mod eval;
mod schedule;

pub use adam::{clip_global_norm, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use eval::{evaluate, EvalReport, Predictor, QTypeStats};
pub use schedule::Schedule;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    classification_head, multichoice_head, pooled_query_vector, run_pipeline, span_head,
    span_loss,
    Bound, Model, Parameters, TaskMode,
};
use crate::tensor::{Graph, NodeId, Tensor};
use crate::text::{tokenize, QAExample, TokenizedText};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: Schedule,
    pub clip_norm: f64,
    pub seed: u64,
    /// Stop once train top-1 reaches 1.0 (used by overfitting runs).
    pub stop_at_perfect_train: bool,
}

impl TrainConfig {
    pub fn new(epochs: usize, seed: u64) -> Self {
        TrainConfig {
            epochs,
            batch_size: 32,
            schedule: Schedule::scratch_default(),
            clip_norm: 5.0,
            seed,
            stop_at_perfect_train: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub epoch: usize,
    pub split: &'static str,
    pub loss: f64,
    pub top1: f64,
}

/// Render the loss trace as `epoch,split,loss,top1` CSV.
pub fn trace_to_csv(rows: &[TraceRow]) -> String {
    let mut out = String::from("epoch,split,loss,top1\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.6},{:.6}\n",
            r.epoch, r.split, r.loss, r.top1
        ));
    }
    out
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub trace: Vec<TraceRow>,
    /// Best-on-validation parameters (final parameters when no validation set).
    pub best_params: Parameters<f32>,
    pub best_epoch: usize,
    pub optimizer_steps: u64,
    pub excluded_from_training: usize,
    pub stopped_early: bool,
}

/// First context token span matching any gold answer's token sequence.
pub fn find_answer_span(ctx: &TokenizedText, answers: &[String]) -> Option<(usize, usize)> {
    for answer in answers {
        let toks = tokenize(answer);
        if toks.is_empty() || toks.len() > ctx.len() {
            continue;
        }
        for start in 0..=ctx.len() - toks.len() {
            if ctx.raw[start..start + toks.len()] == toks[..] {
                return Some((start, start + toks.len() - 1));
            }
        }
    }
    None
}

/// Two distinct indices drawn uniformly from the three incorrect choices.
fn sample_negative_indices<R: Rng>(correct: usize, rng: &mut R) -> [usize; 2] {
    let incorrect: Vec<usize> = (0..4).filter(|&i| i != correct).collect();
    let first = rng.random_range(0..3);
    let mut second = rng.random_range(0..2);
    if second >= first {
        second += 1;
    }
    [incorrect[first], incorrect[second]]
}

/// One positive triplet plus two sampled negatives as (choice index, label)
/// pairs. The caller shuffles all triplets into the epoch stream.
pub fn sample_negatives<R: Rng>(ex: &QAExample, rng: &mut R) -> Result<Vec<(usize, u8)>> {
    let correct = match (&ex.choices, ex.correct_index) {
        (Some(c), Some(i)) if c.len() == 4 && i < 4 => i,
        _ => {
            return Err(Error::Data(format!(
                "example {} lacks a well-formed 4-choice block",
                ex.id
            )))
        }
    };
    let [a, b] = sample_negative_indices(correct, rng);
    Ok(vec![(correct, 1), (a, 0), (b, 0)])
}

struct PreparedItem {
    ctx: TokenizedText,
    question: TokenizedText,
    target: ItemTarget,
}

enum ItemTarget {
    Class(usize),
    Span(usize, usize),
}

struct PreparedChoices {
    ctx: TokenizedText,
    question: TokenizedText,
    choices: Vec<TokenizedText>,
    correct: usize,
}

fn item_loss<R: Rng>(
    g: &Graph<f32>,
    bound: &Bound<f32>,
    model: &Model,
    item: &PreparedItem,
    training: bool,
    rng: &mut R,
) -> Result<NodeId> {
    let out = run_pipeline(
        g,
        bound,
        &model.config,
        &item.ctx,
        &item.question,
        training,
        rng,
    )?;
    match item.target {
        ItemTarget::Class(gold) => {
            let head = classification_head(
                g,
                out.m0,
                out.m1,
                out.m2,
                &item.ctx.mask,
                bound.id("class.w"),
            )?;
            g.cross_entropy(head.logits, None, gold)
        }
        ItemTarget::Span(gs, ge) => {
            let head = span_head(
                g,
                out.m0,
                out.m1,
                out.m2,
                &item.ctx.mask,
                bound.id("span.start.w"),
                bound.id("span.end.w"),
            )?;
            span_loss(g, &head, &item.ctx.mask, gs, ge)
        }
    }
}

/// Triplet score: the question and the candidate answer each take the
/// attention's context role and attend over the scene, so the pooled vectors
/// live on the question/answer side. When the answer is right, both passes
/// attend the same scene content and their pooled features correlate.
fn triplet_score<R: Rng>(
    g: &Graph<f32>,
    bound: &Bound<f32>,
    model: &Model,
    ex: &PreparedChoices,
    choice: usize,
    training: bool,
    rng: &mut R,
) -> Result<NodeId> {
    let qp = run_pipeline(g, bound, &model.config, &ex.question, &ex.ctx, training, rng)?;
    let v0q = pooled_query_vector(g, qp.m0, &ex.question.mask)?;
    let v1q = pooled_query_vector(g, qp.m1, &ex.question.mask)?;
    let answer = &ex.choices[choice];
    let ap = run_pipeline(g, bound, &model.config, answer, &ex.ctx, training, rng)?;
    let v0a = pooled_query_vector(g, ap.m0, &answer.mask)?;
    let v1a = pooled_query_vector(g, ap.m1, &answer.mask)?;
    multichoice_head(g, bound, v0q, v1q, v0a, v1a, training, rng)
}

fn triplet_loss<R: Rng>(
    g: &Graph<f32>,
    bound: &Bound<f32>,
    model: &Model,
    ex: &PreparedChoices,
    choice: usize,
    label: u8,
    training: bool,
    rng: &mut R,
) -> Result<NodeId> {
    let e = triplet_score(g, bound, model, ex, choice, training, rng)?;
    g.binary_logistic(e, label)
}

/// Zero gradients of frozen embedding rows before clipping and the update.
fn apply_row_freezes(model: &Model, grads: &mut IndexMap<String, Tensor<f32>>) {
    for (name, grad) in grads.iter_mut() {
        if let Some(mask) = model.params.row_trainable(name) {
            let cols = grad.shape()[1];
            let data = grad.data_mut();
            for (row, &trainable) in mask.iter().enumerate() {
                if !trainable {
                    for c in 0..cols {
                        data[row * cols + c] = 0.0;
                    }
                }
            }
        }
    }
}

enum PreparedSet {
    Items(Vec<PreparedItem>),
    Choices(Vec<PreparedChoices>),
}

fn prepare(model: &Model, dataset: &[QAExample]) -> Result<(PreparedSet, usize)> {
    let mut excluded = 0usize;
    match model.mode {
        TaskMode::OpenEnded => {
            let classes = model
                .classes
                .as_ref()
                .ok_or_else(|| Error::Config("open-ended training needs answer classes".into()))?;
            let mut items = Vec::new();
            for ex in dataset {
                let Some(gold) = classes.training_target(ex) else {
                    excluded += 1;
                    continue;
                };
                items.push(PreparedItem {
                    ctx: model.tokenize_context(ex)?,
                    question: model.tokenize_query(&ex.question)?,
                    target: ItemTarget::Class(gold),
                });
            }
            Ok((PreparedSet::Items(items), excluded))
        }
        TaskMode::Span => {
            let mut items = Vec::new();
            for ex in dataset {
                let ctx = model.tokenize_context(ex)?;
                let Some((gs, ge)) = find_answer_span(&ctx, &ex.answers) else {
                    excluded += 1;
                    continue;
                };
                items.push(PreparedItem {
                    question: model.tokenize_query(&ex.question)?,
                    ctx,
                    target: ItemTarget::Span(gs, ge),
                });
            }
            Ok((PreparedSet::Items(items), excluded))
        }
        TaskMode::MultipleChoice => {
            let mut prepared = Vec::new();
            for ex in dataset {
                let choices = ex.choices.as_ref().ok_or_else(|| {
                    Error::ModeMismatch(format!("example {} has no choices", ex.id))
                })?;
                prepared.push(PreparedChoices {
                    ctx: model.tokenize_context(ex)?,
                    question: model.tokenize_query(&ex.question)?,
                    choices: choices
                        .iter()
                        .map(|c| model.tokenize_query(c))
                        .collect::<Result<_>>()?,
                    correct: ex.correct_index.expect("validated"),
                });
            }
            Ok((PreparedSet::Choices(prepared), excluded))
        }
    }
}

/// Mean forward loss over a prepared set, without dropout or updates. For
/// multiple choice this scores all four choices against their true labels.
fn forward_loss(model: &Model, set: &PreparedSet) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut total = 0.0f64;
    let mut count = 0usize;
    match set {
        PreparedSet::Items(items) => {
            for item in items {
                let g: Graph<f32> = Graph::new();
                let bound = Bound::bind(&g, &model.params);
                let loss = item_loss(&g, &bound, model, item, false, &mut rng)?;
                total += g.scalar_value(loss)? as f64;
                count += 1;
            }
        }
        PreparedSet::Choices(examples) => {
            for ex in examples {
                let g: Graph<f32> = Graph::new();
                let bound = Bound::bind(&g, &model.params);
                for choice in 0..ex.choices.len() {
                    let label = (choice == ex.correct) as u8;
                    let loss =
                        triplet_loss(&g, &bound, model, ex, choice, label, false, &mut rng)?;
                    total += g.scalar_value(loss)? as f64;
                    count += 1;
                }
            }
        }
    }
    Ok(total / count.max(1) as f64)
}

/// Train the model in place. Runs `cfg.epochs` epochs of shuffled mini
/// batches (`ceil(N / batch_size)` optimizer steps per epoch), records one
/// trace row per split per epoch, and keeps the best-on-validation parameter
/// snapshot. Deterministic given the seed.
pub fn train(
    model: &mut Model,
    train_set: &[QAExample],
    val_set: Option<&[QAExample]>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if train_set.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    cfg.schedule.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let (prepared, excluded) = prepare(model, train_set)?;
    let trainable = match &prepared {
        PreparedSet::Items(v) => v.len(),
        PreparedSet::Choices(v) => v.len(),
    };
    if trainable == 0 {
        return Err(Error::Train("no trainable examples after exclusions".into()));
    }
    let val_prepared = val_set.map(|v| prepare(model, v)).transpose()?;

    let mut adam = AdamState::new();
    let mut trace = Vec::new();
    let mut best: Option<(f64, usize, Parameters<f32>)> = None;
    let mut stopped_early = false;

    for epoch in 0..cfg.epochs {
        let lr = cfg.schedule.lr_at(epoch) as f32;
        // Epoch stream of (example, choice, label); choice/label only carry
        // meaning for multiple choice.
        let mut stream: Vec<(usize, usize, u8)> = match &prepared {
            PreparedSet::Choices(examples) => {
                let mut s = Vec::with_capacity(examples.len() * 3);
                for (i, ex) in examples.iter().enumerate() {
                    s.push((i, ex.correct, 1));
                    let [a, b] = sample_negative_indices(ex.correct, &mut rng);
                    s.push((i, a, 0));
                    s.push((i, b, 0));
                }
                s
            }
            PreparedSet::Items(items) => (0..items.len()).map(|i| (i, 0, 0)).collect(),
        };
        stream.shuffle(&mut rng);

        let mut loss_sum = 0.0f64;
        let mut seen = 0usize;
        for (batch_idx, batch) in stream.chunks(cfg.batch_size).enumerate() {
            let g: Graph<f32> = Graph::new();
            let bound = Bound::bind(&g, &model.params);
            let mut batch_loss: Option<NodeId> = None;
            for &(idx, choice, label) in batch {
                let loss = match &prepared {
                    PreparedSet::Choices(examples) => {
                        triplet_loss(&g, &bound, model, &examples[idx], choice, label, true, &mut rng)?
                    }
                    PreparedSet::Items(items) => {
                        item_loss(&g, &bound, model, &items[idx], true, &mut rng)?
                    }
                };
                batch_loss = Some(match batch_loss {
                    Some(acc) => g.add(acc, loss)?,
                    None => loss,
                });
            }
            let mean = g.scale(
                batch_loss.expect("non-empty batch"),
                1.0 / batch.len() as f32,
            )?;
            let mean_value = g.scalar_value(mean)? as f64;
            if !mean_value.is_finite() {
                return Err(Error::Train(format!(
                    "non-finite loss at epoch {epoch}, batch {batch_idx}"
                )));
            }
            g.backward(mean)?;
            let mut grads = bound.grads(&model.params);
            apply_row_freezes(model, &mut grads);
            clip_global_norm(&mut grads, cfg.clip_norm as f32);
            adam.apply(&mut model.params, &grads, lr)?;
            loss_sum += mean_value * batch.len() as f64;
            seen += batch.len();
        }
        let epoch_loss = loss_sum / seen as f64;

        let train_report = evaluate(&*model, train_set, model.mode)?;
        trace.push(TraceRow {
            epoch,
            split: "train",
            loss: epoch_loss,
            top1: train_report.top1,
        });
        if let (Some(val), Some(vp)) = (val_set, val_prepared.as_ref()) {
            let val_report = evaluate(&*model, val, model.mode)?;
            trace.push(TraceRow {
                epoch,
                split: "val",
                loss: forward_loss(model, &vp.0)?,
                top1: val_report.top1,
            });
            let better = best
                .as_ref()
                .map_or(true, |(top1, _, _)| val_report.top1 > *top1);
            if better {
                best = Some((val_report.top1, epoch, model.params.clone()));
            }
        }
        if cfg.stop_at_perfect_train && train_report.top1 >= 1.0 {
            stopped_early = true;
            break;
        }
    }

    let (best_epoch, best_params) = match best {
        Some((_, epoch, params)) => (epoch, params),
        None => (
            trace.last().map(|r| r.epoch).unwrap_or(0),
            model.params.clone(),
        ),
    };
    Ok(TrainOutcome {
        trace,
        best_params,
        best_epoch,
        optimizer_steps: adam.step_count(),
        excluded_from_training: excluded,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::text::{AnswerClasses, EmbeddingTable, QType, Vocabulary};

    fn open_example(id: &str, color: &str, noun: &str) -> QAExample {
        QAExample {
            id: id.into(),
            description_sentences: vec![format!("the {noun} is {color}")],
            facts: vec![],
            question: format!("what color is the {noun}"),
            answers: vec![color.into()],
            qtype: QType::What,
            choices: None,
            correct_index: None,
            visual_concepts: vec![],
        }
    }

    fn tiny_open_model(examples: &[QAExample], seed: u64) -> Model {
        let mut cfg = ModelConfig::desk();
        cfg.model_dim = 16;
        cfg.ff_hidden = 16;
        cfg.word_dim = 8;
        cfg.char_dim = 4;
        cfg.mc_hidden = 16;
        cfg.kernel = 3;
        cfg.model_blocks = 1;
        cfg.emb_conv_layers = 2;
        let texts: Vec<String> = examples
            .iter()
            .flat_map(|e| {
                e.description_sentences
                    .iter()
                    .cloned()
                    .chain(std::iter::once(e.question.clone()))
            })
            .collect();
        let vocab = Vocabulary::build(texts.iter().map(String::as_str), 1, 1000).unwrap();
        let classes = AnswerClasses::build(examples, 20).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table = EmbeddingTable::random(vocab.word_count(), cfg.word_dim, &mut rng);
        Model::new(
            TaskMode::OpenEnded,
            cfg,
            64,
            vocab,
            Some(classes),
            table,
            seed,
        )
        .unwrap()
    }

    fn tiny_dataset() -> Vec<QAExample> {
        let colors = ["red", "blue", "green"];
        let nouns = ["cat", "dog"];
        let mut out = Vec::new();
        for (i, c) in colors.iter().enumerate() {
            for (j, n) in nouns.iter().enumerate() {
                out.push(open_example(&format!("e{i}{j}"), c, n));
            }
        }
        out
    }

    #[test]
    fn find_answer_span_locates_tokens() {
        let vocab = Vocabulary::build(["the red cat sat"], 1, 100).unwrap();
        let ctx =
            TokenizedText::from_sentences(&["the red cat sat".into()], &vocab, 100, 8).unwrap();
        assert_eq!(
            find_answer_span(&ctx, &["red cat".to_string()]),
            Some((1, 2))
        );
        assert_eq!(find_answer_span(&ctx, &["missing".to_string()]), None);
    }

    #[test]
    fn sample_negatives_shape_and_distribution() {
        let ex = QAExample {
            id: "m".into(),
            description_sentences: vec!["x".into()],
            facts: vec![],
            question: "q".into(),
            answers: vec![],
            qtype: QType::Other,
            choices: Some(vec!["a".into(), "b".into(), "c".into(), "d".into()]),
            correct_index: Some(1),
            visual_concepts: vec![],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut counts = [0usize; 4];
        for _ in 0..10_000 {
            let triplets = sample_negatives(&ex, &mut rng).unwrap();
            assert_eq!(triplets.len(), 3);
            assert_eq!(triplets.iter().filter(|(_, l)| *l == 1).count(), 1);
            assert_eq!(triplets[0], (1, 1));
            assert_ne!(triplets[1].0, triplets[2].0);
            for (c, l) in &triplets[1..] {
                assert_eq!(*l, 0);
                assert_ne!(*c, 1);
                counts[*c] += 1;
            }
        }
        // each incorrect choice appears with frequency 2/3 +- 0.02
        for c in [0usize, 2, 3] {
            let freq = counts[c] as f64 / 10_000.0;
            assert!((freq - 2.0 / 3.0).abs() < 0.02, "choice {c}: {freq}");
        }
    }

    #[test]
    fn sample_negatives_deterministic_given_seed() {
        let ex = QAExample {
            id: "m".into(),
            description_sentences: vec!["x".into()],
            facts: vec![],
            question: "q".into(),
            answers: vec![],
            qtype: QType::Other,
            choices: Some(vec!["a".into(), "b".into(), "c".into(), "d".into()]),
            correct_index: Some(0),
            visual_concepts: vec![],
        };
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..20)
                .map(|_| sample_negatives(&ex, &mut rng).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(11), draw(11));
    }

    #[test]
    fn one_epoch_executes_ceil_n_over_batch_steps() {
        let data = tiny_dataset(); // 6 examples
        let mut model = tiny_open_model(&data, 1);
        let mut cfg = TrainConfig::new(1, 1);
        cfg.batch_size = 4;
        let outcome = train(&mut model, &data, None, &cfg).unwrap();
        assert_eq!(outcome.optimizer_steps, 2); // ceil(6/4)
    }

    #[test]
    fn same_seed_runs_are_identical() {
        let data = tiny_dataset();
        let run = || {
            let mut model = tiny_open_model(&data, 7);
            let cfg = TrainConfig::new(3, 7);
            let outcome = train(&mut model, &data, Some(&data), &cfg).unwrap();
            (trace_to_csv(&outcome.trace), outcome.best_epoch)
        };
        let (a, b) = (run(), run());
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn single_small_step_decreases_batch_loss() {
        // descent sanity over several random initializations
        let data = tiny_dataset();
        for seed in 0..10u64 {
            let mut model = tiny_open_model(&data, seed);
            let (prepared, _) = prepare(&model, &data).unwrap();
            let before = forward_loss(&model, &prepared).unwrap();
            let mut cfg = TrainConfig::new(1, seed);
            cfg.batch_size = data.len();
            cfg.schedule = Schedule::Decay {
                base_lr: 1e-4,
                decay: 1.0,
                interval: 1,
                floor: 1e-4,
            };
            train(&mut model, &data, None, &cfg).unwrap();
            let after = forward_loss(&model, &prepared).unwrap();
            assert!(
                after < before,
                "seed {seed}: loss went {before} -> {after}"
            );
        }
    }

    #[test]
    fn excluded_answers_are_counted_and_kept_out_of_training() {
        let mut data = tiny_dataset();
        // an answer no class covers (K built from data only has seen colors)
        data.push(open_example("odd", "turquoise", "cat"));
        let classes = AnswerClasses::build(&data[..6], 20).unwrap();
        let mut model = tiny_open_model(&data[..6], 1);
        model.classes = Some(classes);
        let cfg = TrainConfig::new(1, 1);
        let outcome = train(&mut model, &data, None, &cfg).unwrap();
        assert_eq!(outcome.excluded_from_training, 1);
    }

    #[test]
    fn empty_training_set_is_an_error() {
        let data = tiny_dataset();
        let mut model = tiny_open_model(&data, 1);
        let cfg = TrainConfig::new(1, 1);
        assert_eq!(
            train(&mut model, &[], None, &cfg).unwrap_err().category(),
            "data"
        );
    }
}
