use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{Model, TaskMode};
use crate::text::{normalize_answer, QAExample};

/// Accuracy summary: overall top-1/top-3 plus the per-question-type table.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub top1: f64,
    pub top3: f64,
    pub num_examples: usize,
    pub per_qtype: BTreeMap<String, QTypeStats>,
}

#[derive(Debug, Clone, Serialize)]
pub struct QTypeStats {
    pub top1: f64,
    pub count: usize,
}

/// Prediction surface the evaluation protocol runs against. The trained model
/// implements it; tests drive the protocol with scripted predictors.
pub trait Predictor {
    /// Ranked (label, probability) list, best first.
    fn predict_open(&self, ex: &QAExample) -> Result<Vec<(String, f64)>>;
    /// Correctness probability per provided choice.
    fn predict_choice_probs(&self, ex: &QAExample) -> Result<Vec<f64>>;
    /// Decoded answer span text.
    fn predict_span_text(&self, ex: &QAExample) -> Result<String>;
}

fn gold_set(ex: &QAExample) -> Vec<String> {
    ex.gold_answers().iter().map(|a| normalize_answer(a)).collect()
}

/// String-match accuracy after answer normalization. Open-ended scores
/// top-1/top-3 over ranked classes; multiple choice takes the argmax choice
/// (ties to the lowest index, top-1 only); span mode matches the decoded
/// span text. Per-type accuracy covers the 6W buckets plus "other"; empty
/// buckets are omitted.
pub fn evaluate<P: Predictor>(
    predictor: &P,
    dataset: &[QAExample],
    mode: TaskMode,
) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::Data("cannot evaluate an empty dataset".into()));
    }
    let mut hits1 = 0usize;
    let mut hits3 = 0usize;
    let mut per: BTreeMap<&'static str, (usize, usize)> = BTreeMap::new();
    for ex in dataset {
        let golds = gold_set(ex);
        let (top1_hit, top3_hit) = match mode {
            TaskMode::OpenEnded => {
                let ranked = predictor.predict_open(ex)?;
                let hit_at = |k: usize| {
                    ranked
                        .iter()
                        .take(k)
                        .any(|(label, _)| golds.contains(&normalize_answer(label)))
                };
                (hit_at(1), hit_at(3))
            }
            TaskMode::MultipleChoice => {
                let choices = ex.choices.as_ref().ok_or_else(|| {
                    Error::ModeMismatch(format!(
                        "example {} has no choices for multiple-choice evaluation",
                        ex.id
                    ))
                })?;
                let probs = predictor.predict_choice_probs(ex)?;
                if probs.len() != choices.len() {
                    return Err(Error::Contract(format!(
                        "predictor returned {} probabilities for {} choices",
                        probs.len(),
                        choices.len()
                    )));
                }
                let mut best = 0usize;
                for (i, p) in probs.iter().enumerate() {
                    if *p > probs[best] {
                        best = i;
                    }
                }
                let hit = Some(best) == ex.correct_index;
                (hit, hit)
            }
            TaskMode::Span => {
                let text = predictor.predict_span_text(ex)?;
                let hit = golds.contains(&normalize_answer(&text));
                (hit, hit)
            }
        };
        hits1 += top1_hit as usize;
        hits3 += top3_hit as usize;
        let slot = per.entry(ex.qtype.as_str()).or_insert((0, 0));
        slot.0 += top1_hit as usize;
        slot.1 += 1;
    }
    let n = dataset.len();
    Ok(EvalReport {
        top1: hits1 as f64 / n as f64,
        top3: hits3 as f64 / n as f64,
        num_examples: n,
        per_qtype: per
            .into_iter()
            .map(|(k, (h, c))| {
                (
                    k.to_string(),
                    QTypeStats {
                        top1: h as f64 / c as f64,
                        count: c,
                    },
                )
            })
            .collect(),
    })
}

impl Predictor for Model {
    fn predict_open(&self, ex: &QAExample) -> Result<Vec<(String, f64)>> {
        let classes = self
            .classes
            .as_ref()
            .ok_or_else(|| Error::ModeMismatch("model has no answer classes".into()))?;
        let ctx = self.tokenize_context(ex)?;
        let q = self.tokenize_query(&ex.question)?;
        let ranked = Model::predict_open(self, &ctx, &q)?;
        Ok(ranked
            .into_iter()
            .map(|(id, p)| (classes.label(id).to_string(), p as f64))
            .collect())
    }

    fn predict_choice_probs(&self, ex: &QAExample) -> Result<Vec<f64>> {
        let choices = ex
            .choices
            .as_ref()
            .ok_or_else(|| Error::ModeMismatch(format!("example {} has no choices", ex.id)))?;
        let ctx = self.tokenize_context(ex)?;
        let q = self.tokenize_query(&ex.question)?;
        let probs = self.predict_choices(&ctx, &q, choices)?;
        Ok(probs.into_iter().map(|p| p as f64).collect())
    }

    fn predict_span_text(&self, ex: &QAExample) -> Result<String> {
        let ctx = self.tokenize_context(ex)?;
        let q = self.tokenize_query(&ex.question)?;
        let span = Model::predict_span(self, &ctx, &q)?;
        Ok(ctx.span_text(span.start, span.end))
    }
}
