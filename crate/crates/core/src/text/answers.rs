use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::{normalize_answer, QAExample};

/// Top-K answer classes for the open-ended head, keyed by normalized answer
/// string. Ids are assigned by descending frequency with lexicographic
/// tie-break.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnswerClasses {
    labels: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl AnswerClasses {
    pub fn build(examples: &[QAExample], k: usize) -> Result<Self> {
        if k < 1 {
            return Err(Error::Config("answer class count must be >= 1".into()));
        }
        let mut freq: BTreeMap<String, usize> = BTreeMap::new();
        for ex in examples {
            for gold in ex.gold_answers() {
                let norm = normalize_answer(gold);
                if !norm.is_empty() {
                    *freq.entry(norm).or_insert(0) += 1;
                }
            }
        }
        let mut ranked: Vec<(String, usize)> = freq.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let labels: Vec<String> = ranked.into_iter().take(k).map(|(s, _)| s).collect();
        Ok(Self::from_labels(labels))
    }

    fn from_labels(labels: Vec<String>) -> Self {
        let index = labels
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i))
            .collect();
        AnswerClasses { labels, index }
    }

    /// Class id of an answer string after normalization, if mapped.
    pub fn class_of(&self, answer: &str) -> Option<usize> {
        self.index.get(&normalize_answer(answer)).copied()
    }

    /// Training target: the first gold answer that falls inside the map.
    /// Examples without one are excluded from the classification loss but
    /// stay in evaluation.
    pub fn training_target(&self, ex: &QAExample) -> Option<usize> {
        ex.gold_answers().iter().find_map(|a| self.class_of(a))
    }

    pub fn label(&self, id: usize) -> &str {
        &self.labels[id]
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: AnswerClasses = serde_json::from_str(&raw)?;
        Ok(Self::from_labels(file.labels))
    }
}
