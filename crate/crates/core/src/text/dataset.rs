use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The 6W question taxonomy plus a catch-all bucket.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QType {
    What,
    Where,
    When,
    Who,
    Why,
    How,
    Other,
}

impl QType {
    pub const ALL: [QType; 7] = [
        QType::What,
        QType::Where,
        QType::When,
        QType::Who,
        QType::Why,
        QType::How,
        QType::Other,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            QType::What => "what",
            QType::Where => "where",
            QType::When => "when",
            QType::Who => "who",
            QType::Why => "why",
            QType::How => "how",
            QType::Other => "other",
        }
    }

    /// Type inferred from the question's first word, for datasets that omit it.
    pub fn from_question(question: &str) -> QType {
        match crate::text::tokenize(question).first().map(String::as_str) {
            Some("what") => QType::What,
            Some("where") => QType::Where,
            Some("when") => QType::When,
            Some("who") => QType::Who,
            Some("why") => QType::Why,
            Some("how") => QType::How,
            _ => QType::Other,
        }
    }
}

/// One question record: context sources, question, gold answers, and the
/// optional multiple-choice block.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QAExample {
    pub id: String,
    #[serde(default)]
    pub description_sentences: Vec<String>,
    #[serde(default)]
    pub facts: Vec<String>,
    pub question: String,
    #[serde(default)]
    pub answers: Vec<String>,
    pub qtype: QType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choices: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correct_index: Option<usize>,
    /// Detected visual concepts used by fact retrieval; provided as data.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub visual_concepts: Vec<String>,
}

impl QAExample {
    /// Structural invariants shared by every mode.
    pub fn validate(&self) -> Result<()> {
        if self.description_sentences.is_empty() && self.facts.is_empty() {
            return Err(Error::Data(format!(
                "example {}: needs description sentences or facts",
                self.id
            )));
        }
        if self.question.trim().is_empty() {
            return Err(Error::Data(format!("example {}: empty question", self.id)));
        }
        match (&self.choices, self.correct_index) {
            (None, None) => {
                if self.answers.is_empty() {
                    return Err(Error::Data(format!(
                        "example {}: needs gold answers or choices",
                        self.id
                    )));
                }
            }
            (Some(choices), Some(idx)) => {
                if choices.len() != 4 {
                    return Err(Error::Data(format!(
                        "example {}: expected exactly 4 choices, got {}",
                        self.id,
                        choices.len()
                    )));
                }
                if idx > 3 {
                    return Err(Error::Data(format!(
                        "example {}: correct_index {idx} out of 0..3",
                        self.id
                    )));
                }
            }
            _ => {
                return Err(Error::Data(format!(
                    "example {}: choices and correct_index must appear together",
                    self.id
                )));
            }
        }
        Ok(())
    }

    /// Gold answer strings; for multiple choice this is the correct choice.
    pub fn gold_answers(&self) -> Vec<&str> {
        if let (Some(choices), Some(idx)) = (&self.choices, self.correct_index) {
            vec![choices[idx].as_str()]
        } else {
            self.answers.iter().map(String::as_str).collect()
        }
    }
}

/// Load a JSONL dataset with line-numbered schema errors and duplicate id
/// detection.
pub fn load_examples(path: &Path) -> Result<Vec<QAExample>> {
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ex: QAExample = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        ex.validate().map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if !seen.insert(ex.id.clone()) {
            return Err(Error::Data(format!("duplicate example id {}", ex.id)));
        }
        out.push(ex);
    }
    if out.is_empty() {
        return Err(Error::Data(format!("no examples in {}", path.display())));
    }
    Ok(out)
}

pub fn save_examples(path: &Path, examples: &[QAExample]) -> Result<()> {
    let mut buf = Vec::new();
    for ex in examples {
        serde_json::to_writer(&mut buf, ex)?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}
