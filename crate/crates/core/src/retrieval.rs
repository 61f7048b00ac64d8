//! Supporting-fact retrieval: an inverted keyword index over a fact base,
//! scored by weighted token overlap with the question and the caller-supplied
//! visual concepts.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::{assemble_context, normalize_answer, tokenize};

/// Tokens too common to carry retrieval signal.
const STOPWORDS: &[&str] = &["a", "an", "the", "is", "of", "to"];

/// One knowledge triple with its natural-language sentence.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Fact {
    pub subject: String,
    pub relation: String,
    pub object: String,
    pub sentence: String,
}

impl Fact {
    pub fn validate(&self) -> Result<()> {
        if self.subject.trim().is_empty()
            || self.object.trim().is_empty()
            || self.sentence.trim().is_empty()
        {
            return Err(Error::Data(
                "fact fields subject/object/sentence must be non-empty".into(),
            ));
        }
        Ok(())
    }
}

/// A retrieved fact with its overlap score.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredFact {
    pub fact_id: usize,
    pub score: usize,
    pub fact: Fact,
}

/// Inverted map from normalized content token to fact ids.
#[derive(Debug, Clone)]
pub struct FactIndex {
    facts: Vec<Fact>,
    fact_tokens: Vec<BTreeSet<String>>,
    postings: HashMap<String, Vec<usize>>,
}

/// Normalized content tokens of a text: tokenizer rules, then answer
/// normalization per token, stopwords dropped.
pub fn content_tokens(text: &str) -> BTreeSet<String> {
    tokenize(text)
        .iter()
        .map(|t| normalize_answer(t))
        .filter(|t| !t.is_empty() && !STOPWORDS.contains(&t.as_str()))
        .collect()
}

impl FactIndex {
    /// Index subject, relation, object, and sentence tokens of every fact.
    /// Duplicate facts keep separate ids; de-duplication is the caller's call.
    pub fn build(facts: Vec<Fact>) -> Result<FactIndex> {
        if facts.is_empty() {
            return Err(Error::Data("cannot index an empty fact list".into()));
        }
        for f in &facts {
            f.validate()?;
        }
        let mut fact_tokens = Vec::with_capacity(facts.len());
        let mut postings: HashMap<String, Vec<usize>> = HashMap::new();
        for (id, fact) in facts.iter().enumerate() {
            let mut tokens = BTreeSet::new();
            for field in [&fact.subject, &fact.relation, &fact.object, &fact.sentence] {
                tokens.extend(content_tokens(field));
            }
            for tok in &tokens {
                postings.entry(tok.clone()).or_default().push(id);
            }
            fact_tokens.push(tokens);
        }
        Ok(FactIndex {
            facts,
            fact_tokens,
            postings,
        })
    }

    pub fn len(&self) -> usize {
        self.facts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.facts.is_empty()
    }

    pub fn fact(&self, id: usize) -> &Fact {
        &self.facts[id]
    }

    pub fn tokens_of(&self, id: usize) -> &BTreeSet<String> {
        &self.fact_tokens[id]
    }

    /// Top-k facts by weighted overlap: question-token matches count once,
    /// visual-concept matches twice. Zero-score facts are excluded; ties
    /// resolve to the lower fact id. May return fewer than k.
    pub fn retrieve_top_k(
        &self,
        question: &str,
        visual_concepts: &[String],
        k: usize,
    ) -> Vec<ScoredFact> {
        if k == 0 {
            return Vec::new();
        }
        let q_tokens = content_tokens(question);
        let mut concept_tokens = BTreeSet::new();
        for c in visual_concepts {
            concept_tokens.extend(content_tokens(c));
        }
        let mut candidates = BTreeSet::new();
        for tok in q_tokens.iter().chain(&concept_tokens) {
            if let Some(ids) = self.postings.get(tok) {
                candidates.extend(ids.iter().copied());
            }
        }
        let mut scored: Vec<ScoredFact> = candidates
            .into_iter()
            .filter_map(|id| {
                let toks = &self.fact_tokens[id];
                let q_overlap = q_tokens.intersection(toks).count();
                let c_overlap = concept_tokens.intersection(toks).count();
                let score = q_overlap + 2 * c_overlap;
                (score > 0).then(|| ScoredFact {
                    fact_id: id,
                    score,
                    fact: self.facts[id].clone(),
                })
            })
            .collect();
        scored.sort_by(|a, b| b.score.cmp(&a.score).then(a.fact_id.cmp(&b.fact_id)));
        scored.truncate(k);
        scored
    }
}

/// Combine ranked fact sentences into one paragraph under the context
/// truncation rules.
pub fn facts_to_paragraph(facts: &[ScoredFact], limit: usize) -> Result<String> {
    let sentences: Vec<String> = facts.iter().map(|f| f.fact.sentence.clone()).collect();
    assemble_context(&[], &sentences, limit)
}

/// Load a JSONL fact base, one fact per line.
pub fn load_facts(path: &Path) -> Result<Vec<Fact>> {
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fact: Fact = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        fact.validate().map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(fact);
    }
    if out.is_empty() {
        return Err(Error::Data(format!("no facts in {}", path.display())));
    }
    Ok(out)
}

pub fn save_facts(path: &Path, facts: &[Fact]) -> Result<()> {
    let mut buf = String::new();
    for f in facts {
        buf.push_str(&serde_json::to_string(f)?);
        buf.push('\n');
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}
