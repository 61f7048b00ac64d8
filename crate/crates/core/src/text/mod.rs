//! Text front door: tokenization, answer normalization, context assembly,
//! vocabularies, embeddings, and answer classes.

mod answers;
mod dataset;
mod embeddings;
mod vocab;

pub use answers::AnswerClasses;
pub use dataset::{load_examples, save_examples, QAExample, QType};
pub use embeddings::EmbeddingTable;
pub use vocab::{Vocabulary, PAD_ID, UNK_ID};

use crate::error::{Error, Result};

/// Punctuation split into standalone tokens; apostrophes stay inside tokens.
const SPLIT_PUNCT: &[char] = &['.', ',', '?', '!', ';', ':', '"', '(', ')'];

/// A token plus its byte span in the original text.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSpan {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

/// Lowercased whitespace tokenization with listed punctuation split off as
/// separate tokens. Deterministic; empty text gives an empty list.
pub fn tokenize(text: &str) -> Vec<String> {
    tokenize_with_spans(text).into_iter().map(|t| t.text).collect()
}

pub fn tokenize_with_spans(text: &str) -> Vec<TokenSpan> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut cur_start = 0usize;
    let flush = |cur: &mut String, start: usize, end: usize, out: &mut Vec<TokenSpan>| {
        if !cur.is_empty() {
            out.push(TokenSpan {
                text: std::mem::take(cur),
                start,
                end,
            });
        }
    };
    for (i, ch) in text.char_indices() {
        if ch.is_whitespace() {
            flush(&mut cur, cur_start, i, &mut out);
        } else if SPLIT_PUNCT.contains(&ch) {
            flush(&mut cur, cur_start, i, &mut out);
            out.push(TokenSpan {
                text: ch.to_string(),
                start: i,
                end: i + ch.len_utf8(),
            });
        } else {
            if cur.is_empty() {
                cur_start = i;
            }
            for lc in ch.to_lowercase() {
                cur.push(lc);
            }
        }
    }
    flush(&mut cur, cur_start, text.len(), &mut out);
    out
}

fn depluralize(token: &str) -> &str {
    if token.chars().count() > 3 && token.ends_with('s') && !token.ends_with("ss") {
        &token[..token.len() - 1]
    } else {
        token
    }
}

fn normalize_pass(s: &str) -> String {
    // lowercase, strip punctuation, drop article tokens, collapse whitespace,
    // then naively de-pluralize each token
    let lower = s.to_lowercase();
    let stripped: String = lower
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect();
    stripped
        .split_whitespace()
        .filter(|t| !matches!(*t, "a" | "an" | "the"))
        .map(depluralize)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Answer normalization for string-match evaluation. The rule pass is applied
/// to a fixed point so the result is idempotent even when de-pluralization
/// exposes a new article (e.g. "thes" -> "the" -> "").
pub fn normalize_answer(s: &str) -> String {
    let mut cur = normalize_pass(s);
    loop {
        let next = normalize_pass(&cur);
        if next == cur {
            return cur;
        }
        cur = next;
    }
}

/// Tokens of one sentence with a terminal "." appended when missing.
fn sentence_tokens(sentence: &str) -> Vec<String> {
    let mut toks = tokenize(sentence);
    if !toks.is_empty() && toks.last().map(String::as_str) != Some(".") {
        toks.push(".".to_string());
    }
    toks
}

/// Join description sentences then fact sentences into one context string,
/// sentence-terminated and truncated to `limit` tokens. The output is in
/// canonical tokenized form (lowercase, single spaces).
pub fn assemble_context(descriptions: &[String], facts: &[String], limit: usize) -> Result<String> {
    if limit < 1 {
        return Err(Error::Config("context limit must be >= 1".into()));
    }
    let mut tokens: Vec<String> = Vec::new();
    for s in descriptions.iter().chain(facts) {
        tokens.extend(sentence_tokens(s));
        if tokens.len() >= limit {
            break;
        }
    }
    if tokens.is_empty() {
        return Err(Error::EmptyContext);
    }
    tokens.truncate(limit);
    Ok(tokens.join(" "))
}

/// Where a context token came from: sentence index within the assembled
/// description+fact list, plus byte offsets inside that sentence. The
/// synthetic terminal "." points at the sentence end.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceSpan {
    pub sentence: usize,
    pub start: usize,
    pub end: usize,
}

/// Word ids, per-word character ids, and provenance for one encoded text.
#[derive(Debug, Clone)]
pub struct TokenizedText {
    pub word_ids: Vec<usize>,
    /// Flattened n x max_word_len character ids, PAD-padded per word.
    pub char_ids: Vec<usize>,
    /// true where `char_ids` holds a real character.
    pub char_valid: Vec<bool>,
    pub raw: Vec<String>,
    pub mask: Vec<bool>,
    pub spans: Vec<SourceSpan>,
    pub max_word_len: usize,
}

impl TokenizedText {
    /// Tokenize a sentence list (descriptions then facts) into model inputs,
    /// truncated to `limit` tokens.
    pub fn from_sentences(
        sentences: &[String],
        vocab: &Vocabulary,
        limit: usize,
        max_word_len: usize,
    ) -> Result<Self> {
        if limit < 1 {
            return Err(Error::Config("context limit must be >= 1".into()));
        }
        let mut out = TokenizedText {
            word_ids: Vec::new(),
            char_ids: Vec::new(),
            char_valid: Vec::new(),
            raw: Vec::new(),
            mask: Vec::new(),
            spans: Vec::new(),
            max_word_len,
        };
        'outer: for (si, sentence) in sentences.iter().enumerate() {
            let mut spans = tokenize_with_spans(sentence);
            let needs_dot = spans.last().map(|t| t.text.as_str()) != Some(".");
            if needs_dot && !spans.is_empty() {
                spans.push(TokenSpan {
                    text: ".".into(),
                    start: sentence.len(),
                    end: sentence.len(),
                });
            }
            for tok in spans {
                out.push_token(&tok.text, si, tok.start, tok.end, vocab, max_word_len);
                if out.word_ids.len() == limit {
                    break 'outer;
                }
            }
        }
        if out.word_ids.is_empty() {
            return Err(Error::EmptyContext);
        }
        Ok(out)
    }

    /// Tokenize a free-standing query (question or candidate answer).
    pub fn from_text(text: &str, vocab: &Vocabulary, max_word_len: usize) -> Result<Self> {
        Self::from_sentences(&[text.to_string()], vocab, usize::MAX, max_word_len)
    }

    fn push_token(
        &mut self,
        token: &str,
        sentence: usize,
        start: usize,
        end: usize,
        vocab: &Vocabulary,
        max_word_len: usize,
    ) {
        self.word_ids.push(vocab.word_id(token));
        let mut count = 0usize;
        for c in token.chars().take(max_word_len) {
            self.char_ids.push(vocab.char_id(c));
            self.char_valid.push(true);
            count += 1;
        }
        for _ in count..max_word_len {
            self.char_ids.push(PAD_ID);
            self.char_valid.push(false);
        }
        self.raw.push(token.to_string());
        self.mask.push(true);
        self.spans.push(SourceSpan {
            sentence,
            start,
            end,
        });
    }

    pub fn len(&self) -> usize {
        self.word_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.word_ids.is_empty()
    }

    /// Context text for a decoded token span.
    pub fn span_text(&self, start: usize, end: usize) -> String {
        self.raw[start..=end].join(" ")
    }
}
