use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::tokenize;

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Word and character symbol tables with reserved PAD=0 / UNK=1 rows.
/// Ids are dense and stable across save/load.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    words: Vec<String>,
    word_index: HashMap<String, usize>,
    chars: Vec<String>,
    char_index: HashMap<char, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    words: Vec<String>,
    chars: Vec<String>,
}

impl Vocabulary {
    /// Build from a text corpus: tokens with frequency >= `min_freq` kept,
    /// most frequent first (ties lexicographic), capped at `max_words` corpus
    /// words beyond the reserved entries. All seen characters are kept.
    pub fn build<'a, I>(texts: I, min_freq: usize, max_words: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut word_freq: BTreeMap<String, usize> = BTreeMap::new();
        let mut char_set: BTreeSet<char> = BTreeSet::new();
        let mut saw_any = false;
        for text in texts {
            saw_any = true;
            for tok in tokenize(text) {
                char_set.extend(tok.chars());
                *word_freq.entry(tok).or_insert(0) += 1;
            }
        }
        if !saw_any || word_freq.is_empty() {
            return Err(Error::Data("empty corpus for vocabulary".into()));
        }

        let mut ranked: Vec<(String, usize)> = word_freq.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

        let mut words = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        words.extend(
            ranked
                .into_iter()
                .filter(|(_, f)| *f >= min_freq)
                .take(max_words)
                .map(|(w, _)| w),
        );
        let mut chars = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        chars.extend(char_set.into_iter().map(|c| c.to_string()));
        Self::from_tables(words, chars)
    }

    fn from_tables(words: Vec<String>, chars: Vec<String>) -> Result<Self> {
        if words.first().map(String::as_str) != Some(PAD_TOKEN)
            || words.get(1).map(String::as_str) != Some(UNK_TOKEN)
        {
            return Err(Error::Data("vocabulary must reserve PAD=0, UNK=1".into()));
        }
        let word_index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        let char_index = chars
            .iter()
            .enumerate()
            .skip(2)
            .filter_map(|(i, s)| s.chars().next().map(|c| (c, i)))
            .collect();
        Ok(Vocabulary {
            words,
            word_index,
            chars,
            char_index,
        })
    }

    pub fn word_id(&self, word: &str) -> usize {
        self.word_index.get(word).copied().unwrap_or(UNK_ID)
    }

    pub fn char_id(&self, c: char) -> usize {
        self.char_index.get(&c).copied().unwrap_or(UNK_ID)
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }

    pub fn word_count(&self) -> usize {
        self.words.len()
    }

    pub fn char_count(&self) -> usize {
        self.chars.len()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = VocabFile {
            words: self.words.clone(),
            chars: self.chars.clone(),
        };
        let json = serde_json::to_string_pretty(&file)?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: VocabFile = serde_json::from_str(&raw)?;
        Self::from_tables(file.words, file.chars)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frequency_order_with_reserved_ids() {
        let v = Vocabulary::build(["a a b"], 1, 1000).unwrap();
        assert_eq!(v.words(), &["<pad>", "<unk>", "a", "b"]);
        assert_eq!(v.word_id("a"), 2);
        assert_eq!(v.word_id("b"), 3);
    }

    #[test]
    fn min_freq_cutoff_maps_to_unk() {
        let v = Vocabulary::build(["a a b"], 2, 1000).unwrap();
        assert_eq!(v.words(), &["<pad>", "<unk>", "a"]);
        assert_eq!(v.word_id("b"), UNK_ID);
    }

    #[test]
    fn frequency_ties_break_lexicographically() {
        let v = Vocabulary::build(["c b c b a a a"], 1, 1000).unwrap();
        assert_eq!(v.words(), &["<pad>", "<unk>", "a", "b", "c"]);
    }

    #[test]
    fn max_words_caps_corpus_entries() {
        let v = Vocabulary::build(["a a b c"], 1, 1).unwrap();
        assert_eq!(v.words(), &["<pad>", "<unk>", "a"]);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(Vocabulary::build([], 1, 10).is_err());
        assert!(Vocabulary::build([" "], 1, 10).is_err());
    }

    #[test]
    fn save_load_roundtrip_preserves_ids() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.json");
        let v = Vocabulary::build(["the cat sat on the mat"], 1, 1000).unwrap();
        v.save(&path).unwrap();
        let loaded = Vocabulary::load(&path).unwrap();
        assert_eq!(v.words(), loaded.words());
        for w in ["the", "cat", "sat", "on", "mat"] {
            assert_eq!(v.word_id(w), loaded.word_id(w));
        }
        assert_eq!(v.char_id('t'), loaded.char_id('t'));
    }
}
