//! Deterministic synthetic fixtures: a span copy task, a templated
//! open-ended set, a templated multiple-choice set, and a small fact base
//! with retrieval queries. These ship in the repository so training and
//! acceptance runs need no external downloads.

use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::retrieval::Fact;
use crate::text::{save_examples, QAExample, QType};

const COLORS: [&str; 10] = [
    "red", "blue", "green", "yellow", "black", "white", "purple", "orange", "brown", "gray",
];
const NOUNS: [&str; 12] = [
    "cat", "dog", "hat", "train", "tree", "cup", "bird", "boat", "lamp", "book", "chair", "kite",
];

fn fillers() -> Vec<String> {
    (0..40).map(|i| format!("f{i:02}")).collect()
}

fn cues() -> Vec<String> {
    (0..10).map(|i| format!("k{i:02}")).collect()
}

fn answer_words() -> Vec<String> {
    (0..30).map(|i| format!("a{i:02}")).collect()
}

/// Copy-task example: a ~20-token context with a cue followed by a two-token
/// answer span; the question names the cue.
fn span_example<R: Rng>(id: usize, rng: &mut R) -> QAExample {
    let fillers = fillers();
    let cues = cues();
    let answers = answer_words();
    let cue = cues.choose(rng).unwrap().clone();
    let a1 = answers.choose(rng).unwrap().clone();
    let a2 = answers.choose(rng).unwrap().clone();
    let mut tokens: Vec<String> = (0..16)
        .map(|_| fillers.choose(rng).unwrap().clone())
        .collect();
    let pos = rng.random_range(0..=tokens.len() - 3);
    tokens.splice(pos..pos, [cue.clone(), a1.clone(), a2.clone()]);
    QAExample {
        id: format!("span{id}"),
        description_sentences: vec![tokens.join(" ")],
        facts: vec![],
        question: format!("what follows {cue}"),
        answers: vec![format!("{a1} {a2}")],
        qtype: QType::What,
        choices: None,
        correct_index: None,
        visual_concepts: vec![],
    }
}

/// 256 train + 64 held-out copy-task examples.
pub fn span_fixture(seed: u64) -> (Vec<QAExample>, Vec<QAExample>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train = (0..256).map(|i| span_example(i, &mut rng)).collect();
    let heldout = (1000..1064).map(|i| span_example(i, &mut rng)).collect();
    (train, heldout)
}

/// Open-ended example: two colored objects in the scene, the question asks
/// about one of them.
fn open_example<R: Rng>(id: usize, rng: &mut R) -> QAExample {
    let mut nouns: Vec<&str> = NOUNS.to_vec();
    nouns.shuffle(rng);
    let (n1, n2) = (nouns[0], nouns[1]);
    let c1 = *COLORS.choose(rng).unwrap();
    let mut c2 = *COLORS.choose(rng).unwrap();
    while c2 == c1 {
        c2 = *COLORS.choose(rng).unwrap();
    }
    let ask_first = rng.random_range(0..2) == 0;
    let (noun, color) = if ask_first { (n1, c1) } else { (n2, c2) };
    QAExample {
        id: format!("open{id}"),
        description_sentences: vec![format!("the {n1} is {c1}"), format!("the {n2} is {c2}")],
        facts: vec![],
        question: format!("what color is the {noun}"),
        answers: vec![color.to_string()],
        qtype: QType::What,
        choices: None,
        correct_index: None,
        visual_concepts: vec![],
    }
}

/// The bundled 32-example open-ended training set (10 answer classes).
pub fn open_ended_fixture(seed: u64) -> Vec<QAExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..32).map(|i| open_example(i, &mut rng)).collect()
}

/// Multiple-choice example: a two-object colored scene with full-statement
/// choices. The correct choice restates the questioned object's sentence
/// verbatim; distractors are statements about objects and colors absent from
/// the scene, so ranking them means checking each statement against the
/// scene.
fn mc_example<R: Rng>(id: usize, rng: &mut R) -> QAExample {
    let mut nouns: Vec<&str> = NOUNS.to_vec();
    nouns.shuffle(rng);
    let (n1, n2) = (nouns[0], nouns[1]);
    let mut colors: Vec<&str> = COLORS.to_vec();
    colors.shuffle(rng);
    let (c1, c2) = (colors[0], colors[1]);
    let ask_first = rng.random_range(0..2) == 0;
    let (noun, gold) = if ask_first { (n1, c1) } else { (n2, c2) };
    // absent nouns and colors for the off-scene statements
    let mut choices: Vec<String> = (0..3)
        .map(|i| format!("the {} is {}", nouns[2 + i], colors[2 + i]))
        .collect();
    let correct = rng.random_range(0..4usize);
    choices.insert(correct, format!("the {noun} is {gold}"));
    QAExample {
        id: format!("mc{id}"),
        description_sentences: vec![format!("the {n1} is {c1}"), format!("the {n2} is {c2}")],
        facts: vec![],
        question: format!("what color is the {noun}"),
        answers: vec![],
        qtype: QType::What,
        choices: Some(choices),
        correct_index: Some(correct),
        visual_concepts: vec![],
    }
}

/// 192 train + 32 validation + 32 held-out multiple-choice examples.
pub fn mc_fixture(seed: u64) -> (Vec<QAExample>, Vec<QAExample>, Vec<QAExample>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train = (0..192).map(|i| mc_example(i, &mut rng)).collect();
    let val = (1000..1032).map(|i| mc_example(i, &mut rng)).collect();
    let heldout = (2000..2032).map(|i| mc_example(i, &mut rng)).collect();
    (train, val, heldout)
}

fn fact(subject: &str, relation: &str, object: &str, sentence: &str) -> Fact {
    Fact {
        subject: subject.into(),
        relation: relation.into(),
        object: object.into(),
        sentence: sentence.into(),
    }
}

/// The bundled 20-fact knowledge base.
pub fn fact_base() -> Vec<Fact> {
    vec![
        fact("water", "category", "drink", "Water belongs to the category of drink"),
        fact("apple", "category", "fruit", "An apple belongs to the category of fruit"),
        fact("dog", "is_a", "animal", "A dog is a kind of animal"),
        fact("cat", "capable_of", "catching mice", "A cat is capable of catching mice"),
        fact("knife", "used_for", "cutting", "A knife is used for cutting food"),
        fact("umbrella", "used_for", "rain", "An umbrella protects people from rain"),
        fact("bicycle", "has_part", "wheel", "A bicycle has two wheels"),
        fact("bird", "capable_of", "flying", "Most birds are capable of flying"),
        fact("fire", "property", "hot", "Fire is very hot"),
        fact("ice", "property", "cold", "Ice is frozen water and feels cold"),
        fact("piano", "is_a", "instrument", "A piano is a musical instrument"),
        fact("banana", "property", "yellow", "A ripe banana is yellow"),
        fact("car", "used_for", "transport", "A car is used for transporting people"),
        fact("stove", "used_for", "cooking", "A stove is used for cooking meals"),
        fact("bee", "capable_of", "making honey", "Bees are capable of making honey"),
        fact("soccer", "is_a", "sport", "Soccer is a popular sport played with a ball"),
        fact("desert", "property", "dry", "A desert is a very dry place"),
        fact("whale", "lives_in", "ocean", "Whales live in the ocean"),
        fact("bread", "made_from", "flour", "Bread is made from flour"),
        fact("candle", "used_for", "light", "A candle gives light when it burns"),
    ]
}

/// One retrieval check: the query must place the gold fact in its top-3.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetrievalQuery {
    pub question: String,
    pub concepts: Vec<String>,
    pub gold_fact_index: usize,
}

/// Ten question/concept fixtures over [`fact_base`].
pub fn retrieval_queries() -> Vec<RetrievalQuery> {
    let q = |question: &str, concepts: &[&str], gold: usize| RetrievalQuery {
        question: question.into(),
        concepts: concepts.iter().map(|s| s.to_string()).collect(),
        gold_fact_index: gold,
    };
    vec![
        q("what category does water belong to", &["water"], 0),
        q("what kind of food is an apple", &["apple"], 1),
        q("what animal is a dog", &["dog"], 2),
        q("what can a cat catch", &["cat"], 3),
        q("what is a knife used for", &["knife"], 4),
        q("what protects from rain", &["umbrella"], 5),
        q("how many wheels does a bicycle have", &["bicycle"], 6),
        q("which creature can fly", &["bird", "flying"], 7),
        q("where do whales live", &["whale", "ocean"], 17),
        q("what is bread made from", &["bread"], 18),
    ]
}

/// Write every fixture file into `dir`.
pub fn write_all(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| crate::error::Error::io(dir, e))?;
    let (span_train, span_heldout) = span_fixture(2024);
    save_examples(&dir.join("span_train.jsonl"), &span_train)?;
    save_examples(&dir.join("span_heldout.jsonl"), &span_heldout)?;
    save_examples(&dir.join("open_ended_train.jsonl"), &open_ended_fixture(2024))?;
    let (mc_train, mc_val, mc_heldout) = mc_fixture(2024);
    save_examples(&dir.join("mc_train.jsonl"), &mc_train)?;
    save_examples(&dir.join("mc_val.jsonl"), &mc_val)?;
    save_examples(&dir.join("mc_heldout.jsonl"), &mc_heldout)?;
    crate::retrieval::save_facts(&dir.join("facts.jsonl"), &fact_base())?;
    let queries = serde_json::to_string_pretty(&retrieval_queries())?;
    std::fs::write(dir.join("retrieval_queries.json"), queries)
        .map_err(|e| crate::error::Error::io(dir, e))?;
    Ok(())
}
