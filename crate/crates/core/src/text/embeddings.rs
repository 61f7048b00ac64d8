use std::fs;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::text::vocab::{Vocabulary, PAD_ID, UNK_ID};

/// Gap-fill range for rows missing from a pre-trained file (UNK included).
const INIT_RANGE: f32 = 0.05;
/// Fallback tables train from scratch; they start at a scale the encoder's
/// positional signal does not drown out.
const RANDOM_TABLE_RANGE: f32 = 0.5;

/// Embedding rows aligned with a vocabulary, plus a per-row trainability mask.
/// The PAD row is identically zero and never trainable.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    rows: Tensor<f32>,
    trainable: Vec<bool>,
}

impl EmbeddingTable {
    /// Load pre-trained word vectors in text format (word then `dim` reals per
    /// line). Rows found in the file are copied and frozen unless `fine_tune`
    /// is set; missing words and UNK are drawn from uniform(-0.05, 0.05) with
    /// the run rng; PAD stays zero and is never trainable.
    pub fn load_pretrained<R: Rng>(
        path: &Path,
        vocab: &Vocabulary,
        dim: usize,
        fine_tune: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut file_vectors = std::collections::HashMap::new();
        for (i, line) in raw.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split_whitespace();
            let word = fields.next().expect("non-empty line");
            let values: Vec<&str> = fields.collect();
            if values.len() != dim {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("expected {dim} values after the word, got {}", values.len()),
                });
            }
            let mut vec = Vec::with_capacity(dim);
            for v in values {
                vec.push(v.parse::<f32>().map_err(|e| Error::Parse {
                    line: i + 1,
                    message: format!("bad float {v:?}: {e}"),
                })?);
            }
            file_vectors.insert(word.to_string(), vec);
        }

        let v = vocab.word_count();
        let mut data = vec![0.0f32; v * dim];
        let mut trainable = vec![false; v];
        for id in 0..v {
            if id == PAD_ID {
                continue; // stays zero, frozen
            }
            let word = vocab.word(id);
            match (id == UNK_ID, file_vectors.get(word)) {
                (false, Some(vec)) => {
                    data[id * dim..(id + 1) * dim].copy_from_slice(vec);
                    trainable[id] = fine_tune;
                }
                _ => {
                    for c in 0..dim {
                        data[id * dim + c] = rng.random_range(-INIT_RANGE..INIT_RANGE);
                    }
                    trainable[id] = id == UNK_ID || fine_tune;
                }
            }
        }
        Ok(EmbeddingTable {
            rows: Tensor::new(vec![v, dim], data)?,
            trainable,
        })
    }

    /// Random table with every non-PAD row trainable: the fallback when no
    /// pre-trained vectors are configured, and the character table init.
    pub fn random<R: Rng>(rows: usize, dim: usize, rng: &mut R) -> Self {
        let mut data = vec![0.0f32; rows * dim];
        let mut trainable = vec![true; rows];
        trainable[PAD_ID] = false;
        for id in 0..rows {
            if id == PAD_ID {
                continue;
            }
            for c in 0..dim {
                data[id * dim + c] = rng.random_range(-RANDOM_TABLE_RANGE..RANDOM_TABLE_RANGE);
            }
        }
        EmbeddingTable {
            rows: Tensor::new(vec![rows, dim], data).expect("table shape"),
            trainable,
        }
    }

    pub fn rows(&self) -> &Tensor<f32> {
        &self.rows
    }

    pub fn dim(&self) -> usize {
        self.rows.shape()[1]
    }

    pub fn trainable_rows(&self) -> &[bool] {
        &self.trainable
    }
}
