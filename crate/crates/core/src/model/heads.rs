use rand::Rng;

use crate::error::{Error, Result};
use crate::model::Bound;
use crate::tensor::{Graph, NodeId, Real, Tensor};

/// Start/end position distributions plus the logits they came from; losses
/// are computed from the logits for stability.
#[derive(Debug)]
pub struct SpanOutputs {
    pub start_logits: NodeId,
    pub end_logits: NodeId,
    pub p_start: NodeId,
    pub p_end: NodeId,
}

/// Class distribution over answer labels plus its logits.
#[derive(Debug)]
pub struct ClassOutputs {
    pub logits: NodeId,
    pub probs: NodeId,
}

/// A decoded answer span with its start*end probability score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpanPrediction {
    pub start: usize,
    pub end: usize,
    pub score: f64,
}

/// Per-position start scores from [M0; M1] and end scores from [M0; M2],
/// masked-softmaxed over context positions.
pub fn span_head<T: Real>(
    g: &Graph<T>,
    m0: NodeId,
    m1: NodeId,
    m2: NodeId,
    mask: &[bool],
    w_start: NodeId,
    w_end: NodeId,
) -> Result<SpanOutputs> {
    if !mask.iter().any(|&m| m) {
        return Err(Error::Mask("fully masked context in span head".into()));
    }
    let n = g.shape(m0)[0];
    let start_scores = g.matmul(g.concat(&[m0, m1], 1)?, w_start)?;
    let end_scores = g.matmul(g.concat(&[m0, m2], 1)?, w_end)?;
    let start_logits = g.reshape(start_scores, vec![1, n])?;
    let end_logits = g.reshape(end_scores, vec![1, n])?;
    Ok(SpanOutputs {
        start_logits,
        end_logits,
        p_start: g.softmax_masked(start_logits, Some(mask))?,
        p_end: g.softmax_masked(end_logits, Some(mask))?,
    })
}

/// Highest p_start[i]*p_end[j] over pairs with i <= j <= i + max_span, ties
/// broken by smaller i then smaller j.
pub fn decode_span<T: Real>(p_start: &[T], p_end: &[T], max_span: usize) -> SpanPrediction {
    let n = p_start.len();
    let mut best = SpanPrediction {
        start: 0,
        end: 0,
        score: f64::NEG_INFINITY,
    };
    for j in 0..n {
        let lo = j.saturating_sub(max_span);
        for i in lo..=j {
            let score = p_start[i].into_f64() * p_end[j].into_f64();
            if score > best.score {
                best = SpanPrediction {
                    start: i,
                    end: j,
                    score,
                };
            }
        }
    }
    best
}

/// Pooled vector feeding the triplet-scoring MLP: columnwise max over
/// unmasked positions, then parameter-free standardization (zero mean, unit
/// variance over the d components). Peak pooling keeps the single-position
/// match response that mean pooling would bury; the standardization keeps
/// the residual stream's accumulated scale from saturating the scorer.
pub fn pooled_query_vector<T: Real>(g: &Graph<T>, x: NodeId, mask: &[bool]) -> Result<NodeId> {
    let shape = g.shape(x);
    if shape.len() != 2 || shape[0] != mask.len() {
        return Err(Error::Mask(format!(
            "mask length {} does not fit shape {shape:?}",
            mask.len()
        )));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::Mask("pooling over a fully masked axis".into()));
    }
    let (n, d) = (shape[0], shape[1]);
    let pooled = g.max_pool_rows(x, n, mask)?;
    let ones = g.leaf(Tensor::filled(vec![d], T::one()));
    let zeros = g.leaf(Tensor::zeros(vec![d]));
    g.layer_norm(pooled, ones, zeros, 1e-6)
}

/// Mean over unmasked rows, as a 1 x d matrix.
pub fn masked_mean_rows<T: Real>(g: &Graph<T>, x: NodeId, mask: &[bool]) -> Result<NodeId> {
    let shape = g.shape(x);
    if shape.len() != 2 || shape[0] != mask.len() {
        return Err(Error::Mask(format!(
            "mask length {} does not fit shape {shape:?}",
            mask.len()
        )));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::Mask("mean over a fully masked axis".into()));
    }
    let w = T::from_f64(1.0 / count as f64);
    let weights: Vec<T> = mask
        .iter()
        .map(|&m| if m { w } else { T::zero() })
        .collect();
    let row = g.leaf(Tensor::new(vec![1, mask.len()], weights)?);
    g.matmul(row, x)
}

/// Open-ended classification: masked mean pooling of M0, M1, M2, then a
/// K x 3d projection and softmax over answer classes.
pub fn classification_head<T: Real>(
    g: &Graph<T>,
    m0: NodeId,
    m1: NodeId,
    m2: NodeId,
    mask: &[bool],
    w: NodeId,
) -> Result<ClassOutputs> {
    let v0 = masked_mean_rows(g, m0, mask)?;
    let v1 = masked_mean_rows(g, m1, mask)?;
    let v2 = masked_mean_rows(g, m2, mask)?;
    let v = g.concat(&[v0, v1, v2], 1)?;
    let k = g.shape(w)[0];
    let logits_col = g.matmul(w, g.transpose(v)?)?;
    let logits = g.reshape(logits_col, vec![1, k])?;
    Ok(ClassOutputs {
        logits,
        probs: g.softmax_masked(logits, None)?,
    })
}

/// Triplet-scoring MLP over the pooled question-pass and answer-pass vectors:
/// e = w2 · relu(w1 · [v0a; v1a; v0q; v1q] + b1) + b2, with fixed 0.5 dropout
/// on the hidden layer at training time. Returns the raw score node.
pub fn multichoice_head<T: Real, R: Rng>(
    g: &Graph<T>,
    bound: &Bound<T>,
    v0q: NodeId,
    v1q: NodeId,
    v0a: NodeId,
    v1a: NodeId,
    training: bool,
    rng: &mut R,
) -> Result<NodeId> {
    let x = g.concat(&[v0a, v1a, v0q, v1q], 1)?;
    let hidden = g.relu(g.add(g.matmul(x, bound.id("mc.w1"))?, bound.id("mc.b1"))?)?;
    let hidden = g.dropout(hidden, 0.5, training, rng)?;
    g.add(g.matmul(hidden, bound.id("mc.w2"))?, bound.id("mc.b2"))
}

/// Span training loss: cross entropy of the gold start plus the gold end,
/// both over unmasked context positions.
pub fn span_loss<T: Real>(
    g: &Graph<T>,
    outputs: &SpanOutputs,
    mask: &[bool],
    gold_start: usize,
    gold_end: usize,
) -> Result<NodeId> {
    let n = g.shape(outputs.start_logits)[1];
    if gold_start >= n || gold_end >= n || gold_start > gold_end {
        return Err(Error::Index(format!(
            "gold span ({gold_start}, {gold_end}) out of range for length {n}"
        )));
    }
    let start = g.cross_entropy(outputs.start_logits, Some(mask), gold_start)?;
    let end = g.cross_entropy(outputs.end_logits, Some(mask), gold_end)?;
    g.add(start, end)
}
