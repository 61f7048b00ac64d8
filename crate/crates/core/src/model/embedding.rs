use crate::error::Result;
use crate::model::Bound;
use crate::tensor::{Graph, NodeId, Real, Tensor};
use crate::text::TokenizedText;

/// Per-word embedding: the word-table row concatenated with the columnwise
/// max over the word's character vectors (PAD characters excluded; an
/// all-PAD word gets a zero character part).
pub fn embed_tokens<T: Real>(
    g: &Graph<T>,
    bound: &Bound<T>,
    text: &TokenizedText,
) -> Result<NodeId> {
    let word_rows = g.gather(bound.id("embed.word_table"), &text.word_ids)?;
    let char_rows = g.gather(bound.id("embed.char_table"), &text.char_ids)?;
    let char_max = g.max_pool_rows(char_rows, text.max_word_len, &text.char_valid)?;
    g.concat(&[word_rows, char_max], 1)
}

/// Two gated layers: t = sigmoid(x·Wg + bg), y = t ⊙ relu(x·Wt + bt) + (1-t) ⊙ x.
pub fn highway<T: Real>(g: &Graph<T>, bound: &Bound<T>, x: NodeId) -> Result<NodeId> {
    let mut cur = x;
    for layer in 0..2 {
        let p = format!("embed.highway{layer}");
        cur = highway_layer(
            g,
            cur,
            bound.id(&format!("{p}.transform.w")),
            bound.id(&format!("{p}.transform.b")),
            bound.id(&format!("{p}.gate.w")),
            bound.id(&format!("{p}.gate.b")),
        )?;
    }
    Ok(cur)
}

pub(crate) fn highway_layer<T: Real>(
    g: &Graph<T>,
    x: NodeId,
    wt: NodeId,
    bt: NodeId,
    wg: NodeId,
    bg: NodeId,
) -> Result<NodeId> {
    let gate = g.sigmoid(g.add(g.matmul(x, wg)?, bg)?)?;
    let transform = g.relu(g.add(g.matmul(x, wt)?, bt)?)?;
    let ones = g.leaf(Tensor::filled(g.shape(gate), T::one()));
    let carry = g.sub(ones, gate)?;
    g.add(g.mul(gate, transform)?, g.mul(carry, x)?)
}
