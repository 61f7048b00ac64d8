use rand::Rng;

use crate::error::{Error, Result};
use crate::model::Bound;
use crate::tensor::{Graph, NodeId, Real, Tensor};

const LN_EPS: f64 = 1e-6;

/// Structure of one encoder stack (embedding encoder or model encoder) plus
/// the parameter name prefix its weights live under.
#[derive(Debug, Clone)]
pub struct EncoderStack {
    pub prefix: &'static str,
    pub blocks: usize,
    pub conv_layers: usize,
    pub kernel: usize,
    pub heads: usize,
    pub dim: usize,
    pub ff_hidden: usize,
    pub dropout: f64,
}

/// Sinusoidal positions: PE[pos, 2i] = sin(pos / 10000^(2i/d)),
/// PE[pos, 2i+1] = cos of the same angle. Requires even d.
pub fn positional_encoding<T: Real>(n: usize, d: usize) -> Result<Tensor<T>> {
    if d % 2 != 0 {
        return Err(Error::Config(format!(
            "positional encoding needs even width, got {d}"
        )));
    }
    let mut data = vec![T::zero(); n * d];
    for pos in 0..n {
        for i in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            data[pos * d + 2 * i] = T::from_f64(angle.sin());
            data[pos * d + 2 * i + 1] = T::from_f64(angle.cos());
        }
    }
    Tensor::new(vec![n, d], data)
}

/// Column mask (n x 1) that zeroes masked positions when multiplied in.
fn mask_column<T: Real>(g: &Graph<T>, mask: &[bool]) -> NodeId {
    let data = mask
        .iter()
        .map(|&m| if m { T::one() } else { T::zero() })
        .collect();
    g.leaf(Tensor::new(vec![mask.len(), 1], data).expect("mask column"))
}

/// Depthwise convolution, 1x1 pointwise mix, bias, relu; masked positions are
/// zeroed on both input and output so nothing flows across the mask.
pub fn depthwise_separable_conv<T: Real>(
    g: &Graph<T>,
    x: NodeId,
    mask: &[bool],
    depthwise: NodeId,
    pointwise: NodeId,
    bias: NodeId,
) -> Result<NodeId> {
    let mcol = mask_column(g, mask);
    let gated = g.mul(x, mcol)?;
    let conv = g.depthwise_conv(gated, depthwise)?;
    let mixed = g.add(g.matmul(conv, pointwise)?, bias)?;
    let activated = g.relu(mixed)?;
    g.mul(activated, mcol)
}

/// Scaled dot-product self-attention with `heads` heads over the key mask.
pub fn multi_head_self_attention<T: Real>(
    g: &Graph<T>,
    x: NodeId,
    mask: &[bool],
    wq: NodeId,
    wk: NodeId,
    wv: NodeId,
    wo: NodeId,
    heads: usize,
) -> Result<NodeId> {
    let d = g.shape(x)[1];
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!(
            "width {d} not divisible by {heads} heads"
        )));
    }
    let dh = d / heads;
    let q = g.matmul(x, wq)?;
    let k = g.matmul(x, wk)?;
    let v = g.matmul(x, wv)?;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let mut head_outputs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.narrow(q, 1, h * dh, dh)?;
        let kh = g.narrow(k, 1, h * dh, dh)?;
        let vh = g.narrow(v, 1, h * dh, dh)?;
        let scores = g.scale(g.matmul(qh, g.transpose(kh)?)?, scale)?;
        let weights = g.softmax_masked(scores, Some(mask))?;
        head_outputs.push(g.matmul(weights, vh)?);
    }
    let merged = g.concat(&head_outputs, 1)?;
    g.matmul(merged, wo)
}

fn layer_norm_at<T: Real>(
    g: &Graph<T>,
    bound: &Bound<T>,
    prefix: &str,
    x: NodeId,
) -> Result<NodeId> {
    g.layer_norm(
        x,
        bound.id(&format!("{prefix}.ln.gain")),
        bound.id(&format!("{prefix}.ln.bias")),
        LN_EPS,
    )
}

/// One full encoder stack: add positional encoding, then per block run the
/// convolution, self-attention, and feed-forward sublayers, each pre-normed
/// inside its residual branch.
pub fn encoder_forward<T: Real, R: Rng>(
    g: &Graph<T>,
    bound: &Bound<T>,
    stack: &EncoderStack,
    x: NodeId,
    mask: &[bool],
    training: bool,
    rng: &mut R,
) -> Result<NodeId> {
    let shape = g.shape(x);
    if shape.len() != 2 || shape[1] != stack.dim {
        return Err(Error::Shape {
            op: "encoder_forward",
            lhs: shape,
            rhs: vec![mask.len(), stack.dim],
        });
    }
    let n = shape[0];
    if mask.len() != n {
        return Err(Error::Mask(format!("mask length {} != rows {n}", mask.len())));
    }
    let pe = g.leaf(positional_encoding(n, stack.dim)?);
    let mut cur = g.add(x, pe)?;
    for b in 0..stack.blocks {
        for l in 0..stack.conv_layers {
            let p = format!("{}.b{b}.conv{l}", stack.prefix);
            let normed = layer_norm_at(g, bound, &p, cur)?;
            let branch = depthwise_separable_conv(
                g,
                normed,
                mask,
                bound.id(&format!("{p}.depthwise")),
                bound.id(&format!("{p}.pointwise")),
                bound.id(&format!("{p}.bias")),
            )?;
            let branch = g.dropout(branch, stack.dropout, training, rng)?;
            cur = g.add(cur, branch)?;
        }
        let p = format!("{}.b{b}.attn", stack.prefix);
        let normed = layer_norm_at(g, bound, &p, cur)?;
        let branch = multi_head_self_attention(
            g,
            normed,
            mask,
            bound.id(&format!("{p}.wq")),
            bound.id(&format!("{p}.wk")),
            bound.id(&format!("{p}.wv")),
            bound.id(&format!("{p}.wo")),
            stack.heads,
        )?;
        let branch = g.dropout(branch, stack.dropout, training, rng)?;
        cur = g.add(cur, branch)?;

        let p = format!("{}.b{b}.ff", stack.prefix);
        let normed = layer_norm_at(g, bound, &p, cur)?;
        let hidden = g.relu(g.add(
            g.matmul(normed, bound.id(&format!("{p}.w1")))?,
            bound.id(&format!("{p}.b1")),
        )?)?;
        let branch = g.add(
            g.matmul(hidden, bound.id(&format!("{p}.w2")))?,
            bound.id(&format!("{p}.b2")),
        )?;
        let branch = g.dropout(branch, stack.dropout, training, rng)?;
        cur = g.add(cur, branch)?;
    }
    Ok(cur)
}
