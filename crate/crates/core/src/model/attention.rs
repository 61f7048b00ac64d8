use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, Real};

/// Trilinear similarity S[i,j] = w0 · [q_j, c_i, q_j ⊙ c_i] between every
/// context row i and question row j. `w0` is the learned [3d] weight; the
/// three d-wide slices score the question part, the context part, and their
/// product.
pub fn similarity_matrix<T: Real>(
    g: &Graph<T>,
    c: NodeId,
    q: NodeId,
    w0: NodeId,
) -> Result<NodeId> {
    let (cs, qs) = (g.shape(c), g.shape(q));
    if cs.len() != 2 || qs.len() != 2 || cs[1] != qs[1] {
        return Err(Error::Shape {
            op: "similarity_matrix",
            lhs: cs,
            rhs: qs,
        });
    }
    let d = cs[1];
    if g.shape(w0) != [3 * d] {
        return Err(Error::Shape {
            op: "similarity_matrix",
            lhs: g.shape(w0),
            rhs: vec![3 * d],
        });
    }
    let w0_col = g.reshape(w0, vec![3 * d, 1])?;
    let wq = g.narrow(w0_col, 0, 0, d)?;
    let wc = g.narrow(w0_col, 0, d, d)?;
    let wm = g.narrow(w0_col, 0, 2 * d, d)?;

    // question term varies along columns: 1 x m
    let term_q = g.transpose(g.matmul(q, wq)?)?;
    // context term varies along rows: n x 1
    let term_c = g.matmul(c, wc)?;
    // product term: (C ⊙ wm_row) · Qᵀ
    let wm_row = g.reshape(wm, vec![1, d])?;
    let term_m = g.matmul(g.mul(c, wm_row)?, g.transpose(q)?)?;

    g.add(g.add(term_m, term_c)?, term_q)
}

/// Context-to-question attention: row-softmax S over unmasked question
/// positions, then mix question vectors. Each output row is a convex
/// combination of question rows.
pub fn c2q_attention<T: Real>(
    g: &Graph<T>,
    s: NodeId,
    q: NodeId,
    q_mask: &[bool],
) -> Result<NodeId> {
    let (ss, qs) = (g.shape(s), g.shape(q));
    if ss.len() != 2 || qs.len() != 2 || ss[1] != qs[0] {
        return Err(Error::Shape {
            op: "c2q_attention",
            lhs: ss,
            rhs: qs,
        });
    }
    let s_row = g.softmax_masked(s, Some(q_mask))?;
    g.matmul(s_row, q)
}

/// Question-to-context attention: row-softmax(S) · column-softmax(S)ᵀ · C.
/// The column softmax normalizes over unmasked context positions.
pub fn q2c_attention<T: Real>(
    g: &Graph<T>,
    s: NodeId,
    c: NodeId,
    c_mask: &[bool],
    q_mask: &[bool],
) -> Result<NodeId> {
    let (ss, cs) = (g.shape(s), g.shape(c));
    if ss.len() != 2 || cs.len() != 2 || ss[0] != cs[0] {
        return Err(Error::Shape {
            op: "q2c_attention",
            lhs: ss,
            rhs: cs,
        });
    }
    let s_row = g.softmax_masked(s, Some(q_mask))?;
    // columnwise softmax of S, transposed: softmax over rows of Sᵀ
    let s_col_t = g.softmax_masked(g.transpose(s)?, Some(c_mask))?;
    g.matmul(g.matmul(s_row, s_col_t)?, c)
}

/// Model-encoder input rows [c, a, c ⊙ a, c ⊙ b]; a width-reducing 4d→d
/// projection follows before the model encoder.
pub fn fuse<T: Real>(g: &Graph<T>, c: NodeId, a: NodeId, b: NodeId) -> Result<NodeId> {
    let (cs, as_, bs) = (g.shape(c), g.shape(a), g.shape(b));
    if cs != as_ || cs != bs {
        return Err(Error::Shape {
            op: "fuse",
            lhs: cs,
            rhs: if as_ != g.shape(c) { as_ } else { bs },
        });
    }
    let ca = g.mul(c, a)?;
    let cb = g.mul(c, b)?;
    g.concat(&[c, a, ca, cb], 1)
}
