//! Building blocks shared by the spatial and temporal transformers.
//!
//! Activations are laid out `[batch, rows, channels]`: for spatial attention
//! the batch axis is time and rows are nodes; for temporal attention it is the
//! other way round.

use super::params::{AttentionHead, AttentionLayer, Ffn, Gate, Linear};
use crate::autodiff::{Graph, Mask, Var};
use crate::error::{Error, Result};

/// `x W + b` over the last axis.
pub fn linear(g: &mut Graph, x: Var, p: &Linear<Var>) -> Result<Var> {
    let y = g.matmul(x, p.weight)?;
    g.add(y, p.bias)
}

/// `U = ReLU(ReLU(x W0) W1) W2`, row by row.
pub fn position_wise_ffn(g: &mut Graph, x: Var, p: &Ffn<Var>) -> Result<Var> {
    let h = g.matmul(x, p.w0)?;
    let h = g.relu(h)?;
    let h = g.matmul(h, p.w1)?;
    let h = g.relu(h)?;
    g.matmul(h, p.w2)
}

/// Multi-head scaled dot-product self-attention over the rows of each batch
/// entry. Returns the merged output and one `[batch, rows, rows]` attention
/// tensor per head.
pub fn self_attention(
    g: &mut Graph,
    x: Var,
    heads: &[AttentionHead<Var>],
    head_merge: Option<Var>,
    mask: Option<&Mask>,
) -> Result<(Var, Vec<Var>)> {
    if heads.is_empty() {
        return Err(Error::Contract("attention needs at least one head".into()));
    }
    if heads.len() > 1 && head_merge.is_none() {
        return Err(Error::Contract(format!(
            "{} attention heads need a merge projection",
            heads.len()
        )));
    }
    let mut outputs = Vec::with_capacity(heads.len());
    let mut weights = Vec::with_capacity(heads.len());
    for head in heads {
        let q = g.matmul(x, head.w_q)?;
        let k = g.matmul(x, head.w_k)?;
        let v = g.matmul(x, head.w_v)?;
        let d_a = *g.shape(q).last().expect("rank >= 2");
        let kt = g.transpose_last(k)?;
        let scores = g.bmm(q, kt)?;
        let scores = g.scale(scores, 1.0 / (d_a as f64).sqrt())?;
        let s = match mask {
            Some(m) => g.masked_softmax(scores, m)?,
            None => g.softmax(scores)?,
        };
        outputs.push(g.bmm(s, v)?);
        weights.push(s);
    }
    let merged = match head_merge {
        None => outputs[0],
        Some(w) => {
            let axis = g.shape(outputs[0]).len() - 1;
            let cat = if outputs.len() == 1 {
                outputs[0]
            } else {
                g.concat(&outputs, axis)?
            };
            g.matmul(cat, w)?
        }
    };
    Ok((merged, weights))
}

/// `M' = X + attention(X)`, then `Y = FFN(M') + M'`.
pub fn attention_layer(
    g: &mut Graph,
    x: Var,
    p: &AttentionLayer<Var>,
    mask: Option<&Mask>,
) -> Result<(Var, Vec<Var>)> {
    let (attended, weights) = self_attention(g, x, &p.heads, p.head_merge, mask)?;
    let residual = g.add(x, attended)?;
    let u = position_wise_ffn(g, residual, &p.ffn)?;
    Ok((g.add(u, residual)?, weights))
}

/// Per-row gate `g = sigmoid(f_s(y_dyn) + f_g(x_fix))` and the convex blend
/// `g * y_dyn + (1 - g) * x_fix`.
pub fn gated_fusion(g: &mut Graph, y_dyn: Var, x_fix: Var, p: &Gate<Var>) -> Result<Var> {
    if g.shape(y_dyn) != g.shape(x_fix) {
        return Err(Error::shape("gated_fusion", g.shape(y_dyn), g.shape(x_fix)));
    }
    let a = linear(g, y_dyn, &p.fs)?;
    let b = linear(g, x_fix, &p.fg)?;
    let logits = g.add(a, b)?;
    let gate = g.sigmoid(logits)?;
    let keep_dyn = g.mul(gate, y_dyn)?;
    let rest = g.affine(gate, -1.0, 1.0)?;
    let keep_fix = g.mul(rest, x_fix)?;
    g.add(keep_dyn, keep_fix)
}

/// Concatenates `[X, D^S tiled over time, D^T tiled over nodes]` on the
/// channel axis and projects back to `d_G` channels.
///
/// `x` is `[M, N, d]`; either dictionary may be absent.
pub fn spatial_temporal_embed(
    g: &mut Graph,
    x: Var,
    d_spatial: Option<Var>,
    d_temporal: Option<Var>,
    proj: &Linear<Var>,
) -> Result<Var> {
    let xs = g.shape(x).to_vec();
    if xs.len() != 3 {
        return Err(Error::shape("spatial_temporal_embed", &xs, &[3]));
    }
    let (m, n) = (xs[0], xs[1]);
    let mut parts = vec![x];
    if let Some(ds) = d_spatial {
        if g.shape(ds) != [n, n] {
            return Err(Error::shape("spatial_temporal_embed", &xs, g.shape(ds)));
        }
        parts.push(g.broadcast_to(ds, &[m, n, n])?);
    }
    if let Some(dt) = d_temporal {
        if g.shape(dt) != [m, m] {
            return Err(Error::shape("spatial_temporal_embed", &xs, g.shape(dt)));
        }
        let rows = g.reshape(dt, &[m, 1, m])?;
        parts.push(g.broadcast_to(rows, &[m, n, m])?);
    }
    let cat = if parts.len() == 1 { x } else { g.concat(&parts, 2)? };
    linear(g, cat, proj)
}
