//! Message-passing form of the attention branch, written with plain loops.
//!
//! Node `v` receives `m_v = Σ_u softmax_u(<W_qᵀ x_v, W_kᵀ x_u> / √d_A) W_vᵀ x_u`
//! and updates to `y_v = FFN(x_v + m_v) + (x_v + m_v)`. Shares no code with
//! the tensor implementation.

use super::params::{AttentionHead, Ffn};
use crate::autodiff::Tensor;

fn project(x: &[f64], w: &Tensor) -> Vec<f64> {
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    let mut out = vec![0.0; cols];
    for (j, o) in out.iter_mut().enumerate() {
        for i in 0..rows {
            *o += x[i] * w.get(&[i, j]);
        }
    }
    out
}

fn relu(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| x.max(0.0)).collect()
}

/// Single-head, unmasked attention plus the residual feed-forward update,
/// one node (or time step) at a time.
pub fn message_passing_oracle(
    x_nodes: &[Vec<f64>],
    head: &AttentionHead<Tensor>,
    ffn: &Ffn<Tensor>,
) -> Vec<Vec<f64>> {
    let queries: Vec<Vec<f64>> = x_nodes.iter().map(|x| project(x, &head.w_q)).collect();
    let keys: Vec<Vec<f64>> = x_nodes.iter().map(|x| project(x, &head.w_k)).collect();
    let values: Vec<Vec<f64>> = x_nodes.iter().map(|x| project(x, &head.w_v)).collect();
    let scale = (head.w_q.shape()[1] as f64).sqrt();

    x_nodes
        .iter()
        .enumerate()
        .map(|(v, x_v)| {
            let logits: Vec<f64> = keys
                .iter()
                .map(|k_u| queries[v].iter().zip(k_u).map(|(a, b)| a * b).sum::<f64>() / scale)
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let total: f64 = exps.iter().sum();

            let mut message = vec![0.0; x_v.len()];
            for (u, e) in exps.iter().enumerate() {
                for (m, val) in message.iter_mut().zip(&values[u]) {
                    *m += e / total * val;
                }
            }
            let updated: Vec<f64> = x_v.iter().zip(&message).map(|(a, b)| a + b).collect();
            let h = relu(project(&updated, &ffn.w0));
            let h = relu(project(&h, &ffn.w1));
            let u = project(&h, &ffn.w2);
            u.iter().zip(&updated).map(|(a, b)| a + b).collect()
        })
        .collect()
}
