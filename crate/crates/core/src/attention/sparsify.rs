//! Top-k pruning of the context set by received attention mass.

use mvinpaint_tensor::{Tensor, Var};

use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SparsifyConfig {
    /// `false` skips the selection step entirely (the dense reference path).
    pub enabled: bool,
    pub rho: f32,
    pub k_min: usize,
    /// Route gradients to the scores through a straight-through gate.
    pub straight_through: bool,
}

impl SparsifyConfig {
    pub fn dense() -> Self {
        Self {
            enabled: false,
            rho: 1.0,
            k_min: 16,
            straight_through: false,
        }
    }

    pub fn with_rho(rho: f32, k_min: usize) -> Self {
        Self {
            enabled: true,
            rho,
            k_min,
            straight_through: false,
        }
    }
}

/// `max(k_min, ceil(rho * n))`, capped at `n`.
pub fn keep_count(n: usize, rho: f32, k_min: usize) -> usize {
    let k = (rho as f64 * n as f64).ceil() as usize;
    k.max(k_min).min(n)
}

/// Per-token scores: attention summed over the queries.
pub fn attention_scores(attn: &Tensor) -> Vec<f32> {
    let (nq, nr) = (attn.shape()[0], attn.shape()[1]);
    let mut s = vec![0.0f32; nr];
    for q in 0..nq {
        for (j, acc) in s.iter_mut().enumerate() {
            *acc += attn.data()[q * nr + j];
        }
    }
    s
}

/// Indices of the `k` largest scores, ties to the lower index, returned in
/// ascending index order.
pub fn top_k(scores: &[f32], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

pub struct Sparsified<'t> {
    pub rows: Var<'t>,
    /// Kept positions relative to the input rows.
    pub kept: Vec<usize>,
}

/// Keeps the context rows that received the most attention. With the
/// straight-through flag the kept rows are scaled by a gate whose forward
/// value is exactly 1 and whose gradient flows to the scores.
pub fn topk_sparsify<'t>(attn: Var<'t>, r: Var<'t>, cfg: &SparsifyConfig) -> Result<Sparsified<'t>> {
    let n = r.shape()[0];
    let k = keep_count(n, cfg.rho, cfg.k_min);
    let scores = attention_scores(&attn.value());
    let kept = top_k(&scores, k);
    let mut rows = if k == n { r } else { r.select_rows(&kept)? };
    if cfg.straight_through {
        let tape = r.tape();
        let nq = attn.shape()[0];
        let s = tape.constant(Tensor::ones(&[1, nq])).matmul(attn)?.reshape(&[n, 1])?;
        let gate = s.select_rows(&kept)?.straight_through(Tensor::ones(&[k, 1]))?;
        rows = rows.mul(gate)?;
    }
    Ok(Sparsified { rows, kept })
}

#[cfg(test)]
mod tests {
    use super::*;
    use mvinpaint_tensor::Tape;

    #[test]
    fn keep_count_rules() {
        assert_eq!(keep_count(10, 0.5, 1), 5);
        assert_eq!(keep_count(8, 0.25, 16), 8);
        assert_eq!(keep_count(100, 0.25, 16), 25);
        assert_eq!(keep_count(100, 0.1, 16), 16);
        assert_eq!(keep_count(7, 1.0, 16), 7);
    }

    #[test]
    fn uniform_scores_keep_the_lowest_indices() {
        assert_eq!(top_k(&[0.1; 10], 5), vec![0, 1, 2, 3, 4]);
        assert_eq!(top_k(&[0.1, 0.5, 0.2, 0.5], 2), vec![1, 3]);
    }

    #[test]
    fn full_retention_keeps_rows_untouched() {
        let tape = Tape::new();
        let attn = tape.constant(Tensor::full(&[2, 4], 0.25));
        let r = tape.param(Tensor::from_fn(&[4, 3], |i| i as f32));
        let s = topk_sparsify(attn, r, &SparsifyConfig::with_rho(1.0, 1)).unwrap();
        assert_eq!(s.kept, vec![0, 1, 2, 3]);
        assert_eq!(*s.rows.value(), *r.value());
    }

    #[test]
    fn gate_passes_gradient_to_scores() {
        let tape = Tape::new();
        let attn = tape.param(Tensor::from_vec(&[1, 3], vec![0.2, 0.5, 0.3]).unwrap());
        let r = tape.constant(Tensor::from_fn(&[3, 2], |i| i as f32 + 1.0));
        let cfg = SparsifyConfig {
            enabled: true,
            rho: 0.5,
            k_min: 1,
            straight_through: true,
        };
        let s = topk_sparsify(attn, r, &cfg).unwrap();
        assert_eq!(s.kept, vec![1, 2]);
        // forward gate is exactly one
        assert_eq!(s.rows.value().data(), &[3.0, 4.0, 5.0, 6.0]);
        let g = tape.backward(s.rows.sum()).unwrap();
        // d/ds_j of sum(g_j * r_j) with g = s: row sums for kept, 0 for dropped
        assert_eq!(g.get(attn).unwrap().data(), &[0.0, 7.0, 11.0]);
    }
}
