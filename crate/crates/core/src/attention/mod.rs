//! Transformer over inpaint tokens with fixed context: rotary positions,
//! cross-attention blocks, grouped execution and context sparsification.

pub mod block;
pub mod rope;
pub mod sparsify;

use mvinpaint_tensor::Var;

pub use block::{cross_attention, init_block, transformer_block, Attention, BlockIds, Positions};
pub use rope::{apply_rope, rope_rotate, RopeConfig, RopeTables};
pub use sparsify::{keep_count, top_k, topk_sparsify, SparsifyConfig};

use crate::error::Result;

/// Work done by one block, counted in multiply-accumulates of the
/// context-dependent part (key/value projections, logits, weighted sum).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockStat {
    pub group: usize,
    pub block: usize,
    pub n_query: usize,
    pub n_ctx: usize,
    pub macs: u64,
    /// The block runs after its group's sparsification point.
    pub post_sparsify: bool,
}

pub fn attention_macs(n_query: usize, n_ctx: usize, d: usize) -> u64 {
    (n_ctx * (2 * d * d + 2 * n_query * d)) as u64
}

pub struct GroupRun<'t> {
    pub p: Var<'t>,
    pub stats: Vec<BlockStat>,
}

/// Runs `blocks.len() / n_b` groups of `n_b` blocks. After the first block of
/// each group the context is pruned by that block's attention; reductions
/// accumulate across groups and the queries carry over.
#[allow(clippy::too_many_arguments)]
pub fn run_groups<'t>(
    p: Var<'t>,
    r: Option<Var<'t>>,
    rope_p: Option<&RopeTables>,
    rope_r: Option<&RopeTables>,
    w: &[Var<'t>],
    blocks: &[BlockIds],
    n_b: usize,
    heads: usize,
    sparsify: &SparsifyConfig,
) -> Result<GroupRun<'t>> {
    let d = p.shape()[1];
    let np = p.shape()[0];
    let mut p = p;
    let mut r = r;
    let mut rope_r = rope_r.cloned();
    let mut stats = Vec::with_capacity(blocks.len());
    for (k, ids) in blocks.iter().enumerate() {
        let (g, b) = (k / n_b, k % n_b);
        let pos = Positions {
            query: rope_p,
            key: rope_r.as_ref(),
        };
        let (next, attn) = transformer_block(p, r, pos, w, ids, heads)?;
        let n_ctx = r.map_or(0, |v| v.shape()[0]);
        stats.push(BlockStat {
            group: g,
            block: b,
            n_query: np,
            n_ctx,
            macs: attention_macs(np, n_ctx, d),
            post_sparsify: b > 0,
        });
        p = next;
        if b == 0 && sparsify.enabled {
            if let (Some(a), Some(rv)) = (attn, r) {
                let s = topk_sparsify(a, rv, sparsify)?;
                if s.kept.len() < n_ctx {
                    rope_r = rope_r.map(|t| t.select(&s.kept));
                }
                r = Some(s.rows);
            }
        }
    }
    Ok(GroupRun { p, stats })
}

/// Sum of MACs over post-sparsification blocks.
pub fn post_sparsify_macs(stats: &[BlockStat]) -> u64 {
    stats.iter().filter(|s| s.post_sparsify).map(|s| s.macs).sum()
}

pub fn total_macs(stats: &[BlockStat]) -> u64 {
    stats.iter().map(|s| s.macs).sum()
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::params::ParamStore;
    use mvinpaint_tensor::{Tape, Tensor};
    use rand::SeedableRng;

    pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        Tensor::from_fn(&[m, n], |i| (0..k).map(|j| a.data()[(i / n) * k + j] * b.data()[j * n + i % n]).sum())
    }

    fn blocks(n: usize, d: usize) -> (ParamStore, Vec<BlockIds>) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut p = ParamStore::new();
        let ids = (0..n).map(|k| init_block(&mut p, k, d, 2, &mut rng)).collect();
        (p, ids)
    }

    #[test]
    fn default_schedule_runs_eight_blocks_with_two_prunings() {
        let (p, ids) = blocks(8, 8);
        let tape = Tape::no_grad();
        let w = p.bind(&tape, false);
        let q = tape.constant(Tensor::from_fn(&[3, 8], |i| (i as f32 * 0.3).sin()));
        let r = tape.constant(Tensor::from_fn(&[100, 8], |i| (i as f32 * 0.11).cos()));
        let run = run_groups(q, Some(r), None, None, &w, &ids, 4, 2, &SparsifyConfig::with_rho(0.25, 16)).unwrap();
        let ctx: Vec<usize> = run.stats.iter().map(|s| s.n_ctx).collect();
        assert_eq!(ctx, vec![100, 25, 25, 25, 25, 16, 16, 16]);
        assert_eq!(run.p.shape(), vec![3, 8]);
    }

    #[test]
    fn single_block_without_pruning() {
        let (p, ids) = blocks(1, 8);
        let tape = Tape::no_grad();
        let w = p.bind(&tape, false);
        let q = tape.constant(Tensor::from_fn(&[2, 8], |i| i as f32 * 0.1));
        let r = tape.constant(Tensor::from_fn(&[5, 8], |i| i as f32 * 0.05));
        let run = run_groups(q, Some(r), None, None, &w, &ids, 1, 2, &SparsifyConfig::with_rho(1.0, 16)).unwrap();
        let (plain, _) = transformer_block(q, Some(r), Positions { query: None, key: None }, &w, &ids[0], 2).unwrap();
        assert_eq!(*run.p.value(), *plain.value());
        assert_eq!(run.stats.len(), 1);
    }

    #[test]
    fn mac_formula() {
        assert_eq!(attention_macs(2, 10, 4), 10 * (32 + 16));
    }
}
