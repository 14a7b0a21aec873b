//! Cross-attention blocks: inpaint tokens query the fixed context set.

use mvinpaint_tensor::{Tensor, Var};
use rand::Rng;

use super::rope::{apply_rope, RopeTables};
use crate::error::Result;
use crate::params::ParamStore;

#[derive(Clone, Debug, PartialEq)]
pub struct BlockIds {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

pub fn init_block(p: &mut ParamStore, k: usize, d: usize, ffn: usize, rng: &mut impl Rng) -> BlockIds {
    let s = 1.0 / (d as f32).sqrt();
    let n = |name: &str| format!("blk{k}.{name}");
    BlockIds {
        ln1_g: p.add_const(n("ln1.g"), &[d], 1.0),
        ln1_b: p.add_const(n("ln1.b"), &[d], 0.0),
        wq: p.add_normal(n("wq"), &[d, d], s, rng),
        wk: p.add_normal(n("wk"), &[d, d], s, rng),
        wv: p.add_normal(n("wv"), &[d, d], s, rng),
        wo: p.add_normal(n("wo"), &[d, d], 0.5 * s, rng),
        ln2_g: p.add_const(n("ln2.g"), &[d], 1.0),
        ln2_b: p.add_const(n("ln2.b"), &[d], 0.0),
        w1: p.add_normal(n("w1"), &[d, ffn * d], s, rng),
        b1: p.add_const(n("b1"), &[ffn * d], 0.0),
        w2: p.add_normal(n("w2"), &[ffn * d, d], 0.5 / ((ffn * d) as f32).sqrt(), rng),
        b2: p.add_const(n("b2"), &[d], 0.0),
    }
}

/// Positional tables for queries and keys; `None` disables the rotation.
#[derive(Clone, Copy)]
pub struct Positions<'a> {
    pub query: Option<&'a RopeTables>,
    pub key: Option<&'a RopeTables>,
}

pub struct Attention<'t> {
    /// Attention-weighted values before the output projection, `[n_p, D]`.
    pub mix: Var<'t>,
    /// `mix` after the output projection.
    pub out: Var<'t>,
    /// Head-averaged attention `[n_p, n_r]`; `None` for an empty context.
    pub attn: Option<Var<'t>>,
}

/// Multi-head cross-attention of already normalised queries `h` against the
/// context rows `r`. An empty context yields a zero update.
pub fn cross_attention<'t>(
    h: Var<'t>,
    r: Option<Var<'t>>,
    pos: Positions<'_>,
    w: &[Var<'t>],
    ids: &BlockIds,
    heads: usize,
) -> Result<Attention<'t>> {
    let tape = h.tape();
    let (np, d) = (h.shape()[0], h.shape()[1]);
    let Some(r) = r else {
        let z = tape.constant(Tensor::zeros(&[np, d]));
        return Ok(Attention { mix: z, out: z, attn: None });
    };
    let dh = d / heads;
    let mut q = h.matmul(w[ids.wq])?;
    let mut k = r.matmul(w[ids.wk])?;
    let v = r.matmul(w[ids.wv])?;
    if let (Some(pq), Some(pk)) = (pos.query, pos.key) {
        q = apply_rope(q, pq, heads)?;
        k = apply_rope(k, pk, heads)?;
    }
    let scale = 1.0 / (dh as f32).sqrt();
    let mut mixes = Vec::with_capacity(heads);
    let mut attn_sum: Option<Var<'t>> = None;
    for hd in 0..heads {
        let qh = q.slice(1, hd * dh, dh)?;
        let kh = k.slice(1, hd * dh, dh)?;
        let vh = v.slice(1, hd * dh, dh)?;
        let a = qh.matmul(kh.t()?)?.scale(scale).softmax(1)?;
        mixes.push(a.matmul(vh)?);
        attn_sum = Some(match attn_sum {
            None => a,
            Some(s) => s.add(a)?,
        });
    }
    let mix = if heads == 1 { mixes[0] } else { tape.concat(&mixes, 1)? };
    let out = mix.matmul(w[ids.wo])?;
    let attn = attn_sum.map(|s| s.scale(1.0 / heads as f32));
    Ok(Attention { mix, out, attn })
}

/// Pre-norm residual block: attention on the normalised queries, then a
/// ReLU feed-forward. Returns the updated tokens and the attention matrix.
pub fn transformer_block<'t>(
    p: Var<'t>,
    r: Option<Var<'t>>,
    pos: Positions<'_>,
    w: &[Var<'t>],
    ids: &BlockIds,
    heads: usize,
) -> Result<(Var<'t>, Option<Var<'t>>)> {
    let h = p.layer_norm(w[ids.ln1_g], w[ids.ln1_b])?;
    let att = cross_attention(h, r, pos, w, ids, heads)?;
    let p1 = p.add(att.out)?;
    let f = p1
        .layer_norm(w[ids.ln2_g], w[ids.ln2_b])?
        .matmul(w[ids.w1])?
        .add(w[ids.b1])?
        .relu()
        .matmul(w[ids.w2])?
        .add(w[ids.b2])?;
    Ok((p1.add(f)?, att.attn))
}

#[cfg(test)]
mod tests {
    use super::*;
    use mvinpaint_tensor::{grad_check, Tape};
    use rand::SeedableRng;

    fn setup(d: usize) -> (ParamStore, BlockIds) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let mut p = ParamStore::new();
        let ids = init_block(&mut p, 0, d, 2, &mut rng);
        (p, ids)
    }

    const NONE: Positions<'static> = Positions { query: None, key: None };

    #[test]
    fn constant_values_give_constant_mix() {
        let (p, ids) = setup(8);
        let tape = Tape::no_grad();
        let w = p.bind(&tape, false);
        let h = tape.constant(Tensor::from_fn(&[3, 8], |i| (i as f32 * 0.37).sin()));
        // identical rows make identical values
        let r = tape.constant(Tensor::from_fn(&[5, 8], |i| (i % 8) as f32 * 0.1));
        let a = cross_attention(h, Some(r), NONE, &w, &ids, 2).unwrap();
        let v = r.value().data()[..8].to_vec();
        let want = Tensor::from_vec(&[1, 8], v).unwrap();
        let wv = (*w[ids.wv].value()).clone();
        let vrow = crate::attention::tests::matmul(&want, &wv);
        let mix = a.mix.value();
        for i in 0..3 {
            for j in 0..8 {
                assert!((mix.data()[i * 8 + j] - vrow.data()[j]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn singleton_context_gets_all_weight() {
        let (p, ids) = setup(8);
        let tape = Tape::no_grad();
        let w = p.bind(&tape, false);
        let h = tape.constant(Tensor::from_fn(&[4, 8], |i| i as f32 * 0.1));
        let r = tape.constant(Tensor::from_fn(&[1, 8], |i| i as f32));
        let a = cross_attention(h, Some(r), NONE, &w, &ids, 2).unwrap();
        assert!(a.attn.unwrap().value().data().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn empty_context_is_an_identity_attention_update() {
        let (mut p, ids) = setup(8);
        // zero feed-forward output isolates the attention path
        let w2 = p.index("blk0.w2").unwrap();
        p.tensors_mut()[w2] = Tensor::zeros(&[16, 8]);
        let tape = Tape::no_grad();
        let w = p.bind(&tape, false);
        let x = Tensor::from_fn(&[2, 8], |i| i as f32);
        let (out, attn) = transformer_block(tape.constant(x.clone()), None, NONE, &w, &ids, 2).unwrap();
        assert!(attn.is_none());
        assert_eq!(*out.value(), x);
    }

    #[test]
    fn zero_output_projection_leaves_only_the_ffn_residual() {
        let (mut p, ids) = setup(8);
        p.tensors_mut()[ids.wo] = Tensor::zeros(&[8, 8]);
        let tape = Tape::no_grad();
        let w = p.bind(&tape, false);
        let x = tape.constant(Tensor::from_fn(&[2, 8], |i| (i as f32).cos()));
        let r = tape.constant(Tensor::from_fn(&[3, 8], |i| (i as f32).sin()));
        let (out, _) = transformer_block(x, Some(r), NONE, &w, &ids, 2).unwrap();
        let f = x
            .layer_norm(w[ids.ln2_g], w[ids.ln2_b])
            .unwrap()
            .matmul(w[ids.w1])
            .unwrap()
            .add(w[ids.b1])
            .unwrap()
            .relu()
            .matmul(w[ids.w2])
            .unwrap()
            .add(w[ids.b2])
            .unwrap();
        assert_eq!(*out.value(), *x.add(f).unwrap().value());
        assert_eq!(out.shape(), vec![2, 8]);
    }

    #[test]
    fn block_gradient_wrt_query_projection() {
        let (p, ids) = setup(8);
        let x = Tensor::from_fn(&[3, 8], |i| ((i * 7) % 11) as f32 / 11.0 - 0.5);
        let r = Tensor::from_fn(&[4, 8], |i| ((i * 5) % 13) as f32 / 13.0 - 0.5);
        let rep = grad_check(
            |tape, v| {
                let mut w = p.bind(tape, false);
                w[ids.wq] = v[0];
                let (out, _) = transformer_block(tape.constant(x.clone()), Some(tape.constant(r.clone())), NONE, &w, &ids, 2)?;
                Ok(out)
            },
            &[p.tensors()[ids.wq].clone()],
            // f32 rounding dominates below this step; the function is smooth here
            3e-2,
        )
        .unwrap();
        assert!(rep.max_rel_err <= 1e-3, "{rep:?}");
    }
}
