//! The full inpainting generator: encoder, token embedding, grouped
//! cross-attention, patch decoder and blending.

use mvinpaint_tensor::{Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{init_block, run_groups, BlockIds, BlockStat, RopeConfig, RopeTables, SparsifyConfig};
use crate::config::ModelConfig;
use crate::data::Dataset;
use crate::decode::{blend_patches, decode_patch, final_blend, init_decoder, DecoderIds};
use crate::error::Result;
use crate::params::ParamStore;
use crate::patch::context::{build_context, BuiltContext};
use crate::patch::{coords_tensor, init_encoder, EncoderIds};
use crate::runtime::cache::FeatureCache;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelIds {
    pub enc: EncoderIds,
    pub w_in: usize,
    pub b_in: usize,
    pub ctx_g: usize,
    pub ctx_b: usize,
    pub blocks: Vec<BlockIds>,
    pub w_out: usize,
    pub b_out: usize,
    pub dec: DecoderIds,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    pub ids: ModelIds,
}

/// One generator step on a tape.
pub struct StepOutput<'t> {
    /// Decoded and blended prediction `[3,H,W]` before compositing.
    pub f_tilde: Var<'t>,
    /// Composited output `E * F~ + (1 - E) * F`.
    pub f_hat: Var<'t>,
    pub stats: Vec<BlockStat>,
    pub ctx: BuiltContext<'t>,
}

impl StepOutput<'_> {
    pub fn encoder_calls(&self) -> usize {
        self.ctx.encoder_calls
    }
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let enc = init_encoder(&mut p, &cfg, &mut rng);
        let (t, d) = (cfg.token_dim(), cfg.d_model);
        let w_in = p.add_normal("emb.w_in", &[t, d], 1.0 / (t as f32).sqrt(), &mut rng);
        let b_in = p.add_const("emb.b_in", &[d], 0.0);
        let ctx_g = p.add_const("emb.ctx_ln.g", &[d], 1.0);
        let ctx_b = p.add_const("emb.ctx_ln.b", &[d], 0.0);
        let blocks = (0..cfg.n_groups * cfg.n_blocks)
            .map(|k| init_block(&mut p, k, d, cfg.ffn_mult, &mut rng))
            .collect();
        let w_out = p.add_normal("emb.w_out", &[d, t], 0.1 / (d as f32).sqrt(), &mut rng);
        let b_out = p.add_const("emb.b_out", &[t], 0.0);
        let dec = init_decoder(&mut p, &cfg, &mut rng);
        Ok(Self {
            cfg,
            params: p,
            ids: ModelIds {
                enc,
                w_in,
                b_in,
                ctx_g,
                ctx_b,
                blocks,
                w_out,
                b_out,
                dec,
            },
        })
    }

    pub fn rope_config(&self) -> RopeConfig {
        RopeConfig::from_model(&self.cfg)
    }

    /// Inpaints the novel view at timestep `t`. `w` are the parameters bound
    /// to a tape; `cache` reuses encoded context frames across calls.
    pub fn forward<'t>(
        &self,
        w: &[Var<'t>],
        data: &Dataset,
        t: usize,
        sparsify: &SparsifyConfig,
        cache: Option<&mut FeatureCache>,
    ) -> Result<StepOutput<'t>> {
        let cfg = &self.cfg;
        let tape = w[0].tape();
        let ctx = build_context(self, w, data, t, cache)?;
        let novel = data.novel(t)?;
        let (h, wd) = (novel.height(), novel.width());

        let mut stats = Vec::new();
        let out_tokens = match (ctx.p_tokens, ctx.p_rows) {
            (Some(pt), Some(p0)) => {
                let rc = self.rope_config();
                let tables = |c: &[[f32; 3]]| (cfg.use_rope && !c.is_empty()).then(|| RopeTables::new(&coords_tensor(c), &rc));
                let rope_p = tables(&ctx.p_coords);
                let rope_r = tables(&ctx.r_coords);
                let n_b = cfg.n_blocks;
                let run = run_groups(p0, ctx.r_rows, rope_p.as_ref(), rope_r.as_ref(), w, &self.ids.blocks, n_b, cfg.heads, sparsify)?;
                stats = run.stats;
                Some(pt.add(run.p.matmul(w[self.ids.w_out])?.add(w[self.ids.b_out])?)?)
            }
            _ => None,
        };

        let target = &ctx.target;
        let f_tilde = match target.tokens {
            Some(all) => {
                let mut patches = Vec::with_capacity(target.plans.len());
                let mut origins = Vec::with_capacity(target.plans.len());
                let mut k_inp = 0;
                for (i, pl) in target.plans.iter().enumerate() {
                    let tok = if pl.inpaint {
                        let k = k_inp;
                        k_inp += 1;
                        out_tokens.expect("inpaint tokens present").select_rows(&[k])?
                    } else {
                        all.select_rows(&[i])?
                    };
                    patches.push(decode_patch(tok, w, &self.ids.dec, cfg)?);
                    origins.push((pl.row * cfg.downsample, pl.col * cfg.downsample));
                }
                let s = cfg.downsample;
                let canvas = (target.fmap.h() * s, target.fmap.w() * s);
                blend_patches(&patches, &origins, canvas, (h, wd), (cfg.overlap * s) as f64)?
            }
            None => tape.constant(Tensor::zeros(&[3, h, wd])),
        };
        let f_hat = final_blend(f_tilde, &novel.rgb, &novel.error_mask)?;
        Ok(StepOutput { f_tilde, f_hat, stats, ctx })
    }
}
