//! Assembling the inpaint set P_t and the context set R_t for one timestep.

use std::collections::BTreeSet;

use mvinpaint_tensor::{Tensor, Var};

use super::coords::{patch_coord, CoordFrame};
use super::encoder::{encode, encoder_input, pool_mask};
use super::extract::{gather_tokens, plan_patches, PatchPlan};
use super::{FeatureMap, GridPos, PatchSet, TokenFlags};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::rig::{select_context_frames, FrameBundle};
use crate::runtime::cache::FeatureCache;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FrameKey {
    pub camera_id: usize,
    pub timestep: usize,
}

/// Cached per-frame result: the feature map, its patch plan and the embedded,
/// normalised rows of its context-routed patches.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedFrame {
    pub fmap: FeatureMap,
    pub plans: Vec<PatchPlan>,
    /// Indices into `plans` of context-routed patches.
    pub ctx_index: Vec<usize>,
    /// `[n_ctx, C*P*P]` raw tokens.
    pub ctx_tokens: Option<Tensor>,
    /// `[n_ctx, D]` embedded and normalised rows.
    pub ctx_rows: Option<Tensor>,
}

/// Tape-side view of one encoded frame.
pub struct FrameVars<'t> {
    pub fmap: FeatureMap,
    pub plans: Vec<PatchPlan>,
    pub ctx_index: Vec<usize>,
    pub inp_index: Vec<usize>,
    /// All planned tokens `[n, C*P*P]` (fresh encodes only).
    pub tokens: Option<Var<'t>>,
    /// Embedded rows of all planned tokens before normalisation (fresh encodes only).
    pub embedded: Option<Var<'t>>,
    pub ctx_tokens: Option<Var<'t>>,
    pub ctx_rows: Option<Var<'t>>,
}

impl FrameVars<'_> {
    pub fn to_encoded(&self) -> EncodedFrame {
        EncodedFrame {
            fmap: self.fmap.clone(),
            plans: self.plans.clone(),
            ctx_index: self.ctx_index.clone(),
            ctx_tokens: self.ctx_tokens.map(|v| (*v.value()).clone()),
            ctx_rows: self.ctx_rows.map(|v| (*v.value()).clone()),
        }
    }
}

/// Encodes one frame on the tape of `w`, plans and gathers its patches and
/// embeds them. On the target view, patches touching an error cell are
/// routed to inpainting and the rest to context.
pub fn encode_frame<'t>(model: &Model, w: &[Var<'t>], frame: &FrameBundle, is_target: bool, depth_scale: f64) -> Result<FrameVars<'t>> {
    let cfg = &model.cfg;
    let tape = w[0].tape();
    let input = encoder_input(frame, cfg, depth_scale);
    let feats = encode(tape.constant(input), w, &model.ids.enc)?;
    let (h, wd) = (feats.shape()[1], feats.shape()[2]);
    let fg = pool_mask(&frame.fg_mask, cfg.downsample);
    let err = if is_target {
        pool_mask(&frame.error_mask, cfg.downsample)
    } else {
        vec![false; h * wd]
    };
    let plans = plan_patches(h, wd, &fg, is_target.then_some(&err[..]), cfg.patch, cfg.overlap);
    let ctx_index: Vec<usize> = (0..plans.len()).filter(|&i| !plans[i].inpaint).collect();
    let inp_index: Vec<usize> = (0..plans.len()).filter(|&i| plans[i].inpaint).collect();
    let tokens = gather_tokens(feats, &plans, cfg.patch)?;
    let ids = &model.ids;
    let embedded = match tokens {
        Some(t) => Some(t.matmul(w[ids.w_in])?.add(w[ids.b_in])?),
        None => None,
    };
    let pick = |v: Option<Var<'t>>, idx: &[usize], n: usize| -> Result<Option<Var<'t>>> {
        match v {
            Some(v) if !idx.is_empty() => Ok(Some(if idx.len() == n { v } else { v.select_rows(idx)? })),
            _ => Ok(None),
        }
    };
    let ctx_tokens = pick(tokens, &ctx_index, plans.len())?;
    let ctx_rows = match pick(embedded, &ctx_index, plans.len())? {
        Some(e) => Some(e.layer_norm(w[ids.ctx_g], w[ids.ctx_b])?),
        None => None,
    };
    let fmap = FeatureMap {
        features: (*feats.value()).clone(),
        fg,
        err,
        camera_id: frame.camera_id,
        timestep: frame.timestep,
        image_size: (frame.height(), frame.width()),
    };
    Ok(FrameVars {
        fmap,
        plans,
        ctx_index,
        inp_index,
        tokens,
        embedded,
        ctx_tokens,
        ctx_rows,
    })
}

/// P_t and R_t on the tape plus the bookkeeping needed to decode and report.
pub struct BuiltContext<'t> {
    pub t: usize,
    /// The current target frame, encoded fresh.
    pub target: FrameVars<'t>,
    /// Raw inpaint tokens `[n_p, C*P*P]`.
    pub p_tokens: Option<Var<'t>>,
    /// Embedded inpaint tokens `[n_p, D]`.
    pub p_rows: Option<Var<'t>>,
    pub p_coords: Vec<[f32; 3]>,
    pub p_positions: Vec<GridPos>,
    pub r_tokens: Option<Var<'t>>,
    pub r_rows: Option<Var<'t>>,
    pub r_coords: Vec<[f32; 3]>,
    pub r_positions: Vec<GridPos>,
    pub r_valid: Vec<bool>,
    /// Frames pushed through the encoder while building this context.
    pub encoder_calls: usize,
}

impl BuiltContext<'_> {
    /// Plain-value copies of P_t and R_t.
    pub fn patch_sets(&self) -> (PatchSet, PatchSet) {
        let p = PatchSet {
            tokens: self.p_tokens.map(|v| (*v.value()).clone()),
            coords: self.p_coords.clone(),
            flags: vec![
                TokenFlags {
                    inpaint: true,
                    context: false,
                    reproj_valid: true,
                };
                self.p_positions.len()
            ],
            positions: self.p_positions.clone(),
        };
        let r = PatchSet {
            tokens: self.r_tokens.map(|v| (*v.value()).clone()),
            coords: self.r_coords.clone(),
            flags: self
                .r_valid
                .iter()
                .map(|&v| TokenFlags {
                    inpaint: false,
                    context: true,
                    reproj_valid: v,
                })
                .collect(),
            positions: self.r_positions.clone(),
        };
        (p, r)
    }
}

/// Camera streams contributing context, in ascending id order.
pub fn context_streams(model: &Model, data: &Dataset) -> Vec<usize> {
    let target = data.meta.target_id;
    let mut s: BTreeSet<usize> = BTreeSet::from([target]);
    if model.cfg.use_multiview {
        s.extend(data.meta.input_ids());
    }
    s.into_iter().collect()
}

/// Encodes (or fetches from `cache`) every context frame of timestep `t` and
/// assembles P_t from the current novel view and R_t from all context
/// frames in (camera, timestep, row, col) order.
pub fn build_context<'t>(
    model: &Model,
    w: &[Var<'t>],
    data: &Dataset,
    t: usize,
    mut cache: Option<&mut FeatureCache>,
) -> Result<BuiltContext<'t>> {
    let cfg = &model.cfg;
    let tape = w[0].tape();
    let meta = &data.meta;
    let target_id = meta.target_id;
    let (n_c, n_w) = cfg.context_window();
    let taus = select_context_frames(t, n_c, n_w, cfg.k_w);
    let span = cfg.time_span();
    let mut encoder_calls = 0;

    let novel = data.novel(t)?;
    let target = encode_frame(model, w, novel, true, meta.depth_scale)?;
    encoder_calls += 1;
    if let Some(c) = cache.as_deref_mut() {
        c.insert(FrameKey { camera_id: target_id, timestep: t }, target.to_encoded())?;
    }

    let mut r_tokens = Vec::new();
    let mut r_rows = Vec::new();
    let (mut r_coords, mut r_positions, mut r_valid) = (Vec::new(), Vec::new(), Vec::new());
    for cam in context_streams(model, data) {
        let is_target = cam == target_id;
        // current pseudo-depth of this camera, used to reproject every past frame too
        let depth_now = if is_target { None } else { Some(&data.input(cam, t)?.depth) };
        for &tau in &taus {
            let key = FrameKey { camera_id: cam, timestep: tau };
            let (plans, ctx_index, toks, rows) = if is_target && tau == t {
                (target.plans.clone(), target.ctx_index.clone(), target.ctx_tokens, target.ctx_rows)
            } else if let Some(hit) = cache.as_deref_mut().and_then(|c| c.hit(&key)) {
                check_entry(hit, cfg.d_model, cfg.channels, key)?;
                (
                    hit.plans.clone(),
                    hit.ctx_index.clone(),
                    hit.ctx_tokens.clone().map(|x| tape.constant(x)),
                    hit.ctx_rows.clone().map(|x| tape.constant(x)),
                )
            } else {
                let frame = if is_target { data.novel(tau)? } else { data.input(cam, tau)? };
                let fv = encode_frame(model, w, frame, is_target, meta.depth_scale)?;
                encoder_calls += 1;
                if let Some(c) = cache.as_deref_mut() {
                    c.insert(key, fv.to_encoded())?;
                }
                (fv.plans, fv.ctx_index, fv.ctx_tokens, fv.ctx_rows)
            };
            let (Some(toks), Some(rows)) = (toks, rows) else {
                continue;
            };
            let cf = CoordFrame {
                src: meta.camera(cam),
                target: meta.target(),
                src_depth: depth_now,
                tau,
                t_now: t,
                span,
                patch: cfg.patch,
                downsample: cfg.downsample,
            };
            for &i in &ctx_index {
                let pl = &plans[i];
                let (c, ok) = patch_coord(pl, &cf);
                r_coords.push(c);
                r_valid.push(ok);
                r_positions.push(GridPos {
                    camera_id: cam,
                    timestep: tau,
                    row: pl.row,
                    col: pl.col,
                });
            }
            r_tokens.push(toks);
            r_rows.push(rows);
        }
    }
    let cat = |v: &[Var<'t>]| -> Result<Option<Var<'t>>> {
        Ok(match v.len() {
            0 => None,
            1 => Some(v[0]),
            _ => Some(tape.concat(v, 0)?),
        })
    };

    let n = target.plans.len();
    let sel = |v: Option<Var<'t>>| -> Result<Option<Var<'t>>> {
        match v {
            Some(v) if !target.inp_index.is_empty() => Ok(Some(if target.inp_index.len() == n {
                v
            } else {
                v.select_rows(&target.inp_index)?
            })),
            _ => Ok(None),
        }
    };
    let p_tokens = sel(target.tokens)?;
    let p_rows = sel(target.embedded)?;
    let tcf = CoordFrame {
        src: meta.target(),
        target: meta.target(),
        src_depth: None,
        tau: t,
        t_now: t,
        span,
        patch: cfg.patch,
        downsample: cfg.downsample,
    };
    let p_coords = target.inp_index.iter().map(|&i| patch_coord(&target.plans[i], &tcf).0).collect();
    let p_positions = target
        .inp_index
        .iter()
        .map(|&i| GridPos {
            camera_id: target_id,
            timestep: t,
            row: target.plans[i].row,
            col: target.plans[i].col,
        })
        .collect();
    Ok(BuiltContext {
        t,
        p_tokens,
        p_rows,
        p_coords,
        p_positions,
        r_tokens: cat(&r_tokens)?,
        r_rows: cat(&r_rows)?,
        r_coords,
        r_positions,
        r_valid,
        encoder_calls,
        target,
    })
}

fn check_entry(e: &EncodedFrame, d_model: usize, channels: usize, key: FrameKey) -> Result<()> {
    let rows_ok = e.ctx_rows.as_ref().map_or(true, |r| r.shape()[1] == d_model && r.shape()[0] == e.ctx_index.len());
    if !rows_ok || e.fmap.features.shape()[0] != channels || e.fmap.camera_id != key.camera_id || e.fmap.timestep != key.timestep {
        return Err(Error::CacheIntegrity(format!(
            "entry for camera {} timestep {} does not match the model",
            key.camera_id, key.timestep
        )));
    }
    Ok(())
}
