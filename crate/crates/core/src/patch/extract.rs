//! Overlapping patch grid over feature maps and routing into inpaint/context.

use mvinpaint_tensor::{Tensor, Var};

use crate::error::Result;

/// Patch start offsets along one axis: stride `p - o`, with the last start
/// clamped so the final patch ends at the border. Maps shorter than `p` get a
/// single start at 0.
pub fn grid_starts(n: usize, p: usize, o: usize) -> Vec<usize> {
    if n <= p {
        return vec![0];
    }
    let mut s: Vec<usize> = (0..).step_by(p - o).take_while(|&x| x + p <= n).collect();
    if s.last().map_or(true, |&l| l + p < n) {
        s.push(n - p);
    }
    s
}

/// One kept patch of a feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchPlan {
    pub row: usize,
    pub col: usize,
    /// Contains at least one error cell (target view only).
    pub inpaint: bool,
    /// The map was smaller than the patch and the token is zero-padded.
    pub padded: bool,
}

/// Non-background patches of an `h x w` cell grid in row-major grid order.
/// `err` is `None` for input views; for the target view a patch touching an
/// error cell is routed to inpainting.
pub fn plan_patches(h: usize, w: usize, fg: &[bool], err: Option<&[bool]>, p: usize, o: usize) -> Vec<PatchPlan> {
    let padded = h < p || w < p;
    let mut out = Vec::new();
    for &r in &grid_starts(h, p, o) {
        for &c in &grid_starts(w, p, o) {
            let cells = (r..(r + p).min(h)).flat_map(|y| (c..(c + p).min(w)).map(move |x| y * w + x));
            let (mut any_fg, mut any_err) = (false, false);
            for i in cells {
                any_fg |= fg[i];
                any_err |= err.is_some_and(|e| e[i]);
            }
            if any_fg {
                out.push(PatchPlan {
                    row: r,
                    col: c,
                    inpaint: any_err,
                    padded,
                });
            }
        }
    }
    out
}

/// Gathers the planned patches of a `[C,h,w]` feature map into `[n, C*p*p]`
/// tokens (channel-major within a token).
pub fn gather_tokens<'t>(fmap: Var<'t>, plans: &[PatchPlan], p: usize) -> Result<Option<Var<'t>>> {
    if plans.is_empty() {
        return Ok(None);
    }
    let tape = fmap.tape();
    let shape = fmap.shape();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let mut rows = Vec::with_capacity(plans.len());
    for pl in plans {
        let ph = p.min(h - pl.row);
        let pw = p.min(w - pl.col);
        let mut patch = fmap.slice(1, pl.row, ph)?.slice(2, pl.col, pw)?;
        if pw < p {
            let z = tape.constant(Tensor::zeros(&[c, ph, p - pw]));
            patch = tape.concat(&[patch, z], 2)?;
        }
        if ph < p {
            let z = tape.constant(Tensor::zeros(&[c, p - ph, p]));
            patch = tape.concat(&[patch, z], 1)?;
        }
        rows.push(patch.reshape(&[1, c * p * p])?);
    }
    Ok(Some(if rows.len() == 1 { rows[0] } else { tape.concat(&rows, 0)? }))
}
