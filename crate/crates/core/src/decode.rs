//! Patch decoder, overlap blending into an image and error-mask compositing.

use mvinpaint_tensor::{Tensor, Var};
use rand::Rng;

use crate::config::ModelConfig;
use crate::error::Result;
use crate::params::ParamStore;

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderIds {
    pub stages: Vec<(usize, usize)>,
}

/// Channel widths of the transposed-conv stages: C, C/2, ..., ending at 3.
fn decoder_channels(cfg: &ModelConfig) -> Vec<usize> {
    let s = cfg.stages();
    let mut c: Vec<usize> = (0..s).map(|i| (cfg.channels >> i).max(4)).collect();
    c.push(3);
    c
}

pub fn init_decoder(p: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> DecoderIds {
    let ch = decoder_channels(cfg);
    let stages = ch
        .windows(2)
        .enumerate()
        .map(|(i, io)| {
            let std = (2.0 / io[0] as f32).sqrt() * 0.5;
            let w = p.add_normal(format!("dec.s{i}.w"), &[io[0], io[1], 2, 2], std, rng);
            let b = p.add_const(format!("dec.s{i}.b"), &[io[1]], 0.0);
            (w, b)
        })
        .collect();
    DecoderIds { stages }
}

/// Decodes one `[1, C*P*P]` (or `[C*P*P]`) token into a `[3, P*s_f, P*s_f]` RGB patch.
pub fn decode_patch<'t>(token: Var<'t>, w: &[Var<'t>], ids: &DecoderIds, cfg: &ModelConfig) -> Result<Var<'t>> {
    let mut v = token.reshape(&[cfg.channels, cfg.patch, cfg.patch])?;
    let last = ids.stages.len() - 1;
    for (i, &(wi, bi)) in ids.stages.iter().enumerate() {
        v = v.conv_transpose2d(w[wi], Some(w[bi]), 2)?;
        v = if i == last { v.sigmoid() } else { v.relu() };
    }
    Ok(v)
}

/// Separable 1-D hat: linear ramp of width `ramp` at both ends, flat 1 inside.
pub fn hat_window(size: usize, ramp: f64) -> Vec<f32> {
    (0..size)
        .map(|i| {
            let a = (i as f64 + 0.5) / ramp;
            let b = (size as f64 - i as f64 - 0.5) / ramp;
            a.min(b).min(1.0) as f32
        })
        .collect()
}

/// Blending weight of every pixel of a square patch.
pub fn window_2d(size: usize, ramp: f64) -> Tensor {
    let h = hat_window(size, ramp);
    Tensor::from_fn(&[1, size, size], |i| h[i / size] * h[i % size])
}

/// Accumulated blend weights of patches placed at `origins` (top-left pixel)
/// on a `ch x cw` canvas, and their elementwise inverse (0 where uncovered).
pub fn blend_weights(origins: &[(usize, usize)], size: usize, ramp: f64, ch: usize, cw: usize) -> (Tensor, Tensor) {
    let win = window_2d(size, ramp);
    let mut acc = Tensor::zeros(&[1, ch, cw]);
    for &(y0, x0) in origins {
        for y in 0..size.min(ch - y0) {
            for x in 0..size.min(cw - x0) {
                acc.data_mut()[(y0 + y) * cw + x0 + x] += win.data()[y * size + x];
            }
        }
    }
    let inv = acc.map(|a| if a > 0.0 { 1.0 / a } else { 0.0 });
    (acc, inv)
}

/// Blends `[3,s,s]` patches at pixel `origins` into a `[3,out_h,out_w]` image:
/// windowed sum divided by the summed windows; uncovered pixels are 0. The
/// canvas is `ch x cw` and cropped to the output size.
pub fn blend_patches<'t>(
    patches: &[Var<'t>],
    origins: &[(usize, usize)],
    canvas: (usize, usize),
    out: (usize, usize),
    ramp: f64,
) -> Result<Var<'t>> {
    let tape = patches[0].tape();
    let s = patches[0].shape()[1];
    let (ch, cw) = canvas;
    let win = tape.constant(window_2d(s, ramp));
    let (_, inv) = blend_weights(origins, s, ramp, ch, cw);
    let mut acc: Option<Var<'t>> = None;
    for (p, &(y0, x0)) in patches.iter().zip(origins) {
        let mut v = p.mul(win)?;
        let ph = s.min(ch - y0);
        let pw = s.min(cw - x0);
        if ph < s {
            v = v.slice(1, 0, ph)?;
        }
        if pw < s {
            v = v.slice(2, 0, pw)?;
        }
        let mut row = vec![];
        if x0 > 0 {
            row.push(tape.constant(Tensor::zeros(&[3, ph, x0])));
        }
        row.push(v);
        if x0 + pw < cw {
            row.push(tape.constant(Tensor::zeros(&[3, ph, cw - x0 - pw])));
        }
        v = if row.len() == 1 { v } else { tape.concat(&row, 2)? };
        let mut col = vec![];
        if y0 > 0 {
            col.push(tape.constant(Tensor::zeros(&[3, y0, cw])));
        }
        col.push(v);
        if y0 + ph < ch {
            col.push(tape.constant(Tensor::zeros(&[3, ch - y0 - ph, cw])));
        }
        v = if col.len() == 1 { v } else { tape.concat(&col, 1)? };
        acc = Some(match acc {
            None => v,
            Some(a) => a.add(v)?,
        });
    }
    let mut img = acc.expect("at least one patch").mul(tape.constant(inv))?;
    if out.0 < ch {
        img = img.slice(1, 0, out.0)?;
    }
    if out.1 < cw {
        img = img.slice(2, 0, out.1)?;
    }
    Ok(img)
}

/// `E * F~ + (1 - E) * F` with a single-channel `[H,W]` error mask.
pub fn final_blend<'t>(f_tilde: Var<'t>, f: &Tensor, e: &Tensor) -> Result<Var<'t>> {
    let tape = f_tilde.tape();
    let (h, w) = (e.shape()[0], e.shape()[1]);
    let e3 = e.clone().reshape(&[1, h, w])?;
    let keep = e3.map(|x| 1.0 - x);
    let a = f_tilde.mul(tape.constant(e3))?;
    let b = tape.constant(f.zip_map(&Tensor::from_fn(f.shape(), |i| keep.data()[i % (h * w)]), |x, k| k * x)?);
    Ok(a.add(b)?)
}

/// Accumulator form of the blend, for callers working on plain tensors.
pub struct BlendCanvas {
    pub rgb: Tensor,
    pub weight: Tensor,
    size: usize,
    ramp: f64,
}

impl BlendCanvas {
    pub fn new(h: usize, w: usize, size: usize, ramp: f64) -> Self {
        Self {
            rgb: Tensor::zeros(&[3, h, w]),
            weight: Tensor::zeros(&[h, w]),
            size,
            ramp,
        }
    }

    pub fn add(&mut self, patch: &Tensor, y0: usize, x0: usize) {
        let (h, w) = (self.weight.shape()[0], self.weight.shape()[1]);
        let s = self.size;
        let hat = hat_window(s, self.ramp);
        for y in 0..s.min(h - y0) {
            for x in 0..s.min(w - x0) {
                let wt = hat[y] * hat[x];
                let i = (y0 + y) * w + x0 + x;
                self.weight.data_mut()[i] += wt;
                for c in 0..3 {
                    self.rgb.data_mut()[c * h * w + i] += wt * patch.data()[c * s * s + y * s + x];
                }
            }
        }
    }

    /// Divides by the accumulated weight; uncovered pixels stay 0.
    pub fn finish(self) -> Tensor {
        let hw = self.weight.numel();
        let mut rgb = self.rgb;
        for i in 0..hw {
            let wt = self.weight.data()[i];
            for c in 0..3 {
                let v = &mut rgb.data_mut()[c * hw + i];
                *v = if wt > 0.0 { *v / wt } else { 0.0 };
            }
        }
        rgb
    }
}
