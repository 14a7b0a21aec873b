//! Small strided CNN turning a frame into a feature map at 1/s_f resolution.

use mvinpaint_tensor::{Tensor, Var};
use rand::Rng;

use crate::config::ModelConfig;
use crate::error::Result;
use crate::params::ParamStore;
use crate::rig::FrameBundle;

/// Parameter indices, one `(weight, bias)` pair per conv in execution order.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderIds {
    pub convs: Vec<(usize, usize)>,
}

pub fn stage_channels(cfg: &ModelConfig, stage: usize) -> usize {
    if stage + 1 == cfg.stages() {
        cfg.channels
    } else {
        cfg.hidden << stage
    }
}

pub fn init_encoder(p: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> EncoderIds {
    let mut convs = Vec::new();
    let mut c_in = cfg.in_channels();
    for s in 0..cfg.stages() {
        let c_out = stage_channels(cfg, s);
        for (j, ci) in [c_in, c_out].into_iter().enumerate() {
            let std = (2.0 / (ci * 9) as f32).sqrt();
            let w = p.add_normal(format!("enc.s{s}.c{j}.w"), &[c_out, ci, 3, 3], std, rng);
            let b = p.add_const(format!("enc.s{s}.c{j}.b"), &[c_out], 0.01);
            convs.push((w, b));
        }
        c_in = c_out;
    }
    EncoderIds { convs }
}

/// Encoder input `[C_in, H', W']`: rgb, foreground, error and scaled depth,
/// reflect-padded up to a multiple of the downsampling factor. The mask
/// channels are zeroed when masks are ablated; depth is dropped without
/// pseudo-depth.
pub fn encoder_input(frame: &FrameBundle, cfg: &ModelConfig, depth_scale: f64) -> Tensor {
    let (h, w) = (frame.height(), frame.width());
    let s = cfg.downsample;
    let (ph, pw) = (h.div_ceil(s) * s, w.div_ceil(s) * s);
    let hw = h * w;
    let mut planes: Vec<&[f32]> = (0..3).map(|c| &frame.rgb.data()[c * hw..(c + 1) * hw]).collect();
    let zeros = vec![0.0f32; hw];
    if cfg.use_masks {
        planes.push(frame.fg_mask.data());
        planes.push(frame.error_mask.data());
    } else {
        planes.push(&zeros);
        planes.push(&zeros);
    }
    let scaled: Vec<f32> = frame.depth.data().iter().map(|&d| (d as f64 / depth_scale) as f32).collect();
    if cfg.use_pseudo_depth {
        planes.push(&scaled);
    }
    let reflect = |i: usize, n: usize| if i < n { i } else { 2 * (n - 1) - i };
    let mut data = Vec::with_capacity(planes.len() * ph * pw);
    for plane in &planes {
        for y in 0..ph {
            let sy = reflect(y, h);
            for x in 0..pw {
                data.push(plane[sy * w + reflect(x, w)]);
            }
        }
    }
    Tensor::from_vec(&[planes.len(), ph, pw], data).expect("plane sizes agree")
}

/// One-pixel reflect padding of a `[C,H,W]` map, built from slices and concats.
pub fn reflect_pad1<'t>(x: Var<'t>) -> Result<Var<'t>> {
    let tape = x.tape();
    let mut v = x;
    for axis in [1, 2] {
        let n = v.shape()[axis];
        let lo = v.slice(axis, 1.min(n - 1), 1)?;
        let hi = v.slice(axis, n.saturating_sub(2), 1)?;
        v = tape.concat(&[lo, v, hi], axis)?;
    }
    Ok(v)
}

/// Runs the CNN: per stage a stride-2 conv then a stride-1 conv, each 3x3 with
/// reflect padding and ReLU.
pub fn encode<'t>(x: Var<'t>, w: &[Var<'t>], ids: &EncoderIds) -> Result<Var<'t>> {
    let mut v = x;
    for (i, &(wi, bi)) in ids.convs.iter().enumerate() {
        let stride = if i % 2 == 0 { 2 } else { 1 };
        v = reflect_pad1(v)?.conv2d(w[wi], Some(w[bi]), stride, 0)?.relu();
    }
    Ok(v)
}

/// Max-pools a `[H,W]` mask to `ceil(H/s) x ceil(W/s)` cells, as booleans.
pub fn pool_mask(mask: &Tensor, s: usize) -> Vec<bool> {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let (fh, fw) = (h.div_ceil(s), w.div_ceil(s));
    let mut out = vec![false; fh * fw];
    for y in 0..h {
        for x in 0..w {
            if mask.data()[y * w + x] > 0.0 {
                out[(y / s) * fw + x / s] = true;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use mvinpaint_tensor::Tape;
    use super::*;
    use rand::SeedableRng;

    fn setup() -> (ModelConfig, ParamStore, EncoderIds) {
        let cfg = ModelConfig::default();
        let mut p = ParamStore::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let ids = init_encoder(&mut p, &cfg, &mut rng);
        (cfg, p, ids)
    }

    fn run(p: &ParamStore, ids: &EncoderIds, x: Tensor) -> Tensor {
        let tape = Tape::no_grad();
        let w = p.bind(&tape, false);
        let v = tape.constant(x);
        (*encode(v, &w, ids).unwrap().value()).clone()
    }

    #[test]
    fn shapes() {
        let (cfg, p, ids) = setup();
        let out = run(&p, &ids, Tensor::zeros(&[cfg.in_channels(), 64, 64]));
        assert_eq!(out.shape(), &[32, 16, 16]);
    }

    #[test]
    fn zero_input_gives_a_constant_map() {
        let (cfg, p, ids) = setup();
        let out = run(&p, &ids, Tensor::zeros(&[cfg.in_channels(), 32, 32]));
        let hw = 64;
        for c in 0..32 {
            let plane = &out.data()[c * hw..(c + 1) * hw];
            assert!(plane.iter().all(|&v| v == plane[0]));
        }
    }

    #[test]
    fn receptive_field_is_local() {
        let (cfg, p, ids) = setup();
        let a = Tensor::from_fn(&[cfg.in_channels(), 64, 64], |i| ((i * 37) % 101) as f32 / 101.0);
        let mut b = a.clone();
        // far corner, well outside the support of cell (0,0)
        for c in 0..cfg.in_channels() {
            b.data_mut()[c * 4096 + 63 * 64 + 63] += 1.0;
        }
        let (fa, fb) = (run(&p, &ids, a), run(&p, &ids, b));
        for c in 0..32 {
            assert_eq!(fa.data()[c * 256], fb.data()[c * 256]);
        }
    }

    #[test]
    fn shift_by_downsample_shifts_cells() {
        let (cfg, p, ids) = setup();
        let base = Tensor::from_fn(&[cfg.in_channels(), 64, 68], |i| (((i * 7919) % 997) as f32 / 997.0).sin().abs());
        let crop = |off: usize| {
            Tensor::from_fn(&[cfg.in_channels(), 64, 64], |i| {
                let (c, y, x) = (i / 4096, (i / 64) % 64, i % 64);
                base.data()[c * 64 * 68 + y * 68 + x + off]
            })
        };
        let (f0, f1) = (run(&p, &ids, crop(0)), run(&p, &ids, crop(4)));
        // interior cells away from the reflect-padded borders
        for c in 0..32 {
            for y in 3..13 {
                for x in 3..12 {
                    let a = f0.data()[c * 256 + y * 16 + x + 1];
                    let b = f1.data()[c * 256 + y * 16 + x];
                    assert!((a - b).abs() <= 1e-5, "{a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn pooling_keeps_any_foreground() {
        let mut m = Tensor::zeros(&[8, 8]);
        m.data_mut()[5 * 8 + 6] = 1.0;
        let p = pool_mask(&m, 4);
        assert_eq!(p, vec![false, false, false, true]);
    }

    #[test]
    fn odd_resolution_is_reflect_padded() {
        let cfg = ModelConfig::default();
        let f = FrameBundle::empty(1, 0, 30, 30);
        assert_eq!(encoder_input(&f, &cfg, 1.0).shape(), &[6, 32, 32]);
    }
}
