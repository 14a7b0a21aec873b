//! Decomposed 3D rotary embedding: each coordinate axis rotates its own
//! slice of the head dimension, so logits depend only on coordinate differences.

use mvinpaint_tensor::{Tensor, Var};

use crate::config::ModelConfig;
use crate::error::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct RopeConfig {
    /// Sub-dimensions for the (x, y, t) axes; they sum to the head dimension.
    pub dims: [usize; 3],
    pub base: f64,
    pub spatial_scale: f64,
    pub temporal_scale: f64,
}

impl RopeConfig {
    pub fn from_model(cfg: &ModelConfig) -> Self {
        Self {
            dims: cfg.rope_dims,
            base: cfg.rope_base,
            spatial_scale: cfg.rope_spatial_scale,
            temporal_scale: cfg.rope_temporal_scale,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.dims.iter().sum()
    }

    /// Angular frequencies of one axis, strictly decreasing.
    pub fn freqs(&self, axis: usize) -> Vec<f64> {
        let d = self.dims[axis];
        let scale = if axis == 2 { self.temporal_scale } else { self.spatial_scale };
        (0..d / 2).map(|j| self.base.powf(-2.0 * j as f64 / d as f64) * scale).collect()
    }

    /// Rotation angle of every pair of the head dimension at coordinate `x`.
    pub fn angles(&self, x: [f32; 3]) -> Vec<f64> {
        (0..3).flat_map(|a| self.freqs(a).into_iter().map(move |w| x[a] as f64 * w)).collect()
    }
}

/// Rotates one head vector: pair `(2j, 2j+1)` turns by its angle.
pub fn rope_rotate(v: &[f32], x: [f32; 3], cfg: &RopeConfig) -> Vec<f32> {
    let mut out = v.to_vec();
    for (j, a) in cfg.angles(x).into_iter().enumerate() {
        let (s, c) = a.sin_cos();
        let (p, q) = (v[2 * j] as f64, v[2 * j + 1] as f64);
        out[2 * j] = (p * c - q * s) as f32;
        out[2 * j + 1] = (p * s + q * c) as f32;
    }
    out
}

/// Cosine and sine of every token's pair angles, shaped `[n, 1, D_h/2, 1]`
/// to broadcast over heads.
#[derive(Clone, Debug)]
pub struct RopeTables {
    pub cos: Tensor,
    pub sin: Tensor,
}

impl RopeTables {
    /// `coords` is `[n, 3]`.
    pub fn new(coords: &Tensor, cfg: &RopeConfig) -> Self {
        let n = coords.shape()[0];
        let half = cfg.head_dim() / 2;
        let (mut c, mut s) = (Vec::with_capacity(n * half), Vec::with_capacity(n * half));
        for i in 0..n {
            let x = &coords.data()[i * 3..i * 3 + 3];
            for a in cfg.angles([x[0], x[1], x[2]]) {
                let (sa, ca) = a.sin_cos();
                c.push(ca as f32);
                s.push(sa as f32);
            }
        }
        Self {
            cos: Tensor::from_vec(&[n, 1, half, 1], c).expect("table size"),
            sin: Tensor::from_vec(&[n, 1, half, 1], s).expect("table size"),
        }
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        let half = self.cos.shape()[2];
        let pick = |t: &Tensor| {
            let data = idx.iter().flat_map(|&i| t.data()[i * half..(i + 1) * half].iter().copied()).collect();
            Tensor::from_vec(&[idx.len(), 1, half, 1], data).expect("table size")
        };
        Self {
            cos: pick(&self.cos),
            sin: pick(&self.sin),
        }
    }
}

/// Applies the rotation to `[n, heads * D_h]` rows on the tape.
pub fn apply_rope<'t>(x: Var<'t>, tables: &RopeTables, heads: usize) -> Result<Var<'t>> {
    let tape = x.tape();
    let shape = x.shape();
    let (n, d) = (shape[0], shape[1]);
    let half = d / heads / 2;
    let v = x.reshape(&[n, heads, half, 2])?;
    let (a, b) = (v.slice(3, 0, 1)?, v.slice(3, 1, 1)?);
    let (c, s) = (tape.constant(tables.cos.clone()), tape.constant(tables.sin.clone()));
    let ra = a.mul(c)?.sub(b.mul(s)?)?;
    let rb = a.mul(s)?.add(b.mul(c)?)?;
    Ok(tape.concat(&[ra, rb], 3)?.reshape(&[n, d])?)
}
