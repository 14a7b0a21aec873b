//! Masked reconstruction losses and the adversarial terms.

use mvinpaint_tensor::{Tensor, Var};

use crate::error::Result;

/// Probabilities are clamped to `[P_EPS, 1 - P_EPS]` before any log.
pub const P_EPS: f32 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub img: f32,
    pub adv: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { img: 1.0, adv: 0.01 }
    }
}

/// Channel-summed absolute error over the pixels weighted by the `[H,W]`
/// `mask`, divided by the mask's L1 norm; 0 for an all-zero mask.
pub fn masked_l1<'t>(pred: Var<'t>, target: &Tensor, mask: &Tensor) -> Result<Var<'t>> {
    let tape = pred.tape();
    let norm: f64 = mask.data().iter().map(|&m| m.abs() as f64).sum();
    let c = pred.shape()[0];
    if norm == 0.0 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let hw = mask.numel();
    let m3 = Tensor::from_fn(&[c, mask.shape()[0], mask.shape()[1]], |i| mask.data()[i % hw]);
    let diff = pred.sub(tape.constant(target.clone()))?;
    Ok(diff.masked_abs_sum(m3)?.scale((1.0 / norm) as f32))
}

/// Reconstruction loss inside the error region of the pre-blend image.
pub fn loss_in<'t>(f_tilde: Var<'t>, truth: &Tensor, e: &Tensor) -> Result<Var<'t>> {
    masked_l1(f_tilde, truth, e)
}

/// Reconstruction loss outside the error region of the pre-blend image.
pub fn loss_out<'t>(f_tilde: Var<'t>, truth: &Tensor, e: &Tensor) -> Result<Var<'t>> {
    masked_l1(f_tilde, truth, &e.map(|x| 1.0 - x))
}

/// The discriminator objective `log D(real) + log(1 - D(fake))`, to be
/// maximised by the discriminator. Inputs are probabilities.
pub fn disc_loss<'t>(d_real: Var<'t>, d_fake: Var<'t>) -> Result<Var<'t>> {
    let hi = 1.0 - P_EPS;
    let a = d_real.clamp(P_EPS, hi).ln();
    let b = d_fake.clamp(P_EPS, hi).scale(-1.0).add_scalar(1.0).ln();
    Ok(a.add(b)?)
}

/// Non-saturating generator loss `-log D(fake)`.
pub fn gen_loss(d_fake: Var<'_>) -> Var<'_> {
    d_fake.clamp(P_EPS, 1.0 - P_EPS).ln().scale(-1.0)
}

/// `img * (L_in + L_out) + adv * L_adv`.
pub fn total_loss<'t>(l_in: Var<'t>, l_out: Var<'t>, l_adv: Option<Var<'t>>, w: LossWeights) -> Result<Var<'t>> {
    let rec = l_in.add(l_out)?.scale(w.img);
    match l_adv {
        Some(a) if w.adv != 0.0 => Ok(rec.add(a.scale(w.adv))?),
        _ => Ok(rec),
    }
}
