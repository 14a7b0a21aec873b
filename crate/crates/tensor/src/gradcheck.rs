//! Central finite-difference gradient oracle.
//!
//! The checked function returns a tensor of any shape; it is reduced to a
//! scalar by a fixed pseudo-random projection, accumulated in f64, so the
//! finite differences are not swamped by f32 rounding of one big sum.

use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Max over inputs of `max|analytic − numeric| / max(|analytic|, |numeric|)`,
    /// where both maxima run over the checked coordinates of that input.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub per_input: Vec<f64>,
    pub checked: usize,
}

/// Checks every coordinate of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor], h: f32) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    grad_check_sampled(f, inputs, h, usize::MAX)
}

/// Checks at most `max_coords` spread-out coordinates per input.
pub fn grad_check_sampled<F>(f: F, inputs: &[Tensor], h: f32, max_coords: usize) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&tape, &vars)?;
    let out_val = out.value();
    let proj = projection(out_val.numel());
    let seed = Tensor::from_vec(out_val.shape(), proj.iter().map(|&p| p as f32).collect())?;
    let grads = tape.backward_with(out, seed)?;

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let tape = Tape::no_grad();
        let vars: Vec<Var<'_>> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let o = f(&tape, &vars)?.value();
        let v: f64 = o.data().iter().zip(&proj).map(|(&a, &p)| a as f64 * p).sum();
        if !v.is_finite() {
            return Err(TensorError::NonFinite(format!("objective evaluated to {v}")));
        }
        Ok(v)
    };

    let mut per_input = Vec::with_capacity(inputs.len());
    let mut max_abs = 0.0f64;
    let mut checked = 0;
    let mut xs = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        if !analytic.is_finite() {
            return Err(TensorError::NonFinite(format!("analytic gradient of input {k}")));
        }
        let n = inputs[k].numel();
        let (mut err, mut scale) = (0.0f64, 0.0f64);
        for i in sample_coords(n, max_coords) {
            let orig = xs[k].data()[i];
            xs[k].data_mut()[i] = orig + h;
            let fp = eval(&xs)?;
            xs[k].data_mut()[i] = orig - h;
            let fm = eval(&xs)?;
            xs[k].data_mut()[i] = orig;
            // use the actually representable step
            let step = ((orig + h) as f64) - ((orig - h) as f64);
            let num = (fp - fm) / step;
            let ana = analytic.data()[i] as f64;
            err = err.max((num - ana).abs());
            scale = scale.max(num.abs()).max(ana.abs());
            checked += 1;
        }
        max_abs = max_abs.max(err);
        per_input.push(if scale > 0.0 { err / scale } else { err });
    }
    Ok(GradCheckReport {
        max_rel_err: per_input.iter().copied().fold(0.0, f64::max),
        max_abs_err: max_abs,
        per_input,
        checked,
    })
}

/// All of `0..n`, or `m` golden-ratio spaced coordinates: spread evenly but not
/// aligned with rows, so a sample does not collapse onto one column.
fn sample_coords(n: usize, m: usize) -> Vec<usize> {
    if n <= m {
        return (0..n).collect();
    }
    const PHI: f64 = 0.618_033_988_749_894_8;
    (0..m).map(|j| ((j as f64 * PHI).fract() * n as f64) as usize).collect()
}

fn projection(n: usize) -> Vec<f64> {
    // xorshift; values in [-1, 1] bounded away from zero
    let mut s: u64 = 0x9E37_79B9_7F4A_7C15;
    (0..n)
        .map(|_| {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            let u = (s >> 11) as f64 / (1u64 << 53) as f64;
            let mag = 0.5 + 0.5 * u;
            if s & 1 == 0 {
                mag
            } else {
                -mag
            }
        })
        .collect()
}
