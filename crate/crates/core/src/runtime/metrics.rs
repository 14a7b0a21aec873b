//! Image quality metrics on `[3,H,W]` images in `[0,1]`.

use mvinpaint_tensor::Tensor;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

/// `10 log10(1 / MSE)` with peak 1, over all pixels or over the pixels where
/// the single-channel `mask` is nonzero. Identical inputs give `+inf`; an
/// empty mask gives NaN.
pub fn psnr(a: &Tensor, b: &Tensor, mask: Option<&Tensor>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "psnr shape mismatch");
    let hw = a.shape()[1] * a.shape()[2];
    let mut se = 0.0f64;
    let mut n = 0usize;
    for (i, (&x, &y)) in a.data().iter().zip(b.data()).enumerate() {
        if mask.map_or(true, |m| m.data()[i % hw] > 0.0) {
            let d = x as f64 - y as f64;
            se += d * d;
            n += 1;
        }
    }
    if n == 0 {
        return f64::NAN;
    }
    let mse = se / n as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

/// ITU-R BT.601 luma `[H,W]` of a `[3,H,W]` image.
pub fn luma(img: &Tensor) -> Tensor {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let d = img.data();
    Tensor::from_fn(&[h, w], |i| 0.299 * d[i] + 0.587 * d[h * w + i] + 0.114 * d[2 * h * w + i])
}

fn gaussian_window() -> Vec<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|x| x / s).collect()
}

/// Separable Gaussian filter over the valid region (no padding).
fn filter(x: &[f64], h: usize, w: usize, g: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = g.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for xo in 0..ow {
            tmp[y * ow + xo] = (0..k).map(|j| g[j] * x[y * w + xo + j]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for yo in 0..oh {
        for xo in 0..ow {
            out[yo * ow + xo] = (0..k).map(|j| g[j] * tmp[(yo + j) * ow + xo]).sum();
        }
    }
    (out, oh, ow)
}

/// Local SSIM map of two `[H,W]` grayscale images (valid windows only).
pub fn ssim_map(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (h, w) = (a.shape()[0], a.shape()[1]);
    let g = gaussian_window();
    let x: Vec<f64> = a.data().iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = b.data().iter().map(|&v| v as f64).collect();
    let f = |v: &[f64]| filter(v, h, w, &g).0;
    let mx = f(&x);
    let my = f(&y);
    let sxx = f(&x.iter().map(|v| v * v).collect::<Vec<_>>());
    let syy = f(&y.iter().map(|v| v * v).collect::<Vec<_>>());
    let sxy = f(&x.iter().zip(&y).map(|(p, q)| p * q).collect::<Vec<_>>());
    let (c1, c2) = ((K1 * 1.0).powi(2), (K2 * 1.0).powi(2));
    (0..mx.len())
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cxy = sxy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .collect()
}

/// Mean local SSIM on luma with an 11x11 Gaussian window. With a mask both
/// images are zeroed outside it first.
pub fn ssim(a: &Tensor, b: &Tensor, mask: Option<&Tensor>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "ssim shape mismatch");
    let (mut la, mut lb) = (luma(a), luma(b));
    if let Some(m) = mask {
        for (i, &mv) in m.data().iter().enumerate() {
            if mv <= 0.0 {
                la.data_mut()[i] = 0.0;
                lb.data_mut()[i] = 0.0;
            }
        }
    }
    let map = ssim_map(&la, &lb);
    map.iter().sum::<f64>() / map.len() as f64
}

/// Formats a metric for CSV; `+inf` is written as `inf`.
pub fn fmt_metric(v: f64) -> String {
    if v.is_infinite() && v > 0.0 {
        "inf".to_string()
    } else {
        format!("{v:.6}")
    }
}

/// Inverse of [`fmt_metric`].
pub fn parse_metric(s: &str) -> Option<f64> {
    match s.trim() {
        "inf" => Some(f64::INFINITY),
        x => x.parse().ok(),
    }
}
