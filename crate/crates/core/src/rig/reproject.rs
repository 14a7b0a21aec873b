//! Mapping a patch-centre coordinate from a context camera into the target view.

use mvinpaint_tensor::Tensor;
use thiserror::Error;

use super::camera::CameraParams;

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum ReprojectError {
    #[error("no foreground depth inside the patch footprint")]
    NoDepth,
    #[error("reprojected point lies behind the destination camera")]
    BehindCamera,
}

/// Depth for a patch centred at pixel coordinates `(u, v)`: the centre pixel
/// if it has depth, otherwise the mean over non-zero pixels within `half`
/// pixels of the centre.
pub fn patch_depth(depth: &Tensor, u: f64, v: f64, half: f64) -> Option<f64> {
    let (h, w) = (depth.shape()[0], depth.shape()[1]);
    let d = depth.data();
    if u >= 0.0 && v >= 0.0 && (u as usize) < w && (v as usize) < h {
        let c = d[v as usize * w + u as usize];
        if c > 0.0 {
            return Some(c as f64);
        }
    }
    let x0 = (u - half).floor().max(0.0) as usize;
    let y0 = (v - half).floor().max(0.0) as usize;
    let x1 = ((u + half).ceil().max(0.0) as usize).min(w);
    let y1 = ((v + half).ceil().max(0.0) as usize).min(h);
    let (mut sum, mut n) = (0.0f64, 0usize);
    for y in y0..y1 {
        for x in x0..x1 {
            let z = d[y * w + x];
            if z > 0.0 {
                sum += z as f64;
                n += 1;
            }
        }
    }
    (n > 0).then(|| sum / n as f64)
}

/// Reprojects normalised source coordinates `x` (pixel / resolution) into
/// `dst`, using the source camera's pseudo-depth of the current proxy.
/// The result is normalised by the destination resolution and may fall
/// outside `[0,1]`.
pub fn reproject_coord(
    x: (f64, f64),
    src: &CameraParams,
    dst: &CameraParams,
    src_depth: &Tensor,
    half: f64,
) -> Result<(f64, f64), ReprojectError> {
    let (u, v) = (x.0 * src.width as f64, x.1 * src.height as f64);
    let z = patch_depth(src_depth, u, v, half).ok_or(ReprojectError::NoDepth)?;
    let p = src.unproject(u, v, z).map_err(|_| ReprojectError::NoDepth)?;
    let (du, dv, _) = dst.project(p).map_err(|_| ReprojectError::BehindCamera)?;
    Ok((du / dst.width as f64, dv / dst.height as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rig::scene::{render_pseudo_depth, Scene, SceneSpec};

    #[test]
    fn identity_when_source_is_destination() {
        let s = Scene::new(SceneSpec::default()).unwrap();
        let cam = s.camera(2);
        let depth = render_pseudo_depth(&s.proxy(0), cam);
        let x = (0.5, 0.5);
        let y = reproject_coord(x, cam, cam, &depth, 14.0).unwrap();
        assert!((x.0 - y.0).abs() < 1e-5 && (x.1 - y.1).abs() < 1e-5);
    }

    #[test]
    fn matches_direct_projection_of_the_surface_point() {
        let s = Scene::new(SceneSpec::default()).unwrap();
        let (a, b) = (s.camera(2), s.camera(3));
        let depth = render_pseudo_depth(&s.proxy_with(0, 0.0), a);
        let (u, v) = (32.5, 30.5);
        let z = depth.data()[30 * 64 + 32] as f64;
        let p = a.unproject(u, v, z).unwrap();
        let (pu, pv, _) = b.project(p).unwrap();
        let got = reproject_coord((u / 64.0, v / 64.0), a, b, &depth, 14.0).unwrap();
        assert!((got.0 * 64.0 - pu).abs() < 1.0 && (got.1 * 64.0 - pv).abs() < 1.0);
    }

    #[test]
    fn background_patch_has_no_depth() {
        let s = Scene::new(SceneSpec::default()).unwrap();
        let cam = s.camera(1);
        let depth = render_pseudo_depth(&s.proxy(0), cam);
        assert_eq!(
            reproject_coord((0.02, 0.02), cam, s.camera(2), &depth, 2.0),
            Err(ReprojectError::NoDepth)
        );
    }

    #[test]
    fn footprint_mean_used_off_silhouette() {
        let mut d = Tensor::zeros(&[8, 8]);
        d.data_mut()[2 * 8 + 5] = 2.0;
        d.data_mut()[3 * 8 + 5] = 4.0;
        assert_eq!(patch_depth(&d, 3.5, 3.5, 2.0), Some(3.0));
        assert_eq!(patch_depth(&d, 5.5, 2.5, 2.0), Some(2.0));
        assert_eq!(patch_depth(&d, 0.5, 7.5, 1.0), None);
    }
}
