//! Novel-view synthesis by forward lookup through the proxy, which leaves
//! holes wherever no input view saw the surface.

use mvinpaint_tensor::Tensor;

use super::camera::{dot, normalize, sub, CameraParams};
use super::scene::{render_pseudo_depth, FrameBundle, GeometryProxy};

/// Ids of the `k` input cameras whose centres lie closest to the target's.
/// Ties go to the lower id.
pub fn nearest_inputs(cameras: &[CameraParams], target_id: usize, k: usize) -> Vec<usize> {
    let target = cameras.iter().find(|c| c.id == target_id).expect("target camera in rig");
    let tc = target.center();
    let mut others: Vec<(f64, usize)> = cameras
        .iter()
        .filter(|c| c.id != target_id)
        .map(|c| (super::camera::norm(sub(c.center(), tc)), c.id))
        .collect();
    // Distances of symmetric ring cameras differ only by rounding noise.
    others.sort_by(|a, b| {
        if (a.0 - b.0).abs() <= 1e-9 * a.0.max(1.0) {
            a.1.cmp(&b.1)
        } else {
            a.0.total_cmp(&b.0)
        }
    });
    others.into_iter().take(k).map(|(_, id)| id).collect()
}

pub struct NovelView {
    /// `[3,H,W]`, holes are black.
    pub rgb: Tensor,
    /// `[H,W]`, 1 on holes.
    pub error: Tensor,
    /// `[H,W]`, proxy silhouette.
    pub mask: Tensor,
    /// `[H,W]`, proxy depth seen from the target.
    pub depth: Tensor,
}

/// Renders the target view from `inputs` (frames at one timestep with true
/// depth) through `proxy`. A source pixel is usable when its depth agrees
/// with the proxy point's depth in that camera to within `threshold`; among
/// usable sources the one whose viewing ray is best aligned with the
/// target's wins.
pub fn synthesize_novel_view(
    inputs: &[(&FrameBundle, &CameraParams)],
    proxy: &GeometryProxy,
    target: &CameraParams,
    threshold: f64,
) -> NovelView {
    let depth = render_pseudo_depth(proxy, target);
    let (w, h) = (target.width, target.height);
    let hw = w * h;
    let mut rgb = Tensor::zeros(&[3, h, w]);
    let mut error = Tensor::zeros(&[h, w]);
    let mut mask = Tensor::zeros(&[h, w]);
    let tc = target.center();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let z = depth.data()[i] as f64;
            if z <= 0.0 {
                continue;
            }
            mask.data_mut()[i] = 1.0;
            let p = target.unproject(x as f64 + 0.5, y as f64 + 0.5, z).expect("positive depth");
            let view = normalize(sub(p, tc));
            let mut best: Option<(f64, [f32; 3])> = None;
            for (frame, cam) in inputs {
                let Some((sx, sy)) = lookup(frame, cam, p, threshold) else {
                    continue;
                };
                let align = dot(view, normalize(sub(p, cam.center())));
                if best.map_or(true, |(b, _)| align > b) {
                    let sw = cam.width;
                    let shw = sw * cam.height;
                    let d = frame.rgb.data();
                    let j = sy * sw + sx;
                    best = Some((align, [d[j], d[shw + j], d[2 * shw + j]]));
                }
            }
            match best {
                Some((_, c)) => {
                    for (ch, v) in c.into_iter().enumerate() {
                        rgb.data_mut()[ch * hw + i] = v;
                    }
                }
                None => error.data_mut()[i] = 1.0,
            }
        }
    }
    NovelView { rgb, error, mask, depth }
}

/// The source pixel containing the projection of `p`, if it exists and its
/// recorded depth agrees with the projected depth.
fn lookup(frame: &FrameBundle, cam: &CameraParams, p: [f64; 3], threshold: f64) -> Option<(usize, usize)> {
    let (u, v, z) = cam.project(p).ok()?;
    if !(u >= 0.0 && v >= 0.0) {
        return None;
    }
    let (sx, sy) = (u.floor() as usize, v.floor() as usize);
    if sx >= cam.width || sy >= cam.height {
        return None;
    }
    let d = frame.depth.data()[sy * cam.width + sx] as f64;
    (d > 0.0 && (z - d).abs() <= threshold).then_some((sx, sy))
}
