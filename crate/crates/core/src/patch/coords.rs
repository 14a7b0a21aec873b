//! Spatio-temporal coordinates of patch tokens.

use mvinpaint_tensor::Tensor;

use super::extract::PatchPlan;
use crate::rig::{reproject_coord, CameraParams};

/// Patch centre in source pixel coordinates `(u, v)`.
pub fn patch_center_px(plan: &PatchPlan, patch: usize, downsample: usize) -> (f64, f64) {
    let half = patch as f64 / 2.0;
    (
        (plan.col as f64 + half) * downsample as f64,
        (plan.row as f64 + half) * downsample as f64,
    )
}

/// Everything needed to place tokens from one source frame in the target frame.
pub struct CoordFrame<'a> {
    pub src: &'a CameraParams,
    pub target: &'a CameraParams,
    /// Pseudo-depth of the current proxy seen from `src`; unused when `src` is the target.
    pub src_depth: Option<&'a Tensor>,
    pub tau: usize,
    pub t_now: usize,
    /// Normaliser of the relative time, see `ModelConfig::time_span`.
    pub span: f64,
    pub patch: usize,
    pub downsample: usize,
}

/// `(u, v, time)` of one token and whether reprojection succeeded. Tokens
/// from the target camera keep their native position; others are mapped
/// into the target view, or keep their source position when that fails.
pub fn patch_coord(plan: &PatchPlan, f: &CoordFrame<'_>) -> ([f32; 3], bool) {
    let (u, v) = patch_center_px(plan, f.patch, f.downsample);
    let native = (u / f.src.width as f64, v / f.src.height as f64);
    let time = (f.tau as f64 - f.t_now as f64) / f.span;
    let (uv, valid) = if f.src.id == f.target.id {
        (native, true)
    } else {
        let half = (f.patch * f.downsample) as f64 / 2.0;
        match f.src_depth.map(|d| reproject_coord(native, f.src, f.target, d, half)) {
            Some(Ok(x)) => (x, true),
            _ => (native, false),
        }
    };
    ([uv.0 as f32, uv.1 as f32, time as f32], valid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rig::{Scene, SceneSpec};

    fn plan(row: usize, col: usize) -> PatchPlan {
        PatchPlan {
            row,
            col,
            inpaint: false,
            padded: false,
        }
    }

    #[test]
    fn target_patch_at_grid_centre() {
        let s = Scene::new(SceneSpec::default()).unwrap();
        let cam = s.camera(1);
        let f = CoordFrame {
            src: cam,
            target: cam,
            src_depth: None,
            tau: 5,
            t_now: 5,
            span: 30.0,
            patch: 7,
            downsample: 4,
        };
        let (c, ok) = patch_coord(&plan(4, 4), &f);
        assert!(ok);
        assert!((c[0] - 0.5).abs() < 0.05 && (c[1] - 0.5).abs() < 0.05 && c[2] == 0.0);
    }

    #[test]
    fn temporal_coordinate_is_relative() {
        let s = Scene::new(SceneSpec::default()).unwrap();
        let cam = s.camera(1);
        let f = CoordFrame {
            src: cam,
            target: cam,
            src_depth: None,
            tau: 10,
            t_now: 30,
            span: 30.0,
            patch: 7,
            downsample: 4,
        };
        let (c, _) = patch_coord(&plan(0, 0), &f);
        assert!((c[2] + 20.0 / 30.0).abs() < 1e-6);
    }

    #[test]
    fn failed_reprojection_keeps_source_position() {
        let s = Scene::new(SceneSpec::default()).unwrap();
        let depth = Tensor::zeros(&[64, 64]);
        let f = CoordFrame {
            src: s.camera(2),
            target: s.camera(1),
            src_depth: Some(&depth),
            tau: 0,
            t_now: 0,
            span: 1.0,
            patch: 7,
            downsample: 4,
        };
        let (c, ok) = patch_coord(&plan(0, 0), &f);
        assert!(!ok);
        assert_eq!((c[0], c[1]), (14.0 / 64.0, 14.0 / 64.0));
    }
}
