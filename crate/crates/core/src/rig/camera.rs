//! Calibrated pinhole cameras.
//!
//! Conventions: world → camera is `X_c = R·X_w + t`; the camera looks down
//! +Z with +X right and +Y down. Pixel `(i, j)` covers `[i, i+1) × [j, j+1)`
//! in continuous image coordinates, so its centre is `(i + 0.5, j + 0.5)`.

use thiserror::Error;

pub type Vec3 = [f64; 3];

/// Smallest camera-space depth accepted by [`CameraParams::project`].
pub const MIN_DEPTH: f64 = 1e-6;

#[derive(Debug, Error, Clone, Copy, PartialEq)]
pub enum ProjectionError {
    #[error("point at or behind the camera (z = {0})")]
    BehindCamera(f64),
    #[error("invalid depth {0}")]
    InvalidDepth(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct CameraParams {
    pub id: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub rotation: [[f64; 3]; 3],
    pub translation: Vec3,
    pub width: usize,
    pub height: usize,
}

pub(crate) fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub(crate) fn normalize(a: Vec3) -> Vec3 {
    let n = norm(a);
    [a[0] / n, a[1] / n, a[2] / n]
}

impl CameraParams {
    /// Camera at `eye` looking at `target`, with world `up` projecting upwards in the image.
    #[allow(clippy::too_many_arguments)]
    pub fn look_at(id: usize, eye: Vec3, target: Vec3, up: Vec3, focal: f64, width: usize, height: usize) -> Self {
        let z = normalize(sub(target, eye));
        let x = normalize(cross(z, up));
        let y = cross(z, x);
        let rotation = [x, y, z];
        let translation = [-dot(x, eye), -dot(y, eye), -dot(z, eye)];
        Self {
            id,
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            rotation,
            translation,
            width,
            height,
        }
    }

    /// Checks the intrinsic ranges and that the rotation is proper orthonormal (to 1e-5).
    pub fn validate(&self) -> Result<(), String> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(format!("camera {}: non-positive focal length", self.id));
        }
        if !(0.0..self.width as f64).contains(&self.cx) || !(0.0..self.height as f64).contains(&self.cy) {
            return Err(format!("camera {}: principal point outside the image", self.id));
        }
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let d = dot(r[i], r[j]);
                let want = if i == j { 1.0 } else { 0.0 };
                if (d - want).abs() > 1e-5 {
                    return Err(format!("camera {}: rotation is not orthonormal", self.id));
                }
            }
        }
        let det = dot(r[0], cross(r[1], r[2]));
        if (det - 1.0).abs() > 1e-5 {
            return Err(format!("camera {}: rotation determinant {det}", self.id));
        }
        Ok(())
    }

    pub fn to_camera(&self, p: Vec3) -> Vec3 {
        let r = &self.rotation;
        [
            dot(r[0], p) + self.translation[0],
            dot(r[1], p) + self.translation[1],
            dot(r[2], p) + self.translation[2],
        ]
    }

    pub fn to_world(&self, pc: Vec3) -> Vec3 {
        let q = sub(pc, self.translation);
        let r = &self.rotation;
        [
            r[0][0] * q[0] + r[1][0] * q[1] + r[2][0] * q[2],
            r[0][1] * q[0] + r[1][1] * q[1] + r[2][1] * q[2],
            r[0][2] * q[0] + r[1][2] * q[1] + r[2][2] * q[2],
        ]
    }

    /// Optical centre in world coordinates.
    pub fn center(&self) -> Vec3 {
        self.to_world([0.0, 0.0, 0.0])
    }

    /// World point → continuous pixel coordinates and camera-space depth.
    pub fn project(&self, p: Vec3) -> Result<(f64, f64, f64), ProjectionError> {
        let c = self.to_camera(p);
        if c[2] <= MIN_DEPTH {
            return Err(ProjectionError::BehindCamera(c[2]));
        }
        Ok((self.fx * c[0] / c[2] + self.cx, self.fy * c[1] / c[2] + self.cy, c[2]))
    }

    /// Continuous pixel coordinates plus camera-space depth → world point.
    pub fn unproject(&self, u: f64, v: f64, z: f64) -> Result<Vec3, ProjectionError> {
        if !(z > 0.0) {
            return Err(ProjectionError::InvalidDepth(z));
        }
        let c = [(u - self.cx) / self.fx * z, (v - self.cy) / self.fy * z, z];
        Ok(self.to_world(c))
    }
}

/// `n` cameras evenly spaced on a horizontal ring around the origin, ids `1..=n`.
pub fn camera_ring(n: usize, radius: f64, height: f64, focal: f64, width: usize, image_height: usize) -> Vec<CameraParams> {
    (0..n)
        .map(|i| {
            let a = std::f64::consts::TAU * i as f64 / n as f64;
            let eye = [radius * a.cos(), radius * a.sin(), height];
            CameraParams::look_at(i + 1, eye, [0.0, 0.0, 0.0], [0.0, 0.0, 1.0], focal, width, image_height)
        })
        .collect()
}
