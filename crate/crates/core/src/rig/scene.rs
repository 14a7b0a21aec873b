//! The synthetic capture setup: a textured rigid object moving in front of a
//! camera ring, its ground-truth renders and a degraded geometry proxy.

use mvinpaint_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::camera::{camera_ring, CameraParams, Vec3};
use super::mesh::{cuboid, uv_sphere, Mesh};
use super::raster::rasterize;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ObjectShape {
    Sphere { radius: f64 },
    Cuboid { half: Vec3 },
    /// Sphere body with a box arm sticking out sideways; the arm self-occludes.
    Compound { radius: f64 },
}

/// Rigid motion: spin about the world z axis plus a horizontal sway.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Trajectory {
    pub spin: f64,
    pub sway: f64,
    pub sway_rate: f64,
}

impl Trajectory {
    pub const STATIC: Trajectory = Trajectory {
        spin: 0.0,
        sway: 0.0,
        sway_rate: 0.0,
    };

    pub fn object_to_world(&self, t: usize, p: Vec3) -> Vec3 {
        let a = self.spin * t as f64;
        let (s, c) = a.sin_cos();
        let dx = self.sway * (self.sway_rate * t as f64).sin();
        [c * p[0] - s * p[1] + dx, s * p[0] + c * p[1], p[2]]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub shape: ObjectShape,
    pub texture_seed: u64,
    pub trajectory: Trajectory,
    pub n_cameras: usize,
    pub ring_radius: f64,
    pub ring_height: f64,
    /// Focal length as a fraction of the image width.
    pub focal_scale: f64,
    pub width: usize,
    pub height: usize,
    pub timesteps: usize,
    /// Proxy vertex-quantisation step in object-radius units.
    pub degradation: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            shape: ObjectShape::Compound { radius: 1.0 },
            texture_seed: 7,
            trajectory: Trajectory {
                spin: 0.06,
                sway: 0.15,
                sway_rate: 0.11,
            },
            n_cameras: 5,
            ring_radius: 3.5,
            ring_height: 0.8,
            focal_scale: 0.9,
            width: 64,
            height: 64,
            timesteps: 64,
            degradation: 0.05,
        }
    }
}

/// Procedural colour field over object space: a few seeded plane waves per channel.
#[derive(Clone, Debug)]
pub struct Texture {
    waves: Vec<[f64; 5]>,
}

impl Texture {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let waves = (0..9)
            .map(|_| {
                let dir: Vec3 = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
                let n = super::camera::norm(dir).max(1e-3);
                let freq = rng.gen_range(1.5..4.5);
                [dir[0] / n * freq, dir[1] / n * freq, dir[2] / n * freq, rng.gen_range(0.0..std::f64::consts::TAU), 0.0]
            })
            .collect();
        Self { waves }
    }

    /// RGB in [0.1, 0.9] at object-space point `p`.
    pub fn color(&self, p: Vec3) -> [f32; 3] {
        let mut out = [0.0f32; 3];
        for (ch, o) in out.iter_mut().enumerate() {
            let mut v = 0.5;
            for w in &self.waves[ch * 3..ch * 3 + 3] {
                v += 0.13 * (w[0] * p[0] + w[1] * p[1] + w[2] * p[2] + w[3]).sin();
            }
            *o = v.clamp(0.1, 0.9) as f32;
        }
        out
    }
}

/// A degraded mesh standing in for the reconstructed geometry at one timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct GeometryProxy {
    pub mesh: Mesh,
    pub timestep: usize,
}

/// One camera's record at one timestep. Images are channel-first: `rgb` is
/// `[3,H,W]`, the masks and depth are `[H,W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameBundle {
    pub camera_id: usize,
    pub timestep: usize,
    pub rgb: Tensor,
    pub fg_mask: Tensor,
    pub depth: Tensor,
    pub error_mask: Tensor,
}

impl FrameBundle {
    pub fn empty(camera_id: usize, timestep: usize, width: usize, height: usize) -> Self {
        Self {
            camera_id,
            timestep,
            rgb: Tensor::zeros(&[3, height, width]),
            fg_mask: Tensor::zeros(&[height, width]),
            depth: Tensor::zeros(&[height, width]),
            error_mask: Tensor::zeros(&[height, width]),
        }
    }

    pub fn height(&self) -> usize {
        self.fg_mask.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.fg_mask.shape()[1]
    }
}

/// The object and the camera ring, ready to render.
#[derive(Clone, Debug)]
pub struct Scene {
    pub spec: SceneSpec,
    pub cameras: Vec<CameraParams>,
    pub texture: Texture,
    object: Mesh,
}

impl Scene {
    pub fn new(spec: SceneSpec) -> Result<Self, String> {
        if spec.n_cameras < 4 {
            return Err(format!("need at least 4 cameras, got {}", spec.n_cameras));
        }
        if spec.width == 0 || spec.height == 0 || spec.timesteps == 0 {
            return Err("resolution and timestep count must be positive".into());
        }
        if !(spec.degradation >= 0.0 && spec.ring_radius > 0.0 && spec.focal_scale > 0.0) {
            return Err("degradation, ring radius and focal scale must be non-negative/positive".into());
        }
        let object = match spec.shape {
            ObjectShape::Sphere { radius } => uv_sphere([0.0; 3], radius, 24, 48),
            ObjectShape::Cuboid { half } => cuboid([0.0; 3], half, 6),
            ObjectShape::Compound { radius } => {
                let mut m = uv_sphere([0.0; 3], radius, 24, 48);
                m.append(&cuboid(
                    [0.95 * radius, 0.0, 0.1 * radius],
                    [0.45 * radius, 0.22 * radius, 0.22 * radius],
                    4,
                ));
                m
            }
        };
        if object.bounding_radius() >= spec.ring_radius {
            return Err("camera ring intersects the object".into());
        }
        let focal = spec.focal_scale * spec.width as f64;
        let cameras = camera_ring(spec.n_cameras, spec.ring_radius, spec.ring_height, focal, spec.width, spec.height);
        Ok(Self {
            texture: Texture::new(spec.texture_seed),
            spec,
            cameras,
            object,
        })
    }

    pub fn camera(&self, id: usize) -> &CameraParams {
        &self.cameras[id - 1]
    }

    /// Characteristic object radius, the unit of the degradation step.
    pub fn object_radius(&self) -> f64 {
        match self.spec.shape {
            ObjectShape::Sphere { radius } | ObjectShape::Compound { radius } => radius,
            ObjectShape::Cuboid { half } => half[0].max(half[1]).max(half[2]),
        }
    }

    /// Diameter of the whole rig; the camera ring encloses the object.
    pub fn diameter(&self) -> f64 {
        2.0 * self.spec.ring_radius
    }

    /// Depth-consistency tolerance used when picking source pixels.
    pub fn depth_threshold(&self) -> f64 {
        0.02 * self.diameter()
    }

    pub fn world_mesh(&self, t: usize) -> Mesh {
        self.object.map_vertices(|p| self.spec.trajectory.object_to_world(t, p))
    }

    pub fn proxy(&self, t: usize) -> GeometryProxy {
        self.proxy_with(t, self.spec.degradation)
    }

    pub fn proxy_with(&self, t: usize, degradation: f64) -> GeometryProxy {
        GeometryProxy {
            mesh: self.world_mesh(t).quantized(degradation * self.object_radius()),
            timestep: t,
        }
    }

    /// Ground-truth frame of the true object.
    pub fn render(&self, cam: &CameraParams, t: usize) -> FrameBundle {
        let mesh = self.world_mesh(t);
        let r = rasterize(&mesh, Some(&self.object.vertices), cam);
        let mut f = FrameBundle::empty(cam.id, t, cam.width, cam.height);
        let hw = cam.width * cam.height;
        for i in 0..hw {
            if r.hit(i) {
                let c = self.texture.color(r.attr[i]);
                for (ch, &v) in c.iter().enumerate() {
                    f.rgb.data_mut()[ch * hw + i] = v;
                }
                f.fg_mask.data_mut()[i] = 1.0;
                f.depth.data_mut()[i] = r.depth[i] as f32;
            }
        }
        f
    }
}

/// Z-buffer depth of the proxy seen from `cam`; 0 where it is not hit.
pub fn render_pseudo_depth(proxy: &GeometryProxy, cam: &CameraParams) -> Tensor {
    let r = rasterize(&proxy.mesh, None, cam);
    let data = r.depth.iter().map(|&d| d as f32).collect();
    Tensor::from_vec(&[cam.height, cam.width], data).expect("raster size matches camera")
}
