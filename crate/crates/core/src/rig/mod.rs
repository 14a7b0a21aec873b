//! Synthetic calibrated multi-camera world.

pub mod camera;
pub mod context;
pub mod mesh;
pub mod raster;
pub mod reproject;
pub mod scene;
pub mod synth;

pub use camera::{camera_ring, CameraParams, ProjectionError, Vec3};
pub use context::select_context_frames;
pub use mesh::Mesh;
pub use reproject::{patch_depth, reproject_coord, ReprojectError};
pub use scene::{render_pseudo_depth, FrameBundle, GeometryProxy, ObjectShape, Scene, SceneSpec, Texture, Trajectory};
pub use synth::{nearest_inputs, synthesize_novel_view, NovelView};
