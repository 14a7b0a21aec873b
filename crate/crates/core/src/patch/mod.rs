//! Frames to feature maps to routed, positioned patch tokens.

pub mod context;
pub mod coords;
pub mod encoder;
pub mod extract;

use mvinpaint_tensor::Tensor;

pub use context::{build_context, encode_frame, BuiltContext, EncodedFrame, FrameKey};
pub use coords::{patch_center_px, patch_coord, CoordFrame};
pub use encoder::{encode, encoder_input, init_encoder, pool_mask, EncoderIds};
pub use extract::{gather_tokens, grid_starts, plan_patches, PatchPlan};

/// Encoder output with its provenance and cell-resolution masks.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    /// `[C, h, w]`.
    pub features: Tensor,
    /// Any-foreground per cell, row-major `h x w`.
    pub fg: Vec<bool>,
    /// Any-error per cell; all false for input views.
    pub err: Vec<bool>,
    pub camera_id: usize,
    pub timestep: usize,
    /// Unpadded image size `(H, W)`.
    pub image_size: (usize, usize),
}

impl FeatureMap {
    pub fn h(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn w(&self) -> usize {
        self.features.shape()[2]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenFlags {
    pub inpaint: bool,
    pub context: bool,
    pub reproj_valid: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct GridPos {
    pub camera_id: usize,
    pub timestep: usize,
    pub row: usize,
    pub col: usize,
}

/// A batch of tokens with coordinates, routing flags and grid positions.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet {
    /// `[n, C*P*P]`, `None` when empty.
    pub tokens: Option<Tensor>,
    /// Target-view `u`, `v` and relative time per token.
    pub coords: Vec<[f32; 3]>,
    pub flags: Vec<TokenFlags>,
    pub positions: Vec<GridPos>,
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// `[n, 3]` coordinate tensor; `c` must be non-empty.
pub(crate) fn coords_tensor(c: &[[f32; 3]]) -> Tensor {
    Tensor::from_vec(&[c.len(), 3], c.iter().flatten().copied().collect()).expect("n x 3")
}
