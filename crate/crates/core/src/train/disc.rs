//! Strided convolutional discriminator.

use mvinpaint_tensor::Var;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::params::ParamStore;

pub const DISC_CHANNELS: [usize; 5] = [3, 16, 32, 64, 1];
const SLOPE: f32 = 0.2;

#[derive(Clone, Debug)]
pub struct Discriminator {
    pub params: ParamStore,
    pub convs: Vec<(usize, usize)>,
}

impl Discriminator {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::with_rng(&mut rng)
    }

    pub fn with_rng(rng: &mut impl Rng) -> Self {
        let mut params = ParamStore::new();
        let convs = DISC_CHANNELS
            .windows(2)
            .enumerate()
            .map(|(i, io)| {
                let std = (2.0 / (io[0] * 16) as f32).sqrt();
                let w = params.add_normal(format!("disc.c{i}.w"), &[io[1], io[0], 4, 4], std, rng);
                let b = params.add_const(format!("disc.c{i}.b"), &[io[1]], 0.0);
                (w, b)
            })
            .collect();
        Self { params, convs }
    }

    /// Probability that the `[3,H,W]` image is real: four 4x4 stride-2
    /// convolutions, mean of the final logit map, sigmoid.
    pub fn forward<'t>(&self, img: Var<'t>, w: &[Var<'t>]) -> Result<Var<'t>> {
        let mut x = img;
        let last = self.convs.len() - 1;
        for (i, &(wi, bi)) in self.convs.iter().enumerate() {
            x = x.conv2d(w[wi], Some(w[bi]), 2, 1)?;
            if i < last {
                x = x.leaky_relu(SLOPE);
            }
        }
        Ok(x.mean().sigmoid())
    }
}
