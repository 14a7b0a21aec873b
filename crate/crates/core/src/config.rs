//! Flat `key=value` run configuration shared by every command.

use std::fmt::Write as _;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rig::{ObjectShape, SceneSpec, Trajectory};

/// Architecture and context-assembly settings of the inpainting model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Feature channels C of the encoder output.
    pub channels: usize,
    /// Width of the first encoder stage.
    pub hidden: usize,
    /// Downsampling factor s_f, a power of two.
    pub downsample: usize,
    pub patch: usize,
    pub overlap: usize,
    pub d_model: usize,
    pub heads: usize,
    pub n_groups: usize,
    pub n_blocks: usize,
    pub ffn_mult: usize,
    /// Per-axis rotary sub-dimensions (x, y, t) of one head.
    pub rope_dims: [usize; 3],
    pub rope_base: f64,
    pub rope_spatial_scale: f64,
    pub rope_temporal_scale: f64,
    pub n_c: usize,
    pub n_w: usize,
    pub k_w: usize,
    pub k_min: usize,
    pub use_multiview: bool,
    pub use_temporal: bool,
    pub use_rope: bool,
    pub use_masks: bool,
    pub use_pseudo_depth: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            hidden: 8,
            downsample: 4,
            patch: 7,
            overlap: 3,
            d_model: 96,
            heads: 4,
            n_groups: 2,
            n_blocks: 4,
            ffn_mult: 4,
            rope_dims: [8, 8, 8],
            rope_base: 10000.0,
            rope_spatial_scale: 100.0,
            rope_temporal_scale: 10.0,
            n_c: 3,
            n_w: 3,
            k_w: 10,
            k_min: 16,
            use_multiview: true,
            use_temporal: true,
            use_rope: true,
            use_masks: true,
            use_pseudo_depth: true,
        }
    }
}

impl ModelConfig {
    pub fn in_channels(&self) -> usize {
        if self.use_pseudo_depth {
            6
        } else {
            5
        }
    }

    pub fn stages(&self) -> usize {
        self.downsample.trailing_zeros() as usize
    }

    pub fn token_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    /// Context timestep offsets actually used (the temporal ablation drops the past).
    pub fn context_window(&self) -> (usize, usize) {
        if self.use_temporal {
            (self.n_c, self.n_w)
        } else {
            (0, 0)
        }
    }

    /// Normaliser of the relative temporal coordinate.
    pub fn time_span(&self) -> f64 {
        let (n_c, n_w) = self.context_window();
        (self.k_w * n_w).max(n_c).max(1) as f64
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.overlap >= self.patch {
            return bad("overlap must be smaller than patch");
        }
        if self.channels == 0 || self.channels % 2 != 0 {
            return bad("channels must be positive and even");
        }
        if !self.downsample.is_power_of_two() || self.downsample < 2 {
            return bad("downsample must be a power of two >= 2");
        }
        if self.k_w <= 1 {
            return bad("k_w must be > 1");
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return bad("d_model must be divisible by heads");
        }
        if self.rope_dims.iter().any(|d| d % 2 != 0) || self.rope_dims.iter().sum::<usize>() != self.head_dim() {
            return bad("rope dims must be even and sum to the head dimension");
        }
        if self.n_groups == 0 || self.n_blocks == 0 || self.hidden == 0 || self.ffn_mult == 0 {
            return bad("n_g, n_b, hidden and ffn_mult must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f32,
    pub disc_lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub lambda_img: f32,
    pub lambda_adv: f32,
    /// Trailing timesteps held out of training and used for validation.
    pub holdout: usize,
    pub val_every: usize,
    /// Train through the sparsification gate with rho < 1.
    pub sparsify_train: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 1e-3,
            disc_lr: 1e-4,
            beta1: 0.9,
            beta2: 0.99,
            lambda_img: 1.0,
            lambda_adv: 0.01,
            holdout: 8,
            val_every: 200,
            sparsify_train: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub scene: SceneSpec,
    pub target_camera: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seed: u64,
    pub rho: f32,
    pub use_cache: bool,
    pub deterministic: bool,
    pub bench_rhos: Vec<f32>,
    pub bench_frames: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scene: SceneSpec::default(),
            target_camera: 1,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            seed: 0,
            rho: 1.0,
            use_cache: true,
            deterministic: false,
            bench_rhos: vec![1.0, 0.5, 0.25, 0.1],
            bench_frames: 32,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {v:?}"))),
    }
}

fn parse_dims(key: &str, v: &str) -> Result<[usize; 3]> {
    let d: Vec<usize> = v.split(',').map(|x| parse(key, x.trim())).collect::<Result<_>>()?;
    d.try_into().map_err(|_| Error::Config(format!("{key}: expected three comma-separated values")))
}

impl RunConfig {
    /// Parses `key=value` lines on top of the defaults. Blank lines and `#`
    /// comments are skipped; unknown keys are an error.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply(text)?;
        c.validate()?;
        Ok(c)
    }

    /// Applies `key=value` lines on top of `self` without validating.
    pub fn apply(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let s = &mut self.scene;
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "n_cameras" => s.n_cameras = parse(key, v)?,
            "width" => s.width = parse(key, v)?,
            "height" => s.height = parse(key, v)?,
            "timesteps" => s.timesteps = parse(key, v)?,
            "ring_radius" => s.ring_radius = parse(key, v)?,
            "ring_height" => s.ring_height = parse(key, v)?,
            "focal_scale" => s.focal_scale = parse(key, v)?,
            "degradation" => s.degradation = parse(key, v)?,
            "texture_seed" => s.texture_seed = parse(key, v)?,
            "spin" => s.trajectory.spin = parse(key, v)?,
            "sway" => s.trajectory.sway = parse(key, v)?,
            "sway_rate" => s.trajectory.sway_rate = parse(key, v)?,
            "shape" => {
                s.shape = match v {
                    "compound" => ObjectShape::Compound { radius: 1.0 },
                    "sphere" => ObjectShape::Sphere { radius: 1.0 },
                    "cuboid" => ObjectShape::Cuboid { half: [0.8, 0.6, 0.7] },
                    _ => return Err(Error::Config(format!("shape: unknown {v:?}"))),
                }
            }
            "target_camera" => self.target_camera = parse(key, v)?,
            "channels" => m.channels = parse(key, v)?,
            "hidden" => m.hidden = parse(key, v)?,
            "downsample" => m.downsample = parse(key, v)?,
            "patch" => m.patch = parse(key, v)?,
            "overlap" => m.overlap = parse(key, v)?,
            "d_model" => m.d_model = parse(key, v)?,
            "heads" => m.heads = parse(key, v)?,
            "n_g" => m.n_groups = parse(key, v)?,
            "n_b" => m.n_blocks = parse(key, v)?,
            "ffn_mult" => m.ffn_mult = parse(key, v)?,
            "rope_dims" => m.rope_dims = parse_dims(key, v)?,
            "rope_base" => m.rope_base = parse(key, v)?,
            "rope_spatial_scale" => m.rope_spatial_scale = parse(key, v)?,
            "rope_temporal_scale" => m.rope_temporal_scale = parse(key, v)?,
            "n_c" => m.n_c = parse(key, v)?,
            "n_w" => m.n_w = parse(key, v)?,
            "k_w" => m.k_w = parse(key, v)?,
            "k_min" => m.k_min = parse(key, v)?,
            "use_multiview" => m.use_multiview = parse_bool(key, v)?,
            "use_temporal" => m.use_temporal = parse_bool(key, v)?,
            "use_rope" => m.use_rope = parse_bool(key, v)?,
            "use_masks" => m.use_masks = parse_bool(key, v)?,
            "use_pseudo_depth" => m.use_pseudo_depth = parse_bool(key, v)?,
            "steps" => t.steps = parse(key, v)?,
            "lr" => t.lr = parse(key, v)?,
            "disc_lr" => t.disc_lr = parse(key, v)?,
            "beta1" => t.beta1 = parse(key, v)?,
            "beta2" => t.beta2 = parse(key, v)?,
            "lambda_img" => t.lambda_img = parse(key, v)?,
            "lambda_adv" => t.lambda_adv = parse(key, v)?,
            "holdout" => t.holdout = parse(key, v)?,
            "val_every" => t.val_every = parse(key, v)?,
            "sparsify_train" => t.sparsify_train = parse_bool(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "sparsify_rho" => self.rho = parse(key, v)?,
            "use_cache" => self.use_cache = parse_bool(key, v)?,
            "deterministic" => self.deterministic = parse_bool(key, v)?,
            "bench_rhos" => {
                self.bench_rhos = v.split(',').map(|x| parse(key, x.trim())).collect::<Result<_>>()?;
            }
            "bench_frames" => self.bench_frames = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies a named ablation switch.
    pub fn ablate(&mut self, name: &str) -> Result<()> {
        match name {
            "single-cam" => self.model.use_multiview = false,
            "no-masks" => self.model.use_masks = false,
            "no-temporal" => self.model.use_temporal = false,
            "no-rope" => self.model.use_rope = false,
            _ => return Err(Error::Config(format!("unknown ablation {name:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let rho_ok = |r: f32| r > 0.0 && r <= 1.0;
        if !rho_ok(self.rho) || !self.bench_rhos.iter().all(|&r| rho_ok(r)) {
            return Err(Error::Config("rho must lie in (0, 1]".into()));
        }
        if !(1..=self.scene.n_cameras).contains(&self.target_camera) {
            return Err(Error::Config("target_camera must be a ring id".into()));
        }
        let t = &self.train;
        if t.lambda_img < 0.0 || t.lambda_adv < 0.0 || !(t.lr > 0.0 && t.disc_lr > 0.0) {
            return Err(Error::Config("loss weights must be >= 0 and learning rates > 0".into()));
        }
        if !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        let s = &self.scene;
        if s.width % self.model.downsample != 0 || s.height % self.model.downsample != 0 {
            return Err(Error::Config("resolution must be divisible by downsample".into()));
        }
        crate::rig::Scene::new(s.clone()).map_err(Error::Config)?;
        Ok(())
    }

    /// Every key with its resolved value, in a fixed order.
    pub fn to_text(&self) -> String {
        let (s, m, t) = (&self.scene, &self.model, &self.train);
        let shape = match s.shape {
            ObjectShape::Compound { .. } => "compound",
            ObjectShape::Sphere { .. } => "sphere",
            ObjectShape::Cuboid { .. } => "cuboid",
        };
        let Trajectory { spin, sway, sway_rate } = s.trajectory;
        let rhos: Vec<String> = self.bench_rhos.iter().map(|r| r.to_string()).collect();
        let mut o = String::new();
        let _ = write!(
            o,
            "n_cameras={}\nwidth={}\nheight={}\ntimesteps={}\nring_radius={}\nring_height={}\n\
             focal_scale={}\ndegradation={}\ntexture_seed={}\nspin={spin}\nsway={sway}\nsway_rate={sway_rate}\n\
             shape={shape}\ntarget_camera={}\n",
            s.n_cameras, s.width, s.height, s.timesteps, s.ring_radius, s.ring_height, s.focal_scale, s.degradation,
            s.texture_seed, self.target_camera
        );
        let _ = write!(
            o,
            "channels={}\nhidden={}\ndownsample={}\npatch={}\noverlap={}\nd_model={}\nheads={}\nn_g={}\nn_b={}\n\
             ffn_mult={}\nrope_dims={},{},{}\nrope_base={}\nrope_spatial_scale={}\nrope_temporal_scale={}\n\
             n_c={}\nn_w={}\nk_w={}\nk_min={}\nuse_multiview={}\nuse_temporal={}\nuse_rope={}\nuse_masks={}\n\
             use_pseudo_depth={}\n",
            m.channels, m.hidden, m.downsample, m.patch, m.overlap, m.d_model, m.heads, m.n_groups, m.n_blocks,
            m.ffn_mult, m.rope_dims[0], m.rope_dims[1], m.rope_dims[2], m.rope_base, m.rope_spatial_scale,
            m.rope_temporal_scale, m.n_c, m.n_w, m.k_w, m.k_min, m.use_multiview, m.use_temporal, m.use_rope,
            m.use_masks, m.use_pseudo_depth
        );
        let _ = write!(
            o,
            "steps={}\nlr={}\ndisc_lr={}\nbeta1={}\nbeta2={}\nlambda_img={}\nlambda_adv={}\nholdout={}\n\
             val_every={}\nsparsify_train={}\nseed={}\nsparsify_rho={}\nuse_cache={}\ndeterministic={}\n\
             bench_rhos={}\nbench_frames={}\n",
            t.steps, t.lr, t.disc_lr, t.beta1, t.beta2, t.lambda_img, t.lambda_adv, t.holdout, t.val_every,
            t.sparsify_train, self.seed, self.rho, self.use_cache, self.deterministic, rhos.join(","),
            self.bench_frames
        );
        o
    }

    /// Short hex digest of [`RunConfig::to_text`].
    pub fn hash(&self) -> String {
        let d = Sha256::digest(self.to_text().as_bytes());
        d.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}
