//! Rendered datasets: input streams, the holed novel view and its ground truth,
//! in memory or as a directory of MVT1 files plus a `manifest.txt`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use mvinpaint_tensor::{io, Tensor};

use crate::error::{Error, Result};
use crate::rig::{nearest_inputs, render_pseudo_depth, synthesize_novel_view, CameraParams, FrameBundle, Scene, SceneSpec};

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetMeta {
    pub width: usize,
    pub height: usize,
    pub timesteps: usize,
    pub target_id: usize,
    /// All ring cameras, ids `1..=N`, including the target.
    pub cameras: Vec<CameraParams>,
    /// Divisor applied to depth before it enters the encoder.
    pub depth_scale: f64,
}

impl DatasetMeta {
    pub fn n_cameras(&self) -> usize {
        self.cameras.len()
    }

    pub fn input_ids(&self) -> Vec<usize> {
        self.cameras.iter().map(|c| c.id).filter(|&i| i != self.target_id).collect()
    }

    pub fn camera(&self, id: usize) -> &CameraParams {
        &self.cameras[id - 1]
    }

    pub fn target(&self) -> &CameraParams {
        self.camera(self.target_id)
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub meta: DatasetMeta,
    /// Input frames keyed by camera id; `depth` is proxy pseudo-depth cut to the foreground.
    inputs: BTreeMap<usize, Vec<FrameBundle>>,
    /// Holed novel views: rgb = F_t, fg_mask = M_t, error_mask = E_t, depth = proxy depth.
    novel: Vec<FrameBundle>,
    /// Ground-truth renders from the target camera.
    truth: Vec<FrameBundle>,
}

/// Fraction of the novel-view mask marked as holes, per timestep.
pub fn hole_fraction(f: &FrameBundle) -> f64 {
    let m = f.fg_mask.sum() as f64;
    if m == 0.0 {
        0.0
    } else {
        f.error_mask.sum() as f64 / m
    }
}

impl Dataset {
    pub fn generate(spec: &SceneSpec, target_id: usize) -> Result<Self> {
        let scene = Scene::new(spec.clone()).map_err(Error::Config)?;
        if !(1..=spec.n_cameras).contains(&target_id) {
            return Err(Error::Config(format!("target camera {target_id} not in 1..={}", spec.n_cameras)));
        }
        let target = scene.camera(target_id).clone();
        let sources = nearest_inputs(&scene.cameras, target_id, 3);
        let input_ids: Vec<usize> = (1..=spec.n_cameras).filter(|&i| i != target_id).collect();
        let mut inputs: BTreeMap<usize, Vec<FrameBundle>> = input_ids.iter().map(|&i| (i, Vec::new())).collect();
        let mut novel = Vec::with_capacity(spec.timesteps);
        let mut truth = Vec::with_capacity(spec.timesteps);
        for t in 0..spec.timesteps {
            let proxy = scene.proxy(t);
            let rendered: BTreeMap<usize, FrameBundle> =
                input_ids.iter().map(|&i| (i, scene.render(scene.camera(i), t))).collect();
            let srcs: Vec<_> = sources.iter().map(|i| (&rendered[i], scene.camera(*i))).collect();
            let nv = synthesize_novel_view(&srcs, &proxy, &target, scene.depth_threshold());
            for (&i, f) in &rendered {
                let pd = render_pseudo_depth(&proxy, scene.camera(i));
                let depth = pd.zip_map(&f.fg_mask, |d, m| d * m)?;
                inputs.get_mut(&i).expect("input id").push(FrameBundle { depth, ..f.clone() });
            }
            novel.push(FrameBundle {
                camera_id: target_id,
                timestep: t,
                rgb: nv.rgb,
                fg_mask: nv.mask,
                depth: nv.depth,
                error_mask: nv.error,
            });
            truth.push(scene.render(&target, t));
        }
        Ok(Self {
            meta: DatasetMeta {
                width: spec.width,
                height: spec.height,
                timesteps: spec.timesteps,
                target_id,
                cameras: scene.cameras.clone(),
                depth_scale: spec.ring_radius,
            },
            inputs,
            novel,
            truth,
        })
    }

    pub fn input(&self, camera: usize, t: usize) -> Result<&FrameBundle> {
        self.inputs
            .get(&camera)
            .and_then(|v| v.get(t))
            .ok_or(Error::MissingFrame { camera, timestep: t })
    }

    pub fn novel(&self, t: usize) -> Result<&FrameBundle> {
        self.novel.get(t).ok_or(Error::MissingFrame {
            camera: self.meta.target_id,
            timestep: t,
        })
    }

    pub fn truth(&self, t: usize) -> Result<&FrameBundle> {
        self.truth.get(t).ok_or(Error::MissingFrame {
            camera: self.meta.target_id,
            timestep: t,
        })
    }

    /// Replaces the novel view at `t`, e.g. with ground truth for identity checks.
    pub fn set_novel(&mut self, t: usize, f: FrameBundle) {
        self.novel[t] = f;
    }

    /// Replaces one input frame; unknown cameras or timesteps are an error.
    pub fn set_input(&mut self, camera: usize, t: usize, f: FrameBundle) -> Result<()> {
        let slot = self
            .inputs
            .get_mut(&camera)
            .and_then(|v| v.get_mut(t))
            .ok_or_else(|| Error::Data(format!("no input frame for camera {camera} at t={t}")))?;
        *slot = f;
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("manifest.txt"), self.manifest())?;
        for (&i, frames) in &self.inputs {
            for f in frames {
                let t = f.timestep;
                io::save(&dir.join(format!("cam{i}_t{t}_rgb.mvt")), &f.rgb)?;
                io::save(&dir.join(format!("cam{i}_t{t}_mask.mvt")), &f.fg_mask)?;
                io::save(&dir.join(format!("cam{i}_t{t}_depth.mvt")), &f.depth)?;
            }
        }
        for (n, g) in self.novel.iter().zip(&self.truth) {
            let t = n.timestep;
            io::save(&dir.join(format!("novel_t{t}_rgb.mvt")), &n.rgb)?;
            io::save(&dir.join(format!("novel_t{t}_mask.mvt")), &n.fg_mask)?;
            io::save(&dir.join(format!("novel_t{t}_err.mvt")), &n.error_mask)?;
            io::save(&dir.join(format!("novel_t{t}_depth.mvt")), &n.depth)?;
            io::save(&dir.join(format!("gt_t{t}_rgb.mvt")), &g.rgb)?;
            io::save(&dir.join(format!("gt_t{t}_mask.mvt")), &g.fg_mask)?;
        }
        Ok(())
    }

    fn manifest(&self) -> String {
        let m = &self.meta;
        let mut s = String::new();
        let _ = writeln!(s, "N={}\nW={}\nH={}\nT={}", m.n_cameras(), m.width, m.height, m.timesteps);
        let _ = writeln!(s, "target={}\ndepth_scale={}", m.target_id, m.depth_scale);
        for c in &m.cameras {
            let i = c.id;
            let _ = writeln!(s, "cam{i}_intrinsics={} {} {} {}", c.fx, c.fy, c.cx, c.cy);
            let r: Vec<String> = c.rotation.iter().flatten().map(|v| v.to_string()).collect();
            let _ = writeln!(s, "cam{i}_rotation={}", r.join(" "));
            let t: Vec<String> = c.translation.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(s, "cam{i}_translation={}", t.join(" "));
        }
        s
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join("manifest.txt"))
            .map_err(|e| Error::Data(format!("{}: {e}", dir.join("manifest.txt").display())))?;
        let mut kv = BTreeMap::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Data(format!("manifest line without '=': {line}")))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| kv.get(k).ok_or_else(|| Error::Data(format!("manifest is missing {k}")));
        let num = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| Error::Data(format!("manifest {k} is not an integer"))) };
        let floats = |k: &str, n: usize| -> Result<Vec<f64>> {
            let v: Vec<f64> = get(k)?
                .split_whitespace()
                .map(|x| x.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Data(format!("manifest {k} has a malformed number")))?;
            if v.len() != n {
                return Err(Error::Data(format!("manifest {k} needs {n} values")));
            }
            Ok(v)
        };
        let (n, w, h, tn, target_id) = (num("N")?, num("W")?, num("H")?, num("T")?, num("target")?);
        let depth_scale = floats("depth_scale", 1)?[0];
        let mut cameras = Vec::with_capacity(n);
        for i in 1..=n {
            let k = floats(&format!("cam{i}_intrinsics"), 4)?;
            let r = floats(&format!("cam{i}_rotation"), 9)?;
            let t = floats(&format!("cam{i}_translation"), 3)?;
            let cam = CameraParams {
                id: i,
                fx: k[0],
                fy: k[1],
                cx: k[2],
                cy: k[3],
                rotation: [[r[0], r[1], r[2]], [r[3], r[4], r[5]], [r[6], r[7], r[8]]],
                translation: [t[0], t[1], t[2]],
                width: w,
                height: h,
            };
            cam.validate().map_err(Error::Data)?;
            cameras.push(cam);
        }
        let meta = DatasetMeta {
            width: w,
            height: h,
            timesteps: tn,
            target_id,
            cameras,
            depth_scale,
        };
        let read = |name: String, shape: &[usize], camera: usize, timestep: usize| -> Result<Tensor> {
            let path = dir.join(&name);
            if !path.exists() {
                return Err(Error::MissingFrame { camera, timestep });
            }
            let t = io::load(&path)?;
            if t.shape() != shape {
                return Err(Error::Data(format!("{name}: shape {:?}, expected {shape:?}", t.shape())));
            }
            Ok(t)
        };
        let mut inputs = BTreeMap::new();
        for i in meta.input_ids() {
            let mut frames = Vec::with_capacity(tn);
            for t in 0..tn {
                let fg_mask = read(format!("cam{i}_t{t}_mask.mvt"), &[h, w], i, t)?;
                frames.push(FrameBundle {
                    camera_id: i,
                    timestep: t,
                    rgb: read(format!("cam{i}_t{t}_rgb.mvt"), &[3, h, w], i, t)?,
                    depth: read(format!("cam{i}_t{t}_depth.mvt"), &[h, w], i, t)?,
                    error_mask: Tensor::zeros(&[h, w]),
                    fg_mask,
                });
            }
            inputs.insert(i, frames);
        }
        let (mut novel, mut truth) = (Vec::with_capacity(tn), Vec::with_capacity(tn));
        for t in 0..tn {
            novel.push(FrameBundle {
                camera_id: target_id,
                timestep: t,
                rgb: read(format!("novel_t{t}_rgb.mvt"), &[3, h, w], target_id, t)?,
                fg_mask: read(format!("novel_t{t}_mask.mvt"), &[h, w], target_id, t)?,
                error_mask: read(format!("novel_t{t}_err.mvt"), &[h, w], target_id, t)?,
                depth: read(format!("novel_t{t}_depth.mvt"), &[h, w], target_id, t)?,
            });
            truth.push(FrameBundle {
                camera_id: target_id,
                timestep: t,
                rgb: read(format!("gt_t{t}_rgb.mvt"), &[3, h, w], target_id, t)?,
                fg_mask: read(format!("gt_t{t}_mask.mvt"), &[h, w], target_id, t)?,
                depth: Tensor::zeros(&[h, w]),
                error_mask: Tensor::zeros(&[h, w]),
            });
        }
        Ok(Self {
            meta,
            inputs,
            novel,
            truth,
        })
    }
}
