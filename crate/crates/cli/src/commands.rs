use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use mvinpaint::attention::SparsifyConfig;
use mvinpaint::config::RunConfig;
use mvinpaint::data::{hole_fraction, Dataset};
use mvinpaint::model::Model;
use mvinpaint::rig::FrameBundle;
use mvinpaint::runtime::{self, Streamer};
use mvinpaint::tensor::{io, par, Tensor};
use mvinpaint::train::{split_frames, Trainer, TRAIN_HEADER};
use mvinpaint::Error;

use crate::Common;

const CONFIG_FILE: &str = "config.txt";

/// Resolves the run config from `base` (a checkpoint's stored config, if
/// any), the config file, `--set` overrides and the dedicated flags.
fn resolve(common: &Common, base: Option<&Path>) -> Result<RunConfig> {
    let mut c = RunConfig::default();
    if let Some(dir) = base {
        let p = dir.join(CONFIG_FILE);
        let text = fs::read_to_string(&p).map_err(|e| Error::Data(format!("{}: {e}", p.display())))?;
        c.apply(&text)?;
    }
    if let Some(p) = &common.config {
        let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
        c.apply(&text)?;
    }
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        c.set(k.trim(), v.trim())?;
    }
    if let Some(s) = common.seed {
        c.seed = s;
    }
    if let Some(r) = common.rho {
        c.rho = r;
    }
    for a in &common.ablate {
        c.ablate(a)?;
    }
    if common.no_cache {
        c.use_cache = false;
    }
    if common.deterministic {
        c.deterministic = true;
    }
    c.validate()?;
    par::set_parallel(!c.deterministic);
    Ok(c)
}

fn header(c: &RunConfig) -> String {
    format!("# config={}\n", c.hash())
}

fn write_config(dir: &Path, c: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(CONFIG_FILE), format!("{}{}", header(c), c.to_text()))?;
    Ok(())
}

/// The dataset must have been rendered with the resolution and target the config expects.
fn load_data(dir: &Path, c: &RunConfig) -> Result<Dataset> {
    let d = Dataset::load(dir)?;
    let m = &d.meta;
    if (m.width, m.height) != (c.scene.width, c.scene.height) || m.target_id != c.target_camera {
        return Err(Error::Handshake(format!(
            "dataset is {}x{} with target {}, config expects {}x{} with target {}",
            m.width, m.height, m.target_id, c.scene.width, c.scene.height, c.target_camera
        ))
        .into());
    }
    Ok(d)
}

fn load_model(ckpt: &Path, c: &RunConfig) -> Result<Model> {
    let mut m = Model::new(c.model.clone(), c.seed)?;
    m.params.load_into(ckpt)?;
    Ok(m)
}

fn sparsify(c: &RunConfig) -> SparsifyConfig {
    SparsifyConfig::with_rho(c.rho, c.model.k_min)
}

pub fn generate(common: &Common, out: &Path) -> Result<()> {
    let c = resolve(common, None)?;
    let d = Dataset::generate(&c.scene, c.target_camera)?;
    d.save(out).with_context(|| format!("writing dataset to {}", out.display()))?;
    write_config(out, &c)?;
    let fr: Vec<f64> = (0..d.meta.timesteps).map(|t| d.novel(t).map(hole_fraction)).collect::<mvinpaint::Result<_>>()?;
    let mean = fr.iter().sum::<f64>() / fr.len().max(1) as f64;
    let (lo, hi) = fr.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &x| (a.min(x), b.max(x)));
    println!(
        "cameras={} inputs={:?} target={} timesteps={} size={}x{}",
        d.meta.n_cameras(),
        d.meta.input_ids(),
        d.meta.target_id,
        d.meta.timesteps,
        d.meta.width,
        d.meta.height
    );
    println!(
        "hole fraction of the target silhouette: mean {:.2}% min {:.2}% max {:.2}%",
        100.0 * mean,
        100.0 * lo,
        100.0 * hi
    );
    Ok(())
}

pub fn train(common: &Common, data: &Path, out: &Path, steps: Option<usize>) -> Result<()> {
    let mut c = resolve(common, None)?;
    if let Some(s) = steps {
        c.train.steps = s;
    }
    let d = load_data(data, &c)?;
    let model = Model::new(c.model.clone(), c.seed)?;
    let mut tr = Trainer::new(model, c.train.clone(), c.seed, c.rho);
    write_config(out, &c)?;
    let mut csv = format!("{}{TRAIN_HEADER}\n", header(&c));
    let res = tr.run(&d, |r| {
        let _ = writeln!(csv, "{}", r.csv_row());
        if let Some(p) = r.psnr_val {
            eprintln!("step {} L_in {:.4} L_out {:.4} val psnr_in {}", r.step, r.l_in, r.l_out, runtime::fmt_metric(p));
        }
    });
    fs::write(out.join("metrics.csv"), &csv)?;
    res?;
    tr.model.params.save(out)?;
    println!("wrote checkpoint {} after {} steps", out.display(), tr.step);
    Ok(())
}

/// Binary PPM of a `[3,H,W]` image in `[0,1]`.
fn write_ppm(path: &Path, img: &Tensor) -> Result<()> {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let mut b = format!("P6\n{w} {h}\n255\n").into_bytes();
    for i in 0..h * w {
        for ch in 0..3 {
            b.push((img.data()[ch * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    fs::write(path, b)?;
    Ok(())
}

pub fn infer(common: &Common, data: &Path, ckpt: &Path, out: &Path) -> Result<()> {
    let c = resolve(common, Some(ckpt))?;
    let d = load_data(data, &c)?;
    let m = load_model(ckpt, &c)?;
    write_config(out, &c)?;
    let mut s = Streamer::new(&m, sparsify(&c), c.use_cache);
    for t in 0..d.meta.timesteps {
        let o = s.step(&d, t)?;
        io::save(&out.join(format!("fhat_t{t}.mvt")), &o.f_hat)?;
        write_ppm(&out.join(format!("fhat_t{t}.ppm")), &o.f_hat)?;
    }
    println!("wrote {} frames to {} ({} encoder calls)", d.meta.timesteps, out.display(), s.encoder_calls);
    Ok(())
}

pub fn eval(common: &Common, data: &Path, ckpt: &Path, out: &Path, gt_as_input: bool, holdout_only: bool) -> Result<()> {
    let c = resolve(common, Some(ckpt))?;
    let mut d = load_data(data, &c)?;
    let m = load_model(ckpt, &c)?;
    if gt_as_input {
        for t in 0..d.meta.timesteps {
            let mut f: FrameBundle = d.novel(t)?.clone();
            f.rgb = d.truth(t)?.rgb.clone();
            f.error_mask = Tensor::zeros(f.error_mask.shape());
            d.set_novel(t, f);
        }
    }
    let frames = if holdout_only {
        split_frames(d.meta.timesteps, c.train.holdout).1
    } else {
        (0..d.meta.timesteps).collect()
    };
    let (rep, per, _) = runtime::evaluate(&m, &d, &frames, sparsify(&c), c.use_cache)?;
    let mut csv = format!("{}{}\n", header(&c), runtime::EVAL_HEADER);
    for f in &per {
        let _ = writeln!(csv, "{}", runtime::eval_csv_row(f));
    }
    write_file(out, &csv)?;
    println!(
        "psnr_full {} ssim_full {} psnr_in {} ssim_in {}",
        runtime::fmt_metric(rep.psnr_full),
        runtime::fmt_metric(rep.ssim_full),
        runtime::fmt_metric(rep.psnr_inpaint),
        runtime::fmt_metric(rep.ssim_inpaint)
    );
    Ok(())
}

pub fn bench(common: &Common, data: &Path, ckpt: &Path, out: &Path, reps: usize) -> Result<()> {
    let c = resolve(common, Some(ckpt))?;
    let d = load_data(data, &c)?;
    let m = load_model(ckpt, &c)?;
    let frames = runtime::bench_frames(&d, c.bench_frames);
    let rows = runtime::bench(&m, &d, &c.bench_rhos, &frames, reps, c.use_cache)?;
    let mut csv = format!("{}{}\n", header(&c), runtime::BENCH_HEADER);
    for r in &rows {
        let _ = writeln!(csv, "{}", runtime::bench_csv_row(r));
        println!("rho {} fps {:.2} macs {}", r.rho, r.report.fps, r.report.macs);
    }
    write_file(out, &csv)?;
    Ok(())
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(p)?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}
