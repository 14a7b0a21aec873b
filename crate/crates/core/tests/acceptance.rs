//! End-to-end acceptance suite. Runs every criterion in sequence (the timing
//! criterion must not share the CPU with training runs), prints one PASS/FAIL
//! line per criterion and fails if any criterion fails.

use std::io::Write;
use std::time::Instant;

use mvinpaint::attention::{
    apply_rope, cross_attention, init_block, rope_rotate, Positions, RopeConfig, RopeTables, SparsifyConfig,
};
use mvinpaint::config::{ModelConfig, RunConfig};
use mvinpaint::data::Dataset;
use mvinpaint::decode::{blend_patches, final_blend};
use mvinpaint::model::Model;
use mvinpaint::params::ParamStore;
use mvinpaint::rig::{nearest_inputs, select_context_frames, synthesize_novel_view, FrameBundle, Scene, SceneSpec};
use mvinpaint::runtime::{bench, bench_frames, psnr, Streamer};
use mvinpaint::tensor::gradcheck::grad_check_sampled;
use mvinpaint::tensor::{grad_check, par, Tape, Tensor, Var};
use mvinpaint::train::{gen_loss, loss_in, loss_out, split_frames, total_loss, Discriminator, LossWeights, StepRecord, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn say(line: &str) {
    // bypasses the test harness capture so the lines always reach the log
    let mut e = std::io::stderr().lock();
    let _ = writeln!(e, "{line}");
}

fn check(cond: bool, what: String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(what)
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Uniform in `[lo, hi]` with magnitude at least `gap`, keeping kinks out of the stencil.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f32, hi: f32) -> Tensor {
    let n: usize = shape.iter().product();
    let v = (0..n)
        .map(|_| {
            let m = rng.gen_range(gap..hi);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::from_vec(shape, v).unwrap()
}

// ---------------------------------------------------------------- criterion 1

type Prim = Box<dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> mvinpaint::tensor::Result<Var<'t>>>;

fn prim<F>(f: F) -> Prim
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> mvinpaint::tensor::Result<Var<'t>> + 'static,
{
    Box::new(f)
}

fn primitives(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Prim, Vec<Tensor>)> {
    let mut r = |s: &[usize]| rand_tensor(rng, s, -1.0, 1.0);
    let (a34, b45, a35, b5, x266, w3233, c3, x344, w3222, c2, x46, g6, b6) = (
        r(&[3, 4]),
        r(&[4, 5]),
        r(&[3, 5]),
        r(&[5]),
        r(&[2, 6, 6]),
        r(&[3, 2, 3, 3]),
        r(&[3]),
        r(&[3, 4, 4]),
        r(&[3, 2, 2, 2]),
        r(&[2]),
        r(&[4, 6]),
        r(&[6]),
        r(&[6]),
    );
    let b35 = r(&[3, 5]);
    let mask = Tensor::from_fn(&[3, 5], |i| (i % 3 != 0) as u8 as f32);
    let mut v: Vec<(&'static str, Prim, Vec<Tensor>)> = vec![
        ("matmul", prim(|_, v| v[0].matmul(v[1])), vec![a34.clone(), b45]),
        ("transpose", prim(|_, v| v[0].t()), vec![a34]),
        ("add_broadcast", prim(|_, v| v[0].add(v[1])), vec![a35.clone(), b5.clone()]),
        ("sub", prim(|_, v| v[0].sub(v[1])), vec![a35.clone(), b35.clone()]),
        ("mul_broadcast", prim(|_, v| v[0].mul(v[1])), vec![a35.clone(), b5]),
        ("sigmoid", prim(|_, v| Ok(v[0].sigmoid())), vec![a35.clone()]),
        ("scale", prim(|_, v| Ok(v[0].scale(1.7))), vec![a35.clone()]),
        ("add_scalar", prim(|_, v| Ok(v[0].add_scalar(0.3))), vec![a35.clone()]),
        ("conv2d", prim(|_, v| v[0].conv2d(v[1], Some(v[2]), 2, 1)), vec![x266, w3233, c3]),
        ("conv_transpose2d", prim(|_, v| v[0].conv_transpose2d(v[1], Some(v[2]), 2)), vec![x344, w3222, c2]),
        ("layer_norm", prim(|_, v| v[0].layer_norm(v[1], v[2])), vec![x46, g6, b6]),
        ("softmax", prim(|_, v| v[0].softmax(1)), vec![a35.clone()]),
        ("slice", prim(|_, v| v[0].slice(1, 1, 3)), vec![a35.clone()]),
        ("reshape", prim(|_, v| v[0].reshape(&[5, 3])), vec![a35.clone()]),
        ("select_rows", prim(|_, v| v[0].select_rows(&[2, 0, 2])), vec![a35.clone()]),
        ("concat", prim(|t, v| t.concat(&[v[0], v[1]], 1)), vec![a35.clone(), b35]),
        ("sum", prim(|_, v| Ok(v[0].sum())), vec![a35.clone()]),
        ("mean", prim(|_, v| Ok(v[0].mean())), vec![a35.clone()]),
    ];
    let kinked = away_from_zero(rng, &[3, 5], 0.05, 1.0);
    let positive = rand_tensor(rng, &[3, 5], 0.5, 2.0);
    let clampable = Tensor::from_fn(&[3, 5], |i| [-0.9, -0.3, 0.1, 0.35, 0.8][i % 5]);
    v.push(("relu", prim(|_, v| Ok(v[0].relu())), vec![kinked.clone()]));
    v.push(("leaky_relu", prim(|_, v| Ok(v[0].leaky_relu(0.2))), vec![kinked.clone()]));
    v.push(("abs", prim(|_, v| Ok(v[0].abs())), vec![kinked.clone()]));
    v.push(("ln", prim(|_, v| Ok(v[0].ln())), vec![positive]));
    v.push(("clamp", prim(|_, v| Ok(v[0].clamp(-0.5, 0.5))), vec![clampable]));
    v.push(("masked_abs_sum", prim(move |_, v| v[0].masked_abs_sum(mask.clone())), vec![kinked]));
    v
}

/// Tiny dataset with a guaranteed error region on every novel view.
fn tiny_dataset(size: usize, timesteps: usize) -> Dataset {
    let spec = SceneSpec {
        width: size,
        height: size,
        timesteps,
        ..SceneSpec::default()
    };
    let mut d = Dataset::generate(&spec, 1).unwrap();
    for t in 0..timesteps {
        let mut f = d.novel(t).unwrap().clone();
        let (h, w) = (f.height(), f.width());
        for y in h / 4..h / 2 {
            for x in w / 4..w / 2 {
                if f.fg_mask.data()[y * w + x] > 0.0 {
                    f.error_mask.data_mut()[y * w + x] = 1.0;
                }
            }
        }
        let e = f.error_mask.clone();
        for c in 0..3 {
            for i in 0..h * w {
                if e.data()[i] > 0.0 {
                    f.rgb.data_mut()[c * h * w + i] = 0.0;
                }
            }
        }
        d.set_novel(t, f);
    }
    d
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = (0.0f64, "");
    for (name, f, inputs) in primitives(&mut rng) {
        let rep = grad_check(|t, v| f(t, v), &inputs, 1e-2).map_err(err)?;
        if rep.max_rel_err > worst.0 {
            worst = (rep.max_rel_err, name);
        }
        check(rep.max_rel_err <= 1e-3, format!("{name}: rel err {:.2e}", rep.max_rel_err))?;
    }
    // the straight-through gate has a constant forward value, so finite
    // differences cannot see it; its gradient must be the identity instead
    let tape = Tape::new();
    let x = tape.param(Tensor::from_fn(&[4, 1], |i| i as f32 * 0.3));
    let y = x.straight_through(Tensor::ones(&[4, 1])).map_err(err)?.mul(tape.constant(Tensor::from_fn(&[4, 1], |i| i as f32))).map_err(err)?;
    let g = tape.backward(y.sum()).map_err(err)?;
    check(g.get(x).unwrap().data() == [0.0, 1.0, 2.0, 3.0], "straight-through gradient is not the identity".into())?;

    // end to end: total loss at 16x16 with respect to weights spread across the network
    let data = tiny_dataset(16, 2);
    let model = Model::new(ModelConfig::default(), 3).map_err(err)?;
    let disc = Discriminator::new(4);
    let names = ["enc.s0.c0.w", "emb.w_in", "blk0.wq", "blk0.wk", "blk5.w1", "emb.w_out", "dec.s0.w", "dec.s1.w"];
    let ids: Vec<usize> = names.iter().map(|n| model.params.index(n).unwrap()).collect();
    let inputs: Vec<Tensor> = ids.iter().map(|&i| model.params.tensors()[i].clone()).collect();
    let (truth, e) = (data.truth(1).unwrap().rgb.clone(), data.novel(1).unwrap().error_mask.clone());
    let rep = grad_check_sampled(
        |tape, v| {
            let mut w = model.params.bind(tape, false);
            for (j, &id) in ids.iter().enumerate() {
                w[id] = v[j];
            }
            let out = model.forward(&w, &data, 1, &SparsifyConfig::dense(), None)?;
            let li = loss_in(out.f_tilde, &truth, &e)?;
            let lo = loss_out(out.f_tilde, &truth, &e)?;
            let dw = disc.params.bind(tape, false);
            let adv = gen_loss(disc.forward(out.f_hat, &dw)?);
            Ok(total_loss(li, lo, Some(adv), LossWeights::default())?)
        },
        &inputs,
        1e-2,
        12,
    )
    .map_err(err)?;
    check(rep.max_rel_err <= 1e-2, format!("end-to-end rel err {:.2e} per input {:?}", rep.max_rel_err, rep.per_input))?;
    let secs = start.elapsed().as_secs_f64();
    check(secs < 120.0, format!("took {secs:.1}s"))?;
    Ok(format!(
        "worst primitive {} at {:.1e}, end-to-end {:.1e} over {} coords, {secs:.1}s",
        worst.1, worst.0, rep.max_rel_err, rep.checked
    ))
}

// ---------------------------------------------------------------- criterion 2

fn criterion_2() -> Outcome {
    let cfg = RopeConfig::from_model(&ModelConfig::default());
    let (heads, dh) = (4, cfg.head_dim());
    let d = heads * dh;
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    // coordinates on a 1/1024 lattice so translated coordinates are exact in f32
    let mut lattice = |lo: f32, hi: f32| (rng.gen_range(lo..hi) * 1024.0).round() / 1024.0;
    let coords = |n: usize, l: &mut dyn FnMut(f32, f32) -> f32| -> Vec<[f32; 3]> {
        (0..n).map(|_| [l(0.0, 1.0), l(0.0, 1.0), l(-1.0, 0.0)]).collect()
    };
    let mut worst_logit = 0.0f64;
    let mut worst_norm = 0.0f64;
    let mut rng2 = ChaCha8Rng::seed_from_u64(23);
    for _ in 0..100 {
        let (nq, nk) = (5, 7);
        let q = rand_tensor(&mut rng2, &[nq, d], -1.0, 1.0);
        let k = rand_tensor(&mut rng2, &[nk, d], -1.0, 1.0);
        let xq = coords(nq, &mut lattice);
        let xk = coords(nk, &mut lattice);
        let delta = [lattice(-1.0, 1.0), lattice(-1.0, 1.0), lattice(-1.0, 1.0)];
        let shift = |x: &[[f32; 3]]| -> Vec<[f32; 3]> { x.iter().map(|c| [c[0] + delta[0], c[1] + delta[1], c[2] + delta[2]]).collect() };
        let logits = |xq: &[[f32; 3]], xk: &[[f32; 3]]| -> Vec<f64> {
            let tab = |x: &[[f32; 3]]| RopeTables::new(&Tensor::from_vec(&[x.len(), 3], x.iter().flatten().copied().collect()).unwrap(), &cfg);
            let tape = Tape::no_grad();
            let rq = apply_rope(tape.constant(q.clone()), &tab(xq), heads).unwrap().value();
            let rk = apply_rope(tape.constant(k.clone()), &tab(xk), heads).unwrap().value();
            let mut out = Vec::new();
            for h in 0..heads {
                for i in 0..nq {
                    for j in 0..nk {
                        out.push((0..dh).map(|c| rq.data()[i * d + h * dh + c] as f64 * rk.data()[j * d + h * dh + c] as f64).sum());
                    }
                }
            }
            out
        };
        let (a, b) = (logits(&xq, &xk), logits(&shift(&xq), &shift(&xk)));
        for (x, y) in a.iter().zip(&b) {
            worst_logit = worst_logit.max((x - y).abs());
        }
        for i in 0..nq {
            let v = &q.data()[i * d..i * d + dh];
            let r = rope_rotate(v, xq[i], &cfg);
            let n = |u: &[f32]| u.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
            worst_norm = worst_norm.max((n(v) - n(&r)).abs() / n(v));
        }
    }
    check(worst_logit < 1e-5, format!("logit change {worst_logit:.2e} under translation"))?;
    check(worst_norm <= 1e-6, format!("norm change {worst_norm:.2e}"))?;
    Ok(format!("max logit change {worst_logit:.1e}, max relative norm change {worst_norm:.1e}"))
}

// ---------------------------------------------------------------- criterion 3

fn criterion_3() -> Outcome {
    let spec = SceneSpec {
        timesteps: 2,
        ..SceneSpec::default()
    };
    let data = Dataset::generate(&spec, 1).map_err(err)?;
    let model = Model::new(ModelConfig::default(), 5).map_err(err)?;
    let f = data.novel(1).unwrap().rgb.clone();
    let tape = Tape::no_grad();
    let w = model.params.bind(&tape, false);
    let out = model.forward(&w, &data, 1, &SparsifyConfig::dense(), None).map_err(err)?;
    let ft = out.f_tilde.value();
    let zeros = Tensor::zeros(&[64, 64]);
    let ones = Tensor::ones(&[64, 64]);
    let z = final_blend(out.f_tilde, &f, &zeros).map_err(err)?.value();
    let o = final_blend(out.f_tilde, &f, &ones).map_err(err)?.value();
    check(*z == f, "E=0 output differs from the input".into())?;
    check(*o == *ft, "E=1 output differs from the decoded image".into())?;

    // the pipeline itself with an empty error mask returns the input unchanged
    let mut d0 = data.clone();
    let mut nv: FrameBundle = d0.novel(1).unwrap().clone();
    nv.error_mask = zeros.clone();
    d0.set_novel(1, nv);
    let tape = Tape::no_grad();
    let w = model.params.bind(&tape, false);
    let out0 = model.forward(&w, &d0, 1, &SparsifyConfig::dense(), None).map_err(err)?;
    check(*out0.f_hat.value() == f, "pipeline with E=0 changed the input".into())?;

    // constant patches on the real target grid blend back to the constant
    let target = &out.ctx.target;
    let s = model.cfg.downsample;
    let origins: Vec<(usize, usize)> = target.plans.iter().map(|p| (p.row * s, p.col * s)).collect();
    let size = model.cfg.patch * s;
    let tape = Tape::no_grad();
    let patches: Vec<Var> = origins.iter().map(|_| tape.constant(Tensor::full(&[3, size, size], 0.37))).collect();
    let canvas = (target.fmap.h() * s, target.fmap.w() * s);
    let img = blend_patches(&patches, &origins, canvas, (64, 64), (model.cfg.overlap * s) as f64).map_err(err)?.value();
    let mut covered = vec![false; 64 * 64];
    for &(y0, x0) in &origins {
        for y in y0..(y0 + size).min(64) {
            for x in x0..(x0 + size).min(64) {
                covered[y * 64 + x] = true;
            }
        }
    }
    let mut dev = 0.0f32;
    for c in 0..3 {
        for i in 0..64 * 64 {
            if covered[i] {
                dev = dev.max((img.data()[c * 4096 + i] - 0.37).abs());
            }
        }
    }
    check(dev <= 1e-6, format!("partition of unity deviation {dev:.2e}"))?;
    Ok(format!("E=0 and E=1 bitwise, {} patches blend with deviation {dev:.1e}", origins.len()))
}

// ---------------------------------------------------------------- criterion 4

fn criterion_4(data: &Dataset) -> Outcome {
    let model = Model::new(ModelConfig::default(), 0).map_err(err)?;
    let frames = bench_frames(data, 32);
    par::set_parallel(false);
    let mut dense = Streamer::new(&model, SparsifyConfig::dense(), true);
    let mut full = Streamer::new(&model, SparsifyConfig::with_rho(1.0, model.cfg.k_min), true);
    let mut bitwise = true;
    for &t in &frames {
        let a = dense.step(data, t).map_err(err)?;
        let b = full.step(data, t).map_err(err)?;
        bitwise &= a.f_hat == b.f_hat;
    }
    par::set_parallel(true);
    check(bitwise, "rho=1 differs from the dense path".into())?;
    let rows = bench(&model, data, &[1.0, 0.25], &frames, 3, true).map_err(err)?;
    let mac_ratio = rows[1].report.post_macs as f64 / rows[0].report.post_macs as f64;
    let speedup = rows[0].sec_per_frame / rows[1].sec_per_frame;
    check(mac_ratio <= 0.35, format!("post-sparsify MAC ratio {mac_ratio:.3}"))?;
    check(speedup >= 1.3, format!("speedup {speedup:.2}x at rho=0.25"))?;
    Ok(format!(
        "rho=1 bitwise equal to dense over {} frames, MAC ratio {mac_ratio:.3}, speedup {speedup:.2}x ({:.1} ms vs {:.1} ms per frame)",
        frames.len(),
        1e3 * rows[0].sec_per_frame,
        1e3 * rows[1].sec_per_frame
    ))
}

// ---------------------------------------------------------------- criterion 5

fn criterion_5(data: &Dataset) -> Outcome {
    let model = Model::new(ModelConfig::default(), 0).map_err(err)?;
    let sp = SparsifyConfig::with_rho(1.0, model.cfg.k_min);
    let mut cached = Streamer::new(&model, sp, true);
    let mut plain = Streamer::new(&model, sp, false);
    let mut worst = 0.0f32;
    for t in 0..32 {
        let a = cached.step(data, t).map_err(err)?;
        let b = plain.step(data, t).map_err(err)?;
        worst = worst.max(a.f_hat.max_abs_diff(&b.f_hat));
    }
    let ratio = cached.encoder_calls as f64 / plain.encoder_calls as f64;
    check(worst <= 1e-6, format!("cached output differs by {worst:.2e}"))?;
    check(ratio <= 0.25, format!("encoder call ratio {ratio:.3}"))?;
    Ok(format!(
        "max diff {worst:.1e}, encoder calls {} vs {} ({:.1}%)",
        cached.encoder_calls,
        plain.encoder_calls,
        100.0 * ratio
    ))
}

// ---------------------------------------------------------------- criterion 6

fn criterion_6() -> Outcome {
    for t in (30..200).chain([1000, 12345]) {
        let mut got = select_context_frames(t, 3, 3, 10);
        got.sort_unstable();
        let mut want = vec![t, t - 1, t - 2, t - 3, t - 10, t - 20, t - 30];
        want.sort_unstable();
        check(got == want, format!("t={t}: {got:?}"))?;
    }
    Ok("context set {t, t-1, t-2, t-3, t-10, t-20, t-30} for t in 30..200 and beyond".into())
}

// ---------------------------------------------------------------- criterion 7 and 8

struct Run {
    log: Vec<StepRecord>,
    psnr_in: f64,
    secs: f64,
}

fn smoke_run(data: &Dataset, ablation: Option<&str>) -> Result<Run, String> {
    let mut cfg = RunConfig::default();
    if let Some(a) = ablation {
        cfg.ablate(a).map_err(err)?;
    }
    let start = Instant::now();
    let model = Model::new(cfg.model.clone(), cfg.seed).map_err(err)?;
    let mut tr = Trainer::new(model, cfg.train.clone(), cfg.seed, cfg.rho);
    let log = tr.run(data, |_| {}).map_err(err)?;
    let psnr_in = log.last().and_then(|r| r.psnr_val).ok_or("no final validation")?;
    Ok(Run {
        log,
        psnr_in,
        secs: start.elapsed().as_secs_f64(),
    })
}

fn raw_psnr_in(data: &Dataset) -> f64 {
    let (_, held) = split_frames(data.meta.timesteps, RunConfig::default().train.holdout);
    let v: Vec<f64> = held
        .iter()
        .map(|&t| {
            let n = data.novel(t).unwrap();
            psnr(&n.rgb, &data.truth(t).unwrap().rgb, Some(&n.error_mask))
        })
        .collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn criterion_7(data: &Dataset, full: &Run) -> Outcome {
    let avgs: Vec<f64> = full.log[..1000].chunks(200).map(|c| c.iter().map(|r| r.l_in as f64).sum::<f64>() / c.len() as f64).collect();
    let raw = raw_psnr_in(data);
    let gain = full.psnr_in - raw;
    let decreasing = avgs.windows(2).all(|w| w[1] < w[0]);
    let shown: Vec<String> = avgs.iter().map(|a| format!("{a:.4}")).collect();
    check(decreasing, format!("L_in 200-step averages {shown:?}"))?;
    check(gain >= 6.0, format!("held-out inpainted PSNR {:.2} dB vs raw {raw:.2} dB", full.psnr_in))?;
    check(full.secs <= 1800.0, format!("run took {:.0}s", full.secs))?;
    Ok(format!(
        "L_in averages {}; held-out inpainted PSNR {:.2} dB vs raw {raw:.2} dB (+{gain:.2}); {:.0}s",
        shown.join(" > "),
        full.psnr_in,
        full.secs
    ))
}

fn criterion_8(full: &Run, no_rope: &Run, single: &Run) -> Outcome {
    let (a, b) = (full.psnr_in - no_rope.psnr_in, full.psnr_in - single.psnr_in);
    let detail = format!(
        "full {:.2} dB, no-rope {:.2} dB ({a:+.2}), single-cam {:.2} dB ({b:+.2})",
        full.psnr_in, no_rope.psnr_in, single.psnr_in
    );
    check(a >= 0.5 && b >= 0.5, detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- criterion 9

/// Holes by exhaustive search: a target pixel on the proxy is covered when
/// some source pixel, among all pixels of all source views, contains the
/// projection of its proxy point and records a consistent depth.
fn brute_force_holes(scene: &Scene, t: usize, target_id: usize) -> (Vec<bool>, Vec<bool>) {
    let target = scene.camera(target_id);
    let proxy = scene.proxy(t);
    let depth = mvinpaint::rig::render_pseudo_depth(&proxy, target);
    let sources: Vec<_> = nearest_inputs(&scene.cameras, target_id, 3)
        .into_iter()
        .map(|i| (scene.render(scene.camera(i), t), scene.camera(i).clone()))
        .collect();
    let thr = scene.depth_threshold();
    let (w, h) = (target.width, target.height);
    let mut mask = vec![false; w * h];
    let mut holes = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let z = depth.data()[y * w + x] as f64;
            if z <= 0.0 {
                continue;
            }
            mask[y * w + x] = true;
            let p = target.unproject(x as f64 + 0.5, y as f64 + 0.5, z).unwrap();
            let mut seen = false;
            for (frame, cam) in &sources {
                let Ok((u, v, pz)) = cam.project(p) else { continue };
                for sy in 0..cam.height {
                    for sx in 0..cam.width {
                        let inside = u >= sx as f64 && u < (sx + 1) as f64 && v >= sy as f64 && v < (sy + 1) as f64;
                        let d = frame.depth.data()[sy * cam.width + sx] as f64;
                        seen |= inside && d > 0.0 && (pz - d).abs() <= thr;
                    }
                }
            }
            holes[y * w + x] = !seen;
        }
    }
    (mask, holes)
}

/// Per-head softmax attention computed entry by entry in f64.
#[allow(clippy::too_many_arguments)]
fn naive_attention(h: &Tensor, r: &Tensor, wq: &Tensor, wk: &Tensor, wv: &Tensor, wo: &Tensor, heads: usize, xq: &[[f32; 3]], xk: &[[f32; 3]], cfg: &RopeConfig) -> Vec<f64> {
    let (np, nr, d) = (h.shape()[0], r.shape()[0], h.shape()[1]);
    let dh = d / heads;
    let proj = |x: &Tensor, w: &Tensor, i: usize| -> Vec<f64> {
        (0..d).map(|c| (0..d).map(|j| x.data()[i * d + j] as f64 * w.data()[j * d + c] as f64).sum()).collect()
    };
    // same angles as the implementation, rotation carried out in f64
    let rot = |v: Vec<f64>, x: [f32; 3]| -> Vec<f64> {
        let mut out = v.clone();
        for hd in 0..heads {
            for (j, a) in cfg.angles(x).iter().enumerate() {
                let (s, c) = a.sin_cos();
                let (p, q) = (v[hd * dh + 2 * j], v[hd * dh + 2 * j + 1]);
                out[hd * dh + 2 * j] = p * c - q * s;
                out[hd * dh + 2 * j + 1] = p * s + q * c;
            }
        }
        out
    };
    let q: Vec<Vec<f64>> = (0..np).map(|i| rot(proj(h, wq, i), xq[i])).collect();
    let k: Vec<Vec<f64>> = (0..nr).map(|j| rot(proj(r, wk, j), xk[j])).collect();
    let v: Vec<Vec<f64>> = (0..nr).map(|j| proj(r, wv, j)).collect();
    let mut mix = vec![0.0; np * d];
    for i in 0..np {
        for hd in 0..heads {
            let logits: Vec<f64> = (0..nr)
                .map(|j| (0..dh).map(|c| q[i][hd * dh + c] * k[j][hd * dh + c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..nr {
                for c in 0..dh {
                    mix[i * d + hd * dh + c] += e[j] / z * v[j][hd * dh + c];
                }
            }
        }
    }
    (0..np * d)
        .map(|idx| {
            let (i, c) = (idx / d, idx % d);
            (0..d).map(|j| mix[i * d + j] * wo.data()[j * d + c] as f64).sum()
        })
        .collect()
}

fn criterion_9() -> Outcome {
    let spec = SceneSpec {
        width: 32,
        height: 32,
        timesteps: 4,
        ..SceneSpec::default()
    };
    let scene = Scene::new(spec.clone()).map_err(err)?;
    let data = Dataset::generate(&spec, 1).map_err(err)?;
    let mut n_holes = 0;
    for t in 0..4 {
        let (mask, holes) = brute_force_holes(&scene, t, 1);
        let nv = data.novel(t).unwrap();
        let got_m: Vec<bool> = nv.fg_mask.data().iter().map(|&v| v > 0.0).collect();
        let got_h: Vec<bool> = nv.error_mask.data().iter().map(|&v| v > 0.0).collect();
        check(got_m == mask, format!("t={t}: silhouette differs from the exhaustive search"))?;
        check(got_h == holes, format!("t={t}: holes differ from the exhaustive search"))?;
        n_holes += holes.iter().filter(|&&h| h).count();
    }
    // also against the library synthesis entry point with the same sources
    let target = scene.camera(1);
    let srcs: Vec<_> = nearest_inputs(&scene.cameras, 1, 3).into_iter().map(|i| (scene.render(scene.camera(i), 2), scene.camera(i).clone())).collect();
    let refs: Vec<_> = srcs.iter().map(|(f, c)| (f, c)).collect();
    let nv = synthesize_novel_view(&refs, &scene.proxy(2), target, scene.depth_threshold());
    check(nv.error == data.novel(2).unwrap().error_mask, "synthesis is not reproducible".into())?;

    let cfg = ModelConfig::default();
    let rc = RopeConfig::from_model(&cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut p = ParamStore::new();
    let ids = init_block(&mut p, 0, cfg.d_model, cfg.ffn_mult, &mut rng);
    let mut worst = 0.0f64;
    for (np, nr) in [(1, 1), (5, 20), (16, 48), (24, 40)] {
        let h = rand_tensor(&mut rng, &[np, cfg.d_model], -1.0, 1.0);
        let r = rand_tensor(&mut rng, &[nr, cfg.d_model], -1.0, 1.0);
        let coords = |n: usize, rng: &mut ChaCha8Rng| -> Vec<[f32; 3]> { (0..n).map(|_| [rng.gen(), rng.gen(), -rng.gen::<f32>()]).collect() };
        let (xq, xk) = (coords(np, &mut rng), coords(nr, &mut rng));
        let tab = |x: &[[f32; 3]]| RopeTables::new(&Tensor::from_vec(&[x.len(), 3], x.iter().flatten().copied().collect()).unwrap(), &rc);
        let (tq, tk) = (tab(&xq), tab(&xk));
        let tape = Tape::no_grad();
        let w = p.bind(&tape, false);
        let pos = Positions { query: Some(&tq), key: Some(&tk) };
        let got = cross_attention(tape.constant(h.clone()), Some(tape.constant(r.clone())), pos, &w, &ids, cfg.heads).map_err(err)?.out.value();
        let t = p.tensors();
        let want = naive_attention(&h, &r, &t[ids.wq], &t[ids.wk], &t[ids.wv], &t[ids.wo], cfg.heads, &xq, &xk, &rc);
        for (a, b) in got.data().iter().zip(&want) {
            worst = worst.max((*a as f64 - b).abs());
        }
    }
    check(worst <= 1e-5, format!("attention differs from the naive reference by {worst:.2e}"))?;
    Ok(format!("holes match exhaustive search on 4 frames at 32x32 ({n_holes} hole pixels); attention max diff {worst:.1e} on up to 64 tokens"))
}

/// `ACCEPTANCE_ONLY=1,3,9` runs a subset while debugging; skipped criteria
/// still count as failures.
fn selected(id: usize) -> bool {
    match std::env::var("ACCEPTANCE_ONLY") {
        Ok(v) => v.split(',').any(|x| x.trim().parse() == Ok(id)),
        Err(_) => true,
    }
}

#[test]
fn acceptance() {
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut record = |id: usize, name: &'static str, run: &mut dyn FnMut() -> Outcome| {
        let o = if selected(id) { run() } else { Err("skipped".into()) };
        let line = match &o {
            Ok(d) => format!("criterion {id} PASS [{name}] {d}"),
            Err(d) => format!("criterion {id} FAIL [{name}] {d}"),
        };
        say(&line);
        results.push((id, name, o));
    };
    record(1, "gradient suite", &mut criterion_1);
    record(2, "rope relative position", &mut criterion_2);
    record(3, "compositing and blending", &mut criterion_3);
    let data = Dataset::generate(&SceneSpec::default(), 1).expect("default rig");
    record(4, "dense/sparse equivalence and speed", &mut || criterion_4(&data));
    record(5, "cache transparency and savings", &mut || criterion_5(&data));
    record(6, "context selection", &mut criterion_6);
    record(9, "brute-force oracles", &mut criterion_9);
    let mut runs = None;
    let train = || -> Result<(Run, Run, Run), String> {
        Ok((smoke_run(&data, None)?, smoke_run(&data, Some("no-rope"))?, smoke_run(&data, Some("single-cam"))?))
    };
    record(7, "training smoke run", &mut || {
        let r = train();
        let out = match &r {
            Ok((full, _, _)) => criterion_7(&data, full),
            Err(e) => Err(e.clone()),
        };
        runs = Some(r);
        out
    });
    record(8, "ablation ordering", &mut || match &runs {
        Some(Ok((full, nr, sc))) => criterion_8(full, nr, sc),
        Some(Err(e)) => Err(e.clone()),
        None => Err("training runs were skipped".into()),
    });
    results.sort_by_key(|r| r.0);
    let failed: Vec<String> = results.iter().filter(|r| r.2.is_err()).map(|r| format!("{} ({})", r.0, r.1)).collect();
    say(&format!("acceptance: {}/{} criteria passed", results.len() - failed.len(), results.len()));
    assert!(failed.is_empty(), "failed criteria: {}", failed.join(", "));
}
