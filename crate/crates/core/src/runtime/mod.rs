//! Frame-by-frame streaming inference, evaluation and the retention benchmark.

pub mod cache;
pub mod metrics;

use std::time::Instant;

use mvinpaint_tensor::{Tape, Tensor};

pub use cache::FeatureCache;
pub use metrics::{fmt_metric, luma, parse_metric, psnr, ssim};

use crate::attention::{post_sparsify_macs, total_macs, SparsifyConfig};
use crate::data::Dataset;
use crate::error::Result;
use crate::model::Model;

/// Result of one streaming step.
#[derive(Clone, Debug)]
pub struct FrameOutput {
    pub t: usize,
    pub f_hat: Tensor,
    pub f_tilde: Tensor,
    pub encoder_calls: usize,
    pub macs: u64,
    pub post_macs: u64,
}

/// Streaming inference over one novel-view stream.
pub struct Streamer<'m> {
    pub model: &'m Model,
    pub sparsify: SparsifyConfig,
    pub cache: Option<FeatureCache>,
    pub encoder_calls: usize,
}

impl<'m> Streamer<'m> {
    pub fn new(model: &'m Model, sparsify: SparsifyConfig, use_cache: bool) -> Self {
        let horizon = model.cfg.k_w * model.cfg.context_window().1;
        Self {
            model,
            sparsify,
            cache: use_cache.then(|| FeatureCache::new(horizon)),
            encoder_calls: 0,
        }
    }

    /// Inpaints timestep `t`, encoding only frames missing from the cache,
    /// then evicts entries no later step can reach.
    pub fn step(&mut self, data: &Dataset, t: usize) -> Result<FrameOutput> {
        let tape = Tape::no_grad();
        let w = self.model.params.bind(&tape, false);
        let out = self.model.forward(&w, data, t, &self.sparsify, self.cache.as_mut())?;
        if let Some(c) = self.cache.as_mut() {
            c.evict(t);
        }
        self.encoder_calls += out.encoder_calls();
        Ok(FrameOutput {
            t,
            f_hat: (*out.f_hat.value()).clone(),
            f_tilde: (*out.f_tilde.value()).clone(),
            encoder_calls: out.encoder_calls(),
            macs: total_macs(&out.stats),
            post_macs: post_sparsify_macs(&out.stats),
        })
    }
}

/// Per-frame quality of one output against ground truth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameMetrics {
    pub t: usize,
    pub psnr_full: f64,
    pub ssim_full: f64,
    /// NaN when the frame has no error pixels.
    pub psnr_in: f64,
    pub ssim_in: f64,
}

pub fn frame_metrics(data: &Dataset, t: usize, f_hat: &Tensor) -> Result<FrameMetrics> {
    let truth = &data.truth(t)?.rgb;
    let e = &data.novel(t)?.error_mask;
    let any = e.data().iter().any(|&v| v > 0.0);
    Ok(FrameMetrics {
        t,
        psnr_full: psnr(f_hat, truth, None),
        ssim_full: ssim(f_hat, truth, None),
        psnr_in: if any { psnr(f_hat, truth, Some(e)) } else { f64::NAN },
        ssim_in: if any { ssim(f_hat, truth, Some(e)) } else { f64::NAN },
    })
}

/// Aggregate over a stream.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsReport {
    pub psnr_full: f64,
    pub ssim_full: f64,
    pub psnr_inpaint: f64,
    pub ssim_inpaint: f64,
    pub fps: f64,
    pub encoder_calls: usize,
    pub macs: u64,
    pub post_macs: u64,
}

fn mean_finite(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    if v.iter().any(|x| x.is_infinite()) {
        return f64::INFINITY;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

/// Runs the stream over `frames` and evaluates every output.
pub fn evaluate(model: &Model, data: &Dataset, frames: &[usize], sparsify: SparsifyConfig, use_cache: bool) -> Result<(MetricsReport, Vec<FrameMetrics>, Vec<FrameOutput>)> {
    let mut s = Streamer::new(model, sparsify, use_cache);
    let start = Instant::now();
    let outs: Vec<FrameOutput> = frames.iter().map(|&t| s.step(data, t)).collect::<Result<_>>()?;
    let secs = start.elapsed().as_secs_f64().max(1e-9);
    let per: Vec<FrameMetrics> = outs.iter().map(|o| frame_metrics(data, o.t, &o.f_hat)).collect::<Result<_>>()?;
    let report = MetricsReport {
        psnr_full: mean_finite(per.iter().map(|m| m.psnr_full)),
        ssim_full: mean_finite(per.iter().map(|m| m.ssim_full)),
        psnr_inpaint: mean_finite(per.iter().map(|m| m.psnr_in)),
        ssim_inpaint: mean_finite(per.iter().map(|m| m.ssim_in)),
        fps: frames.len() as f64 / secs,
        encoder_calls: s.encoder_calls,
        macs: outs.iter().map(|o| o.macs).sum(),
        post_macs: outs.iter().map(|o| o.post_macs).sum(),
    };
    Ok((report, per, outs))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchRow {
    pub rho: f32,
    pub report: MetricsReport,
    /// Median wall-clock seconds per frame over the repetitions.
    pub sec_per_frame: f64,
}

/// The last `n` timesteps of the dataset, so every step has a full context.
pub fn bench_frames(data: &Dataset, n: usize) -> Vec<usize> {
    let t = data.meta.timesteps;
    (t.saturating_sub(n)..t).collect()
}

/// For each retention ratio streams `frames` `reps` times (after one warm-up
/// step) and keeps the median speed; quality comes from the first repetition.
pub fn bench(model: &Model, data: &Dataset, rhos: &[f32], frames: &[usize], reps: usize, use_cache: bool) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::with_capacity(rhos.len());
    for &rho in rhos {
        let sp = SparsifyConfig::with_rho(rho, model.cfg.k_min);
        Streamer::new(model, sp, use_cache).step(data, frames[0])?;
        let mut times = Vec::with_capacity(reps);
        let mut first = None;
        for _ in 0..reps.max(1) {
            let (r, _, _) = evaluate(model, data, frames, sp, use_cache)?;
            times.push(1.0 / r.fps);
            first.get_or_insert(r);
        }
        times.sort_by(f64::total_cmp);
        let med = times[times.len() / 2];
        let mut report = first.expect("one repetition");
        report.fps = 1.0 / med;
        rows.push(BenchRow {
            rho,
            report,
            sec_per_frame: med,
        });
    }
    Ok(rows)
}

pub const BENCH_HEADER: &str = "rho,fps,macs,psnr_full,ssim_full,psnr_in,ssim_in";
pub const EVAL_HEADER: &str = "frame,psnr_full,ssim_full,psnr_in,ssim_in";

pub fn bench_csv_row(r: &BenchRow) -> String {
    let m = &r.report;
    format!(
        "{},{:.4},{},{},{},{},{}",
        r.rho,
        m.fps,
        m.macs,
        fmt_metric(m.psnr_full),
        fmt_metric(m.ssim_full),
        fmt_metric(m.psnr_inpaint),
        fmt_metric(m.ssim_inpaint)
    )
}

pub fn eval_csv_row(m: &FrameMetrics) -> String {
    format!(
        "{},{},{},{},{}",
        m.t,
        fmt_metric(m.psnr_full),
        fmt_metric(m.ssim_full),
        fmt_metric(m.psnr_in),
        fmt_metric(m.ssim_in)
    )
}
