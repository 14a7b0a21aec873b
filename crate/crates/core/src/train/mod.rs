//! Adversarial training of the generator on one timestep per step.

pub mod disc;
pub mod losses;

use mvinpaint_tensor::{Adam, AdamState, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use disc::Discriminator;
pub use losses::{disc_loss, gen_loss, loss_in, loss_out, masked_l1, total_loss, LossWeights};

use crate::attention::SparsifyConfig;
use crate::config::TrainConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::runtime::{evaluate, fmt_metric};

/// Metrics of one training step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub t: usize,
    pub l_in: f32,
    pub l_out: f32,
    /// Value of the discriminator objective before its update.
    pub d_loss: f32,
    pub g_loss: f32,
    pub grad_norm: f32,
    /// Mean inpainted-region PSNR over the held-out frames, on validation steps.
    pub psnr_val: Option<f64>,
}

pub const TRAIN_HEADER: &str = "step,L_in,L_out,d_loss,g_loss,psnr_val";

impl StepRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{}",
            self.step,
            self.l_in,
            self.l_out,
            self.d_loss,
            self.g_loss,
            self.psnr_val.map(fmt_metric).unwrap_or_default()
        )
    }
}

/// Training and held-out timesteps: the last `holdout` timesteps are held out.
pub fn split_frames(timesteps: usize, holdout: usize) -> (Vec<usize>, Vec<usize>) {
    let cut = timesteps.saturating_sub(holdout);
    ((0..cut).collect(), (cut..timesteps).collect())
}

pub struct Trainer {
    pub model: Model,
    pub disc: Discriminator,
    pub cfg: TrainConfig,
    /// Used for the generator forward pass during training.
    pub sparsify: SparsifyConfig,
    /// Used for validation streams.
    pub eval_sparsify: SparsifyConfig,
    gen_opt: Adam,
    gen_state: AdamState,
    disc_opt: Adam,
    disc_state: AdamState,
    rng: ChaCha8Rng,
    pub step: usize,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig, seed: u64, rho: f32) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let disc = Discriminator::with_rng(&mut rng);
        let k_min = model.cfg.k_min;
        let sparsify = if cfg.sparsify_train && rho < 1.0 {
            SparsifyConfig {
                straight_through: true,
                ..SparsifyConfig::with_rho(rho, k_min)
            }
        } else {
            SparsifyConfig::dense()
        };
        let opt = |lr| Adam {
            lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            ..Adam::default()
        };
        Self {
            gen_state: AdamState::new(model.params.tensors()),
            disc_state: AdamState::new(disc.params.tensors()),
            gen_opt: opt(cfg.lr),
            disc_opt: opt(cfg.disc_lr),
            eval_sparsify: SparsifyConfig::with_rho(rho, k_min),
            model,
            disc,
            cfg,
            sparsify,
            rng,
            step: 0,
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            img: self.cfg.lambda_img,
            adv: self.cfg.lambda_adv,
        }
    }

    /// One discriminator update on the detached output, then one generator
    /// update, on timestep `t`.
    pub fn train_step(&mut self, data: &Dataset, t: usize) -> Result<StepRecord> {
        let truth = &data.truth(t)?.rgb;
        let e = &data.novel(t)?.error_mask;
        let tape = Tape::new();
        let w = self.model.params.bind(&tape, true);
        let out = self.model.forward(&w, data, t, &self.sparsify, None)?;
        let l_in = loss_in(out.f_tilde, truth, e)?;
        let l_out = loss_out(out.f_tilde, truth, e)?;
        let use_adv = self.cfg.lambda_adv > 0.0;

        let d_obj = if use_adv {
            let f_hat = out.f_hat.value();
            let dt = Tape::new();
            let dw = self.disc.params.bind(&dt, true);
            let real = self.disc.forward(dt.constant(truth.clone()), &dw)?;
            let fake = self.disc.forward(dt.constant(f_hat), &dw)?;
            let obj = disc_loss(real, fake)?;
            let grads = dt.backward(obj.scale(-1.0))?;
            let g = collect_grads(&grads, &dw, self.disc.params.tensors());
            let v = scalar(obj);
            if v.is_finite() {
                self.disc_opt.step(self.disc.params.tensors_mut(), &g, &mut self.disc_state)?;
            }
            v
        } else {
            0.0
        };

        let g_adv = if use_adv {
            let dw = self.disc.params.bind(&tape, false);
            Some(gen_loss(self.disc.forward(out.f_hat, &dw)?))
        } else {
            None
        };
        let total = total_loss(l_in, l_out, g_adv, self.weights())?;
        let rec = StepRecord {
            step: self.step,
            t,
            l_in: scalar(l_in),
            l_out: scalar(l_out),
            d_loss: d_obj,
            g_loss: g_adv.map_or(0.0, scalar),
            grad_norm: 0.0,
            psnr_val: None,
        };
        if ![rec.l_in, rec.l_out, rec.d_loss, rec.g_loss, scalar(total)].iter().all(|x| x.is_finite()) {
            return Err(Error::NonFiniteLoss {
                step: rec.step,
                l_in: rec.l_in,
                l_out: rec.l_out,
                d_loss: rec.d_loss,
                g_loss: rec.g_loss,
            });
        }
        let grads = tape.backward(total)?;
        let g = collect_grads(&grads, &w, self.model.params.tensors());
        let norm = g.iter().flat_map(|t| t.data()).map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt() as f32;
        if !norm.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: rec.step,
                l_in: rec.l_in,
                l_out: rec.l_out,
                d_loss: rec.d_loss,
                g_loss: rec.g_loss,
            });
        }
        self.gen_opt.step(self.model.params.tensors_mut(), &g, &mut self.gen_state)?;
        self.step += 1;
        Ok(StepRecord { grad_norm: norm, ..rec })
    }

    /// Mean inpainted-region PSNR of the streamed output over `frames`.
    pub fn validate(&self, data: &Dataset, frames: &[usize]) -> Result<f64> {
        let (r, _, _) = evaluate(&self.model, data, frames, self.eval_sparsify, true)?;
        Ok(r.psnr_inpaint)
    }

    /// Runs `cfg.steps` steps on uniformly drawn training timesteps,
    /// validating every `val_every` steps and after the last one.
    pub fn run(&mut self, data: &Dataset, mut on_record: impl FnMut(&StepRecord)) -> Result<Vec<StepRecord>> {
        let (train, held) = split_frames(data.meta.timesteps, self.cfg.holdout);
        if train.is_empty() {
            return Err(Error::Config("no training timesteps left after the holdout".into()));
        }
        let mut log = Vec::with_capacity(self.cfg.steps);
        for i in 0..self.cfg.steps {
            let t = train[self.rng.gen_range(0..train.len())];
            let mut rec = self.train_step(data, t)?;
            let last = i + 1 == self.cfg.steps;
            if !held.is_empty() && ((self.cfg.val_every > 0 && (i + 1) % self.cfg.val_every == 0) || last) {
                rec.psnr_val = Some(self.validate(data, &held)?);
            }
            on_record(&rec);
            log.push(rec);
        }
        Ok(log)
    }
}

fn scalar(v: Var<'_>) -> f32 {
    v.value().data()[0]
}

fn collect_grads(grads: &mvinpaint_tensor::Grads, w: &[Var<'_>], like: &[Tensor]) -> Vec<Tensor> {
    w.iter()
        .zip(like)
        .map(|(v, t)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn holdout_is_the_tail() {
        let (a, b) = split_frames(10, 3);
        assert_eq!(a, (0..7).collect::<Vec<_>>());
        assert_eq!(b, vec![7, 8, 9]);
    }
}
