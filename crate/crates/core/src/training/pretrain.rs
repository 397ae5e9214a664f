use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use super::{clip_grad_norm, lr_schedule, masked_loss, mix_seed, AdamW, Checkpoint, MetricsSink, TrainConfig};
use crate::data::VideoClip;
use crate::error::{contract_err, Error, Result};
use crate::model::{MaeModel, ModelConfig};
use crate::tensor::Tape;
use crate::tokenizer::reconstruction_targets;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    /// 1-based index of the completed step.
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

/// Owns a masked autoencoder and its optimizer state.
#[derive(Clone, Debug)]
pub struct Pretrainer {
    pub model: MaeModel,
    pub optimizer: AdamW,
    pub config: TrainConfig,
    /// Completed steps.
    pub step: usize,
}

impl Pretrainer {
    pub fn new(model: MaeModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = AdamW::new(&model.params, config.betas, config.weight_decay);
        Ok(Self {
            model,
            optimizer,
            config,
            step: 0,
        })
    }

    /// Masked loss of one clip on a fresh tape, without touching gradients.
    pub fn clip_loss(&self, clip: &VideoClip, mask_seed: u64) -> Result<f64> {
        let mut tape = Tape::new();
        let out = self.model.forward(&mut tape, clip, &self.config.mask, mask_seed)?;
        let targets = reconstruction_targets(clip, &self.model.config.geometry, self.config.normalize)?;
        let loss = masked_loss(&mut tape, out.prediction, targets.target(), &out.plan, self.config.loss)?;
        Ok(tape.value(loss).item())
    }

    fn accumulate(&mut self, clips: &[VideoClip]) -> Result<f64> {
        let cfg = &self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, self.step as u64, 0));
        let scale = 1.0 / cfg.batch_size as f64;
        let mut total = 0.0;
        self.model.params.zero_grads();
        for _ in 0..cfg.batch_size {
            let clip = &clips[rng.gen_range(0..clips.len())];
            let mask_seed: u64 = rng.gen();
            let mut tape = Tape::new();
            let out = self.model.forward(&mut tape, clip, &cfg.mask, mask_seed)?;
            let targets = reconstruction_targets(clip, &self.model.config.geometry, cfg.normalize)?;
            let loss = masked_loss(&mut tape, out.prediction, targets.target(), &out.plan, cfg.loss)?;
            total += tape.value(loss).item();
            let scaled = tape.scale(loss, scale)?;
            tape.backward(scaled, &mut self.model.params)?;
        }
        Ok(total * scale)
    }

    /// One optimizer step on a batch drawn from `clips`. The batch, mask
    /// seeds and update depend only on the run seed and the step index.
    pub fn train_step(&mut self, clips: &[VideoClip]) -> Result<StepStats> {
        if clips.is_empty() {
            return contract_err("pretraining needs at least one clip");
        }
        let cfg = self.config.clone();
        let lr = lr_schedule(self.step, cfg.steps.max(self.step + 1), cfg.warmup_steps, cfg.base_lr);
        let diverged = |step: usize, grad_norm: f64, cause: String| Error::Diverged {
            step,
            lr,
            grad_norm,
            cause,
        };
        let loss = match self.accumulate(clips) {
            Ok(l) => l,
            Err(Error::NonFinite(op)) => {
                let norm = self.model.params.grad_norm();
                return Err(diverged(self.step + 1, norm, format!("non-finite value in `{op}`")));
            }
            Err(e) => return Err(e),
        };
        let grad_norm = match cfg.grad_clip {
            Some(c) => clip_grad_norm(&mut self.model.params, c),
            None => self.model.params.grad_norm(),
        };
        if !loss.is_finite() || !grad_norm.is_finite() {
            return Err(diverged(self.step + 1, grad_norm, format!("loss {loss}")));
        }
        self.optimizer.step(&mut self.model.params, lr)?;
        self.step += 1;
        Ok(StepStats {
            step: self.step,
            loss,
            lr,
            grad_norm,
        })
    }

    /// Runs until `config.steps` steps are complete, emitting loss, lr and
    /// grad norm per step.
    pub fn run(&mut self, clips: &[VideoClip], sink: &mut MetricsSink) -> Result<Vec<StepStats>> {
        self.run_steps(clips, self.config.steps.saturating_sub(self.step), sink)
    }

    pub fn run_steps(&mut self, clips: &[VideoClip], n: usize, sink: &mut MetricsSink) -> Result<Vec<StepStats>> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let s = self.train_step(clips)?;
            sink.emit(s.step, "pretrain", "loss", s.loss)?;
            sink.emit(s.step, "pretrain", "lr", s.lr)?;
            sink.emit(s.step, "pretrain", "grad_norm", s.grad_norm)?;
            log::debug!("pretrain step {} loss {:.5} lr {:.2e}", s.step, s.loss, s.lr);
            out.push(s);
        }
        Ok(out)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let config = json!({ "model": self.model.config, "train": self.config });
        let mut ck = Checkpoint::new("mae", config);
        ck.step = self.step;
        ck.push_store("param.", &self.model.params);
        for (id, name, t) in self.model.params.iter() {
            let m = crate::tensor::Tensor::from_parts(t.shape().to_vec(), self.optimizer.m[id.0].clone());
            let v = crate::tensor::Tensor::from_parts(t.shape().to_vec(), self.optimizer.v[id.0].clone());
            ck.push(format!("adam.m.{name}"), m);
            ck.push(format!("adam.v.{name}"), v);
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind("mae")?;
        let model_cfg: ModelConfig = serde_json::from_value(ck.config["model"].clone())
            .map_err(|e| Error::Checkpoint(format!("bad model config: {e}")))?;
        let train_cfg: TrainConfig = serde_json::from_value(ck.config["train"].clone())
            .map_err(|e| Error::Checkpoint(format!("bad train config: {e}")))?;
        let mut model = MaeModel::new(model_cfg, 0)?;
        ck.restore_store("param.", &mut model.params)?;
        let mut this = Self::new(model, train_cfg)?;
        for (id, name, _) in this.model.params.iter() {
            for (prefix, slot) in [("adam.m.", &mut this.optimizer.m[id.0]), ("adam.v.", &mut this.optimizer.v[id.0])] {
                let key = format!("{prefix}{name}");
                let t = ck
                    .get(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("checkpoint is missing tensor `{key}`")))?;
                if t.numel() != slot.len() {
                    return Err(Error::Checkpoint(format!("tensor `{key}` has the wrong size")));
                }
                slot.copy_from_slice(t.values());
            }
        }
        this.step = ck.step;
        this.optimizer.t = ck.step as u64;
        Ok(this)
    }
}
