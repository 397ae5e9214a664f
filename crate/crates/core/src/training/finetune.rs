use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use super::{clip_grad_norm, lr_schedule, mix_seed, AdamW, Checkpoint, MetricsSink, TrainConfig};
use crate::data::VideoClip;
use crate::error::{contract_err, dim_err, Error, Result};
use crate::model::{Classifier, ModelConfig};
use crate::tensor::Tape;

/// Supervised clip classification with layer-wise lr decay.
#[derive(Clone, Debug)]
pub struct Finetuner {
    pub model: Classifier,
    pub optimizer: AdamW,
    pub config: TrainConfig,
    pub step: usize,
    pub total_steps: usize,
}

impl Finetuner {
    pub fn new(model: Classifier, config: TrainConfig, train_size: usize) -> Result<Self> {
        let total_steps = config.epochs * train_size.div_ceil(config.batch_size.max(1));
        let check = TrainConfig {
            steps: total_steps.max(config.warmup_steps),
            ..config.clone()
        };
        check.validate()?;
        let mut optimizer = AdamW::new(&model.params, config.betas, config.weight_decay);
        optimizer.set_layer_decay(&model.params, model.config.depth, config.layer_decay);
        Ok(Self {
            model,
            optimizer,
            config,
            step: 0,
            total_steps,
        })
    }

    fn batch_step(&mut self, clips: &[VideoClip], labels: &[usize], batch: &[usize]) -> Result<f64> {
        let lr = lr_schedule(self.step, self.total_steps, self.config.warmup_steps, self.config.base_lr);
        self.model.params.zero_grads();
        let scale = 1.0 / batch.len() as f64;
        let mut total = 0.0;
        for &i in batch {
            let mut tape = Tape::new();
            let logits = self.model.logits(&mut tape, &clips[i])?;
            let loss = tape.cross_entropy(logits, &[labels[i]])?;
            total += tape.value(loss).item();
            let scaled = tape.scale(loss, scale)?;
            tape.backward(scaled, &mut self.model.params)?;
        }
        let grad_norm = match self.config.grad_clip {
            Some(c) => clip_grad_norm(&mut self.model.params, c),
            None => self.model.params.grad_norm(),
        };
        if !grad_norm.is_finite() {
            return Err(Error::Diverged {
                step: self.step + 1,
                lr,
                grad_norm,
                cause: "non-finite gradient".into(),
            });
        }
        self.optimizer.step(&mut self.model.params, lr)?;
        self.step += 1;
        Ok(total * scale)
    }

    /// One shuffled pass over the labelled clips; returns the mean batch loss.
    pub fn train_epoch(&mut self, epoch: usize, clips: &[VideoClip], labels: &[usize], sink: &mut MetricsSink) -> Result<f64> {
        check_labels(clips, labels, self.model.classes)?;
        let mut order: Vec<usize> = (0..clips.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(self.config.seed, epoch as u64, 1)));
        let mut sum = 0.0;
        let mut batches = 0;
        for batch in order.chunks(self.config.batch_size) {
            let loss = self.batch_step(clips, labels, batch)?;
            sink.emit(self.step, "finetune", "loss", loss)?;
            sum += loss;
            batches += 1;
        }
        Ok(sum / batches as f64)
    }
}

fn check_labels(clips: &[VideoClip], labels: &[usize], classes: usize) -> Result<()> {
    if clips.is_empty() {
        return contract_err("fine-tuning needs at least one labelled clip");
    }
    if clips.len() != labels.len() {
        return dim_err(format!("{} clips vs {} labels", clips.len(), labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return dim_err(format!("label {bad} out of range for {classes} classes"));
    }
    Ok(())
}

/// Trains `model` for `config.epochs` epochs on labelled clips.
pub fn finetune(
    model: Classifier,
    clips: &[VideoClip],
    labels: &[usize],
    config: &TrainConfig,
    sink: &mut MetricsSink,
) -> Result<Classifier> {
    check_labels(clips, labels, model.classes)?;
    let mut ft = Finetuner::new(model, config.clone(), clips.len())?;
    for epoch in 0..config.epochs {
        let loss = ft.train_epoch(epoch, clips, labels, sink)?;
        log::info!("finetune epoch {} loss {loss:.4}", epoch + 1);
    }
    Ok(ft.model)
}

/// Logits for every clip, `[clips][classes]`.
pub fn predict_all(model: &Classifier, clips: &[VideoClip]) -> Result<Vec<Vec<f64>>> {
    clips.iter().map(|c| model.predict(c)).collect()
}

pub fn classifier_checkpoint(model: &Classifier) -> Checkpoint {
    let mut ck = Checkpoint::new("classifier", json!({ "model": model.config, "classes": model.classes }));
    ck.push_store("param.", &model.params);
    ck
}

pub fn load_classifier(ck: &Checkpoint) -> Result<Classifier> {
    ck.expect_kind("classifier")?;
    let cfg: ModelConfig = serde_json::from_value(ck.config["model"].clone())
        .map_err(|e| Error::Checkpoint(format!("bad model config: {e}")))?;
    let classes = ck.config["classes"]
        .as_u64()
        .ok_or_else(|| Error::Checkpoint("missing class count".into()))? as usize;
    let mut model = Classifier::new(cfg, classes, 0)?;
    ck.restore_store("param.", &mut model.params)?;
    Ok(model)
}
