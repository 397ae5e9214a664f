use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use super::{lr_schedule, mix_seed, AdamW, Checkpoint, MetricsSink, TrainConfig};
use crate::error::{contract_err, dim_err, Error, Result};
use crate::model::BiGru;
use crate::tensor::{Tape, Tensor};

pub const GRU_HIDDEN: usize = 64;

/// Trains a Bi-GRU on frozen per-clip feature sequences, one sequence per video.
pub fn train_temporal(
    features: &[Tensor],
    labels: &[Vec<usize>],
    classes: usize,
    config: &TrainConfig,
    sink: &mut MetricsSink,
) -> Result<BiGru> {
    if features.is_empty() {
        return contract_err("temporal training needs at least one video");
    }
    if features.len() != labels.len() {
        return dim_err(format!("{} feature sequences vs {} label sequences", features.len(), labels.len()));
    }
    let input = features[0].shape().get(1).copied().unwrap_or(0);
    for (f, l) in features.iter().zip(labels) {
        if f.rank() != 2 || f.shape()[1] != input || f.shape()[0] != l.len() {
            return dim_err(format!("feature sequence {:?} vs {} labels", f.shape(), l.len()));
        }
    }
    let mut gru = BiGru::new(input, GRU_HIDDEN, classes, mix_seed(config.seed, 0, 2))?;
    let per_epoch = features.len().div_ceil(config.batch_size);
    let total = config.epochs * per_epoch;
    let mut opt = AdamW::new(&gru.params, config.betas, config.weight_decay);
    let mut step = 0;
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..features.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(config.seed, epoch as u64, 3)));
        for batch in order.chunks(config.batch_size) {
            let lr = lr_schedule(step, total, config.warmup_steps, config.base_lr);
            gru.params.zero_grads();
            let mut sum = 0.0;
            for &v in batch {
                let mut tape = Tape::new();
                let x = tape.constant(features[v].clone());
                let logits = gru.logits(&mut tape, x)?;
                let loss = tape.cross_entropy(logits, &labels[v])?;
                sum += tape.value(loss).item();
                let scaled = tape.scale(loss, 1.0 / batch.len() as f64)?;
                tape.backward(scaled, &mut gru.params)?;
            }
            opt.step(&mut gru.params, lr)?;
            step += 1;
            sink.emit(step, "temporal", "loss", sum / batch.len() as f64)?;
        }
    }
    Ok(gru)
}

pub fn gru_checkpoint(gru: &BiGru) -> Checkpoint {
    let mut ck = Checkpoint::new(
        "gru",
        json!({ "input": gru.input, "hidden": gru.hidden, "classes": gru.classes }),
    );
    ck.push_store("param.", &gru.params);
    ck
}

pub fn load_gru(ck: &Checkpoint) -> Result<BiGru> {
    ck.expect_kind("gru")?;
    let field = |k: &str| {
        ck.config[k]
            .as_u64()
            .map(|v| v as usize)
            .ok_or_else(|| Error::Checkpoint(format!("missing `{k}` in gru checkpoint")))
    };
    let mut gru = BiGru::new(field("input")?, field("hidden")?, field("classes")?, 0)?;
    ck.restore_store("param.", &mut gru.params)?;
    Ok(gru)
}
