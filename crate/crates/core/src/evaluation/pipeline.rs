use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{mask_overlap_diagnostic, mean_ap, softmax_rows, top1, AblationRow, AblationTable, EvalReport, StrategyOverlap};
use crate::data::{gen_long_video, ClipSpec, LongVideo, VideoClip};
use crate::error::{config_err, Error, Result};
use crate::masking::{plan_mask, MaskConfig, Strategy};
use crate::model::{BiGru, Classifier, MaeModel, ModelConfig};
use crate::training::{
    config_hash, finetune, mix_seed, train_temporal, LossKind, MetricsSink, Pretrainer, TrainConfig,
};

/// Everything one generate → pretrain → fine-tune → temporal → evaluate run needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub temporal: TrainConfig,
    pub videos: usize,
    pub phases: usize,
    pub clips_per_phase: (usize, usize),
    pub n_objects: usize,
    pub object_size: usize,
    pub speed: (usize, usize),
    /// Fraction of training videos whose labels are used.
    pub label_fraction: f64,
    /// Fraction of videos held out for evaluation.
    pub test_fraction: f64,
    pub seed: u64,
}

impl PipelineConfig {
    pub fn tiny() -> Self {
        Self {
            model: ModelConfig::tiny(),
            pretrain: TrainConfig::pretrain(),
            finetune: TrainConfig::finetune(),
            temporal: TrainConfig::temporal(),
            videos: 20,
            phases: 4,
            clips_per_phase: (2, 4),
            n_objects: 1,
            object_size: 8,
            speed: (1, 3),
            label_fraction: 0.05,
            test_fraction: 0.3,
            seed: 0,
        }
    }

    pub fn clip_spec(&self) -> ClipSpec {
        let g = self.model.geometry;
        ClipSpec {
            frames: g.frames,
            height: g.height,
            width: g.width,
            patch: g.patch,
            n_objects: self.n_objects,
            object_size: self.object_size,
            speed: self.speed,
            ..ClipSpec::default()
        }
    }

    pub fn model_seed(&self) -> u64 {
        mix_seed(self.seed, 0, 13)
    }

    /// Stage configs with their seeds derived from the run seed.
    pub fn pretrain_config(&self) -> TrainConfig {
        TrainConfig {
            seed: mix_seed(self.seed, 0, 14),
            ..self.pretrain.clone()
        }
    }

    pub fn finetune_config(&self) -> TrainConfig {
        TrainConfig {
            seed: mix_seed(self.seed, 0, 15),
            ..self.finetune.clone()
        }
    }

    pub fn temporal_config(&self) -> TrainConfig {
        TrainConfig {
            seed: mix_seed(self.seed, 0, 16),
            ..self.temporal.clone()
        }
    }

    pub fn hash(&self) -> String {
        config_hash(&serde_json::to_string(self).unwrap_or_default())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        self.temporal.validate()?;
        self.clip_spec().validate()?;
        for phase in 0..self.phases {
            crate::data::phase_spec(&self.clip_spec(), phase).validate()?;
        }
        if self.videos < 2 {
            return config_err("need at least 2 videos (one to train, one to test)");
        }
        if self.phases < 2 {
            return config_err("need at least 2 phases");
        }
        if !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) {
            return config_err(format!("label fraction must lie in (0, 1], got {}", self.label_fraction));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return config_err(format!("test fraction must lie in (0, 1), got {}", self.test_fraction));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<LongVideo>,
    pub test: Vec<LongVideo>,
    /// Indices into `train` whose labels may be used.
    pub labeled: Vec<usize>,
}

impl Dataset {
    pub fn train_clips(&self) -> Vec<VideoClip> {
        self.train.iter().flat_map(|v| v.clips.iter().cloned()).collect()
    }

    pub fn labeled_clips(&self) -> (Vec<VideoClip>, Vec<usize>) {
        let mut clips = Vec::new();
        let mut labels = Vec::new();
        for &i in &self.labeled {
            clips.extend(self.train[i].clips.iter().cloned());
            labels.extend(self.train[i].labels.iter().copied());
        }
        (clips, labels)
    }
}

/// Videos `0..videos` with seeds derived from the run seed, split by [`split_videos`].
pub fn build_dataset(cfg: &PipelineConfig) -> Result<Dataset> {
    cfg.validate()?;
    split_videos(generate_videos(cfg)?, cfg)
}

pub fn generate_videos(cfg: &PipelineConfig) -> Result<Vec<LongVideo>> {
    let spec = cfg.clip_spec();
    (0..cfg.videos)
        .map(|v| gen_long_video(video_seed(cfg.seed, v), cfg.phases, cfg.clips_per_phase, &spec))
        .collect()
}

pub fn video_seed(seed: u64, index: usize) -> u64 {
    mix_seed(seed, index as u64, 10)
}

/// Holds out the last `ceil(test_fraction · videos)` videos and labels a
/// seeded `ceil(label_fraction · train)` subset of the rest.
pub fn split_videos(mut videos: Vec<LongVideo>, cfg: &PipelineConfig) -> Result<Dataset> {
    if videos.len() < 2 {
        return config_err(format!("need at least 2 videos to split, got {}", videos.len()));
    }
    let total = videos.len();
    let n_test = ((cfg.test_fraction * total as f64).ceil() as usize).clamp(1, total - 1);
    let test = videos.split_off(total - n_test);
    let n_label = ((cfg.label_fraction * videos.len() as f64).ceil() as usize).clamp(1, videos.len());
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0, 11));
    let mut labeled = sample(&mut rng, videos.len(), n_label).into_vec();
    labeled.sort_unstable();
    Ok(Dataset {
        train: videos,
        test,
        labeled,
    })
}

/// Mean overlap of `mask` plans, scored with `model`'s patch embedding, over `clips`.
pub fn strategy_overlap(model: &MaeModel, clips: &[VideoClip], mask: &MaskConfig, seed: u64) -> Result<StrategyOverlap> {
    let mut sum = 0.0;
    let mut frac = 0.0;
    for (i, clip) in clips.iter().enumerate() {
        let grid = model.token_grid(clip)?;
        let plan = plan_mask(mask, &grid, mix_seed(seed, i as u64, 12))?;
        let s = mask_overlap_diagnostic(&plan, clip, &model.config.geometry)?;
        sum += s.overlap;
        frac += s.motion_fraction;
    }
    let n = clips.len().max(1) as f64;
    Ok(StrategyOverlap {
        strategy: mask.strategy.as_str().to_string(),
        mean_overlap: sum / n,
        motion_fraction: frac / n,
        clips: clips.len(),
    })
}

/// Artifacts of one full run.
#[derive(Debug)]
pub struct PipelineOutput {
    pub report: EvalReport,
    pub pretrainer: Option<Pretrainer>,
    pub classifier: Classifier,
    pub gru: BiGru,
}

/// Pretrains (skipped when `pretrain.steps == 0`), fine-tunes on the labelled
/// videos, trains the temporal model on their features and scores the
/// held-out videos clip by clip.
pub fn run_pipeline(cfg: &PipelineConfig, label: &str, sink: &mut MetricsSink) -> Result<PipelineOutput> {
    run_pipeline_on(cfg, &build_dataset(cfg)?, label, sink)
}

/// [`run_pipeline`] over an existing dataset.
pub fn run_pipeline_on(cfg: &PipelineConfig, data: &Dataset, label: &str, sink: &mut MetricsSink) -> Result<PipelineOutput> {
    cfg.validate()?;
    let model_seed = cfg.model_seed();
    let mae = MaeModel::new(cfg.model.clone(), model_seed)?;
    let test_clips: Vec<VideoClip> = data.test.iter().flat_map(|v| v.clips.iter().cloned()).collect();

    let (pretrainer, scorer) = if cfg.pretrain.steps > 0 {
        let mut p = Pretrainer::new(mae, cfg.pretrain_config())?;
        p.run(&data.train_clips(), sink)?;
        let scorer = p.model.clone();
        (Some(p), scorer)
    } else {
        (None, mae)
    };
    let final_pretrain_loss = sink.series("pretrain", "loss").last().map(|&(_, l)| l);
    let overlap = strategy_overlap(&scorer, &test_clips, &cfg.pretrain.mask, cfg.seed)?;

    let mut classifier = Classifier::new(cfg.model.clone(), cfg.phases, model_seed)?;
    if pretrainer.is_some() {
        classifier.load_encoder(&scorer.params)?;
    }
    let (clips, labels) = data.labeled_clips();
    let classifier = finetune(classifier, &clips, &labels, &cfg.finetune_config(), sink)?;

    let mut feats = Vec::with_capacity(data.labeled.len());
    let mut seqs = Vec::with_capacity(data.labeled.len());
    for &i in &data.labeled {
        feats.push(classifier.extract_features(&data.train[i].clips)?);
        seqs.push(data.train[i].labels.clone());
    }
    let gru = train_temporal(&feats, &seqs, cfg.phases, &cfg.temporal_config(), sink)?;

    let (logits, truth) = score_videos(&classifier, Some(&gru), &data.test)?;
    let report = build_report(label, &logits, &truth, cfg.phases, vec![overlap], final_pretrain_loss, cfg)?;
    Ok(PipelineOutput {
        report,
        pretrainer,
        classifier,
        gru,
    })
}

/// Per-clip logits over held-out videos, from the temporal model when given,
/// otherwise from the clip classifier alone.
pub fn score_videos(classifier: &Classifier, gru: Option<&BiGru>, videos: &[LongVideo]) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    let mut logits = Vec::new();
    let mut truth = Vec::new();
    for video in videos {
        match gru {
            Some(g) => {
                let out = g.predict(&classifier.extract_features(&video.clips)?)?;
                logits.extend((0..video.len()).map(|r| out.row(r).to_vec()));
            }
            None => logits.extend(crate::training::predict_all(classifier, &video.clips)?),
        }
        truth.extend(video.labels.iter().copied());
    }
    Ok((logits, truth))
}

pub fn build_report(
    label: &str,
    logits: &[Vec<f64>],
    truth: &[usize],
    classes: usize,
    overlap: Vec<StrategyOverlap>,
    final_pretrain_loss: Option<f64>,
    cfg: &PipelineConfig,
) -> Result<EvalReport> {
    let ap = mean_ap(&softmax_rows(logits), truth, classes)?;
    Ok(EvalReport {
        label: label.to_string(),
        per_class_ap: ap.per_class,
        excluded_classes: ap.excluded,
        map: ap.map,
        top1: top1(logits, truth)?,
        overlap,
        final_pretrain_loss,
        seed: cfg.seed,
        config_hash: cfg.hash(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    Ratio,
    DecoderDepth,
    Strategy,
    Steps,
    Loss,
}

impl AblationAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            AblationAxis::Ratio => "ratio",
            AblationAxis::DecoderDepth => "decoder_depth",
            AblationAxis::Strategy => "strategy",
            AblationAxis::Steps => "steps",
            AblationAxis::Loss => "loss",
        }
    }

    /// Row values used when none are given.
    pub fn default_values(self) -> Vec<String> {
        let v: &[&str] = match self {
            AblationAxis::Ratio => &["0.80", "0.85", "0.90", "0.95"],
            AblationAxis::DecoderDepth => &["1", "2", "4"],
            AblationAxis::Strategy => &["random", "tube", "frame", "surgmae"],
            AblationAxis::Steps => &["50", "100", "200"],
            AblationAxis::Loss => &["mse+norm", "mse+raw", "l1+norm", "l1+raw"],
        };
        v.iter().map(|s| s.to_string()).collect()
    }

    /// Copy of `base` with this axis set to `value`.
    pub fn apply(self, base: &PipelineConfig, value: &str) -> Result<PipelineConfig> {
        let mut cfg = base.clone();
        let bad = |what: &str| Error::Config(format!("invalid {what} value `{value}` for axis {}", self.as_str()));
        match self {
            AblationAxis::Ratio => cfg.pretrain.mask.ratio = value.parse().map_err(|_| bad("ratio"))?,
            AblationAxis::DecoderDepth => cfg.model.decoder_depth = value.parse().map_err(|_| bad("depth"))?,
            AblationAxis::Strategy => cfg.pretrain.mask.strategy = value.parse::<Strategy>()?,
            AblationAxis::Steps => {
                cfg.pretrain.steps = value.parse().map_err(|_| bad("step count"))?;
                cfg.pretrain.warmup_steps = cfg.pretrain.warmup_steps.min(cfg.pretrain.steps);
            }
            AblationAxis::Loss => {
                let (kind, norm) = match value.split_once('+') {
                    Some((k, "norm")) => (k, Some(true)),
                    Some((k, "raw")) => (k, Some(false)),
                    Some(_) => return Err(bad("loss")),
                    None => (value, None),
                };
                cfg.pretrain.loss = kind.parse::<LossKind>()?;
                if let Some(n) = norm {
                    cfg.pretrain.normalize = n;
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ratio" => Ok(AblationAxis::Ratio),
            "decoder_depth" => Ok(AblationAxis::DecoderDepth),
            "strategy" => Ok(AblationAxis::Strategy),
            "steps" => Ok(AblationAxis::Steps),
            "loss" => Ok(AblationAxis::Loss),
            other => config_err(format!(
                "unknown ablation axis `{other}` (expected ratio, decoder_depth, strategy, steps, loss)"
            )),
        }
    }
}

/// One full pipeline run per value, in the given order.
pub fn ablation_run(axis: AblationAxis, values: &[String], base: &PipelineConfig) -> Result<AblationTable> {
    if values.is_empty() {
        return config_err("ablation needs at least one value");
    }
    let configs = values
        .iter()
        .map(|v| axis.apply(base, v))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(values.len());
    for (value, cfg) in values.iter().zip(&configs) {
        log::info!("ablation {}={value}", axis.as_str());
        let mut sink = MetricsSink::memory();
        let out = run_pipeline(cfg, value, &mut sink)?;
        rows.push(AblationRow {
            value: value.clone(),
            report: out.report,
        });
    }
    Ok(AblationTable {
        axis: axis.as_str().to_string(),
        rows,
    })
}
