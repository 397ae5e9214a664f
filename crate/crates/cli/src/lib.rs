//! Command implementations behind the `vidmae` binary.

pub mod config;

use std::fs;
use std::path::{Path, PathBuf};

use vidmae::data::{read_long_video, write_long_video, LongVideo};
use vidmae::evaluation::{
    ablation_run, build_dataset, build_report, score_videos, split_videos, strategy_overlap, top1, AblationAxis,
    Dataset, StrategyOverlap,
};
use vidmae::model::{Classifier, MaeModel};
use vidmae::tensor::Tensor;
use vidmae::training::{
    classifier_checkpoint, finetune, gru_checkpoint, load_classifier, load_gru, predict_all, train_temporal,
    write_loss_csv, Checkpoint, MetricsSink, Pretrainer,
};
use vidmae::{Error, Result};

pub use config::RunConfig;

/// Options shared by every command.
#[derive(Clone, Debug, Default)]
pub struct Globals {
    pub config: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub settings: Vec<(String, String)>,
}

/// Splits `--key value` / `--key=value` words. `config` and `out` are
/// returned separately; `extra` names command options that are not settings.
pub fn split_settings(words: &[String], extra: &[&str]) -> Result<(Globals, Vec<(String, String)>)> {
    let mut globals = Globals::default();
    let mut options = Vec::new();
    let mut i = 0;
    while i < words.len() {
        let word = &words[i];
        let body = word
            .strip_prefix("--")
            .ok_or_else(|| Error::Config(format!("expected `--key value`, got `{word}`")))?;
        let (key, value) = match body.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                i += 1;
                let v = words
                    .get(i)
                    .ok_or_else(|| Error::Config(format!("missing value for `--{body}`")))?;
                (body.to_string(), v.clone())
            }
        };
        i += 1;
        let key = key.replace('-', "_");
        match key.as_str() {
            "config" => globals.config = Some(PathBuf::from(value)),
            "out" => globals.out = Some(PathBuf::from(value)),
            k if extra.contains(&k) => options.push((key, value)),
            _ => globals.settings.push((key, value)),
        }
    }
    Ok((globals, options))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text)?;
    Ok(())
}

/// Creates `<out>/<timestamp>-<hash>`, adding a counter if the name is taken.
pub fn create_run_dir(out: &Path, hash: &str) -> Result<PathBuf> {
    fs::create_dir_all(out)?;
    let stamp = chrono::Local::now().format("%Y%m%dT%H%M%S");
    let base = format!("{stamp}-{hash}");
    for n in 0.. {
        let name = if n == 0 { base.clone() } else { format!("{base}-{n}") };
        let dir = out.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e.into()),
        }
    }
    unreachable!("run directory counter is unbounded")
}

/// A run directory with its metrics sink and resolved config already written.
pub struct Run {
    pub dir: PathBuf,
    pub sink: MetricsSink,
}

impl Run {
    pub fn start(cfg: &RunConfig, out: &Path) -> Result<Self> {
        let dir = create_run_dir(out, &cfg.hash())?;
        write_text(&dir.join("config.txt"), &cfg.render())?;
        let sink = MetricsSink::to_file(&dir.join("metrics.jsonl"))?;
        println!("run_dir={}", dir.display());
        Ok(Self { dir, sink })
    }

    pub fn finish(mut self) -> Result<PathBuf> {
        self.sink.flush()?;
        Ok(self.dir)
    }
}

fn default_out(g: &Globals, fallback: &str) -> PathBuf {
    g.out.clone().unwrap_or_else(|| PathBuf::from(fallback))
}

fn require<'a>(cfg: &'a RunConfig, key: &str) -> Result<&'a Path> {
    cfg.path(key)
        .ok_or_else(|| Error::Config(format!("this command needs `--{key} <path>`")))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path)
}

/// Manifests `video-*.jsonl` under `dir`, in file-name order.
pub fn read_videos(dir: &Path) -> Result<Vec<LongVideo>> {
    let mut manifests: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|x| x == "jsonl")
                && p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("video-"))
        })
        .collect();
    manifests.sort();
    if manifests.is_empty() {
        return Err(Error::Config(format!("no video manifests in {}", dir.display())));
    }
    manifests.iter().map(|m| read_long_video(m)).collect()
}

/// Videos from `data` when given, otherwise generated from the config.
pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    match cfg.path("data") {
        Some(dir) => {
            let videos = read_videos(dir)?;
            for v in &videos {
                for c in &v.clips {
                    cfg.pipeline.model.geometry.check_clip(c)?;
                }
            }
            split_videos(videos, &cfg.pipeline)
        }
        None => build_dataset(&cfg.pipeline),
    }
}

pub fn cmd_gen(cfg: &RunConfig, g: &Globals) -> Result<PathBuf> {
    let out = default_out(g, "data");
    let videos = vidmae::evaluation::generate_videos(&cfg.pipeline)?;
    fs::create_dir_all(&out)?;
    let mut clips = 0;
    for (i, video) in videos.iter().enumerate() {
        write_long_video(video, &out.join(format!("video-{i:04}.jsonl")))?;
        clips += video.len();
    }
    write_text(&out.join("config.txt"), &cfg.render())?;
    println!("videos={} clips={clips} out={}", videos.len(), out.display());
    Ok(out)
}

pub fn cmd_pretrain(cfg: &RunConfig, g: &Globals) -> Result<PathBuf> {
    let data = load_dataset(cfg)?;
    let mut trainer = match cfg.path("checkpoint") {
        Some(p) => {
            let mut t = Pretrainer::from_checkpoint(&load_checkpoint(p)?)?;
            t.config.steps = cfg.pipeline.pretrain.steps;
            t
        }
        None => Pretrainer::new(
            MaeModel::new(cfg.pipeline.model.clone(), cfg.pipeline.model_seed())?,
            cfg.pipeline.pretrain_config(),
        )?,
    };
    let mut run = Run::start(cfg, &default_out(g, "runs"))?;
    let stats = trainer.run(&data.train_clips(), &mut run.sink)?;
    trainer.checkpoint().save(&run.dir.join("mae.ckpt"))?;
    write_loss_csv(&run.dir.join("loss.csv"), &run.sink.series("pretrain", "loss"))?;
    if let (Some(first), Some(last)) = (stats.first(), stats.last()) {
        println!("steps={} first_loss={:.6} final_loss={:.6}", last.step, first.loss, last.loss);
    }
    run.finish()
}

pub fn cmd_finetune(cfg: &RunConfig, g: &Globals) -> Result<PathBuf> {
    let p = &cfg.pipeline;
    let data = load_dataset(cfg)?;
    let mut classifier = Classifier::new(p.model.clone(), p.phases, p.model_seed())?;
    if let Some(path) = cfg.path("checkpoint") {
        let mae = Pretrainer::from_checkpoint(&load_checkpoint(path)?)?;
        classifier.load_encoder(&mae.model.params)?;
    }
    let mut run = Run::start(cfg, &default_out(g, "runs"))?;
    let (clips, labels) = data.labeled_clips();
    let classifier = finetune(classifier, &clips, &labels, &p.finetune_config(), &mut run.sink)?;
    classifier_checkpoint(&classifier).save(&run.dir.join("classifier.ckpt"))?;
    let acc = top1(&predict_all(&classifier, &clips)?, &labels)?;
    println!("labeled_clips={} train_top1={acc:.4}", clips.len());
    run.finish()
}

/// Feature sequences for every video, tagged with split and labelled flag.
pub fn cmd_extract(cfg: &RunConfig, g: &Globals) -> Result<PathBuf> {
    let classifier = load_classifier(&load_checkpoint(require(cfg, "checkpoint")?)?)?;
    let data = load_dataset(cfg)?;
    let run = Run::start(cfg, &default_out(g, "runs"))?;
    let mut meta = Vec::new();
    let mut ck = Checkpoint::new("features", serde_json::Value::Null);
    let tagged = data
        .train
        .iter()
        .enumerate()
        .map(|(i, v)| (v, "train", data.labeled.contains(&i)))
        .chain(data.test.iter().map(|v| (v, "test", false)));
    for (i, (video, split, labeled)) in tagged.enumerate() {
        ck.push(format!("features.{i}"), classifier.extract_features(&video.clips)?);
        meta.push(serde_json::json!({
            "video_id": video.video_id,
            "split": split,
            "labeled": labeled,
            "labels": video.labels,
        }));
    }
    let n = meta.len();
    ck.config = serde_json::json!({ "classes": classifier.classes, "videos": meta });
    ck.save(&run.dir.join("features.ckpt"))?;
    println!("videos={n} dim={}", classifier.config.dim);
    run.finish()
}

/// One feature sequence as stored by `extract`.
pub struct FeatureSeq {
    pub video_id: String,
    pub split: String,
    pub labeled: bool,
    pub labels: Vec<usize>,
    pub features: Tensor,
}

pub fn read_features(ck: &Checkpoint) -> Result<(usize, Vec<FeatureSeq>)> {
    ck.expect_kind("features")?;
    let bad = |what: &str| Error::Checkpoint(format!("features file: {what}"));
    let classes = ck.config["classes"].as_u64().ok_or_else(|| bad("missing class count"))? as usize;
    let videos = ck.config["videos"].as_array().ok_or_else(|| bad("missing video list"))?;
    let mut out = Vec::with_capacity(videos.len());
    for (i, v) in videos.iter().enumerate() {
        let labels = v["labels"]
            .as_array()
            .ok_or_else(|| bad("missing labels"))?
            .iter()
            .map(|l| l.as_u64().map(|l| l as usize).ok_or_else(|| bad("bad label")))
            .collect::<Result<Vec<_>>>()?;
        out.push(FeatureSeq {
            video_id: v["video_id"].as_str().unwrap_or_default().to_string(),
            split: v["split"].as_str().unwrap_or_default().to_string(),
            labeled: v["labeled"].as_bool().unwrap_or(false),
            labels,
            features: ck
                .get(&format!("features.{i}"))
                .ok_or_else(|| bad(&format!("missing tensor features.{i}")))?
                .clone(),
        });
    }
    Ok((classes, out))
}

pub fn cmd_temporal(cfg: &RunConfig, g: &Globals) -> Result<PathBuf> {
    let (classes, seqs) = read_features(&load_checkpoint(require(cfg, "features")?)?)?;
    let chosen: Vec<&FeatureSeq> = seqs.iter().filter(|s| s.split == "train" && s.labeled).collect();
    let mut run = Run::start(cfg, &default_out(g, "runs"))?;
    let feats: Vec<Tensor> = chosen.iter().map(|s| s.features.clone()).collect();
    let labels: Vec<Vec<usize>> = chosen.iter().map(|s| s.labels.clone()).collect();
    let gru = train_temporal(&feats, &labels, classes, &cfg.pipeline.temporal_config(), &mut run.sink)?;
    gru_checkpoint(&gru).save(&run.dir.join("gru.ckpt"))?;
    println!("sequences={} hidden={}", chosen.len(), gru.hidden);
    run.finish()
}

/// Overlap of the configured strategy using the classifier's patch embedding;
/// skipped when the clips carry no motion masks (e.g. read from disk).
fn eval_overlap(cfg: &RunConfig, classifier: &Classifier, data: &Dataset) -> Result<Vec<StrategyOverlap>> {
    let p = &cfg.pipeline;
    let mut scorer = MaeModel::new(p.model.clone(), p.model_seed())?;
    scorer.load_encoder(&classifier.params)?;
    let clips: Vec<_> = data.test.iter().flat_map(|v| v.clips.iter().cloned()).collect();
    match strategy_overlap(&scorer, &clips, &p.pretrain.mask, p.seed) {
        Ok(o) => Ok(vec![o]),
        Err(Error::Unavailable(msg)) => {
            log::warn!("overlap diagnostic skipped: {msg}");
            Ok(Vec::new())
        }
        Err(e) => Err(e),
    }
}

pub fn cmd_eval(cfg: &RunConfig, g: &Globals) -> Result<PathBuf> {
    let classifier = load_classifier(&load_checkpoint(require(cfg, "checkpoint")?)?)?;
    let gru = cfg.path("gru").map(|p| load_checkpoint(p).and_then(|ck| load_gru(&ck))).transpose()?;
    let data = load_dataset(cfg)?;
    let run = Run::start(cfg, &default_out(g, "runs"))?;
    let (logits, truth) = score_videos(&classifier, gru.as_ref(), &data.test)?;
    let overlap = eval_overlap(cfg, &classifier, &data)?;
    let label = if gru.is_some() { "clip+gru" } else { "clip" };
    let report = build_report(label, &logits, &truth, classifier.classes, overlap, None, &cfg.pipeline)?;
    write_text(&run.dir.join("report.json"), &report.to_json()?)?;
    write_text(&run.dir.join("report.txt"), &report.render_text())?;
    print!("{}", report.render_text());
    run.finish()
}

pub fn cmd_ablate(cfg: &RunConfig, g: &Globals, axis: &str, values: Option<&str>) -> Result<PathBuf> {
    let axis: AblationAxis = axis.parse()?;
    let values: Vec<String> = match values {
        Some(v) => v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect(),
        None => axis.default_values(),
    };
    for v in &values {
        axis.apply(&cfg.pipeline, v)?;
    }
    let run = Run::start(cfg, &default_out(g, "runs"))?;
    let table = ablation_run(axis, &values, &cfg.pipeline)?;
    write_text(&run.dir.join("ablation.json"), &table.to_json()?)?;
    write_text(&run.dir.join("ablation.txt"), &table.render_text())?;
    print!("{}", table.render_text());
    run.finish()
}

/// `error kind=<kind> msg=<msg>` on one line.
pub fn error_line(e: &Error) -> String {
    let msg = e.to_string().replace(['\n', '\r'], " ");
    format!("error kind={} msg={msg}", e.kind())
}
