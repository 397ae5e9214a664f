//! Metrics, masking diagnostics against motion ground truth, and the
//! pipeline and ablation harness.

mod diagnostic;
mod metrics;
mod pipeline;
mod report;

pub use diagnostic::{mask_overlap_diagnostic, token_motion_support, OverlapStats};
pub use metrics::{argmax, average_precision, mean_ap, rank_order, softmax_rows, top1, MeanAp};
pub use pipeline::{
    ablation_run, build_dataset, build_report, score_videos, generate_videos, run_pipeline, run_pipeline_on, split_videos, video_seed, strategy_overlap, AblationAxis, Dataset, PipelineConfig, PipelineOutput,
};
pub use report::{AblationRow, AblationTable, EvalReport, StrategyOverlap};
