//! Configuration, the two training stages, evaluation, ablations and
//! overlay rendering.

mod checkpoint;
mod config;
mod overlay;
mod prepare;
mod run;
mod train;

pub use checkpoint::{load_adapter, load_checkpoint, load_classifier, save_checkpoint, CheckpointMeta, Stage};
pub use config::{ClassifierConfig, DataConfig, LossConfig, MaskSource, PipelineConfig, TrainConfig};
pub use overlay::{colormap, overlay_rgb, render_overlay, OVERLAY_ALPHA};
pub use prepare::{
    downsample, keyword_table, load_samples, manifest_for, prepare_entries, read_prepared, split_entries,
    write_prepared, DatasetManifest, ManifestEntry, PreparedEntry,
};
pub use run::{
    ablation, evaluate_entries, fit_classifier, record_stage, run_ablation, run_eval, run_gazeprep, run_pipeline,
    run_synth, run_train_classifier, run_train_heatmap, source_samples, Ablation, AblationOutcome, RunManifest,
    StageRecord, Workspace,
};
pub use train::{
    head_accuracy, masked_features, masking_heatmaps, mean_fw_iou, train_classifier, train_heatmap, EncodedEntries,
    IterationLog, TrainLog, Trained, ValidationLog,
};
