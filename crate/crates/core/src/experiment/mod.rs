//! Config-driven orchestration of the two-stage generation pipeline and the
//! segmentation experiments that consume its output.

mod config;
mod gallery;
mod generate;
mod pipeline;
mod report;
mod run_dir;
mod sweep;
pub mod toy;

pub use config::ExperimentConfig;
pub use gallery::{emit_gallery, gallery_size, GalleryCell, CAPTION_BAND};
pub use generate::{
    generate_conditioned_images, generate_masks, generate_masks_detailed, synthetic_id, MaskGeneration, MAX_MASK_RETRIES,
};
pub use pipeline::{
    list_checkpoints, load_real_data, load_synthetic, open_run, read_masks, run_pipeline, run_stage, stage_eval_images,
    stage_eval_masks, stage_gallery, stage_gen_images, stage_gen_masks, stage_seed, stage_sweep, stage_three_way,
    stage_train_autoencoder, stage_train_image, stage_train_mask, write_masks, MaskManifest, RealData, Stage,
};
pub use report::{
    emit_report, load_report, parse_step, select_best_checkpoint, CheckpointTable, MetricReport, MixingPlan, ReportRow,
    REPORT_SCHEMA_VERSION,
};
pub use run_dir::{RunDir, StageLock, LOCK_FILE};
pub use sweep::{mixing_subsets, run_mixing_sweep, run_three_way};
