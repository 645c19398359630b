//! Binary segmentation models, Dice training and pixel-count metrics.

mod metrics;
mod models;
mod train;

pub use metrics::{
    confusion_counts, dice_loss, metrics_from_counts, micro_imagewise_metrics, micro_metrics, ConfusionCounts,
    SegMetricSet, DEFAULT_DICE_EPS,
};
pub use models::{SegArch, SegNet};
pub use train::{
    evaluate_segmenter, score_predictions, train_segmenter, write_audit_csv, EpochRecord, ImageAudit, MaskPredictor,
    SegCheckpoint, SegEvaluation, SegLoss, SegTrainConfig, SegTraining, DEFAULT_THRESHOLD,
};
