//! Training objective and segmentation metrics.

mod labels;
mod loss;
mod scores;

pub use labels::{
    argmax_labels, nested_region_masks, parse_regions, BinaryMask, LabelVolume, Region,
};
pub use loss::{combined_loss, cross_entropy_loss, dice_loss, DICE_SMOOTH, LOG_FLOOR};
pub use scores::{
    dice_score, evaluate_regions, hd95, mean_class_dice, volume_similarity, write_metrics_csv,
    MetricsRow, METRICS_HEADER,
};
