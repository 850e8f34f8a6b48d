//! Temporal action localization on synthetic data: generator, head, loss,
//! decoding and mAP evaluation.

mod data;
mod decode;
mod head;
mod instance;
mod metrics;

pub use data::{
    class_signature, generate_dataset, generate_video, ground_truth_map, read_annotations, read_dataset, read_split,
    write_dataset, write_split, BenchmarkConfig, Dataset, DatasetConfig, LengthComponent, SyntheticVideo,
};
pub use decode::{decode_predictions, nms, DecodeConfig};
pub use head::{
    localizer_forward, rasterize_targets, record_head, record_loss, tal_loss, HeadConfig, HeadOutput,
    Targets, TimeGrid, HEAD_PREFIX,
};
pub(crate) use head::split_output;
pub use instance::{tiou, ActionInstance};
pub use metrics::{interpolated_ap, load_detections, mean_average_precision, MapResult, Protocol, VideoDetections};
