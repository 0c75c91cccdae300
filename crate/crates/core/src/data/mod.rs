//! Dataset records, detection sidecars, sampling and synthetic corpora.

pub mod assets;
pub mod records;
pub mod sampling;
pub mod stats;
pub mod synthetic;

pub use assets::{DiskAssets, TrackAssets};
pub use records::{
    dataset_to_json, detections_to_jsonl, load_dataset, load_detections, parse_dataset,
    save_dataset, write_atomic, Attributes, Dataset, DetectionStore, FrameDetections, FrameRef,
    ObjectRecord, RawDetection, TrackRecord, DEFAULT_FRAME_SIZE, FEATURE_DIM, OBJECT_WIDTH,
};
pub use sampling::{
    filter_detections, iou, subsample_frames, DEFAULT_FRAME_CAP, DEFAULT_SCORE_THRESHOLD,
};
pub use stats::{compute_stats, compute_stats_with, AttributeStats, DatasetStats, Summary};
pub use synthetic::{generate_synthetic, SyntheticCorpus, SyntheticSpec};
