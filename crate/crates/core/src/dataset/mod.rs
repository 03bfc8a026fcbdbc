//! Dataset construction: label merging, balancing, video-level splits,
//! image-set assembly and a procedural synthetic-sewer generator.

mod assemble;
mod balance;
mod labels;
mod manifest;
pub mod synth;

pub use assemble::{assemble_image_dataset, FrameBank, ImageDataset, LabeledImage};
pub use balance::{
    class_counts, merge_classes, split_by_video, train_counts, undersample, SplitOptions,
    SplitRounding,
};
pub use labels::{MergedLabel, RawLabel, UnknownLabel};
pub use manifest::{
    append_record, manifest_hash, read_manifest, write_manifest, DatasetManifest, LabeledVideo,
    Split, VideoRecord,
};
pub use synth::{
    generate_synthetic, synthetic_corpus, synthetic_layout, CorpusVideo, SyntheticCorpus,
    SyntheticLayout, SyntheticSpec, SyntheticVideo,
};

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("manifest line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("duplicate video id {0:?}")]
    DuplicateId(String),
    #[error("frame directory {0:?} is referenced by more than one video")]
    SharedFrames(PathBuf),
    #[error("video {0:?} has no split assignment")]
    Unsplit(String),
    #[error("class {0} has no videos")]
    EmptyClass(MergedLabel),
    #[error("class {label} has {count} videos; a train/validation split needs at least 2")]
    TooFewVideos { label: MergedLabel, count: usize },
    #[error("train fraction {0} is outside [0, 1]")]
    InvalidFraction(f64),
    #[error("video {id:?} has {available} frames, {required} required")]
    MissingFrames {
        id: String,
        available: usize,
        required: usize,
    },
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Frames(#[from] crate::frames::FrameError),
}
