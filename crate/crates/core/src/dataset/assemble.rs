use std::collections::HashMap;
use std::sync::Arc;

use super::{DatasetError, DatasetManifest, MergedLabel, Split};
use crate::Tensor;

/// Preprocessed frames keyed by video id.
pub type FrameBank = HashMap<String, Vec<Arc<Tensor<f32>>>>;

#[derive(Debug, Clone)]
pub struct LabeledImage {
    pub video_id: String,
    pub label: MergedLabel,
    pub frame_index: usize,
    pub image: Arc<Tensor<f32>>,
}

#[derive(Debug, Clone, Default)]
pub struct ImageDataset {
    pub train: Vec<LabeledImage>,
    pub validation: Vec<LabeledImage>,
}

impl ImageDataset {
    pub fn split(&self, split: Split) -> &[LabeledImage] {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
        }
    }

    /// Per-class image counts of one split.
    pub fn class_counts(&self, split: Split) -> [usize; 4] {
        let mut counts = [0; 4];
        for img in self.split(split) {
            counts[img.label.index()] += 1;
        }
        counts
    }
}

/// Expands every video of the manifest into `frames_per_video` labeled images.
///
/// Videos with more frames than needed contribute their first
/// `frames_per_video`; fewer is an error.
pub fn assemble_image_dataset(
    manifest: &DatasetManifest,
    frames: &FrameBank,
    frames_per_video: usize,
) -> Result<ImageDataset, DatasetError> {
    manifest.validate()?;
    let mut out = ImageDataset::default();
    for video in &manifest.videos {
        let id = &video.record.id;
        let available = frames.get(id).map_or(0, Vec::len);
        if available < frames_per_video {
            return Err(DatasetError::MissingFrames {
                id: id.clone(),
                available,
                required: frames_per_video,
            });
        }
        let target = match video.record.split.expect("validated") {
            Split::Train => &mut out.train,
            Split::Validation => &mut out.validation,
        };
        target.extend(
            frames[id][..frames_per_video]
                .iter()
                .enumerate()
                .map(|(i, image)| LabeledImage {
                    video_id: id.clone(),
                    label: video.label,
                    frame_index: i,
                    image: Arc::clone(image),
                }),
        );
    }
    Ok(out)
}
