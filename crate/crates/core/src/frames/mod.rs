//! Frame selection: find the still prefix of an inspection recording and
//! turn its first 30 frames into 150x150 network inputs.

mod motion;
mod preprocess;

pub use motion::{
    detect_stable_prefix, motion_signal, onset_snr, smooth, DetectorConfig, MotionTrajectory,
    StableSegment,
};
pub use preprocess::{preprocess, rgb_to_tensor, tensor_to_rgb, OUTPUT_SIZE};

use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::Tensor;

/// Frames taken from every video.
pub const SEGMENT_LEN: usize = 30;

/// Default nominal frame rate of inspection footage.
pub const DEFAULT_FPS: f64 = 10.0;

#[derive(Debug, Error)]
pub enum FrameError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{found} frames found, at least {required} required")]
    TooFewFrames { found: usize, required: usize },
    #[error("frame {index} is {actual:?}, expected {expected:?}")]
    MixedResolution {
        index: usize,
        expected: (u32, u32),
        actual: (u32, u32),
    },
    #[error("cannot decode {path:?}: {message}")]
    Decode { path: PathBuf, message: String },
    #[error("cannot encode {path:?}: {message}")]
    Encode { path: PathBuf, message: String },
    #[error("frame {width}x{height} is smaller than 480x360 after border removal")]
    TooSmall { width: u32, height: u32 },
    #[error("smoothing window {window} must be odd and at most the signal length {len}")]
    InvalidWindow { window: usize, len: usize },
    #[error(
        "segment [{start}, {end}) does not hold {SEGMENT_LEN} frames of a {len}-frame sequence"
    )]
    InvalidSegment {
        start: usize,
        end: usize,
        len: usize,
    },
    #[error("preprocessed frame has shape {0:?}, expected [150, 150, 3]")]
    BadTensor(Vec<usize>),
    #[error("sidecar: {0}")]
    Sidecar(#[from] serde_json::Error),
}

/// Ordered frames of one recording, all of one resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    frames: Vec<RgbImage>,
    fps: f64,
}

impl FrameSequence {
    pub fn new(frames: Vec<RgbImage>, fps: f64) -> Result<Self, FrameError> {
        if frames.len() < SEGMENT_LEN {
            return Err(FrameError::TooFewFrames {
                found: frames.len(),
                required: SEGMENT_LEN,
            });
        }
        let expected = frames[0].dimensions();
        if let Some((index, f)) = frames
            .iter()
            .enumerate()
            .find(|(_, f)| f.dimensions() != expected)
        {
            return Err(FrameError::MixedResolution {
                index,
                expected,
                actual: f.dimensions(),
            });
        }
        Ok(Self { frames, fps })
    }

    pub fn frames(&self) -> &[RgbImage] {
        &self.frames
    }

    pub fn into_frames(self) -> Vec<RgbImage> {
        self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    /// (width, height)
    pub fn resolution(&self) -> (u32, u32) {
        self.frames[0].dimensions()
    }
}

fn is_frame_file(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "ppm"))
}

/// Frame files of a directory in lexicographic order.
pub fn frame_files(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>, FrameError> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()?;
    files.retain(|p| p.is_file() && is_frame_file(p));
    files.sort();
    Ok(files)
}

fn decode(path: &Path) -> Result<RgbImage, FrameError> {
    image::open(path)
        .map(|img| img.into_rgb8())
        .map_err(|e| FrameError::Decode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

/// Loads a directory of PNG or binary PPM frames.
pub fn load_frames(dir: impl AsRef<Path>, fps: f64) -> Result<FrameSequence, FrameError> {
    let files = frame_files(dir)?;
    if files.len() < SEGMENT_LEN {
        return Err(FrameError::TooFewFrames {
            found: files.len(),
            required: SEGMENT_LEN,
        });
    }
    let frames = files
        .iter()
        .map(|p| decode(p))
        .collect::<Result<Vec<_>, _>>()?;
    FrameSequence::new(frames, fps)
}

/// Exactly the first 30 frames of `segment`.
pub fn select_frames<'a>(
    sequence: &'a FrameSequence,
    segment: &StableSegment,
) -> Result<&'a [RgbImage], FrameError> {
    let end = segment.start + SEGMENT_LEN;
    if segment.end < end || end > sequence.len() {
        return Err(FrameError::InvalidSegment {
            start: segment.start,
            end: segment.end,
            len: sequence.len(),
        });
    }
    Ok(&sequence.frames()[segment.start..end])
}

/// Everything the pipeline derives from one recording.
#[derive(Debug, Clone)]
pub struct Extraction {
    pub trajectory: MotionTrajectory,
    pub segment: StableSegment,
    /// Source indices of the selected frames.
    pub selected: std::ops::Range<usize>,
    pub frames: Vec<Tensor<f32>>,
    pub source_resolution: (u32, u32),
    pub fps: f64,
}

/// Motion trajectory and stable segment of a recording. The smoothing window
/// shrinks to the longest odd length the signal allows.
pub fn stable_segment(
    sequence: &FrameSequence,
    config: &DetectorConfig,
) -> Result<(MotionTrajectory, StableSegment), FrameError> {
    let raw = motion_signal(sequence.frames());
    let window = config.window.min(if raw.len() % 2 == 1 {
        raw.len()
    } else {
        raw.len() - 1
    });
    let smoothed = smooth(&raw, window)?;
    let trajectory = MotionTrajectory {
        raw,
        smoothed,
        window,
    };
    let segment = detect_stable_prefix(&trajectory, config);
    Ok((trajectory, segment))
}

/// Motion signal, stable-prefix detection, selection and preprocessing.
pub fn extract(
    sequence: &FrameSequence,
    config: &DetectorConfig,
) -> Result<Extraction, FrameError> {
    let (trajectory, segment) = stable_segment(sequence, config)?;
    let selected = select_frames(sequence, &segment)?;
    let frames = selected
        .iter()
        .map(preprocess)
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Extraction {
        trajectory,
        selected: segment.start..segment.start + SEGMENT_LEN,
        segment,
        frames,
        source_resolution: sequence.resolution(),
        fps: sequence.fps(),
    })
}

/// Sidecar written next to extracted frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionSidecar {
    pub segment_start: usize,
    pub segment_end: usize,
    pub onset: Option<usize>,
    pub low_confidence: bool,
    pub selected_start: usize,
    pub frame_count: usize,
    pub window: usize,
    pub fps: f64,
    pub source_width: u32,
    pub source_height: u32,
}

pub const SIDECAR_FILE: &str = "extraction.json";

impl Extraction {
    pub fn sidecar(&self) -> ExtractionSidecar {
        ExtractionSidecar {
            segment_start: self.segment.start,
            segment_end: self.segment.end,
            onset: self.segment.onset,
            low_confidence: self.segment.low_confidence,
            selected_start: self.selected.start,
            frame_count: self.trajectory.raw.len() + 1,
            window: self.trajectory.window,
            fps: self.fps,
            source_width: self.source_resolution.0,
            source_height: self.source_resolution.1,
        }
    }

    /// Writes `frame_000.png` .. `frame_029.png` plus the JSON sidecar.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<(), FrameError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        write_tensor_frames(dir, &self.frames)?;
        fs::write(
            dir.join(SIDECAR_FILE),
            serde_json::to_vec_pretty(&self.sidecar())?,
        )?;
        Ok(())
    }
}

pub fn write_tensor_frames(dir: &Path, frames: &[Tensor<f32>]) -> Result<(), FrameError> {
    for (i, t) in frames.iter().enumerate() {
        let path = dir.join(format!("frame_{i:03}.png"));
        tensor_to_rgb(t)?
            .save(&path)
            .map_err(|e| FrameError::Encode {
                path: path.clone(),
                message: e.to_string(),
            })?;
    }
    Ok(())
}

/// Loads already-preprocessed 150x150 frames, in file order.
pub fn load_preprocessed(dir: impl AsRef<Path>) -> Result<Vec<Tensor<f32>>, FrameError> {
    frame_files(dir)?
        .iter()
        .map(|p| {
            let img = decode(p)?;
            if img.dimensions() != (OUTPUT_SIZE as u32, OUTPUT_SIZE as u32) {
                return Err(FrameError::BadTensor(vec![
                    img.height() as usize,
                    img.width() as usize,
                    3,
                ]));
            }
            Ok(rgb_to_tensor(&img))
        })
        .collect()
}

/// Whether `dir` already holds at least 30 frames at network resolution.
pub fn is_preprocessed_dir(dir: impl AsRef<Path>) -> Result<bool, FrameError> {
    let files = frame_files(dir)?;
    Ok(files.len() >= SEGMENT_LEN
        && image::image_dimensions(&files[0])
            .is_ok_and(|d| d == (OUTPUT_SIZE as u32, OUTPUT_SIZE as u32)))
}

/// Frames ready for the network: a directory that already holds at least 30
/// preprocessed 150x150 frames is used as is, anything else goes through
/// [`extract`].
pub fn frames_for_training(
    dir: impl AsRef<Path>,
    config: &DetectorConfig,
) -> Result<Vec<Tensor<f32>>, FrameError> {
    let dir = dir.as_ref();
    if is_preprocessed_dir(dir)? {
        let mut frames = load_preprocessed(dir)?;
        frames.truncate(SEGMENT_LEN);
        return Ok(frames);
    }
    let seq = load_frames(dir, DEFAULT_FPS)?;
    Ok(extract(&seq, config)?.frames)
}
