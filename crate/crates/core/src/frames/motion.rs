use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::{FrameError, SEGMENT_LEN};

/// Side of the square blocks frames are averaged over before differencing.
const BLOCK: u32 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionTrajectory {
    pub raw: Vec<f64>,
    pub smoothed: Vec<f64>,
    pub window: usize,
}

/// Frames `[start, end)` before the zoom.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StableSegment {
    pub start: usize,
    pub end: usize,
    /// Detected zoom onset as a motion-signal index.
    pub onset: Option<usize>,
    /// The onset came too early for a full segment; `[0, 30)` is used anyway.
    pub low_confidence: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    /// Odd smoothing window, in samples.
    pub window: usize,
    /// Onset threshold as a multiple of the baseline median.
    pub threshold_factor: f64,
    /// Samples from the start used for the baseline.
    pub baseline_len: usize,
    /// Consecutive samples that must exceed the threshold.
    pub persistence: usize,
    /// Re-locate the onset on the raw signal after the smoothed detection.
    pub refine: bool,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            window: 15,
            threshold_factor: 1.5,
            baseline_len: 30,
            persistence: 5,
            refine: true,
        }
    }
}

fn block_luma(frame: &RgbImage) -> Vec<f64> {
    let (w, h) = frame.dimensions();
    let (bw, bh) = (w.div_ceil(BLOCK), h.div_ceil(BLOCK));
    let mut sums = vec![0.0; (bw * bh) as usize];
    let mut counts = vec![0u32; (bw * bh) as usize];
    for (x, y, p) in frame.enumerate_pixels() {
        let [r, g, b] = p.0.map(f64::from);
        let i = ((y / BLOCK) * bw + x / BLOCK) as usize;
        sums[i] += 0.299 * r + 0.587 * g + 0.114 * b;
        counts[i] += 1;
    }
    sums.iter()
        .zip(&counts)
        .map(|(s, &c)| s / c as f64)
        .collect()
}

/// Mean absolute grayscale difference between consecutive frames, computed
/// on 4x4 block averages. Edge blocks average whatever pixels they hold.
pub fn motion_signal(frames: &[RgbImage]) -> Vec<f64> {
    let lumas: Vec<Vec<f64>> = frames.iter().map(block_luma).collect();
    lumas
        .windows(2)
        .map(|w| {
            let n = w[0].len() as f64;
            w[0].iter()
                .zip(&w[1])
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
                / n
        })
        .collect()
}

/// Centered moving average; windows shrink at the ends.
pub fn smooth(signal: &[f64], window: usize) -> Result<Vec<f64>, FrameError> {
    if window.is_multiple_of(2) || window > signal.len() {
        return Err(FrameError::InvalidWindow {
            window,
            len: signal.len(),
        });
    }
    let half = window / 2;
    let mut prefix = Vec::with_capacity(signal.len() + 1);
    prefix.push(0.0);
    for &x in signal {
        prefix.push(prefix.last().copied().unwrap_or(0.0) + x);
    }
    Ok((0..signal.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(signal.len());
            (prefix[hi] - prefix[lo]) / (hi - lo) as f64
        })
        .collect())
}

fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// First index from `from` starting a run of `persistence` samples above
/// `threshold`.
fn first_run_above(
    signal: &[f64],
    from: usize,
    threshold: f64,
    persistence: usize,
) -> Option<usize> {
    let mut run = 0;
    for (i, &x) in signal.iter().enumerate().skip(from) {
        if x > threshold {
            run += 1;
            if run >= persistence {
                return Some(i + 1 - run);
            }
        } else {
            run = 0;
        }
    }
    None
}

/// Coarse onset on the smoothed signal.
fn coarse_onset(smoothed: &[f64], config: &DetectorConfig) -> Option<usize> {
    let base = median(&smoothed[..config.baseline_len.min(smoothed.len())]);
    first_run_above(
        smoothed,
        0,
        config.threshold_factor * base,
        config.persistence.max(1),
    )
}

/// A centered average starts rising up to half a window before the real
/// onset, so the smoothed estimate only brackets it. The raw signal is then
/// searched around it against a threshold set from the baseline noise and
/// the level reached after the onset.
fn refine(raw: &[f64], coarse: usize, config: &DetectorConfig) -> usize {
    let baseline = &raw[..config.baseline_len.min(raw.len())];
    let b = median(baseline);
    let deviations: Vec<f64> = baseline.iter().map(|x| (x - b).abs()).collect();
    let sigma = 1.4826 * median(&deviations);
    let after = &raw[coarse..(coarse + 2 * config.window).min(raw.len())];
    let level = median(after);
    if level <= b {
        return coarse;
    }
    let rise = level - b;
    let threshold = b + (2.5 * sigma).max(0.1 * rise).min(0.5 * rise);
    let from = coarse.saturating_sub(config.window);
    match first_run_above(raw, from, threshold, config.persistence.max(1)) {
        // The smoothed signal leads a sharp onset by up to half a window, a
        // little more under noise, and hardly ever lags it.
        Some(t) if t <= coarse + config.window => t,
        _ => coarse,
    }
}

/// Motion during the zoom relative to the motion of the still prefix, which
/// is pure sensor and compression noise:
/// `median(raw[onset..onset + window]) / median(raw[..onset])`.
/// Infinite for a perfectly still prefix.
pub fn onset_snr(raw: &[f64], onset: usize, window: usize) -> f64 {
    if onset == 0 || onset >= raw.len() {
        return 0.0;
    }
    let noise = median(&raw[..onset]);
    let level = median(&raw[onset..(onset + window.max(1)).min(raw.len())]);
    if noise <= 0.0 {
        return if level > 0.0 { f64::INFINITY } else { 0.0 };
    }
    level / noise
}

/// Locates the still prefix before the zoom.
///
/// The onset is the first sample where the smoothed signal stays above
/// `threshold_factor` times the median of its first `baseline_len` values
/// for `persistence` samples, optionally refined on the raw signal. The
/// segment is `[0, onset)`; without an onset it spans the whole recording;
/// an onset before 30 falls back to `[0, 30)` with `low_confidence` set.
pub fn detect_stable_prefix(
    trajectory: &MotionTrajectory,
    config: &DetectorConfig,
) -> StableSegment {
    let frames = trajectory.smoothed.len() + 1;
    let onset = coarse_onset(&trajectory.smoothed, config).map(|c| {
        if config.refine && trajectory.raw.len() == trajectory.smoothed.len() {
            refine(&trajectory.raw, c, config)
        } else {
            c
        }
    });
    match onset {
        None => StableSegment {
            start: 0,
            end: frames,
            onset: None,
            low_confidence: false,
        },
        Some(t) if t < SEGMENT_LEN => StableSegment {
            start: 0,
            end: SEGMENT_LEN,
            onset: Some(t),
            low_confidence: true,
        },
        Some(t) => StableSegment {
            start: 0,
            end: t,
            onset: Some(t),
            low_confidence: false,
        },
    }
}
