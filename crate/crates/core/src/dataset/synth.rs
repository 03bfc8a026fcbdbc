//! Procedural sewer-inspection footage.
//!
//! A video shows a pipe seen along its axis: wall joints as concentric rings
//! converging to a vanishing point, a ground canal wedge at the bottom and,
//! for dirty classes, a deposit blob rising from the floor. The camera holds
//! still for a while and then zooms in and back out, which is what the frame
//! pipeline has to find.

use std::path::Path;
use std::sync::Arc;

use image::{Rgb, RgbImage};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DatasetError, FrameBank, RawLabel, VideoRecord};
use crate::frames::{extract, DetectorConfig, FrameSequence};

/// Default occluded-canal fraction range per class level.
pub const DEFAULT_FILL_RANGES: [[f64; 2]; 4] = [[0.0, 0.02], [0.05, 0.15], [0.2, 0.4], [0.45, 0.8]];

/// Level-3 videos at or above this fill are labeled `Obstructed`.
pub const OBSTRUCTED_FILL: f64 = 0.65;

/// Per-frame magnification step while zooming.
const ZOOM_RATE: f64 = 0.04;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    /// Obstruction level 0 (clean) to 3.
    pub level: u8,
    pub width: u32,
    pub height: u32,
    pub ring_count: u32,
    pub fill_ranges: [[f64; 2]; 4],
    /// Strength of the left-right lighting falloff, in [0, 1).
    pub illumination_gradient: f64,
    /// Standard deviation of the per-pixel noise in 8-bit units.
    pub noise_amplitude: f64,
    pub rain: bool,
    pub seed: u64,
    /// Length of the still prefix; drawn from [35, 60] when absent.
    #[serde(default)]
    pub static_frames: Option<usize>,
    /// Frames spent zooming in, then the same number zooming out.
    pub zoom_frames: usize,
}

impl SyntheticSpec {
    pub fn new(level: u8, seed: u64) -> Self {
        Self {
            level,
            width: 640,
            height: 360,
            ring_count: 6,
            fill_ranges: DEFAULT_FILL_RANGES,
            illumination_gradient: 0.3,
            noise_amplitude: 4.0,
            rain: false,
            seed,
            static_frames: None,
            zoom_frames: 12,
        }
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |m: String| Err(DatasetError::InvalidSpec(m));
        if self.level > 3 {
            return bad(format!("level {} is outside 0..=3", self.level));
        }
        if self.width < 8 || self.height < 8 {
            return bad(format!("image {}x{} is too small", self.width, self.height));
        }
        for (i, [lo, hi]) in self.fill_ranges.iter().enumerate() {
            if !(0.0..=1.0).contains(lo) || !(0.0..=1.0).contains(hi) || lo > hi {
                return bad(format!(
                    "fill range {i} [{lo}, {hi}] is not a sub-interval of [0, 1]"
                ));
            }
            if i > 0 && self.fill_ranges[i - 1][1] >= *lo {
                return bad(format!(
                    "fill ranges {} and {i} overlap or are out of order",
                    i - 1
                ));
            }
        }
        if !(0.0..1.0).contains(&self.illumination_gradient) {
            return bad(format!(
                "illumination gradient {} is outside [0, 1)",
                self.illumination_gradient
            ));
        }
        if !(self.noise_amplitude >= 0.0 && self.noise_amplitude.is_finite()) {
            return bad(format!(
                "noise amplitude {} is invalid",
                self.noise_amplitude
            ));
        }
        if self.static_frames.is_some_and(|n| n < 2) {
            return bad("static prefix needs at least 2 frames".into());
        }
        if self.zoom_frames == 0 {
            return bad("zoom_frames must be positive".into());
        }
        Ok(())
    }
}

/// Ground-truth layout of the first frame, before noise.
#[derive(Debug, Clone)]
pub struct SyntheticLayout {
    pub width: u32,
    pub height: u32,
    /// Row-major, true where the ground canal is (occluded or not).
    pub canal_mask: Vec<bool>,
    /// Row-major, true where the deposit blob is.
    pub obstruction_mask: Vec<bool>,
    /// Fraction of canal pixels covered by the blob.
    pub fill_fraction: f64,
    pub raw_label: RawLabel,
}

#[derive(Debug, Clone)]
pub struct SyntheticVideo {
    pub sequence: FrameSequence,
    pub layout: SyntheticLayout,
    /// Index of the first zoomed frame.
    pub zoom_start: usize,
    /// Index of the first moving transition in the motion signal
    /// (`zoom_start - 1`).
    pub onset: usize,
}

impl SyntheticVideo {
    pub fn raw_label(&self) -> RawLabel {
        self.layout.raw_label
    }
}

struct Blob {
    top: f64,
    wave_amp: f64,
    wave_freq: f64,
    wave_phase: f64,
}

impl Blob {
    fn edge(&self, x: f64) -> f64 {
        self.top + self.wave_amp * (x * self.wave_freq + self.wave_phase).sin()
    }
}

struct Scene {
    x0: f64,
    active_w: f64,
    h: f64,
    vp: (f64, f64),
    wall: [f64; 3],
    canal: [f64; 3],
    deposit: [f64; 3],
    rings: Vec<f64>,
    ring_width: f64,
    canal_slope: f64,
    blob_slope: f64,
    illum: f64,
    blob: Option<Blob>,
}

#[derive(Clone, Copy, PartialEq)]
enum Surface {
    Wall,
    Canal,
    Deposit,
}

impl Scene {
    fn new(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Self {
        let h = spec.height as f64;
        let w = spec.width as f64;
        let active_w = w.min(h * 4.0 / 3.0).floor();
        let x0 = ((w - active_w) / 2.0).floor();
        let vp = (
            x0 + active_w / 2.0 + rng.gen_range(-0.06..0.06) * active_w,
            h * rng.gen_range(0.36..0.46),
        );
        let g = rng.gen_range(95.0..140.0);
        let wall = [
            g * rng.gen_range(0.95..1.1),
            g,
            g * rng.gen_range(0.85..1.0),
        ];
        let canal = [
            rng.gen_range(30.0..45.0),
            rng.gen_range(38.0..50.0),
            rng.gen_range(42.0..58.0),
        ];
        let deposit = [
            rng.gen_range(150.0..180.0),
            rng.gen_range(105.0..125.0),
            rng.gen_range(55.0..75.0),
        ];
        let r0 = h * rng.gen_range(0.85..1.0);
        let spacing = rng.gen_range(0.5..0.7);
        let rings = (0..spec.ring_count)
            .map(|k| r0 / (1.0 + k as f64 * spacing))
            .collect();
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        Self {
            x0,
            active_w,
            h,
            vp,
            wall,
            canal,
            deposit,
            rings,
            ring_width: rng.gen_range(0.025..0.04),
            canal_slope: rng.gen_range(0.3..0.42),
            blob_slope: rng.gen_range(1.0..1.4),
            illum: sign * spec.illumination_gradient,
            blob: None,
        }
    }

    fn surface(&self, x: f64, y: f64) -> Surface {
        let (dx, dy) = (x - self.vp.0, y - self.vp.1);
        if dy > 0.0 {
            if let Some(b) = &self.blob {
                if y > b.edge(x) && dx.abs() < dy * self.blob_slope {
                    return Surface::Deposit;
                }
            }
            if dx.abs() < dy * self.canal_slope {
                return Surface::Canal;
            }
        }
        Surface::Wall
    }

    fn in_canal(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.vp.0, y - self.vp.1);
        dy > 0.0 && dx.abs() < dy * self.canal_slope
    }

    /// Noise-free color at scene coordinates.
    fn color(&self, x: f64, y: f64) -> [f64; 3] {
        let (dx, dy) = (x - self.vp.0, y - self.vp.1);
        let d = dx.hypot(dy);
        let depth = 0.2 + 0.8 * (d / (0.6 * self.h)).min(1.0);
        let mut shade = depth
            * (1.0 + self.illum * (x - self.x0 - self.active_w / 2.0) / (self.active_w / 2.0));
        let base = match self.surface(x, y) {
            Surface::Deposit => {
                let texture = 1.0 + 0.12 * (x * 0.23).sin() * (y * 0.19).sin();
                return self.deposit.map(|c| c * shade.max(0.35) * texture);
            }
            Surface::Canal => self.canal,
            Surface::Wall => self.wall,
        };
        if self
            .rings
            .iter()
            .any(|&r| (d - r).abs() < self.ring_width * r)
        {
            shade *= 0.5;
        }
        if d < 0.035 * self.h {
            shade *= 0.25;
        }
        base.map(|c| c * shade)
    }

    /// Renders the scene magnified by `m` around the vanishing point.
    fn render(&self, width: u32, height: u32, m: f64) -> Vec<[f32; 3]> {
        let mut out = vec![[0.0; 3]; (width * height) as usize];
        let (xa, xb) = (self.x0 as u32, (self.x0 + self.active_w) as u32);
        for v in 0..height {
            let y = self.vp.1 + (v as f64 - self.vp.1) / m;
            for u in xa..xb {
                let x = self.vp.0 + (u as f64 - self.vp.0) / m;
                out[(v * width + u) as usize] = self.color(x, y).map(|c| c as f32);
            }
        }
        out
    }

    fn canal_pixels(&self, height: u32) -> Vec<(f64, f64)> {
        let (xa, xb) = (self.x0 as u32, (self.x0 + self.active_w) as u32);
        let mut out = Vec::new();
        for v in 0..height {
            for u in xa..xb {
                if self.in_canal(u as f64, v as f64) {
                    out.push((u as f64, v as f64));
                }
            }
        }
        out
    }
}

fn covered(blob: &Blob, canal: &[(f64, f64)]) -> f64 {
    let hits = canal.iter().filter(|&&(x, y)| y > blob.edge(x)).count();
    hits as f64 / canal.len() as f64
}

/// Places the blob so that the covered canal fraction is the smallest one
/// not below `target`.
fn place_blob(scene: &Scene, canal: &[(f64, f64)], target: f64, rng: &mut ChaCha8Rng) -> Blob {
    let mut blob = Blob {
        top: 0.0,
        wave_amp: scene.h * rng.gen_range(0.01..0.025),
        wave_freq: rng.gen_range(0.02..0.06),
        wave_phase: rng.gen_range(0.0..std::f64::consts::TAU),
    };
    // Coverage falls as the top edge moves down.
    let (mut lo, mut hi) = (
        scene.vp.1 - blob.wave_amp - 1.0,
        scene.h + blob.wave_amp + 1.0,
    );
    for _ in 0..60 {
        blob.top = 0.5 * (lo + hi);
        if covered(&blob, canal) >= target {
            lo = blob.top;
        } else {
            hi = blob.top;
        }
    }
    blob.top = lo;
    blob
}

fn raw_label(level: u8, fill: f64) -> RawLabel {
    match level {
        0 => RawLabel::Clean,
        1 => RawLabel::SlightlyDirty,
        2 => RawLabel::Dirty,
        _ if fill >= OBSTRUCTED_FILL => RawLabel::Obstructed,
        _ => RawLabel::VeryDirty,
    }
}

fn build(spec: &SyntheticSpec) -> Result<(Scene, SyntheticLayout, ChaCha8Rng), DatasetError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut scene = Scene::new(spec, &mut rng);
    let canal = scene.canal_pixels(spec.height);
    if canal.is_empty() {
        return Err(DatasetError::InvalidSpec(
            "image too small to hold a canal".into(),
        ));
    }
    let [lo, hi] = spec.fill_ranges[spec.level as usize];
    // Level 0 is clean by construction regardless of its nominal range.
    if spec.level > 0 {
        // Keep clear of the upper bound so pixel granularity cannot cross it.
        let upper = (hi - 0.005).max(lo);
        let target = if upper > lo {
            rng.gen_range(lo..upper)
        } else {
            lo
        };
        scene.blob = Some(place_blob(&scene, &canal, target, &mut rng));
    }
    let n = (spec.width * spec.height) as usize;
    let mut canal_mask = vec![false; n];
    let mut obstruction_mask = vec![false; n];
    let (xa, xb) = (scene.x0 as u32, (scene.x0 + scene.active_w) as u32);
    for v in 0..spec.height {
        for u in xa..xb {
            let i = (v * spec.width + u) as usize;
            let (x, y) = (u as f64, v as f64);
            canal_mask[i] = scene.in_canal(x, y);
            obstruction_mask[i] = scene.surface(x, y) == Surface::Deposit;
        }
    }
    let canal_count = canal_mask.iter().filter(|&&c| c).count();
    let hits = canal_mask
        .iter()
        .zip(&obstruction_mask)
        .filter(|(c, o)| **c && **o)
        .count();
    let fill_fraction = hits as f64 / canal_count as f64;
    let layout = SyntheticLayout {
        width: spec.width,
        height: spec.height,
        canal_mask,
        obstruction_mask,
        fill_fraction,
        raw_label: raw_label(spec.level, fill_fraction),
    };
    Ok((scene, layout, rng))
}

/// Scene layout and masks without rendering any frames.
pub fn synthetic_layout(spec: &SyntheticSpec) -> Result<SyntheticLayout, DatasetError> {
    build(spec).map(|(_, layout, _)| layout)
}

fn quantize(
    clean: &[[f32; 3]],
    spec: &SyntheticSpec,
    x_range: (u32, u32),
    noise: &Normal<f64>,
    rng: &mut ChaCha8Rng,
) -> RgbImage {
    let mut img = RgbImage::new(spec.width, spec.height);
    for (i, px) in img.pixels_mut().enumerate() {
        let u = i as u32 % spec.width;
        if u < x_range.0 || u >= x_range.1 {
            continue;
        }
        let c = clean[i];
        *px =
            Rgb([0, 1, 2]
                .map(|k| (c[k] as f64 + noise.sample(rng)).round().clamp(0.0, 255.0) as u8));
    }
    if spec.rain {
        let streak = (spec.height / 10).max(2);
        for _ in 0..12 {
            let u = rng.gen_range(x_range.0..x_range.1);
            let v0 = rng.gen_range(0..spec.height - streak);
            for v in v0..v0 + streak {
                let p = img.get_pixel_mut(u, v);
                p.0 = p.0.map(|c| c.saturating_add(40));
            }
        }
    }
    img
}

/// Renders a full synthetic inspection video with its ground truth.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticVideo, DatasetError> {
    let (scene, layout, mut rng) = build(spec)?;
    let static_frames = match spec.static_frames {
        Some(n) => n,
        None => rng.gen_range(35..=60),
    };
    let noise = Normal::new(0.0, spec.noise_amplitude).expect("validated amplitude");
    let x_range = (scene.x0 as u32, (scene.x0 + scene.active_w) as u32);
    let still = scene.render(spec.width, spec.height, 1.0);
    let mut frames = Vec::with_capacity(static_frames + 2 * spec.zoom_frames);
    for _ in 0..static_frames {
        frames.push(quantize(&still, spec, x_range, &noise, &mut rng));
    }
    let zoom_in = (1..=spec.zoom_frames).map(|i| i as i32);
    let zoom_out = (0..spec.zoom_frames).rev().map(|i| i as i32);
    for step in zoom_in.chain(zoom_out) {
        let m = (1.0 + ZOOM_RATE).powi(step);
        let clean = scene.render(spec.width, spec.height, m);
        frames.push(quantize(&clean, spec, x_range, &noise, &mut rng));
    }
    // Pad with still frames so every video reaches the minimum length.
    while frames.len() < 60 {
        frames.push(quantize(&still, spec, x_range, &noise, &mut rng));
    }
    let sequence = FrameSequence::new(frames, 10.0).expect("uniform frames, at least 60");
    Ok(SyntheticVideo {
        sequence,
        layout,
        zoom_start: static_frames,
        onset: static_frames - 1,
    })
}

/// Ground truth and detector outcome for one corpus video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusVideo {
    pub id: String,
    pub level: u8,
    pub seed: u64,
    pub fill_fraction: f64,
    pub raw_label: RawLabel,
    pub true_onset: usize,
    pub detected_onset: Option<usize>,
}

/// Synthetic videos already run through frame extraction, kept in memory.
#[derive(Debug, Clone, Default)]
pub struct SyntheticCorpus {
    pub records: Vec<VideoRecord>,
    pub frames: FrameBank,
    pub videos: Vec<CorpusVideo>,
}

/// Generates `videos_per_class` videos for each level 0..=3 and extracts
/// their 30-frame segments. Video seeds are drawn from `seed`; records point
/// at `root/<id>`, where nothing is written.
pub fn synthetic_corpus(
    videos_per_class: usize,
    seed: u64,
    root: &Path,
    detector: &DetectorConfig,
) -> Result<SyntheticCorpus, DatasetError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut corpus = SyntheticCorpus::default();
    for level in 0..4u8 {
        for i in 0..videos_per_class {
            let spec = SyntheticSpec::new(level, rng.gen());
            let video = generate_synthetic(&spec)?;
            let ex = extract(&video.sequence, detector)?;
            let id = format!("syn-{level}-{i:04}");
            corpus.records.push(VideoRecord::new(
                id.clone(),
                root.join(&id),
                video.raw_label(),
            ));
            corpus.videos.push(CorpusVideo {
                id: id.clone(),
                level,
                seed: spec.seed,
                fill_fraction: video.layout.fill_fraction,
                raw_label: video.raw_label(),
                true_onset: video.onset,
                detected_onset: ex.segment.onset,
            });
            corpus
                .frames
                .insert(id, ex.frames.into_iter().map(Arc::new).collect());
        }
    }
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(level: u8, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            width: 160,
            height: 90,
            ..SyntheticSpec::new(level, seed)
        }
    }

    #[test]
    fn clean_has_no_deposit() {
        let layout = synthetic_layout(&SyntheticSpec::new(0, 3)).unwrap();
        assert_eq!(layout.fill_fraction, 0.0);
        assert!(layout.obstruction_mask.iter().all(|&o| !o));
        assert_eq!(layout.raw_label, RawLabel::Clean);
    }

    #[test]
    fn same_seed_same_frames() {
        let a = generate_synthetic(&small(2, 9)).unwrap();
        let b = generate_synthetic(&small(2, 9)).unwrap();
        assert_eq!(a.sequence.frames(), b.sequence.frames());
        let c = generate_synthetic(&small(2, 10)).unwrap();
        assert_ne!(a.sequence.frames(), c.sequence.frames());
    }

    #[test]
    fn shape_and_timeline() {
        let v = generate_synthetic(&small(1, 1)).unwrap();
        assert!(v.sequence.len() >= 60);
        assert!((35..=60).contains(&v.zoom_start));
        assert_eq!(v.onset + 1, v.zoom_start);
        let f = &v.sequence.frames()[0];
        assert_eq!(f.dimensions(), (160, 90));
        // 4:3 active area inside black borders.
        assert_eq!(f.get_pixel(0, 45).0, [0, 0, 0]);
        assert_eq!(f.get_pixel(159, 45).0, [0, 0, 0]);
    }

    #[test]
    fn static_prefix_is_still_up_to_noise() {
        let mut spec = small(3, 2);
        spec.noise_amplitude = 0.0;
        spec.static_frames = Some(40);
        let v = generate_synthetic(&spec).unwrap();
        let frames = v.sequence.frames();
        assert!(frames[..40].windows(2).all(|w| w[0] == w[1]));
        assert_ne!(frames[39], frames[40]);
    }

    #[test]
    fn level_three_splits_into_two_raw_labels() {
        assert_eq!(raw_label(3, 0.5), RawLabel::VeryDirty);
        assert_eq!(raw_label(3, 0.7), RawLabel::Obstructed);
    }

    #[test]
    fn invalid_specs() {
        let mut s = SyntheticSpec::new(1, 0);
        s.fill_ranges[2] = [0.1, 0.3];
        assert!(matches!(
            generate_synthetic(&s),
            Err(DatasetError::InvalidSpec(_))
        ));
        let mut s = SyntheticSpec::new(4, 0);
        assert!(s.validate().is_err());
        s.level = 1;
        s.fill_ranges[1] = [0.2, 0.1];
        assert!(s.validate().is_err());
    }
}
