use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sewer_core::dataset::synth::DEFAULT_FILL_RANGES;
use sewer_core::dataset::{generate_synthetic, synthetic_layout, RawLabel, SyntheticSpec};
use sewer_core::frames::{
    detect_stable_prefix, extract, frames_for_training, motion_signal, onset_snr, smooth,
    DetectorConfig, MotionTrajectory, SEGMENT_LEN,
};

// Per-pixel oracle: average each 4x4 block (partial at the edges) by
// explicit iteration over its pixels.
fn oracle_motion(a: &RgbImage, b: &RgbImage) -> f64 {
    let (w, h) = a.dimensions();
    let luma = |img: &RgbImage, x: u32, y: u32| {
        let p = img.get_pixel(x, y).0;
        0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64
    };
    let mut total = 0.0;
    let mut blocks = 0;
    for by in (0..h).step_by(4) {
        for bx in (0..w).step_by(4) {
            let (mut sa, mut sb, mut n) = (0.0, 0.0, 0.0);
            for y in by..(by + 4).min(h) {
                for x in bx..(bx + 4).min(w) {
                    sa += luma(a, x, y);
                    sb += luma(b, x, y);
                    n += 1.0;
                }
            }
            total += (sa / n - sb / n).abs();
            blocks += 1;
        }
    }
    total / blocks as f64
}

#[test]
fn motion_signal_matches_per_pixel_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let frames: Vec<RgbImage> = (0..5)
        .map(|_| RgbImage::from_fn(23, 17, |_, _| Rgb([rng.gen(), rng.gen(), rng.gen()])))
        .collect();
    let fast = motion_signal(&frames);
    assert_eq!(fast.len(), 4);
    for (i, v) in fast.iter().enumerate() {
        let oracle = oracle_motion(&frames[i], &frames[i + 1]);
        assert!((v - oracle).abs() <= 1e-9, "{v} vs {oracle}");
    }
}

fn trajectory(raw: Vec<f64>) -> MotionTrajectory {
    let smoothed = smooth(&raw, 15).unwrap();
    MotionTrajectory {
        raw,
        smoothed,
        window: 15,
    }
}

// A still prefix with Gaussian jitter, then the roughly constant motion of a
// zoom in and back out, then stillness again.
#[test]
fn noisy_zoom_trajectories_are_located_within_three_samples() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut checked = 0;
    for _ in 0..300 {
        let onset = rng.gen_range(34..70);
        let base = rng.gen_range(0.5..3.0);
        // Still-camera motion is itself noise, so its spread scales with it.
        let sigma = base * rng.gen_range(0.1..0.5);
        let peak = base * rng.gen_range(2.0..12.0);
        let noise = Normal::new(0.0, sigma).unwrap();
        let len = onset + 40;
        let raw: Vec<f64> = (0..len)
            .map(|i| {
                let clean: f64 = if (onset..onset + 24).contains(&i) {
                    peak
                } else {
                    base
                };
                (clean + noise.sample(&mut rng)).max(0.0)
            })
            .collect();
        if onset_snr(&raw, onset, 15) < 5.0 {
            continue;
        }
        checked += 1;
        let seg = detect_stable_prefix(&trajectory(raw), &DetectorConfig::default());
        let found = seg.onset.expect("onset detected");
        assert!(found.abs_diff(onset) <= 3, "true {onset}, found {found}");
    }
    assert!(checked >= 200, "only {checked} trajectories reached SNR 5");
}

#[test]
fn onset_snr_examples() {
    let raw = [1.0, 3.0, 2.0, 2.0, 10.0, 12.0, 11.0];
    assert_eq!(onset_snr(&raw, 4, 3), 5.5);
    assert_eq!(onset_snr(&raw, 4, 1), 5.0);
    assert!(onset_snr(&[0.0, 0.0, 4.0], 2, 1).is_infinite());
    assert_eq!(onset_snr(&raw, 0, 2), 0.0);
}

#[test]
fn synthetic_videos_yield_thirty_normalized_frames_near_the_onset() {
    for seed in 0..8u64 {
        let mut spec = SyntheticSpec::new((seed % 4) as u8, 100 + seed);
        spec.rain = seed % 2 == 1;
        let video = generate_synthetic(&spec).unwrap();
        let ex = extract(&video.sequence, &DetectorConfig::default()).unwrap();
        assert_eq!(ex.frames.len(), SEGMENT_LEN);
        assert_eq!(ex.selected.len(), SEGMENT_LEN);
        for f in &ex.frames {
            assert_eq!(f.shape(), &[150, 150, 3]);
            assert!(f.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        let snr = onset_snr(&ex.trajectory.raw, video.onset, 15);
        assert!(snr >= 5.0, "seed {seed}: snr {snr}");
        let found = ex.segment.onset.unwrap();
        assert!(
            found.abs_diff(video.onset) <= 3,
            "seed {seed}: true {}, found {found}",
            video.onset
        );
        assert!(!ex.segment.low_confidence);
    }
}

#[test]
fn extracted_frames_survive_a_disk_roundtrip() {
    let video = generate_synthetic(&SyntheticSpec::new(2, 7)).unwrap();
    let ex = extract(&video.sequence, &DetectorConfig::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    ex.write(dir.path()).unwrap();
    let back = frames_for_training(dir.path(), &DetectorConfig::default()).unwrap();
    assert_eq!(back.len(), SEGMENT_LEN);
    for (a, b) in ex.frames.iter().zip(&back) {
        let worst = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f32, f32::max);
        assert!(worst <= 0.5 / 255.0 + 1e-6);
    }
}

#[test]
fn synthetic_fill_stays_inside_its_class_range() {
    for level in 0..4u8 {
        let [lo, hi] = DEFAULT_FILL_RANGES[level as usize];
        for seed in 0..100 {
            let layout = synthetic_layout(&SyntheticSpec::new(level, seed)).unwrap();
            let f = layout.fill_fraction;
            assert!(f >= lo && f <= hi, "level {level} seed {seed}: fill {f}");
            let expected = match level {
                0 => RawLabel::Clean,
                1 => RawLabel::SlightlyDirty,
                2 => RawLabel::Dirty,
                _ if f >= 0.65 => RawLabel::Obstructed,
                _ => RawLabel::VeryDirty,
            };
            assert_eq!(layout.raw_label, expected);
        }
    }
}
