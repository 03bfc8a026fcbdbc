use std::collections::{BTreeMap, HashSet};

use image::RgbImage;
use proptest::prelude::*;
use sewer_core::dataset::{
    class_counts, merge_classes, split_by_video, undersample, RawLabel, Split, SplitOptions,
    SplitRounding, VideoRecord,
};
use sewer_core::eval::{accuracy_metrics, classify_video, confusion_matrix};
use sewer_core::frames::{preprocess, smooth};
use sewer_core::model::checkpoint::{decode_checkpoint, encode_checkpoint};
use sewer_core::model::{Activation, ArchitectureSpec, LayerSpec};
use sewer_core::model::{CheckpointMetadata, Network, Prediction};

fn records(labels: &[usize]) -> Vec<VideoRecord> {
    labels
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            VideoRecord::new(
                format!("v{i:04}"),
                format!("frames/v{i:04}"),
                RawLabel::ALL[l],
            )
        })
        .collect()
}

fn vote(class: usize) -> Prediction {
    let mut logits = [0.0; 4];
    logits[class] = 2.0;
    Prediction::from_logits(&logits).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn smoothing_matches_brute_force(signal in prop::collection::vec(-100.0f64..100.0, 1..80), half in 0usize..10) {
        let window = 2 * half + 1;
        prop_assume!(window <= signal.len());
        let fast = smooth(&signal, window).unwrap();
        for (i, &v) in fast.iter().enumerate() {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(signal.len());
            let oracle = signal[lo..hi].iter().sum::<f64>() / (hi - lo) as f64;
            prop_assert!((v - oracle).abs() <= 1e-9 * (1.0 + oracle.abs()));
        }
    }

    #[test]
    fn smoothing_is_linear(
        pair in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 5..60),
        a in -3.0f64..3.0,
    ) {
        let (x, y): (Vec<f64>, Vec<f64>) = pair.into_iter().unzip();
        let combo: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + q).collect();
        let (sx, sy, sc) = (smooth(&x, 5).unwrap(), smooth(&y, 5).unwrap(), smooth(&combo, 5).unwrap());
        for i in 0..x.len() {
            prop_assert!((sc[i] - (a * sx[i] + sy[i])).abs() <= 1e-9);
        }
    }

    #[test]
    fn merge_preserves_counts(labels in prop::collection::vec(0usize..5, 0..200)) {
        let merged = merge_classes(records(&labels));
        prop_assert_eq!(merged.len(), labels.len());
        let counts = class_counts(&merged);
        let raw = |l: usize| labels.iter().filter(|&&x| x == l).count();
        prop_assert_eq!(counts, [raw(0), raw(1), raw(2), raw(3) + raw(4)]);
    }

    #[test]
    fn undersampling_balances_to_smallest_class(labels in prop::collection::vec(0usize..5, 8..200), seed in any::<u64>()) {
        let merged = merge_classes(records(&labels));
        let counts = class_counts(&merged);
        prop_assume!(counts.iter().all(|&c| c > 0));
        let kept = undersample(&merged, seed).unwrap();
        let min = *counts.iter().min().unwrap();
        prop_assert_eq!(class_counts(&kept), [min; 4]);
        let ids: HashSet<_> = kept.iter().map(|v| v.record.id.clone()).collect();
        prop_assert_eq!(ids.len(), kept.len());
        // Survivors keep their input order.
        let positions: Vec<usize> = kept.iter().map(|v| merged.iter().position(|m| m == v).unwrap()).collect();
        prop_assert!(positions.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn split_never_leaks_a_video(
        labels in prop::collection::vec(0usize..5, 8..150),
        seed in any::<u64>(),
        anchored in any::<bool>(),
    ) {
        let merged = merge_classes(records(&labels));
        // With 3 videos the anchored rule may move all of a class to train.
        prop_assume!(class_counts(&merged).iter().all(|&c| c >= 4));
        let mut options = SplitOptions::new(seed);
        if anchored {
            options.rounding = SplitRounding::TotalAnchored;
        }
        let manifest = split_by_video(&merged, &options).unwrap();
        prop_assert_eq!(manifest.videos.len(), merged.len());
        let train: HashSet<_> = manifest.split(Split::Train).map(|v| &v.record.id).collect();
        let val: HashSet<_> = manifest.split(Split::Validation).map(|v| &v.record.id).collect();
        prop_assert!(train.is_disjoint(&val));
        prop_assert_eq!(train.len() + val.len(), merged.len());
        let dirs: HashSet<_> = manifest.videos.iter().map(|v| &v.record.frames_dir).collect();
        prop_assert_eq!(dirs.len(), merged.len());
        for c in 0..4 {
            prop_assert!(manifest.class_counts(Split::Train)[c] >= 1);
            prop_assert!(manifest.class_counts(Split::Validation)[c] >= 1);
        }
    }

    #[test]
    fn vote_matches_brute_force(votes in prop::collection::vec(0usize..4, 1..60)) {
        let preds: Vec<Prediction> = votes.iter().map(|&c| vote(c)).collect();
        let got = classify_video("v", &preds).unwrap();
        let mut tally: BTreeMap<usize, usize> = BTreeMap::new();
        for &v in &votes {
            *tally.entry(v).or_default() += 1;
        }
        let best = tally.iter().map(|(&c, &n)| (n, c)).max().unwrap().1;
        prop_assert_eq!(got.class, best);
        let top = tally[&best];
        prop_assert_eq!(got.tie, tally.values().filter(|&&n| n == top).count() > 1);
    }

    #[test]
    fn normalized_rows_and_metrics_sum_to_one(pairs in prop::collection::vec((0usize..4, 0usize..4), 1..300)) {
        let m = confusion_matrix(pairs.iter().copied()).unwrap();
        let n = m.normalized();
        for (row, empty) in n.rows.iter().zip(n.empty_rows) {
            let s: f64 = row.iter().sum();
            if empty {
                prop_assert_eq!(s, 0.0);
            } else {
                prop_assert!((s - 1.0).abs() <= 1e-12);
            }
        }
        let metrics = accuracy_metrics(&m).unwrap();
        prop_assert!((metrics.accuracy + metrics.neighbor + metrics.off_by_two_plus - 1.0).abs() <= 1e-12);
        let exact = pairs.iter().filter(|(t, p)| t == p).count() as f64 / pairs.len() as f64;
        prop_assert!((metrics.accuracy - exact).abs() <= 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn preprocessing_is_deterministic_and_bounded(w in 480u32..900, h in 360u32..560, seed in any::<u32>()) {
        let img = RgbImage::from_fn(w, h, |x, y| {
            let v = x.wrapping_mul(31).wrapping_add(y.wrapping_mul(17)).wrapping_add(seed);
            image::Rgb([v as u8, (v >> 8) as u8, (v >> 16) as u8])
        });
        let a = preprocess(&img).unwrap();
        let b = preprocess(&img).unwrap();
        prop_assert_eq!(a.shape(), &[150, 150, 3]);
        prop_assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(a, b);
    }

    #[test]
    fn checkpoint_roundtrips(seed in any::<u64>(), epochs in 0u32..1000, hash in "[0-9a-f]{16}") {
        let spec = ArchitectureSpec {
            input_shape: [6, 6, 3],
            num_classes: 4,
            layers: vec![
                LayerSpec::Conv2d { name: "c".into(), kernel_size: 3, in_channels: 3, out_channels: 2, activation: Activation::Relu },
                LayerSpec::Flatten { name: "f".into() },
                LayerSpec::Dense { name: "d".into(), inputs: 72, outputs: 4, activation: Activation::None },
            ],
        };
        let net = Network::<f32>::build(spec.clone(), seed).unwrap();
        let meta = CheckpointMetadata { seed, epochs, manifest_hash: hash, timestamp: "2026-01-01T00:00:00Z".into(), ..Default::default() };
        let bytes = encode_checkpoint(&net, &meta).unwrap();
        let (back, meta_back) = decode_checkpoint(&bytes, &spec).unwrap();
        prop_assert_eq!(&meta_back, &meta);
        prop_assert_eq!(back.weights_digest(), net.weights_digest());
        prop_assert_eq!(encode_checkpoint(&back, &meta).unwrap(), bytes);
    }
}
