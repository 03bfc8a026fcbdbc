use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DatasetError, DatasetManifest, LabeledVideo, MergedLabel, Split, VideoRecord};

/// Attaches the merged class to every record.
pub fn merge_classes(records: Vec<VideoRecord>) -> Vec<LabeledVideo> {
    records
        .into_iter()
        .map(|record| LabeledVideo {
            label: record.raw_label.merged(),
            record,
        })
        .collect()
}

pub fn class_counts(videos: &[LabeledVideo]) -> [usize; 4] {
    let mut counts = [0; 4];
    for v in videos {
        counts[v.label.index()] += 1;
    }
    counts
}

/// Randomly drops videos until every class has as many as the smallest one.
///
/// Selection is uniform without replacement per class; the survivors keep
/// their input order, so already-balanced input comes back unchanged.
pub fn undersample(videos: &[LabeledVideo], seed: u64) -> Result<Vec<LabeledVideo>, DatasetError> {
    let counts = class_counts(videos);
    if let Some(empty) = MergedLabel::ALL
        .into_iter()
        .find(|l| counts[l.index()] == 0)
    {
        return Err(DatasetError::EmptyClass(empty));
    }
    let target = *counts.iter().min().expect("four classes");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = vec![false; videos.len()];
    for label in MergedLabel::ALL {
        let members: Vec<usize> = (0..videos.len())
            .filter(|&i| videos[i].label == label)
            .collect();
        if members.len() == target {
            members.iter().for_each(|&i| keep[i] = true);
            continue;
        }
        for pick in index::sample(&mut rng, members.len(), target) {
            keep[members[pick]] = true;
        }
    }
    Ok(videos
        .iter()
        .zip(keep)
        .filter(|(_, k)| *k)
        .map(|(v, _)| v.clone())
        .collect())
}

/// How per-class train counts are derived from the train fraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitRounding {
    /// `round_half_up(fraction · n)` independently per class.
    #[default]
    PerClassHalfUp,
    /// Round the overall train total half-up, then share it out across
    /// classes by largest remainder; equal remainders favor the dirtier
    /// class.
    TotalAnchored,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitOptions {
    pub train_fraction: f64,
    pub seed: u64,
    #[serde(default)]
    pub rounding: SplitRounding,
    /// Require ≥ 2 videos per class and at least one on each side.
    #[serde(default = "default_true")]
    pub require_both_splits: bool,
}

fn default_true() -> bool {
    true
}

impl SplitOptions {
    pub fn new(seed: u64) -> Self {
        Self {
            train_fraction: 0.7,
            seed,
            rounding: SplitRounding::PerClassHalfUp,
            require_both_splits: true,
        }
    }
}

fn round_half_up(x: f64) -> usize {
    // The epsilon keeps products like 0.7 · 5 = 3.4999… on the intended side.
    (x + 0.5 + 1e-9).floor() as usize
}

/// Train-side count for each class under `options`.
pub fn train_counts(counts: [usize; 4], options: &SplitOptions) -> [usize; 4] {
    let f = options.train_fraction;
    match options.rounding {
        SplitRounding::PerClassHalfUp => counts.map(|n| round_half_up(f * n as f64).min(n)),
        SplitRounding::TotalAnchored => {
            let total: usize = counts.iter().sum();
            let target = round_half_up(f * total as f64).min(total);
            let exact = counts.map(|n| f * n as f64);
            let mut out = exact.map(|x| (x + 1e-9).floor() as usize);
            let mut remaining = target.saturating_sub(out.iter().sum());
            let mut order: Vec<usize> = (0..4).collect();
            order.sort_by(|&a, &b| {
                let (ra, rb) = (exact[a] - out[a] as f64, exact[b] - out[b] as f64);
                rb.partial_cmp(&ra).expect("finite").then(b.cmp(&a))
            });
            for i in order {
                if remaining == 0 {
                    break;
                }
                if out[i] < counts[i] {
                    out[i] += 1;
                    remaining -= 1;
                }
            }
            out
        }
    }
}

/// Assigns whole videos to train/validation, stratified by class.
pub fn split_by_video(
    videos: &[LabeledVideo],
    options: &SplitOptions,
) -> Result<DatasetManifest, DatasetError> {
    if !(0.0..=1.0).contains(&options.train_fraction) {
        return Err(DatasetError::InvalidFraction(options.train_fraction));
    }
    let counts = class_counts(videos);
    let train = train_counts(counts, options);
    if options.require_both_splits {
        for label in MergedLabel::ALL {
            let (n, t) = (counts[label.index()], train[label.index()]);
            if n < 2 || t == 0 || t == n {
                return Err(DatasetError::TooFewVideos { label, count: n });
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut assignment = vec![Split::Validation; videos.len()];
    for label in MergedLabel::ALL {
        let mut members: Vec<usize> = (0..videos.len())
            .filter(|&i| videos[i].label == label)
            .collect();
        members.shuffle(&mut rng);
        for &i in &members[..train[label.index()]] {
            assignment[i] = Split::Train;
        }
    }
    let videos = videos
        .iter()
        .zip(assignment)
        .map(|(v, split)| {
            let mut v = v.clone();
            v.record.split = Some(split);
            v.record.seed = Some(options.seed);
            v
        })
        .collect();
    let manifest = DatasetManifest {
        videos,
        seed: options.seed,
    };
    manifest.validate()?;
    Ok(manifest)
}
