//! Confusion matrices, the voting video classifier and the review report.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Cursor;
use std::path::Path;

use base64::Engine;
use image::{Rgb, RgbImage};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{LabeledImage, MergedLabel};
use crate::frames::tensor_to_rgb;
use crate::model::Prediction;
use crate::NUM_CLASSES;

pub use crate::train::ImagePrediction;

/// Figures reported for the proprietary corpus. They cannot be reproduced
/// here and are kept for reference only.
pub mod reference {
    /// Image-wise accuracy.
    pub const IMAGE_ACCURACY: f64 = 0.537;
    /// Image-wise neighboring-class rate.
    pub const IMAGE_NEIGHBOR: f64 = 0.347;
    /// Video-wise accuracy.
    pub const VIDEO_ACCURACY: f64 = 0.557;
    /// Video-wise neighboring-class rate.
    pub const VIDEO_NEIGHBOR: f64 = 0.340;
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("label {0} is out of range")]
    LabelOutOfRange(usize),
    #[error("confusion matrix is empty")]
    EmptyMatrix,
    #[error("no frame predictions to vote on")]
    NoVotes,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("cannot encode image: {0}")]
    Encode(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Counts indexed `[truth][prediction]`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizedMatrix {
    pub rows: [[f64; NUM_CLASSES]; NUM_CLASSES],
    /// Rows without any sample; they are left all-zero.
    pub empty_rows: [bool; NUM_CLASSES],
}

impl ConfusionMatrix {
    pub fn add(&mut self, truth: usize, prediction: usize) -> Result<(), EvalError> {
        for l in [truth, prediction] {
            if l >= NUM_CLASSES {
                return Err(EvalError::LabelOutOfRange(l));
            }
        }
        self.counts[truth][prediction] += 1;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn normalized(&self) -> NormalizedMatrix {
        let mut rows = [[0.0; NUM_CLASSES]; NUM_CLASSES];
        let mut empty_rows = [false; NUM_CLASSES];
        for (i, row) in self.counts.iter().enumerate() {
            let sum: u64 = row.iter().sum();
            if sum == 0 {
                empty_rows[i] = true;
                continue;
            }
            for (j, &c) in row.iter().enumerate() {
                rows[i][j] = c as f64 / sum as f64;
            }
        }
        NormalizedMatrix { rows, empty_rows }
    }
}

/// Builds a matrix from `(truth, prediction)` pairs.
pub fn confusion_matrix(
    pairs: impl IntoIterator<Item = (usize, usize)>,
) -> Result<ConfusionMatrix, EvalError> {
    let mut m = ConfusionMatrix::default();
    for (t, p) in pairs {
        m.add(t, p)?;
    }
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMetrics {
    pub accuracy: f64,
    /// Mass one class away from the diagonal.
    pub neighbor: f64,
    /// Mass two or more classes away.
    pub off_by_two_plus: f64,
    pub total: u64,
}

pub fn accuracy_metrics(m: &ConfusionMatrix) -> Result<AccuracyMetrics, EvalError> {
    let total = m.total();
    if total == 0 {
        return Err(EvalError::EmptyMatrix);
    }
    let mut by_distance = [0u64; 3];
    for (i, row) in m.counts.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            by_distance[i.abs_diff(j).min(2)] += c;
        }
    }
    let t = total as f64;
    Ok(AccuracyMetrics {
        accuracy: by_distance[0] as f64 / t,
        neighbor: by_distance[1] as f64 / t,
        off_by_two_plus: by_distance[2] as f64 / t,
        total,
    })
}

/// Outcome of the frame vote for one video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoPrediction {
    pub video_id: String,
    pub tally: [usize; NUM_CLASSES],
    pub class: usize,
    /// More than one class reached the top count.
    pub tie: bool,
    /// Mean confidence of the frames that voted for `class`.
    pub mean_confidence: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<MergedLabel>,
}

impl VideoPrediction {
    pub fn label(&self) -> MergedLabel {
        MergedLabel::from_index(self.class).expect("class in range")
    }
}

/// One vote per frame; the largest tally wins and ties go to the dirtier
/// (higher) class.
pub fn classify_video(video_id: &str, frames: &[Prediction]) -> Result<VideoPrediction, EvalError> {
    if frames.is_empty() {
        return Err(EvalError::NoVotes);
    }
    let mut tally = [0usize; NUM_CLASSES];
    for p in frames {
        if p.class >= NUM_CLASSES {
            return Err(EvalError::LabelOutOfRange(p.class));
        }
        tally[p.class] += 1;
    }
    let top = *tally.iter().max().expect("nonempty");
    let class = (0..NUM_CLASSES)
        .rev()
        .find(|&c| tally[c] == top)
        .expect("a class has the top count");
    let tie = tally.iter().filter(|&&t| t == top).count() > 1;
    let winners: Vec<f64> = frames
        .iter()
        .filter(|p| p.class == class)
        .map(|p| p.confidence)
        .collect();
    Ok(VideoPrediction {
        video_id: video_id.to_string(),
        tally,
        class,
        tie,
        mean_confidence: winners.iter().sum::<f64>() / winners.len() as f64,
        truth: None,
    })
}

/// Groups image predictions by video (first-appearance order) and votes.
pub fn classify_videos(images: &[ImagePrediction]) -> Result<Vec<VideoPrediction>, EvalError> {
    let mut order: Vec<&str> = Vec::new();
    let mut groups: HashMap<&str, (MergedLabel, Vec<Prediction>)> = HashMap::new();
    for ip in images {
        groups
            .entry(ip.video_id.as_str())
            .or_insert_with(|| {
                order.push(&ip.video_id);
                (ip.truth, Vec::new())
            })
            .1
            .push(ip.prediction.clone());
    }
    order
        .into_iter()
        .map(|id| {
            let (truth, preds) = &groups[id];
            let mut v = classify_video(id, preds)?;
            v.truth = Some(*truth);
            Ok(v)
        })
        .collect()
}

/// Both matrices and their metrics, as written to the metrics JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationSummary {
    pub image_matrix: ConfusionMatrix,
    pub image_normalized: NormalizedMatrix,
    pub image_metrics: AccuracyMetrics,
    pub video_matrix: ConfusionMatrix,
    pub video_normalized: NormalizedMatrix,
    pub video_metrics: AccuracyMetrics,
    pub image_count: usize,
    pub video_count: usize,
}

pub fn summarize(
    images: &[ImagePrediction],
    videos: &[VideoPrediction],
) -> Result<EvaluationSummary, EvalError> {
    let image_matrix =
        confusion_matrix(images.iter().map(|p| (p.truth.index(), p.prediction.class)))?;
    let video_matrix = confusion_matrix(
        videos
            .iter()
            .filter_map(|v| v.truth.map(|t| (t.index(), v.class))),
    )?;
    Ok(EvaluationSummary {
        image_normalized: image_matrix.normalized(),
        image_metrics: accuracy_metrics(&image_matrix)?,
        video_normalized: video_matrix.normalized(),
        video_metrics: accuracy_metrics(&video_matrix)?,
        image_matrix,
        video_matrix,
        image_count: images.len(),
        video_count: videos.len(),
    })
}

/// A frame shown in the report with its labels.
#[derive(Debug, Clone)]
pub struct SampleFrame {
    pub video_id: String,
    pub frame_index: usize,
    pub truth: MergedLabel,
    pub predicted: MergedLabel,
    pub confidence: f64,
    pub image: RgbImage,
}

/// Up to `per_class` seeded random frames of each true class.
pub fn sample_frames(
    images: &[LabeledImage],
    predictions: &[ImagePrediction],
    per_class: usize,
    seed: u64,
) -> Vec<SampleFrame> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for label in MergedLabel::ALL {
        let members: Vec<usize> = (0..images.len().min(predictions.len()))
            .filter(|&i| images[i].label == label)
            .collect();
        let k = per_class.min(members.len());
        let mut picks: Vec<usize> = index::sample(&mut rng, members.len(), k).into_vec();
        picks.sort_unstable();
        for p in picks {
            let i = members[p];
            let Ok(image) = tensor_to_rgb(&images[i].image) else {
                continue;
            };
            out.push(SampleFrame {
                video_id: images[i].video_id.clone(),
                frame_index: images[i].frame_index,
                truth: label,
                predicted: predictions[i].prediction.label(),
                confidence: predictions[i].prediction.confidence,
                image,
            });
        }
    }
    out
}

/// Cell side of the rendered confusion-matrix image.
const CELL: u32 = 40;

/// Row-normalized matrix as a grid of white-to-navy cells.
pub fn render_matrix(m: &NormalizedMatrix) -> RgbImage {
    let n = NUM_CLASSES as u32;
    RgbImage::from_fn(n * CELL, n * CELL, |x, y| {
        let v = m.rows[(y / CELL) as usize][(x / CELL) as usize];
        if x % CELL == 0 || y % CELL == 0 {
            return Rgb([200, 200, 200]);
        }
        let lerp = |from: f64, to: f64| (from + v * (to - from)).round() as u8;
        Rgb([lerp(255.0, 20.0), lerp(255.0, 40.0), lerp(255.0, 110.0)])
    })
}

pub fn png_base64(img: &RgbImage) -> Result<String, EvalError> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)
        .map_err(|e| EvalError::Encode(e.to_string()))?;
    Ok(base64::engine::general_purpose::STANDARD.encode(buf.into_inner()))
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn matrix_section(
    out: &mut String,
    title: &str,
    counts: &ConfusionMatrix,
    norm: &NormalizedMatrix,
    metrics: &AccuracyMetrics,
) -> Result<(), EvalError> {
    let _ = writeln!(out, "<section class=\"matrix\"><h2>{title}</h2>");
    let _ = writeln!(
        out,
        "<img alt=\"{title}\" src=\"data:image/png;base64,{}\">",
        png_base64(&render_matrix(norm))?
    );
    let _ = write!(out, "<table><tr><th>truth \\ predicted</th>");
    for l in MergedLabel::ALL {
        let _ = write!(out, "<th>{l}</th>");
    }
    let _ = writeln!(out, "</tr>");
    for (i, l) in MergedLabel::ALL.iter().enumerate() {
        let _ = write!(out, "<tr><th>{l}</th>");
        for j in 0..NUM_CLASSES {
            let _ = write!(
                out,
                "<td>{:.3} ({})</td>",
                norm.rows[i][j], counts.counts[i][j]
            );
        }
        let _ = writeln!(out, "</tr>");
    }
    let _ = writeln!(out, "</table>");
    let _ = writeln!(
        out,
        "<p class=\"metrics\">accuracy <span class=\"accuracy\">{:.4}</span>, neighbor <span class=\"neighbor\">{:.4}</span>, off by two or more <span class=\"off2\">{:.4}</span> over {} samples</p></section>",
        metrics.accuracy, metrics.neighbor, metrics.off_by_two_plus, metrics.total
    );
    Ok(())
}

/// Self-contained HTML: both matrices with their metrics and the sampled
/// frames, images embedded as base64 PNG.
pub fn render_report(
    summary: &EvaluationSummary,
    samples: &[SampleFrame],
) -> Result<String, EvalError> {
    let mut out = String::new();
    out.push_str(
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>Evaluation report</title>\n",
    );
    out.push_str("<style>body{font-family:sans-serif}table{border-collapse:collapse}td,th{border:1px solid #ccc;padding:2px 6px}figure{display:inline-block;margin:4px}</style>\n</head><body>\n");
    out.push_str("<h1>Evaluation report</h1>\n");
    let _ = writeln!(
        out,
        "<p>{} images from {} videos.</p>",
        summary.image_count, summary.video_count
    );
    matrix_section(
        &mut out,
        "Image-wise",
        &summary.image_matrix,
        &summary.image_normalized,
        &summary.image_metrics,
    )?;
    matrix_section(
        &mut out,
        "Video-wise",
        &summary.video_matrix,
        &summary.video_normalized,
        &summary.video_metrics,
    )?;
    out.push_str("<section class=\"samples\"><h2>Sampled frames</h2>\n");
    for s in samples {
        let _ = writeln!(
            out,
            "<figure class=\"sample\"><img src=\"data:image/png;base64,{}\"><figcaption>{} #{}<br>true {} / predicted {} ({:.2})</figcaption></figure>",
            png_base64(&s.image)?,
            escape(&s.video_id),
            s.frame_index,
            s.truth,
            s.predicted,
            s.confidence
        );
    }
    out.push_str("</section>\n</body></html>\n");
    Ok(out)
}

/// Writes the HTML report and, when given, the metrics JSON.
pub fn evaluation_report(
    summary: &EvaluationSummary,
    samples: &[SampleFrame],
    html_path: impl AsRef<Path>,
    json_path: Option<&Path>,
) -> Result<(), EvalError> {
    fs::write(html_path, render_report(summary, samples)?)?;
    if let Some(p) = json_path {
        fs::write(p, serde_json::to_vec_pretty(summary)?)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pred(class: usize, confidence: f64) -> Prediction {
        let mut probabilities = [(1.0 - confidence) / 3.0; NUM_CLASSES];
        probabilities[class] = confidence;
        Prediction {
            class,
            probabilities,
            confidence,
        }
    }

    fn votes(tally: [usize; 4]) -> Vec<Prediction> {
        tally
            .iter()
            .enumerate()
            .flat_map(|(c, &n)| std::iter::repeat_n(pred(c, 0.5 + 0.1 * c as f64), n))
            .collect()
    }

    #[test]
    fn majority_and_tie_rule() {
        let v = classify_video("a", &votes([10, 0, 20, 0])).unwrap();
        assert_eq!((v.class, v.tie), (2, false));
        let v = classify_video("a", &votes([15, 0, 15, 0])).unwrap();
        assert_eq!((v.class, v.tie), (2, true));
        assert!((v.mean_confidence - 0.7).abs() < 1e-12);
        assert_eq!(v.tally.iter().sum::<usize>(), 30);
        assert!(matches!(classify_video("a", &[]), Err(EvalError::NoVotes)));
    }

    #[test]
    fn matrix_basics() {
        let perfect = confusion_matrix((0..4).map(|c| (c, c))).unwrap();
        let n = perfect.normalized();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(n.rows[i][j], if i == j { 1.0 } else { 0.0 });
            }
        }
        let m = accuracy_metrics(&perfect).unwrap();
        assert_eq!((m.accuracy, m.neighbor), (1.0, 0.0));

        let single = confusion_matrix([(2, 0)]).unwrap();
        assert_eq!(single.counts[2][0], 1);
        assert_eq!(single.total(), 1);
        assert_eq!(single.normalized().empty_rows, [true, true, false, true]);
        assert!(matches!(
            confusion_matrix([(4, 0)]),
            Err(EvalError::LabelOutOfRange(4))
        ));
        assert!(matches!(
            accuracy_metrics(&ConfusionMatrix::default()),
            Err(EvalError::EmptyMatrix)
        ));
    }

    #[test]
    fn hand_matrix_metrics() {
        let m = ConfusionMatrix {
            counts: [[2, 1, 0, 0], [0, 2, 1, 0], [0, 0, 3, 0], [0, 0, 0, 3]],
        };
        let a = accuracy_metrics(&m).unwrap();
        assert_eq!(a.accuracy, 10.0 / 12.0);
        assert_eq!(a.neighbor, 2.0 / 12.0);
        assert_eq!(a.off_by_two_plus, 0.0);
    }

    #[test]
    fn videos_are_grouped_in_order() {
        let ip = |id: &str, truth: MergedLabel, c: usize| ImagePrediction {
            video_id: id.into(),
            frame_index: 0,
            truth,
            prediction: pred(c, 0.9),
        };
        let images = vec![
            ip("b", MergedLabel::Dirty, 2),
            ip("a", MergedLabel::Clean, 1),
            ip("b", MergedLabel::Dirty, 2),
            ip("a", MergedLabel::Clean, 0),
        ];
        let videos = classify_videos(&images).unwrap();
        assert_eq!(videos.len(), 2);
        assert_eq!(videos[0].video_id, "b");
        assert_eq!(videos[1].class, 1);
        assert!(videos[1].tie);
        assert_eq!(videos[1].truth, Some(MergedLabel::Clean));
    }

    #[test]
    fn report_structure() {
        let images: Vec<ImagePrediction> = (0..8)
            .map(|i| ImagePrediction {
                video_id: format!("v{}", i / 2),
                frame_index: i % 2,
                truth: MergedLabel::from_index(i / 2).unwrap(),
                prediction: pred((i / 2 + i % 2) % 4, 0.8),
            })
            .collect();
        let videos = classify_videos(&images).unwrap();
        let summary = summarize(&images, &videos).unwrap();
        let html = render_report(&summary, &[]).unwrap();
        assert!(html.contains("Image-wise") && html.contains("Video-wise"));
        assert!(html.contains(&format!("{:.4}", summary.image_metrics.accuracy)));
        assert_eq!(html.matches("<table>").count(), 2);
    }
}
