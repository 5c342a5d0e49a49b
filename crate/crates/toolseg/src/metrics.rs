//! Confusion-matrix accuracy measures (overall-pixel, per-class, Jaccard),
//! dataset-level evaluation of a segmentation model, and a boundary
//! F-measure for edge precision.
//!
//! Counts stay in integer arithmetic until the final division, so pooled
//! results are exact sums over the dataset rather than frame averages.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container;
use crate::grid::{AnnotationGrid, ImageGrid, Mask};
use crate::networks::NetworkHandle;
use crate::{Error, Result};

/// L×L confusion counts; rows are ground truth, columns are predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Result<Self> {
        if classes < 2 {
            return Err(Error::InvalidConfig("need at least 2 classes".into()));
        }
        Ok(Self {
            classes,
            counts: vec![0; classes * classes],
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn record(&mut self, gt: usize, pred: usize) -> Result<()> {
        for label in [gt, pred] {
            if label >= self.classes {
                return Err(Error::LabelOutOfRange {
                    label,
                    classes: self.classes,
                });
            }
        }
        self.counts[gt * self.classes + pred] += 1;
        Ok(())
    }

    /// Entrywise addition; pooling over frames or sequences.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if self.classes != other.classes {
            return Err(Error::ShapeMismatch {
                expected: format!("{} classes", self.classes),
                got: format!("{} classes", other.classes),
            });
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Ground-truth totals G_i (row sums).
    pub fn row_sums(&self) -> Vec<u64> {
        (0..self.classes)
            .map(|i| (0..self.classes).map(|j| self.get(i, j)).sum())
            .collect()
    }

    /// Prediction totals P_j (column sums).
    pub fn col_sums(&self) -> Vec<u64> {
        (0..self.classes)
            .map(|j| (0..self.classes).map(|i| self.get(i, j)).sum())
            .collect()
    }

    pub fn from_rows(rows: &[&[u64]]) -> Result<Self> {
        let classes = rows.len();
        let mut m = Self::new(classes)?;
        for (i, row) in rows.iter().enumerate() {
            if row.len() != classes {
                return Err(Error::ShapeMismatch {
                    expected: format!("{classes} columns"),
                    got: format!("{}", row.len()),
                });
            }
            for (j, &v) in row.iter().enumerate() {
                m.counts[i * classes + j] = v;
            }
        }
        Ok(m)
    }
}

/// Thresholds a continuous annotation into a 0/1 mask. A pixel is foreground
/// iff its value is strictly greater than the threshold (default 0, the
/// midpoint of the tanh range); a value exactly at the threshold is
/// background.
pub fn binarize(output: &AnnotationGrid, threshold: f32) -> Result<Mask> {
    let (h, w) = output.hw();
    let vals = output.to_vec()?;
    let data = vals.iter().map(|&v| u8::from(v > threshold)).collect();
    Mask::new(h, w, data)
}

/// Per-pixel confusion counts for a pair of label grids.
pub fn confusion_matrix(gt: &Mask, pred: &Mask, classes: usize) -> Result<ConfusionMatrix> {
    if gt.h != pred.h || gt.w != pred.w {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{}", gt.h, gt.w),
            got: format!("{}x{}", pred.h, pred.w),
        });
    }
    let mut m = ConfusionMatrix::new(classes)?;
    for (g, p) in gt.data.iter().zip(&pred.data) {
        m.record(*g as usize, *p as usize)?;
    }
    Ok(m)
}

/// Fraction of correctly classified pixels: Σ C_ii / Σ G_i.
pub fn overall_pixel(c: &ConfusionMatrix) -> f64 {
    let diag: u64 = (0..c.classes()).map(|i| c.get(i, i)).sum();
    let total = c.total();
    if total == 0 {
        return 0.0;
    }
    diag as f64 / total as f64
}

/// Class-balanced accuracy: (1/L)·Σ C_ii / G_i, skipping classes absent from
/// the ground truth (their ratio is 0/0).
pub fn per_class(c: &ConfusionMatrix) -> f64 {
    let rows = c.row_sums();
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..c.classes() {
        if rows[i] > 0 {
            sum += c.get(i, i) as f64 / rows[i] as f64;
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Per-class intersection-over-union `C_ii / (G_i + P_i − C_ii)` and the mean
/// over classes present in gt or prediction. Absent classes report `None`.
pub fn jaccard(c: &ConfusionMatrix) -> (Vec<Option<f64>>, f64) {
    let rows = c.row_sums();
    let cols = c.col_sums();
    let mut per = Vec::with_capacity(c.classes());
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..c.classes() {
        let union = rows[i] + cols[i] - c.get(i, i);
        if union > 0 {
            let ji = c.get(i, i) as f64 / union as f64;
            per.push(Some(ji));
            sum += ji;
            n += 1;
        } else {
            per.push(None);
        }
    }
    let mean = if n == 0 { 0.0 } else { sum / n as f64 };
    (per, mean)
}

/// IoU of two binary masks (the foreground-class Jaccard).
pub fn mask_iou(a: &Mask, b: &Mask) -> Result<f64> {
    let c = confusion_matrix(a, b, 2)?;
    let (per, _) = jaccard(&c);
    // both masks empty: identical, IoU 1
    Ok(per[1].unwrap_or(1.0))
}

/// Anything that maps a scene image to a continuous annotation.
pub trait Segmenter {
    fn segment(&self, image: &ImageGrid) -> Result<AnnotationGrid>;
}

impl Segmenter for NetworkHandle {
    fn segment(&self, image: &ImageGrid) -> Result<AnnotationGrid> {
        AnnotationGrid::new(self.forward(image.tensor())?)
    }
}

/// Debug fixture: returns the input's luminance as the annotation, so a mask
/// fed in as its own image comes back unchanged.
pub struct IdentitySegmenter;

impl Segmenter for IdentitySegmenter {
    fn segment(&self, image: &ImageGrid) -> Result<AnnotationGrid> {
        AnnotationGrid::new(image.tensor().mean_keepdim(0)?)
    }
}

/// Writes a checkpoint that evaluates as [`IdentitySegmenter`]; a debug
/// oracle for exercising the evaluation path end to end.
pub fn save_identity_checkpoint(path: impl AsRef<Path>) -> Result<()> {
    container::save(path, "identity", serde_json::json!({}), &[])
}

/// Opens any checkpoint kind as a segmentation model: a bare network
/// checkpoint, the image-to-annotation generator of a training checkpoint,
/// or the identity oracle.
pub fn load_segmenter(path: impl AsRef<Path>) -> Result<Box<dyn Segmenter>> {
    let c = container::load(&path)?;
    match c.kind.as_str() {
        "identity" => Ok(Box::new(IdentitySegmenter)),
        "network" => Ok(Box::new(NetworkHandle::load(path)?)),
        "train" => Ok(Box::new(crate::trainer::TrainState::load_checkpoint(path)?.g_a)),
        other => Err(Error::CorruptCheckpoint(format!(
            "unknown checkpoint kind `{other}`"
        ))),
    }
}

#[derive(Debug, Clone)]
pub struct EvalSample {
    pub image: ImageGrid,
    pub gt_mask: Mask,
    pub sequence: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SequenceMetrics {
    pub sequence: String,
    pub samples: usize,
    pub overall_pixel: f64,
    pub per_class: f64,
    pub mean_jaccard: f64,
    pub class_jaccard: Vec<Option<f64>>,
    pub foreground_jaccard: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub pooled: SequenceMetrics,
    pub per_sequence: Vec<SequenceMetrics>,
    pub pooled_confusion: ConfusionMatrix,
    pub skipped: usize,
    pub mean_boundary_f1: Option<f64>,
}

fn summarize(sequence: &str, samples: usize, c: &ConfusionMatrix) -> SequenceMetrics {
    let (class_jaccard, mean_jaccard) = jaccard(c);
    SequenceMetrics {
        sequence: sequence.to_string(),
        samples,
        overall_pixel: overall_pixel(c),
        per_class: per_class(c),
        mean_jaccard,
        foreground_jaccard: class_jaccard.get(1).copied().flatten(),
        class_jaccard,
    }
}

/// Runs the model over an eval set, binarizes at 0, and accumulates one
/// confusion matrix per sequence plus a pooled one. Samples whose prediction
/// dims disagree with the ground truth are skipped and counted.
pub fn evaluate(
    model: &dyn Segmenter,
    eval_set: &[EvalSample],
    boundary_tolerance: Option<f64>,
) -> Result<EvalReport> {
    let mut pooled = ConfusionMatrix::new(2)?;
    let mut sequences: Vec<(String, usize, ConfusionMatrix)> = Vec::new();
    let mut skipped = 0usize;
    let mut bf1_sum = 0.0;
    let mut bf1_n = 0usize;
    for sample in eval_set {
        let pred = binarize(&model.segment(&sample.image)?, 0.0)?;
        if pred.h != sample.gt_mask.h || pred.w != sample.gt_mask.w {
            skipped += 1;
            continue;
        }
        let c = confusion_matrix(&sample.gt_mask, &pred, 2)?;
        pooled.merge(&c)?;
        match sequences.iter_mut().find(|(s, _, _)| *s == sample.sequence) {
            Some((_, n, m)) => {
                *n += 1;
                m.merge(&c)?;
            }
            None => sequences.push((sample.sequence.clone(), 1, c)),
        }
        if let Some(tol) = boundary_tolerance {
            bf1_sum += boundary_f1(&sample.gt_mask, &pred, tol)?;
            bf1_n += 1;
        }
    }
    let per_sequence = sequences
        .iter()
        .map(|(s, n, c)| summarize(s, *n, c))
        .collect();
    Ok(EvalReport {
        pooled: summarize("pooled", eval_set.len() - skipped, &pooled),
        per_sequence,
        pooled_confusion: pooled,
        skipped,
        mean_boundary_f1: (bf1_n > 0).then(|| bf1_sum / bf1_n as f64),
    })
}

impl EvalReport {
    /// Row-formatted text report, one line per sequence plus the pooled row.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<12} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
            "sequence", "samples", "OP", "PC", "JI", "fg-IoU"
        ));
        let fmt_row = |m: &SequenceMetrics| {
            format!(
                "{:<12} {:>8} {:>8.4} {:>8.4} {:>8.4} {:>8}\n",
                m.sequence,
                m.samples,
                m.overall_pixel,
                m.per_class,
                m.mean_jaccard,
                m.foreground_jaccard
                    .map(|v| format!("{v:.4}"))
                    .unwrap_or_else(|| "-".into()),
            )
        };
        for m in &self.per_sequence {
            out.push_str(&fmt_row(m));
        }
        out.push_str(&fmt_row(&self.pooled));
        if let Some(bf1) = self.mean_boundary_f1 {
            out.push_str(&format!("mean boundary-F1: {bf1:.4}\n"));
        }
        if self.skipped > 0 {
            out.push_str(&format!("skipped {} samples (dim mismatch)\n", self.skipped));
        }
        out
    }
}

/// Boundary pixels: foreground pixels with a 4-neighbour outside the mask
/// (image border counts as outside).
fn boundary_pixels(mask: &Mask) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for y in 0..mask.h {
        for x in 0..mask.w {
            if mask.get(y, x) == 0 {
                continue;
            }
            let edge = y == 0
                || x == 0
                || y == mask.h - 1
                || x == mask.w - 1
                || mask.get(y - 1, x) == 0
                || mask.get(y + 1, x) == 0
                || mask.get(y, x - 1) == 0
                || mask.get(y, x + 1) == 0;
            if edge {
                out.push((y, x));
            }
        }
    }
    out
}

/// F-measure of boundary agreement at a pixel tolerance: precision is the
/// fraction of predicted boundary pixels within `tolerance` of the true
/// boundary, recall the converse, both by exhaustive distance check.
pub fn boundary_f1(gt: &Mask, pred: &Mask, tolerance: f64) -> Result<f64> {
    if gt.h != pred.h || gt.w != pred.w {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{}", gt.h, gt.w),
            got: format!("{}x{}", pred.h, pred.w),
        });
    }
    if tolerance < 0.0 {
        return Err(Error::InvalidConfig("negative boundary tolerance".into()));
    }
    let gb = boundary_pixels(gt);
    let pb = boundary_pixels(pred);
    match (gb.is_empty(), pb.is_empty()) {
        (true, true) => return Ok(1.0),
        (true, false) | (false, true) => return Ok(0.0),
        _ => {}
    }
    let tol2 = tolerance * tolerance;
    let matched = |from: &[(usize, usize)], to: &[(usize, usize)]| -> usize {
        from.iter()
            .filter(|&&(y, x)| {
                to.iter().any(|&(ty, tx)| {
                    let dy = y as f64 - ty as f64;
                    let dx = x as f64 - tx as f64;
                    dy * dy + dx * dx <= tol2
                })
            })
            .count()
    };
    let precision = matched(&pb, &gb) as f64 / pb.len() as f64;
    let recall = matched(&gb, &pb) as f64 / gb.len() as f64;
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}
