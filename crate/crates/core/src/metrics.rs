//! Pixel-level scoring and the aggregate statistics reported per model.
//!
//! Degenerate denominators follow fixed conventions:
//!
//! | prediction | ground truth | dice | precision | recall | f1 |
//! |------------|--------------|------|-----------|--------|----|
//! | empty      | empty        | 1    | 1         | 1      | 1  |
//! | empty      | non-empty    | 0    | 0         | 0      | 0  |
//! | non-empty  | empty        | 0    | 0         | 0      | 0  |

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{load_mask, BinaryMask, DatasetManifest, Split};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// Dice, precision, recall and F1 for one prediction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsQuad {
    pub dice: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl MetricsQuad {
    pub const PERFECT: MetricsQuad = MetricsQuad {
        dice: 1.0,
        precision: 1.0,
        recall: 1.0,
        f1: 1.0,
    };

    pub const ZERO: MetricsQuad = MetricsQuad {
        dice: 0.0,
        precision: 0.0,
        recall: 0.0,
        f1: 0.0,
    };

    pub fn get(&self, metric: Metric) -> f64 {
        match metric {
            Metric::Dice => self.dice,
            Metric::Precision => self.precision,
            Metric::Recall => self.recall,
            Metric::F1 => self.f1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Dice,
    Precision,
    Recall,
    F1,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Dice, Metric::Precision, Metric::Recall, Metric::F1];

    pub fn key(self) -> &'static str {
        match self {
            Metric::Dice => "dice",
            Metric::Precision => "precision",
            Metric::Recall => "recall",
            Metric::F1 => "f1",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            Metric::Dice => "Dice Score",
            Metric::Precision => "Precision",
            Metric::Recall => "Recall",
            Metric::F1 => "F1-score",
        }
    }
}

fn check_dims(pred: &BinaryMask, gt: &BinaryMask) -> Result<()> {
    if pred.dims() != gt.dims() {
        return Err(Error::data(format!(
            "prediction is {}x{} but ground truth is {}x{}",
            pred.width(),
            pred.height(),
            gt.width(),
            gt.height()
        )));
    }
    Ok(())
}

pub fn confusion_counts(pred: &BinaryMask, gt: &BinaryMask) -> Result<ConfusionCounts> {
    check_dims(pred, gt)?;
    let mut c = ConfusionCounts::default();
    for (p, g) in pred.bits().iter().zip(gt.bits()) {
        match (*p, *g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// Scores from confusion counts, applying the degenerate-case conventions.
pub fn quad_from_counts(c: &ConfusionCounts) -> MetricsQuad {
    let pred_pos = c.tp + c.fp;
    let gt_pos = c.tp + c.fn_;
    if pred_pos == 0 && gt_pos == 0 {
        return MetricsQuad::PERFECT;
    }
    if pred_pos == 0 || gt_pos == 0 {
        return MetricsQuad::ZERO;
    }
    let tp = c.tp as f64;
    let dice = 2.0 * tp / (2.0 * tp + c.fp as f64 + c.fn_ as f64);
    MetricsQuad {
        dice,
        precision: tp / pred_pos as f64,
        recall: tp / gt_pos as f64,
        f1: dice,
    }
}

pub fn compute_quad(pred: &BinaryMask, gt: &BinaryMask) -> Result<MetricsQuad> {
    Ok(quad_from_counts(&confusion_counts(pred, gt)?))
}

/// How the spread of a sample is reported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StdKind {
    /// `n - 1` denominator.
    #[default]
    Sample,
    /// `n` denominator.
    Population,
}

/// Location, spread and Tukey box-plot geometry of a sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryStats {
    pub n: usize,
    pub mean: f64,
    pub median: f64,
    pub std: f64,
    pub q1: f64,
    pub q3: f64,
    pub whisker_lo: f64,
    pub whisker_hi: f64,
    pub outliers: Vec<f64>,
}

/// Quantile by linear interpolation between order statistics at position
/// `(n - 1) * p`. `sorted` must be ascending and non-empty.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = (sorted.len() - 1) as f64 * p;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

pub fn summarize(values: &[f64]) -> Result<SummaryStats> {
    summarize_with(values, StdKind::Sample)
}

pub fn summarize_with(values: &[f64], std_kind: StdKind) -> Result<SummaryStats> {
    if values.is_empty() {
        return Err(Error::data("cannot summarize an empty sample"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::data("cannot summarize non-finite values"));
    }
    let n = values.len();
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);

    let mean = values.iter().sum::<f64>() / n as f64;
    let sq: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    let std = match (std_kind, n) {
        (_, 1) => 0.0,
        (StdKind::Sample, _) => (sq / (n - 1) as f64).sqrt(),
        (StdKind::Population, _) => (sq / n as f64).sqrt(),
    };

    let q1 = quantile(&sorted, 0.25);
    let median = quantile(&sorted, 0.5);
    let q3 = quantile(&sorted, 0.75);
    let iqr = q3 - q1;
    let (fence_lo, fence_hi) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
    let inside = || sorted.iter().copied().filter(|v| *v >= fence_lo && *v <= fence_hi);
    // the quartiles lie inside the fences, so at least one point does too
    let whisker_lo = inside().next().unwrap_or(q1).min(q1);
    let whisker_hi = inside().next_back().unwrap_or(q3).max(q3);
    let outliers = sorted
        .iter()
        .copied()
        .filter(|v| *v < fence_lo || *v > fence_hi)
        .collect();

    Ok(SummaryStats {
        n,
        mean,
        median,
        std,
        q1,
        q3,
        whisker_lo,
        whisker_hi,
        outliers,
    })
}

/// Per-sample scores of externally produced masks plus warnings for
/// missing predictions.
#[derive(Debug, Clone)]
pub struct MaskDirScores {
    pub scores: Vec<(String, MetricsQuad)>,
    pub warnings: Vec<String>,
}

/// Scores stem-matched prediction masks in `pred_dir` against every eval
/// entry's ground truth. Missing predictions count as empty masks.
pub fn score_mask_dir(manifest: &DatasetManifest, pred_dir: &Path) -> Result<MaskDirScores> {
    if !pred_dir.is_dir() {
        return Err(Error::io(
            pred_dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "prediction directory not found"),
        ));
    }
    let mut scores = Vec::new();
    let mut warnings = Vec::new();
    for entry in manifest.split(Split::Eval) {
        let gt = load_mask(&entry.mask_path)?;
        let pred = match find_prediction(pred_dir, &entry.sample_id) {
            Some(path) => match load_mask(&path) {
                Ok(m) if m.dims() == gt.dims() => m,
                Ok(m) => {
                    warnings.push(format!(
                        "{}: prediction is {}x{}, ground truth {}x{}; scored as empty",
                        entry.sample_id,
                        m.width(),
                        m.height(),
                        gt.width(),
                        gt.height()
                    ));
                    BinaryMask::empty(gt.width(), gt.height())
                }
                Err(e) => {
                    warnings.push(format!("{}: {e}; scored as empty", entry.sample_id));
                    BinaryMask::empty(gt.width(), gt.height())
                }
            },
            None => {
                warnings.push(format!("{}: no prediction mask; scored as empty", entry.sample_id));
                BinaryMask::empty(gt.width(), gt.height())
            }
        };
        scores.push((entry.sample_id.clone(), compute_quad(&pred, &gt)?));
    }
    Ok(MaskDirScores { scores, warnings })
}

fn find_prediction(dir: &Path, sample_id: &str) -> Option<std::path::PathBuf> {
    ["png", "PNG", "jpg", "jpeg"]
        .iter()
        .map(|ext| dir.join(format!("{sample_id}.{ext}")))
        .find(|p| p.is_file())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{save_mask, BBox, ManifestEntry, Modality};
    use approx::assert_abs_diff_eq;

    fn square(size: usize, x0: f64, y0: f64, side: f64) -> BinaryMask {
        BinaryMask::from_box(size, size, &BBox::new(x0, y0, x0 + side, y0 + side).unwrap())
    }

    #[test]
    fn counts_examples() {
        let full = BinaryMask::from_fn(4, 4, |_, _| true);
        let c = confusion_counts(&full, &full).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_, c.tn), (16, 0, 0, 0));

        let c = confusion_counts(&BinaryMask::empty(2, 2), &BinaryMask::from_fn(2, 2, |_, _| true)).unwrap();
        assert_eq!(c.fn_, 4);

        let c = confusion_counts(&square(8, 2.0, 2.0, 4.0), &square(8, 0.0, 0.0, 4.0)).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_, c.tn), (4, 12, 12, 36));
        assert_eq!(c.total(), 64);
    }

    #[test]
    fn quad_examples() {
        let gt = square(8, 0.0, 0.0, 4.0);
        assert_eq!(compute_quad(&gt, &gt).unwrap(), MetricsQuad::PERFECT);
        let q = compute_quad(&square(8, 2.0, 2.0, 4.0), &gt).unwrap();
        for v in [q.dice, q.precision, q.recall, q.f1] {
            assert_abs_diff_eq!(v, 0.25, epsilon = 1e-15);
        }
    }

    #[test]
    fn degenerate_conventions() {
        let empty = BinaryMask::empty(5, 5);
        let some = square(5, 1.0, 1.0, 2.0);
        assert_eq!(compute_quad(&empty, &empty).unwrap(), MetricsQuad::PERFECT);
        assert_eq!(compute_quad(&empty, &some).unwrap(), MetricsQuad::ZERO);
        assert_eq!(compute_quad(&some, &empty).unwrap(), MetricsQuad::ZERO);
    }

    #[test]
    fn mismatched_dims_fail() {
        assert!(compute_quad(&BinaryMask::empty(2, 3), &BinaryMask::empty(3, 2)).is_err());
    }

    #[test]
    fn summarize_examples() {
        let s = summarize(&[0.8, 0.9, 1.0]).unwrap();
        assert_abs_diff_eq!(s.mean, 0.9, epsilon = 1e-12);
        assert_abs_diff_eq!(s.median, 0.9, epsilon = 1e-12);
        assert_abs_diff_eq!(s.std, 0.1, epsilon = 1e-12);

        let s = summarize(&[0.42]).unwrap();
        assert_eq!((s.mean, s.median, s.std), (0.42, 0.42, 0.0));

        let s = summarize(&[1.0, 2.0, 3.0, 4.0, 100.0]).unwrap();
        assert_eq!((s.q1, s.median, s.q3), (2.0, 3.0, 4.0));
        assert_eq!((s.whisker_lo, s.whisker_hi), (1.0, 4.0));
        assert_eq!(s.outliers, vec![100.0]);

        assert!(summarize(&[]).is_err());
    }

    #[test]
    fn population_std() {
        let s = summarize_with(&[1.0, 3.0], StdKind::Population).unwrap();
        assert_eq!(s.std, 1.0);
        let s = summarize_with(&[1.0, 3.0], StdKind::Sample).unwrap();
        assert_abs_diff_eq!(s.std, 2f64.sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn even_count_median_averages_middles() {
        assert_eq!(summarize(&[4.0, 1.0, 3.0, 2.0]).unwrap().median, 2.5);
    }

    fn manifest_with(dir: &Path, masks: &[(&str, BinaryMask)]) -> DatasetManifest {
        let entries = masks
            .iter()
            .map(|(id, m)| {
                let mask_path = dir.join(format!("gt_{id}.png"));
                save_mask(m, &mask_path).unwrap();
                ManifestEntry {
                    sample_id: id.to_string(),
                    image_path: mask_path.clone(),
                    mask_path,
                    split: Split::Eval,
                }
            })
            .collect();
        DatasetManifest::new("d", Modality::Other, entries).unwrap()
    }

    #[test]
    fn mirrored_predictions_score_perfectly() {
        let dir = tempfile::tempdir().unwrap();
        let a = square(8, 0.0, 0.0, 4.0);
        let b = square(8, 3.0, 1.0, 5.0);
        let manifest = manifest_with(dir.path(), &[("a", a.clone()), ("b", b.clone())]);
        let pred = dir.path().join("pred");
        std::fs::create_dir(&pred).unwrap();
        save_mask(&a, &pred.join("a.png")).unwrap();
        save_mask(&b, &pred.join("b.png")).unwrap();
        let out = score_mask_dir(&manifest, &pred).unwrap();
        assert!(out.warnings.is_empty());
        assert!(out.scores.iter().all(|(_, q)| *q == MetricsQuad::PERFECT));
    }

    #[test]
    fn missing_predictions_score_as_empty() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = manifest_with(
            dir.path(),
            &[("a", square(8, 0.0, 0.0, 4.0)), ("b", BinaryMask::empty(8, 8))],
        );
        let pred = dir.path().join("pred");
        std::fs::create_dir(&pred).unwrap();
        let out = score_mask_dir(&manifest, &pred).unwrap();
        assert_eq!(out.warnings.len(), 2);
        assert_eq!(out.scores[0].1, MetricsQuad::ZERO);
        assert_eq!(out.scores[1].1, MetricsQuad::PERFECT);
    }

    #[test]
    fn half_overlap_prediction() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = manifest_with(dir.path(), &[("a", square(8, 0.0, 0.0, 4.0))]);
        let pred = dir.path().join("pred");
        std::fs::create_dir(&pred).unwrap();
        save_mask(&square(8, 2.0, 2.0, 4.0), &pred.join("a.png")).unwrap();
        let q = score_mask_dir(&manifest, &pred).unwrap().scores[0].1;
        assert_abs_diff_eq!(q.dice, 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(q.precision, 0.25, epsilon = 1e-15);
    }
}
