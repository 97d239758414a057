//! Evaluation metrics (volumetric DICE, volume similarity, sensitivity,
//! specificity) and cross-validation aggregation.
//!
//! Convention: DICE and VS are percentages in [0, 100]; sensitivity and
//! specificity are fractions in [0, 1]. Per fold, DICE/VS are computed per
//! subject (confusion pooled over all slices of a volume) and averaged,
//! while sensitivity/specificity pool voxel counts over the whole fold.

use std::io::Write;
use std::ops::{Add, AddAssign};

use ndarray::Array3;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Voxelwise confusion counts; the four fields always sum to the number of
/// evaluated voxels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionCounts {
    pub true_pos: u64,
    pub false_pos: u64,
    pub false_neg: u64,
    pub true_neg: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.true_pos + self.false_pos + self.false_neg + self.true_neg
    }

    /// Both prediction and truth all-background: the degenerate case where
    /// DICE/VS fall back to the perfect-score convention.
    pub fn is_empty_pair(&self) -> bool {
        self.true_pos + self.false_pos + self.false_neg == 0
    }
}

impl Add for ConfusionCounts {
    type Output = ConfusionCounts;
    fn add(self, rhs: ConfusionCounts) -> ConfusionCounts {
        ConfusionCounts {
            true_pos: self.true_pos + rhs.true_pos,
            false_pos: self.false_pos + rhs.false_pos,
            false_neg: self.false_neg + rhs.false_neg,
            true_neg: self.true_neg + rhs.true_neg,
        }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, rhs: ConfusionCounts) {
        *self = *self + rhs;
    }
}

/// Threshold a probability map at `threshold` (>= goes to foreground).
pub fn binarize<S: Scalar>(y: &Array3<S>, threshold: S) -> Array3<u8> {
    assert!(
        threshold >= S::zero() && threshold <= S::one(),
        "threshold must lie in [0, 1]"
    );
    y.mapv(|v| u8::from(v >= threshold))
}

/// Count voxelwise agreement between a binary prediction and truth.
pub fn confusion(pred: &Array3<u8>, truth: &Array3<u8>) -> ConfusionCounts {
    assert_eq!(pred.dim(), truth.dim(), "prediction and truth shapes differ");
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.iter().zip(truth.iter()) {
        match (p, t) {
            (1, 1) => c.true_pos += 1,
            (1, 0) => c.false_pos += 1,
            (0, 1) => c.false_neg += 1,
            (0, 0) => c.true_neg += 1,
            _ => panic!("masks must be binary"),
        }
    }
    c
}

/// DICE (%) = 100 * 2 TP / (2 TP + FP + FN); the empty-empty pair scores
/// 100 by convention (use [`ConfusionCounts::is_empty_pair`] to detect it).
pub fn dice_score(c: &ConfusionCounts) -> f64 {
    if c.is_empty_pair() {
        return 100.0;
    }
    let denom = (2 * c.true_pos + c.false_pos + c.false_neg) as f64;
    100.0 * (2 * c.true_pos) as f64 / denom
}

/// VS (%) = 100 * (1 - |FN - FP| / (2 TP + FP + FN)); empty-empty scores
/// 100 by the same convention as [`dice_score`].
pub fn volume_similarity(c: &ConfusionCounts) -> f64 {
    if c.is_empty_pair() {
        return 100.0;
    }
    let denom = (2 * c.true_pos + c.false_pos + c.false_neg) as f64;
    let diff = c.false_neg.abs_diff(c.false_pos) as f64;
    100.0 * (1.0 - diff / denom)
}

/// (TP/(TP+FN), TN/(TN+FP)); a term with a zero denominator comes back as
/// `None`.
pub fn sensitivity_specificity(c: &ConfusionCounts) -> (Option<f64>, Option<f64>) {
    let sens = (c.true_pos + c.false_neg > 0)
        .then(|| c.true_pos as f64 / (c.true_pos + c.false_neg) as f64);
    let spec = (c.true_neg + c.false_pos > 0)
        .then(|| c.true_neg as f64 / (c.true_neg + c.false_pos) as f64);
    (sens, spec)
}

/// Mean and sample standard deviation of a metric across folds. A single
/// fold reports std 0 (recognizable by `n == 1`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

/// Aggregate one metric over folds; errors on an empty list.
pub fn aggregate_cv(values: &[f64]) -> Result<Summary> {
    if values.is_empty() {
        return Err(Error::Data("cannot aggregate zero folds".into()));
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n == 1 {
        0.0
    } else {
        let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
        (ss / (n - 1) as f64).sqrt()
    };
    Ok(Summary { mean, std, n })
}

/// Per-fold metric values for one method on one dataset: DICE/VS as
/// percentages, sensitivity/specificity as fractions (None where the fold
/// had a zero denominator).
#[derive(Debug, Clone, Default)]
pub struct FoldReport {
    pub dice: Vec<f64>,
    pub vs: Vec<f64>,
    pub sensitivity: Vec<Option<f64>>,
    pub specificity: Vec<Option<f64>>,
}

/// Cross-validated scores ready for the report table.
#[derive(Debug, Clone, PartialEq)]
pub struct CvSummary {
    pub dice: Summary,
    pub vs: Summary,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
}

impl FoldReport {
    pub fn fold_count(&self) -> usize {
        self.dice.len()
    }

    pub fn push_fold(
        &mut self,
        dice: f64,
        vs: f64,
        sensitivity: Option<f64>,
        specificity: Option<f64>,
    ) {
        self.dice.push(dice);
        self.vs.push(vs);
        self.sensitivity.push(sensitivity);
        self.specificity.push(specificity);
    }

    pub fn summarize(&self) -> Result<CvSummary> {
        assert_eq!(self.dice.len(), self.vs.len());
        assert_eq!(self.dice.len(), self.sensitivity.len());
        assert_eq!(self.dice.len(), self.specificity.len());
        let mean_defined = |vals: &[Option<f64>]| {
            let defined: Vec<f64> = vals.iter().flatten().copied().collect();
            (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
        };
        Ok(CvSummary {
            dice: aggregate_cv(&self.dice)?,
            vs: aggregate_cv(&self.vs)?,
            sensitivity: mean_defined(&self.sensitivity),
            specificity: mean_defined(&self.specificity),
        })
    }
}

/// One line of the evaluation table.
#[derive(Debug, Clone)]
pub struct ReportRow {
    pub method: String,
    pub dataset: String,
    pub summary: CvSummary,
}

/// Write the comma-separated evaluation table. DICE/VS columns carry two
/// decimals, sensitivity/specificity four; undefined cells stay empty.
pub fn write_report_csv<W: Write>(mut w: W, rows: &[ReportRow]) -> std::io::Result<()> {
    writeln!(
        w,
        "method,dataset,dice_mean,dice_std,vs_mean,vs_std,sensitivity,specificity"
    )?;
    let opt4 = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_default();
    for row in rows {
        let s = &row.summary;
        writeln!(
            w,
            "{},{},{:.2},{:.2},{:.2},{:.2},{},{}",
            row.method,
            row.dataset,
            s.dice.mean,
            s.dice.std,
            s.vs.mean,
            s.vs.std,
            opt4(s.sensitivity),
            opt4(s.specificity),
        )?;
    }
    Ok(())
}
