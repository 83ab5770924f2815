//! Confusion-matrix segmentation metrics: per-class IoU, mean IoU, overall
//! pixel accuracy, and mean per-class recall, plus k-fold averaging.
//!
//! The matrix is indexed rows = ground truth, columns = prediction, and
//! accumulation is plain integer addition, so any pixel order and any
//! per-image partitioning produce the identical matrix.

use serde::{Deserialize, Serialize};

use crate::{CoreError, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Result<Self> {
        if num_classes == 0 {
            return Err(CoreError::invalid("ConfusionMatrix::new", "zero classes"));
        }
        Ok(ConfusionMatrix {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Accumulates one prediction/ground-truth pair. Pixels whose ground
    /// truth carries `ignore_index` are skipped; out-of-range predictions
    /// on counted pixels are an error since they indicate a broken model
    /// head rather than bad data.
    pub fn accumulate(
        &mut self,
        pred: &[u8],
        gt: &[u8],
        ignore_index: u8,
    ) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(CoreError::mismatch(
                "ConfusionMatrix::accumulate",
                format!("pred has {} pixels, gt has {}", pred.len(), gt.len()),
            ));
        }
        for (&p, &g) in pred.iter().zip(gt) {
            if g == ignore_index {
                continue;
            }
            let (p, g) = (p as usize, g as usize);
            if p >= self.num_classes || g >= self.num_classes {
                return Err(CoreError::invalid(
                    "ConfusionMatrix::accumulate",
                    format!(
                        "label pair (gt {g}, pred {p}) outside {} classes",
                        self.num_classes
                    ),
                ));
            }
            self.counts[g * self.num_classes + p] += 1;
        }
        Ok(())
    }

    /// Merges another matrix into this one; used to combine per-worker
    /// partial matrices. Integer addition commutes, so the merge order
    /// cannot change the result.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if self.num_classes != other.num_classes {
            return Err(CoreError::mismatch(
                "ConfusionMatrix::merge",
                format!("{} classes vs {}", self.num_classes, other.num_classes),
            ));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

/// Aggregate metrics; classes absent from both ground truth and prediction
/// have no defined IoU and are excluded from the means (`None` per class).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub aacc: f64,
    pub macc: f64,
}

/// Computes IoU/aAcc/mAcc from an accumulated matrix.
///
/// IoU_c = tp / (tp + fp + fn); aAcc = trace / total; mAcc = mean recall
/// over classes that appear in the ground truth. Means run over defined
/// classes only.
pub fn metrics_from_confusion(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    let n = cm.num_classes();
    let total = cm.total();
    if total == 0 {
        return Err(CoreError::invalid(
            "metrics_from_confusion",
            "empty confusion matrix",
        ));
    }
    let mut per_class_iou = Vec::with_capacity(n);
    let mut iou_sum = 0.0;
    let mut iou_count = 0usize;
    let mut recall_sum = 0.0;
    let mut recall_count = 0usize;
    let mut trace = 0u64;
    for c in 0..n {
        let tp = cm.count(c, c);
        trace += tp;
        let gt_total: u64 = (0..n).map(|p| cm.count(c, p)).sum();
        let pred_total: u64 = (0..n).map(|g| cm.count(g, c)).sum();
        let union = gt_total + pred_total - tp;
        if union == 0 {
            per_class_iou.push(None);
        } else {
            let iou = tp as f64 / union as f64;
            per_class_iou.push(Some(iou));
            iou_sum += iou;
            iou_count += 1;
        }
        if gt_total > 0 {
            recall_sum += tp as f64 / gt_total as f64;
            recall_count += 1;
        }
    }
    if iou_count == 0 {
        return Err(CoreError::invalid(
            "metrics_from_confusion",
            "no class has any ground-truth or predicted pixels",
        ));
    }
    Ok(MetricsReport {
        per_class_iou,
        miou: iou_sum / iou_count as f64,
        aacc: trace as f64 / total as f64,
        macc: recall_sum / recall_count as f64,
    })
}

/// Arithmetic mean of fold reports, element-wise over per-class IoUs.
/// A class undefined in any fold stays undefined in the mean.
pub fn kfold_aggregate(reports: &[MetricsReport]) -> Result<MetricsReport> {
    let Some(first) = reports.first() else {
        return Err(CoreError::invalid("kfold_aggregate", "no fold reports"));
    };
    let n = first.per_class_iou.len();
    for r in reports {
        if r.per_class_iou.len() != n {
            return Err(CoreError::mismatch(
                "kfold_aggregate",
                format!("{} classes vs {}", r.per_class_iou.len(), n),
            ));
        }
    }
    let k = reports.len() as f64;
    let per_class_iou = (0..n)
        .map(|c| {
            let mut sum = 0.0;
            for r in reports {
                sum += r.per_class_iou[c]?;
            }
            Some(sum / k)
        })
        .collect();
    Ok(MetricsReport {
        per_class_iou,
        miou: reports.iter().map(|r| r.miou).sum::<f64>() / k,
        aacc: reports.iter().map(|r| r.aacc).sum::<f64>() / k,
        macc: reports.iter().map(|r| r.macc).sum::<f64>() / k,
    })
}

/// Renders the per-class table alongside the aggregates, aligned for
/// terminal reading.
pub fn format_report(report: &MetricsReport, class_names: &[String]) -> String {
    let mut out = String::new();
    out.push_str(&format!("{:<20} {:>8}\n", "class", "IoU"));
    for (c, iou) in report.per_class_iou.iter().enumerate() {
        let name = class_names
            .get(c)
            .map(String::as_str)
            .unwrap_or("(unnamed)");
        match iou {
            Some(v) => out.push_str(&format!("{:<20} {:>8.4}\n", name, v)),
            None => out.push_str(&format!("{:<20} {:>8}\n", name, "-")),
        }
    }
    out.push_str(&format!(
        "mIoU {:.4}  aAcc {:.4}  mAcc {:.4}\n",
        report.miou, report.aacc, report.macc
    ));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction_is_all_ones() {
        let mut cm = ConfusionMatrix::new(3).unwrap();
        cm.accumulate(&[0, 1, 2, 2], &[0, 1, 2, 2], 255).unwrap();
        let m = metrics_from_confusion(&cm).unwrap();
        assert_eq!(m.miou, 1.0);
        assert_eq!(m.aacc, 1.0);
        assert_eq!(m.macc, 1.0);
    }

    #[test]
    fn worked_two_class_example() {
        // Matrix [[2, 1], [1, 2]]: each class has tp 2, fp 1, fn 1.
        let mut cm = ConfusionMatrix::new(2).unwrap();
        cm.accumulate(&[0, 0, 1, 1, 1, 0], &[0, 0, 0, 1, 1, 1], 255)
            .unwrap();
        assert_eq!(cm.count(0, 0), 2);
        assert_eq!(cm.count(0, 1), 1);
        assert_eq!(cm.count(1, 0), 1);
        assert_eq!(cm.count(1, 1), 2);
        let m = metrics_from_confusion(&cm).unwrap();
        assert!((m.per_class_iou[0].unwrap() - 0.5).abs() < 1e-12);
        assert!((m.per_class_iou[1].unwrap() - 0.5).abs() < 1e-12);
        assert!((m.miou - 0.5).abs() < 1e-12);
        assert!((m.aacc - 4.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn ignored_pixels_leave_the_matrix_unchanged() {
        let mut cm = ConfusionMatrix::new(2).unwrap();
        cm.accumulate(&[0, 1, 0], &[255, 255, 255], 255).unwrap();
        assert_eq!(cm.total(), 0);
        assert!(metrics_from_confusion(&cm).is_err());
    }

    #[test]
    fn out_of_range_prediction_is_an_error() {
        let mut cm = ConfusionMatrix::new(2).unwrap();
        assert!(cm.accumulate(&[2], &[0], 255).is_err());
    }

    #[test]
    fn absent_class_is_excluded_from_means() {
        let mut cm = ConfusionMatrix::new(3).unwrap();
        cm.accumulate(&[0, 1, 1], &[0, 1, 0], 255).unwrap();
        let m = metrics_from_confusion(&cm).unwrap();
        assert!(m.per_class_iou[2].is_none());
        // IoU_0 = 1/2 (tp 1, fn 1); IoU_1 = 1/2 (tp 1, fp 1).
        assert!((m.miou - 0.5).abs() < 1e-12);
    }

    #[test]
    fn accumulation_is_order_independent() {
        let pred = [0u8, 1, 2, 1, 0, 2, 2, 1];
        let gt = [0u8, 1, 1, 1, 2, 2, 0, 0];
        let mut a = ConfusionMatrix::new(3).unwrap();
        a.accumulate(&pred, &gt, 255).unwrap();
        let mut b = ConfusionMatrix::new(3).unwrap();
        for i in (0..pred.len()).rev() {
            b.accumulate(&pred[i..i + 1], &gt[i..i + 1], 255).unwrap();
        }
        assert_eq!(a, b);
    }

    #[test]
    fn merge_equals_joint_accumulation() {
        let pred = [0u8, 1, 2, 1, 0, 2];
        let gt = [0u8, 2, 1, 1, 2, 2];
        let mut joint = ConfusionMatrix::new(3).unwrap();
        joint.accumulate(&pred, &gt, 255).unwrap();
        let mut left = ConfusionMatrix::new(3).unwrap();
        left.accumulate(&pred[..3], &gt[..3], 255).unwrap();
        let mut right = ConfusionMatrix::new(3).unwrap();
        right.accumulate(&pred[3..], &gt[3..], 255).unwrap();
        left.merge(&right).unwrap();
        assert_eq!(joint, left);
    }

    #[test]
    fn kfold_means_every_field() {
        let fold = |miou: f64| MetricsReport {
            per_class_iou: vec![Some(miou), None],
            miou,
            aacc: miou,
            macc: miou,
        };
        let agg = kfold_aggregate(&[fold(0.4), fold(0.6)]).unwrap();
        assert!((agg.miou - 0.5).abs() < 1e-12);
        assert_eq!(agg.per_class_iou[0], Some(0.5));
        assert_eq!(agg.per_class_iou[1], None);

        let single = kfold_aggregate(&[fold(0.7)]).unwrap();
        assert!((single.miou - 0.7).abs() < 1e-12);
    }

    #[test]
    fn kfold_rejects_mismatched_class_counts() {
        let a = MetricsReport {
            per_class_iou: vec![Some(1.0)],
            miou: 1.0,
            aacc: 1.0,
            macc: 1.0,
        };
        let b = MetricsReport {
            per_class_iou: vec![Some(1.0), Some(1.0)],
            miou: 1.0,
            aacc: 1.0,
            macc: 1.0,
        };
        assert!(kfold_aggregate(&[a, b]).is_err());
    }
}
