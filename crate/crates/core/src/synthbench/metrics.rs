use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How accuracy is counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    /// Fraction of correctly labelled cells over all images.
    Cellwise,
    /// Fraction of instances whose every label is correct.
    Instancewise,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub accuracy: f64,
    /// IoU per class; `None` for classes absent from both prediction and truth.
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl MetricsReport {
    /// Mean IoU over a subset of classes (those with a defined IoU).
    pub fn miou_over(&self, classes: &[usize]) -> f64 {
        let vals: Vec<f64> = classes
            .iter()
            .filter_map(|&c| self.per_class_iou.get(c).copied().flatten())
            .collect();
        if vals.is_empty() {
            0.0
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    }
}

/// Scores label predictions against ground truth.
///
/// IoU is accumulated over every cell of every instance. Precision, recall
/// and F1 are macro averages over the same classes that enter the mean IoU;
/// when `confidence` is given, cells whose winning probability is below the
/// threshold are treated as abstentions (they count against recall only).
pub fn compute_metrics(
    preds: &[Vec<usize>],
    targets: &[Vec<usize>],
    n_classes: usize,
    kind: MetricKind,
    confidence: Option<(&[Vec<f64>], f64)>,
) -> Result<MetricsReport> {
    if preds.len() != targets.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} targets",
            preds.len(),
            targets.len()
        )));
    }
    if let Some((conf, _)) = confidence {
        if conf.len() != preds.len() || conf.iter().zip(preds).any(|(c, p)| c.len() != p.len()) {
            return Err(Error::Contract("confidence shape differs from predictions".into()));
        }
    }
    let mut inter = vec![0usize; n_classes];
    let mut pred_count = vec![0usize; n_classes];
    let mut true_count = vec![0usize; n_classes];
    let mut tp = vec![0usize; n_classes];
    let mut fp = vec![0usize; n_classes];
    let (mut cells, mut correct_cells, mut correct_instances) = (0usize, 0usize, 0usize);

    for (i, (p, t)) in preds.iter().zip(targets).enumerate() {
        if p.len() != t.len() {
            return Err(Error::Contract(format!(
                "instance {i}: {} predicted cells vs {} target cells",
                p.len(),
                t.len()
            )));
        }
        let mut all = true;
        for (j, (&pc, &tc)) in p.iter().zip(t).enumerate() {
            if pc >= n_classes || tc >= n_classes {
                return Err(Error::Contract(format!("label out of range at instance {i}, cell {j}")));
            }
            pred_count[pc] += 1;
            true_count[tc] += 1;
            cells += 1;
            if pc == tc {
                inter[pc] += 1;
                correct_cells += 1;
            } else {
                all = false;
            }
            let confident = confidence.is_none_or(|(conf, thr)| conf[i][j] >= thr);
            if confident {
                if pc == tc {
                    tp[pc] += 1;
                } else {
                    fp[pc] += 1;
                }
            }
        }
        if all {
            correct_instances += 1;
        }
    }

    let mut per_class_iou = vec![None; n_classes];
    let (mut iou_sum, mut prec_sum, mut rec_sum, mut f1_sum, mut present) = (0.0, 0.0, 0.0, 0.0, 0usize);
    for c in 0..n_classes {
        let union = pred_count[c] + true_count[c] - inter[c];
        if union == 0 {
            continue;
        }
        let iou = inter[c] as f64 / union as f64;
        per_class_iou[c] = Some(iou);
        iou_sum += iou;
        let p = ratio(tp[c], tp[c] + fp[c]);
        let r = ratio(tp[c], true_count[c]);
        prec_sum += p;
        rec_sum += r;
        f1_sum += if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        present += 1;
    }
    let mean = |s: f64| if present == 0 { 0.0 } else { s / present as f64 };
    let accuracy = match kind {
        MetricKind::Cellwise => ratio(correct_cells, cells),
        MetricKind::Instancewise => ratio(correct_instances, preds.len()),
    };
    Ok(MetricsReport {
        accuracy,
        per_class_iou,
        miou: mean(iou_sum),
        precision: mean(prec_sum),
        recall: mean(rec_sum),
        f1: mean(f1_sum),
    })
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}
