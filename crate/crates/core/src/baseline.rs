//! Raw-pixel change baseline: per-pixel mean absolute RGB difference, with
//! the decision threshold picked by exhaustive sweep on the evaluated data
//! itself (an oracle threshold, so the baseline is as strong as it can be).

use crate::data::CdSample;
use crate::error::{Error, Result};
use crate::metrics::ConfusionCounts;

/// Mean over channels of `|a − b|`, one value per pixel.
pub fn rgb_abs_difference(sample: &CdSample) -> Vec<f32> {
    let hw = sample.height() * sample.width();
    let (a, b) = (sample.img_a.data(), sample.img_b.data());
    (0..hw)
        .map(|p| (0..3).map(|c| (a[c * hw + p] - b[c * hw + p]).abs()).sum::<f32>() / 3.0)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdResult {
    /// Pixels with score strictly above this value are predicted changed.
    pub threshold: f32,
    pub counts: ConfusionCounts,
    pub f1: f64,
}

/// Tries every distinct score as threshold (plus "nothing changed") and
/// keeps the one with the highest dataset-level F1.
pub fn best_threshold(scores: &[f32], labels: &[u8]) -> Result<ThresholdResult> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::dim(
            "best_threshold",
            format!("{} scores for {} labels", scores.len(), labels.len()),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]));
    let positives = labels.iter().filter(|&&l| l == 1).count() as u64;
    let total = labels.len() as u64;
    let at = |tp: u64, fp: u64| ConfusionCounts {
        tp,
        fp,
        fn_: positives - tp,
        tn: total - positives - fp,
    };
    let f1_of = |c: &ConfusionCounts| c.scores().map(|s| s.f1).unwrap_or(0.0);
    let first = at(0, 0);
    let mut best = ThresholdResult {
        threshold: scores[order[0]],
        counts: first,
        f1: f1_of(&first),
    };
    let (mut tp, mut fp) = (0, 0);
    let mut k = 0;
    // descending sweep: after consuming every pixel with score ≥ s the
    // threshold is the next lower distinct score
    while k < order.len() {
        let s = scores[order[k]];
        while k < order.len() && scores[order[k]] == s {
            if labels[order[k]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        let threshold = if k < order.len() { scores[order[k]] } else { f32::NEG_INFINITY };
        let c = at(tp, fp);
        let f1 = f1_of(&c);
        if f1 > best.f1 {
            best = ThresholdResult { threshold, counts: c, f1 };
        }
    }
    Ok(best)
}

/// Oracle-threshold raw-difference baseline over a whole sample set.
pub fn raw_difference_baseline(samples: &[CdSample]) -> Result<ThresholdResult> {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for s in samples {
        scores.extend(rgb_abs_difference(s));
        labels.extend_from_slice(&s.mask);
    }
    best_threshold(&scores, &labels)
}
