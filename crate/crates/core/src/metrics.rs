//! Confusion counts and change-class scores, aggregated over a whole dataset.

use std::fmt;
use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pixel counts with "changed" as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// Adds one prediction/ground-truth pair of `{0, 1}` maps.
    pub fn accumulate(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::dim(
                "accumulate",
                format!("prediction has {} pixels, ground truth {}", pred.len(), gt.len()),
            ));
        }
        let mut c = Self::default();
        for (i, (&p, &g)) in pred.iter().zip(gt).enumerate() {
            match (p, g) {
                (1, 1) => c.tp += 1,
                (1, 0) => c.fp += 1,
                (0, 1) => c.fn_ += 1,
                (0, 0) => c.tn += 1,
                _ => {
                    return Err(Error::Data(format!(
                        "non-binary value at pixel {i}: prediction {p}, ground truth {g}"
                    )))
                }
            }
        }
        *self += c;
        Ok(())
    }

    pub fn from_maps(pred: &[u8], gt: &[u8]) -> Result<Self> {
        let mut c = Self::default();
        c.accumulate(pred, gt)?;
        Ok(c)
    }

    pub fn merge(self, other: Self) -> Self {
        self + other
    }

    pub fn scores(&self) -> Result<Scores> {
        let total = self.total();
        if total == 0 {
            return Err(Error::Contract("scores of empty confusion counts".into()));
        }
        let (tp, fp, fn_, tn) = (self.tp as f64, self.fp as f64, self.fn_ as f64, self.tn as f64);
        let ratio = |num: f64, den: f64| if den > 0.0 { num / den } else { 0.0 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        // 2PR/(P+R) written over counts, which is exact in the same rounding
        // as the IoU and keeps f1 = 2·iou/(1+iou) tight
        let f1 = ratio(2.0 * tp, 2.0 * tp + fp + fn_);
        let iou = ratio(tp, tp + fp + fn_);
        Ok(Scores {
            precision,
            recall,
            f1,
            iou,
            oa: (tp + tn) / total as f64,
            undefined: self.tp + self.fp + self.fn_ == 0,
        })
    }
}

impl Add for ConfusionCounts {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

/// Fractions in `[0, 1]`. When no pixel is positive in either prediction or
/// ground truth, precision/recall/f1/iou are reported as 0 and `undefined`
/// is set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
    pub oa: f64,
    pub undefined: bool,
}

/// Machine-readable metrics report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub f1: f64,
    pub iou: f64,
    pub oa: f64,
    pub precision: f64,
    pub recall: f64,
    pub undefined: bool,
    pub counts: ConfusionCounts,
}

impl MetricsReport {
    pub fn new(counts: ConfusionCounts) -> Result<Self> {
        let s = counts.scores()?;
        Ok(Self {
            f1: s.f1,
            iou: s.iou,
            oa: s.oa,
            precision: s.precision,
            recall: s.recall,
            undefined: s.undefined,
            counts,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Data(format!("metrics report: {e}")))
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:>8} {:>8} {:>8}", "F1", "IoU", "OA")?;
        write!(f, "{:>8.2} {:>8.2} {:>8.2}", self.f1 * 100.0, self.iou * 100.0, self.oa * 100.0)?;
        if self.undefined {
            write!(f, "  (no positive pixels; f1/iou undefined, shown as 0)")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_ones_is_all_tp() {
        let c = ConfusionCounts::from_maps(&[1; 4], &[1; 4]).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 4, ..Default::default() });
        let s = c.scores().unwrap();
        assert_eq!((s.f1, s.iou, s.oa), (1.0, 1.0, 1.0));
    }

    #[test]
    fn missed_everything_is_all_fn() {
        let c = ConfusionCounts::from_maps(&[0; 6], &[1; 6]).unwrap();
        assert_eq!(c.fn_, 6);
        assert_eq!(c.scores().unwrap().f1, 0.0);
    }

    #[test]
    fn hand_counted_example() {
        let c = ConfusionCounts { tp: 3, fp: 1, fn_: 1, tn: 5 };
        let s = c.scores().unwrap();
        assert_eq!((s.precision, s.recall, s.f1, s.iou, s.oa), (0.75, 0.75, 0.75, 0.6, 0.8));
    }

    #[test]
    fn empty_counts_are_contract_error() {
        assert!(matches!(ConfusionCounts::default().scores(), Err(Error::Contract(_))));
    }

    #[test]
    fn all_negative_is_flagged() {
        let s = ConfusionCounts { tn: 9, ..Default::default() }.scores().unwrap();
        assert!(s.undefined);
        assert_eq!((s.f1, s.iou, s.oa), (0.0, 0.0, 1.0));
    }

    #[test]
    fn non_binary_is_data_error() {
        assert!(matches!(ConfusionCounts::from_maps(&[0, 2], &[0, 1]), Err(Error::Data(_))));
    }

    #[test]
    fn json_round_trip() {
        let r = MetricsReport::new(ConfusionCounts { tp: 3, fp: 1, fn_: 1, tn: 5 }).unwrap();
        let j = r.to_json();
        assert!(j.contains("\"fn\": 1"));
        assert_eq!(MetricsReport::from_json(&j).unwrap(), r);
        assert!(r.to_string().contains("75.00"));
    }
}
