//! Mask IoU and precision at IoU thresholds.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};

pub const PR_THRESHOLDS: [u32; 5] = [50, 60, 70, 80, 90];

fn counts(pred: &[bool], gt: &[bool]) -> Result<(usize, usize)> {
    if pred.len() != gt.len() {
        return Err(Error::shape(
            "iou",
            format!("{} predicted vs {} ground-truth pixels", pred.len(), gt.len()),
        ));
    }
    let inter = pred.iter().zip(gt).filter(|(a, b)| **a && **b).count();
    let union = pred.iter().zip(gt).filter(|(a, b)| **a || **b).count();
    Ok((inter, union))
}

/// `|pred ∧ gt| / |pred ∨ gt|`; two empty masks score 1.
pub fn iou(pred: &[bool], gt: &[bool]) -> Result<f64> {
    let (i, u) = counts(pred, gt)?;
    Ok(if u == 0 { 1.0 } else { i as f64 / u as f64 })
}

/// Percentage of IoUs strictly above `x/100`.
pub fn precision_at(ious: &[f64], x: u32) -> Result<f64> {
    if ious.is_empty() {
        return Err(Error::Input("precision over an empty set of IoUs".into()));
    }
    let thr = x as f64 / 100.0;
    let hits = ious.iter().filter(|&&v| v > thr).count();
    Ok(100.0 * hits as f64 / ious.len() as f64)
}

/// Dataset-level scores. `overall_iou` divides cumulative intersection by
/// cumulative union; `mean_iou` averages per-sample IoUs.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub overall_iou: f64,
    pub mean_iou: f64,
    pub pr: BTreeMap<u32, f64>,
    pub per_sample: Vec<f64>,
}

#[derive(Debug, Default, Clone)]
pub struct IouAccumulator {
    intersection: usize,
    union: usize,
    per_sample: Vec<f64>,
}

impl IouAccumulator {
    pub fn add(&mut self, pred: &[bool], gt: &[bool]) -> Result<f64> {
        let (i, u) = counts(pred, gt)?;
        self.intersection += i;
        self.union += u;
        let v = if u == 0 { 1.0 } else { i as f64 / u as f64 };
        self.per_sample.push(v);
        Ok(v)
    }

    /// Associative merge for parallel evaluation.
    pub fn merge(mut self, other: IouAccumulator) -> IouAccumulator {
        self.intersection += other.intersection;
        self.union += other.union;
        self.per_sample.extend(other.per_sample);
        self
    }

    pub fn finish(self) -> Result<EvalReport> {
        if self.per_sample.is_empty() {
            return Err(Error::Input("no samples evaluated".into()));
        }
        let pr = PR_THRESHOLDS
            .iter()
            .map(|&x| precision_at(&self.per_sample, x).map(|v| (x, v)))
            .collect::<Result<_>>()?;
        Ok(EvalReport {
            overall_iou: if self.union == 0 {
                1.0
            } else {
                self.intersection as f64 / self.union as f64
            },
            mean_iou: self.per_sample.iter().sum::<f64>() / self.per_sample.len() as f64,
            pr,
            per_sample: self.per_sample,
        })
    }
}

impl EvalReport {
    pub fn from_masks<'a>(pairs: impl IntoIterator<Item = (&'a [bool], &'a [bool])>) -> Result<Self> {
        let mut acc = IouAccumulator::default();
        for (p, g) in pairs {
            acc.add(p, g)?;
        }
        acc.finish()
    }

    /// `metric,value` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::from("metric,value\n");
        let _ = writeln!(s, "overall_iou,{:.6}", self.overall_iou);
        let _ = writeln!(s, "mean_iou,{:.6}", self.mean_iou);
        for (x, v) in &self.pr {
            let _ = writeln!(s, "pr@{x},{v:.4}");
        }
        let _ = writeln!(s, "samples,{}", self.per_sample.len());
        s
    }

    pub fn per_sample_csv(&self) -> String {
        let mut s = String::from("sample,iou\n");
        for (i, v) in self.per_sample.iter().enumerate() {
            let _ = writeln!(s, "{i},{v:.6}");
        }
        s
    }
}
