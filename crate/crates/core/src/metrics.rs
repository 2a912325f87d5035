//! Crack segmentation metrics over a threshold sweep: ODS, OIS, precision,
//! recall, F1 and two-class mIoU.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `0.01, 0.02, ..., 0.99`.
pub fn default_thresholds() -> Vec<f64> {
    (1..=99).map(|i| i as f64 / 100.0).collect()
}

/// Pixel confusion counts with crack as the positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    /// Counts for `pred >= threshold` against `gt > 0.5`.
    pub fn at(pred: &[f64], gt: &[f64], threshold: f64) -> Confusion {
        let mut c = Confusion::default();
        for (&p, &g) in pred.iter().zip(gt) {
            match (p >= threshold, g > 0.5) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    fn add(&mut self, o: &Confusion) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.tn += o.tn;
    }

    /// `(precision, recall, f1)`. With no crack in either prediction or
    /// ground truth all three are 1; otherwise empty denominators give 0.
    pub fn prf(&self) -> (f64, f64, f64) {
        if self.tp + self.fp + self.fn_ == 0 {
            return (1.0, 1.0, 1.0);
        }
        let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let p = ratio(self.tp, self.tp + self.fp);
        let r = ratio(self.tp, self.tp + self.fn_);
        let f1 = if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        };
        (p, r, f1)
    }

    /// Mean of background and crack IoU. A class absent from both prediction
    /// and ground truth has IoU 1.
    pub fn miou(&self) -> f64 {
        let iou = |hit: u64, union: u64| {
            if union == 0 {
                1.0
            } else {
                hit as f64 / union as f64
            }
        };
        let crack = iou(self.tp, self.tp + self.fp + self.fn_);
        let background = iou(self.tn, self.tn + self.fp + self.fn_);
        (crack + background) / 2.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub ods: f64,
    pub ois: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub miou: f64,
    /// The ODS-optimal global threshold, also used for P, R, F1 and mIoU.
    pub threshold: f64,
    pub images: usize,
    pub curve: Vec<CurvePoint>,
}

/// Confusion counts of one image at every threshold, via one pass that
/// buckets each pixel by how many thresholds it clears.
fn sweep(pred: &[f64], gt: &[f64], thresholds: &[f64]) -> Vec<Confusion> {
    let k = thresholds.len();
    let mut pos = vec![0u64; k + 1];
    let mut neg = vec![0u64; k + 1];
    for (&p, &g) in pred.iter().zip(gt) {
        let cleared = thresholds.partition_point(|&t| t <= p);
        if g > 0.5 {
            pos[cleared] += 1;
        } else {
            neg[cleared] += 1;
        }
    }
    let total_pos: u64 = pos.iter().sum();
    let total_neg: u64 = neg.iter().sum();
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut out = vec![Confusion::default(); k];
    // threshold m is cleared by every pixel whose bucket exceeds m
    for m in (0..k).rev() {
        tp += pos[m + 1];
        fp += neg[m + 1];
        out[m] = Confusion {
            tp,
            fp,
            fn_: total_pos - tp,
            tn: total_neg - fp,
        };
    }
    out
}

/// Metrics of probability maps `preds` against binary masks `gts`, paired
/// by index. Shapes must match exactly; thresholds must ascend strictly.
pub fn compute_metrics(
    preds: &[Tensor],
    gts: &[Tensor],
    thresholds: &[f64],
) -> Result<MetricReport> {
    if preds.is_empty() || preds.len() != gts.len() {
        return Err(Error::Invalid(format!(
            "{} predictions for {} ground-truth masks",
            preds.len(),
            gts.len()
        )));
    }
    if thresholds.is_empty() || thresholds.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Invalid(
            "thresholds must be non-empty and strictly ascending".into(),
        ));
    }
    let mut total = vec![Confusion::default(); thresholds.len()];
    let mut ois = 0.0;
    for (i, (p, g)) in preds.iter().zip(gts).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::shape(
                "compute_metrics",
                format!(
                    "image {i}: prediction {:?} vs mask {:?}",
                    p.shape(),
                    g.shape()
                ),
            ));
        }
        let per = sweep(p.data(), g.data(), thresholds);
        ois += per
            .iter()
            .map(|c| c.prf().2)
            .fold(f64::NEG_INFINITY, f64::max);
        for (t, c) in total.iter_mut().zip(&per) {
            t.add(c);
        }
    }
    let curve: Vec<CurvePoint> = thresholds
        .iter()
        .zip(&total)
        .map(|(&threshold, c)| {
            let (precision, recall, f1) = c.prf();
            CurvePoint {
                threshold,
                precision,
                recall,
                f1,
            }
        })
        .collect();
    // first threshold attaining the maximum
    let best = (0..curve.len()).fold(0, |b, i| if curve[i].f1 > curve[b].f1 { i } else { b });
    let op = curve[best];
    Ok(MetricReport {
        ods: op.f1,
        ois: ois / preds.len() as f64,
        precision: op.precision,
        recall: op.recall,
        f1: op.f1,
        miou: total[best].miou(),
        threshold: op.threshold,
        images: preds.len(),
        curve,
    })
}

impl MetricReport {
    /// Summary row followed by the per-threshold curve.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        for (k, v) in self.summary() {
            let _ = writeln!(s, "{k},{v}");
        }
        s.push_str("\nthreshold,precision,recall,f1\n");
        for c in &self.curve {
            let _ = writeln!(s, "{},{},{},{}", c.threshold, c.precision, c.recall, c.f1);
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.summary() {
            let _ = writeln!(s, "{k:<10} {v:>8.4}");
        }
        s
    }

    fn summary(&self) -> [(&'static str, f64); 8] {
        [
            ("ods", self.ods),
            ("ois", self.ois),
            ("precision", self.precision),
            ("recall", self.recall),
            ("f1", self.f1),
            ("miou", self.miou),
            ("threshold", self.threshold),
            ("images", self.images as f64),
        ]
    }
}
