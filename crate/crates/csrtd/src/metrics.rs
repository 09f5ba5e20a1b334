//! Evaluation metrics over the changed class (precision, recall, F1, mIoU)
//! and the thresholded pixel-difference baseline.

use crate::error::{Error, Result};
use crate::imageio::RgbImage;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
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

    pub fn add(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }
}

fn check_binary(mask: &[u8], what: &str) -> Result<()> {
    if let Some(bad) = mask.iter().find(|&&v| v > 1) {
        return Err(Error::Contract(format!("{what} value {bad} outside {{0,1}}")));
    }
    Ok(())
}

pub fn confusion(pred: &[u8], y: &[u8]) -> Result<ConfusionCounts> {
    if pred.len() != y.len() {
        return Err(Error::ShapeMismatch {
            op: "confusion",
            lhs: vec![pred.len()],
            rhs: vec![y.len()],
        });
    }
    check_binary(pred, "prediction")?;
    check_binary(y, "ground truth")?;
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.iter().zip(y) {
        match (p, t) {
            (1, 1) => c.tp += 1,
            (1, 0) => c.fp += 1,
            (0, 1) => c.fn_ += 1,
            _ => c.tn += 1,
        }
    }
    Ok(c)
}

pub fn precision(c: &ConfusionCounts) -> f64 {
    if c.tp + c.fp == 0 {
        0.0
    } else {
        c.tp as f64 / (c.tp + c.fp) as f64
    }
}

pub fn recall(c: &ConfusionCounts) -> f64 {
    if c.tp + c.fn_ == 0 {
        0.0
    } else {
        c.tp as f64 / (c.tp + c.fn_) as f64
    }
}

/// Harmonic mean 2/(1/p + 1/r); 0 when precision and recall both vanish.
pub fn f1(c: &ConfusionCounts) -> f64 {
    if c.tp == 0 {
        0.0
    } else {
        2.0 / (1.0 / precision(c) + 1.0 / recall(c))
    }
}

/// Per-sample IoU over the changed class; empty-vs-empty counts as 1.
pub fn iou(c: &ConfusionCounts) -> f64 {
    let denom = c.tp + c.fp + c.fn_;
    if denom == 0 {
        1.0
    } else {
        c.tp as f64 / denom as f64
    }
}

pub fn miou(per_sample: &[f64]) -> f64 {
    if per_sample.is_empty() {
        return 0.0;
    }
    per_sample.iter().sum::<f64>() / per_sample.len() as f64
}

/// Streaming evaluation: corpus-aggregated confusion for precision/recall/F1,
/// per-sample IoUs for mIoU, per-sample F1 as a secondary aggregation.
#[derive(Default)]
pub struct EvalAccum {
    counts: ConfusionCounts,
    ious: Vec<f64>,
    sample_f1s: Vec<f64>,
}

impl EvalAccum {
    pub fn add_sample(&mut self, pred: &[u8], y: &[u8]) -> Result<()> {
        let c = confusion(pred, y)?;
        self.counts.add(&c);
        self.ious.push(iou(&c));
        self.sample_f1s.push(f1(&c));
        Ok(())
    }

    pub fn merge(&mut self, other: EvalAccum) {
        self.counts.add(&other.counts);
        self.ious.extend(other.ious);
        self.sample_f1s.extend(other.sample_f1s);
    }

    pub fn finish(self) -> EvalReport {
        EvalReport {
            precision: precision(&self.counts),
            recall: recall(&self.counts),
            f1: f1(&self.counts),
            miou: miou(&self.ious),
            f1_per_sample: miou(&self.sample_f1s),
            n_samples: self.ious.len(),
            counts: self.counts,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub miou: f64,
    /// Mean of per-sample F1 scores; the corpus-level `f1` is primary.
    pub f1_per_sample: f64,
    pub n_samples: usize,
    pub counts: ConfusionCounts,
}

impl EvalReport {
    /// Human-readable summary followed by the machine-readable block.
    pub fn render(&self) -> String {
        format!(
            "evaluated {} samples\n\
             confusion (changed class): tp={} fp={} fn={} tn={}\n\
             per-sample mean f1 (secondary): {:.6}\n\
             precision={:.6}\n\
             recall={:.6}\n\
             f1={:.6}\n\
             miou={:.6}\n\
             n_samples={}\n",
            self.n_samples,
            self.counts.tp,
            self.counts.fp,
            self.counts.fn_,
            self.counts.tn,
            self.f1_per_sample,
            self.precision,
            self.recall,
            self.f1,
            self.miou,
            self.n_samples
        )
    }
}

/// Marks pixels whose Euclidean RGB distance exceeds theta.
pub fn pixel_difference_baseline(goal: &RgbImage, cur: &RgbImage, theta: f64) -> Result<Vec<u8>> {
    if goal.width != cur.width || goal.height != cur.height {
        return Err(Error::ShapeMismatch {
            op: "pixel_difference_baseline",
            lhs: vec![goal.height, goal.width],
            rhs: vec![cur.height, cur.width],
        });
    }
    let n = goal.width * goal.height;
    let mut mask = vec![0u8; n];
    for p in 0..n {
        let mut d2 = 0.0f64;
        for ch in 0..3 {
            let diff = goal.data[3 * p + ch] as f64 - cur.data[3 * p + ch] as f64;
            d2 += diff * diff;
        }
        mask[p] = u8::from(d2.sqrt() > theta);
    }
    Ok(mask)
}

/// Sweeps theta over a fixed grid and keeps the corpus-F1 argmax on the
/// given pairs; ties go to the smaller theta.
pub fn tune_theta(pairs: &[(RgbImage, RgbImage, Vec<u8>)]) -> Result<(f64, f64)> {
    if pairs.is_empty() {
        return Err(Error::Config("theta sweep needs at least one sample".into()));
    }
    let mut best = (0.0, -1.0);
    let mut theta = 5.0;
    while theta <= 250.0 {
        let mut acc = EvalAccum::default();
        for (goal, cur, y) in pairs {
            acc.add_sample(&pixel_difference_baseline(goal, cur, theta)?, y)?;
        }
        let score = acc.finish().f1;
        if score > best.1 {
            best = (theta, score);
        }
        theta += 5.0;
    }
    Ok(best)
}
