//! Segmentation metrics over a global confusion matrix.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::geodata::NUM_CLASSES;

/// `counts[truth][prediction]` pixel counts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

impl Default for ConfusionMatrix {
    fn default() -> Self {
        Self { counts: [[0; NUM_CLASSES]; NUM_CLASSES] }
    }
}

impl ConfusionMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_counts(counts: [[u64; NUM_CLASSES]; NUM_CLASSES]) -> Self {
        Self { counts }
    }

    pub fn counts(&self) -> &[[u64; NUM_CLASSES]; NUM_CLASSES] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn update(&mut self, pred: &[u8], truth: &[u8]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::data(format!("prediction has {} pixels, truth has {}", pred.len(), truth.len())));
        }
        if let Some(&bad) = pred.iter().chain(truth).find(|&&c| c as usize >= NUM_CLASSES) {
            return Err(Error::data(format!("class {bad} outside 0..{}", NUM_CLASSES - 1)));
        }
        for (&p, &t) in pred.iter().zip(truth) {
            self.counts[t as usize][p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().flatten().zip(other.counts.iter().flatten()) {
            *a += b;
        }
    }

    pub fn report(&self, tiles_evaluated: usize) -> Result<IoUReport> {
        let total = self.total();
        if total == 0 {
            return Err(Error::data("confusion matrix is empty"));
        }
        let mut per_class = [None; NUM_CLASSES];
        let mut diag = 0;
        for k in 0..NUM_CLASSES {
            let tp = self.counts[k][k];
            let fn_: u64 = self.counts[k].iter().sum::<u64>() - tp;
            let fp: u64 = (0..NUM_CLASSES).map(|t| self.counts[t][k]).sum::<u64>() - tp;
            let union = tp + fp + fn_;
            if union > 0 {
                per_class[k] = Some(tp as f64 / union as f64);
            }
            diag += tp;
        }
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        Ok(IoUReport {
            per_class_iou: per_class,
            miou: present.iter().sum::<f64>() / present.len() as f64,
            pixel_accuracy: diag as f64 / total as f64,
            tiles_evaluated,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IoUReport {
    /// `None` for classes absent from both truth and prediction.
    pub per_class_iou: [Option<f64>; NUM_CLASSES],
    pub miou: f64,
    pub pixel_accuracy: f64,
    pub tiles_evaluated: usize,
}

pub fn miou(cm: &ConfusionMatrix) -> Result<IoUReport> {
    cm.report(0)
}

pub fn results_csv_header() -> String {
    let mut s = String::from("mode,init,frozen,fraction,seed,miou,pixel_accuracy");
    for k in 0..NUM_CLASSES {
        let _ = write!(s, ",per_class_iou_{k}");
    }
    s
}

/// One results row; absent classes are written as `nan`.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub mode: String,
    pub init: String,
    pub frozen: bool,
    pub fraction: f64,
    pub seed: u64,
    pub report: IoUReport,
}

impl ResultRow {
    pub fn to_csv(&self) -> String {
        let r = &self.report;
        let mut s = format!(
            "{},{},{},{},{},{:.6},{:.6}",
            self.mode, self.init, self.frozen, self.fraction, self.seed, r.miou, r.pixel_accuracy
        );
        for iou in &r.per_class_iou {
            match iou {
                Some(v) => {
                    let _ = write!(s, ",{v:.6}");
                }
                None => s.push_str(",nan"),
            }
        }
        s
    }
}
