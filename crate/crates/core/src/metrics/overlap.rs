//! Voxel-overlap metrics on binary masks.

use crate::error::{Error, Result};

/// Voxel counts of a prediction against ground truth.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn of(pred: &[bool], gt: &[bool]) -> Result<Self> {
        if pred.len() != gt.len() {
            return Err(Error::Shape(format!(
                "prediction has {} voxels, ground truth has {}",
                pred.len(),
                gt.len()
            )));
        }
        let mut c = Confusion::default();
        for (&p, &g) in pred.iter().zip(gt) {
            match (p, g) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    /// `2 TP / (|P| + |G|)`, with two empty masks scoring 1.
    pub fn dice(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            1.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        }
    }

    /// `TP / (TP + FN)`, 1 when the ground truth is empty.
    pub fn sensitivity(&self) -> f64 {
        let denom = self.tp + self.fn_;
        if denom == 0 {
            1.0
        } else {
            self.tp as f64 / denom as f64
        }
    }

    /// `TP / (TP + FP)`, 1 when the prediction is empty.
    pub fn precision(&self) -> f64 {
        let denom = self.tp + self.fp;
        if denom == 0 {
            1.0
        } else {
            self.tp as f64 / denom as f64
        }
    }
}

pub fn dice(pred: &[bool], gt: &[bool]) -> Result<f64> {
    Ok(Confusion::of(pred, gt)?.dice())
}

pub fn sensitivity_precision(pred: &[bool], gt: &[bool]) -> Result<(f64, f64)> {
    let c = Confusion::of(pred, gt)?;
    Ok((c.sensitivity(), c.precision()))
}

/// Prediction threshold applied to probability maps.
pub const THRESHOLD: f32 = 0.5;

pub fn binarize(prob: &[f32]) -> Vec<bool> {
    prob.iter().map(|&p| p >= THRESHOLD).collect()
}
