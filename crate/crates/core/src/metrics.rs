//! Segmentation accuracy and a discriminator-based domain-gap proxy.

use crate::error::{Error, Result};
use crate::nn::Tensor;

/// `K×K` counts, row = truth, column = prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn add(&mut self, truth: usize, pred: usize) -> Result<()> {
        if truth >= self.classes || pred >= self.classes {
            return Err(Error::invalid(format!(
                "class pair ({truth}, {pred}) outside {} classes",
                self.classes
            )));
        }
        self.counts[truth * self.classes + pred] += 1;
        Ok(())
    }

    pub fn accumulate(&mut self, truth: &[usize], pred: &[usize]) -> Result<()> {
        if truth.len() != pred.len() {
            return Err(Error::shape(
                "confusion",
                format!("{} truths vs {} predictions", truth.len(), pred.len()),
            ));
        }
        for (&t, &p) in truth.iter().zip(pred) {
            self.add(t, p)?;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::shape(
                "confusion",
                "merging matrices of different size",
            ));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Per-class IoU (`None` where the class never occurs in truth or
    /// prediction) and their mean over the defined classes.
    pub fn iou(&self) -> Result<IouReport> {
        if self.total() == 0 {
            return Err(Error::invalid("confusion matrix is empty"));
        }
        let k = self.classes;
        let per_class: Vec<Option<f64>> = (0..k)
            .map(|c| {
                let tp = self.get(c, c);
                let row: u64 = (0..k).map(|j| self.get(c, j)).sum();
                let col: u64 = (0..k).map(|i| self.get(i, c)).sum();
                let denom = row + col - tp;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect();
        let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
        let miou = defined.iter().sum::<f64>() / defined.len() as f64;
        Ok(IouReport { per_class, miou })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IouReport {
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
}

/// Balanced accuracy of a discriminator that should output > 0.5 on target
/// and < 0.5 on source; outputs of exactly 0.5 count as half right.
pub fn discriminator_accuracy(d_source: &[Tensor], d_target: &[Tensor]) -> Result<f64> {
    let rate = |maps: &[Tensor], target: bool| -> Result<f64> {
        let mut n = 0usize;
        let mut hits = 0.0;
        for m in maps {
            for &d in m.data() {
                n += 1;
                hits += if d == 0.5 {
                    0.5
                } else if (d > 0.5) == target {
                    1.0
                } else {
                    0.0
                };
            }
        }
        if n == 0 {
            return Err(Error::invalid("domain gap needs pixels from both domains"));
        }
        Ok(hits / n as f64)
    };
    Ok(0.5 * (rate(d_source, false)? + rate(d_target, true)?))
}

/// `2 |acc − 0.5|`: 0 for indistinguishable domains, 1 for perfect separation.
pub fn domain_gap(d_source: &[Tensor], d_target: &[Tensor]) -> Result<f64> {
    let acc = discriminator_accuracy(d_source, d_target)?;
    Ok((2.0 * (acc - 0.5).abs()).min(1.0))
}
