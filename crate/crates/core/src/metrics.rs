//! Confusion matrices and intersection-over-union.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::datasets::{LabelMap, IGNORE_LABEL};
use crate::error::{Error, Result};

/// `K x K` counts; rows are ground truth, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Counts every pixel whose ground truth is not the ignore label.
    pub fn update(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
            return Err(Error::Shape(format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.height(),
                pred.width(),
                gt.height(),
                gt.width()
            )));
        }
        let k = self.classes;
        let mut delta = vec![0u64; k * k];
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            if g == IGNORE_LABEL {
                continue;
            }
            if g as usize >= k || p as usize >= k {
                return Err(Error::InvalidArgument(format!(
                    "class pair ({g}, {p}) out of range for {k} classes"
                )));
            }
            delta[g as usize * k + p as usize] += 1;
        }
        for (c, d) in self.counts.iter_mut().zip(delta) {
            *c += d;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::Shape("confusion matrices differ in class count".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// IoU per class; `None` where the class is absent from both ground
    /// truth and prediction.
    pub fn iou_per_class(&self) -> Vec<Option<f64>> {
        let k = self.classes;
        (0..k)
            .map(|c| {
                let tp = self.get(c, c);
                let fn_: u64 = (0..k).map(|p| self.get(c, p)).sum::<u64>() - tp;
                let fp: u64 = (0..k).map(|g| self.get(g, c)).sum::<u64>() - tp;
                let union = tp + fp + fn_;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    /// Mean over the classes present in ground truth or prediction.
    pub fn miou(&self) -> Result<f64> {
        let ious: Vec<f64> = self.iou_per_class().into_iter().flatten().collect();
        if ious.is_empty() {
            return Err(Error::InvalidArgument("mIoU undefined: no class present".into()));
        }
        Ok(ious.iter().sum::<f64>() / ious.len() as f64)
    }

    pub fn report(&self, names: &[String]) -> Result<MiouReport> {
        let miou = self.miou()?;
        let per_class = self
            .iou_per_class()
            .into_iter()
            .enumerate()
            .filter_map(|(c, iou)| {
                let name = names.get(c).cloned().unwrap_or_else(|| format!("class_{c}"));
                iou.map(|v| (name, v))
            })
            .collect();
        Ok(MiouReport {
            per_class,
            miou,
            pixels_evaluated: self.total(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiouReport {
    pub per_class: BTreeMap<String, f64>,
    pub miou: f64,
    pub pixels_evaluated: u64,
}
