use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{LabelMap, IGNORE};

/// Accumulated `truth × prediction` pixel counts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    /// Row-major: `counts[truth * C + pred]`.
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn add(&mut self, pred: &LabelMap, truth: &LabelMap) -> Result<()> {
        if (pred.height(), pred.width()) != (truth.height(), truth.width()) {
            return Err(Error::shape(
                format!("{}x{}", truth.height(), truth.width()),
                format!("{}x{}", pred.height(), pred.width()),
            ));
        }
        let c = self.num_classes;
        for (&p, &t) in pred.data().iter().zip(truth.data()) {
            if t == IGNORE || p == IGNORE || t as usize >= c || p as usize >= c {
                continue;
            }
            self.counts[t as usize * c + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    /// IoU per class; `None` when the class is absent from both predictions
    /// and ground truth.
    pub fn iou(&self) -> Vec<Option<f64>> {
        let c = self.num_classes;
        (0..c)
            .map(|k| {
                let tp = self.counts[k * c + k];
                let fn_: u64 = (0..c).map(|p| self.counts[k * c + p]).sum::<u64>() - tp;
                let fp: u64 = (0..c).map(|t| self.counts[t * c + k]).sum::<u64>() - tp;
                let denom = tp + fp + fn_;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect()
    }

    pub fn report(&self) -> MiouReport {
        let per_class = self.iou();
        let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
        let mean = if defined.is_empty() {
            0.0
        } else {
            defined.iter().sum::<f64>() / defined.len() as f64
        };
        MiouReport { per_class, mean }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiouReport {
    pub per_class: Vec<Option<f64>>,
    /// Mean over defined classes, in `[0, 1]`.
    pub mean: f64,
}

impl fmt::Display for MiouReport {
    /// Percentages, with `-` for undefined classes.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let header: Vec<String> = (0..self.per_class.len()).map(|k| format!("c{k}")).collect();
        writeln!(f, "{}\tmIoU", header.join("\t"))?;
        let cells: Vec<String> = self
            .per_class
            .iter()
            .map(|v| v.map_or_else(|| "-".to_string(), |x| format!("{:.2}", 100.0 * x)))
            .collect();
        write!(f, "{}\t{:.2}", cells.join("\t"), 100.0 * self.mean)
    }
}

/// mIoU over aligned prediction / truth lists.
pub fn miou(predictions: &[LabelMap], truths: &[LabelMap], num_classes: usize) -> Result<MiouReport> {
    if predictions.len() != truths.len() {
        return Err(Error::shape(
            format!("{} label maps", truths.len()),
            format!("{}", predictions.len()),
        ));
    }
    let mut cm = ConfusionMatrix::new(num_classes);
    for (p, t) in predictions.iter().zip(truths) {
        cm.add(p, t)?;
    }
    Ok(cm.report())
}
