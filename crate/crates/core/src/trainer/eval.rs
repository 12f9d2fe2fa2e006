use rayon::prelude::*;

use crate::data::Scene;
use crate::error::{Error, Result};
use crate::grid::{LabelMask, IGNORE};
use crate::kernels::GridImage;
use crate::model::{forward, ParamSet};

/// Class confusion counts, indexed `[truth][prediction]`.
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

    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    /// Accumulates a prediction against ground truth; ignored truth pixels are skipped.
    pub fn add(&mut self, truth: &LabelMask, pred: &LabelMask) -> Result<()> {
        if truth.shape() != pred.shape() {
            return Err(Error::mismatch(truth.shape(), pred.shape()));
        }
        truth.check_classes(self.classes)?;
        pred.check_classes(self.classes)?;
        for (&t, &p) in truth.labels().iter().zip(pred.labels()) {
            if t == IGNORE || p == IGNORE {
                continue;
            }
            self.counts[t as usize * self.classes + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    /// `TP / (TP + FP + FN)`, or `None` for a class absent from both truth and prediction.
    pub fn iou(&self, class: usize) -> Option<f64> {
        let tp = self.count(class, class);
        let fn_: u64 = (0..self.classes).map(|p| self.count(class, p)).sum::<u64>() - tp;
        let fp: u64 = (0..self.classes).map(|t| self.count(t, class)).sum::<u64>() - tp;
        let union = tp + fp + fn_;
        (union > 0).then(|| tp as f64 / union as f64)
    }

    /// Unweighted mean IoU over the classes that occur at all.
    pub fn mean_iou(&self) -> f64 {
        let present: Vec<f64> = (0..self.classes).filter_map(|c| self.iou(c)).collect();
        if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        }
    }

    pub fn pixel_accuracy(&self) -> f64 {
        let total: u64 = self.counts.iter().sum();
        let hits: u64 = (0..self.classes).map(|c| self.count(c, c)).sum();
        if total == 0 {
            0.0
        } else {
            hits as f64 / total as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
    pub pixel_accuracy: f64,
    pub confusion: ConfusionMatrix,
}

impl EvalReport {
    pub fn from_confusion(confusion: ConfusionMatrix) -> Self {
        EvalReport {
            per_class: (0..confusion.classes()).map(|c| confusion.iou(c)).collect(),
            miou: confusion.mean_iou(),
            pixel_accuracy: confusion.pixel_accuracy(),
            confusion,
        }
    }

    /// Two-column CSV: one `iou_<class>` row per class (empty when absent), then `miou`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        for (c, iou) in self.per_class.iter().enumerate() {
            match iou {
                Some(v) => out.push_str(&format!("iou_{c},{v:.6}\n")),
                None => out.push_str(&format!("iou_{c},\n")),
            }
        }
        out.push_str(&format!("pixel_accuracy,{:.6}\n", self.pixel_accuracy));
        out.push_str(&format!("miou,{:.6}\n", self.miou));
        out
    }
}

/// Per-pixel argmax of the segmentation head.
pub fn predict(image: &GridImage, params: &ParamSet) -> Result<LabelMask> {
    let out = forward(image, params)?;
    let shape = image.shape();
    let labels = (0..shape.len()).map(|i| out.probs.argmax(i).0 as u8).collect();
    LabelMask::new(shape, labels)
}

/// Scores predictions against the dense masks of `scenes`.
pub fn evaluate(params: &ParamSet, scenes: &[Scene]) -> Result<EvalReport> {
    if scenes.is_empty() {
        return Err(Error::InvalidParam("evaluation needs at least one scene".into()));
    }
    let classes = params.dims().classes;
    let parts: Vec<ConfusionMatrix> = scenes
        .par_iter()
        .map(|s| {
            let mut cm = ConfusionMatrix::new(classes);
            cm.add(&s.dense, &predict(&s.image, params)?)?;
            Ok(cm)
        })
        .collect::<Result<_>>()?;
    let mut total = ConfusionMatrix::new(classes);
    for p in &parts {
        total.merge(p);
    }
    Ok(EvalReport::from_confusion(total))
}
