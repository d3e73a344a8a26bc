//! Confusion-matrix metrics (mIoU, frequency-weighted IoU) and windowed
//! video consistency.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use log::warn;

use crate::error::{Error, Result};
use crate::synthdata::{Clip, LabelMap, IGNORE};

/// Rows are ground truth, columns are predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    fn row(&self, c: usize) -> u64 {
        self.counts[c * self.num_classes..(c + 1) * self.num_classes]
            .iter()
            .sum()
    }

    fn col(&self, c: usize) -> u64 {
        (0..self.num_classes).map(|r| self.get(r, c)).sum()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    /// IoU per class; `None` where the class is absent from both GT and
    /// predictions.
    pub fn class_ious(&self) -> Vec<Option<f64>> {
        (0..self.num_classes)
            .map(|c| {
                let tp = self.get(c, c);
                let denom = self.row(c) + self.col(c) - tp;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect()
    }
}

/// Counts every pixel whose ground truth is not `IGNORE`.
pub fn accumulate_confusion(gt: &LabelMap, pred: &LabelMap, cm: &mut ConfusionMatrix) -> Result<()> {
    if (gt.height(), gt.width()) != (pred.height(), pred.width()) {
        return Err(Error::Validation(format!(
            "ground truth {}x{} vs prediction {}x{}",
            gt.height(),
            gt.width(),
            pred.height(),
            pred.width()
        )));
    }
    let c = cm.num_classes;
    if pred.labels().iter().any(|&v| v == IGNORE) {
        return Err(Error::Validation("prediction contains the ignore label".into()));
    }
    if let Some(v) = pred
        .labels()
        .iter()
        .chain(gt.labels())
        .find(|&&v| v != IGNORE && v as usize >= c)
    {
        return Err(Error::Validation(format!("class {v} outside confusion matrix")));
    }
    for (&g, &p) in gt.labels().iter().zip(pred.labels()) {
        if g != IGNORE {
            cm.counts[g as usize * c + p as usize] += 1;
        }
    }
    Ok(())
}

fn require_nonempty(cm: &ConfusionMatrix) -> Result<()> {
    if cm.total() == 0 {
        Err(Error::UndefinedMetric("confusion matrix is empty".into()))
    } else {
        Ok(())
    }
}

/// Mean IoU over classes present in GT ∪ prediction, plus per-class IoUs.
pub fn miou(cm: &ConfusionMatrix) -> Result<(f64, Vec<Option<f64>>)> {
    require_nonempty(cm)?;
    let per_class = cm.class_ious();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean = present.iter().sum::<f64>() / present.len() as f64;
    Ok((mean, per_class))
}

/// IoU weighted by ground-truth class frequency.
pub fn weighted_iou(cm: &ConfusionMatrix) -> Result<f64> {
    require_nonempty(cm)?;
    let total = cm.total() as f64;
    Ok(cm
        .class_ious()
        .iter()
        .enumerate()
        .map(|(c, iou)| cm.row(c) as f64 / total * iou.unwrap_or(0.0))
        .sum())
}

/// Mean over windows of `n` consecutive frames of the fraction of
/// GT-constant pixels predicted correctly throughout the window. `None`
/// when the clip is shorter than `n` or no window has a GT-constant pixel.
pub fn video_consistency(gt_clip: &[LabelMap], pred_clip: &[LabelMap], n: usize) -> Result<Option<f64>> {
    if gt_clip.len() != pred_clip.len() {
        return Err(Error::Validation(format!(
            "{} ground-truth frames vs {} predictions",
            gt_clip.len(),
            pred_clip.len()
        )));
    }
    if n == 0 {
        return Err(Error::Parameter("window length must be positive".into()));
    }
    if gt_clip.len() < n {
        warn!(
            "clip of {} frames shorter than window {n}; excluded",
            gt_clip.len()
        );
        return Ok(None);
    }
    let pixels = gt_clip[0].labels().len();
    for (g, p) in gt_clip.iter().zip(pred_clip) {
        if g.labels().len() != pixels || p.labels().len() != pixels {
            return Err(Error::Validation("inconsistent frame sizes in clip".into()));
        }
    }
    let mut sum = 0.0;
    let mut windows = 0usize;
    for start in 0..=gt_clip.len() - n {
        let window = start..start + n;
        let mut stable = 0u64;
        let mut correct = 0u64;
        for p in 0..pixels {
            let g0 = gt_clip[start].labels()[p];
            if g0 == IGNORE || gt_clip[window.clone()].iter().any(|g| g.labels()[p] != g0) {
                continue;
            }
            stable += 1;
            if pred_clip[window.clone()].iter().all(|f| f.labels()[p] == g0) {
                correct += 1;
            }
        }
        if stable > 0 {
            sum += correct as f64 / stable as f64;
            windows += 1;
        }
    }
    Ok((windows > 0).then(|| sum / windows as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub miou: f64,
    pub weighted_iou: f64,
    /// `(n, VC_n)`; `None` when no clip was long enough.
    pub vc: Vec<(usize, Option<f64>)>,
    pub per_class_iou: Vec<Option<f64>>,
}

impl MetricReport {
    pub fn vc(&self, n: usize) -> Option<f64> {
        self.vc.iter().find(|(k, _)| *k == n).and_then(|(_, v)| *v)
    }

    /// `metric,value` rows followed by per-class IoU rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        let _ = writeln!(s, "miou,{}", self.miou);
        let _ = writeln!(s, "weighted_iou,{}", self.weighted_iou);
        for (n, v) in &self.vc {
            let _ = writeln!(s, "vc{n},{}", fmt_opt(*v));
        }
        for (c, v) in self.per_class_iou.iter().enumerate() {
            let _ = writeln!(s, "iou_class_{c},{}", fmt_opt(*v));
        }
        s
    }
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), |x| x.to_string())
}

/// Predictions keyed by `(clip_id, frame index)`.
pub type Predictions = BTreeMap<(String, usize), LabelMap>;

/// Confusion-based metrics over all frames; VC averaged uniformly over clips.
pub fn evaluate(clips: &[Clip], predictions: &Predictions, vc_windows: &[usize]) -> Result<MetricReport> {
    let num_classes = clips
        .first()
        .and_then(|c| c.labels.as_ref())
        .and_then(|l| l.first())
        .map(|l| l.num_classes() as usize)
        .ok_or_else(|| Error::Evaluation("no labeled ground truth".into()))?;
    let mut cm = ConfusionMatrix::new(num_classes);
    let mut vc_sums = vec![(0.0, 0usize); vc_windows.len()];
    for clip in clips {
        let gt = clip
            .labels
            .as_ref()
            .ok_or_else(|| Error::Evaluation(format!("clip {} has no ground truth", clip.clip_id)))?;
        let preds = (0..gt.len())
            .map(|k| {
                predictions
                    .get(&(clip.clip_id.clone(), k))
                    .cloned()
                    .ok_or_else(|| {
                        Error::Evaluation(format!("missing prediction for {} frame {k}", clip.clip_id))
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        for (g, p) in gt.iter().zip(&preds) {
            accumulate_confusion(g, p, &mut cm)?;
        }
        for (slot, &n) in vc_sums.iter_mut().zip(vc_windows) {
            if let Some(v) = video_consistency(gt, &preds, n)? {
                slot.0 += v;
                slot.1 += 1;
            }
        }
    }
    let (m, per_class) = miou(&cm)?;
    Ok(MetricReport {
        miou: m,
        weighted_iou: weighted_iou(&cm)?,
        vc: vc_windows
            .iter()
            .zip(vc_sums)
            .map(|(&n, (s, k))| (n, (k > 0).then(|| s / k as f64)))
            .collect(),
        per_class_iou: per_class,
    })
}
