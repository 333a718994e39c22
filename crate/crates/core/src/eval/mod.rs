//! mAP, proxy A-distance, error profiles and attention export.

mod adistance;
mod errors;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::art::compute_attention;
use crate::config::EvalConfig;
use crate::detector::{detect, iou, Annotation, Detection, DetectorModel};
use crate::domains::write_pgm;
use crate::domains::Sample;
use crate::error::{Error, Result};
use crate::tensor::{bilinear_upsample, Graph, Tensor};

pub use adistance::{class_features, proxy_a_distance, DomainDistance};
pub use errors::{error_analysis, write_errors_csv, ErrorProfile};

/// Average precision of one class.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassAp {
    /// `None` when the class has no ground truth.
    pub ap: Option<f64>,
    pub gt_count: usize,
    pub det_count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub classes: Vec<ClassAp>,
    pub map: f64,
    /// mAP minus a baseline's mAP, when one was supplied.
    pub gain: Option<f64>,
}

/// Area under the all-point interpolated precision/recall curve of a
/// ranked list of true/false positives: the mean, over ground truths, of the
/// best precision reached at or beyond the recall where each is found.
pub fn all_point_ap(ranked_tp: &[bool], gt_count: usize) -> f64 {
    if gt_count == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(ranked_tp.len());
    let mut tp = 0usize;
    for (i, &hit) in ranked_tp.iter().enumerate() {
        tp += hit as usize;
        precision.push(tp as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let sum: f64 = ranked_tp
        .iter()
        .zip(&precision)
        .filter(|(&hit, _)| hit)
        .map(|(_, &p)| p)
        .sum();
    sum / gt_count as f64
}

/// Ranks every detection of `class` across images and marks each as a true
/// positive when its best still-unmatched same-class ground truth in the
/// same image overlaps by at least `iou_thresh`.
fn ranked_matches(
    detections: &[Vec<Detection>],
    ground_truths: &[Vec<Annotation>],
    class: usize,
    iou_thresh: f64,
) -> Vec<bool> {
    let mut dets: Vec<(usize, &Detection)> = detections
        .iter()
        .enumerate()
        .flat_map(|(i, ds)| ds.iter().filter(|d| d.category == class).map(move |d| (i, d)))
        .collect();
    dets.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
    let mut used: Vec<Vec<bool>> = ground_truths.iter().map(|g| vec![false; g.len()]).collect();
    dets.iter()
        .map(|&(img, d)| {
            let best = ground_truths[img]
                .iter()
                .enumerate()
                .filter(|&(j, g)| g.category == class && !used[img][j])
                .map(|(j, g)| (j, iou(&d.bbox, &g.bbox)))
                .max_by(|a, b| a.1.total_cmp(&b.1));
            match best {
                Some((j, o)) if o >= iou_thresh => {
                    used[img][j] = true;
                    true
                }
                _ => false,
            }
        })
        .collect()
}

/// Per-class VOC-style AP over aligned per-image detections and ground
/// truths; mAP averages the classes that have ground truth.
pub fn average_precision(
    detections: &[Vec<Detection>],
    ground_truths: &[Vec<Annotation>],
    classes: usize,
    iou_thresh: f64,
) -> Result<EvalReport> {
    if detections.len() != ground_truths.len() {
        return Err(Error::invalid(format!(
            "{} detection lists for {} images",
            detections.len(),
            ground_truths.len()
        )));
    }
    let mut per_class = Vec::with_capacity(classes);
    for c in 0..classes {
        let gt_count = ground_truths.iter().flatten().filter(|a| a.category == c).count();
        let tp = ranked_matches(detections, ground_truths, c, iou_thresh);
        per_class.push(ClassAp {
            ap: (gt_count > 0).then(|| all_point_ap(&tp, gt_count)),
            gt_count,
            det_count: tp.len(),
        });
    }
    let aps: Vec<f64> = per_class.iter().filter_map(|c| c.ap).collect();
    let map = if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    };
    Ok(EvalReport {
        classes: per_class,
        map,
        gain: None,
    })
}

/// Runs the detector over every sample.
pub fn detect_all(model: &DetectorModel, samples: &[Sample], config: &EvalConfig) -> Result<Vec<Vec<Detection>>> {
    samples
        .iter()
        .map(|s| detect(model, &s.image, config.score_thresh, config.nms_iou))
        .collect()
}

/// mAP of `model` on labelled `samples`.
pub fn evaluate(model: &DetectorModel, samples: &[Sample], config: &EvalConfig) -> Result<EvalReport> {
    let dets = detect_all(model, samples, config)?;
    let gts: Vec<Vec<Annotation>> = samples.iter().map(|s| s.annotations.clone()).collect();
    average_precision(&dets, &gts, model.config().classes, config.iou_thresh)
}

impl EvalReport {
    pub fn with_baseline(mut self, baseline: &EvalReport) -> Self {
        self.gain = Some(self.map - baseline.map);
        self
    }

    /// `class,ap,gt_count,det_count` rows, then `mAP` and optional `gain`.
    /// Classes without ground truth report `undefined`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,ap,gt_count,det_count\n");
        for (c, r) in self.classes.iter().enumerate() {
            let ap = r.ap.map_or("undefined".to_string(), |v| v.to_string());
            writeln!(s, "{c},{ap},{},{}", r.gt_count, r.det_count).expect("string write");
        }
        writeln!(s, "mAP,{}", self.map).expect("string write");
        if let Some(g) = self.gain {
            writeln!(s, "gain,{g}").expect("string write");
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Attention map of `image` up-sampled to the image size.
pub fn attention_image(model: &DetectorModel, image: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let vars = model.bind(&mut g, false);
    let feats = model.backbone_forward(&mut g, &vars, image)?;
    let rpn = model.rpn_forward(&mut g, &vars, feats.top())?;
    let att = compute_attention(g.value(rpn.f_rpn))?;
    bilinear_upsample(&att.filtered, image.shape()[1], image.shape()[2])
}

/// Up-samples a `[H, W]` attention map to `height x width` and writes it as
/// an 8-bit PGM with `[0, 1]` mapped linearly onto `[0, 255]`.
pub fn write_attention_pgm(attention: &Tensor, height: usize, width: usize, path: &Path) -> Result<()> {
    write_pgm(path, &bilinear_upsample(attention, height, width)?)
}

/// Writes the attention map of `image` as an 8-bit PGM.
pub fn export_attention(model: &DetectorModel, image: &Tensor, out_path: &Path) -> Result<()> {
    write_pgm(out_path, &attention_image(model, image)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_point_ap_by_hand() {
        assert_eq!(all_point_ap(&[true], 1), 1.0);
        assert_eq!(all_point_ap(&[false, true], 1), 0.5);
        assert_eq!(all_point_ap(&[true, false], 1), 1.0);
        assert_eq!(all_point_ap(&[], 2), 0.0);
        // recall 0.5 at precision 1, recall 1 at precision 2/3
        assert!((all_point_ap(&[true, false, true], 2) - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-15);
    }
}
