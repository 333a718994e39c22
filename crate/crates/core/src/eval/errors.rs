use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::detector::{iou, Annotation, Detection};
use crate::error::{Error, Result};

/// Share of the top-K detections per class that are correct (IoU >= 0.5),
/// mislocalised (0.3 <= IoU < 0.5) or background (IoU < 0.3), with K the
/// class's ground-truth count.
#[derive(Clone, Debug, PartialEq)]
pub struct ErrorProfile {
    /// `[correct, misloc, background]` percentages; `None` for skipped
    /// classes.
    pub classes: Vec<Option<[f64; 3]>>,
    pub mean: [f64; 3],
}

pub const CORRECT_IOU: f64 = 0.5;
pub const MISLOC_IOU: f64 = 0.3;

fn bin(best_iou: f64) -> usize {
    if best_iou >= CORRECT_IOU {
        0
    } else if best_iou >= MISLOC_IOU {
        1
    } else {
        2
    }
}

pub fn error_analysis(
    detections: &[Vec<Detection>],
    ground_truths: &[Vec<Annotation>],
    classes: usize,
) -> Result<ErrorProfile> {
    if detections.len() != ground_truths.len() {
        return Err(Error::invalid("detections and ground truths cover different images"));
    }
    let mut per_class = Vec::with_capacity(classes);
    for c in 0..classes {
        let k = ground_truths.iter().flatten().filter(|a| a.category == c).count();
        let mut dets: Vec<(usize, &Detection)> = detections
            .iter()
            .enumerate()
            .flat_map(|(i, ds)| ds.iter().filter(|d| d.category == c).map(move |d| (i, d)))
            .collect();
        dets.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
        dets.truncate(k);
        if k == 0 || dets.is_empty() {
            log::debug!("error profile skips class {c}: {k} ground truths, {} detections", dets.len());
            per_class.push(None);
            continue;
        }
        let mut counts = [0usize; 3];
        for (img, d) in &dets {
            let best = ground_truths[*img]
                .iter()
                .filter(|g| g.category == c)
                .map(|g| iou(&d.bbox, &g.bbox))
                .fold(0.0, f64::max);
            counts[bin(best)] += 1;
        }
        let n = dets.len() as f64;
        per_class.push(Some(counts.map(|x| 100.0 * x as f64 / n)));
    }
    let present: Vec<[f64; 3]> = per_class.iter().flatten().copied().collect();
    let mut mean = [0.0; 3];
    if !present.is_empty() {
        for p in &present {
            for (m, v) in mean.iter_mut().zip(p) {
                *m += v / present.len() as f64;
            }
        }
    }
    Ok(ErrorProfile {
        classes: per_class,
        mean,
    })
}

impl ErrorProfile {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,correct_pct,misloc_pct,background_pct\n");
        for (c, p) in self.classes.iter().enumerate() {
            if let Some([a, b, d]) = p {
                writeln!(s, "{c},{a},{b},{d}").expect("string write");
            }
        }
        let [a, b, d] = self.mean;
        writeln!(s, "mean,{a},{b},{d}").expect("string write");
        s
    }
}

pub fn write_errors_csv(profile: &ErrorProfile, path: &Path) -> Result<()> {
    fs::write(path, profile.to_csv()).map_err(|e| Error::io(path, e))
}
