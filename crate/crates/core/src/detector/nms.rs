use super::bbox::{iou, BBox};

/// Greedy non-maximum suppression. Returns indices of kept boxes ordered by
/// descending score; a box is suppressed when its IoU with an already kept
/// box exceeds `iou_thresh`. Equal scores keep input order.
pub fn nms(boxes: &[BBox], scores: &[f64], iou_thresh: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep.iter().all(|&k| iou(&boxes[k], &boxes[i]) <= iou_thresh) {
            keep.push(i);
        }
    }
    keep
}
