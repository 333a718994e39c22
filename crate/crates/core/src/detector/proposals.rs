use super::bbox::{decode, BBox, ROI_DELTA_WEIGHTS, RPN_DELTA_WEIGHTS};
use super::model::{DetectorModel, RpnOut};
use super::nms::nms;
use super::FEATURE_STRIDE;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub category: usize,
    pub score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProposalParams {
    pub pre_nms_k: usize,
    pub post_nms_k: usize,
    pub nms_iou: f64,
}

/// Square anchors of every size centred on each feature cell. Anchor
/// `a * Hf * Wf + y * Wf + x` pairs with objectness channel `a` at `(y, x)`.
pub fn generate_anchors(hf: usize, wf: usize, sizes: &[f64]) -> Vec<BBox> {
    let stride = FEATURE_STRIDE as f64;
    let mut anchors = Vec::with_capacity(sizes.len() * hf * wf);
    for &s in sizes {
        for y in 0..hf {
            for x in 0..wf {
                let cx = (x as f64 + 0.5) * stride;
                let cy = (y as f64 + 0.5) * stride;
                anchors.push(BBox::from_center(cx, cy, s, s));
            }
        }
    }
    anchors
}

/// Flat offset of delta component `j` of anchor `anchor` in a
/// `[1, 4A, Hf, Wf]` delta map with `locations = Hf * Wf`.
pub(crate) fn delta_index(anchor: usize, j: usize, locations: usize) -> usize {
    let (a, p) = (anchor / locations, anchor % locations);
    (a * 4 + j) * locations + p
}

/// Decodes RPN deltas onto anchors, clips to the image, keeps the top
/// `pre_nms_k` by objectness, applies greedy NMS and returns at most
/// `post_nms_k` boxes with their objectness, best first.
pub fn generate_proposals(
    objectness: &[f64],
    deltas: &[f64],
    anchors: &[BBox],
    locations: usize,
    params: ProposalParams,
    image_size: (f64, f64),
) -> Result<Vec<(BBox, f64)>> {
    if !(params.nms_iou > 0.0 && params.nms_iou < 1.0) {
        return Err(Error::invalid(format!(
            "proposal nms_iou must lie in (0, 1), got {}",
            params.nms_iou
        )));
    }
    if anchors.is_empty() {
        return Ok(Vec::new());
    }
    if objectness.len() != anchors.len() || deltas.len() != 4 * anchors.len() {
        return Err(Error::shape(format!(
            "{} anchors but {} objectness and {} delta values",
            anchors.len(),
            objectness.len(),
            deltas.len()
        )));
    }
    let mut candidates: Vec<(BBox, f64)> = anchors
        .iter()
        .enumerate()
        .filter_map(|(i, anchor)| {
            let d = [0, 1, 2, 3].map(|j| deltas[delta_index(i, j, locations)]);
            decode(anchor, d, RPN_DELTA_WEIGHTS)
                .clip(image_size.0, image_size.1)
                .map(|b| (b, objectness[i]))
        })
        .collect();
    candidates.sort_by(|a, b| b.1.total_cmp(&a.1));
    candidates.truncate(params.pre_nms_k);
    let boxes: Vec<BBox> = candidates.iter().map(|c| c.0).collect();
    let scores: Vec<f64> = candidates.iter().map(|c| c.1).collect();
    let mut keep = nms(&boxes, &scores, params.nms_iou);
    keep.truncate(params.post_nms_k);
    Ok(keep.into_iter().map(|i| candidates[i]).collect())
}

impl DetectorModel {
    pub fn proposal_params(&self) -> ProposalParams {
        ProposalParams {
            pre_nms_k: self.config().pre_nms_k,
            post_nms_k: self.config().post_nms_k,
            nms_iou: self.config().rpn_nms_iou,
        }
    }

    /// Proposals from the current values of an RPN forward pass.
    pub fn proposals(&self, g: &Graph, rpn: &RpnOut, image_size: (f64, f64)) -> Result<Vec<(BBox, f64)>> {
        let shape = g.shape(rpn.objectness);
        let (hf, wf) = (shape[2], shape[3]);
        let anchors = generate_anchors(hf, wf, &self.config().anchor_sizes);
        generate_proposals(
            g.value(rpn.objectness).data(),
            g.value(rpn.deltas).data(),
            &anchors,
            hf * wf,
            self.proposal_params(),
            image_size,
        )
    }
}

/// Full inference: backbone, RPN, proposals, RoI head and per-class NMS.
/// Detections scoring below `score_thresh` are dropped.
pub fn detect(
    model: &DetectorModel,
    image: &Tensor,
    score_thresh: f64,
    nms_iou: f64,
) -> Result<Vec<Detection>> {
    let (h, w) = (image.shape()[1] as f64, image.shape()[2] as f64);
    let mut g = Graph::new();
    let vars = model.bind(&mut g, false);
    let feats = model.backbone_forward(&mut g, &vars, image)?;
    let rpn = model.rpn_forward(&mut g, &vars, feats.top())?;
    let rois: Vec<BBox> = model
        .proposals(&g, &rpn, (w, h))?
        .into_iter()
        .map(|p| p.0)
        .collect();
    let head = model.roi_head_forward(&mut g, &vars, feats.top(), &rois)?;
    let scores = g.value(head.scores);
    let deltas = g.value(head.box_deltas);
    let classes = model.config().classes;
    let mut detections = Vec::new();
    for c in 1..=classes {
        let mut boxes = Vec::new();
        let mut class_scores = Vec::new();
        for (r, roi) in rois.iter().enumerate() {
            let s = scores.at(&[r, c]);
            if s < score_thresh {
                continue;
            }
            let d = [0, 1, 2, 3].map(|j| deltas.at(&[r, 4 * c + j]));
            if let Some(b) = decode(roi, d, ROI_DELTA_WEIGHTS).clip(w, h) {
                boxes.push(b);
                class_scores.push(s);
            }
        }
        for k in nms(&boxes, &class_scores, nms_iou) {
            detections.push(Detection {
                bbox: boxes[k],
                category: c - 1,
                score: class_scores[k],
            });
        }
    }
    detections.sort_by(|a, b| b.score.total_cmp(&a.score));
    Ok(detections)
}
