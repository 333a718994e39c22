use rand::seq::index;
use rand::Rng;

use super::bbox::{encode, iou, Annotation, BBox, ROI_DELTA_WEIGHTS, RPN_DELTA_WEIGHTS};
use super::model::{BackboneOut, DetectorModel, DetectorVars, RoiOut, RpnOut};
use super::proposals::{delta_index, generate_anchors};
use super::DetectorConfig;
use crate::error::Result;
use crate::tensor::{Graph, Tensor, Var};

/// Supervised loss terms, as values.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub rpn_loss: f64,
    pub reg_loss: f64,
    pub cls_loss: f64,
    pub total: f64,
}

/// Supervised loss terms, as graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub rpn: Var,
    pub reg: Var,
    pub cls: Var,
    pub total: Var,
}

impl LossVars {
    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        LossBreakdown {
            rpn_loss: g.value(self.rpn).item(),
            reg_loss: g.value(self.reg).item(),
            cls_loss: g.value(self.cls).item(),
            total: g.value(self.total).item(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnchorLabel {
    /// Matched to the ground truth at this index.
    Positive(usize),
    Negative,
    Ignore,
}

/// Anchors with IoU >= `pos_iou` against some ground truth are positive, the
/// best anchor(s) of every ground truth are positive as well, anchors whose
/// best IoU is <= `neg_iou` are negative, and the rest are ignored.
pub fn label_anchors(
    anchors: &[BBox],
    gts: &[Annotation],
    pos_iou: f64,
    neg_iou: f64,
) -> Vec<AnchorLabel> {
    let ious: Vec<Vec<f64>> = anchors
        .iter()
        .map(|a| gts.iter().map(|gt| iou(a, &gt.bbox)).collect())
        .collect();
    let best_gt = |row: &[f64]| {
        row.iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (j, &v)| if v > acc.1 { (j, v) } else { acc })
    };
    let mut labels: Vec<AnchorLabel> = ious
        .iter()
        .map(|row| {
            if row.is_empty() {
                return AnchorLabel::Negative;
            }
            let (j, v) = best_gt(row);
            if v >= pos_iou {
                AnchorLabel::Positive(j)
            } else if v <= neg_iou {
                AnchorLabel::Negative
            } else {
                AnchorLabel::Ignore
            }
        })
        .collect();
    for g in 0..gts.len() {
        let best = ious.iter().map(|row| row[g]).fold(0.0, f64::max);
        if best <= 0.0 {
            continue;
        }
        for (i, row) in ious.iter().enumerate() {
            if row[g] == best {
                labels[i] = AnchorLabel::Positive(best_gt(row).0);
            }
        }
    }
    labels
}

fn sample_subset(pool: Vec<usize>, k: usize, rng: &mut impl Rng) -> Vec<usize> {
    if pool.len() <= k {
        return pool;
    }
    let mut picked: Vec<usize> = index::sample(rng, pool.len(), k)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    picked.sort_unstable();
    picked
}

fn zero(g: &mut Graph) -> Var {
    g.constant(Tensor::scalar(0.0))
}

/// RPN loss: mean binary cross-entropy over a sampled anchor minibatch plus
/// smooth-L1 on positive-anchor deltas normalised by the minibatch size.
#[allow(clippy::too_many_arguments)]
pub fn rpn_loss(
    g: &mut Graph,
    objectness: Var,
    deltas: Var,
    anchors: &[BBox],
    locations: usize,
    gts: &[Annotation],
    config: &DetectorConfig,
    rng: &mut impl Rng,
) -> Result<Var> {
    let labels = label_anchors(anchors, gts, config.rpn_pos_iou, config.rpn_neg_iou);
    let positives: Vec<usize> = (0..labels.len())
        .filter(|&i| matches!(labels[i], AnchorLabel::Positive(_)))
        .collect();
    let negatives: Vec<usize> = (0..labels.len())
        .filter(|&i| labels[i] == AnchorLabel::Negative)
        .collect();
    let positives = sample_subset(positives, config.rpn_batch / 2, rng);
    let negatives = sample_subset(negatives, config.rpn_batch - positives.len(), rng);
    let sampled = positives.len() + negatives.len();
    if sampled == 0 {
        return Ok(zero(g));
    }
    let mut picked = positives.clone();
    picked.extend(&negatives);
    let mut targets = vec![1.0; positives.len()];
    targets.resize(sampled, 0.0);
    let p = g.gather(objectness, &picked)?;
    let bce = g.binary_cross_entropy(p, &targets)?;
    let cls = g.mean(bce);
    if positives.is_empty() {
        return Ok(cls);
    }
    let mut idx = Vec::with_capacity(4 * positives.len());
    let mut target_deltas = Vec::with_capacity(4 * positives.len());
    for &i in &positives {
        let AnchorLabel::Positive(gt) = labels[i] else { unreachable!() };
        let t = encode(&anchors[i], &gts[gt].bbox, RPN_DELTA_WEIGHTS);
        for (j, tv) in t.into_iter().enumerate() {
            idx.push(delta_index(i, j, locations));
            target_deltas.push(tv);
        }
    }
    let pred = g.gather(deltas, &idx)?;
    let tgt = g.constant(Tensor::from_vec(target_deltas));
    let diff = g.sub(pred, tgt)?;
    let sl1 = g.smooth_l1(diff);
    let reg = g.sum(sl1);
    let reg = g.scale(reg, 1.0 / sampled as f64);
    g.add(cls, reg)
}

/// Sampled RoIs with classification labels (`0` = background, `k + 1` =
/// category `k`) and regression targets for the foreground ones.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RoiTargets {
    pub rois: Vec<BBox>,
    pub labels: Vec<usize>,
    pub deltas: Vec<[f64; 4]>,
}

/// Labels proposals (plus the ground-truth boxes themselves) by IoU and
/// samples at most `roi_batch` of them, at most `roi_fg_fraction`
/// foreground.
pub fn sample_rois(
    proposals: &[BBox],
    gts: &[Annotation],
    config: &DetectorConfig,
    rng: &mut impl Rng,
) -> RoiTargets {
    let candidates: Vec<BBox> = proposals
        .iter()
        .copied()
        .chain(gts.iter().map(|gt| gt.bbox))
        .collect();
    let mut matched = Vec::with_capacity(candidates.len());
    for c in &candidates {
        let best = gts
            .iter()
            .enumerate()
            .map(|(j, gt)| (j, iou(c, &gt.bbox)))
            .fold(None, |acc: Option<(usize, f64)>, (j, v)| match acc {
                Some((_, bv)) if bv >= v => acc,
                _ => Some((j, v)),
            });
        matched.push(best.filter(|&(_, v)| v >= config.roi_fg_iou).map(|(j, _)| j));
    }
    let fg: Vec<usize> = (0..candidates.len()).filter(|&i| matched[i].is_some()).collect();
    let bg: Vec<usize> = (0..candidates.len()).filter(|&i| matched[i].is_none()).collect();
    let fg_cap = (config.roi_batch as f64 * config.roi_fg_fraction).round() as usize;
    let fg = sample_subset(fg, fg_cap, rng);
    let bg = sample_subset(bg, config.roi_batch - fg.len(), rng);
    let mut t = RoiTargets::default();
    for &i in &fg {
        let gt = &gts[matched[i].expect("foreground")];
        t.rois.push(candidates[i]);
        t.labels.push(gt.category + 1);
        t.deltas.push(encode(&candidates[i], &gt.bbox, ROI_DELTA_WEIGHTS));
    }
    for &i in &bg {
        t.rois.push(candidates[i]);
        t.labels.push(0);
        t.deltas.push([0.0; 4]);
    }
    t
}

/// Classification cross-entropy (mean over sampled RoIs) and class-specific
/// smooth-L1 regression on foreground RoIs normalised by the sample count.
pub fn roi_losses(g: &mut Graph, head: &RoiOut, targets: &RoiTargets) -> Result<(Var, Var)> {
    let n = targets.labels.len();
    if n == 0 {
        return Ok((zero(g), zero(g)));
    }
    let ce = g.cross_entropy(head.logits, &targets.labels)?;
    let cls = g.mean(ce);
    let width = g.shape(head.box_deltas)[1];
    let mut idx = Vec::new();
    let mut tgt = Vec::new();
    for (r, (&label, d)) in targets.labels.iter().zip(&targets.deltas).enumerate() {
        if label == 0 {
            continue;
        }
        for (j, &v) in d.iter().enumerate() {
            idx.push(r * width + 4 * label + j);
            tgt.push(v);
        }
    }
    if idx.is_empty() {
        return Ok((zero(g), cls));
    }
    let pred = g.gather(head.box_deltas, &idx)?;
    let tgt = g.constant(Tensor::from_vec(tgt));
    let diff = g.sub(pred, tgt)?;
    let sl1 = g.smooth_l1(diff);
    let reg = g.sum(sl1);
    Ok((g.scale(reg, 1.0 / n as f64), cls))
}

/// Supervised detection loss `rpn + reg + cls` on one labelled image whose
/// backbone and RPN outputs are already in `g`. Proposals are taken from the
/// current RPN values and carry no gradient.
#[allow(clippy::too_many_arguments)]
pub fn detection_loss(
    g: &mut Graph,
    model: &DetectorModel,
    vars: &DetectorVars,
    feats: &BackboneOut,
    rpn: &RpnOut,
    gts: &[Annotation],
    image_size: (f64, f64),
    rng: &mut impl Rng,
) -> Result<LossVars> {
    let proposals: Vec<BBox> = model
        .proposals(g, rpn, image_size)?
        .into_iter()
        .map(|p| p.0)
        .collect();
    detection_loss_with_proposals(g, model, vars, feats, rpn, &proposals, gts, rng)
}

/// [`detection_loss`] over a caller-supplied proposal set.
#[allow(clippy::too_many_arguments)]
pub fn detection_loss_with_proposals(
    g: &mut Graph,
    model: &DetectorModel,
    vars: &DetectorVars,
    feats: &BackboneOut,
    rpn: &RpnOut,
    proposals: &[BBox],
    gts: &[Annotation],
    rng: &mut impl Rng,
) -> Result<LossVars> {
    let cfg = model.config();
    let shape = g.shape(rpn.objectness).to_vec();
    let (hf, wf) = (shape[2], shape[3]);
    let anchors = generate_anchors(hf, wf, &cfg.anchor_sizes);
    let rpn_term = rpn_loss(
        g,
        rpn.objectness,
        rpn.deltas,
        &anchors,
        hf * wf,
        gts,
        cfg,
        rng,
    )?;
    let targets = sample_rois(proposals, gts, cfg, rng);
    let head = model.roi_head_forward(g, vars, feats.top(), &targets.rois)?;
    let (reg, cls) = roi_losses(g, &head, &targets)?;
    let partial = g.add(rpn_term, reg)?;
    let total = g.add(partial, cls)?;
    Ok(LossVars {
        rpn: rpn_term,
        reg,
        cls,
        total,
    })
}
