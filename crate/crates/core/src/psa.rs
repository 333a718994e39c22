//! Class prototypes of RoI features and their cross-domain alignment.

use std::collections::BTreeMap;

use crate::detector::{Annotation, BBox, DetectorModel};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};
use crate::Domain;

/// Vectors with a norm below this are never compared.
pub const MIN_NORM: f64 = 1e-12;

/// Per-class means of the FC2 features present in one batch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LocalPrototypes {
    entries: BTreeMap<usize, LocalEntry>,
}

#[derive(Clone, Debug, PartialEq)]
struct LocalEntry {
    mean: Vec<f64>,
    rows: Vec<usize>,
}

impl LocalPrototypes {
    /// Groups rows of `features` (`[R, D]`) by class and averages each group.
    fn group(features: &Tensor, labels: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let width = features.shape().get(1).copied().unwrap_or(0);
        let mut entries: BTreeMap<usize, LocalEntry> = BTreeMap::new();
        for (row, class) in labels {
            let e = entries.entry(class).or_insert_with(|| LocalEntry {
                mean: vec![0.0; width],
                rows: Vec::new(),
            });
            let f = &features.data()[row * width..(row + 1) * width];
            e.mean.iter_mut().zip(f).for_each(|(m, v)| *m += v);
            e.rows.push(row);
        }
        for e in entries.values_mut() {
            let n = e.rows.len() as f64;
            e.mean.iter_mut().for_each(|m| *m /= n);
        }
        LocalPrototypes { entries }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.keys().copied()
    }

    pub fn get(&self, class: usize) -> Option<&[f64]> {
        self.entries.get(&class).map(|e| e.mean.as_slice())
    }

    pub fn count(&self, class: usize) -> usize {
        self.entries.get(&class).map_or(0, |e| e.rows.len())
    }

    /// Feature rows that contributed to `class`.
    pub fn rows(&self, class: usize) -> &[usize] {
        self.entries.get(&class).map_or(&[], |e| e.rows.as_slice())
    }
}

/// Prototypes from ground-truth regions: row `r` of `features` belongs to
/// category `labels[r]`.
pub fn source_local_prototypes(features: &Tensor, labels: &[usize]) -> Result<LocalPrototypes> {
    let rows = features.shape().first().copied().unwrap_or(0);
    if rows != labels.len() {
        return Err(Error::shape(format!(
            "{rows} feature rows but {} labels",
            labels.len()
        )));
    }
    Ok(LocalPrototypes::group(
        features,
        labels.iter().copied().enumerate(),
    ))
}

/// Pseudo-label of one row of `[R, C + 1]` class scores: the best foreground
/// class if it is the overall argmax and scores at least `thresh`.
pub fn pseudo_label(scores: &[f64], thresh: f64) -> Option<usize> {
    let (best_fg, &fg_score) = scores[1..]
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))?;
    if fg_score < thresh || scores[0] > fg_score {
        return None;
    }
    Some(best_fg)
}

/// Prototypes from pseudo-labelled target RoIs.
pub fn target_local_prototypes(
    features: &Tensor,
    class_scores: &Tensor,
    score_thresh: f64,
) -> Result<LocalPrototypes> {
    let rows = features.shape().first().copied().unwrap_or(0);
    let &[score_rows, width] = class_scores.shape() else {
        return Err(Error::shape("class scores must be [R, C + 1]"));
    };
    if rows != score_rows || width < 2 {
        return Err(Error::shape(format!(
            "{rows} feature rows but scores shaped {:?}",
            class_scores.shape()
        )));
    }
    let labels = class_scores
        .data()
        .chunks(width)
        .enumerate()
        .filter_map(|(r, s)| pseudo_label(s, score_thresh).map(|c| (r, c)))
        .collect::<Vec<_>>();
    Ok(LocalPrototypes::group(features, labels))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Cosine similarity rescaled to `[0, 1]`; `None` when either norm is below
/// [`MIN_NORM`].
pub fn similarity(a: &[f64], b: &[f64]) -> Option<f64> {
    let (na, nb) = (norm(a), norm(b));
    if na < MIN_NORM || nb < MIN_NORM {
        return None;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Some(((dot / (na * nb)).clamp(-1.0, 1.0) + 1.0) / 2.0)
}

/// Running per-class global prototypes of one domain.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank {
    domain: Domain,
    dim: usize,
    vectors: Vec<Vec<f64>>,
    initialized: Vec<bool>,
}

/// How one class of a bank moved in an update: `new = alpha * local + rest`.
#[derive(Clone, Debug, PartialEq)]
pub struct GateRecord {
    pub class: usize,
    pub alpha: f64,
    /// `(1 - alpha) * previous`, or zeros on first sight.
    pub rest: Vec<f64>,
}

impl PrototypeBank {
    pub fn new(domain: Domain, classes: usize, dim: usize) -> Self {
        PrototypeBank {
            domain,
            dim,
            vectors: vec![vec![0.0; dim]; classes],
            initialized: vec![false; classes],
        }
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.vectors.len()
    }

    pub fn get(&self, class: usize) -> Option<&[f64]> {
        self.initialized
            .get(class)
            .copied()
            .unwrap_or(false)
            .then(|| self.vectors[class].as_slice())
    }

    pub fn is_initialized(&self, class: usize) -> bool {
        self.initialized.get(class).copied().unwrap_or(false)
    }

    /// Overwrites one class, marking it initialised.
    pub fn set(&mut self, class: usize, vector: Vec<f64>) -> Result<()> {
        if class >= self.classes() || vector.len() != self.dim {
            return Err(Error::shape(format!(
                "prototype for class {class} of width {} does not fit a bank of {} x {}",
                vector.len(),
                self.classes(),
                self.dim
            )));
        }
        self.vectors[class] = vector;
        self.initialized[class] = true;
        Ok(())
    }

    /// Bank contents as a `[C, D]` tensor plus a `[C]` 0/1 mask.
    pub fn to_tensors(&self) -> Result<(Tensor, Tensor)> {
        let data = self.vectors.concat();
        let mask = self
            .initialized
            .iter()
            .map(|&b| if b { 1.0 } else { 0.0 })
            .collect();
        Ok((
            Tensor::new(&[self.classes(), self.dim], data)?,
            Tensor::new(&[self.classes()], mask)?,
        ))
    }

    pub fn from_tensors(domain: Domain, vectors: &Tensor, mask: &Tensor) -> Result<Self> {
        let &[classes, dim] = vectors.shape() else {
            return Err(Error::shape("prototype bank must be [C, D]"));
        };
        if mask.shape() != [classes] {
            return Err(Error::shape("prototype mask must be [C]"));
        }
        Ok(PrototypeBank {
            domain,
            dim,
            vectors: vectors.data().chunks(dim).map(<[f64]>::to_vec).collect(),
            initialized: mask.data().iter().map(|&m| m != 0.0).collect(),
        })
    }

    /// Similarity-gated moving average towards the local prototypes.
    /// Classes seen for the first time are copied; classes whose vectors are
    /// too small to compare are skipped.
    pub fn update_global(&mut self, local: &LocalPrototypes) -> Result<Vec<GateRecord>> {
        let mut records = Vec::new();
        for class in local.classes() {
            let p = local.get(class).expect("listed class");
            if class >= self.classes() || p.len() != self.dim {
                return Err(Error::shape(format!(
                    "local prototype for class {class} of width {} does not fit a bank of {} x {}",
                    p.len(),
                    self.classes(),
                    self.dim
                )));
            }
            if !self.initialized[class] {
                self.vectors[class] = p.to_vec();
                self.initialized[class] = true;
                records.push(GateRecord {
                    class,
                    alpha: 1.0,
                    rest: vec![0.0; self.dim],
                });
                continue;
            }
            let gp = &mut self.vectors[class];
            let Some(alpha) = similarity(p, gp) else {
                log::debug!("skipping prototype update of class {class}: vanishing norm");
                continue;
            };
            let rest: Vec<f64> = gp.iter().map(|g| (1.0 - alpha) * g).collect();
            for ((g, &pv), &r) in gp.iter_mut().zip(p).zip(&rest) {
                *g = alpha * pv + r;
            }
            records.push(GateRecord { class, alpha, rest });
        }
        Ok(records)
    }
}

/// Sum over classes initialised in both banks of the squared distance
/// between their global prototypes.
pub fn psa_loss(src: &PrototypeBank, tgt: &PrototypeBank) -> Result<f64> {
    check_pair(src, tgt)?;
    let mut total = 0.0;
    let mut common = 0;
    for k in 0..src.classes() {
        if let (Some(a), Some(b)) = (src.get(k), tgt.get(k)) {
            total += a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
            common += 1;
        }
    }
    if common == 0 {
        log::warn!("no class initialised in both prototype banks; alignment loss is 0");
    }
    Ok(total)
}

fn check_pair(src: &PrototypeBank, tgt: &PrototypeBank) -> Result<()> {
    if src.classes() != tgt.classes() || src.dim() != tgt.dim() {
        return Err(Error::shape(format!(
            "prototype banks differ: {} x {} vs {} x {}",
            src.classes(),
            src.dim(),
            tgt.classes(),
            tgt.dim()
        )));
    }
    Ok(())
}

/// Graph nodes for the prototypes updated this step:
/// `alpha * mean(fc2[rows]) + rest`, differentiable through `fc2` only.
pub fn live_prototypes(
    g: &mut Graph,
    fc2: Var,
    local: &LocalPrototypes,
    records: &[GateRecord],
) -> Result<BTreeMap<usize, Var>> {
    let mut live = BTreeMap::new();
    for r in records {
        let picked = g.index_rows(fc2, local.rows(r.class))?;
        let mean = g.mean_rows(picked)?;
        let scaled = g.scale(mean, r.alpha);
        let rest = g.constant(Tensor::new(&[r.rest.len()], r.rest.clone())?);
        live.insert(r.class, g.add(scaled, rest)?);
    }
    Ok(live)
}

/// Differentiable alignment loss. Banks must already hold this step's
/// values; classes in `src_live` / `tgt_live` use those nodes, others are
/// constants.
pub fn psa_loss_graph(
    g: &mut Graph,
    src: &PrototypeBank,
    src_live: &BTreeMap<usize, Var>,
    tgt: &PrototypeBank,
    tgt_live: &BTreeMap<usize, Var>,
) -> Result<Var> {
    check_pair(src, tgt)?;
    let mut total: Option<Var> = None;
    for k in 0..src.classes() {
        let (Some(a), Some(b)) = (src.get(k), tgt.get(k)) else {
            continue;
        };
        let mut node = |live: &BTreeMap<usize, Var>, v: &[f64]| -> Result<Var> {
            match live.get(&k) {
                Some(&var) => Ok(var),
                None => Ok(g.constant(Tensor::new(&[v.len()], v.to_vec())?)),
            }
        };
        let a = node(src_live, a)?;
        let b = node(tgt_live, b)?;
        let d = g.sub(a, b)?;
        let sq = g.mul(d, d)?;
        let term = g.sum(sq);
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    Ok(match total {
        Some(t) => t,
        None => {
            log::debug!("no class initialised in both prototype banks; alignment loss is 0");
            g.constant(Tensor::scalar(0.0))
        }
    })
}

/// FC2 features and class scores of the post-NMS proposals of one image.
pub fn roi_features(model: &DetectorModel, image: &Tensor) -> Result<(Tensor, Tensor)> {
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
    Ok((g.value(head.fc2).clone(), g.value(head.scores).clone()))
}

/// FC2 features of the ground-truth boxes of one image.
pub fn gt_features(model: &DetectorModel, image: &Tensor, gts: &[Annotation]) -> Result<Tensor> {
    let mut g = Graph::new();
    let vars = model.bind(&mut g, false);
    let feats = model.backbone_forward(&mut g, &vars, image)?;
    let boxes: Vec<BBox> = gts.iter().map(|a| a.bbox).collect();
    let head = model.roi_head_forward(&mut g, &vars, feats.top(), &boxes)?;
    Ok(g.value(head.fc2).clone())
}

#[derive(Default)]
struct Accumulator {
    sums: BTreeMap<usize, (Vec<f64>, usize)>,
}

impl Accumulator {
    fn add(&mut self, local: &LocalPrototypes) {
        for k in local.classes() {
            let n = local.count(k);
            let mean = local.get(k).expect("listed class");
            let (sum, count) = self
                .sums
                .entry(k)
                .or_insert_with(|| (vec![0.0; mean.len()], 0));
            sum.iter_mut().zip(mean).for_each(|(s, m)| *s += m * n as f64);
            *count += n;
        }
    }

    fn into_bank(self, domain: Domain, classes: usize, dim: usize) -> Result<PrototypeBank> {
        let mut bank = PrototypeBank::new(domain, classes, dim);
        for (k, (sum, n)) in self.sums {
            bank.set(k, sum.into_iter().map(|s| s / n as f64).collect())?;
        }
        Ok(bank)
    }
}

/// One pass over both datasets: the source bank is the mean FC2 feature of
/// every ground-truth region per class, the target bank the mean over every
/// accepted pseudo-labelled RoI.
pub fn init_global_prototypes<'a>(
    model: &DetectorModel,
    source: impl IntoIterator<Item = (&'a Tensor, &'a [Annotation])>,
    target: impl IntoIterator<Item = &'a Tensor>,
    score_thresh: f64,
) -> Result<(PrototypeBank, PrototypeBank)> {
    let classes = model.config().classes;
    let dim = model.config().fc_width;
    let mut src = Accumulator::default();
    for (image, gts) in source {
        if gts.is_empty() {
            continue;
        }
        let f = gt_features(model, image, gts)?;
        let labels: Vec<usize> = gts.iter().map(|a| a.category).collect();
        src.add(&source_local_prototypes(&f, &labels)?);
    }
    let mut tgt = Accumulator::default();
    for image in target {
        let (f, s) = roi_features(model, image)?;
        if f.numel() == 0 {
            continue;
        }
        tgt.add(&target_local_prototypes(&f, &s, score_thresh)?);
    }
    Ok((
        src.into_bank(Domain::Source, classes, dim)?,
        tgt.into_bank(Domain::Target, classes, dim)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pseudo_label_rejects_background_and_low_scores() {
        assert_eq!(pseudo_label(&[0.05, 0.9, 0.05], 0.8), Some(0));
        assert_eq!(pseudo_label(&[0.7, 0.2, 0.1], 0.1), None);
        assert_eq!(pseudo_label(&[0.1, 0.5, 0.4], 0.8), None);
    }

    #[test]
    fn global_init_weights_regions_not_images() {
        let mut acc = Accumulator::default();
        let one = Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap();
        let two = Tensor::new(&[2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        acc.add(&source_local_prototypes(&one, &[0]).unwrap());
        acc.add(&source_local_prototypes(&two, &[0, 0]).unwrap());
        let bank = acc.into_bank(Domain::Source, 2, 2).unwrap();
        let gp = bank.get(0).unwrap();
        assert!((gp[0] - 1.0 / 3.0).abs() < 1e-15 && (gp[1] - 2.0 / 3.0).abs() < 1e-15);
        assert!(bank.get(1).is_none());
    }

    #[test]
    fn bank_round_trips_through_tensors() {
        let mut b = PrototypeBank::new(Domain::Target, 3, 2);
        b.set(1, vec![0.5, -1.0]).unwrap();
        let (v, m) = b.to_tensors().unwrap();
        assert_eq!(PrototypeBank::from_tensors(Domain::Target, &v, &m).unwrap(), b);
    }
}
