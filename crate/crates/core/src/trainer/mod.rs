//! Source pretraining and joint coarse-to-fine adaptation.

pub mod optim;
mod state;

use std::io::Write;

use rand::seq::SliceRandom;

use crate::art::{
    adversarial_loss_map, art_loss, compute_attention, AttentionMap, ClassifierVars,
    DomainClassifiers, Reduction,
};
use crate::detector::{detection_loss, BBox, BackboneOut, DetectorConfig, DetectorModel, RpnOut};
use crate::domains::{Sample, UnlabeledDataset};
use crate::error::{Error, Result};
use crate::psa::{
    init_global_prototypes, live_prototypes, psa_loss_graph, source_local_prototypes,
    target_local_prototypes, PrototypeBank,
};
use crate::rng::{self, Purpose};
use crate::tensor::{Graph, Var};
use crate::Domain;
use optim::{Adam, Sgd};

pub use state::{load_state, save_state, state_checkpoint, state_from_checkpoint};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub batch_size: usize,
    pub pretrain_iters: usize,
    pub adapt_iters: usize,
    pub psa_start_iter: usize,
    pub detector_lr: f64,
    pub detector_lr_after_decay: f64,
    pub lr_decay_iter: usize,
    pub classifier_lr: f64,
    pub momentum: f64,
    pub grl_coeff: f64,
    pub pseudo_score_thresh: f64,
    pub seed: u64,
    /// Weight adversarial maps by the RPN attention; off gives the plain
    /// multi-block adversarial baseline.
    pub attention: bool,
    pub art_reduction: Reduction,
    /// Global gradient-norm cap for the detector; 0 disables it.
    pub grad_clip: f64,
    pub classifier_hidden: usize,
    /// Architecture; `detector.classes` is the category count.
    pub detector: DetectorConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda1: 1.0,
            lambda2: 0.01,
            batch_size: 2,
            pretrain_iters: 1500,
            adapt_iters: 2100,
            psa_start_iter: 1500,
            detector_lr: 1e-3,
            detector_lr_after_decay: 1e-4,
            lr_decay_iter: 1500,
            classifier_lr: 1e-4,
            momentum: 0.9,
            grl_coeff: 1.0,
            pseudo_score_thresh: 0.8,
            seed: 0,
            attention: true,
            art_reduction: Reduction::MeanPerBlock,
            grad_clip: 0.0,
            classifier_hidden: 32,
            detector: DetectorConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn categories(&self) -> usize {
        self.detector.classes
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(m.to_string()));
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return bad("train.lambda1 and train.lambda2 must be >= 0");
        }
        if self.batch_size != 2 {
            return bad("train.batch_size must be 2: one image per domain");
        }
        if self.psa_start_iter > self.adapt_iters {
            return bad("train.psa_start_iter exceeds train.adapt_iters");
        }
        for (name, v) in [
            ("train.detector_lr", self.detector_lr),
            ("train.detector_lr_after_decay", self.detector_lr_after_decay),
            ("train.classifier_lr", self.classifier_lr),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("train.momentum must lie in [0, 1)");
        }
        if !(self.grl_coeff >= 0.0) || !(self.grad_clip >= 0.0) {
            return bad("train.grl_coeff and train.grad_clip must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.pseudo_score_thresh) {
            return bad("train.pseudo_score_thresh must lie in [0, 1]");
        }
        if self.classifier_hidden == 0 {
            return bad("train.classifier_hidden must be positive");
        }
        Ok(())
    }

    pub fn lr_at(&self, iteration: usize) -> f64 {
        if iteration < self.lr_decay_iter {
            self.detector_lr
        } else {
            self.detector_lr_after_decay
        }
    }
}

/// Experimental arms compared against each other.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arm {
    Full,
    WithoutPsa,
    /// Multi-block adversarial alignment without attention or prototypes.
    Baseline3dc,
    SourceOnly,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::SourceOnly, Arm::Baseline3dc, Arm::WithoutPsa, Arm::Full];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Full => "full",
            Arm::WithoutPsa => "without_psa",
            Arm::Baseline3dc => "baseline_3dc",
            Arm::SourceOnly => "source_only",
        }
    }

    pub fn parse(s: &str) -> Option<Arm> {
        Arm::ALL.into_iter().find(|a| a.name() == s)
    }

    pub fn apply(self, config: &TrainConfig) -> TrainConfig {
        let mut c = config.clone();
        match self {
            Arm::Full => {}
            Arm::WithoutPsa => c.lambda2 = 0.0,
            Arm::Baseline3dc => {
                c.lambda2 = 0.0;
                c.attention = false;
            }
            Arm::SourceOnly => {
                c.lambda1 = 0.0;
                c.lambda2 = 0.0;
            }
        }
        c
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Pretrain,
    Adapt,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Adapt => "adapt",
        }
    }

    fn tag(self, index: u64) -> u64 {
        let phase = match self {
            Phase::Pretrain => 1u64,
            Phase::Adapt => 2,
        };
        (phase << 40) | index
    }
}

/// Index of draw `draw` from an endless stream of per-epoch shuffles of
/// `0..len`.
fn epoch_draw(len: usize, seed: u64, purpose: Purpose, phase: Phase, draw: usize) -> usize {
    let epoch = draw / len;
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng::stream(seed, purpose, phase.tag(epoch as u64)));
    order[draw % len]
}

/// Dataset indices for step `step`: `batch_size / 2` per domain, drawn
/// without replacement inside each epoch of each domain's stream.
pub fn sample_batch(
    source_len: usize,
    target_len: usize,
    batch_size: usize,
    seed: u64,
    phase: Phase,
    step: usize,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if batch_size == 0 || batch_size % 2 != 0 {
        return Err(Error::invalid(format!(
            "batch size must be a positive even number, got {batch_size}"
        )));
    }
    if source_len == 0 || target_len == 0 {
        return Err(Error::invalid("cannot sample from an empty dataset"));
    }
    let half = batch_size / 2;
    let pick = |len, purpose| {
        (0..half)
            .map(|j| epoch_draw(len, seed, purpose, phase, step * half + j))
            .collect()
    };
    Ok((
        pick(source_len, Purpose::SourceOrder),
        pick(target_len, Purpose::TargetOrder),
    ))
}

/// Everything that evolves during training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub phase: Phase,
    /// Steps completed in the current phase.
    pub iteration: usize,
    pub seed: u64,
    pub detector: DetectorModel,
    pub sgd: Sgd,
    pub classifiers: DomainClassifiers,
    pub adam: Adam,
    pub source_bank: PrototypeBank,
    pub target_bank: PrototypeBank,
}

fn fresh_classifiers(config: &TrainConfig) -> Result<DomainClassifiers> {
    DomainClassifiers::new(
        &config.detector.channels,
        config.classifier_hidden,
        rng::derive_seed(config.seed, Purpose::Classifier, 0),
    )
}

impl TrainState {
    /// Randomly initialised detector at the start of pretraining.
    pub fn new_pretrain(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let detector = DetectorModel::new(
            config.detector.clone(),
            rng::derive_seed(config.seed, Purpose::Init, 0),
        )?;
        let classifiers = fresh_classifiers(config)?;
        let (c, d) = (config.categories(), config.detector.fc_width);
        Ok(TrainState {
            phase: Phase::Pretrain,
            iteration: 0,
            seed: config.seed,
            sgd: Sgd::new(detector.params(), config.momentum),
            adam: Adam::new(classifiers.params()),
            detector,
            classifiers,
            source_bank: PrototypeBank::new(Domain::Source, c, d),
            target_bank: PrototypeBank::new(Domain::Target, c, d),
        })
    }

    /// Start of adaptation from a pretrained detector: fresh optimizer
    /// buffers and classifiers, and, when the prototype term is active,
    /// global prototypes from one pass over both training sets.
    pub fn new_adapt(
        config: &TrainConfig,
        pretrained: &TrainState,
        source: &[Sample],
        target: Option<&UnlabeledDataset>,
    ) -> Result<Self> {
        config.validate()?;
        let mut state = TrainState::new_pretrain(config)?;
        if pretrained.detector.config() != &config.detector {
            return Err(Error::invalid(
                "pretrained detector architecture differs from the configuration",
            ));
        }
        state.phase = Phase::Adapt;
        state.detector = pretrained.detector.clone();
        if let (Some(target), true) = (target, config.lambda2 > 0.0) {
            let (src, tgt) = init_global_prototypes(
                &state.detector,
                source.iter().map(|s| (&s.image, s.annotations.as_slice())),
                target.images(),
                config.pseudo_score_thresh,
            )?;
            state.source_bank = src;
            state.target_bank = tgt;
        }
        Ok(state)
    }
}

/// One logged iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub iter: usize,
    pub l_det: f64,
    pub l_rpn: f64,
    pub l_reg: f64,
    pub l_cls: f64,
    pub l_art: Option<f64>,
    pub l_psa: Option<f64>,
    pub l_total: f64,
    pub lr: f64,
}

pub const METRICS_HEADER: &str = "iter,l_det,l_rpn,l_reg,l_cls,l_art,l_psa,l_total,lr";

impl MetricsRow {
    pub fn csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.iter,
            self.l_det,
            self.l_rpn,
            self.l_reg,
            self.l_cls,
            opt(self.l_art),
            opt(self.l_psa),
            self.l_total,
            self.lr
        )
    }

    pub fn parse(line: &str) -> Option<MetricsRow> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 9 {
            return None;
        }
        let num = |s: &str| s.parse::<f64>().ok();
        let opt = |s: &str| if s.is_empty() { Some(None) } else { num(s).map(Some) };
        Some(MetricsRow {
            iter: f[0].parse().ok()?,
            l_det: num(f[1])?,
            l_rpn: num(f[2])?,
            l_reg: num(f[3])?,
            l_cls: num(f[4])?,
            l_art: opt(f[5])?,
            l_psa: opt(f[6])?,
            l_total: num(f[7])?,
            lr: num(f[8])?,
        })
    }
}

fn image_size(image: &crate::tensor::Tensor) -> (f64, f64) {
    (image.shape()[2] as f64, image.shape()[1] as f64)
}

fn image_art(
    g: &mut Graph,
    feats: &BackboneOut,
    rpn: &RpnOut,
    cvars: &ClassifierVars,
    domain: Domain,
    config: &TrainConfig,
) -> Result<Var> {
    let attention = if config.attention {
        compute_attention(g.value(rpn.f_rpn))?
    } else {
        let s = g.shape(rpn.f_rpn);
        AttentionMap::zeros(s[2], s[3])
    };
    let maps = (0..feats.blocks.len())
        .map(|l| adversarial_loss_map(g, feats.blocks[l], cvars, l, domain, config.grl_coeff))
        .collect::<Result<Vec<_>>>()?;
    art_loss(g, &maps, &attention, config.art_reduction)
}

fn clip_gradients(grads: &mut [Vec<f64>], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|v| *v *= s);
    }
}

/// One optimisation step. `target` is `None` for purely supervised phases.
pub fn train_step(
    state: &mut TrainState,
    config: &TrainConfig,
    source: &[Sample],
    target: Option<&UnlabeledDataset>,
) -> Result<MetricsRow> {
    let i = state.iteration;
    let phase = state.phase;
    let (src_idx, tgt_idx) = sample_batch(
        source.len(),
        target.map_or(1, |t| t.len()),
        config.batch_size,
        state.seed,
        phase,
        i,
    )?;
    let adapting = phase == Phase::Adapt && target.is_some();
    let use_art = adapting && config.lambda1 > 0.0;
    let use_psa = adapting && config.lambda2 > 0.0 && i >= config.psa_start_iter;
    let mut rng = rng::stream(state.seed, Purpose::Sampling, phase.tag(i as u64));

    let mut g = Graph::new();
    let dvars = state.detector.bind(&mut g, true);
    let cvars = use_art.then(|| state.classifiers.bind(&mut g, true));

    let src = &source[src_idx[0]];
    let feats_s = state.detector.backbone_forward(&mut g, &dvars, &src.image)?;
    let rpn_s = state.detector.rpn_forward(&mut g, &dvars, feats_s.top())?;
    let det = detection_loss(
        &mut g,
        &state.detector,
        &dvars,
        &feats_s,
        &rpn_s,
        &src.annotations,
        image_size(&src.image),
        &mut rng,
    )?;
    let mut total = det.total;
    let mut target_id = String::new();
    let mut l_art = None;
    let mut l_psa = None;

    if use_art || use_psa {
        let target = target.expect("adapting");
        let t = tgt_idx[0];
        target_id = target.id(t).to_string();
        let image = target.image(t);
        let feats_t = state.detector.backbone_forward(&mut g, &dvars, image)?;
        let rpn_t = state.detector.rpn_forward(&mut g, &dvars, feats_t.top())?;
        if let Some(cvars) = &cvars {
            let a_s = image_art(&mut g, &feats_s, &rpn_s, cvars, Domain::Source, config)?;
            let a_t = image_art(&mut g, &feats_t, &rpn_t, cvars, Domain::Target, config)?;
            let sum = g.add(a_s, a_t)?;
            let art = g.scale(sum, 0.5);
            l_art = Some(art);
            let weighted = g.scale(art, config.lambda1);
            total = g.add(total, weighted)?;
        }
        if use_psa {
            let boxes: Vec<BBox> = src.annotations.iter().map(|a| a.bbox).collect();
            let labels: Vec<usize> = src.annotations.iter().map(|a| a.category).collect();
            let head_s = state
                .detector
                .roi_head_forward(&mut g, &dvars, feats_s.top(), &boxes)?;
            let local_s = source_local_prototypes(g.value(head_s.fc2), &labels)?;
            let rois: Vec<BBox> = state
                .detector
                .proposals(&g, &rpn_t, image_size(image))?
                .into_iter()
                .map(|p| p.0)
                .collect();
            let head_t = state
                .detector
                .roi_head_forward(&mut g, &dvars, feats_t.top(), &rois)?;
            let local_t = target_local_prototypes(
                g.value(head_t.fc2),
                g.value(head_t.scores),
                config.pseudo_score_thresh,
            )?;
            let rec_s = state.source_bank.update_global(&local_s)?;
            let rec_t = state.target_bank.update_global(&local_t)?;
            let live_s = live_prototypes(&mut g, head_s.fc2, &local_s, &rec_s)?;
            let live_t = live_prototypes(&mut g, head_t.fc2, &local_t, &rec_t)?;
            let psa = psa_loss_graph(
                &mut g,
                &state.source_bank,
                &live_s,
                &state.target_bank,
                &live_t,
            )?;
            let common = (0..config.categories())
                .any(|k| state.source_bank.is_initialized(k) && state.target_bank.is_initialized(k));
            if !common && (i == config.psa_start_iter || i % 100 == 0) {
                log::warn!(
                    "iteration {}: no class has both a source and a target prototype; alignment loss is 0",
                    i + 1
                );
            }
            l_psa = Some(psa);
            let weighted = g.scale(psa, config.lambda2);
            total = g.add(total, weighted)?;
        }
    }

    let b = det.breakdown(&g);
    let row = MetricsRow {
        iter: i + 1,
        l_det: b.total,
        l_rpn: b.rpn_loss,
        l_reg: b.reg_loss,
        l_cls: b.cls_loss,
        l_art: l_art.map(|v| g.value(v).item()),
        l_psa: l_psa.map(|v| g.value(v).item()),
        l_total: g.value(total).item(),
        lr: config.lr_at(i),
    };
    let abort = |what: &str| Error::NonFinite {
        iteration: i + 1,
        source_id: src.id.clone(),
        target_id: target_id.clone(),
        terms: format!(
            "{what}; l_rpn={} l_reg={} l_cls={} l_art={:?} l_psa={:?}",
            row.l_rpn, row.l_reg, row.l_cls, row.l_art, row.l_psa
        ),
    };
    let finite = [row.l_det, row.l_total, row.l_art.unwrap_or(0.0), row.l_psa.unwrap_or(0.0)]
        .iter()
        .all(|v| v.is_finite());
    if !finite {
        return Err(abort("non-finite loss"));
    }

    g.backward(total)?;
    let mut det_grads: Vec<Vec<f64>> = dvars.all().iter().map(|&v| g.grad_or_zeros(v)).collect();
    if det_grads.iter().flatten().any(|v| !v.is_finite()) {
        return Err(abort("non-finite detector gradient"));
    }
    clip_gradients(&mut det_grads, config.grad_clip);
    state
        .sgd
        .step(state.detector.params_mut(), &det_grads, row.lr)?;
    if let Some(cvars) = &cvars {
        // the total carries lambda1 * L_ART; the classifiers descend L_ART
        let scale = 1.0 / config.lambda1;
        let grads: Vec<Vec<f64>> = cvars
            .all()
            .iter()
            .map(|&v| g.grad_or_zeros(v).into_iter().map(|x| x * scale).collect())
            .collect();
        state
            .adam
            .step(state.classifiers.params_mut(), &grads, config.classifier_lr)?;
    }
    state.iteration += 1;
    Ok(row)
}

/// Runs steps until `until` iterations of the current phase are done,
/// writing one CSV row per step.
pub fn run(
    state: &mut TrainState,
    config: &TrainConfig,
    source: &[Sample],
    target: Option<&UnlabeledDataset>,
    until: usize,
    metrics: &mut dyn Write,
) -> Result<()> {
    if source.is_empty() {
        return Err(Error::invalid("source dataset is empty"));
    }
    while state.iteration < until {
        let row = train_step(state, config, source, target)?;
        writeln!(metrics, "{}", row.csv()).map_err(|e| Error::io("metrics", e))?;
        if row.iter % 100 == 0 {
            log::info!(
                "{} iter {} l_det {:.4} l_total {:.4}",
                state.phase.name(),
                row.iter,
                row.l_det,
                row.l_total
            );
        }
    }
    Ok(())
}

/// Supervised training of a fresh detector on labelled source images.
pub fn pretrain(config: &TrainConfig, source: &[Sample], metrics: &mut dyn Write) -> Result<TrainState> {
    let mut state = TrainState::new_pretrain(config)?;
    run(&mut state, config, source, None, config.pretrain_iters, metrics)?;
    Ok(state)
}

/// Joint adaptation of a pretrained detector to unlabelled target images.
pub fn adapt(
    config: &TrainConfig,
    pretrained: &TrainState,
    source: &[Sample],
    target: &UnlabeledDataset,
    metrics: &mut dyn Write,
) -> Result<TrainState> {
    let mut state = TrainState::new_adapt(config, pretrained, source, Some(target))?;
    run(&mut state, config, source, Some(target), config.adapt_iters, metrics)?;
    Ok(state)
}

/// Continues supervised training for the adaptation schedule without ever
/// looking at the target domain.
pub fn continue_supervised(
    config: &TrainConfig,
    pretrained: &TrainState,
    source: &[Sample],
    metrics: &mut dyn Write,
) -> Result<TrainState> {
    let mut state = TrainState::new_adapt(config, pretrained, source, None)?;
    run(&mut state, config, source, None, config.adapt_iters, metrics)?;
    Ok(state)
}
