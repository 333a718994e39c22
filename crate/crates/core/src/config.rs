//! Line-oriented `key = value` run configuration.
//!
//! Keys are dotted (`train.lambda1`, `shift.fog_intensity`); `#` starts a
//! comment line. Missing keys keep their defaults and unknown keys are
//! errors. [`Config::render`] lists every key and parses back to an equal
//! value.

use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::art::Reduction;
use crate::domains::{DataConfig, SceneConfig, ShiftConfig};
use crate::error::{Error, Result};
use crate::trainer::TrainConfig;

/// Linear probe used by the proxy A-distance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ProbeLoss {
    #[default]
    Logistic,
    Hinge,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub iou_thresh: f64,
    pub score_thresh: f64,
    pub nms_iou: f64,
    pub train_fraction: f64,
    pub probe: ProbeLoss,
    pub probe_epochs: usize,
    pub probe_lr: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_thresh: 0.5,
            score_thresh: 0.01,
            nms_iou: 0.5,
            train_fraction: 0.8,
            probe: ProbeLoss::Logistic,
            probe_epochs: 200,
            probe_lr: 0.1,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(unit(self.iou_thresh) && unit(self.score_thresh) && unit(self.nms_iou)) {
            return Err(Error::invalid("eval thresholds must lie in [0, 1]"));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::invalid("eval.train_fraction must lie in (0, 1)"));
        }
        if !(self.probe_lr > 0.0) || self.probe_epochs == 0 {
            return Err(Error::invalid("eval probe needs positive epochs and lr"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Config {
    pub train: TrainConfig,
    pub scene: SceneConfig,
    pub shift: ShiftConfig,
    pub data: DataConfig,
    /// Seed of the generated datasets.
    pub data_seed: u64,
    pub eval: EvalConfig,
}

enum Slot<'a> {
    Real(&'a mut f64),
    Count(&'a mut usize),
    Seed(&'a mut u64),
    Flag(&'a mut bool),
    Rgb(&'a mut [f64; 3]),
    Widths(&'a mut [usize; 3]),
    Reals(&'a mut Vec<f64>),
    Reduction(&'a mut Reduction),
    Probe(&'a mut ProbeLoss),
}

fn list<T: Display>(items: &[T]) -> String {
    items
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_list<T: FromStr>(s: &str) -> Option<Vec<T>> {
    s.split(',').map(|p| p.trim().parse().ok()).collect()
}

fn parse_real(s: &str) -> Option<f64> {
    s.parse::<f64>().ok().filter(|v| v.is_finite())
}

impl Slot<'_> {
    fn render(&self) -> String {
        match self {
            Slot::Real(v) => v.to_string(),
            Slot::Count(v) => v.to_string(),
            Slot::Seed(v) => v.to_string(),
            Slot::Flag(v) => v.to_string(),
            Slot::Rgb(v) => list(&v[..]),
            Slot::Widths(v) => list(&v[..]),
            Slot::Reals(v) => list(v),
            Slot::Reduction(Reduction::Sum) => "sum".into(),
            Slot::Reduction(Reduction::MeanPerBlock) => "mean".into(),
            Slot::Probe(ProbeLoss::Logistic) => "logistic".into(),
            Slot::Probe(ProbeLoss::Hinge) => "hinge".into(),
        }
    }

    /// Stores `text`, or returns a description of the expected type.
    fn set(&mut self, text: &str) -> std::result::Result<(), &'static str> {
        let ok = match self {
            Slot::Real(v) => parse_real(text).map(|x| **v = x).ok_or("a real number"),
            Slot::Count(v) => text.parse().map(|x| **v = x).map_err(|_| "a non-negative integer"),
            Slot::Seed(v) => text.parse().map(|x| **v = x).map_err(|_| "a non-negative integer"),
            Slot::Flag(v) => text.parse().map(|x| **v = x).map_err(|_| "true or false"),
            Slot::Rgb(v) => parse_list::<f64>(text)
                .filter(|l| l.iter().all(|x| x.is_finite()))
                .and_then(|l| <[f64; 3]>::try_from(l).ok())
                .map(|x| **v = x)
                .ok_or("three comma-separated reals"),
            Slot::Widths(v) => parse_list::<usize>(text)
                .and_then(|l| <[usize; 3]>::try_from(l).ok())
                .map(|x| **v = x)
                .ok_or("three comma-separated integers"),
            Slot::Reals(v) => parse_list::<f64>(text)
                .filter(|l| l.iter().all(|x| x.is_finite()))
                .map(|x| **v = x)
                .ok_or("comma-separated reals"),
            Slot::Reduction(v) => match text {
                "sum" => Ok(**v = Reduction::Sum),
                "mean" => Ok(**v = Reduction::MeanPerBlock),
                _ => Err("`sum` or `mean`"),
            },
            Slot::Probe(v) => match text {
                "logistic" => Ok(**v = ProbeLoss::Logistic),
                "hinge" => Ok(**v = ProbeLoss::Hinge),
                _ => Err("`logistic` or `hinge`"),
            },
        };
        ok
    }
}

impl Config {
    fn slots(&mut self) -> Vec<(&'static str, Slot<'_>)> {
        use Slot::*;
        let t = &mut self.train;
        let m = &mut t.detector;
        let s = &mut self.scene;
        let f = &mut self.shift;
        let d = &mut self.data;
        let e = &mut self.eval;
        vec![
            ("train.lambda1", Real(&mut t.lambda1)),
            ("train.lambda2", Real(&mut t.lambda2)),
            ("train.batch_size", Count(&mut t.batch_size)),
            ("train.pretrain_iters", Count(&mut t.pretrain_iters)),
            ("train.adapt_iters", Count(&mut t.adapt_iters)),
            ("train.psa_start_iter", Count(&mut t.psa_start_iter)),
            ("train.detector_lr", Real(&mut t.detector_lr)),
            ("train.detector_lr_after_decay", Real(&mut t.detector_lr_after_decay)),
            ("train.lr_decay_iter", Count(&mut t.lr_decay_iter)),
            ("train.classifier_lr", Real(&mut t.classifier_lr)),
            ("train.momentum", Real(&mut t.momentum)),
            ("train.grl_coeff", Real(&mut t.grl_coeff)),
            ("train.pseudo_score_thresh", Real(&mut t.pseudo_score_thresh)),
            ("train.seed", Seed(&mut t.seed)),
            ("train.categories", Count(&mut m.classes)),
            ("train.attention", Flag(&mut t.attention)),
            ("train.art_reduction", Reduction(&mut t.art_reduction)),
            ("train.grad_clip", Real(&mut t.grad_clip)),
            ("train.classifier_hidden", Count(&mut t.classifier_hidden)),
            ("model.channels", Widths(&mut m.channels)),
            ("model.rpn_channels", Count(&mut m.rpn_channels)),
            ("model.fc_width", Count(&mut m.fc_width)),
            ("model.pool_size", Count(&mut m.pool_size)),
            ("model.anchor_sizes", Reals(&mut m.anchor_sizes)),
            ("model.pre_nms_k", Count(&mut m.pre_nms_k)),
            ("model.post_nms_k", Count(&mut m.post_nms_k)),
            ("model.rpn_nms_iou", Real(&mut m.rpn_nms_iou)),
            ("model.rpn_batch", Count(&mut m.rpn_batch)),
            ("model.rpn_pos_iou", Real(&mut m.rpn_pos_iou)),
            ("model.rpn_neg_iou", Real(&mut m.rpn_neg_iou)),
            ("model.roi_batch", Count(&mut m.roi_batch)),
            ("model.roi_fg_fraction", Real(&mut m.roi_fg_fraction)),
            ("model.roi_fg_iou", Real(&mut m.roi_fg_iou)),
            ("scene.width", Count(&mut s.width)),
            ("scene.height", Count(&mut s.height)),
            ("scene.classes", Count(&mut s.classes)),
            ("scene.min_objects", Count(&mut s.min_objects)),
            ("scene.max_objects", Count(&mut s.max_objects)),
            ("scene.min_size", Real(&mut s.min_size)),
            ("scene.max_size", Real(&mut s.max_size)),
            ("scene.hue_jitter", Real(&mut s.hue_jitter)),
            ("scene.texture", Real(&mut s.texture)),
            ("scene.grain", Real(&mut s.grain)),
            ("shift.fog_intensity", Real(&mut f.fog_intensity)),
            ("shift.fog_color", Rgb(&mut f.fog_color)),
            ("shift.noise_sigma", Real(&mut f.noise_sigma)),
            ("shift.hue_rotation", Real(&mut f.hue_rotation)),
            ("data.seed", Seed(&mut self.data_seed)),
            ("data.source_train", Count(&mut d.source_train)),
            ("data.source_test", Count(&mut d.source_test)),
            ("data.target_train", Count(&mut d.target_train)),
            ("data.target_test", Count(&mut d.target_test)),
            ("eval.iou_thresh", Real(&mut e.iou_thresh)),
            ("eval.score_thresh", Real(&mut e.score_thresh)),
            ("eval.nms_iou", Real(&mut e.nms_iou)),
            ("eval.train_fraction", Real(&mut e.train_fraction)),
            ("eval.probe", Probe(&mut e.probe)),
            ("eval.probe_epochs", Count(&mut e.probe_epochs)),
            ("eval.probe_lr", Real(&mut e.probe_lr)),
        ]
    }

    /// Every key in declaration order.
    pub fn keys() -> Vec<&'static str> {
        Config::default().slots().into_iter().map(|(k, _)| k).collect()
    }

    pub fn parse(text: &str) -> Result<Config> {
        let mut config = Config::default();
        {
            let mut slots = config.slots();
            for (n, raw) in text.lines().enumerate() {
                let line = raw.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let err = |key: &str, message: String| Error::Config {
                    key: key.to_string(),
                    line: n + 1,
                    message,
                };
                let Some((key, value)) = line.split_once('=') else {
                    return Err(err(line, "expected `key = value`".into()));
                };
                let (key, value) = (key.trim(), value.trim());
                let Some((_, slot)) = slots.iter_mut().find(|(k, _)| *k == key) else {
                    return Err(err(key, "unknown key".into()));
                };
                slot.set(value)
                    .map_err(|want| err(key, format!("expected {want}, got `{value}`")))?;
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Config> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Config::parse(&text)
    }

    pub fn render(&self) -> String {
        let mut copy = self.clone();
        copy.slots()
            .iter()
            .map(|(k, s)| format!("{k} = {}\n", s.render()))
            .collect()
    }

    /// Writes `resolved.cfg` into `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        let path = dir.join("resolved.cfg");
        fs::write(&path, self.render()).map_err(|e| Error::io(&path, e))
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.scene.validate()?;
        self.shift.validate()?;
        self.eval.validate()?;
        if self.scene.classes != self.train.categories() {
            return Err(Error::invalid(format!(
                "scene.classes = {} but train.categories = {}",
                self.scene.classes,
                self.train.categories()
            )));
        }
        Ok(())
    }
}
