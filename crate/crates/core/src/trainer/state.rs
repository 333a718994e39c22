//! Conversion between [`TrainState`] and checkpoints.
//!
//! Tensor names: `detector.*`, `sgd.*`, `art.*`, `adam.m.art.*`,
//! `adam.v.art.*`, `psa.{source,target}.{prototypes,initialized}`. The
//! `config` entry holds the resolved configuration and the `state` entry
//! the phase, iteration counter and random-stream seed; every random draw
//! is a pure function of those three.

use std::path::Path;

use super::optim::{Adam, Sgd};
use super::{Phase, TrainState};
use crate::art::DomainClassifiers;
use crate::checkpoint::Checkpoint;
use crate::config::Config;
use crate::detector::DetectorModel;
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::psa::PrototypeBank;
use crate::Domain;

fn bank_names(domain: Domain) -> (String, String) {
    (
        format!("psa.{}.prototypes", domain.name()),
        format!("psa.{}.initialized", domain.name()),
    )
}

pub fn state_checkpoint(state: &TrainState, config: &Config) -> Result<Checkpoint> {
    let mut tensors = ParamSet::new();
    let sets = [
        state.detector.params(),
        &state.sgd.velocity,
        state.classifiers.params(),
        &state.adam.m,
        &state.adam.v,
    ];
    for set in sets {
        for (n, t) in set.iter() {
            tensors.push(n, t.clone());
        }
    }
    for bank in [&state.source_bank, &state.target_bank] {
        let (vectors, mask) = bank.to_tensors()?;
        let (vn, mn) = bank_names(bank.domain());
        tensors.push(vn, vectors);
        tensors.push(mn, mask);
    }
    let meta = format!(
        "phase = {}\niteration = {}\nseed = {}\nadam_steps = {}\n",
        state.phase.name(),
        state.iteration,
        state.seed,
        state.adam.steps
    );
    Ok(Checkpoint {
        tensors,
        entries: vec![
            ("config".into(), config.render().into_bytes()),
            ("state".into(), meta.into_bytes()),
        ],
    })
}

fn text_entry<'a>(ckpt: &'a Checkpoint, name: &str) -> Result<&'a str> {
    let bytes = ckpt
        .entry(name)
        .ok_or_else(|| Error::Checkpoint(format!("missing `{name}` entry")))?;
    std::str::from_utf8(bytes).map_err(|_| Error::Checkpoint(format!("`{name}` entry is not UTF-8")))
}

fn meta_value<'a>(meta: &'a str, key: &str) -> Result<&'a str> {
    meta.lines()
        .filter_map(|l| l.split_once('='))
        .find(|(k, _)| k.trim() == key)
        .map(|(_, v)| v.trim())
        .ok_or_else(|| Error::Checkpoint(format!("state entry lacks `{key}`")))
}

fn meta_number<T: std::str::FromStr>(meta: &str, key: &str) -> Result<T> {
    meta_value(meta, key)?
        .parse()
        .map_err(|_| Error::Checkpoint(format!("state entry has a bad `{key}`")))
}

/// Rebuilds the training state and the configuration it was written with.
pub fn state_from_checkpoint(ckpt: &Checkpoint) -> Result<(TrainState, Config)> {
    let config = Config::parse(text_entry(ckpt, "config")?)
        .map_err(|e| Error::Checkpoint(format!("embedded config: {e}")))?;
    let meta = text_entry(ckpt, "state")?;
    let phase = match meta_value(meta, "phase")? {
        "pretrain" => Phase::Pretrain,
        "adapt" => Phase::Adapt,
        other => return Err(Error::Checkpoint(format!("unknown phase `{other}`"))),
    };

    let mut groups: [ParamSet; 5] = Default::default();
    let mut banks: Vec<(&str, &crate::tensor::Tensor)> = Vec::new();
    for (n, t) in ckpt.tensors.iter() {
        if n.starts_with("detector.") {
            groups[0].push(n, t.clone());
        } else if n.starts_with("sgd.") {
            groups[1].push(n, t.clone());
        } else if n.starts_with("art.") {
            groups[2].push(n, t.clone());
        } else if n.starts_with("adam.m.") {
            groups[3].push(n, t.clone());
        } else if n.starts_with("adam.v.") {
            groups[4].push(n, t.clone());
        } else if n.starts_with("psa.") {
            banks.push((n, t));
        } else {
            return Err(Error::Checkpoint(format!("unexpected tensor `{n}`")));
        }
    }
    let [det, velocity, cls, m, v] = groups;
    let corrupt = |e: Error| Error::Checkpoint(e.to_string());
    let detector = DetectorModel::from_params(config.train.detector.clone(), det).map_err(corrupt)?;
    let sgd = Sgd {
        momentum: config.train.momentum,
        velocity,
    };
    if sgd.velocity.len() != detector.params().len() {
        return Err(Error::Checkpoint("momentum buffers do not match the detector".into()));
    }
    let classifiers = DomainClassifiers::from_params(cls).map_err(corrupt)?;
    let mut adam = Adam::new(classifiers.params());
    if m.len() != adam.m.len() || v.len() != adam.v.len() {
        return Err(Error::Checkpoint("Adam buffers do not match the classifiers".into()));
    }
    adam.m.assign(&m).map_err(corrupt)?;
    adam.v.assign(&v).map_err(corrupt)?;
    adam.steps = meta_number(meta, "adam_steps")?;

    let bank = |domain: Domain| -> Result<PrototypeBank> {
        let (vn, mn) = bank_names(domain);
        let find = |name: &str| {
            banks
                .iter()
                .find(|(n, _)| *n == name)
                .map(|(_, t)| *t)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
        };
        let b = PrototypeBank::from_tensors(domain, find(&vn)?, find(&mn)?).map_err(corrupt)?;
        if b.classes() != config.train.categories() || b.dim() != config.train.detector.fc_width {
            return Err(Error::Checkpoint(format!("`{vn}` has the wrong shape")));
        }
        Ok(b)
    };
    let state = TrainState {
        phase,
        iteration: meta_number(meta, "iteration")?,
        seed: meta_number(meta, "seed")?,
        detector,
        sgd,
        classifiers,
        adam,
        source_bank: bank(Domain::Source)?,
        target_bank: bank(Domain::Target)?,
    };
    Ok((state, config))
}

pub fn save_state(path: &Path, state: &TrainState, config: &Config) -> Result<()> {
    state_checkpoint(state, config)?.save(path)
}

pub fn load_state(path: &Path) -> Result<(TrainState, Config)> {
    state_from_checkpoint(&Checkpoint::load(path)?)
}
