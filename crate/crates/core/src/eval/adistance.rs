use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use crate::config::{EvalConfig, ProbeLoss};
use crate::detector::DetectorModel;
use crate::domains::Sample;
use crate::error::{Error, Result};
use crate::psa::gt_features;
use crate::rng::{self, Purpose};

pub const MIN_VECTORS: usize = 20;
const L2: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DomainDistance {
    /// `2 (1 - epsilon)`.
    pub d_a: f64,
    /// Held-out error of the domain probe, flipped into `[0, 0.5]`.
    pub epsilon: f64,
}

/// FC2 features of every ground-truth region, grouped by class.
pub fn class_features(model: &DetectorModel, samples: &[Sample]) -> Result<BTreeMap<usize, Vec<Vec<f64>>>> {
    let mut out: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
    for s in samples.iter().filter(|s| !s.annotations.is_empty()) {
        let f = gt_features(model, &s.image, &s.annotations)?;
        let d = f.shape()[1];
        for (a, row) in s.annotations.iter().zip(f.data().chunks(d)) {
            out.entry(a.category).or_default().push(row.to_vec());
        }
    }
    Ok(out)
}

fn split(n: usize, fraction: f64, seed: u64, domain: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, Purpose::Probe, domain));
    let k = ((n as f64 * fraction).round() as usize).clamp(1, n - 1);
    let test = idx.split_off(k);
    (idx, test)
}

/// Linear source-vs-target probe over standardised features. Training
/// weights both domains equally; the reported error is the mean of the two
/// per-domain held-out error rates.
pub fn proxy_a_distance(
    source: &[Vec<f64>],
    target: &[Vec<f64>],
    config: &EvalConfig,
    seed: u64,
) -> Result<DomainDistance> {
    for (name, set) in [("source", source), ("target", target)] {
        if set.len() < MIN_VECTORS {
            return Err(Error::invalid(format!(
                "{name} has {} feature vectors; at least {MIN_VECTORS} are needed",
                set.len()
            )));
        }
    }
    let dim = source[0].len();
    if dim == 0 || source.iter().chain(target).any(|v| v.len() != dim) {
        return Err(Error::shape("feature vectors must share one non-zero length"));
    }
    let (s_train, s_test) = split(source.len(), config.train_fraction, seed, 0);
    let (t_train, t_test) = split(target.len(), config.train_fraction, seed, 1);
    let train: Vec<(&[f64], f64, f64)> = s_train
        .iter()
        .map(|&i| (source[i].as_slice(), 1.0, 0.5 / s_train.len() as f64))
        .chain(
            t_train
                .iter()
                .map(|&i| (target[i].as_slice(), -1.0, 0.5 / t_train.len() as f64)),
        )
        .collect();

    let n = train.len() as f64;
    let mut mean = vec![0.0; dim];
    for (x, _, _) in &train {
        mean.iter_mut().zip(*x).for_each(|(m, v)| *m += v / n);
    }
    let mut std = vec![0.0; dim];
    for (x, _, _) in &train {
        std.iter_mut()
            .zip(*x)
            .zip(&mean)
            .for_each(|((s, v), m)| *s += (v - m) * (v - m) / n);
    }
    let std: Vec<f64> = std
        .into_iter()
        .map(|v| if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 })
        .collect();
    let norm = |x: &[f64]| -> Vec<f64> {
        x.iter()
            .zip(&mean)
            .zip(&std)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    };
    let xs: Vec<Vec<f64>> = train.iter().map(|(x, _, _)| norm(x)).collect();

    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    for _ in 0..config.probe_epochs {
        let mut gw: Vec<f64> = w.iter().map(|wi| L2 * wi).collect();
        let mut gb = 0.0;
        for (x, &(_, y, weight)) in xs.iter().zip(&train) {
            let z = b + x.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
            let dz = match config.probe {
                ProbeLoss::Logistic => -y / (1.0 + (y * z).exp()),
                ProbeLoss::Hinge if y * z < 1.0 => -y,
                ProbeLoss::Hinge => 0.0,
            } * weight;
            gw.iter_mut().zip(x).for_each(|(g, v)| *g += dz * v);
            gb += dz;
        }
        w.iter_mut().zip(&gw).for_each(|(wi, g)| *wi -= config.probe_lr * g);
        b -= config.probe_lr * gb;
    }

    let error_rate = |set: &[Vec<f64>], idx: &[usize], y: f64| {
        let wrong = idx
            .iter()
            .filter(|&&i| {
                let z = b + norm(&set[i]).iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
                y * z <= 0.0
            })
            .count();
        wrong as f64 / idx.len() as f64
    };
    let error = 0.5 * (error_rate(source, &s_test, 1.0) + error_rate(target, &t_test, -1.0));
    let epsilon = error.min(1.0 - error);
    Ok(DomainDistance {
        d_a: 2.0 * (1.0 - epsilon),
        epsilon,
    })
}
