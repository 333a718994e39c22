//! Attention-weighted adversarial alignment of backbone features.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::{bilinear_upsample, Graph, Tensor, Var};
use crate::Domain;

/// Foreground attention derived from the RPN feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    /// Sigmoid of the channel-mean absolute activation, `[Hf, Wf]`.
    pub pre_filter: Tensor,
    /// Spatial mean of `pre_filter`.
    pub threshold: f64,
    /// `pre_filter` where it strictly exceeds `threshold`, zero elsewhere.
    pub filtered: Tensor,
}

impl AttentionMap {
    /// A map that contributes no weighting at all.
    pub fn zeros(h: usize, w: usize) -> Self {
        AttentionMap {
            pre_filter: Tensor::full(&[h, w], 0.5),
            threshold: 0.5,
            filtered: Tensor::zeros(&[h, w]),
        }
    }
}

pub fn compute_attention(f_rpn: &Tensor) -> Result<AttentionMap> {
    let &[1, c, h, w] = f_rpn.shape() else {
        return Err(Error::shape(format!(
            "attention expects [1, C, H, W], got {:?}",
            f_rpn.shape()
        )));
    };
    let plane = h * w;
    let mut m = vec![0.0; plane];
    for ch in f_rpn.data().chunks(plane) {
        for (acc, v) in m.iter_mut().zip(ch) {
            *acc += v.abs();
        }
    }
    for v in &mut m {
        *v = crate::tensor::sigmoid(*v / c as f64);
    }
    let (lo, hi) = m
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    // rounding can push the mean of a constant map below its value
    let threshold = (m.iter().sum::<f64>() / plane as f64).clamp(lo, hi);
    let filtered = m
        .iter()
        .map(|&v| if v > threshold { v } else { 0.0 })
        .collect();
    Ok(AttentionMap {
        pre_filter: Tensor::new(&[h, w], m)?,
        threshold,
        filtered: Tensor::new(&[h, w], filtered)?,
    })
}

/// Per-location domain classifiers, one per adapted backbone block: a 1x1
/// conv, relu, a 1x1 conv to one channel and a sigmoid.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainClassifiers {
    params: ParamSet,
}

/// Classifier parameters bound into one [`Graph`].
#[derive(Clone, Debug)]
pub struct ClassifierVars {
    vars: Vec<Var>,
}

impl ClassifierVars {
    pub fn from_vars(vars: Vec<Var>) -> Self {
        ClassifierVars { vars }
    }

    pub fn all(&self) -> &[Var] {
        &self.vars
    }

    pub fn blocks(&self) -> usize {
        self.vars.len() / 4
    }
}

impl DomainClassifiers {
    pub fn new(block_channels: &[usize], hidden: usize, seed: u64) -> Result<Self> {
        if hidden == 0 || block_channels.contains(&0) {
            return Err(Error::invalid("domain classifier widths must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for (l, &c) in block_channels.iter().enumerate() {
            let layers = [
                ("conv1", [hidden, c], (2.0 / c as f64).sqrt()),
                ("conv2", [1, hidden], 0.01),
            ];
            for (name, [out, inp], std) in layers {
                let normal = Normal::new(0.0, std).expect("positive std");
                let w = (0..out * inp).map(|_| normal.sample(&mut rng)).collect();
                params.push(
                    format!("art.block{}.{name}.weight", l + 1),
                    Tensor::new(&[out, inp, 1, 1], w)?,
                );
                params.push(
                    format!("art.block{}.{name}.bias", l + 1),
                    Tensor::zeros(&[out]),
                );
            }
        }
        Ok(DomainClassifiers { params })
    }

    pub fn from_params(params: ParamSet) -> Result<Self> {
        if params.is_empty() || params.len() % 4 != 0 {
            return Err(Error::shape(format!(
                "domain classifiers need 4 tensors per block, got {}",
                params.len()
            )));
        }
        Ok(DomainClassifiers { params })
    }

    pub fn blocks(&self) -> usize {
        self.params.len() / 4
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> ClassifierVars {
        ClassifierVars {
            vars: self.params.bind(g, trainable),
        }
    }
}

/// Probability map `[1, 1, H, W]` that `features` come from the source
/// domain, as judged by the classifier of `block`.
pub fn classify(g: &mut Graph, vars: &ClassifierVars, block: usize, features: Var) -> Result<Var> {
    if block >= vars.blocks() {
        return Err(Error::Index(format!(
            "no domain classifier for block {block}"
        )));
    }
    let v = &vars.vars[4 * block..4 * block + 4];
    let h = g.conv2d(features, v[0], v[1], 1, 0)?;
    let h = g.relu(h);
    let logits = g.conv2d(h, v[2], v[3], 1, 0)?;
    Ok(g.sigmoid(logits))
}

/// Per-location adversarial loss `[H, W]` for one block: the classifier sees
/// the features through a gradient reversal layer, so it descends the loss
/// while the backbone ascends it.
pub fn adversarial_loss_map(
    g: &mut Graph,
    features: Var,
    vars: &ClassifierVars,
    block: usize,
    domain: Domain,
    grl_coeff: f64,
) -> Result<Var> {
    let reversed = g.gradient_reverse(features, grl_coeff)?;
    let p = classify(g, vars, block, reversed)?;
    let shape = g.shape(p).to_vec();
    let target = match domain {
        Domain::Source => 1.0,
        Domain::Target => 0.0,
    };
    let bce = g.binary_cross_entropy(p, &vec![target; shape[2] * shape[3]])?;
    g.reshape(bce, &[shape[2], shape[3]])
}

/// How per-block weighted losses are reduced before summing over blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Reduction {
    /// Plain sum over every cell of every block.
    #[default]
    Sum,
    /// Mean over the cells of each block, summed over blocks.
    MeanPerBlock,
}

/// Attention-weighted adversarial loss: each block's loss map is weighted by
/// `1 + A` up-sampled to the block's size. The attention is a constant.
pub fn art_loss(
    g: &mut Graph,
    loss_maps: &[Var],
    attention: &AttentionMap,
    reduction: Reduction,
) -> Result<Var> {
    let &[ah, aw] = attention.filtered.shape() else {
        return Err(Error::shape("attention map must be [H, W]"));
    };
    let mut total: Option<Var> = None;
    for &map in loss_maps {
        let &[h, w] = g.shape(map) else {
            return Err(Error::shape(format!(
                "adversarial loss map must be [H, W], got {:?}",
                g.shape(map)
            )));
        };
        if h < ah || w < aw {
            return Err(Error::shape(format!(
                "block size {h}x{w} is smaller than attention size {ah}x{aw}"
            )));
        }
        let mut weight = bilinear_upsample(&attention.filtered, h, w)?;
        weight.data_mut().iter_mut().for_each(|v| *v += 1.0);
        let weight = g.constant(weight);
        let weighted = g.mul(map, weight)?;
        let term = match reduction {
            Reduction::Sum => g.sum(weighted),
            Reduction::MeanPerBlock => g.mean(weighted),
        };
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    Ok(total.unwrap_or_else(|| g.constant(Tensor::scalar(0.0))))
}
