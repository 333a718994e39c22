use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::bbox::BBox;
use super::{DetectorConfig, FEATURE_STRIDE};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::{Graph, RoiSample, Tensor, Var};

const BLOCKS: [usize; 3] = [0, 1, 2];
const RPN_CONV: usize = 3;
const RPN_OBJ: usize = 4;
const RPN_DELTA: usize = 5;
const FC1: usize = 6;
const FC2: usize = 7;
const CLS: usize = 8;
const BBOX: usize = 9;

const LAYER_NAMES: [&str; 10] = [
    "detector.backbone.block1",
    "detector.backbone.block2",
    "detector.backbone.block3",
    "detector.rpn.conv",
    "detector.rpn.objectness",
    "detector.rpn.deltas",
    "detector.roi.fc1",
    "detector.roi.fc2",
    "detector.roi.cls",
    "detector.roi.bbox",
];

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorModel {
    config: DetectorConfig,
    params: ParamSet,
}

/// Detector parameters bound into one [`Graph`].
#[derive(Clone, Debug)]
pub struct DetectorVars {
    vars: Vec<Var>,
}

impl DetectorVars {
    fn layer(&self, i: usize) -> (Var, Var) {
        (self.vars[2 * i], self.vars[2 * i + 1])
    }

    /// Wraps handles already bound in [`ParamSet`] order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        DetectorVars { vars }
    }

    /// All parameter handles in [`ParamSet`] order.
    pub fn all(&self) -> &[Var] {
        &self.vars
    }
}

pub struct BackboneOut {
    pub blocks: [Var; 3],
}

impl BackboneOut {
    pub fn top(&self) -> Var {
        self.blocks[2]
    }
}

pub struct RpnOut {
    /// Post-relu shared conv output, `[1, Cr, Hf, Wf]`.
    pub f_rpn: Var,
    /// Sigmoid objectness, `[1, A, Hf, Wf]`.
    pub objectness: Var,
    /// Box deltas, `[1, 4A, Hf, Wf]`.
    pub deltas: Var,
}

pub struct RoiOut {
    /// Post-relu second FC layer, `[R, Dfc]`.
    pub fc2: Var,
    /// Raw class logits, `[R, C+1]`.
    pub logits: Var,
    /// Softmax class scores, `[R, C+1]`; column 0 is background.
    pub scores: Var,
    /// Class-specific box deltas, `[R, 4(C+1)]`.
    pub box_deltas: Var,
}

fn layer_shapes(c: &DetectorConfig) -> Vec<(Vec<usize>, f64)> {
    let [c1, c2, c3] = c.channels;
    let a = c.anchors_per_location();
    let pooled = c3 * c.pool_size * c.pool_size;
    let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();
    vec![
        (vec![c1, 3, 3, 3], he(27)),
        (vec![c2, c1, 3, 3], he(c1 * 9)),
        (vec![c3, c2, 3, 3], he(c2 * 9)),
        (vec![c.rpn_channels, c3, 3, 3], he(c3 * 9)),
        (vec![a, c.rpn_channels, 1, 1], 0.01),
        (vec![4 * a, c.rpn_channels, 1, 1], 0.01),
        (vec![c.fc_width, pooled], he(pooled)),
        (vec![c.fc_width, c.fc_width], he(c.fc_width)),
        (vec![c.classes + 1, c.fc_width], 0.01),
        (vec![4 * (c.classes + 1), c.fc_width], 0.001),
    ]
}

impl DetectorModel {
    /// Randomly initialised model: He-normal hidden layers, small-normal
    /// heads, zero biases.
    pub fn new(config: DetectorConfig, seed: u64) -> Result<Self> {
        if config.classes == 0 || config.anchor_sizes.is_empty() || config.pool_size == 0 {
            return Err(Error::invalid("detector needs classes, anchors and a pool size"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for ((shape, std), name) in layer_shapes(&config).into_iter().zip(LAYER_NAMES) {
            let normal = Normal::new(0.0, std).expect("positive std");
            let n: usize = shape.iter().product();
            let w = (0..n).map(|_| normal.sample(&mut rng)).collect();
            params.push(format!("{name}.weight"), Tensor::new(&shape, w)?);
            params.push(format!("{name}.bias"), Tensor::zeros(&[shape[0]]));
        }
        Ok(DetectorModel { config, params })
    }

    /// Wraps existing parameters after validating names and shapes.
    pub fn from_params(config: DetectorConfig, params: ParamSet) -> Result<Self> {
        let expected = DetectorModel::new(config.clone(), 0)?;
        if expected.params.len() != params.len() {
            return Err(Error::shape(format!(
                "detector expects {} tensors, got {}",
                expected.params.len(),
                params.len()
            )));
        }
        for ((en, et), (n, t)) in expected.params.iter().zip(params.iter()) {
            if en != n || et.shape() != t.shape() {
                return Err(Error::shape(format!(
                    "detector tensor `{n}` {:?} does not match expected `{en}` {:?}",
                    t.shape(),
                    et.shape()
                )));
            }
        }
        Ok(DetectorModel { config, params })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> DetectorVars {
        DetectorVars {
            vars: self.params.bind(g, trainable),
        }
    }

    /// Loads a `[3, H, W]` image in `[0, 1]` as a `[1, 3, H, W]` constant.
    pub fn image_input(g: &mut Graph, image: &Tensor) -> Result<Var> {
        let &[3, h, w] = image.shape() else {
            return Err(Error::shape(format!(
                "image must be [3, H, W], got {:?}",
                image.shape()
            )));
        };
        if h % FEATURE_STRIDE != 0 || w % FEATURE_STRIDE != 0 {
            return Err(Error::shape(format!(
                "image size {h}x{w} is not divisible by {FEATURE_STRIDE}"
            )));
        }
        Ok(g.constant(image.clone().reshape(&[1, 3, h, w])?))
    }

    /// Three conv+relu blocks, each halving the spatial size.
    pub fn backbone_forward(
        &self,
        g: &mut Graph,
        vars: &DetectorVars,
        image: &Tensor,
    ) -> Result<BackboneOut> {
        let mut x = Self::image_input(g, image)?;
        let mut blocks = [x; 3];
        for (slot, &layer) in blocks.iter_mut().zip(&BLOCKS) {
            let (w, b) = vars.layer(layer);
            let y = g.conv2d(x, w, b, 2, 1)?;
            x = g.relu(y);
            *slot = x;
        }
        Ok(BackboneOut { blocks })
    }

    pub fn rpn_forward(&self, g: &mut Graph, vars: &DetectorVars, top: Var) -> Result<RpnOut> {
        let (w, b) = vars.layer(RPN_CONV);
        let h = g.conv2d(top, w, b, 1, 1)?;
        let f_rpn = g.relu(h);
        let (w, b) = vars.layer(RPN_OBJ);
        let logits = g.conv2d(f_rpn, w, b, 1, 0)?;
        let objectness = g.sigmoid(logits);
        let (w, b) = vars.layer(RPN_DELTA);
        let deltas = g.conv2d(f_rpn, w, b, 1, 0)?;
        Ok(RpnOut {
            f_rpn,
            objectness,
            deltas,
        })
    }

    /// Bilinear crop-and-resize of each RoI to a `P x P` grid over `top`,
    /// sampled at bin centres.
    pub fn roi_samples(&self, top_shape: &[usize], rois: &[BBox]) -> Vec<RoiSample> {
        let (hf, wf) = (top_shape[2], top_shape[3]);
        let p = self.config.pool_size;
        let scale = 1.0 / FEATURE_STRIDE as f64;
        let mut samples = Vec::with_capacity(rois.len() * p * p);
        for roi in rois {
            let mut fw = roi.width() * scale;
            let mut fh = roi.height() * scale;
            if fw < 1.0 || fh < 1.0 {
                log::debug!("RoI {roi:?} smaller than one feature cell; clamping pooling window");
                fw = fw.max(1.0);
                fh = fh.max(1.0);
            }
            let (x0, y0) = (roi.x_min * scale, roi.y_min * scale);
            for i in 0..p {
                for j in 0..p {
                    let y = y0 + (i as f64 + 0.5) * fh / p as f64 - 0.5;
                    let x = x0 + (j as f64 + 0.5) * fw / p as f64 - 0.5;
                    samples.push(RoiSample::at(y, x, hf, wf));
                }
            }
        }
        samples
    }

    pub fn roi_head_forward(
        &self,
        g: &mut Graph,
        vars: &DetectorVars,
        top: Var,
        rois: &[BBox],
    ) -> Result<RoiOut> {
        let p = self.config.pool_size;
        let samples = self.roi_samples(g.shape(top), rois);
        let pooled = g.roi_align(top, samples, p * p)?;
        let (w, b) = vars.layer(FC1);
        let h = g.linear(pooled, w, b)?;
        let h = g.relu(h);
        let (w, b) = vars.layer(FC2);
        let h = g.linear(h, w, b)?;
        let fc2 = g.relu(h);
        let (w, b) = vars.layer(CLS);
        let logits = g.linear(fc2, w, b)?;
        let scores = g.softmax_rows(logits)?;
        let (w, b) = vars.layer(BBOX);
        let box_deltas = g.linear(fc2, w, b)?;
        Ok(RoiOut {
            fc2,
            logits,
            scores,
            box_deltas,
        })
    }
}
