//! Miniature two-stage detector: three-block backbone, region proposal
//! network and a two-FC RoI head, with the supervised detection loss.

mod bbox;
mod loss;
mod model;
mod nms;
mod proposals;

pub use bbox::{
    decode, encode, iou, Annotation, BBox, MAX_LOG_SCALE, ROI_DELTA_WEIGHTS, RPN_DELTA_WEIGHTS,
};
pub use loss::{
    detection_loss, detection_loss_with_proposals, label_anchors, roi_losses, rpn_loss, sample_rois, AnchorLabel, LossBreakdown,
    LossVars, RoiTargets,
};
pub use model::{BackboneOut, DetectorModel, DetectorVars, RoiOut, RpnOut};
pub use nms::nms;
pub use proposals::{detect, generate_anchors, generate_proposals, Detection, ProposalParams};

/// Total down-sampling of the backbone (three stride-2 blocks).
pub const FEATURE_STRIDE: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorConfig {
    pub classes: usize,
    pub channels: [usize; 3],
    pub rpn_channels: usize,
    pub fc_width: usize,
    pub pool_size: usize,
    /// Square anchor side lengths in pixels; one anchor per size per location.
    pub anchor_sizes: Vec<f64>,
    pub pre_nms_k: usize,
    pub post_nms_k: usize,
    pub rpn_nms_iou: f64,
    pub rpn_batch: usize,
    pub rpn_pos_iou: f64,
    pub rpn_neg_iou: f64,
    pub roi_batch: usize,
    pub roi_fg_fraction: f64,
    pub roi_fg_iou: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            classes: 3,
            channels: [16, 32, 64],
            rpn_channels: 64,
            fc_width: 64,
            pool_size: 3,
            anchor_sizes: vec![12.0, 20.0, 32.0],
            pre_nms_k: 64,
            post_nms_k: 32,
            rpn_nms_iou: 0.7,
            rpn_batch: 64,
            rpn_pos_iou: 0.7,
            rpn_neg_iou: 0.3,
            roi_batch: 32,
            roi_fg_fraction: 0.25,
            roi_fg_iou: 0.5,
        }
    }
}

impl DetectorConfig {
    pub fn anchors_per_location(&self) -> usize {
        self.anchor_sizes.len()
    }
}
