use rand::Rng;
use serde::{Deserialize, Serialize};

use super::proposals::{self, RpnSampling};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::BBox;

/// Smooth-L1 transition point for RPN deltas.
pub const RPN_SMOOTH_BETA: f64 = 1.0 / 9.0;
pub const ROI_SMOOTH_BETA: f64 = 1.0;

/// Whether object-level triplets are available.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CameraMode {
    /// Source, target and auxiliary share a viewpoint; every term is used.
    #[default]
    Aligned,
    /// Views differ, so the object-level triplet term is dropped.
    CrossCamera,
}

/// Raw loss components of one iteration, before weighting.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub l_cls: f64,
    pub l_reg: f64,
    pub l_img: f64,
    pub l_obj: f64,
    pub l_r_img: f64,
    pub l_r_obj: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_cls: f64,
    pub l_reg: f64,
    pub l_img: f64,
    pub l_obj: f64,
    pub l_r_img: f64,
    pub l_r_obj: f64,
    pub gamma: f64,
    pub total: f64,
}

impl LossBundle {
    /// Recomputes the weighted total from the stored parts.
    pub fn recompute(&self) -> f64 {
        self.gamma * (self.l_img + self.l_obj + self.l_r_img + self.l_r_obj) + self.l_cls + self.l_reg
    }
}

/// Weights of each part in the total, in the order of [`LossParts`].
pub fn loss_weights(gamma: f64, camera: CameraMode) -> [f64; 6] {
    let r_obj = match camera {
        CameraMode::Aligned => gamma,
        CameraMode::CrossCamera => 0.0,
    };
    [1.0, 1.0, gamma, gamma, gamma, r_obj]
}

/// Combines detection, domain and triplet losses. In cross-camera mode the
/// object-level triplet term is omitted and reported as zero.
pub fn total_loss(parts: LossParts, gamma: f64, camera: CameraMode) -> Result<LossBundle> {
    let named = [
        ("L_cls", parts.l_cls),
        ("L_reg", parts.l_reg),
        ("L_img", parts.l_img),
        ("L_obj", parts.l_obj),
        ("L^R_img", parts.l_r_img),
        ("L^R_obj", parts.l_r_obj),
        ("gamma", gamma),
    ];
    if let Some((name, _)) = named.iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite(name));
    }
    let l_r_obj = match camera {
        CameraMode::Aligned => parts.l_r_obj,
        CameraMode::CrossCamera => 0.0,
    };
    let mut bundle = LossBundle {
        l_cls: parts.l_cls,
        l_reg: parts.l_reg,
        l_img: parts.l_img,
        l_obj: parts.l_obj,
        l_r_img: parts.l_r_img,
        l_r_obj,
        gamma,
        total: 0.0,
    };
    bundle.total = bundle.recompute();
    if !bundle.total.is_finite() {
        return Err(Error::NonFinite("total"));
    }
    Ok(bundle)
}

/// Ground truth of one labelled image.
#[derive(Clone, Copy, Debug)]
pub struct GroundTruth<'a> {
    pub boxes: &'a [BBox],
    pub labels: &'a [usize],
}

/// First- and second-stage outputs needed by the detection losses.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutputs<'a> {
    /// `[A, H, W]`
    pub objectness: Var,
    /// `[4A, H, W]`
    pub rpn_deltas: Var,
    pub anchors: &'a [BBox],
    pub anchor_sizes: usize,
    /// Regions scored by the second stage.
    pub rois: &'a [BBox],
    /// `[R, classes + 1]`
    pub cls_logits: Var,
    /// `[R, 4 * classes]`
    pub box_deltas: Var,
}

/// Classification and regression losses, each summed over both stages.
#[derive(Clone, Copy, Debug)]
pub struct DetLosses {
    pub cls: Var,
    pub reg: Var,
}

/// Detection losses for one image. Images without ground truth produce no
/// loss at all.
pub fn det_losses(
    tape: &mut Tape,
    out: &HeadOutputs,
    gt: Option<GroundTruth>,
    classes: usize,
    fg_iou: f64,
    sampling: &RpnSampling,
    rng: &mut impl Rng,
) -> Result<Option<DetLosses>> {
    let Some(gt) = gt else {
        return Ok(None);
    };
    let rpn = proposals::rpn_targets(out.anchors, out.anchor_sizes, gt.boxes, sampling, rng);
    let norm = rpn.sampled.max(1) as f64;
    let rpn_cls = tape.bce_logits(out.objectness, rpn.labels, rpn.weights, norm)?;
    let rpn_reg = tape.smooth_l1(out.rpn_deltas, rpn.deltas, rpn.delta_weights, RPN_SMOOTH_BETA, norm)?;
    let (roi_cls, roi_reg) = roi_losses(tape, out.cls_logits, out.box_deltas, out.rois, gt, classes, fg_iou)?;
    Ok(Some(DetLosses {
        cls: tape.weighted_sum(&[(rpn_cls, 1.0), (roi_cls, 1.0)]),
        reg: tape.weighted_sum(&[(rpn_reg, 1.0), (roi_reg, 1.0)]),
    }))
}

/// Cross-entropy over classes plus background, and smooth-L1 on the deltas
/// of regions matched at IoU >= `fg_iou`, averaged over regions.
pub fn roi_losses(
    tape: &mut Tape,
    cls_logits: Var,
    box_deltas: Var,
    rois: &[BBox],
    gt: GroundTruth,
    classes: usize,
    fg_iou: f64,
) -> Result<(Var, Var)> {
    let targets = proposals::roi_targets(rois, gt.boxes, gt.labels, classes, fg_iou);
    let cls = tape.softmax_ce(cls_logits, &targets.labels)?;
    let norm = rois.len().max(1) as f64;
    let reg = tape.smooth_l1(box_deltas, targets.deltas, targets.delta_weights, ROI_SMOOTH_BETA, norm)?;
    Ok((cls, reg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Params;
    use crate::tensor::Tensor;

    #[test]
    fn identity_examples() {
        let b = total_loss(LossParts::default(), 0.1, CameraMode::Aligned).unwrap();
        assert_eq!(b.total, 0.0);
        let parts = LossParts {
            l_cls: 0.7,
            l_reg: 0.2,
            ..Default::default()
        };
        let b = total_loss(parts, 0.1, CameraMode::Aligned).unwrap();
        assert!((b.total - 0.9).abs() < 1e-12);
        let parts = LossParts {
            l_img: 1.0,
            l_obj: 1.0,
            l_r_img: 1.0,
            l_r_obj: 1.0,
            ..Default::default()
        };
        let b = total_loss(parts, 0.1, CameraMode::Aligned).unwrap();
        assert!((b.total - 0.4).abs() < 1e-12);
        let b = total_loss(parts, 0.1, CameraMode::CrossCamera).unwrap();
        assert!((b.total - 0.3).abs() < 1e-12);
        assert_eq!(b.l_r_obj, 0.0);
    }

    #[test]
    fn gamma_sweep() {
        let parts = LossParts {
            l_cls: 1.0,
            l_img: 2.0,
            ..Default::default()
        };
        for gamma in [0.1, 0.01, 0.001] {
            let b = total_loss(parts, gamma, CameraMode::Aligned).unwrap();
            assert_eq!(b.total, 1.0 + 2.0 * gamma);
        }
    }

    #[test]
    fn nan_names_the_part() {
        let parts = LossParts {
            l_obj: f64::NAN,
            ..Default::default()
        };
        let err = total_loss(parts, 0.1, CameraMode::Aligned).unwrap_err();
        assert!(err.to_string().contains("L_obj"), "{err}");
    }

    fn roi_case(logits: Vec<f64>, deltas: Vec<f64>, rois: &[BBox], gt: GroundTruth) -> (f64, f64) {
        let params = Params::new();
        let mut tape = Tape::new(&params);
        let r = rois.len();
        let z = tape.constant(Tensor::new(&[r, logits.len() / r], logits).unwrap());
        let d = tape.constant(Tensor::new(&[r, deltas.len() / r], deltas).unwrap());
        let (cls, reg) = roi_losses(&mut tape, z, d, rois, gt, 1, 0.5).unwrap();
        (tape.scalar(cls), tape.scalar(reg))
    }

    #[test]
    fn perfect_predictions() {
        let gt_box = [BBox::new(10.0, 10.0, 30.0, 30.0)];
        let gt = GroundTruth {
            boxes: &gt_box,
            labels: &[0],
        };
        let (cls, reg) = roi_case(vec![-30.0, 30.0], vec![0.0; 4], &gt_box, gt);
        assert!(cls < 1e-12);
        assert_eq!(reg, 0.0);
    }

    #[test]
    fn no_positive_match_has_zero_regression() {
        let gt_box = [BBox::new(0.0, 0.0, 10.0, 10.0)];
        let gt = GroundTruth {
            boxes: &gt_box,
            labels: &[0],
        };
        let rois = [BBox::new(40.0, 40.0, 60.0, 60.0)];
        let (_, reg) = roi_case(vec![0.0, 0.0], vec![3.0, -2.0, 1.0, 0.5], &rois, gt);
        assert_eq!(reg, 0.0);
    }

    #[test]
    fn single_box_smooth_l1_by_hand() {
        // roi and gt differ only by a 2 px horizontal shift of a 20 px box:
        // target dx = 10 * 2 / 20 = 1.0, all other deltas 0.
        let gt_box = [BBox::new(12.0, 10.0, 32.0, 30.0)];
        let gt = GroundTruth {
            boxes: &gt_box,
            labels: &[0],
        };
        let rois = [BBox::new(10.0, 10.0, 30.0, 30.0)];
        // Predictions 0.25 off in dx (quadratic branch) and 2.0 off in dw (linear branch).
        let (_, reg) = roi_case(vec![0.0, 0.0], vec![1.25, 0.0, 2.0, 0.0], &rois, gt);
        let expected = 0.5 * 0.25 * 0.25 + (2.0 - 0.5);
        assert!((reg - expected).abs() < 1e-12, "{reg} vs {expected}");
    }

    #[test]
    fn missing_ground_truth_skips_losses() {
        let params = Params::new();
        let mut tape = Tape::new(&params);
        let z = tape.constant(Tensor::zeros(&[1, 1, 1]));
        let out = HeadOutputs {
            objectness: z,
            rpn_deltas: z,
            anchors: &[],
            anchor_sizes: 1,
            rois: &[],
            cls_logits: z,
            box_deltas: z,
        };
        let mut rng = crate::seeds::rng_for(0, &[]);
        let r = det_losses(&mut tape, &out, None, 3, 0.5, &RpnSampling::default(), &mut rng).unwrap();
        assert!(r.is_none());
    }
}
