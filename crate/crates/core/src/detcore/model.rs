//! The toy two-stage detector: a four-block stride-8 backbone, a single-level
//! RPN, ROI pooling and a two-layer box head, plus both domain classifiers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::proposals::{self, ProposalParams, ProposalSet, ROI_BOX_WEIGHTS};
use crate::autograd::{Params, PoolMode, Tape, Var};
use crate::daheads::{DomainHeadsConfig, ImageDomainClassifier, ObjectDomainClassifier};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::layers::{Conv2d, Linear};
use crate::raster::Image;
use crate::tensor::Tensor;

/// Total downsampling of the backbone.
pub const FEATURE_STRIDE: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoiPoolMode {
    Max,
    Mean,
}

impl From<RoiPoolMode> for PoolMode {
    fn from(m: RoiPoolMode) -> Self {
        match m {
            RoiPoolMode::Max => PoolMode::Max,
            RoiPoolMode::Mean => PoolMode::Mean,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub classes: usize,
    pub backbone_channels: [usize; 4],
    pub rpn_channels: usize,
    pub anchor_sizes: Vec<f64>,
    pub pool_size: usize,
    pub pool_mode: RoiPoolMode,
    pub head_hidden: usize,
    pub train_pre_nms: usize,
    pub train_proposals: usize,
    pub test_pre_nms: usize,
    pub test_proposals: usize,
    pub rpn_nms_iou: f64,
    pub fg_iou: f64,
    pub score_threshold: f64,
    pub detection_nms_iou: f64,
    pub max_detections: usize,
    pub domain_heads: DomainHeadsConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            classes: 3,
            backbone_channels: [16, 32, 48, 64],
            rpn_channels: 32,
            anchor_sizes: vec![14.0, 20.0, 28.0],
            pool_size: 4,
            pool_mode: RoiPoolMode::Max,
            head_hidden: 128,
            train_pre_nms: 100,
            train_proposals: 24,
            test_pre_nms: 100,
            test_proposals: 32,
            rpn_nms_iou: 0.7,
            fg_iou: 0.5,
            score_threshold: 0.05,
            detection_nms_iou: 0.5,
            max_detections: 20,
            domain_heads: DomainHeadsConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.anchor_sizes.is_empty() || self.pool_size == 0 {
            return Err(Error::Input("model needs classes, anchors and a pool size".into()));
        }
        if self.backbone_channels.iter().any(|&c| c == 0) {
            return Err(Error::Input("backbone channels must be positive".into()));
        }
        Ok(())
    }

    pub fn pooled_features(&self) -> usize {
        self.backbone_channels[3] * self.pool_size * self.pool_size
    }

    fn proposal_params(&self, training: bool) -> ProposalParams {
        ProposalParams {
            pre_nms_top: if training { self.train_pre_nms } else { self.test_pre_nms },
            post_nms_top: if training { self.train_proposals } else { self.test_proposals },
            nms_iou: self.rpn_nms_iou,
            min_size: 2.0,
        }
    }
}

/// One detection: box, class index and confidence.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class: usize,
    pub score: f64,
}

#[derive(Clone, Debug)]
pub struct Detector {
    pub cfg: ModelConfig,
    backbone: [Conv2d; 4],
    rpn_conv: Conv2d,
    rpn_objectness: Conv2d,
    rpn_deltas: Conv2d,
    fc1: Linear,
    fc2: Linear,
    cls: Linear,
    bbox: Linear,
    pub image_domain: ImageDomainClassifier,
    pub object_domain: ObjectDomainClassifier,
}

/// RPN outputs for one image.
pub struct RpnOutput {
    /// `[A, H, W]`
    pub objectness: Var,
    /// `[4A, H, W]`
    pub deltas: Var,
}

impl Detector {
    pub fn new(cfg: ModelConfig, rng: &mut impl Rng) -> Result<(Self, Params)> {
        cfg.validate()?;
        let mut p = Params::new();
        let [c1, c2, c3, c4] = cfg.backbone_channels;
        let backbone = [
            Conv2d::new(&mut p, "backbone.0", 3, c1, 3, 2, 1, rng),
            Conv2d::new(&mut p, "backbone.1", c1, c2, 3, 2, 1, rng),
            Conv2d::new(&mut p, "backbone.2", c2, c3, 3, 1, 1, rng),
            Conv2d::new(&mut p, "backbone.3", c3, c4, 3, 2, 1, rng),
        ];
        let a = cfg.anchor_sizes.len();
        let rpn_conv = Conv2d::new(&mut p, "rpn.conv", c4, cfg.rpn_channels, 3, 1, 1, rng);
        let rpn_objectness = Conv2d::new(&mut p, "rpn.objectness", cfg.rpn_channels, a, 1, 1, 0, rng);
        let rpn_deltas = Conv2d::new(&mut p, "rpn.deltas", cfg.rpn_channels, 4 * a, 1, 1, 0, rng);
        for id in [rpn_objectness.weight, rpn_deltas.weight] {
            scale_param(&mut p, id, 0.01 / (2.0 / cfg.rpn_channels as f64).sqrt());
        }
        let pooled = cfg.pooled_features();
        let fc1 = Linear::new(&mut p, "head.fc1", pooled, cfg.head_hidden, rng);
        let fc2 = Linear::new(&mut p, "head.fc2", cfg.head_hidden, cfg.head_hidden, rng);
        let cls = Linear::with_std(&mut p, "head.cls", cfg.head_hidden, cfg.classes + 1, 0.01, rng);
        let bbox = Linear::with_std(&mut p, "head.bbox", cfg.head_hidden, 4 * cfg.classes, 0.001, rng);
        let image_domain = ImageDomainClassifier::new(&mut p, c4, cfg.domain_heads.image_hidden, rng);
        let object_domain = ObjectDomainClassifier::new(&mut p, pooled, cfg.domain_heads.object_hidden, rng);
        Ok((
            Self {
                cfg,
                backbone,
                rpn_conv,
                rpn_objectness,
                rpn_deltas,
                fc1,
                fc2,
                cls,
                bbox,
                image_domain,
                object_domain,
            },
            p,
        ))
    }

    pub fn backbone_layers(&self) -> &[Conv2d; 4] {
        &self.backbone
    }

    pub fn image_tensor(image: &Image) -> Tensor {
        Tensor::new(&[image.channels(), image.height(), image.width()], image.data().to_vec())
            .expect("image layout is CHW")
    }

    /// Backbone feature map `[C, H/8, W/8]`.
    pub fn backbone_forward(&self, tape: &mut Tape, image: Var) -> Result<Var> {
        let mut x = image;
        for layer in &self.backbone {
            let y = layer.forward(tape, x)?;
            x = tape.relu(y);
        }
        Ok(x)
    }

    pub fn rpn_forward(&self, tape: &mut Tape, features: Var) -> Result<RpnOutput> {
        let h = self.rpn_conv.forward(tape, features)?;
        let h = tape.relu(h);
        Ok(RpnOutput {
            objectness: self.rpn_objectness.forward(tape, h)?,
            deltas: self.rpn_deltas.forward(tape, h)?,
        })
    }

    pub fn anchors(&self, feat_h: usize, feat_w: usize) -> Vec<BBox> {
        proposals::anchor_grid(feat_h, feat_w, FEATURE_STRIDE, &self.cfg.anchor_sizes)
    }

    pub fn proposals(&self, tape: &Tape, features: Var, rpn: &RpnOutput, training: bool) -> ProposalSet {
        let shape = tape.value(features).shape();
        let (fh, fw) = (shape[1], shape[2]);
        let anchors = self.anchors(fh, fw);
        proposals::propose_regions(
            tape.value(rpn.objectness).data(),
            tape.value(rpn.deltas).data(),
            &anchors,
            self.cfg.anchor_sizes.len(),
            (fw * FEATURE_STRIDE) as f64,
            (fh * FEATURE_STRIDE) as f64,
            &self.cfg.proposal_params(training),
        )
    }

    /// Pooled region features `[boxes, C * pool * pool]`.
    pub fn roi_features(&self, tape: &mut Tape, features: Var, boxes: &[BBox]) -> Result<Var> {
        let cells: Vec<[usize; 4]> = boxes.iter().map(|b| to_cells(b, FEATURE_STRIDE)).collect();
        tape.roi_pool(features, &cells, self.cfg.pool_size, self.cfg.pool_mode.into())
    }

    /// Class logits `[R, classes + 1]` and class-specific deltas `[R, 4 * classes]`.
    pub fn head_forward(&self, tape: &mut Tape, pooled: Var) -> Result<(Var, Var)> {
        let h = self.fc1.forward(tape, pooled)?;
        let h = tape.relu(h);
        let h = self.fc2.forward(tape, h)?;
        let h = tape.relu(h);
        Ok((self.cls.forward(tape, h)?, self.bbox.forward(tape, h)?))
    }

    /// Runs the full detector on one image.
    pub fn detect(&self, params: &Params, image: &Image) -> Result<Vec<Detection>> {
        let mut tape = Tape::new(params);
        let x = tape.constant(Self::image_tensor(image));
        let f = self.backbone_forward(&mut tape, x)?;
        let rpn = self.rpn_forward(&mut tape, f)?;
        let props = self.proposals(&tape, f, &rpn, false);
        if props.is_empty() {
            return Ok(Vec::new());
        }
        let pooled = self.roi_features(&mut tape, f, &props.boxes)?;
        let (logits, deltas) = self.head_forward(&mut tape, pooled)?;
        let k = self.cfg.classes + 1;
        let logits = tape.value(logits).data();
        let deltas = tape.value(deltas).data();
        let (w, h) = (image.width() as f64, image.height() as f64);
        let mut per_class: Vec<(Vec<BBox>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); self.cfg.classes];
        for (r, proposal) in props.boxes.iter().enumerate() {
            let probs = softmax(&logits[r * k..(r + 1) * k]);
            for c in 0..self.cfg.classes {
                let score = probs[c + 1];
                if score < self.cfg.score_threshold {
                    continue;
                }
                let d = [0, 1, 2, 3].map(|j| deltas[r * 4 * self.cfg.classes + 4 * c + j]);
                let b = proposal.decode(d, ROI_BOX_WEIGHTS).clip(w, h);
                if b.is_valid() {
                    per_class[c].0.push(b);
                    per_class[c].1.push(score);
                }
            }
        }
        let mut dets = Vec::new();
        for (c, (boxes, scores)) in per_class.iter().enumerate() {
            for i in proposals::nms(boxes, scores, self.cfg.detection_nms_iou) {
                dets.push(Detection {
                    bbox: boxes[i],
                    class: c,
                    score: scores[i],
                });
            }
        }
        let order = proposals::order_by_score(&dets.iter().map(|d| d.score).collect::<Vec<_>>());
        let mut out: Vec<Detection> = order.into_iter().map(|i| dets[i]).collect();
        out.truncate(self.cfg.max_detections);
        Ok(out)
    }

    /// Backbone features of one image, without building a gradient graph.
    pub fn features(&self, params: &Params, image: &Image) -> Result<Tensor> {
        let mut tape = Tape::new(params);
        let x = tape.constant(Self::image_tensor(image));
        let f = self.backbone_forward(&mut tape, x)?;
        Ok(tape.value(f).clone())
    }
}

/// Box in pixels to the covering range of feature cells `[x0, y0, x1, y1)`.
pub fn to_cells(b: &BBox, stride: usize) -> [usize; 4] {
    let s = stride as f64;
    let x0 = (b.x_min / s).floor().max(0.0) as usize;
    let y0 = (b.y_min / s).floor().max(0.0) as usize;
    let x1 = ((b.x_max / s).ceil() as usize).max(x0 + 1);
    let y1 = ((b.y_max / s).ceil() as usize).max(y0 + 1);
    [x0, y0, x1, y1]
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn scale_param(p: &mut Params, id: crate::autograd::ParamId, factor: f64) {
    for v in p.get_mut(id).data_mut() {
        *v *= factor;
    }
}
