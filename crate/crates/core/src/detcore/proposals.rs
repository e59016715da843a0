//! Anchors, non-maximum suppression, region proposals and training targets.

use std::cmp::Ordering;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::geometry::{iou, BBox};

pub const RPN_BOX_WEIGHTS: [f64; 4] = [1.0, 1.0, 1.0, 1.0];
pub const ROI_BOX_WEIGHTS: [f64; 4] = [10.0, 10.0, 5.0, 5.0];

/// Square anchors of every size at every cell center, ordered
/// `(size, row, col)` to match the `[A, H, W]` objectness layout.
pub fn anchor_grid(feat_h: usize, feat_w: usize, stride: usize, sizes: &[f64]) -> Vec<BBox> {
    let mut anchors = Vec::with_capacity(sizes.len() * feat_h * feat_w);
    for &s in sizes {
        for y in 0..feat_h {
            for x in 0..feat_w {
                let cx = (x as f64 + 0.5) * stride as f64;
                let cy = (y as f64 + 0.5) * stride as f64;
                anchors.push(BBox::from_center(cx, cy, s, s));
            }
        }
    }
    anchors
}

/// Index order by descending score; ties keep the lower index first.
pub fn order_by_score(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

/// Greedy NMS. Returns kept indices in descending score order.
pub fn nms(boxes: &[BBox], scores: &[f64], iou_threshold: f64) -> Vec<usize> {
    let mut keep: Vec<usize> = Vec::new();
    for i in order_by_score(scores) {
        if keep.iter().all(|&k| iou(&boxes[k], &boxes[i]) <= iou_threshold) {
            keep.push(i);
        }
    }
    keep
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProposalSet {
    /// Sorted by descending score, clipped to the image.
    pub boxes: Vec<BBox>,
    pub scores: Vec<f64>,
}

impl ProposalSet {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProposalParams {
    pub pre_nms_top: usize,
    pub post_nms_top: usize,
    pub nms_iou: f64,
    pub min_size: f64,
}

/// Decodes anchor deltas, clips, drops tiny boxes, keeps the `pre_nms_top`
/// best, suppresses at `nms_iou`, and returns at most `post_nms_top` boxes.
///
/// `deltas` is laid out `[4A, H, W]` against anchors ordered `[A, H, W]`.
pub fn propose_regions(
    objectness: &[f64],
    deltas: &[f64],
    anchors: &[BBox],
    sizes: usize,
    image_w: f64,
    image_h: f64,
    params: &ProposalParams,
) -> ProposalSet {
    if params.post_nms_top == 0 {
        return ProposalSet {
            boxes: Vec::new(),
            scores: Vec::new(),
        };
    }
    let n = anchors.len();
    let cells = n / sizes;
    let mut boxes = Vec::with_capacity(n);
    let mut scores = Vec::with_capacity(n);
    for (i, anchor) in anchors.iter().enumerate() {
        let (a, cell) = (i / cells, i % cells);
        let d = [0, 1, 2, 3].map(|k| deltas[(4 * a + k) * cells + cell]);
        let b = anchor.decode(d, RPN_BOX_WEIGHTS).clip(image_w, image_h);
        if b.width() >= params.min_size && b.height() >= params.min_size {
            boxes.push(b);
            scores.push(objectness[i]);
        }
    }
    let mut order = order_by_score(&scores);
    order.truncate(params.pre_nms_top);
    let top_boxes: Vec<BBox> = order.iter().map(|&i| boxes[i]).collect();
    let top_scores: Vec<f64> = order.iter().map(|&i| scores[i]).collect();
    let mut keep = nms(&top_boxes, &top_scores, params.nms_iou);
    keep.truncate(params.post_nms_top);
    ProposalSet {
        boxes: keep.iter().map(|&k| top_boxes[k]).collect(),
        scores: keep.iter().map(|&k| top_scores[k]).collect(),
    }
}

/// Per-anchor RPN training targets.
#[derive(Clone, Debug, PartialEq)]
pub struct RpnTargets {
    /// 1 for foreground, 0 for background, in `[A, H, W]` order.
    pub labels: Vec<f64>,
    /// Sampled anchors have weight 1, the rest 0.
    pub weights: Vec<f64>,
    /// `[4A, H, W]` layout, matching the delta head.
    pub deltas: Vec<f64>,
    pub delta_weights: Vec<f64>,
    pub sampled: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RpnSampling {
    pub positive_iou: f64,
    pub negative_iou: f64,
    pub batch: usize,
    pub positive_fraction: f64,
}

impl Default for RpnSampling {
    fn default() -> Self {
        Self {
            positive_iou: 0.7,
            negative_iou: 0.3,
            batch: 64,
            positive_fraction: 0.5,
        }
    }
}

pub fn rpn_targets(
    anchors: &[BBox],
    sizes: usize,
    gt: &[BBox],
    sampling: &RpnSampling,
    rng: &mut impl Rng,
) -> RpnTargets {
    let n = anchors.len();
    let cells = n / sizes;
    // -1 ignore, 0 negative, 1 positive.
    let mut state = vec![-1i8; n];
    let mut matched = vec![usize::MAX; n];
    let mut best_for_gt = vec![0.0f64; gt.len()];
    for (i, a) in anchors.iter().enumerate() {
        let mut best = 0.0;
        for (j, g) in gt.iter().enumerate() {
            let v = iou(a, g);
            if v > best {
                best = v;
                matched[i] = j;
            }
            if v > best_for_gt[j] {
                best_for_gt[j] = v;
            }
        }
        if best < sampling.negative_iou {
            state[i] = 0;
        } else if best >= sampling.positive_iou {
            state[i] = 1;
        }
    }
    // Every object gets at least its best-overlapping anchors.
    for (i, a) in anchors.iter().enumerate() {
        for (j, g) in gt.iter().enumerate() {
            if best_for_gt[j] > 0.0 && iou(a, g) == best_for_gt[j] {
                state[i] = 1;
                matched[i] = j;
            }
        }
    }
    let mut positives: Vec<usize> = (0..n).filter(|&i| state[i] == 1).collect();
    let mut negatives: Vec<usize> = (0..n).filter(|&i| state[i] == 0).collect();
    let max_pos = (sampling.batch as f64 * sampling.positive_fraction) as usize;
    if positives.len() > max_pos {
        positives.shuffle(rng);
        positives.truncate(max_pos);
    }
    let max_neg = sampling.batch - positives.len();
    if negatives.len() > max_neg {
        negatives.shuffle(rng);
        negatives.truncate(max_neg);
    }
    let mut labels = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let mut deltas = vec![0.0; 4 * n];
    let mut delta_weights = vec![0.0; 4 * n];
    for &i in &negatives {
        weights[i] = 1.0;
    }
    for &i in &positives {
        labels[i] = 1.0;
        weights[i] = 1.0;
        let t = anchors[i].encode(&gt[matched[i]], RPN_BOX_WEIGHTS);
        let (a, cell) = (i / cells, i % cells);
        for k in 0..4 {
            deltas[(4 * a + k) * cells + cell] = t[k];
            delta_weights[(4 * a + k) * cells + cell] = 1.0;
        }
    }
    RpnTargets {
        labels,
        weights,
        deltas,
        delta_weights,
        sampled: positives.len() + negatives.len(),
    }
}

/// Class and regression targets for second-stage regions.
#[derive(Clone, Debug, PartialEq)]
pub struct RoiTargets {
    /// 0 is background, `c + 1` is object class `c`.
    pub labels: Vec<usize>,
    /// `[rois, 4 * classes]`; only the matched class's four entries are set.
    pub deltas: Vec<f64>,
    pub delta_weights: Vec<f64>,
}

impl RoiTargets {
    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l > 0).count()
    }
}

/// Assigns each region to its best ground truth at IoU >= `fg_iou`.
pub fn roi_targets(rois: &[BBox], gt: &[BBox], gt_labels: &[usize], classes: usize, fg_iou: f64) -> RoiTargets {
    let mut labels = vec![0; rois.len()];
    let mut deltas = vec![0.0; rois.len() * 4 * classes];
    let mut delta_weights = vec![0.0; rois.len() * 4 * classes];
    for (r, roi) in rois.iter().enumerate() {
        let best = gt
            .iter()
            .enumerate()
            .map(|(j, g)| (j, iou(roi, g)))
            .fold(None, |acc: Option<(usize, f64)>, (j, v)| match acc {
                Some((_, bv)) if bv >= v => acc,
                _ => Some((j, v)),
            });
        if let Some((j, v)) = best {
            if v >= fg_iou {
                let c = gt_labels[j];
                labels[r] = c + 1;
                let t = roi.encode(&gt[j], ROI_BOX_WEIGHTS);
                for k in 0..4 {
                    deltas[r * 4 * classes + 4 * c + k] = t[k];
                    delta_weights[r * 4 * classes + 4 * c + k] = 1.0;
                }
            }
        }
    }
    RoiTargets {
        labels,
        deltas,
        delta_weights,
    }
}
