//! Detection evaluation and feature diagnostics.
//!
//! AP uses all-point interpolation: the area under the precision envelope at
//! every recall step. Predictions with equal confidence are ordered by image
//! id and then box coordinates so results never depend on input order.

use std::cmp::Ordering;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::detcore::{Detection, Detector};
use crate::autograd::Params;
use crate::error::{Error, Result};
pub use crate::geometry::iou;
use crate::geometry::BBox;
use crate::metricreg::normalized_l2;
use crate::raster::Image;
use crate::tensor::Tensor;
use crate::toyscenes::Sample;
use crate::weathergen::Intensity;

pub const IOU_THRESHOLD: f64 = 0.5;
pub const INTERPOLATION: &str = "all-point";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageDetections {
    pub image_id: String,
    pub predictions: Vec<Detection>,
    pub ground_truth: Vec<(BBox, usize)>,
}

impl ImageDetections {
    pub fn validate(&self, classes: usize) -> Result<()> {
        for p in &self.predictions {
            if !(0.0..=1.0).contains(&p.score) || p.class >= classes {
                return Err(Error::Input(format!(
                    "prediction on {} has score {} class {}",
                    self.image_id, p.score, p.class
                )));
            }
        }
        if let Some((_, c)) = self.ground_truth.iter().find(|(_, c)| *c >= classes) {
            return Err(Error::Input(format!("ground truth class {c} on {}", self.image_id)));
        }
        Ok(())
    }
}

pub type DetectionSet = Vec<ImageDetections>;

/// Deterministic ranking of predictions: confidence descending, then image
/// id, then box coordinates.
fn rank_order(a: &(f64, &str, BBox), b: &(f64, &str, BBox)) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)).then_with(|| {
        a.2.as_array()
            .iter()
            .zip(b.2.as_array().iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    })
}

/// True/false positive flags of one class's predictions in ranked order,
/// plus the number of ground-truth boxes of that class.
pub fn match_class(set: &[ImageDetections], class: usize) -> (Vec<bool>, usize) {
    let mut preds: Vec<(f64, &str, BBox, usize)> = Vec::new();
    let mut n_gt = 0;
    for (i, img) in set.iter().enumerate() {
        n_gt += img.ground_truth.iter().filter(|(_, c)| *c == class).count();
        for p in img.predictions.iter().filter(|p| p.class == class) {
            preds.push((p.score, img.image_id.as_str(), p.bbox, i));
        }
    }
    preds.sort_by(|a, b| rank_order(&(a.0, a.1, a.2), &(b.0, b.1, b.2)).then(a.3.cmp(&b.3)));
    let mut used: Vec<Vec<bool>> = set.iter().map(|img| vec![false; img.ground_truth.len()]).collect();
    let flags = preds
        .iter()
        .map(|&(_, _, bbox, i)| {
            let best = set[i]
                .ground_truth
                .iter()
                .enumerate()
                .filter(|(j, (_, c))| *c == class && !used[i][*j])
                .map(|(j, (g, _))| (j, iou(&bbox, g)))
                .filter(|&(_, v)| v >= IOU_THRESHOLD)
                .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
            match best {
                Some((j, _)) => {
                    used[i][j] = true;
                    true
                }
                None => false,
            }
        })
        .collect();
    (flags, n_gt)
}

/// Area under the precision envelope of ranked TP/FP flags.
pub fn ap_from_flags(flags: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut prec = Vec::with_capacity(flags.len());
    let mut rec = Vec::with_capacity(flags.len());
    for (k, &f) in flags.iter().enumerate() {
        tp += f as usize;
        prec.push(tp as f64 / (k + 1) as f64);
        rec.push(tp as f64 / n_gt as f64);
    }
    for k in (0..prec.len().saturating_sub(1)).rev() {
        prec[k] = prec[k].max(prec[k + 1]);
    }
    let mut ap = 0.0;
    let mut last_recall = 0.0;
    for (p, r) in prec.iter().zip(&rec) {
        if *r > last_recall {
            ap += (r - last_recall) * p;
            last_recall = *r;
        }
    }
    ap
}

/// AP of one class; `None` when the class has no ground truth.
pub fn average_precision(set: &[ImageDetections], class: usize) -> Option<f64> {
    let (flags, n_gt) = match_class(set, class);
    (n_gt > 0).then(|| ap_from_flags(&flags, n_gt))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapResult {
    pub map: f64,
    /// `None` for classes without ground truth.
    pub per_class: Vec<Option<f64>>,
}

/// Unweighted mean of the defined per-class APs.
pub fn mean_ap(set: &[ImageDetections], classes: usize) -> Result<MapResult> {
    let per_class: Vec<Option<f64>> = (0..classes).map(|c| average_precision(set, c)).collect();
    for (c, ap) in per_class.iter().enumerate() {
        if ap.is_none() {
            warn!("class {c} has no ground truth; excluded from mAP");
        }
    }
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::Input("mAP needs at least one class with ground truth".into()));
    }
    Ok(MapResult {
        map: defined.iter().sum::<f64>() / defined.len() as f64,
        per_class,
    })
}

/// Runs the detector over `(id, image, ground truth)` triples.
pub fn detect_all<'a>(
    detector: &Detector,
    params: &Params,
    images: impl IntoIterator<Item = (&'a str, &'a Image, Vec<(BBox, usize)>)>,
) -> Result<DetectionSet> {
    images
        .into_iter()
        .map(|(id, image, gt)| {
            Ok(ImageDetections {
                image_id: id.to_string(),
                predictions: detector.detect(params, image)?,
                ground_truth: gt,
            })
        })
        .collect()
}

fn ground_truth(sample: &Sample) -> Vec<(BBox, usize)> {
    let s = &sample.triplet.source;
    s.boxes.iter().copied().zip(s.labels.iter().copied()).collect()
}

/// Which rendering of a validation sample to evaluate on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalDomain {
    Clear,
    Target(Intensity),
}

impl EvalDomain {
    pub fn name(self) -> &'static str {
        match self {
            EvalDomain::Clear => "clear",
            EvalDomain::Target(l) => l.name(),
        }
    }

    pub fn image(self, sample: &Sample) -> Result<&Image> {
        match self {
            EvalDomain::Clear => Ok(&sample.triplet.source.image),
            EvalDomain::Target(level) => sample
                .target_levels
                .get(&level)
                .ok_or_else(|| Error::Input(format!("sample {} has no {} render", sample.id, level.name()))),
        }
    }
}

pub fn evaluate(detector: &Detector, params: &Params, samples: &[Sample], domain: EvalDomain) -> Result<MapResult> {
    let images = samples
        .iter()
        .map(|s| Ok((s.id.as_str(), domain.image(s)?, ground_truth(s))))
        .collect::<Result<Vec<_>>>()?;
    let set = detect_all(detector, params, images)?;
    mean_ap(&set, detector.cfg.classes)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub level: String,
    pub map: f64,
    pub per_class: Vec<Option<f64>>,
}

/// One row per requested domain, in the given order.
pub fn intensity_sweep(
    detector: &Detector,
    params: &Params,
    samples: &[Sample],
    domains: &[EvalDomain],
) -> Result<Vec<SweepRow>> {
    domains
        .iter()
        .map(|&d| {
            let r = evaluate(detector, params, samples, d)?;
            Ok(SweepRow {
                level: d.name().to_string(),
                map: r.map,
                per_class: r.per_class,
            })
        })
        .collect()
}

pub fn write_sweep_csv(rows: &[SweepRow], class_names: &[String], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::decode(path, e))?;
    let mut header = vec!["level".to_string(), "map".to_string()];
    header.extend(class_names.iter().map(|c| format!("ap_{c}")));
    header.push("interpolation".into());
    w.write_record(&header).map_err(|e| Error::decode(path, e))?;
    for r in rows {
        let mut rec = vec![r.level.clone(), r.map.to_string()];
        rec.extend(r.per_class.iter().map(|ap| ap.map(|v| v.to_string()).unwrap_or_default()));
        rec.push(INTERPOLATION.into());
        w.write_record(&rec).map_err(|e| Error::decode(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn l1_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("l1_distance {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HardnessRecord {
    pub sample_id: String,
    /// L1 distance between source and target features.
    pub ah: f64,
    /// 1 is the hardest sample.
    pub rank: usize,
}

/// Ranks samples by ascending `ah`: the smaller the source-target feature
/// distance, the harder the example. Ties keep id order.
pub fn hardness_rank(pairs: &[(String, Tensor, Tensor)]) -> Result<Vec<HardnessRecord>> {
    let mut recs = pairs
        .iter()
        .map(|(id, fs, ft)| {
            Ok(HardnessRecord {
                sample_id: id.clone(),
                ah: l1_distance(fs, ft)?,
                rank: 0,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    recs.sort_by(|a, b| a.ah.total_cmp(&b.ah).then_with(|| a.sample_id.cmp(&b.sample_id)));
    for (i, r) in recs.iter_mut().enumerate() {
        r.rank = i + 1;
    }
    Ok(recs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceRecord {
    pub sample_id: String,
    pub source_target: f64,
    pub source_auxiliary: f64,
    pub ordered: bool,
}

/// Image-level features of every member of each sample's triplet.
pub struct TripletFeatures {
    pub sample_id: String,
    pub source: Tensor,
    pub target: Tensor,
    pub auxiliary: Tensor,
}

pub fn triplet_features(detector: &Detector, params: &Params, samples: &[Sample]) -> Result<Vec<TripletFeatures>> {
    samples
        .iter()
        .map(|s| {
            let t = &s.triplet;
            Ok(TripletFeatures {
                sample_id: s.id.clone(),
                source: detector.features(params, &t.source.image)?,
                target: detector.features(params, &t.target.image)?,
                auxiliary: detector.features(params, &t.auxiliary.image)?,
            })
        })
        .collect()
}

pub fn distance_records(features: &[TripletFeatures]) -> Vec<DistanceRecord> {
    features
        .iter()
        .map(|f| {
            let st = normalized_l2(f.source.data(), f.target.data());
            let sa = normalized_l2(f.source.data(), f.auxiliary.data());
            DistanceRecord {
                sample_id: f.sample_id.clone(),
                source_target: st,
                source_auxiliary: sa,
                ordered: st < sa,
            }
        })
        .collect()
}

/// Fraction of samples whose source features are closer to the target than
/// to the auxiliary features.
pub fn ordering_rate(records: &[DistanceRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Input("ordering_rate needs at least one sample".into()));
    }
    Ok(records.iter().filter(|r| r.ordered).count() as f64 / records.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectedPoint {
    pub sample_id: String,
    pub domain: String,
    pub x: f64,
    pub y: f64,
}

/// Projects row vectors onto their top two principal directions, found by
/// power iteration with deflation from a fixed start vector.
pub fn pca_2d(rows: &[Vec<f64>]) -> Result<Vec<[f64; 2]>> {
    let n = rows.len();
    let d = rows.first().map(Vec::len).unwrap_or(0);
    if n == 0 || d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(Error::Input("projection needs equal-length, non-empty rows".into()));
    }
    let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let centered: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| r.iter().zip(&mean).map(|(v, m)| v - m).collect())
        .collect();
    let mut components: Vec<Vec<f64>> = Vec::new();
    for k in 0..2 {
        let mut v: Vec<f64> = (0..d).map(|j| 1.0 + ((j * 7 + k * 13) % 5) as f64 * 0.1).collect();
        for _ in 0..200 {
            // w = X^T X v
            let xv: Vec<f64> = centered.iter().map(|r| dot(r, &v)).collect();
            let mut w = vec![0.0; d];
            for (r, s) in centered.iter().zip(&xv) {
                for (wj, rj) in w.iter_mut().zip(r) {
                    *wj += s * rj;
                }
            }
            for c in &components {
                let p = dot(&w, c);
                for (wj, cj) in w.iter_mut().zip(c) {
                    *wj -= p * cj;
                }
            }
            let norm = dot(&w, &w).sqrt();
            if norm < 1e-300 {
                break;
            }
            v = w.into_iter().map(|x| x / norm).collect();
        }
        // Sign convention: largest-magnitude entry positive.
        let big = v.iter().cloned().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
        if big < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        components.push(v);
    }
    Ok(centered
        .iter()
        .map(|r| [dot(r, &components[0]), dot(r, &components[1])])
        .collect())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Mean-pools each feature map over space and projects all domains jointly.
pub fn feature_projection(features: &[TripletFeatures]) -> Result<Vec<ProjectedPoint>> {
    let pool = |t: &Tensor| -> Vec<f64> {
        let c = t.shape()[0];
        let hw = t.numel() / c.max(1);
        t.data().chunks(hw.max(1)).map(|ch| ch.iter().sum::<f64>() / hw as f64).collect()
    };
    let mut labels = Vec::new();
    let mut rows = Vec::new();
    for f in features {
        for (domain, t) in [("source", &f.source), ("target", &f.target), ("auxiliary", &f.auxiliary)] {
            labels.push((f.sample_id.clone(), domain.to_string()));
            rows.push(pool(t));
        }
    }
    let xy = pca_2d(&rows)?;
    Ok(labels
        .into_iter()
        .zip(xy)
        .map(|((sample_id, domain), [x, y])| ProjectedPoint { sample_id, domain, x, y })
        .collect())
}

pub fn write_csv<T: Serialize>(rows: &[T], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::decode(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::decode(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn det(b: [f64; 4], class: usize, score: f64) -> Detection {
        Detection {
            bbox: BBox::new(b[0], b[1], b[2], b[3]),
            class,
            score,
        }
    }

    fn gt(b: [f64; 4], class: usize) -> (BBox, usize) {
        (BBox::new(b[0], b[1], b[2], b[3]), class)
    }

    /// Exhaustive oracle: for every confidence threshold, precision and
    /// recall of the predictions at or above it, with greedy matching
    /// recomputed from scratch; AP is the area under the envelope over
    /// every prefix of the ranked list.
    fn oracle_ap(set: &[ImageDetections], class: usize) -> Option<f64> {
        let n_gt: usize = set
            .iter()
            .map(|s| s.ground_truth.iter().filter(|g| g.1 == class).count())
            .sum();
        if n_gt == 0 {
            return None;
        }
        let mut all: Vec<(f64, String, [f64; 4], usize, usize)> = Vec::new();
        for (i, s) in set.iter().enumerate() {
            for (k, p) in s.predictions.iter().enumerate() {
                if p.class == class {
                    all.push((p.score, s.image_id.clone(), p.bbox.as_array(), i, k));
                }
            }
        }
        // Selection sort with explicit comparisons, independent of sort_by.
        let mut ranked = Vec::new();
        while !all.is_empty() {
            let mut best = 0;
            for j in 1..all.len() {
                let (a, b) = (&all[j], &all[best]);
                let better = a.0 > b.0
                    || (a.0 == b.0 && (a.1 < b.1 || (a.1 == b.1 && (a.2 < b.2 || (a.2 == b.2 && a.3 < b.3)))));
                if better {
                    best = j;
                }
            }
            ranked.push(all.remove(best));
        }
        let mut points = Vec::new();
        for cut in 1..=ranked.len() {
            let mut taken: Vec<(usize, usize)> = Vec::new();
            let mut tp = 0;
            for r in &ranked[..cut] {
                let img = &set[r.3];
                let mut best: Option<(usize, f64)> = None;
                for (j, g) in img.ground_truth.iter().enumerate() {
                    if g.1 != class || taken.contains(&(r.3, j)) {
                        continue;
                    }
                    let b = BBox::new(r.2[0], r.2[1], r.2[2], r.2[3]);
                    let v = iou(&b, &g.0);
                    if v >= 0.5 && best.map_or(true, |(_, bv)| v > bv) {
                        best = Some((j, v));
                    }
                }
                if let Some((j, _)) = best {
                    taken.push((r.3, j));
                    tp += 1;
                }
            }
            points.push((tp as f64 / n_gt as f64, tp as f64 / cut as f64));
        }
        // Area: for each recall level reached, the best precision at any
        // recall at least as high.
        let mut ap = 0.0;
        let mut prev = 0.0;
        let mut recalls: Vec<f64> = points.iter().map(|p| p.0).collect();
        recalls.dedup();
        for r in recalls {
            if r > prev {
                let p = points.iter().filter(|q| q.0 >= r).map(|q| q.1).fold(0.0, f64::max);
                ap += (r - prev) * p;
                prev = r;
            }
        }
        Some(ap)
    }

    fn random_set(rng: &mut ChaCha8Rng) -> DetectionSet {
        let images = rng.gen_range(1..=3);
        let mut left = 10usize;
        (0..images)
            .map(|i| {
                let n_gt = rng.gen_range(0..=3);
                let ground_truth: Vec<_> = (0..n_gt)
                    .map(|_| {
                        let (x, y) = (rng.gen_range(0.0..40.0), rng.gen_range(0.0..40.0));
                        gt([x, y, x + rng.gen_range(5.0..15.0), y + rng.gen_range(5.0..15.0)], rng.gen_range(0..2))
                    })
                    .collect();
                let n_pred = rng.gen_range(0..=left.min(4));
                left -= n_pred;
                let predictions = (0..n_pred)
                    .map(|_| {
                        let b = if !ground_truth.is_empty() && rng.gen_bool(0.6) {
                            let g = ground_truth[rng.gen_range(0..ground_truth.len())].0;
                            let j = rng.gen_range(-2.0..2.0);
                            [g.x_min + j, g.y_min, g.x_max + j, g.y_max]
                        } else {
                            let (x, y) = (rng.gen_range(0.0..40.0), rng.gen_range(0.0..40.0));
                            [x, y, x + 10.0, y + 10.0]
                        };
                        // Coarse scores so ties occur.
                        det(b, rng.gen_range(0..2), rng.gen_range(0..5) as f64 / 4.0)
                    })
                    .collect();
                ImageDetections {
                    image_id: format!("img{i}"),
                    predictions,
                    ground_truth,
                }
            })
            .collect()
    }

    #[test]
    fn iou_examples() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BBox::new(5.0, 5.0, 6.0, 6.0)), 0.0);
        let u = BBox::new(0.0, 0.0, 1.0, 1.0);
        let v = BBox::new(0.5, 0.0, 1.5, 1.0);
        assert!((iou(&u, &v) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_and_empty_predictions() {
        let g = [gt([0.0, 0.0, 10.0, 10.0], 0), gt([20.0, 20.0, 30.0, 30.0], 0)];
        let perfect = vec![ImageDetections {
            image_id: "a".into(),
            predictions: g.iter().map(|(b, c)| det(b.as_array(), *c, 0.9)).collect(),
            ground_truth: g.to_vec(),
        }];
        assert_eq!(average_precision(&perfect, 0), Some(1.0));
        let none = vec![ImageDetections {
            image_id: "a".into(),
            predictions: vec![],
            ground_truth: g.to_vec(),
        }];
        assert_eq!(average_precision(&none, 0), Some(0.0));
        assert_eq!(average_precision(&none, 1), None);
    }

    #[test]
    fn hand_case_three_gt_four_predictions() {
        // Ranked: TP, FP, TP, TP -> precision 1, 1/2, 2/3, 3/4 at recall
        // 1/3, 1/3, 2/3, 1. Envelope: 1, 3/4, 3/4, 3/4.
        // AP = 1/3 * 1 + 1/3 * 3/4 + 1/3 * 3/4.
        let g = vec![
            gt([0.0, 0.0, 10.0, 10.0], 0),
            gt([20.0, 0.0, 30.0, 10.0], 0),
            gt([40.0, 0.0, 50.0, 10.0], 0),
        ];
        let set = vec![ImageDetections {
            image_id: "a".into(),
            predictions: vec![
                det([0.0, 0.0, 10.0, 10.0], 0, 0.9),
                det([60.0, 0.0, 70.0, 10.0], 0, 0.8),
                det([20.0, 0.0, 30.0, 10.0], 0, 0.7),
                det([41.0, 0.0, 51.0, 10.0], 0, 0.6),
            ],
            ground_truth: g,
        }];
        let expected = 1.0 / 3.0 + 0.25 + 0.25;
        let ap = average_precision(&set, 0).unwrap();
        assert!((ap - expected).abs() < 1e-12);
        assert!((ap - oracle_ap(&set, 0).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..50 {
            let set = random_set(&mut rng);
            for class in 0..2 {
                match (average_precision(&set, class), oracle_ap(&set, class)) {
                    (Some(a), Some(b)) => assert!((a - b).abs() < 1e-9, "{a} vs {b}"),
                    (a, b) => assert_eq!(a, b),
                }
            }
        }
    }

    #[test]
    fn map_examples() {
        let single = vec![ImageDetections {
            image_id: "a".into(),
            predictions: vec![det([0.0, 0.0, 10.0, 10.0], 0, 0.5)],
            ground_truth: vec![gt([0.0, 0.0, 10.0, 10.0], 0), gt([30.0, 0.0, 40.0, 10.0], 0)],
        }];
        let r = mean_ap(&single, 1).unwrap();
        assert_eq!(r.map, average_precision(&single, 0).unwrap());
        // Class 0 finds one of two objects, class 1 its only one, class 2 has none.
        let mut two = single.clone();
        two[0].ground_truth.push(gt([60.0, 0.0, 70.0, 10.0], 1));
        two[0].predictions.push(det([60.0, 0.0, 70.0, 10.0], 1, 0.5));
        let r = mean_ap(&two, 3).unwrap();
        assert_eq!(r.per_class, vec![Some(0.5), Some(1.0), None]);
        assert_eq!(r.map, 0.75);
        assert!(mean_ap(&[], 2).is_err());
    }

    #[test]
    fn ties_do_not_depend_on_input_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let set = random_set(&mut rng);
            let mut shuffled = set.clone();
            for img in &mut shuffled {
                img.predictions.reverse();
            }
            for c in 0..2 {
                assert_eq!(average_precision(&set, c), average_precision(&shuffled, c));
            }
        }
    }

    proptest! {
        #[test]
        fn ap_properties(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let set = random_set(&mut rng);
            if let Ok(r) = mean_ap(&set, 2) {
                prop_assert!((0.0..=1.0).contains(&r.map));
            }
            for c in 0..2 {
                let (flags, n_gt) = match_class(&set, c);
                let n_pred = set.iter().flat_map(|s| &s.predictions).filter(|p| p.class == c).count();
                let matched = flags.iter().filter(|f| **f).count();
                prop_assert!(matched <= n_gt.min(n_pred));
                let Some(base) = average_precision(&set, c) else { continue };
                // A duplicate of the lowest-ranked prediction, scored below
                // everything, is a false positive and cannot raise AP.
                let mut dup = set.clone();
                if let Some(p) = dup[0].predictions.iter().find(|p| p.class == c).copied() {
                    dup[0].predictions.push(Detection { score: 0.0, ..p });
                    prop_assert!(average_precision(&dup, c).unwrap() <= base + 1e-12);
                }
                // A correct detection of an object nothing else overlaps,
                // scored above everything, cannot lower AP.
                let mut better = set.clone();
                let missed = better.iter().enumerate().find_map(|(i, s)| {
                    s.ground_truth
                        .iter()
                        .find(|g| {
                            g.1 == c
                                && s.predictions
                                    .iter()
                                    .all(|p| p.class != c || iou(&p.bbox, &g.0) < IOU_THRESHOLD)
                        })
                        .map(|g| (i, g.0))
                });
                if let Some((i, g)) = missed {
                    better[i].predictions.push(Detection { bbox: g, class: c, score: 1.0 });
                    prop_assert!(average_precision(&better, c).unwrap() >= base - 1e-12);
                }
            }
        }
    }

    #[test]
    fn hardness_examples() {
        let f = Tensor::from_slice(&[1.0, -2.0, 3.0]);
        let g = Tensor::from_slice(&[0.0, 0.0, 3.5]);
        let h = Tensor::from_slice(&[4.0, 1.0, 0.0]);
        let pairs = vec![
            ("b".to_string(), f.clone(), g.clone()),
            ("a".to_string(), f.clone(), f.clone()),
            ("c".to_string(), f.clone(), h.clone()),
        ];
        let recs = hardness_rank(&pairs).unwrap();
        assert_eq!(recs[0].sample_id, "a");
        assert_eq!((recs[0].ah, recs[0].rank), (0.0, 1));
        let ranks: Vec<usize> = recs.iter().map(|r| r.rank).collect();
        assert_eq!(ranks, vec![1, 2, 3]);
        let scaled: Vec<_> = pairs.iter().map(|(id, a, b)| (id.clone(), a.map(|v| -3.0 * v), b.map(|v| -3.0 * v))).collect();
        let recs2 = hardness_rank(&scaled).unwrap();
        for (r, s) in recs.iter().zip(&recs2) {
            assert_eq!(r.sample_id, s.sample_id);
            assert!((s.ah - 3.0 * r.ah).abs() < 1e-12);
        }
    }

    #[test]
    fn pca_recovers_dominant_axis() {
        let rows: Vec<Vec<f64>> = (0..20).map(|i| {
            let t = i as f64 - 9.5;
            vec![2.0 * t, t, 0.01 * (i % 3) as f64]
        }).collect();
        let xy = pca_2d(&rows).unwrap();
        let var_x: f64 = xy.iter().map(|p| p[0] * p[0]).sum();
        let var_y: f64 = xy.iter().map(|p| p[1] * p[1]).sum();
        assert!(var_x > 1000.0 * var_y.max(1e-12));
        assert!(pca_2d(&[]).is_err());
    }
}
