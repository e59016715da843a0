//! Domain-level metric regularization.
//!
//! Source, target and auxiliary renders of one scene are pixel aligned, so
//! their features form a natural triplet: source is the anchor, target the
//! positive and auxiliary the negative. The hinge asks for the source features
//! to sit closer to the target than to the auxiliary domain by a margin.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricRegConfig {
    pub delta: f64,
}

impl Default for MetricRegConfig {
    fn default() -> Self {
        Self { delta: 1.0 }
    }
}

impl MetricRegConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0) || !self.delta.is_finite() {
            return Err(Error::Input(format!("metricreg.delta must be positive, got {}", self.delta)));
        }
        Ok(())
    }
}

/// Anchor (source), positive (target) and negative (auxiliary) features.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTriplet {
    pub anchor: Tensor,
    pub positive: Tensor,
    pub negative: Tensor,
    pub margin: f64,
}

impl FeatureTriplet {
    pub fn new(anchor: Tensor, positive: Tensor, negative: Tensor, margin: f64) -> Result<Self> {
        if anchor.shape() != positive.shape() || anchor.shape() != negative.shape() {
            return Err(Error::Shape(format!(
                "triplet members {:?} / {:?} / {:?}",
                anchor.shape(),
                positive.shape(),
                negative.shape()
            )));
        }
        if !(margin > 0.0) {
            return Err(Error::Input(format!("margin must be positive, got {margin}")));
        }
        Ok(Self {
            anchor,
            positive,
            negative,
            margin,
        })
    }

    pub fn source_target(&self) -> f64 {
        normalized_l2(self.anchor.data(), self.positive.data())
    }

    pub fn source_auxiliary(&self) -> f64 {
        normalized_l2(self.anchor.data(), self.negative.data())
    }
}

/// Euclidean distance of the flattened difference over `sqrt(len)`.
pub fn normalized_l2(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "feature lengths differ");
    if a.is_empty() {
        return 0.0;
    }
    let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (sq / a.len() as f64).sqrt()
}

pub fn feature_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "feature_distance {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(normalized_l2(a.data(), b.data()))
}

pub fn triplet_hinge(source_target: f64, source_auxiliary: f64, margin: f64) -> f64 {
    (source_target - source_auxiliary + margin).max(0.0)
}

pub fn img_triplet_loss(triplet: &FeatureTriplet) -> f64 {
    triplet_hinge(
        triplet.source_target(),
        triplet.source_auxiliary(),
        triplet.margin,
    )
}

/// Mean hinge over per-proposal triplets; zero (with a warning) when empty.
pub fn obj_triplet_loss(triplets: &[FeatureTriplet]) -> f64 {
    if triplets.is_empty() {
        warn!("object triplet loss requested for zero proposals");
        return 0.0;
    }
    triplets.iter().map(img_triplet_loss).sum::<f64>() / triplets.len() as f64
}

/// Fraction of triplets with `d(source, target) < d(source, auxiliary)`.
pub fn ordering_rate(triplets: &[FeatureTriplet]) -> Result<f64> {
    if triplets.is_empty() {
        return Err(Error::Input("ordering_rate needs at least one triplet".into()));
    }
    let satisfied = triplets
        .iter()
        .filter(|t| t.source_target() < t.source_auxiliary())
        .count();
    Ok(satisfied as f64 / triplets.len() as f64)
}
