//! Image-level and object-level domain classifiers.

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Params, Tape, Var, PROB_EPS};
use crate::error::{Error, Result};
use crate::layers::{Conv2d, Linear};

/// Ground-truth domain of a sample: 1 for source, 0 for target.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DomainLabel {
    Source,
    Target,
}

impl DomainLabel {
    pub fn value(self) -> f64 {
        match self {
            DomainLabel::Source => 1.0,
            DomainLabel::Target => 0.0,
        }
    }

    pub fn from_value(v: f64) -> Result<Self> {
        if v == 1.0 {
            Ok(DomainLabel::Source)
        } else if v == 0.0 {
            Ok(DomainLabel::Target)
        } else {
            Err(Error::Input(format!("domain label must be 0 or 1, got {v}")))
        }
    }
}

/// Binary cross-entropy of one clamped probability.
pub fn bce(p: f64, label: f64) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    -(label * p.ln() + (1.0 - label) * (1.0 - p).ln())
}

/// Image-level domain loss: BCE summed over the batch.
pub fn img_domain_loss(probs: &[f64], labels: &[f64]) -> Result<f64> {
    if probs.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} probabilities for {} labels",
            probs.len(),
            labels.len()
        )));
    }
    labels
        .iter()
        .zip(probs)
        .map(|(&g, &p)| DomainLabel::from_value(g).map(|l| bce(p, l.value())))
        .sum()
}

/// Object-level domain loss: BCE summed over images and their proposals.
/// Every proposal inherits the domain label of its image.
pub fn obj_domain_loss(probs: &[Vec<f64>], labels: &[f64]) -> Result<f64> {
    if probs.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} images of proposals for {} labels",
            probs.len(),
            labels.len()
        )));
    }
    if probs.iter().all(Vec::is_empty) {
        warn!("object domain loss requested for zero proposals");
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (image_probs, &g) in probs.iter().zip(labels) {
        let label = DomainLabel::from_value(g)?.value();
        total += image_probs.iter().map(|&p| bce(p, label)).sum::<f64>();
    }
    Ok(total)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DomainHeadsConfig {
    pub image_hidden: usize,
    pub object_hidden: usize,
}

impl Default for DomainHeadsConfig {
    fn default() -> Self {
        Self {
            image_hidden: 256,
            object_hidden: 128,
        }
    }
}

/// Two 1×1 convolutions producing a logit per feature-map location.
#[derive(Clone, Copy, Debug)]
pub struct ImageDomainClassifier {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl ImageDomainClassifier {
    pub fn new(params: &mut Params, in_channels: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            conv1: Conv2d::new(params, "img_da.conv1", in_channels, hidden, 1, 1, 0, rng),
            conv2: Conv2d::new(params, "img_da.conv2", hidden, 1, 1, 1, 0, rng),
        }
    }

    /// Per-location logits `[1, h, w]`.
    pub fn logits(&self, tape: &mut Tape, features: Var) -> Result<Var> {
        let h = self.conv1.forward(tape, features)?;
        let h = tape.relu(h);
        self.conv2.forward(tape, h)
    }

    /// Loss of one feature map against its domain label.
    pub fn loss(&self, tape: &mut Tape, features: Var, label: DomainLabel) -> Result<Var> {
        let z = self.logits(tape, features)?;
        tape.domain_bce(z, &[label.value()])
    }
}

/// Three fully connected layers scoring each pooled object feature.
#[derive(Clone, Copy, Debug)]
pub struct ObjectDomainClassifier {
    fc1: Linear,
    fc2: Linear,
    fc3: Linear,
}

impl ObjectDomainClassifier {
    pub fn new(params: &mut Params, in_features: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            fc1: Linear::new(params, "obj_da.fc1", in_features, hidden, rng),
            fc2: Linear::new(params, "obj_da.fc2", hidden, hidden, rng),
            fc3: Linear::with_std(params, "obj_da.fc3", hidden, 1, 0.01, rng),
        }
    }

    /// Logits `[proposals, 1]` for pooled features `[proposals, d]`.
    pub fn logits(&self, tape: &mut Tape, pooled: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, pooled)?;
        let h = tape.relu(h);
        let h = self.fc2.forward(tape, h)?;
        let h = tape.relu(h);
        self.fc3.forward(tape, h)
    }

    pub fn loss(&self, tape: &mut Tape, pooled: Var, label: DomainLabel) -> Result<Var> {
        let z = self.logits(tape, pooled)?;
        let n = tape.value(z).numel();
        tape.domain_bce(z, &vec![label.value(); n])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::sigmoid;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Scalar-loop BCE written independently of `bce`.
    fn naive_bce(p: f64, g: f64) -> f64 {
        let p = p.max(1e-7).min(1.0 - 1e-7);
        if g == 1.0 {
            -p.ln()
        } else {
            -(1.0 - p).ln()
        }
    }

    #[test]
    fn image_loss_examples() {
        let l = img_domain_loss(&[0.5], &[1.0]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        let l = img_domain_loss(&[0.7, 0.3], &[1.0, 0.0]).unwrap();
        assert!((l - 2.0 * -(0.7f64.ln())).abs() < 1e-12);
        assert!((l - 0.7133).abs() < 1e-4);
        let l = img_domain_loss(&[1.0, 0.0], &[1.0, 0.0]).unwrap();
        assert!(l < 1e-6);
    }

    #[test]
    fn object_loss_examples() {
        let l = obj_domain_loss(&[vec![0.5]], &[0.0]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        let single = obj_domain_loss(&[vec![0.37]], &[1.0]).unwrap();
        let many = obj_domain_loss(&[vec![0.37; 6]], &[1.0]).unwrap();
        assert!((many - 6.0 * single).abs() < 1e-12);
        assert_eq!(obj_domain_loss(&[vec![], vec![]], &[1.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn object_loss_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let images = rng.gen_range(1..4);
            let probs: Vec<Vec<f64>> = (0..images)
                .map(|_| (0..rng.gen_range(1..6)).map(|_| rng.gen_range(0.0..1.0)).collect())
                .collect();
            let labels: Vec<f64> = (0..images).map(|_| rng.gen_range(0..2) as f64).collect();
            let mut expected = 0.0;
            for i in 0..images {
                for j in 0..probs[i].len() {
                    expected += naive_bce(probs[i][j], labels[i]);
                }
            }
            let got = obj_domain_loss(&probs, &labels).unwrap();
            assert!((got - expected).abs() < 1e-6);
        }
    }

    #[test]
    fn non_binary_label_is_an_input_error() {
        assert!(matches!(img_domain_loss(&[0.4], &[0.5]), Err(Error::Input(_))));
        assert!(DomainLabel::from_value(2.0).is_err());
    }

    #[test]
    fn classifiers_produce_probabilities_in_open_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = Params::new();
        let img = ImageDomainClassifier::new(&mut params, 4, 8, &mut rng);
        let obj = ObjectDomainClassifier::new(&mut params, 6, 5, &mut rng);
        let mut tape = Tape::new(&params);
        let f = tape.constant(Tensor::full(&[4, 3, 3], 50.0));
        let z = img.logits(&mut tape, f).unwrap();
        assert_eq!(tape.value(z).shape(), &[1, 3, 3]);
        let p = crate::autograd::group_probability(tape.value(z).data());
        assert!(p > 0.0 && p < 1.0);
        let pooled = tape.constant(Tensor::full(&[2, 6], -3.0));
        let z = obj.logits(&mut tape, pooled).unwrap();
        assert_eq!(tape.value(z).shape(), &[2, 1]);
        for &v in tape.value(z).data() {
            assert!(sigmoid(v) > 0.0 && sigmoid(v) < 1.0);
        }
        let loss = obj.loss(&mut tape, pooled, DomainLabel::Target).unwrap();
        assert!(tape.scalar(loss) >= 0.0);
    }

    /// Trains a linear extractor and an object classifier jointly for 50
    /// steps on two Gaussian blobs and returns held-out domain accuracy.
    fn joint_training_accuracy(reversal: Option<crate::revgrad::AdvGrlConfig>, seed: u64) -> f64 {
        use crate::revgrad::advgrl_lambda;
        use rand_distr::{Distribution, Normal};
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let mut blobs = |n: usize| {
            let mut data = Vec::new();
            let mut labels = Vec::new();
            for i in 0..2 * n {
                let g = (i % 2) as f64;
                let shift = if g == 1.0 { 2.5 } else { -2.5 };
                data.push(shift + noise.sample(&mut rng));
                data.extend((0..3).map(|_| noise.sample(&mut rng)));
                labels.push(g);
            }
            (Tensor::new(&[2 * n, 4], data).unwrap(), labels)
        };
        let (train_x, train_y) = blobs(64);
        let (test_x, test_y) = blobs(64);
        let mut params = Params::new();
        let feat = Linear::new(&mut params, "feat", 4, 4, &mut rng);
        let head = ObjectDomainClassifier::new(&mut params, 4, 16, &mut rng);
        let n = train_y.len() as f64;
        for _ in 0..50 {
            let grads = {
                let mut tape = Tape::new(&params);
                let x = tape.constant(train_x.clone());
                let f = feat.forward(&mut tape, x).unwrap();
                let r = match reversal {
                    Some(_) => tape.reverse_grad(f, 1.0),
                    None => f,
                };
                let z = head.logits(&mut tape, r).unwrap();
                let loss = tape.domain_bce(z, &train_y).unwrap();
                if let Some(cfg) = reversal {
                    let lambda = advgrl_lambda(tape.scalar(loss) / n, &cfg);
                    tape.set_reverse_lambda(r, lambda);
                }
                tape.backward(loss)
            };
            for id in params.ids().collect::<Vec<_>>() {
                if let Some(g) = grads.param(id) {
                    let g = g.to_vec();
                    for (w, gi) in params.get_mut(id).data_mut().iter_mut().zip(g) {
                        *w -= 0.5 * gi / n;
                    }
                }
            }
        }
        let mut tape = Tape::new(&params);
        let x = tape.constant(test_x);
        let f = feat.forward(&mut tape, x).unwrap();
        let z = head.logits(&mut tape, f).unwrap();
        let correct = tape
            .value(z)
            .data()
            .iter()
            .zip(&test_y)
            .filter(|(&z, &g)| (sigmoid(z) > 0.5) == (g == 1.0))
            .count();
        correct as f64 / test_y.len() as f64
    }

    #[test]
    fn adversarial_reversal_confuses_the_domain_classifier() {
        // Single adversarial runs oscillate, so accuracy is averaged over seeds.
        let mean = |rev: Option<crate::revgrad::AdvGrlConfig>| {
            (0..20).map(|seed| joint_training_accuracy(rev, seed)).sum::<f64>() / 20.0
        };
        let cooperative = mean(None);
        let adversarial = mean(Some(Default::default()));
        assert!(cooperative > 0.9, "{cooperative}");
        assert!((adversarial - 0.5).abs() <= 0.1, "{adversarial}");
    }

    proptest::proptest! {
        #[test]
        fn domain_losses_are_non_negative_and_vanish_at_the_labels(
            probs in proptest::collection::vec(0.0f64..=1.0, 1..8),
            seed in 0u64..100,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let labels: Vec<f64> = probs.iter().map(|_| rng.gen_range(0..2) as f64).collect();
            proptest::prop_assert!(img_domain_loss(&probs, &labels).unwrap() >= 0.0);
            let nested: Vec<Vec<f64>> = probs.iter().map(|&p| vec![p; 3]).collect();
            proptest::prop_assert!(obj_domain_loss(&nested, &labels).unwrap() >= 0.0);
            let exact = img_domain_loss(&labels, &labels).unwrap();
            proptest::prop_assert!(exact.is_finite() && exact < 1e-6 * labels.len() as f64);
        }
    }
}
