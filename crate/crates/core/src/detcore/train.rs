use std::cell::RefCell;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::info;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{restore_into, Checkpoint, CheckpointHeader};
use super::losses::{self, CameraMode, GroundTruth, HeadOutputs, LossBundle, LossParts};
use super::model::{Detector, ModelConfig};
use super::proposals::RpnSampling;
use crate::autograd::{Params, Tape, Var};
use crate::daheads::DomainLabel;
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::metricreg::{FeatureTriplet, MetricRegConfig};
use crate::revgrad::{AdvGrlConfig, Reversal};
use crate::seeds::{rng_for, tag};
use crate::tensor::Tensor;
use crate::toyscenes::AlignedTriplet;
use crate::weathergen::{apply_dmp, MaskSpec, PatchMask};

/// Named training configurations, from plain source training up to the
/// complete method.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    SourceOnly,
    DmpOnly,
    ImgGrl,
    ObjGrl,
    #[serde(alias = "baseline-grl")]
    Baseline,
    Advgrl,
    RegGrl,
    AdvgrlReg,
    Full,
}

/// Which training terms a mode switches on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Switches {
    pub img_da: bool,
    pub obj_da: bool,
    pub advgrl: bool,
    pub metric_reg: bool,
    pub dmp: bool,
}

impl Mode {
    pub const ALL: [Mode; 9] = [
        Mode::SourceOnly,
        Mode::DmpOnly,
        Mode::ImgGrl,
        Mode::ObjGrl,
        Mode::Baseline,
        Mode::Advgrl,
        Mode::RegGrl,
        Mode::AdvgrlReg,
        Mode::Full,
    ];

    /// The ablation ladder: each step adds one ingredient to the previous.
    pub const LADDER: [Mode; 5] = [
        Mode::SourceOnly,
        Mode::Baseline,
        Mode::Advgrl,
        Mode::AdvgrlReg,
        Mode::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::SourceOnly => "source-only",
            Mode::DmpOnly => "dmp-only",
            Mode::ImgGrl => "img-grl",
            Mode::ObjGrl => "obj-grl",
            Mode::Baseline => "baseline",
            Mode::Advgrl => "advgrl",
            Mode::RegGrl => "reg-grl",
            Mode::AdvgrlReg => "advgrl-reg",
            Mode::Full => "full",
        }
    }

    pub fn switches(self) -> Switches {
        let both = Switches {
            img_da: true,
            obj_da: true,
            ..Default::default()
        };
        match self {
            Mode::SourceOnly => Switches::default(),
            Mode::DmpOnly => Switches {
                dmp: true,
                ..Default::default()
            },
            Mode::ImgGrl => Switches {
                img_da: true,
                ..Default::default()
            },
            Mode::ObjGrl => Switches {
                obj_da: true,
                ..Default::default()
            },
            Mode::Baseline => both,
            Mode::Advgrl => Switches { advgrl: true, ..both },
            Mode::RegGrl => Switches {
                metric_reg: true,
                ..both
            },
            Mode::AdvgrlReg => Switches {
                advgrl: true,
                metric_reg: true,
                ..both
            },
            Mode::Full => Switches {
                advgrl: true,
                metric_reg: true,
                dmp: true,
                ..both
            },
        }
    }
}

impl Switches {
    pub fn uses_target(&self) -> bool {
        self.img_da || self.obj_da || self.metric_reg
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "baseline-grl" {
            return Ok(Mode::Baseline);
        }
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Mode::ALL.iter().map(|m| m.name()).collect();
                Error::Input(format!("unknown mode `{s}` (expected one of {})", names.join(", ")))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: Mode,
    pub camera: CameraMode,
    pub lr: f64,
    pub lr_decayed: f64,
    /// Iterations at `lr`.
    pub stage1_iters: usize,
    /// Iterations at `lr_decayed` after stage one.
    pub stage2_iters: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub gamma: f64,
    /// Reversal weight of the plain gradient reversal layer.
    pub grl_lambda: f64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub clip_grad_norm: f64,
    pub rpn_batch: usize,
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Full,
            camera: CameraMode::Aligned,
            lr: 0.01,
            lr_decayed: 0.001,
            stage1_iters: 2000,
            stage2_iters: 800,
            momentum: 0.9,
            weight_decay: 0.0005,
            gamma: 0.1,
            grl_lambda: 1.0,
            clip_grad_norm: 10.0,
            rpn_batch: 64,
            checkpoint_every: 500,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.lr, self.lr_decayed, self.momentum, self.weight_decay, self.gamma];
        if finite.iter().any(|v| !v.is_finite() || *v < 0.0) || self.clip_grad_norm < 0.0 {
            return Err(Error::Input("learning rates, momentum, decay and gamma must be finite and >= 0".into()));
        }
        if self.rpn_batch == 0 {
            return Err(Error::Input("rpn_batch must be positive".into()));
        }
        Ok(())
    }

    pub fn total_iters(&self) -> usize {
        self.stage1_iters + self.stage2_iters
    }

    pub fn lr_at(&self, iteration: usize) -> f64 {
        if iteration < self.stage1_iters {
            self.lr
        } else {
            self.lr_decayed
        }
    }
}

/// Dynamic masking during training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DmpConfig {
    pub patch_pixels: usize,
    /// Probability that a given iteration's triplet is masked at all.
    pub apply_prob: f64,
    /// Source boxes with a smaller unmasked fraction are dropped from the
    /// detection targets of that iteration.
    pub min_visible: f64,
    /// Whether the detection branch sees the masked source image. When
    /// false, masking only reaches the domain and triplet terms.
    pub mask_detection: bool,
}

impl Default for DmpConfig {
    fn default() -> Self {
        Self {
            patch_pixels: 64,
            apply_prob: 1.0,
            min_visible: 0.0,
            mask_detection: true,
        }
    }
}

impl DmpConfig {
    pub fn mask_spec(&self) -> MaskSpec {
        MaskSpec {
            patch_pixels: self.patch_pixels,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.mask_spec().validate()?;
        if !(0.0..=1.0).contains(&self.apply_prob) || !(0.0..=1.0).contains(&self.min_visible) {
            return Err(Error::Input("dmp apply_prob and min_visible must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Settings of the optional training ingredients.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Regularizers {
    pub advgrl: AdvGrlConfig,
    pub metricreg: MetricRegConfig,
    pub dmp: DmpConfig,
}

/// How often each role of the triplet was read during a step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ImageAccess {
    pub source: usize,
    pub target: usize,
    pub auxiliary: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    pub iteration: usize,
    pub lr: f64,
    pub bundle: LossBundle,
    pub lambda_img: f64,
    pub lambda_obj: f64,
    /// Whether the source features sit closer to the target than to the
    /// auxiliary features; only known when all three were computed.
    pub ordering_rate: Option<f64>,
    pub access: ImageAccess,
}

/// Loss and per-parameter gradients of one iteration, before any update.
pub struct StepGradients {
    pub output: StepOutput,
    pub grads: Vec<Option<Vec<f64>>>,
}

#[derive(Clone, Debug)]
pub struct Trainer {
    pub detector: Detector,
    pub params: Params,
    momentum: Params,
    pub iteration: usize,
    pub cfg: TrainConfig,
    pub regs: Regularizers,
}

impl Trainer {
    pub fn new(model: ModelConfig, cfg: TrainConfig, regs: Regularizers) -> Result<Self> {
        cfg.validate()?;
        regs.advgrl.validate()?;
        regs.dmp.validate()?;
        regs.metricreg.validate()?;
        let (detector, params) = Detector::new(model, &mut rng_for(cfg.seed, &[tag("init")]))?;
        let momentum = zeros_like(&params);
        Ok(Self {
            detector,
            params,
            momentum,
            iteration: 0,
            cfg,
            regs,
        })
    }

    /// Resumes from a checkpoint; the model layout comes from its header.
    pub fn from_checkpoint(ck: &Checkpoint, cfg: TrainConfig, regs: Regularizers) -> Result<Self> {
        let mut t = Self::new(ck.header.model.clone(), cfg, regs)?;
        restore_into(&mut t.params, &ck.params)?;
        if !ck.momentum.is_empty() {
            restore_into(&mut t.momentum, &ck.momentum)?;
        }
        t.iteration = ck.header.iteration;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            header: CheckpointHeader {
                model: self.detector.cfg.clone(),
                iteration: self.iteration,
                seed: self.cfg.seed,
            },
            params: self.params.clone(),
            momentum: self.momentum.clone(),
        }
    }

    fn reversal(&self) -> Reversal {
        if self.cfg.mode.switches().advgrl {
            Reversal::Adversarial(self.regs.advgrl)
        } else {
            Reversal::Constant(self.cfg.grl_lambda)
        }
    }

    /// One SGD update on a single aligned triplet.
    pub fn step(&mut self, triplet: &AlignedTriplet) -> Result<StepOutput> {
        let StepGradients { output, grads } = self.gradients(&self.params, triplet, self.iteration)?;
        self.apply_update(grads, output.lr);
        self.iteration += 1;
        Ok(output)
    }

    fn apply_update(&mut self, mut grads: Vec<Option<Vec<f64>>>, lr: f64) {
        if self.cfg.clip_grad_norm > 0.0 {
            let norm = grads
                .iter()
                .flatten()
                .flat_map(|g| g.iter())
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            if norm > self.cfg.clip_grad_norm {
                let s = self.cfg.clip_grad_norm / norm;
                for v in grads.iter_mut().flatten().flat_map(|g| g.iter_mut()) {
                    *v *= s;
                }
            }
        }
        let ids: Vec<_> = self.params.ids().collect();
        for (id, g) in ids.into_iter().zip(grads) {
            let Some(g) = g else { continue };
            let (mu, wd) = (self.cfg.momentum, self.cfg.weight_decay);
            let w = self.params.get_mut(id).data_mut();
            let v = self.momentum.get_mut(id).data_mut();
            for ((w, v), g) in w.iter_mut().zip(v.iter_mut()).zip(g) {
                *v = mu * *v + g + wd * *w;
                *w -= lr * *v;
            }
        }
    }

    /// Forward and backward pass of iteration `iteration` with `params`,
    /// without touching the optimizer state.
    pub fn gradients(&self, params: &Params, triplet: &AlignedTriplet, iteration: usize) -> Result<StepGradients> {
        let sw = self.cfg.mode.switches();
        let det = &self.detector;
        let cfg = &det.cfg;
        let seed = self.cfg.seed;
        let mut access = ImageAccess::default();

        let mut rng = rng_for(seed, &[tag("dmp"), iteration as u64]);
        let masked = if sw.dmp && rng.gen_bool(self.regs.dmp.apply_prob) {
            Some(apply_dmp(triplet, &self.regs.dmp.mask_spec(), &mut rng)?)
        } else {
            None
        };
        let clean = triplet;
        let (triplet, mask) = match &masked {
            Some((t, m)) => (t, Some(m)),
            None => (triplet, None),
        };
        let (det_source, det_mask) = if self.regs.dmp.mask_detection {
            (&triplet.source, mask)
        } else {
            (&clean.source, None)
        };
        let (gt_boxes, gt_labels): (Vec<BBox>, Vec<usize>) = det_source
            .boxes
            .iter()
            .zip(&det_source.labels)
            .filter(|(b, _)| det_mask.map_or(true, |m| visible_fraction(m, b) >= self.regs.dmp.min_visible))
            .map(|(b, l)| (*b, *l))
            .unzip();

        let mut tape = Tape::new(params);
        access.source += 1;
        let xs = tape.constant(Detector::image_tensor(&det_source.image));
        let f_det = det.backbone_forward(&mut tape, xs)?;
        let rpn = det.rpn_forward(&mut tape, f_det)?;
        let shape = tape.value(f_det).shape().to_vec();
        let anchors = det.anchors(shape[1], shape[2]);
        let proposals = det.proposals(&tape, f_det, &rpn, true);
        let mut rois = proposals.boxes.clone();
        rois.extend_from_slice(&gt_boxes);
        let pooled_rois = det.roi_features(&mut tape, f_det, &rois)?;
        let (cls_logits, box_deltas) = det.head_forward(&mut tape, pooled_rois)?;
        let heads = HeadOutputs {
            objectness: rpn.objectness,
            rpn_deltas: rpn.deltas,
            anchors: &anchors,
            anchor_sizes: cfg.anchor_sizes.len(),
            rois: &rois,
            cls_logits,
            box_deltas,
        };
        let gt = GroundTruth {
            boxes: &gt_boxes,
            labels: &gt_labels,
        };
        let sampling = RpnSampling {
            batch: self.cfg.rpn_batch,
            ..Default::default()
        };
        let mut rng = rng_for(seed, &[tag("rpn"), iteration as u64]);
        let det_losses = losses::det_losses(&mut tape, &heads, Some(gt), cfg.classes, cfg.fg_iou, &sampling, &mut rng)?
            .expect("source images are labelled");

        let mut terms: Vec<(Var, f64)> = vec![(det_losses.cls, 1.0), (det_losses.reg, 1.0)];
        let weights = losses::loss_weights(self.cfg.gamma, self.cfg.camera);
        let mut parts = LossParts {
            l_cls: tape.scalar(det_losses.cls),
            l_reg: tape.scalar(det_losses.reg),
            ..Default::default()
        };
        let (mut lambda_img, mut lambda_obj) = (0.0, 0.0);
        let mut ordering_rate = None;

        if sw.uses_target() {
            access.target += 1;
            access.auxiliary += 1;
            let fs = if std::ptr::eq(det_source, &triplet.source) {
                f_det
            } else {
                let x = tape.constant(Detector::image_tensor(&triplet.source.image));
                det.backbone_forward(&mut tape, x)?
            };
            let xt = tape.constant(Detector::image_tensor(&triplet.target.image));
            let ft = det.backbone_forward(&mut tape, xt)?;
            let xa = tape.constant(Detector::image_tensor(&triplet.auxiliary.image));
            let fa = det.backbone_forward(&mut tape, xa)?;
            let ft_val = tape.value(ft).clone();
            let ordering = FeatureTriplet::new(
                tape.value(fs).clone(),
                ft_val,
                tape.value(fa).clone(),
                self.regs.metricreg.delta,
            )?;
            ordering_rate = Some((ordering.source_target() < ordering.source_auxiliary()) as u8 as f64);
            let reversal = self.reversal();

            if sw.img_da {
                let rs = tape.reverse_grad(fs, 1.0);
                let rt = tape.reverse_grad(ft, 1.0);
                let ls = det.image_domain.loss(&mut tape, rs, DomainLabel::Source)?;
                let lt = det.image_domain.loss(&mut tape, rt, DomainLabel::Target)?;
                let l_img = tape.weighted_sum(&[(ls, 1.0), (lt, 1.0)]);
                parts.l_img = tape.scalar(l_img);
                lambda_img = reversal.lambda(parts.l_img / 2.0);
                tape.set_reverse_lambda(rs, lambda_img);
                tape.set_reverse_lambda(rt, lambda_img);
                terms.push((l_img, weights[2]));
            }

            let boxes = &proposals.boxes;
            let need_obj = sw.obj_da || (sw.metric_reg && weights[5] != 0.0);
            let pooled = if need_obj && !boxes.is_empty() {
                Some((
                    det.roi_features(&mut tape, fs, boxes)?,
                    det.roi_features(&mut tape, ft, boxes)?,
                ))
            } else {
                None
            };

            if let (true, Some((ps, pt))) = (sw.obj_da, pooled) {
                let rs = tape.reverse_grad(ps, 1.0);
                let rt = tape.reverse_grad(pt, 1.0);
                let ls = det.object_domain.loss(&mut tape, rs, DomainLabel::Source)?;
                let lt = det.object_domain.loss(&mut tape, rt, DomainLabel::Target)?;
                let l_obj = tape.weighted_sum(&[(ls, 1.0), (lt, 1.0)]);
                parts.l_obj = tape.scalar(l_obj);
                lambda_obj = reversal.lambda(parts.l_obj / (2 * boxes.len()) as f64);
                tape.set_reverse_lambda(rs, lambda_obj);
                tape.set_reverse_lambda(rt, lambda_obj);
                terms.push((l_obj, weights[3]));
            }

            if sw.metric_reg {
                let delta = self.regs.metricreg.delta;
                let l_r_img = tape.triplet(fs, ft, fa, 1, delta)?;
                parts.l_r_img = tape.scalar(l_r_img);
                terms.push((l_r_img, weights[4]));
                if let Some((ps, pt)) = pooled {
                    let pa = det.roi_features(&mut tape, fa, boxes)?;
                    let l_r_obj = tape.triplet(ps, pt, pa, boxes.len(), delta)?;
                    parts.l_r_obj = tape.scalar(l_r_obj);
                    terms.push((l_r_obj, weights[5]));
                }
            }
        }

        let bundle = losses::total_loss(parts, self.cfg.gamma, self.cfg.camera)?;
        let root = tape.weighted_sum(&terms);
        let grads = tape.backward(root);
        let grads = params.ids().map(|id| grads.param(id).map(<[f64]>::to_vec)).collect();
        Ok(StepGradients {
            output: StepOutput {
                iteration,
                lr: self.cfg.lr_at(iteration),
                bundle,
                lambda_img,
                lambda_obj,
                ordering_rate,
                access,
            },
            grads,
        })
    }
}

/// Unmasked fraction of the pixels inside `b`.
pub fn visible_fraction(mask: &PatchMask, b: &BBox) -> f64 {
    let (x0, y0) = (b.x_min.floor().max(0.0) as usize, b.y_min.floor().max(0.0) as usize);
    let x1 = (b.x_max.ceil() as usize).min(mask.cols * mask.side);
    let y1 = (b.y_max.ceil() as usize).min(mask.rows * mask.side);
    let (mut seen, mut total) = (0usize, 0usize);
    for y in y0..y1 {
        for x in x0..x1 {
            total += 1;
            seen += !mask.is_masked(x, y) as usize;
        }
    }
    if total == 0 {
        1.0
    } else {
        seen as f64 / total as f64
    }
}

fn zeros_like(params: &Params) -> Params {
    let mut out = Params::new();
    for (_, name, t) in params.iter() {
        out.add(name, Tensor::zeros(t.shape()));
    }
    out
}

/// One row of the per-iteration metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iteration: usize,
    pub lr: f64,
    pub l_cls: f64,
    pub l_reg: f64,
    pub l_img: f64,
    pub l_obj: f64,
    pub l_r_img: f64,
    pub l_r_obj: f64,
    pub gamma: f64,
    pub total: f64,
    pub lambda_img: f64,
    pub lambda_obj: f64,
    pub ordering_rate: Option<f64>,
}

impl From<&StepOutput> for MetricsRow {
    fn from(s: &StepOutput) -> Self {
        let b = &s.bundle;
        Self {
            iteration: s.iteration,
            lr: s.lr,
            l_cls: b.l_cls,
            l_reg: b.l_reg,
            l_img: b.l_img,
            l_obj: b.l_obj,
            l_r_img: b.l_r_img,
            l_r_obj: b.l_r_obj,
            gamma: b.gamma,
            total: b.total,
            lambda_img: s.lambda_img,
            lambda_obj: s.lambda_obj,
            ordering_rate: s.ordering_rate,
        }
    }
}

/// Index of the training sample used at `iteration`: a fresh permutation of
/// the data every epoch, derived from the seed.
pub fn sample_index(seed: u64, len: usize, iteration: usize) -> usize {
    let epoch = iteration / len;
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng_for(seed, &[tag("order"), epoch as u64]));
    order[iteration % len]
}

/// Trains until the configured schedule is complete, calling `on_step` after
/// every update and `on_checkpoint` every `checkpoint_every` iterations.
pub fn train_loop(
    trainer: &mut Trainer,
    data: &[AlignedTriplet],
    mut on_step: impl FnMut(&StepOutput) -> Result<()>,
    mut on_checkpoint: impl FnMut(&Trainer) -> Result<()>,
) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Input("training needs at least one triplet".into()));
    }
    let total = trainer.cfg.total_iters();
    while trainer.iteration < total {
        let idx = sample_index(trainer.cfg.seed, data.len(), trainer.iteration);
        let out = trainer.step(&data[idx])?;
        on_step(&out)?;
        if trainer.cfg.checkpoint_every > 0 && trainer.iteration % trainer.cfg.checkpoint_every == 0 {
            on_checkpoint(trainer)?;
        }
        if trainer.iteration % 200 == 0 {
            info!(
                "{} iter {}/{total}: total {:.4} cls {:.4} reg {:.4}",
                trainer.cfg.mode, trainer.iteration, out.bundle.total, out.bundle.l_cls, out.bundle.l_reg
            );
        }
    }
    Ok(())
}

/// Trains in memory and returns the metrics rows.
pub fn train_in_memory(trainer: &mut Trainer, data: &[AlignedTriplet]) -> Result<Vec<MetricsRow>> {
    let mut rows = Vec::new();
    train_loop(
        trainer,
        data,
        |s| {
            rows.push(MetricsRow::from(s));
            Ok(())
        },
        |_| Ok(()),
    )?;
    Ok(rows)
}

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";

/// Files written by [`train_to_dir`].
#[derive(Clone, Debug)]
pub struct RunFiles {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

impl RunFiles {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            checkpoint: dir.join(CHECKPOINT_FILE),
            metrics: dir.join(METRICS_FILE),
        }
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::decode(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| Error::decode(path, e))).collect()
}

fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<csv::Writer<fs::File>> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| Error::decode(path, e))?;
    w.write_record(METRICS_COLUMNS).map_err(|e| Error::decode(path, e))?;
    for row in rows {
        w.serialize(row).map_err(|e| Error::decode(path, e))?;
    }
    Ok(w)
}

/// Column order of the metrics log.
pub const METRICS_COLUMNS: [&str; 13] = [
    "iteration",
    "lr",
    "l_cls",
    "l_reg",
    "l_img",
    "l_obj",
    "l_r_img",
    "l_r_obj",
    "gamma",
    "total",
    "lambda_img",
    "lambda_obj",
    "ordering_rate",
];

/// Trains with a checkpoint and metrics log in `dir`. If `dir` already holds
/// a checkpoint, training resumes from it and the log is cut back to match.
pub fn train_to_dir(
    model: ModelConfig,
    cfg: TrainConfig,
    regs: Regularizers,
    data: &[AlignedTriplet],
    dir: &Path,
) -> Result<Trainer> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = RunFiles::in_dir(dir);
    let mut trainer = if files.checkpoint.exists() {
        let ck = Checkpoint::load(&files.checkpoint)?;
        info!("resuming from iteration {}", ck.header.iteration);
        Trainer::from_checkpoint(&ck, cfg, regs)?
    } else {
        Trainer::new(model, cfg, regs)?
    };
    let mut kept = if files.metrics.exists() && trainer.iteration > 0 {
        read_metrics(&files.metrics)?
    } else {
        Vec::new()
    };
    kept.retain(|r| r.iteration < trainer.iteration);
    if kept.len() != trainer.iteration {
        return Err(Error::Checkpoint(format!(
            "metrics log has {} rows but the checkpoint is at iteration {}",
            kept.len(),
            trainer.iteration
        )));
    }
    let writer = RefCell::new(write_metrics(&files.metrics, &kept)?);
    let metrics_path = files.metrics.clone();
    let ckpt_path = files.checkpoint.clone();
    train_loop(
        &mut trainer,
        data,
        |s| {
            writer
                .borrow_mut()
                .serialize(MetricsRow::from(s))
                .map_err(|e| Error::decode(&metrics_path, e))
        },
        |t| {
            writer.borrow_mut().flush().map_err(|e| Error::io(&metrics_path, e))?;
            t.checkpoint().save(&ckpt_path)
        },
    )?;
    writer.into_inner().flush().map_err(|e| Error::io(&files.metrics, e))?;
    trainer.checkpoint().save(&files.checkpoint)?;
    Ok(trainer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toyscenes::{generate_split, DatasetSpec, Split};

    fn data(n: usize) -> Vec<AlignedTriplet> {
        let spec = DatasetSpec {
            n_train: n,
            n_val: 0,
            ..Default::default()
        };
        generate_split(&spec, Split::Train)
            .unwrap()
            .into_iter()
            .map(|s| s.triplet)
            .collect()
    }

    fn small_cfg(mode: Mode, iters: (usize, usize)) -> TrainConfig {
        TrainConfig {
            mode,
            stage1_iters: iters.0,
            stage2_iters: iters.1,
            seed: 11,
            ..Default::default()
        }
    }

    fn trainer(mode: Mode) -> Trainer {
        Trainer::new(ModelConfig::default(), small_cfg(mode, (5, 5)), Regularizers::default()).unwrap()
    }

    #[test]
    fn mode_names_round_trip() {
        for m in Mode::ALL {
            assert_eq!(m.name().parse::<Mode>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.name()));
        }
        assert_eq!("baseline-grl".parse::<Mode>().unwrap(), Mode::Baseline);
        assert!("bogus".parse::<Mode>().is_err());
    }

    #[test]
    fn schedule_validation() {
        let mut bad = small_cfg(Mode::Full, (2, 1));
        bad.lr = f64::NAN;
        assert!(bad.validate().is_err());
        bad.lr = 0.01;
        bad.rpn_batch = 0;
        assert!(bad.validate().is_err());
        let cfg = small_cfg(Mode::Full, (2, 1));
        assert_eq!((cfg.lr_at(1), cfg.lr_at(2)), (0.01, 0.001));
    }

    #[test]
    fn logged_bundles_satisfy_the_total_identity() {
        let d = data(2);
        for mode in [Mode::Full, Mode::Baseline] {
            let mut t = trainer(mode);
            for row in train_in_memory(&mut t, &d).unwrap() {
                let expect = row.gamma * (row.l_img + row.l_obj + row.l_r_img + row.l_r_obj) + row.l_cls + row.l_reg;
                assert!((row.total - expect).abs() <= 1e-12 * expect.abs().max(1.0));
            }
        }
    }

    #[test]
    fn source_only_never_reads_target_or_auxiliary() {
        let d = data(1);
        let mut t = trainer(Mode::SourceOnly);
        let out = t.step(&d[0]).unwrap();
        assert_eq!(out.access.target + out.access.auxiliary, 0);
        assert_eq!(out.access.source, 1);
        assert_eq!((out.bundle.l_img, out.bundle.l_obj), (0.0, 0.0));
        let mut t = trainer(Mode::Full);
        let out = t.step(&d[0]).unwrap();
        assert!(out.access.target > 0 && out.access.auxiliary > 0);
    }

    #[test]
    fn target_annotations_never_affect_updates() {
        let d = data(1);
        let mut changed = d[0].clone();
        changed.target.boxes.clear();
        changed.target.labels.clear();
        changed.auxiliary.boxes.truncate(0);
        let mut a = trainer(Mode::Full);
        let mut b = trainer(Mode::Full);
        assert_eq!(a.step(&d[0]).unwrap(), b.step(&changed).unwrap());
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn zero_gamma_matches_plain_detector_step() {
        let d = data(1);
        let mut plain = trainer(Mode::SourceOnly);
        let mut cfg = small_cfg(Mode::Baseline, (5, 5));
        cfg.gamma = 0.0;
        let mut da = Trainer::new(ModelConfig::default(), cfg, Regularizers::default()).unwrap();
        let before = plain.params.clone();
        plain.step(&d[0]).unwrap();
        da.step(&d[0]).unwrap();
        for (id, name, t) in plain.params.iter() {
            if name.starts_with("img_da") || name.starts_with("obj_da") {
                continue;
            }
            let delta_plain: Vec<f64> = t.data().iter().zip(before.get(id).data()).map(|(a, b)| a - b).collect();
            let delta_da: Vec<f64> = da.params.get(id).data().iter().zip(before.get(id).data()).map(|(a, b)| a - b).collect();
            assert_eq!(delta_plain, delta_da, "{name}");
        }
    }

    #[test]
    fn zero_iterations_checkpoint_equals_initialization() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg(Mode::Full, (0, 0));
        let t = train_to_dir(ModelConfig::default(), cfg, Regularizers::default(), &data(1), dir.path()).unwrap();
        let fresh = Trainer::new(ModelConfig::default(), cfg, Regularizers::default()).unwrap();
        let saved = Checkpoint::load(&dir.path().join(CHECKPOINT_FILE)).unwrap();
        assert_eq!(saved.params, fresh.params);
        assert_eq!(saved.header.iteration, 0);
        assert_eq!(t.params, fresh.params);
        assert_eq!(read_metrics(&dir.path().join(METRICS_FILE)).unwrap().len(), 0);
    }

    #[test]
    fn loss_trends_down_over_two_hundred_iterations() {
        let d = data(20);
        let mut t = Trainer::new(ModelConfig::default(), small_cfg(Mode::SourceOnly, (150, 50)), Regularizers::default())
            .unwrap();
        let rows = train_in_memory(&mut t, &d).unwrap();
        let median = |rows: &[MetricsRow]| {
            let mut v: Vec<f64> = rows.iter().map(|r| r.total).collect();
            v.sort_by(f64::total_cmp);
            (v[9] + v[10]) / 2.0
        };
        let (first, last) = (median(&rows[..20]), median(&rows[180..]));
        assert!(last < first, "{first} -> {last}");
    }

    #[test]
    fn fixed_seed_reproduces_ten_steps() {
        let d = data(3);
        let run = || {
            let mut t = Trainer::new(ModelConfig::default(), small_cfg(Mode::Full, (6, 4)), Regularizers::default()).unwrap();
            train_in_memory(&mut t, &d).unwrap()
        };
        let a = run();
        assert_eq!(a.len(), 10);
        let b = run();
        let bits = |rows: &[MetricsRow]| -> Vec<u64> { rows.iter().map(|r| r.total.to_bits()).collect() };
        assert_eq!(bits(&a), bits(&b));
    }

    fn check_fd(t: &Trainer, triplet: &AlignedTriplet, names: &[&str]) {
        let g = t.gradients(&t.params, triplet, 0).unwrap().grads;
        let f = |p: &Params| t.gradients(p, triplet, 0).unwrap().output.bundle.total;
        for name in names {
            let id = t.params.id(name).unwrap();
            let g = g[id.index()].as_ref().unwrap();
            for k in [0, 3, 7] {
                let h = 1e-6;
                let mut plus = t.params.clone();
                plus.get_mut(id).data_mut()[k] += h;
                let mut minus = t.params.clone();
                minus.get_mut(id).data_mut()[k] -= h;
                let num = (f(&plus) - f(&minus)) / (2.0 * h);
                let scale = g[k].abs().max(num.abs()).max(1e-3);
                assert!((g[k] - num).abs() / scale < 1e-4, "{name}[{k}]: {} vs {num}", g[k]);
            }
        }
    }

    #[test]
    fn total_loss_gradient_matches_finite_differences() {
        let d = data(1);
        check_fd(
            &trainer(Mode::SourceOnly),
            &d[0],
            &["backbone.1.weight", "backbone.3.bias", "rpn.conv.weight", "head.fc2.weight"],
        );
        // Behind the reversal layers only the classifier side sees the true
        // gradient of the total.
        check_fd(
            &trainer(Mode::Baseline),
            &d[0],
            &["img_da.conv1.weight", "obj_da.fc1.weight", "head.cls.weight"],
        );
    }
}
