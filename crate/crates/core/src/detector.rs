//! End-to-end detector: cross-direction pyramid features, RoI pooling and
//! the decoupled head, plus the training loop and inference path used by
//! the harness.

use alloc::vec::Vec;

use crate::boxes::Bbox;
use crate::dct::AttentionMode;
use crate::error::{check_dim, invalid, Error, Result};
use crate::graph::Var;
use crate::head::{
    assign_proposal, decode_box_deltas, encode_box_deltas, to_feature_coords, Assignment, Head,
    HeadConfig, LossReport,
};
use crate::kernels::{activation_forward, Activation};
use crate::metrics::{self, Detection, EvalReport, GroundTruthBox};
use crate::optim::{sgd_step, OptimState, SgdConfig};
use crate::params::{ParamBuilder, ParamSet, Session};
use crate::pyramid::{Cfp, CfpConfig};
use crate::scene::{make_proposals, mix_seed, Scene};
use crate::tensor::Tensor;

/// Box side at which RoIs move up one pyramid level.
pub const CANONICAL_SIDE: f64 = 32.0;
pub const POSITIVE_IOU: f64 = 0.5;
pub const NMS_IOU: f64 = 0.5;
pub const SCORE_FLOOR: f64 = 0.05;

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorConfig {
    pub cfp: CfpConfig,
    pub head: HeadConfig,
    /// Standardize each image channel to zero mean and unit variance
    /// before the backbone.
    pub standardize_input: bool,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            cfp: CfpConfig::default(),
            head: HeadConfig::default(),
            standardize_input: true,
        }
    }
}

/// Per-channel `(x - mean) / std` over the spatial grid; a flat channel
/// is only centered.
pub fn standardize_image(image: &Tensor) -> Result<Tensor> {
    let (c, h, w) = image.dims3("standardize_image")?;
    let n = (h * w) as f64;
    let mut out = image.clone();
    for ch in 0..c {
        let plane = &mut out.data_mut()[ch * h * w..(ch + 1) * h * w];
        let mean = plane.iter().sum::<f64>() / n;
        let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let sd = libm::sqrt(var);
        let inv = if sd > 1e-12 { 1.0 / sd } else { 1.0 };
        for v in plane.iter_mut() {
            *v = (*v - mean) * inv;
        }
    }
    Ok(out)
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        self.cfp.validate()?;
        self.head.validate()?;
        check_dim(
            "detector_config",
            "head input channels vs pyramid channels",
            self.cfp.channels,
            self.head.in_channels,
        )
    }
}

/// One proposal with its training target.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sample {
    pub proposal: Bbox,
    /// Class index; `num_classes` is background.
    pub label: usize,
    pub target: Option<[f64; 4]>,
}

pub fn build_samples(proposals: &[Bbox], gts: &[GroundTruthBox], num_classes: usize) -> Vec<Sample> {
    let keyed: Vec<(Bbox, usize)> = gts.iter().map(|g| (g.bbox, g.class)).collect();
    proposals
        .iter()
        .map(|p| match assign_proposal(p, &keyed, POSITIVE_IOU) {
            Assignment::Positive { gt, class } => Sample {
                proposal: *p,
                label: class,
                target: Some(encode_box_deltas(p, &keyed[gt].0)),
            },
            Assignment::Background => Sample {
                proposal: *p,
                label: num_classes,
                target: None,
            },
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detector {
    pub cfg: DetectorConfig,
    pub cfp: Cfp,
    pub head: Head,
    pub params: ParamSet,
}

/// Loss nodes of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub fc: Var,
    pub conv: Option<Var>,
}

impl Detector {
    pub fn new(cfg: DetectorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamSet::new();
        let mut b = ParamBuilder::new(&mut params, seed);
        let cfp = Cfp::new(cfg.cfp, &mut b)?;
        let head = Head::new(cfg.head.clone(), &mut b)?;
        Ok(Self {
            cfg,
            cfp,
            head,
            params,
        })
    }

    /// Pyramid level (0-based) an image-space box is pooled from.
    pub fn roi_level(&self, b: &Bbox) -> usize {
        let side = libm::sqrt(b.area().max(1e-12));
        let k = libm::floor(libm::log2(side / CANONICAL_SIDE));
        if k <= 0.0 {
            0
        } else {
            (k as usize).min(self.cfg.cfp.stages - 1)
        }
    }

    fn input(&self, sess: &mut Session, image: &Tensor) -> Result<Var> {
        let x = if self.cfg.standardize_input {
            standardize_image(image)?
        } else {
            image.clone()
        };
        Ok(sess.graph.constant(x))
    }

    fn pooled(&self, sess: &mut Session, levels: &[Var], b: &Bbox) -> Result<Var> {
        let level = self.roi_level(b);
        let stride = self.cfg.cfp.level_stride(level);
        let [x1, y1, x2, y2] = to_feature_coords(b, stride);
        self.head.roi_align(sess, levels[level], &Bbox { x1, y1, x2, y2 })
    }

    /// Builds the composite loss for one image on `sess`.
    pub fn loss_graph(&self, sess: &mut Session, image: &Tensor, samples: &[Sample]) -> Result<LossVars> {
        if samples.is_empty() {
            return Err(invalid("loss_graph", "no proposals"));
        }
        let img = self.input(sess, image)?;
        let pyr = self.cfp.forward(sess, img)?;
        let mut ce = Vec::with_capacity(samples.len());
        let mut reg = Vec::new();
        for s in samples {
            let roi = self.pooled(sess, &pyr.levels, &s.proposal)?;
            let logits = self.head.fc_classification_branch(sess, roi)?;
            ce.push(sess.graph.cross_entropy(logits, s.label)?);
            if let Some(t) = s.target {
                let d = self
                    .head
                    .conv_localization_branch(sess, roi, AttentionMode::Learned)?;
                reg.push(sess.graph.smooth_l1(d, Tensor::from_vec(t.to_vec()))?);
            }
        }
        let inv = 1.0 / ce.len() as f64;
        let terms: Vec<(Var, f64)> = ce.iter().map(|&v| (v, inv)).collect();
        let fc = sess.graph.combine(&terms)?;
        let w = self.cfg.head.weights;
        let (conv, total) = if reg.is_empty() {
            (None, sess.graph.scale(fc, w.fc)?)
        } else {
            let inv = 1.0 / reg.len() as f64;
            let terms: Vec<(Var, f64)> = reg.iter().map(|&v| (v, inv)).collect();
            let conv = sess.graph.combine(&terms)?;
            (Some(conv), sess.graph.combine(&[(fc, w.fc), (conv, w.conv)])?)
        };
        Ok(LossVars { total, fc, conv })
    }

    /// Loss report and parameter gradients for one image.
    pub fn loss_and_grads(&self, image: &Tensor, samples: &[Sample]) -> Result<(LossReport, Vec<Tensor>)> {
        let mut sess = Session::new(&self.params);
        let lv = self.loss_graph(&mut sess, image, samples)?;
        let g = &sess.graph;
        let report = LossReport {
            total: g.value(lv.total).item(),
            fc: g.value(lv.fc).item(),
            conv: lv.conv.map_or(0.0, |v| g.value(v).item()),
        };
        if !report.total.is_finite() {
            return Err(Error::NonFinite {
                op: "loss",
                index: 0,
            });
        }
        let mut grads = sess.graph.backward(lv.total)?;
        let pg = sess.param_grads(&mut grads);
        Ok((report, pg))
    }

    /// Scores every proposal, decodes its box and keeps per-class
    /// detections above `score_floor` after greedy NMS.
    pub fn detect(
        &self,
        image: &Tensor,
        image_id: usize,
        proposals: &[Bbox],
        score_floor: f64,
        nms_iou: f64,
    ) -> Result<Vec<Detection>> {
        let (_, h, w) = image.dims3("detect")?;
        let mut sess = Session::new(&self.params);
        let img = self.input(&mut sess, image)?;
        let pyr = self.cfp.forward(&mut sess, img)?;
        let k = self.cfg.head.num_classes;
        let mut raw = Vec::new();
        for p in proposals {
            let roi = self.pooled(&mut sess, &pyr.levels, p)?;
            let logits = self.head.fc_classification_branch(&mut sess, roi)?;
            let probs = activation_forward(Activation::Softmax, sess.graph.value(logits));
            let d = self
                .head
                .conv_localization_branch(&mut sess, roi, AttentionMode::Learned)?;
            let dv = sess.graph.value(d).data();
            let bbox = decode_box_deltas(p, &[dv[0], dv[1], dv[2], dv[3]], Some((w as f64, h as f64)));
            if !bbox.is_valid() {
                continue;
            }
            for class in 0..k {
                let score = probs.data()[class];
                if score >= score_floor {
                    raw.push(Detection {
                        image: image_id,
                        class,
                        score,
                        bbox,
                    });
                }
            }
        }
        Ok(metrics::nms(&raw, nms_iou).into_iter().map(|i| raw[i]).collect())
    }

    /// Output levels of the pyramid for `image`.
    pub fn pyramid_levels(&self, image: &Tensor) -> Result<Vec<Tensor>> {
        let mut sess = Session::new(&self.params);
        let img = self.input(&mut sess, image)?;
        let pyr = self.cfp.forward(&mut sess, img)?;
        Ok(pyr.levels.iter().map(|&v| sess.graph.value(v).clone()).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub jitter: f64,
    pub negatives: usize,
    pub seed: u64,
    pub sgd: SgdConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            jitter: 0.1,
            negatives: 8,
            seed: 0,
            sgd: SgdConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub scene: usize,
    pub loss: LossReport,
}

/// Sequential single-image SGD over a fixed scene list.
pub struct Trainer {
    pub detector: Detector,
    pub optim: OptimState,
    pub cfg: TrainConfig,
    pub step: usize,
}

impl Trainer {
    pub fn new(detector: Detector, cfg: TrainConfig) -> Result<Self> {
        let optim = OptimState::new(cfg.sgd, detector.params.tensors())?;
        Ok(Self {
            detector,
            optim,
            cfg,
            step: 0,
        })
    }

    pub fn proposals_for_step(&self, scene: &Scene) -> Vec<Bbox> {
        let (_, h, w) = scene.image.dims3("proposals").expect("scene image is rank 3");
        let gts: Vec<Bbox> = scene.gts.iter().map(|g| g.bbox).collect();
        make_proposals(
            &gts,
            self.cfg.jitter,
            self.cfg.negatives,
            mix_seed(&[self.cfg.seed, self.step as u64, 0x7072_6f70]),
            (w as f64, h as f64),
        )
    }

    /// One SGD step on `scenes[step % len]`. A non-finite loss is reported
    /// as [`Error::NonFinite`] with the step number as index.
    pub fn train_step(&mut self, scenes: &[Scene]) -> Result<StepRecord> {
        if scenes.is_empty() {
            return Err(invalid("train_step", "no scenes"));
        }
        let si = self.step % scenes.len();
        let scene = &scenes[si];
        let proposals = self.proposals_for_step(scene);
        let samples = build_samples(&proposals, &scene.gts, self.detector.cfg.head.num_classes);
        let (loss, grads) = self
            .detector
            .loss_and_grads(&scene.image, &samples)
            .map_err(|e| match e {
                Error::NonFinite { op, .. } => Error::NonFinite {
                    op,
                    index: self.step,
                },
                other => other,
            })?;
        sgd_step(self.detector.params.tensors_mut(), &grads, &mut self.optim)?;
        let rec = StepRecord {
            step: self.step,
            scene: si,
            loss,
        };
        self.step += 1;
        Ok(rec)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalConfig {
    pub negatives: usize,
    pub seed: u64,
    pub score_floor: f64,
    pub nms_iou: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            negatives: 8,
            seed: 0,
            score_floor: SCORE_FLOOR,
            nms_iou: NMS_IOU,
        }
    }
}

/// Jitter-free proposals for evaluation of `scene`.
pub fn eval_proposals(scene: &Scene, cfg: &EvalConfig) -> Vec<Bbox> {
    let (_, h, w) = scene.image.dims3("proposals").expect("scene image is rank 3");
    let gts: Vec<Bbox> = scene.gts.iter().map(|g| g.bbox).collect();
    make_proposals(
        &gts,
        0.0,
        cfg.negatives,
        mix_seed(&[cfg.seed, scene.index as u64, 0x6576_616c]),
        (w as f64, h as f64),
    )
}

pub fn evaluate_scenes(
    det: &Detector,
    scenes: &[Scene],
    cfg: &EvalConfig,
) -> Result<(Vec<Detection>, EvalReport)> {
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    for s in scenes {
        let props = eval_proposals(s, cfg);
        dets.extend(det.detect(&s.image, s.index, &props, cfg.score_floor, cfg.nms_iou)?);
        gts.extend_from_slice(&s.gts);
    }
    let report = metrics::evaluate(&dets, &gts)?;
    Ok((dets, report))
}

/// Heat values for a pyramid level: channel mean of absolute activations,
/// min-max scaled to `[0, 255]`, resized to `out_h x out_w`. A constant map
/// yields 128 everywhere.
pub fn heatmap(level: &Tensor, out_h: usize, out_w: usize) -> Result<Vec<u8>> {
    let (c, h, w) = level.dims3("heatmap")?;
    let mut heat = Tensor::zeros(&[1, h, w]);
    for ch in 0..c {
        for (d, v) in heat.data_mut().iter_mut().zip(level.plane(ch)) {
            *d += v.abs() / c as f64;
        }
    }
    let lo = heat.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = heat.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi.is_nan() || hi <= lo {
        return Ok(alloc::vec![128; out_h * out_w]);
    }
    let scaled = heat.map(|v| 255.0 * (v - lo) / (hi - lo));
    let resized = crate::kernels::bilinear_resize(&scaled, out_h, out_w)?;
    Ok(resized
        .data()
        .iter()
        .map(|&v| libm::round(v).clamp(0.0, 255.0) as u8)
        .collect())
}
