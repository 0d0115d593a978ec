//! Task-decoupled detection head.
//!
//! Each proposal is pooled with RoI Align and sent down two branches: a
//! stack of fully connected layers producing class logits, and a stack of
//! 3x3 convolutions followed by multi-frequency channel attention, global
//! average pooling and a linear layer producing four class-agnostic box
//! deltas.

use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec::Vec;

use crate::boxes::Bbox;
use crate::dct::{self, AttentionMode, Frequency, MultiFrequencyAttention};
use crate::error::{check_dim, invalid, Result};
use crate::graph::Var;
use crate::kernels;
use crate::params::{ConvParams, LinearParams, ParamBuilder, Session};
use crate::tensor::Tensor;

pub use crate::kernels::{cross_entropy, smooth_l1};

/// Upper clamp on `dw`, `dh` before exponentiation.
pub const DELTA_CLAMP: f64 = 4.135_166_556_742_356; // ln(1000 / 16)
pub const ROI_SAMPLES: usize = 2;

/// Layer layout of the two branches: `cNfM` has N convolutions in the
/// localization branch and M fully connected layers in the classification
/// branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum GroupNumber {
    #[default]
    C4F2,
    C6F4,
}

impl GroupNumber {
    pub fn conv_layers(self) -> usize {
        match self {
            Self::C4F2 => 4,
            Self::C6F4 => 6,
        }
    }

    pub fn fc_layers(self) -> usize {
        match self {
            Self::C4F2 => 2,
            Self::C6F4 => 4,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::C4F2 => "c4f2",
            Self::C6F4 => "c6f4",
        }
    }
}

impl core::str::FromStr for GroupNumber {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "c4f2" => Ok(Self::C4F2),
            "c6f4" => Ok(Self::C6F4),
            _ => Err(invalid("group_number", format!("expected c4f2 or c6f4, got {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub fc: f64,
    pub conv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { fc: 2.0, conv: 2.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadConfig {
    pub group_number: GroupNumber,
    pub weights: LossWeights,
    pub roi_size: usize,
    pub num_classes: usize,
    /// Channels of the pyramid features fed to the head.
    pub in_channels: usize,
    /// Width of the localization convolutions.
    pub conv_channels: usize,
    pub fc_hidden: usize,
    /// Frequencies of the attention block, one per channel group.
    pub freqs: Vec<Frequency>,
    /// Spatial size the attention pooling input is resized to.
    pub pool_size: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            group_number: GroupNumber::C4F2,
            weights: LossWeights::default(),
            roi_size: 7,
            num_classes: 3,
            in_channels: 8,
            conv_channels: 16,
            fc_hidden: 256,
            freqs: dct::default_frequencies(),
            pool_size: dct::DEFAULT_POOL_SIZE,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        const OP: &str = "head_config";
        let w = self.weights;
        if !(w.fc >= 0.0 && w.conv >= 0.0 && w.fc.is_finite() && w.conv.is_finite()) {
            return Err(invalid(OP, "loss weights must be nonnegative"));
        }
        if self.roi_size == 0 || self.pool_size == 0 {
            return Err(invalid(OP, "roi_size and pool size must be positive"));
        }
        if self.num_classes == 0 || self.in_channels == 0 || self.fc_hidden == 0 {
            return Err(invalid(OP, "class count and widths must be positive"));
        }
        dct::FrequencyGroups::new(self.conv_channels, self.freqs.len())?;
        dct::build_dct_basis(self.pool_size, self.pool_size, &self.freqs)?;
        Ok(())
    }

    /// Background is the last logit.
    pub fn background(&self) -> usize {
        self.num_classes
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub fc: f64,
    pub conv: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub cfg: HeadConfig,
    pub cls: Vec<LinearParams>,
    pub loc: Vec<ConvParams>,
    pub attention: MultiFrequencyAttention,
    pub loc_out: LinearParams,
}

impl Head {
    pub fn new(cfg: HeadConfig, b: &mut ParamBuilder<'_>) -> Result<Self> {
        cfg.validate()?;
        let flat = cfg.in_channels * cfg.roi_size * cfg.roi_size;
        let n_fc = cfg.group_number.fc_layers();
        let cls = (0..n_fc)
            .map(|i| {
                let d_in = if i == 0 { flat } else { cfg.fc_hidden };
                let d_out = if i + 1 == n_fc { cfg.num_classes + 1 } else { cfg.fc_hidden };
                b.linear(&format!("head.cls.fc{}", i + 1), d_out, d_in)
            })
            .collect();
        let loc = (0..cfg.group_number.conv_layers())
            .map(|i| {
                let c_in = if i == 0 { cfg.in_channels } else { cfg.conv_channels };
                b.conv(&format!("head.loc.conv{}", i + 1), cfg.conv_channels, c_in, 3, 1, 1)
            })
            .collect();
        let attention = MultiFrequencyAttention::new(
            b,
            "head.loc.attention",
            cfg.conv_channels,
            cfg.pool_size,
            &cfg.freqs,
        )?;
        let loc_out = b.linear("head.loc.out", 4, cfg.conv_channels);
        Ok(Self {
            cfg,
            cls,
            loc,
            attention,
            loc_out,
        })
    }

    pub fn roi_align(&self, sess: &mut Session, feat: Var, bbox: &Bbox) -> Result<Var> {
        roi_align_graph(sess, feat, bbox, self.cfg.roi_size)
    }

    /// Raw class logits, background last.
    pub fn fc_classification_branch(&self, sess: &mut Session, roi: Var) -> Result<Var> {
        let mut x = sess.graph.flatten(roi)?;
        check_dim(
            "fc_classification_branch",
            "flattened RoI length",
            self.cfg.in_channels * self.cfg.roi_size * self.cfg.roi_size,
            sess.graph.value(x).len(),
        )?;
        let last = self.cls.len() - 1;
        for (i, fc) in self.cls.iter().enumerate() {
            x = sess.linear(fc, x)?;
            if i < last {
                x = sess.graph.relu(x);
            }
        }
        Ok(x)
    }

    /// Class-agnostic deltas `(dx, dy, dw, dh)`.
    pub fn conv_localization_branch(
        &self,
        sess: &mut Session,
        roi: Var,
        mode: AttentionMode,
    ) -> Result<Var> {
        let mut x = roi;
        for conv in &self.loc {
            x = sess.conv_relu(conv, x)?;
        }
        let x = self.attention.forward(sess, x, mode)?;
        let pooled = sess.graph.mean_pool(x)?;
        sess.linear(&self.loc_out, pooled)
    }
}

/// Feature-space box `[x1, y1, x2, y2]` for an image box at `stride`.
pub fn to_feature_coords(b: &Bbox, stride: usize) -> [f64; 4] {
    b.scaled(1.0 / stride as f64).to_array()
}

/// RoI Align of `feat: [C, H, W]` over a feature-coordinate box.
pub fn roi_align(feat: &Tensor, bbox: &Bbox, out: usize) -> Result<Tensor> {
    let (_, h, w) = feat.dims3("roi_align")?;
    kernels::roi_align_map(h, w, bbox.to_array(), out, ROI_SAMPLES)?.apply(feat)
}

pub fn roi_align_graph(sess: &mut Session, feat: Var, bbox: &Bbox, out: usize) -> Result<Var> {
    let (_, h, w) = sess.graph.value(feat).dims3("roi_align")?;
    let map = kernels::roi_align_map(h, w, bbox.to_array(), out, ROI_SAMPLES)?;
    sess.graph.spatial_map(feat, Arc::new(map))
}

pub fn encode_box_deltas(proposal: &Bbox, gt: &Bbox) -> [f64; 4] {
    let (px, py) = proposal.center();
    let (gx, gy) = gt.center();
    let (pw, ph) = (proposal.width(), proposal.height());
    [
        (gx - px) / pw,
        (gy - py) / ph,
        libm::log(gt.width() / pw),
        libm::log(gt.height() / ph),
    ]
}

/// Inverse of [`encode_box_deltas`]; clips to `bounds = (w, h)` when given.
pub fn decode_box_deltas(proposal: &Bbox, deltas: &[f64; 4], bounds: Option<(f64, f64)>) -> Bbox {
    let (px, py) = proposal.center();
    let (pw, ph) = (proposal.width(), proposal.height());
    let [dx, dy, dw, dh] = *deltas;
    let b = Bbox::from_center(
        px + dx * pw,
        py + dy * ph,
        pw * libm::exp(dw.min(DELTA_CLAMP)),
        ph * libm::exp(dh.min(DELTA_CLAMP)),
    );
    match bounds {
        Some((w, h)) => b.clipped(w, h),
        None => b,
    }
}

/// Composite objective `w_fc * mean(cls) + w_conv * mean(reg)`; the
/// regression mean is over positive proposals and is zero when there are
/// none.
pub fn total_loss(cls_losses: &[f64], reg_losses: &[f64], weights: LossWeights) -> LossReport {
    let mean = |v: &[f64]| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    let (fc, conv) = (mean(cls_losses), mean(reg_losses));
    LossReport {
        total: weights.fc * fc + weights.conv * conv,
        fc,
        conv,
    }
}

/// Label assignment for one proposal.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Assignment {
    Background,
    /// Index into the ground-truth list and its class.
    Positive { gt: usize, class: usize },
}

/// Positive iff IoU >= `thresh` with some ground truth; matched to the
/// highest-IoU ground truth, ties to the lowest index.
pub fn assign_proposal(proposal: &Bbox, gts: &[(Bbox, usize)], thresh: f64) -> Assignment {
    let mut best: Option<(usize, f64)> = None;
    for (i, (g, _)) in gts.iter().enumerate() {
        let v = crate::metrics::iou(proposal, g);
        if v >= thresh && best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    match best {
        Some((gt, _)) => Assignment::Positive {
            gt,
            class: gts[gt].1,
        },
        None => Assignment::Background,
    }
}

pub fn describe(cfg: &HeadConfig) -> String {
    format!(
        "{} roi {} classes {} w_fc {} w_conv {}",
        cfg.group_number.as_str(),
        cfg.roi_size,
        cfg.num_classes,
        cfg.weights.fc,
        cfg.weights.conv
    )
}
