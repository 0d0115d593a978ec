//! Cross-direction feature pyramid.
//!
//! Horizontal transmission runs the backbone and a top-down FPN `N` times;
//! from the second pass on, every pyramid level of the previous pass is fed
//! back into the matching backbone stage. Vertical transmission then averages
//! all levels at a medium resolution, refines the average with a global
//! context block and adds it back to every level.
//!
//! Level indices are 0-based in code: `levels[0]` is the highest resolution.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{check_dim, invalid, Result};
use crate::graph::Var;
use crate::params::{ConvParams, LinearParams, Param, ParamBuilder, Session};

/// Stride of the stem convolution in front of the first stage.
pub const STEM_STRIDE: usize = 2;
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CfpConfig {
    pub stages: usize,
    pub unrolls: usize,
    pub channels: usize,
    pub in_channels: usize,
    pub gc_ratio: usize,
    pub share_unroll_params: bool,
}

impl Default for CfpConfig {
    fn default() -> Self {
        Self {
            stages: 4,
            unrolls: 2,
            channels: 8,
            in_channels: 3,
            gc_ratio: 4,
            share_unroll_params: false,
        }
    }
}

impl CfpConfig {
    pub fn validate(&self) -> Result<()> {
        const OP: &str = "cfp_config";
        if self.stages < 2 {
            return Err(invalid(OP, "stages must be at least 2"));
        }
        if self.unrolls < 1 {
            return Err(invalid(OP, "unrolls must be at least 1"));
        }
        if self.channels == 0 || self.in_channels == 0 {
            return Err(invalid(OP, "channel counts must be positive"));
        }
        if self.gc_ratio == 0 {
            return Err(invalid(OP, "gc_ratio must be positive"));
        }
        if self.channels >= self.gc_ratio && !self.channels.is_multiple_of(self.gc_ratio) {
            return Err(invalid(
                OP,
                format!("gc_ratio {} does not divide {} channels", self.gc_ratio, self.channels),
            ));
        }
        Ok(())
    }

    /// Width of the global-context bottleneck.
    pub fn gc_bottleneck(&self) -> usize {
        (self.channels / self.gc_ratio).max(1)
    }

    /// 0-based index of the medium level, `floor((1 + S) / 2) - 1`.
    pub fn medium_level(&self) -> usize {
        self.stages.div_ceil(2) - 1
    }

    /// Total downsampling of pyramid level `level` (0-based).
    pub fn level_stride(&self, level: usize) -> usize {
        STEM_STRIDE << (level + 1)
    }

    /// Spatial extents of every pyramid level for an `h x w` image.
    pub fn level_extents(&self, h: usize, w: usize) -> Result<Vec<(usize, usize)>> {
        let unit = STEM_STRIDE << self.stages;
        if !h.is_multiple_of(unit) || !w.is_multiple_of(unit) {
            return Err(invalid(
                "cfp",
                format!("image extents {h}x{w} must be divisible by {unit}"),
            ));
        }
        Ok((0..self.stages)
            .map(|i| (h / self.level_stride(i), w / self.level_stride(i)))
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageParams {
    pub down: ConvParams,
    pub conv: ConvParams,
}

/// Parameters of one unroll of the horizontal transmission.
#[derive(Clone, Debug, PartialEq)]
pub struct UnrollParams {
    pub stem: ConvParams,
    pub stages: Vec<StageParams>,
    pub laterals: Vec<ConvParams>,
    /// Smoothing convolutions for every level except the top one.
    pub smooths: Vec<ConvParams>,
    /// Feedback projections; empty for the first unroll.
    pub feedback: Vec<ConvParams>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GcParams {
    pub key: ConvParams,
    pub down: LinearParams,
    pub gamma: Param,
    pub beta: Param,
    pub up: LinearParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<Var>,
    /// Backbone stage outputs of the final unroll.
    pub stages: Vec<Var>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BalancedFeature {
    pub r: Var,
    /// 0-based index of the level whose extents `r` has.
    pub medium: usize,
    pub h: usize,
    pub w: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cfp {
    pub cfg: CfpConfig,
    pub unrolls: Vec<UnrollParams>,
    pub gc: GcParams,
}

fn build_unroll(b: &mut ParamBuilder<'_>, cfg: &CfpConfig, prefix: &str) -> UnrollParams {
    let c = cfg.channels;
    let stem = b.conv(&format!("{prefix}.stem"), c, cfg.in_channels, 3, STEM_STRIDE, 1);
    let stages = (0..cfg.stages)
        .map(|i| StageParams {
            down: b.conv(&format!("{prefix}.stage{}.down", i + 1), c, c, 3, 2, 1),
            conv: b.conv(&format!("{prefix}.stage{}.conv", i + 1), c, c, 3, 1, 1),
        })
        .collect();
    let laterals = (0..cfg.stages)
        .map(|i| b.conv(&format!("{prefix}.lateral{}", i + 1), c, c, 1, 1, 0))
        .collect();
    let smooths = (0..cfg.stages - 1)
        .map(|i| b.conv(&format!("{prefix}.smooth{}", i + 1), c, c, 3, 1, 1))
        .collect();
    UnrollParams {
        stem,
        stages,
        laterals,
        smooths,
        feedback: Vec::new(),
    }
}

fn build_feedback(b: &mut ParamBuilder<'_>, cfg: &CfpConfig, prefix: &str) -> Vec<ConvParams> {
    (0..cfg.stages)
        .map(|i| {
            b.conv(
                &format!("{prefix}.feedback{}", i + 1),
                cfg.channels,
                cfg.channels,
                1,
                1,
                0,
            )
        })
        .collect()
}

impl Cfp {
    pub fn new(cfg: CfpConfig, b: &mut ParamBuilder<'_>) -> Result<Self> {
        cfg.validate()?;
        let mut unrolls = Vec::with_capacity(cfg.unrolls);
        if cfg.share_unroll_params {
            let base = build_unroll(b, &cfg, "cfp.shared");
            let feedback = if cfg.unrolls > 1 {
                build_feedback(b, &cfg, "cfp.shared")
            } else {
                Vec::new()
            };
            unrolls.push(base.clone());
            for _ in 1..cfg.unrolls {
                unrolls.push(UnrollParams {
                    feedback: feedback.clone(),
                    ..base.clone()
                });
            }
        } else {
            for n in 0..cfg.unrolls {
                let prefix = format!("cfp.u{}", n + 1);
                let mut u = build_unroll(b, &cfg, &prefix);
                if n > 0 {
                    u.feedback = build_feedback(b, &cfg, &prefix);
                }
                unrolls.push(u);
            }
        }
        let c = cfg.channels;
        let bn = cfg.gc_bottleneck();
        let gc = GcParams {
            key: b.conv("cfp.gc.key", 1, c, 1, 1, 0),
            down: b.linear("cfp.gc.down", bn, c),
            gamma: b.constant("cfp.gc.ln.gamma", &[bn], 1.0),
            beta: b.constant("cfp.gc.ln.beta", &[bn], 0.0),
            up: b.linear("cfp.gc.up", c, bn),
        };
        Ok(Self { cfg, unrolls, gc })
    }

    /// Runs the stem and every stage `x_i = U_i(x_{i-1} [+ feedback_i])`.
    /// `feedback[i]` must match the extents of stage `i`'s input.
    pub fn backbone_forward(
        &self,
        sess: &mut Session,
        u: &UnrollParams,
        image: Var,
        feedback: Option<&[Var]>,
    ) -> Result<Vec<Var>> {
        const OP: &str = "backbone_forward";
        let (_, h, w) = sess.graph.value(image).dims3(OP)?;
        self.cfg.level_extents(h, w)?;
        if let Some(fb) = feedback {
            check_dim(OP, "feedback count", self.cfg.stages, fb.len())?;
        }
        let mut x = sess.conv_relu(&u.stem, image)?;
        let mut out = Vec::with_capacity(self.cfg.stages);
        for (i, stage) in u.stages.iter().enumerate() {
            if let Some(fb) = feedback {
                let want = sess.graph.value(x).shape().to_vec();
                let got = sess.graph.value(fb[i]).shape();
                if want.as_slice() != got {
                    return Err(invalid(
                        OP,
                        format!("feedback {} has shape {got:?}, stage input is {want:?}", i + 1),
                    ));
                }
                x = sess.graph.add(x, fb[i])?;
            }
            let d = sess.conv_relu(&stage.down, x)?;
            x = sess.conv_relu(&stage.conv, d)?;
            out.push(x);
        }
        Ok(out)
    }

    /// Top-down merge: `m_S = lateral_S(x_S)`,
    /// `m_i = smooth_i(lateral_i(x_i) + resize(m_{i+1}))`.
    pub fn top_down_merge(&self, sess: &mut Session, u: &UnrollParams, xs: &[Var]) -> Result<Vec<Var>> {
        let s = self.cfg.stages;
        check_dim("top_down_merge", "stage count", s, xs.len())?;
        let mut levels: Vec<Var> = Vec::with_capacity(s);
        let mut upper = sess.conv(&u.laterals[s - 1], xs[s - 1])?;
        levels.push(upper);
        for i in (0..s - 1).rev() {
            let lat = sess.conv(&u.laterals[i], xs[i])?;
            let (_, h, w) = sess.graph.value(lat).dims3("top_down_merge")?;
            let up = sess.graph.resize(upper, h, w)?;
            let sum = sess.graph.add(lat, up)?;
            upper = sess.conv(&u.smooths[i], sum)?;
            levels.push(upper);
        }
        levels.reverse();
        Ok(levels)
    }

    /// Feedback tensors `I_i(m_i)`: 1x1 projection resized to the input
    /// extents of stage `i`.
    pub fn feedback(
        &self,
        sess: &mut Session,
        u: &UnrollParams,
        prev_levels: &[Var],
        image_hw: (usize, usize),
    ) -> Result<Vec<Var>> {
        check_dim("feedback", "level count", self.cfg.stages, prev_levels.len())?;
        check_dim("feedback", "projection count", self.cfg.stages, u.feedback.len())?;
        let (h, w) = image_hw;
        (0..self.cfg.stages)
            .map(|i| {
                let p = sess.conv(&u.feedback[i], prev_levels[i])?;
                let s = self.cfg.level_stride(i) / 2;
                sess.graph.resize(p, h / s, w / s)
            })
            .collect()
    }

    /// Unrolled iterative pyramid; returns the final unroll's levels.
    pub fn horizontal_transmission(&self, sess: &mut Session, image: Var) -> Result<FeaturePyramid> {
        let (_, h, w) = sess.graph.value(image).dims3("horizontal_transmission")?;
        let mut prev: Option<Vec<Var>> = None;
        let mut stages = Vec::new();
        for u in &self.unrolls {
            let fb = match &prev {
                Some(levels) => Some(self.feedback(sess, u, levels, (h, w))?),
                None => None,
            };
            stages = self.backbone_forward(sess, u, image, fb.as_deref())?;
            prev = Some(self.top_down_merge(sess, u, &stages)?);
        }
        Ok(FeaturePyramid {
            levels: prev.expect("at least one unroll"),
            stages,
        })
    }

    /// `R = (1/S) sum_r resize(m_r -> medium extents)`.
    pub fn balance_levels(&self, sess: &mut Session, levels: &[Var]) -> Result<BalancedFeature> {
        let s = levels.len();
        if s < 2 {
            return Err(invalid("balance_levels", "need at least two levels"));
        }
        let medium = s.div_ceil(2) - 1;
        let (_, h, w) = sess.graph.value(levels[medium]).dims3("balance_levels")?;
        let mut terms = Vec::with_capacity(s);
        for (i, &m) in levels.iter().enumerate() {
            let r = if i == medium {
                m
            } else {
                sess.graph.resize(m, h, w)?
            };
            terms.push((r, 1.0 / s as f64));
        }
        let r = sess.graph.combine(&terms)?;
        Ok(BalancedFeature { r, medium, h, w })
    }

    /// `R + transform(sum_p softmax(key(R))_p R[:, p])`, with the transform
    /// `linear -> layer norm -> relu -> linear`.
    pub fn global_context_refine(&self, sess: &mut Session, r: Var) -> Result<Var> {
        let (_, h, w) = sess.graph.value(r).dims3("global_context_refine")?;
        let key = sess.conv(&self.gc.key, r)?;
        let key = sess.graph.reshape(key, &[h * w])?;
        let attn = sess.graph.softmax(key);
        let context = sess.graph.spatial_attend(r, attn)?;
        let t = sess.linear(&self.gc.down, context)?;
        let (gamma, beta) = (sess.var(self.gc.gamma), sess.var(self.gc.beta));
        let t = sess.graph.layer_norm(t, gamma, beta, LAYER_NORM_EPS)?;
        let t = sess.graph.relu(t);
        let t = sess.linear(&self.gc.up, t)?;
        sess.graph.add_channels(r, t)
    }

    /// `out_i = m_i + resize(refined -> level i extents)`.
    pub fn redistribute_levels(&self, sess: &mut Session, levels: &[Var], refined: Var) -> Result<Vec<Var>> {
        levels
            .iter()
            .map(|&m| {
                let (_, h, w) = sess.graph.value(m).dims3("redistribute_levels")?;
                let (_, rh, rw) = sess.graph.value(refined).dims3("redistribute_levels")?;
                let r = if (h, w) == (rh, rw) {
                    refined
                } else {
                    sess.graph.resize(refined, h, w)?
                };
                sess.graph.add(m, r)
            })
            .collect()
    }

    /// Horizontal then vertical transmission.
    pub fn forward(&self, sess: &mut Session, image: Var) -> Result<FeaturePyramid> {
        let p = self.horizontal_transmission(sess, image)?;
        let bal = self.balance_levels(sess, &p.levels)?;
        let refined = self.global_context_refine(sess, bal.r)?;
        let levels = self.redistribute_levels(sess, &p.levels, refined)?;
        Ok(FeaturePyramid {
            levels,
            stages: p.stages,
        })
    }
}
