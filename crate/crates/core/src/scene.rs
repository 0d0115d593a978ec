//! Synthetic scenes of aggregated small logos and RPN-free proposal
//! synthesis.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::boxes::Bbox;
use crate::error::{invalid, Result};
use crate::metrics::{iou, GroundTruthBox};
use crate::tensor::Tensor;

pub const PLACEMENT_ATTEMPTS: usize = 100;
/// Upper bound on regenerations before giving up on a configuration.
pub const MAX_REGENERATIONS: u32 = 1000;
pub const MAX_GT_IOU: f64 = 0.3;
pub const BACKGROUND_LEVEL: f64 = 0.3;

const PALETTE: [[f64; 3]; 6] = [
    [0.95, 0.15, 0.15],
    [0.15, 0.9, 0.15],
    [0.2, 0.3, 0.95],
    [0.95, 0.9, 0.1],
    [0.9, 0.15, 0.9],
    [0.1, 0.9, 0.9],
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Glyph {
    FilledSquare,
    Ring,
    Cross,
}

impl Glyph {
    pub fn for_class(class: usize) -> Self {
        match class % 3 {
            0 => Self::FilledSquare,
            1 => Self::Ring,
            _ => Self::Cross,
        }
    }

    /// Whether pixel `(dy, dx)` of a `h x w` glyph is painted. Every glyph
    /// touches all four sides of its box.
    pub fn covers(self, dy: usize, dx: usize, h: usize, w: usize) -> bool {
        match self {
            Self::FilledSquare => true,
            Self::Ring => {
                let t = (h.min(w) / 4).max(1);
                dy < t || dx < t || dy >= h - t || dx >= w - t
            }
            Self::Cross => {
                let in_band = |d: usize, n: usize| {
                    let t = (n / 3).max(2).min(n);
                    let lo = (n - t) / 2;
                    d >= lo && d < lo + t
                };
                in_band(dy, h) || in_band(dx, w)
            }
        }
    }
}

pub fn class_color(class: usize) -> [f64; 3] {
    PALETTE[class % PALETTE.len()]
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub num_classes: usize,
    pub logos_min: usize,
    pub logos_max: usize,
    pub side_min: usize,
    pub side_max: usize,
    /// Maximum offset of a logo center from the shared cluster center.
    pub cluster_spread: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 128,
            height: 128,
            num_classes: 3,
            logos_min: 3,
            logos_max: 6,
            side_min: 6,
            side_max: 14,
            cluster_spread: 24.0,
            noise_sigma: 0.05,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        const OP: &str = "scene_config";
        if self.side_min == 0 || self.side_min > self.side_max {
            return Err(invalid(OP, "need 0 < side_min <= side_max"));
        }
        if self.logos_min == 0 || self.logos_min > self.logos_max {
            return Err(invalid(OP, "need 0 < logos_min <= logos_max"));
        }
        if self.width < self.side_max + 2 || self.height < self.side_max + 2 {
            return Err(invalid(OP, "image too small for the largest logo"));
        }
        if self.num_classes == 0 {
            return Err(invalid(OP, "num_classes must be positive"));
        }
        if !(self.cluster_spread >= 0.0 && self.noise_sigma >= 0.0) {
            return Err(invalid(OP, "spread and noise must be nonnegative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub index: usize,
    /// `[3, height, width]`.
    pub image: Tensor,
    pub gts: Vec<GroundTruthBox>,
    /// Times placement failed and the scene was redrawn with a new sub-seed.
    pub regenerations: u32,
}

/// SplitMix64-style mixing of several words into one seed.
pub fn mix_seed(words: &[u64]) -> u64 {
    let mut z: u64 = 0x243f_6a88_85a3_08d3;
    for &w in words {
        z = z.wrapping_add(w).wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
    }
    z
}

fn place(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Option<Vec<(Bbox, usize)>> {
    let count = rng.random_range(cfg.logos_min..=cfg.logos_max);
    let margin = cfg.side_max as f64 / 2.0;
    let cx = rng.random_range(margin..=cfg.width as f64 - margin);
    let cy = rng.random_range(margin..=cfg.height as f64 - margin);
    let mut placed: Vec<(Bbox, usize)> = Vec::with_capacity(count);
    for _ in 0..count {
        let class = rng.random_range(0..cfg.num_classes);
        let mut ok = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let w = rng.random_range(cfg.side_min..=cfg.side_max);
            let h = rng.random_range(cfg.side_min..=cfg.side_max);
            let s = cfg.cluster_spread;
            let (ox, oy) = if s > 0.0 {
                (rng.random_range(-s..=s), rng.random_range(-s..=s))
            } else {
                (0.0, 0.0)
            };
            let x0 = libm::round(cx + ox - w as f64 / 2.0);
            let y0 = libm::round(cy + oy - h as f64 / 2.0);
            if x0 < 0.0 || y0 < 0.0 || x0 + w as f64 > cfg.width as f64 || y0 + h as f64 > cfg.height as f64 {
                continue;
            }
            let b = Bbox {
                x1: x0,
                y1: y0,
                x2: x0 + w as f64,
                y2: y0 + h as f64,
            };
            // keep a one-pixel gap so no glyph paints over another
            let grown = Bbox {
                x1: b.x1 - 1.0,
                y1: b.y1 - 1.0,
                x2: b.x2 + 1.0,
                y2: b.y2 + 1.0,
            };
            if placed.iter().any(|(p, _)| grown.intersection_area(p) > 0.0) {
                continue;
            }
            placed.push((b, class));
            ok = true;
            break;
        }
        if !ok {
            return None;
        }
    }
    Some(placed)
}

fn render(cfg: &SceneConfig, logos: &[(Bbox, usize)], rng: &mut ChaCha8Rng) -> Tensor {
    let (w, h) = (cfg.width, cfg.height);
    let mut img = Tensor::full(&[3, h, w], BACKGROUND_LEVEL);
    let data = img.data_mut();
    for &(b, class) in logos {
        let glyph = Glyph::for_class(class);
        let color = class_color(class);
        let (x0, y0) = (b.x1 as usize, b.y1 as usize);
        let (bw, bh) = (b.width() as usize, b.height() as usize);
        for dy in 0..bh {
            for dx in 0..bw {
                if glyph.covers(dy, dx, bh, bw) {
                    for (ch, &c) in color.iter().enumerate() {
                        data[(ch * h + y0 + dy) * w + x0 + dx] = c;
                    }
                }
            }
        }
    }
    if cfg.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_sigma).expect("finite sigma");
        for v in data.iter_mut() {
            *v += normal.sample(rng);
        }
    }
    img
}

/// Deterministic scene `index` of the configured family.
pub fn generate_synthetic_scene(cfg: &SceneConfig, index: usize) -> Result<Scene> {
    cfg.validate()?;
    for sub in 0..=MAX_REGENERATIONS {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, index as u64, sub as u64]));
        let Some(logos) = place(cfg, &mut rng) else {
            continue;
        };
        let image = render(cfg, &logos, &mut rng);
        let gts = logos
            .iter()
            .map(|&(bbox, class)| GroundTruthBox {
                image: index,
                class,
                bbox,
            })
            .collect();
        return Ok(Scene {
            index,
            image,
            gts,
            regenerations: sub,
        });
    }
    Err(invalid(
        "generate_synthetic_scene",
        "placement failed repeatedly; loosen side range or spread",
    ))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProposalConfig {
    pub jitter: f64,
    pub negatives: usize,
}

pub const NEGATIVE_ATTEMPTS: usize = 1000;

/// Two jittered copies of every ground truth followed by `negatives` random
/// boxes with IoU below 0.3 against every ground truth. `bounds = (w, h)`.
pub fn make_proposals(
    gts: &[Bbox],
    jitter: f64,
    negatives: usize,
    seed: u64,
    bounds: (f64, f64),
) -> Vec<Bbox> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (bw, bh) = bounds;
    let mut out = Vec::with_capacity(2 * gts.len() + negatives);
    let u = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| {
        if hi > lo {
            rng.random_range(lo..=hi)
        } else {
            lo
        }
    };
    for g in gts {
        for _ in 0..2 {
            if jitter == 0.0 {
                out.push(*g);
                continue;
            }
            let (cx, cy) = g.center();
            let (w, h) = (g.width(), g.height());
            let ncx = cx + u(&mut rng, -jitter, jitter) * w;
            let ncy = cy + u(&mut rng, -jitter, jitter) * h;
            let nw = w * u(&mut rng, 1.0 - jitter, 1.0 + jitter);
            let nh = h * u(&mut rng, 1.0 - jitter, 1.0 + jitter);
            out.push(Bbox::from_center(ncx, ncy, nw, nh).clipped(bw, bh));
        }
    }
    let side = |f: fn(f64, f64) -> f64, init: f64| {
        gts.iter().fold(init, |m, g| f(f(m, g.width()), g.height()))
    };
    let (smin, smax) = if gts.is_empty() {
        (8.0, 16.0)
    } else {
        (side(f64::min, f64::INFINITY), side(f64::max, 0.0))
    };
    for _ in 0..negatives {
        for _ in 0..NEGATIVE_ATTEMPTS {
            let w = u(&mut rng, smin, smax).min(bw);
            let h = u(&mut rng, smin, smax).min(bh);
            let x1 = u(&mut rng, 0.0, bw - w);
            let y1 = u(&mut rng, 0.0, bh - h);
            let b = Bbox {
                x1,
                y1,
                x2: x1 + w,
                y2: y1 + h,
            };
            if gts.iter().all(|g| iou(&b, g) < MAX_GT_IOU) {
                out.push(b);
                break;
            }
        }
    }
    out
}
