//! The finite-difference suite: every tape operation, the attention block,
//! the full pyramid and both head branches from RoI to loss, each over a
//! range of seeds.

use alloc::sync::Arc;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dct::{build_dct_basis, lowest_frequencies, AttentionMode, FrequencyGroups, MultiFrequencyAttention};
use crate::error::Result;
use crate::gradcheck::{grad_check, GradCheckOptions, GradReport};
use crate::graph::{Graph, Var};
use crate::head::{GroupNumber, Head, HeadConfig};
use crate::kernels::roi_align_map;
use crate::params::{ParamBuilder, ParamSet, Session};
use crate::pyramid::{Cfp, CfpConfig};
use crate::tensor::Tensor;

pub const SUITE_TOL: f64 = 1e-3;
pub const SUITE_SEEDS: usize = 20;

pub type CaseFn = fn(u64) -> Result<GradReport>;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CaseReport {
    pub name: &'static str,
    pub seeds: usize,
    pub max_error: f64,
    pub worst_seed: u64,
    pub passed: bool,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Entries in `[-1, -0.05] U [0.05, 1]`, clear of the relu kink.
fn off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.05..1.0);
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    })
}

fn opts(seed: u64, max_coords: Option<usize>) -> GradCheckOptions {
    GradCheckOptions {
        tol: SUITE_TOL,
        max_coords,
        seed,
        ..GradCheckOptions::default()
    }
}

fn rng(seed: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ tag)
}

fn conv_case(seed: u64, x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<GradReport> {
    let mut r = rng(seed, 1);
    let inputs = [uniform(&mut r, x), uniform(&mut r, w), uniform(&mut r, &[w[0]])];
    grad_check(
        |g, v| g.conv2d(v[0], v[1], v[2], stride, pad),
        &inputs,
        &opts(seed, None),
    )
}

fn conv2d_same(seed: u64) -> Result<GradReport> {
    conv_case(seed, &[2, 5, 5], &[3, 2, 3, 3], 1, 1)
}

fn conv2d_strided(seed: u64) -> Result<GradReport> {
    conv_case(seed, &[2, 6, 6], &[2, 2, 3, 3], 2, 1)
}

fn conv2d_2x2(seed: u64) -> Result<GradReport> {
    conv_case(seed, &[1, 4, 4], &[1, 1, 2, 2], 1, 0)
}

fn linear(seed: u64) -> Result<GradReport> {
    let mut r = rng(seed, 2);
    let inputs = [uniform(&mut r, &[3]), uniform(&mut r, &[4, 3]), uniform(&mut r, &[4])];
    grad_check(|g, v| g.linear(v[0], v[1], v[2]), &inputs, &opts(seed, None))
}

fn relu(seed: u64) -> Result<GradReport> {
    let mut r = rng(seed, 3);
    grad_check(|g, v| Ok(g.relu(v[0])), &[off_kink(&mut r, &[12])], &opts(seed, None))
}

fn sigmoid(seed: u64) -> Result<GradReport> {
    let mut r = rng(seed, 4);
    grad_check(|g, v| Ok(g.sigmoid(v[0])), &[uniform(&mut r, &[12])], &opts(seed, None))
}

fn softmax(seed: u64) -> Result<GradReport> {
    let mut r = rng(seed, 5);
    grad_check(|g, v| Ok(g.softmax(v[0])), &[uniform(&mut r, &[2, 5])], &opts(seed, None))
}

fn add(seed: u64) -> Result<GradReport> {
    let mut r = rng(seed, 6);
    let inputs = [uniform(&mut r, &[2, 3, 3]), uniform(&mut r, &[2, 3, 3])];
    grad_check(|g, v| g.add(v[0], v[1]), &inputs, &opts(seed, None))
}

fn resize_up(seed: u64) -> Result<GradReport> {
    let mut r = rng(seed, 7);
    grad_check(|g, v| g.resize(v[0], 5, 7), &[uniform(&mut r, &[2, 3, 3])], &opts(seed, None))
}

fn resize_down(seed: u64) -> Result<GradReport> {
    let mut r = rng(seed, 8);
    grad_check(|g, v| g.resize(v[0], 3, 2), &[uniform(&mut r, &[2, 6, 6])], &opts(seed, None))
}

fn scale_channels(seed: u64) -> Result<GradReport> {
    let mut r = rng(seed, 9);
    let inputs = [uniform(&mut r, &[3, 3, 4]), uniform(&mut r, &[3])];
    grad_check(|g, v| g.scale_channels(v[0], v[1]), &inputs, &opts(seed, None))
}

fn add_channels(seed: u64) -> Result<GradReport> {
    let mut r = rng(seed, 10);
    let inputs = [uniform(&mut r, &[3, 3, 4]), uniform(&mut r, &[3])];
    grad_check(|g, v| g.add_channels(v[0], v[1]), &inputs, &opts(seed, None))
}

fn spatial_attend(seed: u64) -> Result<GradReport> {
    let mut r = rng(seed, 11);
    let inputs = [uniform(&mut r, &[3, 3, 4]), uniform(&mut r, &[12])];
    grad_check(|g, v| g.spatial_attend(v[0], v[1]), &inputs, &opts(seed, None))
}

fn layer_norm(seed: u64) -> Result<GradReport> {
    let mut r = rng(seed, 12);
    let inputs = [uniform(&mut r, &[6]), uniform(&mut r, &[6]), uniform(&mut r, &[6])];
    grad_check(|g, v| g.layer_norm(v[0], v[1], v[2], 1e-5), &inputs, &opts(seed, None))
}

fn reshape(seed: u64) -> Result<GradReport> {
    let mut r = rng(seed, 13);
    grad_check(
        |g, v| {
            let y = g.reshape(v[0], &[3, 4])?;
            let s = g.sigmoid(y);
            g.flatten(s)
        },
        &[uniform(&mut r, &[2, 6])],
        &opts(seed, None),
    )
}

fn roi_map(seed: u64) -> Result<GradReport> {
    let mut r = rng(seed, 14);
    let x1 = r.random_range(0.0..2.0);
    let y1 = r.random_range(0.0..2.0);
    let bbox = [x1, y1, x1 + r.random_range(1.5..4.0), y1 + r.random_range(1.5..4.0)];
    let map = Arc::new(roi_align_map(6, 6, bbox, 3, 2)?);
    grad_check(
        |g, v| g.spatial_map(v[0], map.clone()),
        &[uniform(&mut r, &[2, 6, 6])],
        &opts(seed, None),
    )
}

fn plane_pool(seed: u64) -> Result<GradReport> {
    let mut r = rng(seed, 15);
    let basis = build_dct_basis(4, 4, &lowest_frequencies(4, 4, 4))?;
    let groups = FrequencyGroups::new(8, 4)?;
    grad_check(
        |g, v| g.plane_pool(v[0], basis.planes().clone(), groups.assignment().clone()),
        &[uniform(&mut r, &[8, 4, 4])],
        &opts(seed, None),
    )
}

fn mean_pool(seed: u64) -> Result<GradReport> {
    let mut r = rng(seed, 16);
    grad_check(|g, v| g.mean_pool(v[0]), &[uniform(&mut r, &[3, 4, 2])], &opts(seed, None))
}

fn combine(seed: u64) -> Result<GradReport> {
    let mut r = rng(seed, 17);
    let (a, b) = (r.random_range(-2.0..2.0), r.random_range(-2.0..2.0));
    let inputs = [uniform(&mut r, &[5]), uniform(&mut r, &[5])];
    grad_check(|g, v| g.combine(&[(v[0], a), (v[1], b)]), &inputs, &opts(seed, None))
}

fn smooth_l1(seed: u64) -> Result<GradReport> {
    let mut r = rng(seed, 18);
    let target = uniform(&mut r, &[8]).scale(2.0);
    grad_check(
        |g, v| g.smooth_l1(v[0], target.clone()),
        &[uniform(&mut r, &[8])],
        &opts(seed, None),
    )
}

fn cross_entropy(seed: u64) -> Result<GradReport> {
    let mut r = rng(seed, 19);
    let label = r.random_range(0..5);
    grad_check(
        |g, v| g.cross_entropy(v[0], label),
        &[uniform(&mut r, &[5]).scale(3.0)],
        &opts(seed, None),
    )
}

/// Runs `f` on a session whose parameters are `vars[1..]`.
fn with_session<F>(g: &mut Graph, vars: &[Var], f: F) -> Result<Var>
where
    F: FnOnce(&mut Session, Var) -> Result<Var>,
{
    let mut sess = Session::bind(core::mem::take(g), vars[1..].to_vec());
    let y = f(&mut sess, vars[0]);
    *g = sess.graph;
    y
}

fn with_params(first: Tensor, params: &ParamSet) -> Vec<Tensor> {
    let mut inputs = Vec::with_capacity(params.len() + 1);
    inputs.push(first);
    inputs.extend_from_slice(params.tensors());
    inputs
}

fn dct_attention_block(seed: u64) -> Result<GradReport> {
    let mut r = rng(seed, 20);
    let mut params = ParamSet::new();
    let freqs = lowest_frequencies(7, 7, 4);
    let block = MultiFrequencyAttention::new(&mut ParamBuilder::new(&mut params, seed), "att", 8, 7, &freqs)?;
    let inputs = with_params(uniform(&mut r, &[8, 7, 7]), &params);
    grad_check(
        |g, v| with_session(g, v, |s, x| block.forward(s, x, AttentionMode::Learned)),
        &inputs,
        &opts(seed, None),
    )
}

fn suite_cfp_config() -> CfpConfig {
    CfpConfig {
        stages: 3,
        unrolls: 2,
        channels: 4,
        ..CfpConfig::default()
    }
}

fn cfp_forward(seed: u64) -> Result<GradReport> {
    let mut r = rng(seed, 21);
    let mut params = ParamSet::new();
    let cfp = Cfp::new(suite_cfp_config(), &mut ParamBuilder::new(&mut params, seed))?;
    let image = uniform(&mut r, &[3, 16, 16]);
    let extents = suite_cfp_config().level_extents(16, 16)?;
    let proj: Vec<Tensor> = extents
        .iter()
        .map(|&(h, w)| uniform(&mut r, &[4, h, w]))
        .collect();
    let inputs = with_params(image, &params);
    grad_check(
        |g, v| {
            with_session(g, v, |s, x| {
                let pyr = cfp.forward(s, x)?;
                let mut terms = Vec::with_capacity(pyr.levels.len());
                for (&l, p) in pyr.levels.iter().zip(&proj) {
                    terms.push((s.graph.dot_const(l, p.clone())?, 1.0));
                }
                s.graph.combine(&terms)
            })
        },
        &inputs,
        &opts(seed, Some(6)),
    )
}

fn suite_head_config() -> HeadConfig {
    HeadConfig {
        group_number: GroupNumber::C4F2,
        in_channels: 4,
        conv_channels: 4,
        fc_hidden: 16,
        freqs: lowest_frequencies(7, 7, 4),
        ..HeadConfig::default()
    }
}

fn head_classification(seed: u64) -> Result<GradReport> {
    let mut r = rng(seed, 22);
    let mut params = ParamSet::new();
    let cfg = suite_head_config();
    let label = r.random_range(0..=cfg.num_classes);
    let head = Head::new(cfg, &mut ParamBuilder::new(&mut params, seed))?;
    let inputs = with_params(uniform(&mut r, &[4, 7, 7]), &params);
    grad_check(
        |g, v| {
            with_session(g, v, |s, roi| {
                let logits = head.fc_classification_branch(s, roi)?;
                s.graph.cross_entropy(logits, label)
            })
        },
        &inputs,
        &opts(seed, Some(24)),
    )
}

fn head_localization(seed: u64) -> Result<GradReport> {
    let mut r = rng(seed, 23);
    let mut params = ParamSet::new();
    let head = Head::new(suite_head_config(), &mut ParamBuilder::new(&mut params, seed))?;
    let target = uniform(&mut r, &[4]).scale(0.5);
    let inputs = with_params(uniform(&mut r, &[4, 7, 7]), &params);
    grad_check(
        |g, v| {
            with_session(g, v, |s, roi| {
                let d = head.conv_localization_branch(s, roi, AttentionMode::Learned)?;
                s.graph.smooth_l1(d, target.clone())
            })
        },
        &inputs,
        &opts(seed, Some(24)),
    )
}

/// The cases of the suite, in reporting order.
pub const CASES: &[(&str, CaseFn)] = &[
    ("conv2d", conv2d_same),
    ("conv2d_strided", conv2d_strided),
    ("conv2d_2x2", conv2d_2x2),
    ("linear", linear),
    ("relu", relu),
    ("sigmoid", sigmoid),
    ("softmax", softmax),
    ("add", add),
    ("resize_up", resize_up),
    ("resize_down", resize_down),
    ("scale_channels", scale_channels),
    ("add_channels", add_channels),
    ("spatial_attend", spatial_attend),
    ("layer_norm", layer_norm),
    ("reshape", reshape),
    ("roi_align", roi_map),
    ("multi_frequency_pool", plane_pool),
    ("mean_pool", mean_pool),
    ("combine", combine),
    ("smooth_l1", smooth_l1),
    ("cross_entropy", cross_entropy),
    ("dct_attention_block", dct_attention_block),
    ("cfp_forward", cfp_forward),
    ("head_classification", head_classification),
    ("head_localization", head_localization),
];

pub fn run_case(name: &'static str, f: CaseFn, seeds: usize) -> Result<CaseReport> {
    let mut max_error = 0.0;
    let mut worst_seed = 0;
    for seed in 0..seeds as u64 {
        let e = f(seed)?.max_error();
        if e > max_error {
            max_error = e;
            worst_seed = seed;
        }
    }
    Ok(CaseReport {
        name,
        seeds,
        max_error,
        worst_seed,
        passed: max_error <= SUITE_TOL,
    })
}

pub fn run_suite(seeds: usize) -> Result<Vec<CaseReport>> {
    CASES.iter().map(|&(n, f)| run_case(n, f, seeds)).collect()
}
