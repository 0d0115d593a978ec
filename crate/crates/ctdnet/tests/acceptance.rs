//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any fails.

use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use ctdnet_core::boxes::Bbox;
use ctdnet_core::dct::{
    build_dct_basis, build_orthonormal_dct_basis, full_grid, multi_frequency_pool, AttentionMode,
    FrequencyGroups,
};
use ctdnet_core::head::{
    decode_box_deltas, encode_box_deltas, smooth_l1, total_loss, Head, HeadConfig, LossWeights,
};
use ctdnet_core::metrics::{evaluate, Detection, GroundTruthBox};
use ctdnet_core::params::{ParamBuilder, ParamSet, Session};
use ctdnet_core::pyramid::{Cfp, CfpConfig};
use ctdnet_core::suite::{run_suite, SUITE_SEEDS, SUITE_TOL};
use ctdnet_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRAD_TOL: f64 = 1e-3;
const GRAD_MIN_SEEDS: usize = 20;
const GRAD_BUDGET: Duration = Duration::from_secs(60);
const DCT_TOL: f64 = 1e-5;
const DCT_POOL_CASES: usize = 100;
const CFP_TOL: f64 = 1e-5;
const ROUND_TRIP_TOL: f64 = 1e-4;
const ROUND_TRIP_PAIRS: usize = 1000;
const METRICS_TOL: f64 = 1e-9;
const METRICS_SCENES: usize = 200;
const TRAIN_BUDGET: Duration = Duration::from_secs(300);
const MIN_MAP: f64 = 0.9;
const MIN_AP_S: f64 = 0.9;

type Check = fn(&mut Fixture) -> Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_tensor(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| r.random_range(-1.0..=1.0))
}

fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn gradient_suite(_: &mut Fixture) -> Result<String, String> {
    ensure(SUITE_SEEDS >= GRAD_MIN_SEEDS, || format!("suite runs only {SUITE_SEEDS} seeds"))?;
    ensure(SUITE_TOL <= GRAD_TOL, || format!("suite tolerance {SUITE_TOL} is looser than {GRAD_TOL}"))?;
    let t = Instant::now();
    let reports = run_suite(SUITE_SEEDS).map_err(|e| e.to_string())?;
    let elapsed = t.elapsed();
    let worst = reports
        .iter()
        .max_by(|a, b| a.max_error.total_cmp(&b.max_error))
        .expect("suite has cases");
    let failed: Vec<&str> = reports
        .iter()
        .filter(|r| !(r.max_error <= GRAD_TOL && r.seeds >= GRAD_MIN_SEEDS))
        .map(|r| r.name)
        .collect();
    ensure(failed.is_empty(), || format!("failing cases: {}", failed.join(", ")))?;
    ensure(elapsed < GRAD_BUDGET, || format!("took {elapsed:?}"))?;
    Ok(format!(
        "{} cases x {} seeds, worst {:.2e} ({}), {:.1}s",
        reports.len(),
        SUITE_SEEDS,
        worst.max_error,
        worst.name,
        elapsed.as_secs_f64()
    ))
}

fn brute_force_pool(x: &Tensor, freqs: &[(usize, usize)]) -> Vec<f64> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let per_group = c / freqs.len();
    (0..c)
        .map(|ch| {
            let (u, v) = freqs[ch / per_group];
            let mut s = 0.0;
            for i in 0..h {
                for j in 0..w {
                    let bu = (std::f64::consts::PI * u as f64 * (i as f64 + 0.5) / h as f64).cos();
                    let bv = (std::f64::consts::PI * v as f64 * (j as f64 + 0.5) / w as f64).cos();
                    s += x.at3(ch, i, j) * bu * bv;
                }
            }
            s
        })
        .collect()
}

fn dct_properties(_: &mut Fixture) -> Result<String, String> {
    for (h, w) in [(1, 1), (4, 4), (7, 7), (8, 8), (3, 5)] {
        let b = build_dct_basis(h, w, &[(0, 0)]).map_err(|e| e.to_string())?;
        ensure(b.plane(0).iter().all(|&v| v == 1.0), || format!("(0,0) plane of {h}x{w} is not all ones"))?;
    }
    let mut worst_gram: f64 = 0.0;
    for n in [4, 7, 8] {
        let b = build_orthonormal_dct_basis(n, n, &full_grid(n, n)).map_err(|e| e.to_string())?;
        for i in 0..b.len() {
            for j in 0..b.len() {
                let dot: f64 = b.plane(i).iter().zip(b.plane(j)).map(|(a, c)| a * c).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                worst_gram = worst_gram.max((dot - want).abs());
            }
        }
    }
    ensure(worst_gram <= DCT_TOL, || format!("Gram deviation {worst_gram:.2e}"))?;
    let mut r = rng(0xdc7);
    let mut worst_pool: f64 = 0.0;
    for _ in 0..DCT_POOL_CASES {
        let h = r.random_range(1..=9);
        let w = r.random_range(1..=9);
        let n = r.random_range(1..=4usize.min(h * w));
        let c = n * r.random_range(1..=3);
        let mut grid = full_grid(h, w);
        let mut freqs = Vec::with_capacity(n);
        for _ in 0..n {
            freqs.push(grid.swap_remove(r.random_range(0..grid.len())));
        }
        let x = random_tensor(&mut r, &[c, h, w]);
        let basis = build_dct_basis(h, w, &freqs).map_err(|e| e.to_string())?;
        let groups = FrequencyGroups::new(c, n).map_err(|e| e.to_string())?;
        let got = multi_frequency_pool(&x, &basis, &groups).map_err(|e| e.to_string())?;
        for (a, b) in got.data().iter().zip(brute_force_pool(&x, &freqs)) {
            worst_pool = worst_pool.max((a - b).abs());
        }
    }
    ensure(worst_pool <= DCT_TOL, || format!("pool deviation {worst_pool:.2e}"))?;
    Ok(format!(
        "DC planes exact, Gram dev {worst_gram:.1e}, pool dev {worst_pool:.1e} over {DCT_POOL_CASES} inputs"
    ))
}

fn naive_conv(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let wv = |o: usize, i: usize, ky: usize, kx: usize| w.data()[((o * ci + i) * k + ky) * k + kx];
    let mut out = Vec::with_capacity(co * oh * ow);
    for o in 0..co {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = b.data()[o];
                for i in 0..ci {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                s += wv(o, i, ky, kx) * x.at3(i, iy as usize, ix as usize);
                            }
                        }
                    }
                }
                out.push(s);
            }
        }
    }
    Tensor::new(&[co, oh, ow], out).unwrap()
}

fn naive_resize(x: &Tensor, oh: usize, ow: usize) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let coord = |d: usize, n: usize, m: usize| -> (usize, usize, f64) {
        let s = ((d as f64 + 0.5) * n as f64 / m as f64 - 0.5).max(0.0);
        let lo = (s.floor() as usize).min(n - 1);
        let hi = (lo + 1).min(n - 1);
        (lo, hi, if hi == lo { 0.0 } else { s - lo as f64 })
    };
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for y in 0..oh {
            let (y0, y1, fy) = coord(y, h, oh);
            for xx in 0..ow {
                let (x0, x1, fx) = coord(xx, w, ow);
                let top = x.at3(ch, y0, x0) * (1.0 - fx) + x.at3(ch, y0, x1) * fx;
                let bot = x.at3(ch, y1, x0) * (1.0 - fx) + x.at3(ch, y1, x1) * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Tensor::new(&[c, oh, ow], out).unwrap()
}

fn relu(t: Tensor) -> Tensor {
    t.map(|v| v.max(0.0))
}

/// Backbone plus top-down FPN from raw parameter tensors.
fn plain_fpn(set: &ParamSet, prefix: &str, stages: usize, image: &Tensor) -> Vec<Tensor> {
    let p = |n: &str| set.get(set.find(&format!("{prefix}.{n}")).expect(n)).clone();
    let conv = |x: &Tensor, n: &str, stride: usize, pad: usize| {
        naive_conv(x, &p(&format!("{n}.weight")), &p(&format!("{n}.bias")), stride, pad)
    };
    let mut x = relu(conv(image, "stem", 2, 1));
    let mut xs = Vec::new();
    for i in 1..=stages {
        let d = relu(conv(&x, &format!("stage{i}.down"), 2, 1));
        x = relu(conv(&d, &format!("stage{i}.conv"), 1, 1));
        xs.push(x.clone());
    }
    let mut levels = vec![conv(&xs[stages - 1], &format!("lateral{stages}"), 1, 0)];
    for i in (0..stages - 1).rev() {
        let lat = conv(&xs[i], &format!("lateral{}", i + 1), 1, 0);
        let up = naive_resize(levels.last().unwrap(), lat.shape()[1], lat.shape()[2]);
        levels.push(conv(&lat.add(&up).unwrap(), &format!("smooth{}", i + 1), 1, 1));
    }
    levels.reverse();
    levels
}

fn build_cfp(cfg: CfpConfig, seed: u64) -> (Cfp, ParamSet) {
    let mut set = ParamSet::new();
    let cfp = Cfp::new(cfg, &mut ParamBuilder::new(&mut set, seed)).expect("valid config");
    (cfp, set)
}

fn horizontal(cfp: &Cfp, set: &ParamSet, image: &Tensor) -> Vec<Tensor> {
    let mut s = Session::new(set);
    let x = s.graph.constant(image.clone());
    let p = cfp.horizontal_transmission(&mut s, x).unwrap();
    p.levels.iter().map(|&v| s.graph.value(v).clone()).collect()
}

fn full_forward(cfp: &Cfp, set: &ParamSet, image: &Tensor) -> Vec<Tensor> {
    let mut s = Session::new(set);
    let x = s.graph.constant(image.clone());
    let p = cfp.forward(&mut s, x).unwrap();
    p.levels.iter().map(|&v| s.graph.value(v).clone()).collect()
}

fn balance(cfp: &Cfp, set: &ParamSet, levels: &[Tensor]) -> Tensor {
    let mut s = Session::new(set);
    let vs: Vec<_> = levels.iter().map(|t| s.graph.constant(t.clone())).collect();
    let b = cfp.balance_levels(&mut s, &vs).unwrap();
    s.graph.value(b.r).clone()
}

fn cfp_properties(_: &mut Fixture) -> Result<String, String> {
    let mut r = rng(0xcf9);
    let base = CfpConfig {
        stages: 3,
        unrolls: 1,
        channels: 4,
        ..CfpConfig::default()
    };
    let image = random_tensor(&mut r, &[3, 32, 32]);

    let (cfp, set) = build_cfp(base, 11);
    let got = horizontal(&cfp, &set, &image);
    let want = plain_fpn(&set, "cfp.u1", base.stages, &image);
    let fpn_dev = got.iter().zip(&want).map(|(a, b)| max_diff(a, b)).fold(0.0, f64::max);
    ensure(fpn_dev <= CFP_TOL, || format!("N=1 differs from plain FPN by {fpn_dev:.2e}"))?;

    let shared = CfpConfig {
        share_unroll_params: true,
        ..base
    };
    let (c1, s1) = build_cfp(shared, 5);
    let ref_out = full_forward(&c1, &s1, &image);
    let mut n_dev: f64 = 0.0;
    for n in 2..=4 {
        let (cn, mut sn) = build_cfp(CfpConfig { unrolls: n, ..shared }, 99);
        let names: Vec<String> = sn.iter().map(|(k, _)| k.to_string()).collect();
        for name in names {
            let t = match s1.find(&name) {
                Some(p) => s1.get(p).clone(),
                None if name.contains("feedback") => Tensor::zeros(sn.get(sn.find(&name).unwrap()).shape()),
                None => return Err(format!("unexpected parameter {name}")),
            };
            sn.assign(&name, t).map_err(|e| e.to_string())?;
        }
        let out = full_forward(&cn, &sn, &image);
        n_dev = out.iter().zip(&ref_out).map(|(a, b)| max_diff(a, b)).fold(n_dev, f64::max);
    }
    ensure(n_dev <= CFP_TOL, || format!("zero feedback output depends on N by {n_dev:.2e}"))?;

    let mut fix_dev: f64 = 0.0;
    let mut lin_dev: f64 = 0.0;
    for s in 2..=4 {
        let cfg = CfpConfig { stages: s, ..base };
        let (cfp, set) = build_cfp(cfg, 3);
        let ext = cfg.level_extents(64, 64).unwrap();
        let k: Vec<f64> = (0..cfg.channels).map(|_| r.random_range(-2.0..2.0)).collect();
        let consts: Vec<Tensor> = ext
            .iter()
            .map(|&(h, w)| Tensor::from_fn(&[cfg.channels, h, w], |i| k[i / (h * w)]))
            .collect();
        let b = balance(&cfp, &set, &consts);
        let (mh, mw) = ext[cfg.medium_level()];
        ensure(b.shape() == [cfg.channels, mh, mw], || format!("balance shape {:?}", b.shape()))?;
        fix_dev = fix_dev.max(max_diff(&b, &Tensor::from_fn(b.shape(), |i| k[i / (mh * mw)])));
        let p: Vec<Tensor> = ext.iter().map(|&(h, w)| random_tensor(&mut r, &[cfg.channels, h, w])).collect();
        let q: Vec<Tensor> = ext.iter().map(|&(h, w)| random_tensor(&mut r, &[cfg.channels, h, w])).collect();
        let (a, c) = (r.random_range(-3.0..3.0), r.random_range(-3.0..3.0));
        let mix: Vec<Tensor> = p
            .iter()
            .zip(&q)
            .map(|(x, y)| x.scale(a).add(&y.scale(c)).unwrap())
            .collect();
        let lhs = balance(&cfp, &set, &mix);
        let rhs = balance(&cfp, &set, &p).scale(a).add(&balance(&cfp, &set, &q).scale(c)).unwrap();
        lin_dev = lin_dev.max(max_diff(&lhs, &rhs));
    }
    ensure(fix_dev <= CFP_TOL, || format!("constant pyramid moved by {fix_dev:.2e}"))?;
    ensure(lin_dev <= CFP_TOL, || format!("balance nonlinearity {lin_dev:.2e}"))?;

    for s in 2..=4 {
        for unrolls in [1, 2] {
            let cfg = CfpConfig { stages: s, unrolls, ..base };
            let (cfp, set) = build_cfp(cfg, 8);
            let side = 4usize << s;
            let img = random_tensor(&mut r, &[3, side, 2 * side]);
            let levels = full_forward(&cfp, &set, &img);
            ensure(levels.len() == s, || format!("S={s}: {} levels", levels.len()))?;
            for (i, l) in levels.iter().enumerate() {
                let want = [cfg.channels, side >> (i + 2), (2 * side) >> (i + 2)];
                ensure(l.shape() == want, || format!("S={s} level {i}: {:?} != {want:?}", l.shape()))?;
            }
        }
    }
    Ok(format!(
        "FPN dev {fpn_dev:.1e}, N-independence dev {n_dev:.1e}, fixpoint dev {fix_dev:.1e}, linearity dev {lin_dev:.1e}, halving holds for S=2,3,4"
    ))
}

fn head_properties(_: &mut Fixture) -> Result<String, String> {
    let mut r = rng(0x4ead);
    let cfg = HeadConfig::default();
    for seed in 0..10 {
        let mut set = ParamSet::new();
        let head = Head::new(cfg.clone(), &mut ParamBuilder::new(&mut set, seed)).unwrap();
        let roi = random_tensor(&mut r, &[cfg.in_channels, cfg.roi_size, cfg.roi_size]);
        let run = |set: &ParamSet, mode: AttentionMode| -> Vec<u64> {
            let mut s = Session::new(set);
            let x = s.graph.constant(roi.clone());
            let y = head.conv_localization_branch(&mut s, x, mode).unwrap();
            s.graph.value(y).data().iter().map(|v| v.to_bits()).collect()
        };
        let plain = run(&set, AttentionMode::Bypass);
        ensure(run(&set, AttentionMode::UnitWeights) == plain, || format!("unit weights differ (seed {seed})"))?;
        let fc = head.attention.fc;
        let zeros = Tensor::zeros(set.get(fc.w).shape());
        *set.get_mut(fc.w) = zeros;
        *set.get_mut(fc.b) = Tensor::full(&[cfg.conv_channels], 40.0);
        ensure(run(&set, AttentionMode::Learned) == plain, || format!("saturated attention differs (seed {seed})"))?;
    }

    let mut worst_rt: f64 = 0.0;
    let rand_box = |r: &mut ChaCha8Rng| {
        let (w, h) = (r.random_range(2.0..=100.0), r.random_range(2.0..=100.0));
        Bbox::from_center(r.random_range(0.0..200.0), r.random_range(0.0..200.0), w, h)
    };
    for _ in 0..ROUND_TRIP_PAIRS {
        let (p, g) = (rand_box(&mut r), rand_box(&mut r));
        let back = decode_box_deltas(&p, &encode_box_deltas(&p, &g), None);
        for (a, b) in back.to_array().iter().zip(g.to_array()) {
            worst_rt = worst_rt.max((a - b).abs());
        }
    }
    ensure(worst_rt <= ROUND_TRIP_TOL, || format!("round trip error {worst_rt:.2e}"))?;

    let sl1 = |d: f64| smooth_l1(&Tensor::from_vec(vec![d]), &Tensor::from_vec(vec![0.0])).unwrap();
    for (d, want) in [(0.0, 0.0), (0.5, 0.125), (-0.5, 0.125), (2.0, 1.5), (-2.0, 1.5)] {
        ensure(sl1(d) == want, || format!("smooth L1 at {d} is {}", sl1(d)))?;
    }

    let w = LossWeights::default();
    ensure(w.fc == 2.0 && w.conv == 2.0, || format!("default weights {w:?}"))?;
    for _ in 0..200 {
        let cls: Vec<f64> = (0..r.random_range(1..10)).map(|_| r.random_range(0.0..5.0)).collect();
        let reg: Vec<f64> = (0..r.random_range(0..10)).map(|_| r.random_range(0.0..5.0)).collect();
        let l = total_loss(&cls, &reg, w);
        let fc = cls.iter().sum::<f64>() / cls.len() as f64;
        let conv = if reg.is_empty() { 0.0 } else { reg.iter().sum::<f64>() / reg.len() as f64 };
        ensure(l.fc == fc && l.conv == conv, || "branch means differ".into())?;
        ensure(l.total == 2.0 * fc + 2.0 * conv, || format!("total {} != 2 fc + 2 conv", l.total))?;
    }
    Ok(format!(
        "attention bit-identical, round trip {worst_rt:.1e} over {ROUND_TRIP_PAIRS} pairs, smooth L1 knees exact, total exact"
    ))
}

fn area_bucket(b: &Bbox) -> usize {
    let a = (b.x2 - b.x1) * (b.y2 - b.y1);
    if a < 1024.0 {
        0
    } else if a < 9216.0 {
        1
    } else {
        2
    }
}

fn ref_iou(a: &Bbox, b: &Bbox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
    if inter > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Rank-by-rank VOC computation with sentinel recall points.
fn ref_ap(ranked_tp: &[bool], num_gt: usize) -> f64 {
    let mut rec = vec![0.0];
    let mut prec = vec![0.0];
    let mut tp = 0.0;
    for (k, &t) in ranked_tp.iter().enumerate() {
        if t {
            tp += 1.0;
        }
        rec.push(tp / num_gt as f64);
        prec.push(tp / (k + 1) as f64);
    }
    rec.push(1.0);
    prec.push(0.0);
    for i in (0..prec.len() - 1).rev() {
        prec[i] = prec[i].max(prec[i + 1]);
    }
    (0..rec.len() - 1)
        .filter(|&i| rec[i + 1] != rec[i])
        .map(|i| (rec[i + 1] - rec[i]) * prec[i + 1])
        .sum()
}

struct RefReport {
    map: f64,
    buckets: [Option<f64>; 3],
}

fn ref_evaluate(dets: &[Detection], gts: &[GroundTruthBox]) -> RefReport {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    for i in 1..order.len() {
        let mut j = i;
        while j > 0 && dets[order[j - 1]].score < dets[order[j]].score {
            order.swap(j - 1, j);
            j -= 1;
        }
    }
    let mut owner: Vec<Option<usize>> = vec![None; dets.len()];
    let mut used = vec![false; gts.len()];
    for &d in &order {
        let mut best = None;
        let mut best_iou = 0.5;
        for g in 0..gts.len() {
            if used[g] || gts[g].image != dets[d].image || gts[g].class != dets[d].class {
                continue;
            }
            let v = ref_iou(&dets[d].bbox, &gts[g].bbox);
            if v >= best_iou && (best.is_none() || v > best_iou) {
                best = Some(g);
                best_iou = v;
            }
        }
        if let Some(g) = best {
            used[g] = true;
            owner[d] = Some(g);
        }
    }
    let mut classes: Vec<usize> = gts.iter().map(|g| g.class).collect();
    classes.sort_unstable();
    classes.dedup();
    let ap = |class: usize, bucket: Option<usize>| -> Option<f64> {
        let keep = |g: usize| gts[g].class == class && bucket.is_none_or(|b| area_bucket(&gts[g].bbox) == b);
        let n = (0..gts.len()).filter(|&g| keep(g)).count();
        if n == 0 {
            return None;
        }
        let ranked: Vec<bool> = order
            .iter()
            .filter(|&&d| dets[d].class == class)
            .filter_map(|&d| match owner[d] {
                Some(g) if keep(g) => Some(true),
                Some(_) => None,
                None => Some(false),
            })
            .collect();
        Some(ref_ap(&ranked, n))
    };
    let map = classes.iter().map(|&c| ap(c, None).unwrap()).sum::<f64>() / classes.len() as f64;
    let buckets = [0, 1, 2].map(|b| {
        let v: Vec<f64> = classes.iter().filter_map(|&c| ap(c, Some(b))).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    });
    RefReport { map, buckets }
}

fn micro_scene(r: &mut ChaCha8Rng) -> (Vec<Detection>, Vec<GroundTruthBox>) {
    let n_gt = r.random_range(1..=5);
    let n_det = r.random_range(0..=8);
    let n_cls = r.random_range(1..=3);
    let gts: Vec<GroundTruthBox> = (0..n_gt)
        .map(|_| {
            let (w, h) = (r.random_range(5.0..150.0), r.random_range(5.0..150.0));
            let (x, y) = (r.random_range(0.0..200.0), r.random_range(0.0..200.0));
            GroundTruthBox {
                image: r.random_range(0..2),
                class: r.random_range(0..n_cls),
                bbox: Bbox::new(x, y, x + w, y + h).unwrap(),
            }
        })
        .collect();
    let dets = (0..n_det)
        .map(|_| {
            let score = r.random_range(0..6) as f64 / 5.0;
            if r.random_bool(0.7) {
                let g = gts[r.random_range(0..gts.len())];
                let (w, h) = (g.bbox.width(), g.bbox.height());
                let j = |r: &mut ChaCha8Rng, s: f64| r.random_range(-0.2..0.2) * s;
                let x1 = g.bbox.x1 + j(r, w);
                let y1 = g.bbox.y1 + j(r, h);
                Detection {
                    image: if r.random_bool(0.9) { g.image } else { 1 - g.image },
                    class: if r.random_bool(0.8) { g.class } else { r.random_range(0..n_cls) },
                    score,
                    bbox: Bbox::new(x1, y1, x1 + w * r.random_range(0.8..1.2), y1 + h * r.random_range(0.8..1.2)).unwrap(),
                }
            } else {
                let (x, y) = (r.random_range(0.0..200.0), r.random_range(0.0..200.0));
                Detection {
                    image: r.random_range(0..2),
                    class: r.random_range(0..n_cls),
                    score,
                    bbox: Bbox::new(x, y, x + r.random_range(5.0..150.0), y + r.random_range(5.0..150.0)).unwrap(),
                }
            }
        })
        .collect();
    (dets, gts)
}

fn metrics_oracle(_: &mut Fixture) -> Result<String, String> {
    let mut r = rng(0x3e7);
    let mut worst: f64 = 0.0;
    for i in 0..METRICS_SCENES {
        let (dets, gts) = micro_scene(&mut r);
        let got = evaluate(&dets, &gts).map_err(|e| e.to_string())?;
        let want = ref_evaluate(&dets, &gts);
        worst = worst.max((got.map - want.map).abs());
        let buckets = [got.ap_small, got.ap_medium, got.ap_large];
        for (g, w) in buckets.iter().zip(&want.buckets) {
            match (g, w) {
                (Some(a), Some(b)) => worst = worst.max((a - b).abs()),
                (None, None) => {}
                _ => return Err(format!("scene {i}: bucket presence differs")),
            }
        }
    }
    ensure(worst <= METRICS_TOL, || format!("deviation {worst:.2e}"))?;
    use ctdnet_core::metrics::{size_bucket, SizeBucket};
    for (side, want) in [
        (30.0, SizeBucket::Small),
        (32.0, SizeBucket::Medium),
        (95.0, SizeBucket::Medium),
        (96.0, SizeBucket::Large),
        (100.0, SizeBucket::Large),
    ] {
        let b = Bbox::new(0.0, 0.0, side, side).unwrap();
        ensure(size_bucket(&b) == want, || format!("area {} in {:?}", side * side, size_bucket(&b)))?;
    }
    Ok(format!(
        "{METRICS_SCENES} micro-scenes, max deviation {worst:.1e}; areas 900 S, 1024 M, 9025 M, 9216 L, 10000 L"
    ))
}

/// Artifacts of the fixture runs, shared by the end-to-end checks.
#[derive(Default)]
struct Fixture {
    first: Option<Result<RunOutput, String>>,
}

struct RunOutput {
    _dir: tempfile::TempDir,
    out: PathBuf,
    train_time: Duration,
    report: String,
}

fn fixture_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/fixture.cfg")
}

fn ctdnet(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_ctdnet"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    } else {
        Err(format!("ctdnet {} failed: {}", args[0], String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn run_fixture() -> Result<RunOutput, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let out = dir.path().join("run");
    let cfg = fixture_config();
    let (cfg, o) = (cfg.to_str().unwrap(), out.to_str().unwrap());
    let t = Instant::now();
    ctdnet(&["train", "-c", cfg, "-o", o])?;
    let train_time = t.elapsed();
    let ck = out.join("checkpoint.ctdk");
    ctdnet(&["eval", "-c", cfg, "-o", o, "--checkpoint", ck.to_str().unwrap()])?;
    ctdnet(&["heatmap", "-c", cfg, "-o", o, "--checkpoint", ck.to_str().unwrap()])?;
    let report = std::fs::read_to_string(out.join("report.txt")).map_err(|e| e.to_string())?;
    Ok(RunOutput {
        _dir: dir,
        out,
        train_time,
        report,
    })
}

impl Fixture {
    fn first(&mut self) -> Result<&RunOutput, String> {
        self.first.get_or_insert_with(run_fixture).as_ref().map_err(Clone::clone)
    }
}

fn report_value(report: &str, key: &str) -> Result<f64, String> {
    report
        .lines()
        .find_map(|l| l.strip_prefix(key).and_then(|v| v.strip_prefix(' ')))
        .ok_or_else(|| format!("report has no {key}"))?
        .trim()
        .parse()
        .map_err(|_| format!("{key} is not a number"))
}

fn end_to_end(f: &mut Fixture) -> Result<String, String> {
    let run = f.first()?;
    let map = report_value(&run.report, "mAP")?;
    let ap_s = report_value(&run.report, "AP_S")?;
    let log = std::fs::read_to_string(run.out.join("train_log.txt")).map_err(|e| e.to_string())?;
    let steps = log.lines().filter(|l| !l.starts_with('#')).count();
    ensure(steps == 500, || format!("{steps} logged steps"))?;
    ensure(run.train_time < TRAIN_BUDGET, || format!("training took {:?}", run.train_time))?;
    ensure(map >= MIN_MAP && ap_s >= MIN_AP_S, || format!("mAP {map}, AP_S {ap_s}"))?;
    Ok(format!(
        "{steps} steps in {:.1}s, mAP {map:.3}, AP_S {ap_s:.3}",
        run.train_time.as_secs_f64()
    ))
}

fn determinism(f: &mut Fixture) -> Result<String, String> {
    let second = run_fixture()?;
    let first = f.first()?;
    for name in ["train_log.txt", "checkpoint.ctdk", "detections.txt", "report.txt"] {
        let a = std::fs::read(first.out.join(name)).map_err(|e| e.to_string())?;
        let b = std::fs::read(second.out.join(name)).map_err(|e| e.to_string())?;
        ensure(a == b, || format!("{name} differs between runs"))?;
    }
    Ok("loss log, checkpoint, detections and report byte-identical".into())
}

/// Header fields and body of a binary greymap, parsed without the crate.
fn read_p5(buf: &[u8]) -> Result<(usize, usize, usize, usize), String> {
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < 4 {
        while i < buf.len() && buf[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < buf.len() && buf[i] == b'#' {
            while i < buf.len() && buf[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let s = i;
        while i < buf.len() && !buf[i].is_ascii_whitespace() {
            i += 1;
        }
        if s == i {
            return Err("truncated header".into());
        }
        fields.push(std::str::from_utf8(&buf[s..i]).map_err(|e| e.to_string())?.to_string());
    }
    if fields[0] != "P5" {
        return Err(format!("magic {}", fields[0]));
    }
    let num = |k: usize| fields[k].parse::<usize>().map_err(|e| e.to_string());
    let (w, h, max) = (num(1)?, num(2)?, num(3)?);
    Ok((w, h, max, buf.len() - i - 1))
}

fn heatmap_artifact(f: &mut Fixture) -> Result<String, String> {
    let run = f.first()?;
    let cfg = std::fs::read_to_string(fixture_config()).map_err(|e| e.to_string())?;
    let get = |k: &str| -> usize {
        cfg.lines()
            .filter_map(|l| l.split('#').next()?.split_once('='))
            .find(|(a, _)| a.trim() == k)
            .and_then(|(_, v)| v.trim().parse().ok())
            .unwrap_or_else(|| panic!("fixture has no {k}"))
    };
    let (stages, w, h) = (get("stages"), get("width"), get("height"));
    for level in 0..stages {
        let p = run.out.join(format!("heatmap_scene0000_level{level}.pgm"));
        let buf = std::fs::read(&p).map_err(|e| format!("{}: {e}", p.display()))?;
        let (pw, ph, max, body) = read_p5(&buf)?;
        ensure((pw, ph) == (w, h), || format!("level {level} is {pw}x{ph}"))?;
        ensure(max == 255 && body == w * h, || format!("level {level}: maxval {max}, {body} bytes"))?;
    }
    Ok(format!("{stages} levels, each a {w}x{h} P5 greymap"))
}

fn main() -> ExitCode {
    let checks: [(&str, Check); 8] = [
        ("gradient suite", gradient_suite),
        ("DCT properties", dct_properties),
        ("CFP properties", cfp_properties),
        ("head properties", head_properties),
        ("metrics oracle", metrics_oracle),
        ("end-to-end fixture", end_to_end),
        ("determinism", determinism),
        ("heatmap artifact", heatmap_artifact),
    ];
    let mut fixture = Fixture::default();
    let mut failed = 0;
    for (name, check) in checks {
        let r = panic::catch_unwind(AssertUnwindSafe(|| check(&mut fixture)))
            .unwrap_or_else(|p| {
                let msg = p
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                Err(format!("panicked: {msg}"))
            });
        match r {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name}: {why}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
