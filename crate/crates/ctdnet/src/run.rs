//! The subcommands, as library functions writing into the configured
//! output directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, ensure, Context, Result};
use ctdnet_core::detector::{evaluate_scenes, heatmap, Detector, Trainer};
use ctdnet_core::metrics::{evaluate, EvalReport};
use ctdnet_core::scene::{generate_synthetic_scene, mix_seed, Scene};
use ctdnet_core::suite::{self, CaseReport};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::formats::{encode_pgm, encode_ppm, format_detections, format_ground_truth, parse_detections, parse_ground_truth};

pub const CHECKPOINT_FILE: &str = "checkpoint.ctdk";
pub const TRAIN_LOG: &str = "train_log.txt";
pub const EVAL_LOG: &str = "eval_log.txt";
pub const GT_FILE: &str = "ground_truth.txt";
pub const DETECTIONS_FILE: &str = "detections.txt";
pub const REPORT_FILE: &str = "report.txt";

const INIT_TAG: u64 = 0x696e_6974;

/// A failure of the numerics rather than of the inputs.
#[derive(Debug)]
pub struct NumericFailure(pub String);

impl std::fmt::Display for NumericFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NumericFailure {}

/// 2 for numeric failures anywhere in the chain, 1 otherwise.
pub fn exit_code(e: &anyhow::Error) -> i32 {
    let numeric = e.chain().any(|c| {
        c.is::<NumericFailure>()
            || matches!(c.downcast_ref::<ctdnet_core::Error>(), Some(ctdnet_core::Error::NonFinite { .. }))
    });
    if numeric {
        2
    } else {
        1
    }
}

pub fn scenes(cfg: &RunConfig) -> Result<Vec<Scene>> {
    (0..cfg.num_scenes)
        .map(|i| generate_synthetic_scene(&cfg.scene, i).map_err(|e| anyhow!(e)))
        .collect()
}

pub fn build_detector(cfg: &RunConfig) -> Result<Detector> {
    Detector::new(cfg.detector.clone(), mix_seed(&[cfg.seed, INIT_TAG])).map_err(|e| anyhow!(e))
}

pub fn load_detector(cfg: &RunConfig, checkpoint: &Path) -> Result<Detector> {
    let mut det = build_detector(cfg)?;
    Checkpoint::load(checkpoint)?.restore_params(&mut det.params)?;
    Ok(det)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn regeneration_notes(scenes: &[Scene]) -> String {
    let mut s = String::new();
    for sc in scenes.iter().filter(|s| s.regenerations > 0) {
        writeln!(s, "# scene {} regenerated {} times", sc.index, sc.regenerations).unwrap();
    }
    s
}

#[derive(Clone, Debug)]
pub struct GenSummary {
    pub images: Vec<PathBuf>,
    pub ground_truth: PathBuf,
    pub regenerations: u32,
}

/// Writes `scenes/scene_NNNN.ppm` and one ground-truth file for all scenes.
pub fn gen(cfg: &RunConfig) -> Result<GenSummary> {
    let dir = cfg.output_dir.join("scenes");
    create_dir(&dir)?;
    let scenes = scenes(cfg)?;
    let mut images = Vec::with_capacity(scenes.len());
    let mut gts = Vec::new();
    for s in &scenes {
        let p = dir.join(format!("scene_{:04}.ppm", s.index));
        write(&p, encode_ppm(&s.image)?)?;
        images.push(p);
        gts.extend_from_slice(&s.gts);
    }
    let gt_path = cfg.output_dir.join(GT_FILE);
    write(&gt_path, format_ground_truth(&gts))?;
    write(&cfg.output_dir.join("gen_log.txt"), regeneration_notes(&scenes))?;
    Ok(GenSummary {
        images,
        ground_truth: gt_path,
        regenerations: scenes.iter().map(|s| s.regenerations).sum(),
    })
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub steps: usize,
    pub first_total: Option<f64>,
    pub last_total: Option<f64>,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

/// Runs `cfg.train.steps` SGD steps (continuing from `resume` when given),
/// appending `step total fc conv` lines to the loss log, then writes the
/// checkpoint. A non-finite loss aborts with the step in the message.
pub fn train(cfg: &RunConfig, resume: Option<&Path>) -> Result<TrainSummary> {
    create_dir(&cfg.output_dir)?;
    let scenes = scenes(cfg)?;
    let mut det = build_detector(cfg)?;
    let mut start = 0;
    let mut velocity = None;
    if let Some(p) = resume {
        let ck = Checkpoint::load(p)?;
        ck.restore_params(&mut det.params)?;
        velocity = ck.velocities(&det.params);
        start = ck.step().unwrap_or(0);
    }
    let mut trainer = Trainer::new(det, cfg.train).map_err(|e| anyhow!(e))?;
    trainer.step = start;
    if let Some(v) = velocity {
        trainer.optim.velocity = v;
    }
    let mut log = String::new();
    if start == 0 {
        log.push_str("# step total fc conv\n");
        log.push_str(&regeneration_notes(&scenes));
    }
    let mut eval_log = String::new();
    let (mut first, mut last) = (None, None);
    for _ in 0..cfg.train.steps {
        let rec = trainer.train_step(&scenes).map_err(|e| match e {
            ctdnet_core::Error::NonFinite { index, .. } => {
                anyhow!(NumericFailure(format!("non-finite loss at step {index}")))
            }
            other => anyhow!(other),
        })?;
        let l = rec.loss;
        writeln!(log, "{} {:.9e} {:.9e} {:.9e}", rec.step, l.total, l.fc, l.conv).unwrap();
        first.get_or_insert(l.total);
        last = Some(l.total);
        if cfg.eval_interval > 0 && (rec.step + 1) % cfg.eval_interval == 0 {
            let (_, r) = evaluate_scenes(&trainer.detector, &scenes, &cfg.eval).map_err(|e| anyhow!(e))?;
            writeln!(eval_log, "step {} mAP {:.6} AP_S {}", rec.step + 1, r.map, opt(r.ap_small)).unwrap();
        }
    }
    let log_path = cfg.output_dir.join(TRAIN_LOG);
    if start == 0 {
        write(&log_path, &log)?;
    } else {
        let mut prev = fs::read_to_string(&log_path).unwrap_or_default();
        prev.push_str(&log);
        write(&log_path, prev)?;
    }
    if !eval_log.is_empty() {
        write(&cfg.output_dir.join(EVAL_LOG), eval_log)?;
    }
    let ck_path = cfg.output_dir.join(CHECKPOINT_FILE);
    Checkpoint::from_training(&trainer.detector.params, &trainer.optim, trainer.step).save(&ck_path)?;
    Ok(TrainSummary {
        steps: cfg.train.steps,
        first_total: first,
        last_total: last,
        checkpoint: ck_path,
        log: log_path,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.6}"))
}

pub fn format_report(r: &EvalReport) -> String {
    let mut s = String::new();
    writeln!(s, "mAP {:.6}", r.map).unwrap();
    writeln!(s, "AP_S {}", opt(r.ap_small)).unwrap();
    writeln!(s, "AP_M {}", opt(r.ap_medium)).unwrap();
    writeln!(s, "AP_L {}", opt(r.ap_large)).unwrap();
    for (c, ap) in &r.per_class {
        writeln!(s, "class {c} AP {ap:.6}").unwrap();
    }
    s
}

/// Detects on every configured scene with the checkpointed model and
/// writes the detections and the metric report.
pub fn evaluate_checkpoint(cfg: &RunConfig, checkpoint: &Path) -> Result<EvalReport> {
    create_dir(&cfg.output_dir)?;
    let det = load_detector(cfg, checkpoint)?;
    let scenes = scenes(cfg)?;
    let (dets, report) = evaluate_scenes(&det, &scenes, &cfg.eval).map_err(|e| anyhow!(e))?;
    write(&cfg.output_dir.join(DETECTIONS_FILE), format_detections(&dets))?;
    write(&cfg.output_dir.join(REPORT_FILE), format_report(&report))?;
    Ok(report)
}

/// Evaluates a detection file against a ground-truth file.
pub fn evaluate_files(gt: &Path, dets: &Path) -> Result<EvalReport> {
    let read = |p: &Path| fs::read_to_string(p).with_context(|| format!("reading {}", p.display()));
    let gts = parse_ground_truth(&read(gt)?).with_context(|| format!("in {}", gt.display()))?;
    let dets = parse_detections(&read(dets)?).with_context(|| format!("in {}", dets.display()))?;
    evaluate(&dets, &gts).map_err(|e| anyhow!(e))
}

/// Writes `heatmap_sceneNNNN_levelL.pgm` for `level`, or for every level.
pub fn dump_heatmap(cfg: &RunConfig, checkpoint: &Path, scene: usize, level: Option<usize>) -> Result<Vec<PathBuf>> {
    let stages = cfg.detector.cfp.stages;
    if let Some(l) = level {
        ensure!(l < stages, "level {l} out of range (pyramid has {stages} levels)");
    }
    let det = load_detector(cfg, checkpoint)?;
    let s = generate_synthetic_scene(&cfg.scene, scene).map_err(|e| anyhow!(e))?;
    let levels = det.pyramid_levels(&s.image).map_err(|e| anyhow!(e))?;
    let (h, w) = (cfg.scene.height, cfg.scene.width);
    create_dir(&cfg.output_dir)?;
    let chosen: Vec<usize> = level.map_or_else(|| (0..stages).collect(), |l| vec![l]);
    let mut out = Vec::with_capacity(chosen.len());
    for l in chosen {
        let px = heatmap(&levels[l], h, w).map_err(|e| anyhow!(e))?;
        let p = cfg.output_dir.join(format!("heatmap_scene{scene:04}_level{l}.pgm"));
        write(&p, encode_pgm(w, h, &px)?)?;
        out.push(p);
    }
    Ok(out)
}

pub fn format_case(r: &CaseReport) -> String {
    format!(
        "{} {:<22} max_rel_error {:.3e} over {} seeds (worst seed {})",
        if r.passed { "PASS" } else { "FAIL" },
        r.name,
        r.max_error,
        r.seeds,
        r.worst_seed
    )
}

/// Runs the finite-difference suite; any failing case is a numeric failure.
pub fn gradcheck(seeds: usize, mut each: impl FnMut(&CaseReport)) -> Result<Vec<CaseReport>> {
    let mut out = Vec::with_capacity(suite::CASES.len());
    for &(name, f) in suite::CASES {
        let r = suite::run_case(name, f, seeds).map_err(|e| anyhow!(e))?;
        each(&r);
        out.push(r);
    }
    let failed: Vec<&str> = out.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    if !failed.is_empty() {
        return Err(anyhow!(NumericFailure(format!(
            "gradient check failed for {}",
            failed.join(", ")
        ))));
    }
    Ok(out)
}
