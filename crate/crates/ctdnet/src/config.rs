//! Line-based `key = value` run configuration.

use std::path::PathBuf;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use ctdnet_core::dct::{format_frequency_list, parse_frequency_list};
use ctdnet_core::detector::{DetectorConfig, EvalConfig, TrainConfig};
use ctdnet_core::head::GroupNumber;
use ctdnet_core::scene::SceneConfig;

/// Everything a run needs. `seed` drives scenes, initialization and
/// proposal sampling.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub scene: SceneConfig,
    pub detector: DetectorConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub num_scenes: usize,
    /// Evaluate on the training scenes every this many steps; 0 disables.
    pub eval_interval: usize,
    pub output_dir: PathBuf,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scene: SceneConfig::default(),
            detector: DetectorConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            num_scenes: 8,
            eval_interval: 0,
            output_dir: PathBuf::from("out"),
            seed: 0,
        }
    }
}

pub const KEYS: &[&str] = &[
    "stages",
    "unrolls",
    "channels",
    "gc_ratio",
    "share_unroll_params",
    "standardize_input",
    "group_number",
    "loss_weight",
    "loss_weight_fc",
    "loss_weight_conv",
    "roi_size",
    "num_classes",
    "freq_indices",
    "pool_size",
    "head_channels",
    "fc_hidden",
    "width",
    "height",
    "logos_min",
    "logos_max",
    "side_min",
    "side_max",
    "cluster_spread",
    "noise_sigma",
    "num_scenes",
    "lr",
    "momentum",
    "weight_decay",
    "steps",
    "eval_interval",
    "negatives",
    "jitter",
    "eval_negatives",
    "output_dir",
    "seed",
];

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| anyhow!("invalid value {v:?} for `{key}`"))
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => bail!("invalid value {v:?} for `{key}` (expected true or false)"),
    }
}

impl RunConfig {
    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let cfp = &mut self.detector.cfp;
        let head = &mut self.detector.head;
        match key {
            "stages" => cfp.stages = num(key, v)?,
            "unrolls" => cfp.unrolls = num(key, v)?,
            "channels" => cfp.channels = num(key, v)?,
            "gc_ratio" => cfp.gc_ratio = num(key, v)?,
            "share_unroll_params" => cfp.share_unroll_params = boolean(key, v)?,
            "standardize_input" => self.detector.standardize_input = boolean(key, v)?,
            "group_number" => {
                head.group_number = v.parse::<GroupNumber>().map_err(|e| anyhow!("`{key}`: {e}"))?
            }
            "loss_weight" => {
                let w = num(key, v)?;
                head.weights.fc = w;
                head.weights.conv = w;
            }
            "loss_weight_fc" => head.weights.fc = num(key, v)?,
            "loss_weight_conv" => head.weights.conv = num(key, v)?,
            "roi_size" => head.roi_size = num(key, v)?,
            "num_classes" => head.num_classes = num(key, v)?,
            "freq_indices" => head.freqs = parse_frequency_list(v).map_err(|e| anyhow!("`{key}`: {e}"))?,
            "pool_size" => head.pool_size = num(key, v)?,
            "head_channels" => head.conv_channels = num(key, v)?,
            "fc_hidden" => head.fc_hidden = num(key, v)?,
            "width" => self.scene.width = num(key, v)?,
            "height" => self.scene.height = num(key, v)?,
            "logos_min" => self.scene.logos_min = num(key, v)?,
            "logos_max" => self.scene.logos_max = num(key, v)?,
            "side_min" => self.scene.side_min = num(key, v)?,
            "side_max" => self.scene.side_max = num(key, v)?,
            "cluster_spread" => self.scene.cluster_spread = num(key, v)?,
            "noise_sigma" => self.scene.noise_sigma = num(key, v)?,
            "num_scenes" => self.num_scenes = num(key, v)?,
            "lr" => self.train.sgd.lr = num(key, v)?,
            "momentum" => self.train.sgd.momentum = num(key, v)?,
            "weight_decay" => self.train.sgd.weight_decay = num(key, v)?,
            "steps" => self.train.steps = num(key, v)?,
            "eval_interval" => self.eval_interval = num(key, v)?,
            "negatives" => self.train.negatives = num(key, v)?,
            "jitter" => self.train.jitter = num(key, v)?,
            "eval_negatives" => self.eval.negatives = num(key, v)?,
            "output_dir" => self.output_dir = PathBuf::from(v),
            "seed" => self.seed = num(key, v)?,
            _ => bail!("unknown key `{key}`"),
        }
        Ok(())
    }

    /// Parses config text over the defaults. Later lines override earlier
    /// ones; `loss_weight` sets both loss weights.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected `key = value`", n + 1))?;
            cfg.set(k.trim(), v.trim())
                .with_context(|| format!("line {}", n + 1))?;
        }
        cfg.finish()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in config {}", path.display()))
    }

    /// Ties shared fields together and validates every section.
    pub fn finish(&mut self) -> Result<()> {
        self.detector.head.in_channels = self.detector.cfp.channels;
        self.scene.num_classes = self.detector.head.num_classes;
        self.scene.seed = self.seed;
        self.train.seed = self.seed;
        self.eval.seed = self.seed;
        self.detector.validate().map_err(|e| anyhow!(e))?;
        self.scene.validate().map_err(|e| anyhow!(e))?;
        self.train.sgd.validate().map_err(|e| anyhow!(e))?;
        self.detector
            .cfp
            .level_extents(self.scene.height, self.scene.width)
            .map_err(|e| anyhow!(e))?;
        if self.num_scenes == 0 {
            bail!("num_scenes must be positive");
        }
        if !(0.0..1.0).contains(&self.train.jitter) {
            bail!("jitter must lie in [0, 1)");
        }
        Ok(())
    }

    /// Canonical text form; parses back to the same config.
    pub fn render(&self) -> String {
        let d = &self.detector;
        let s = &self.scene;
        let t = &self.train;
        let lines = [
            format!("stages = {}", d.cfp.stages),
            format!("unrolls = {}", d.cfp.unrolls),
            format!("channels = {}", d.cfp.channels),
            format!("gc_ratio = {}", d.cfp.gc_ratio),
            format!("share_unroll_params = {}", d.cfp.share_unroll_params),
            format!("standardize_input = {}", d.standardize_input),
            format!("group_number = {}", d.head.group_number.as_str()),
            format!("loss_weight_fc = {}", d.head.weights.fc),
            format!("loss_weight_conv = {}", d.head.weights.conv),
            format!("roi_size = {}", d.head.roi_size),
            format!("num_classes = {}", d.head.num_classes),
            format!("freq_indices = {}", format_frequency_list(&d.head.freqs)),
            format!("pool_size = {}", d.head.pool_size),
            format!("head_channels = {}", d.head.conv_channels),
            format!("fc_hidden = {}", d.head.fc_hidden),
            format!("width = {}", s.width),
            format!("height = {}", s.height),
            format!("logos_min = {}", s.logos_min),
            format!("logos_max = {}", s.logos_max),
            format!("side_min = {}", s.side_min),
            format!("side_max = {}", s.side_max),
            format!("cluster_spread = {}", s.cluster_spread),
            format!("noise_sigma = {}", s.noise_sigma),
            format!("num_scenes = {}", self.num_scenes),
            format!("lr = {}", t.sgd.lr),
            format!("momentum = {}", t.sgd.momentum),
            format!("weight_decay = {}", t.sgd.weight_decay),
            format!("steps = {}", t.steps),
            format!("eval_interval = {}", self.eval_interval),
            format!("negatives = {}", t.negatives),
            format!("jitter = {}", t.jitter),
            format!("eval_negatives = {}", self.eval.negatives),
            format!("output_dir = {}", self.output_dir.display()),
            format!("seed = {}", self.seed),
        ];
        let mut out = lines.join("\n");
        out.push('\n');
        out
    }
}
