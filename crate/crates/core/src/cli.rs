//! The `dadkit` command line: `synth`, `train`, `distill`, `detect`, `eval`
//! and `gradcheck`.
//!
//! Every knob lives in a flat `key=value` [`RunConfig`]. Values come from the
//! built-in defaults, then `--config FILE`, then `--set KEY=VALUE`, then the
//! dedicated flags. The effective configuration is written to `meta.txt` in
//! the output directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::distill::{distill_train, DistillConfig};
use crate::error::{Error, Result};
use crate::eval::{auc, corner_epe, ransac_homography, repeatability, Correspondence};
use crate::geometry::match_mutual_nn;
use crate::grid::Grid;
use crate::model::{init_params, run_gradcheck, train_loop, ArchConfig, DetectorParams, GradCheckConfig, Matching, TrainConfig};
use crate::objective::{RegConfig, RewardConfig};
use crate::prob::write_dadf;
use crate::sampler::{sample_keypoints, KeypointSet, SampleMode, SamplerConfig};
use crate::synth::{
    generate_pair, list_pairs, pair_dir_name, pair_seed, read_pair, read_pgm, write_pair, write_pgm, HomographyMagnitude,
    PairSample, PairTransfer, SceneConfig, Shape, SynthMode,
};

/// Recognized configuration keys with their meaning.
pub const CONFIG_KEYS: &[(&str, &str)] = &[
    ("seed", "master seed for data, initialization and RANSAC"),
    ("threads", "worker threads"),
    ("mode", "synthetic data: toy or scenes"),
    ("num_pairs", "pairs written by synth"),
    ("width", "image width"),
    ("height", "image height"),
    ("num_light", "light structures per image"),
    ("num_dark", "dark structures per image"),
    ("shapes", "comma-separated palette of dot, cross, blob, corner"),
    ("background_gray", "background intensity"),
    ("rotation_aug", "off, random or 0-3 quarter turns"),
    ("negation_aug", "off or rgb"),
    ("perspective_jitter", "homography corner jitter"),
    ("max_translation", "homography translation"),
    ("scale_min", "homography minimum scale"),
    ("scale_max", "homography maximum scale"),
    ("max_rotation", "homography rotation in radians"),
    ("noise_sigma", "pixel noise"),
    ("min_separation", "minimum distance between structures"),
    ("margin", "border margin of structure centers"),
    ("transfer_radius", "toy label transfer radius"),
    ("channel_widths", "comma-separated hidden widths"),
    ("kernel_size", "odd convolution kernel size"),
    ("k", "keypoint budget"),
    ("nms_window", "NMS window"),
    ("kde_sigma_frac", "density sigma as a fraction of the short side"),
    ("use_kde", "density balancing on or off"),
    ("subpixel", "subpixel refinement at inference"),
    ("subpixel_temp", "subpixel softmax temperature"),
    ("subpixel_window", "subpixel window"),
    ("sample_mode", "inference or train"),
    ("tau_r", "reward distance threshold"),
    ("reward_eps", "reward normalization floor"),
    ("linear_reward", "linearly decaying reward"),
    ("reg_sigma", "regularizer blur sigma"),
    ("reg_weight", "regularizer weight"),
    ("steps", "training pairs or distillation images"),
    ("batch_size", "samples per update"),
    ("matching", "nearest or mutual"),
    ("match_threshold", "mutual matching threshold"),
    ("lr", "learning rate"),
    ("beta1", "first moment decay"),
    ("beta2", "second moment decay"),
    ("eps_opt", "optimizer epsilon"),
    ("weight_decay", "decoupled weight decay"),
    ("merge_order", "distillation merge: 1, 2 or inf"),
    ("repeat_threshold", "repeatability distance"),
    ("eval_match_threshold", "ground-truth correspondence distance for homography estimation"),
    ("ransac_threshold", "RANSAC inlier threshold"),
    ("ransac_iters", "RANSAC iterations"),
    ("auc_threshold", "corner error AUC threshold"),
    ("instances", "gradcheck instances"),
    ("grad_step", "gradcheck finite-difference step"),
    ("grad_floor", "gradcheck absolute agreement floor"),
    ("grad_tol", "gradcheck relative error tolerance"),
];

/// Explicitly set configuration values. Missing keys take defaults that may
/// depend on `mode`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

fn known(key: &str) -> bool {
    CONFIG_KEYS.iter().any(|(k, _)| *k == key)
}

fn list<T: FromStr>(key: &str, text: &str) -> Result<Vec<T>> {
    if text.trim().is_empty() {
        return Ok(vec![]);
    }
    text.split(',')
        .map(|t| t.trim().parse().map_err(|_| bad_value(key, t)))
        .collect()
}

fn bad_value(key: &str, value: &str) -> Error {
    Error::Config(format!("`{key}`: cannot parse `{value}`"))
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Tags a module validation error with the config key it came from.
fn check(key: &str, r: Result<()>) -> Result<()> {
    r.map_err(|e| Error::Config(format!("`{key}`: {e}")))
}

impl RunConfig {
    /// Parses `key=value` lines; blank lines and `#` comments are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !known(key) {
            return Err(Error::Config(format!("unknown config key `{key}`")));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Applies a `KEY=VALUE` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected KEY=VALUE, got `{pair}`")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        debug_assert!(known(key), "{key}");
        self.values
            .get(key)
            .map(|v| v.parse().map_err(|_| bad_value(key, v)))
            .transpose()
    }

    fn or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    fn flag(&self, key: &str, default: bool) -> Result<bool> {
        match self.values.get(key).map(String::as_str) {
            None => Ok(default),
            Some("true" | "on" | "1") => Ok(true),
            Some("false" | "off" | "0") => Ok(false),
            Some(v) => Err(bad_value(key, v)),
        }
    }

    pub fn seed(&self) -> Result<u64> {
        self.or("seed", 0)
    }

    pub fn threads(&self) -> Result<usize> {
        let t = self.or("threads", 1)?;
        if t == 0 {
            return Err(Error::Config("`threads`: must be at least 1".into()));
        }
        Ok(t)
    }

    pub fn mode(&self) -> Result<SynthMode> {
        self.or("mode", SynthMode::Toy)
    }

    pub fn scene_config(&self) -> Result<SceneConfig> {
        let base = match self.mode()? {
            SynthMode::Toy => SceneConfig::toy(),
            SynthMode::Scenes => SceneConfig::scenes(),
        };
        let shapes = match self.values.get("shapes") {
            Some(v) => list::<Shape>("shapes", v)?,
            None => base.shape_palette.clone(),
        };
        let cfg = SceneConfig {
            width: self.or("width", base.width)?,
            height: self.or("height", base.height)?,
            num_light: self.or("num_light", base.num_light)?,
            num_dark: self.or("num_dark", base.num_dark)?,
            shape_palette: shapes,
            background_gray: self.or("background_gray", base.background_gray)?,
            rotation_aug: self.or("rotation_aug", base.rotation_aug)?,
            negation_aug: self.or("negation_aug", base.negation_aug)?,
            homography: HomographyMagnitude {
                perspective_jitter: self.or("perspective_jitter", base.homography.perspective_jitter)?,
                max_translation: self.or("max_translation", base.homography.max_translation)?,
                scale_range: (
                    self.or("scale_min", base.homography.scale_range.0)?,
                    self.or("scale_max", base.homography.scale_range.1)?,
                ),
                max_rotation: self.or("max_rotation", base.homography.max_rotation)?,
            },
            noise_sigma: self.or("noise_sigma", base.noise_sigma)?,
            min_separation: self.or("min_separation", base.min_separation)?,
            margin: self.or("margin", base.margin)?,
            transfer_radius: self.or("transfer_radius", base.transfer_radius)?,
        };
        check("scene", cfg.validate())?;
        Ok(cfg)
    }

    pub fn arch(&self) -> Result<ArchConfig> {
        let d = ArchConfig::default();
        let widths = match self.values.get("channel_widths") {
            Some(v) => list("channel_widths", v)?,
            None => d.channel_widths,
        };
        let arch = ArchConfig::new(widths, self.or("kernel_size", d.kernel_size)?, self.seed()?);
        check("channel_widths/kernel_size", arch.validate())?;
        Ok(arch)
    }

    pub fn sampler(&self) -> Result<SamplerConfig> {
        let d = SamplerConfig::default();
        let default_k = match self.mode()? {
            SynthMode::Toy => 10,
            SynthMode::Scenes => d.k,
        };
        let cfg = SamplerConfig {
            k: self.or("k", default_k)?,
            nms_window: self.or("nms_window", d.nms_window)?,
            kde_sigma_frac: self.or("kde_sigma_frac", d.kde_sigma_frac)?,
            use_kde: self.flag("use_kde", d.use_kde)?,
            subpixel: self.flag("subpixel", d.subpixel)?,
            subpixel_temp: self.or("subpixel_temp", d.subpixel_temp)?,
            subpixel_window: self.or("subpixel_window", d.subpixel_window)?,
        };
        check("sampler", cfg.validate())?;
        Ok(cfg)
    }

    pub fn sample_mode(&self) -> Result<SampleMode> {
        self.or("sample_mode", SampleMode::Inference)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let d = TrainConfig::default();
        let scene = self.scene_config()?;
        let tau_default = RewardConfig::for_height(scene.height).tau_r.max(1.0);
        let matching = match self.values.get("matching").map(String::as_str) {
            None | Some("nearest") => Matching::Nearest,
            Some("mutual") => Matching::MutualNn {
                threshold: self.or("match_threshold", tau_default)?,
            },
            Some(v) => return Err(bad_value("matching", v)),
        };
        let cfg = TrainConfig {
            steps: self.or("steps", d.steps)?,
            batch_size: self.or("batch_size", d.batch_size)?,
            sampler: self.sampler()?,
            reward: RewardConfig {
                tau_r: self.or("tau_r", tau_default)?,
                eps: self.or("reward_eps", d.reward.eps)?,
                linear: self.flag("linear_reward", d.reward.linear)?,
            },
            reg: RegConfig {
                sigma: self.or("reg_sigma", d.reg.sigma)?,
                weight: self.or("reg_weight", d.reg.weight)?,
            },
            matching,
            lr: self.or("lr", d.lr)?,
            beta1: self.or("beta1", d.beta1)?,
            beta2: self.or("beta2", d.beta2)?,
            eps_opt: self.or("eps_opt", d.eps_opt)?,
            weight_decay: self.or("weight_decay", d.weight_decay)?,
            threads: self.threads()?,
        };
        check("train", cfg.validate())?;
        Ok(cfg)
    }

    pub fn distill_config(&self) -> Result<DistillConfig> {
        let d = DistillConfig::default();
        let cfg = DistillConfig {
            steps: self.or("steps", d.steps)?,
            batch_size: self.or("batch_size", d.batch_size)?,
            order: self.or("merge_order", d.order)?,
            lr: self.or("lr", d.lr)?,
            beta1: self.or("beta1", d.beta1)?,
            beta2: self.or("beta2", d.beta2)?,
            eps_opt: self.or("eps_opt", d.eps_opt)?,
            weight_decay: self.or("weight_decay", d.weight_decay)?,
            threads: self.threads()?,
        };
        if cfg.batch_size == 0 {
            return Err(Error::Config("`batch_size`: must be at least 1".into()));
        }
        Ok(cfg)
    }

    pub fn eval_config(&self) -> Result<EvalConfig> {
        let cfg = EvalConfig {
            repeat_threshold: self.or("repeat_threshold", 2.0)?,
            match_threshold: self.or("eval_match_threshold", 2.0)?,
            ransac_threshold: self.or("ransac_threshold", 1.0)?,
            ransac_iters: self.or("ransac_iters", 500)?,
            auc_threshold: self.or("auc_threshold", 3.0)?,
        };
        for (key, v) in [
            ("repeat_threshold", cfg.repeat_threshold),
            ("eval_match_threshold", cfg.match_threshold),
            ("ransac_threshold", cfg.ransac_threshold),
            ("auc_threshold", cfg.auc_threshold),
        ] {
            if !(v > 0.0) {
                return Err(Error::Config(format!("`{key}`: must be positive")));
            }
        }
        Ok(cfg)
    }

    pub fn gradcheck_config(&self) -> Result<(GradCheckConfig, f64)> {
        let d = GradCheckConfig::default();
        let cfg = GradCheckConfig {
            instances: self.or("instances", d.instances)?,
            seed: self.seed()?,
            step: self.or("grad_step", d.step)?,
            floor: self.or("grad_floor", d.floor)?,
        };
        Ok((cfg, self.or("grad_tol", 1e-3)?))
    }

    /// Every key with its effective value, in [`CONFIG_KEYS`] order.
    pub fn effective(&self) -> Result<Vec<(String, String)>> {
        let scene = self.scene_config()?;
        let arch = self.arch()?;
        let train = self.train_config()?;
        let distill = self.distill_config()?;
        let eval = self.eval_config()?;
        let (gc, tol) = self.gradcheck_config()?;
        let s = &train.sampler;
        let (matching, match_threshold) = match train.matching {
            Matching::Nearest => ("nearest", self.values.get("match_threshold").cloned().unwrap_or_default()),
            Matching::MutualNn { threshold } => ("mutual", threshold.to_string()),
        };
        let shapes: Vec<String> = scene.shape_palette.iter().map(|s| s.to_string()).collect();
        let v: Vec<(&str, String)> = vec![
            ("seed", self.seed()?.to_string()),
            ("threads", self.threads()?.to_string()),
            ("mode", self.mode()?.to_string()),
            ("num_pairs", self.or("num_pairs", 100usize)?.to_string()),
            ("width", scene.width.to_string()),
            ("height", scene.height.to_string()),
            ("num_light", scene.num_light.to_string()),
            ("num_dark", scene.num_dark.to_string()),
            ("shapes", shapes.join(",")),
            ("background_gray", scene.background_gray.to_string()),
            ("rotation_aug", scene.rotation_aug.to_string()),
            ("negation_aug", scene.negation_aug.to_string()),
            ("perspective_jitter", scene.homography.perspective_jitter.to_string()),
            ("max_translation", scene.homography.max_translation.to_string()),
            ("scale_min", scene.homography.scale_range.0.to_string()),
            ("scale_max", scene.homography.scale_range.1.to_string()),
            ("max_rotation", scene.homography.max_rotation.to_string()),
            ("noise_sigma", scene.noise_sigma.to_string()),
            ("min_separation", scene.min_separation.to_string()),
            ("margin", scene.margin.to_string()),
            ("transfer_radius", scene.transfer_radius.to_string()),
            ("channel_widths", join(&arch.channel_widths)),
            ("kernel_size", arch.kernel_size.to_string()),
            ("k", s.k.to_string()),
            ("nms_window", s.nms_window.to_string()),
            ("kde_sigma_frac", s.kde_sigma_frac.to_string()),
            ("use_kde", s.use_kde.to_string()),
            ("subpixel", s.subpixel.to_string()),
            ("subpixel_temp", s.subpixel_temp.to_string()),
            ("subpixel_window", s.subpixel_window.to_string()),
            ("sample_mode", sample_mode_name(self.sample_mode()?).to_string()),
            ("tau_r", train.reward.tau_r.to_string()),
            ("reward_eps", train.reward.eps.to_string()),
            ("linear_reward", train.reward.linear.to_string()),
            ("reg_sigma", train.reg.sigma.to_string()),
            ("reg_weight", train.reg.weight.to_string()),
            ("steps", train.steps.to_string()),
            ("batch_size", train.batch_size.to_string()),
            ("matching", matching.to_string()),
            ("match_threshold", match_threshold),
            ("lr", train.lr.to_string()),
            ("beta1", train.beta1.to_string()),
            ("beta2", train.beta2.to_string()),
            ("eps_opt", train.eps_opt.to_string()),
            ("weight_decay", train.weight_decay.to_string()),
            ("merge_order", distill.order.to_string()),
            ("repeat_threshold", eval.repeat_threshold.to_string()),
            ("eval_match_threshold", eval.match_threshold.to_string()),
            ("ransac_threshold", eval.ransac_threshold.to_string()),
            ("ransac_iters", eval.ransac_iters.to_string()),
            ("auc_threshold", eval.auc_threshold.to_string()),
            ("instances", gc.instances.to_string()),
            ("grad_step", gc.step.to_string()),
            ("grad_floor", gc.floor.to_string()),
            ("grad_tol", tol.to_string()),
        ];
        debug_assert_eq!(v.len(), CONFIG_KEYS.len());
        Ok(v.into_iter().map(|(k, v)| (k.to_string(), v)).collect())
    }
}

fn sample_mode_name(m: SampleMode) -> &'static str {
    match m {
        SampleMode::Inference => "inference",
        SampleMode::Train => "train",
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub repeat_threshold: f64,
    /// Correspondences for homography estimation are mutual nearest
    /// neighbours under the ground-truth transfer within this distance.
    pub match_threshold: f64,
    pub ransac_threshold: f64,
    pub ransac_iters: usize,
    pub auc_threshold: f64,
}

#[derive(Parser, Debug)]
#[command(name = "dadkit", version, about = "Train, distill, run and evaluate descriptor-free keypoint detectors")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// `key=value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub threads: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Override a config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic pair dataset.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        num_pairs: Option<usize>,
        #[arg(long)]
        negation_aug: Option<String>,
    },
    /// Train a detector with the policy-gradient objective.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        mode: Option<String>,
        /// Dataset directory; pairs are generated on the fly when absent.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Distill a light and a dark detector into one student.
    Distill {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        light: PathBuf,
        /// Dark teacher; defaults to the light teacher applied to the negated image.
        #[arg(long)]
        dark: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Detect keypoints in a dataset or a single PGM image.
    Detect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long, conflicts_with = "image")]
        data: Option<PathBuf>,
        #[arg(long)]
        image: Option<PathBuf>,
        /// `inference` or `train`.
        #[arg(long = "mode")]
        sample_mode: Option<String>,
        #[arg(long)]
        topk: Option<usize>,
        /// Also write the raw scoremap as DADF.
        #[arg(long)]
        dump_scores: bool,
        /// Also write a PGM with keypoints drawn in.
        #[arg(long)]
        overlay: bool,
    },
    /// Score keypoints against the ground truth of a dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Directory written by `detect`, or `gt` for the ground-truth keypoints.
        #[arg(long)]
        keypoints: String,
    },
    /// Compare analytic and finite-difference gradients on random instances.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        instances: Option<usize>,
    },
}

fn build_config(common: &Common, extra: &[(&str, Option<String>)]) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for s in &common.set {
        cfg.set_pair(s)?;
    }
    if let Some(s) = common.seed {
        cfg.set("seed", &s.to_string())?;
    }
    if let Some(t) = common.threads {
        cfg.set("threads", &t.to_string())?;
    }
    for (k, v) in extra {
        if let Some(v) = v {
            cfg.set(k, v)?;
        }
    }
    Ok(cfg)
}

fn out_dir(common: &Common) -> Result<&Path> {
    let out = common
        .out
        .as_deref()
        .ok_or_else(|| Error::Config("`--out` is required".into()))?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    Ok(out)
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_meta(dir: &Path, command: &str, cfg: &RunConfig, extra: &[(&str, String)]) -> Result<()> {
    let mut text = format!("command={command}\n");
    for (k, v) in extra {
        writeln!(text, "{k}={v}").unwrap();
    }
    for (k, v) in cfg.effective()? {
        writeln!(text, "{k}={v}").unwrap();
    }
    write_file(&dir.join("meta.txt"), text)
}

fn pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Internal(e.to_string()))
}

/// Source of training pairs: a dataset directory cycled in order, or the
/// on-the-fly generator.
fn pair_source(cfg: &RunConfig, data: Option<&Path>) -> Result<Box<dyn FnMut(usize) -> Result<PairSample<f64>>>> {
    match data {
        Some(dir) => {
            let pairs = list_pairs(dir)?;
            if pairs.is_empty() {
                return Err(Error::InvalidInput(format!("no pairs in {}", dir.display())));
            }
            Ok(Box::new(move |i| read_pair(&pairs[i % pairs.len()])))
        }
        None => {
            let (mode, scene, seed) = (cfg.mode()?, cfg.scene_config()?, cfg.seed()?);
            Ok(Box::new(move |i| generate_pair(mode, &scene, seed, i as u64)))
        }
    }
}

fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<String> {
    let (mode, scene, seed) = (cfg.mode()?, cfg.scene_config()?, cfg.seed()?);
    let n: usize = cfg.or("num_pairs", 100)?;
    pool(cfg.threads()?)?.install(|| {
        (0..n).into_par_iter().try_for_each(|i| {
            let sample: PairSample<f64> = generate_pair(mode, &scene, seed, i as u64)?;
            write_pair(
                out.join(pair_dir_name(i)),
                &sample,
                &[("mode".into(), mode.to_string()), ("index".into(), i.to_string())],
            )
        })
    })?;
    write_meta(out, "synth", cfg, &[])?;
    Ok(format!("wrote {n} {mode} pairs to {}", out.display()))
}

fn cmd_train(cfg: &RunConfig, data: Option<&Path>, out: &Path) -> Result<String> {
    let train = cfg.train_config()?;
    let init: DetectorParams<f64> = init_params(&cfg.arch()?)?;
    let mut source = pair_source(cfg, data)?;
    let log = train_loop(init, &mut *source, &train)?;
    log.params.save(out.join("weights.dadw"))?;
    write_file(&out.join("loss.csv"), log.to_csv())?;
    write_meta(out, "train", cfg, &[])?;
    Ok(format!(
        "trained {} pairs, mean pair reward over the last 100: {:.3}",
        log.reports.len(),
        log.recent_pair_reward(100)
    ))
}

fn cmd_distill(cfg: &RunConfig, light: &Path, dark: Option<&Path>, data: Option<&Path>, out: &Path) -> Result<String> {
    let dcfg = cfg.distill_config()?;
    let light: DetectorParams<f64> = DetectorParams::load(light)?;
    let dark = match dark {
        Some(p) => DetectorParams::load(p)?,
        None => light.negate_input(),
    };
    let student = init_params(&cfg.arch()?)?;
    let mut source = pair_source(cfg, data)?;
    let mut images = |i: usize| -> Result<Grid<f64>> {
        let s = source(i / 2)?;
        Ok(if i % 2 == 0 { s.image_a } else { s.image_b })
    };
    let (params, losses) = distill_train(&light, &dark, student, &mut images, &dcfg)?;
    params.save(out.join("student.dadw"))?;
    let mut csv = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        writeln!(csv, "{i},{l:.9e}").unwrap();
    }
    write_file(&out.join("distill_loss.csv"), csv)?;
    write_meta(out, "distill", cfg, &[])?;
    let tail = &losses[losses.len().saturating_sub(100)..];
    let mean = if tail.is_empty() { f64::NAN } else { tail.iter().sum::<f64>() / tail.len() as f64 };
    Ok(format!("distilled on {} images, mean loss over the last 100: {mean:.4}", losses.len()))
}

/// The image with each keypoint's pixel and 4-neighbours set to white.
pub fn keypoint_overlay(image: &Grid<f64>, kps: &KeypointSet<f64>) -> Grid<f64> {
    let mut out = image.clone();
    let (h, w) = image.shape();
    for k in kps.iter() {
        let (x, y) = k.pixel();
        for (dx, dy) in [(0i64, 0i64), (1, 0), (-1, 0), (0, 1), (0, -1)] {
            let (px, py) = (x as i64 + dx, y as i64 + dy);
            if px >= 0 && py >= 0 && (px as usize) < w && (py as usize) < h {
                out.set(px as usize, py as usize, 1.0);
            }
        }
    }
    out
}

struct DetectOptions {
    sampler: SamplerConfig,
    mode: SampleMode,
    dump_scores: bool,
    overlay: bool,
}

fn detect_one(params: &DetectorParams<f64>, image: &Grid<f64>, opts: &DetectOptions, dir: &Path, tag: &str) -> Result<usize> {
    let scores = crate::model::predict(params, image)?;
    let kps = sample_keypoints(scores.logits(), &opts.sampler, opts.mode)?;
    kps.write_csv(dir.join(format!("kps_{tag}.csv")))?;
    if opts.dump_scores {
        write_dadf(dir.join(format!("scores_{tag}.dadf")), scores.logits())?;
    }
    if opts.overlay {
        write_pgm(dir.join(format!("overlay_{tag}.pgm")), &keypoint_overlay(image, &kps))?;
    }
    Ok(kps.len())
}

fn cmd_detect(cfg: &RunConfig, weights: &Path, data: Option<&Path>, image: Option<&Path>, out: &Path, opts: DetectOptions) -> Result<String> {
    let params: DetectorParams<f64> = DetectorParams::load(weights)?;
    let summary = match (data, image) {
        (_, Some(img)) => {
            let image: Grid<f64> = read_pgm(img)?;
            let n = detect_one(&params, &image, &opts, out, "image")?;
            format!("{n} keypoints")
        }
        (Some(dir), None) => {
            let pairs = list_pairs(dir)?;
            let counts = pool(cfg.threads()?)?.install(|| {
                pairs
                    .par_iter()
                    .map(|p| {
                        let sample = read_pair(p)?;
                        let sub = out.join(p.file_name().unwrap_or_default());
                        std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
                        Ok(detect_one(&params, &sample.image_a, &opts, &sub, "a")?
                            + detect_one(&params, &sample.image_b, &opts, &sub, "b")?)
                    })
                    .collect::<Result<Vec<usize>>>()
            })?;
            format!("{} keypoints over {} pairs", counts.iter().sum::<usize>(), pairs.len())
        }
        (None, None) => return Err(Error::Config("detect needs `--data` or `--image`".into())),
    };
    write_meta(out, "detect", cfg, &[])?;
    Ok(summary)
}

/// Per-pair evaluation result.
#[derive(Clone, Debug, PartialEq)]
pub struct PairMetrics {
    pub name: String,
    pub repeatability: f64,
    pub covisible: usize,
    pub matched: usize,
    pub correspondences: usize,
    pub inliers: usize,
    /// `NaN` for pairs without a homography.
    pub corner_epe: f64,
}

/// Repeatability, and for homography pairs the corner error of a RANSAC fit
/// to the ground-truth-matched keypoints.
pub fn evaluate_keypoints(
    sample: &PairSample<f64>,
    ka: &KeypointSet<f64>,
    kb: &KeypointSet<f64>,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<(f64, usize, usize, usize, usize, f64)> {
    let rep = repeatability(ka, kb, &sample.transfer, cfg.repeat_threshold)?;
    let PairTransfer::Homography(h) = &sample.transfer else {
        return Ok((rep.value, rep.covisible, rep.matched, 0, 0, f64::NAN));
    };
    let (ab, _) = match_mutual_nn(ka, kb, h, cfg.match_threshold)?;
    let corr: Vec<Correspondence> = ab
        .pairs
        .iter()
        .map(|m| {
            let (a, b) = (&ka.keypoints[m.a], &kb.keypoints[m.b]);
            ((a.x, a.y), (b.x, b.y))
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (inliers, epe) = match ransac_homography(&corr, cfg.ransac_threshold, cfg.ransac_iters, &mut rng) {
        Ok((est, flags)) => (flags.iter().filter(|&&f| f).count(), corner_epe(&est, h, sample.image_a.shape())),
        Err(Error::InsufficientData(_) | Error::DegenerateInput(_)) => (0, f64::INFINITY),
        Err(e) => return Err(e),
    };
    Ok((rep.value, rep.covisible, rep.matched, corr.len(), inliers, epe))
}

fn cmd_eval(cfg: &RunConfig, data: &Path, keypoints: &str, out: &Path) -> Result<String> {
    let ecfg = cfg.eval_config()?;
    let seed = cfg.seed()?;
    let pairs = list_pairs(data)?;
    let metrics = pool(cfg.threads()?)?.install(|| {
        pairs
            .par_iter()
            .enumerate()
            .map(|(i, p)| {
                let sample = read_pair(p)?;
                let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
                let (ka, kb) = if keypoints == "gt" {
                    (sample.gt_a.to_keypoint_set(), sample.gt_b.to_keypoint_set())
                } else {
                    let dir = Path::new(keypoints).join(&name);
                    (
                        KeypointSet::read_csv(dir.join("kps_a.csv"), sample.image_a.shape())?,
                        KeypointSet::read_csv(dir.join("kps_b.csv"), sample.image_b.shape())?,
                    )
                };
                let (repeatability, covisible, matched, correspondences, inliers, corner_epe) =
                    evaluate_keypoints(&sample, &ka, &kb, &ecfg, pair_seed(seed, i as u64))?;
                Ok(PairMetrics { name, repeatability, covisible, matched, correspondences, inliers, corner_epe })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let mut csv = String::from("pair,repeatability,covisible,matched,correspondences,inliers,corner_epe\n");
    for m in &metrics {
        writeln!(
            csv,
            "{},{:.6},{},{},{},{},{:.6}",
            m.name, m.repeatability, m.covisible, m.matched, m.correspondences, m.inliers, m.corner_epe
        )
        .unwrap();
    }
    write_file(&out.join("per_pair.csv"), csv)?;
    let reps: Vec<f64> = metrics.iter().map(|m| m.repeatability).filter(|r| r.is_finite()).collect();
    let mean_rep = if reps.is_empty() { f64::NAN } else { reps.iter().sum::<f64>() / reps.len() as f64 };
    let epes: Vec<f64> = metrics.iter().map(|m| m.corner_epe).filter(|e| !e.is_nan()).collect();
    let auc_value = if epes.is_empty() { f64::NAN } else { auc(&epes, ecfg.auc_threshold)? };
    let mut report = String::new();
    writeln!(report, "pairs={}", metrics.len()).unwrap();
    writeln!(report, "repeatability_pairs={}", reps.len()).unwrap();
    writeln!(report, "repeatability={mean_rep:.6}").unwrap();
    writeln!(report, "homography_pairs={}", epes.len()).unwrap();
    writeln!(report, "corner_epe_auc={auc_value:.6}").unwrap();
    writeln!(report, "auc_threshold={}", ecfg.auc_threshold).unwrap();
    write_file(&out.join("metrics.txt"), &report)?;
    let source = if keypoints == "gt" { "gt" } else { "detections" };
    write_meta(out, "eval", cfg, &[("keypoints", source.to_string())])?;
    Ok(report.trim_end().to_string())
}

fn cmd_gradcheck(cfg: &RunConfig, out: Option<&Path>) -> Result<String> {
    let (gc, tol) = cfg.gradcheck_config()?;
    let report = run_gradcheck(&gc)?;
    let mut text = String::new();
    for (kind, e) in &report.per_loss {
        writeln!(text, "max_rel_error_{kind}={e:.3e}").unwrap();
    }
    writeln!(text, "max_rel_error={:.3e}", report.max_rel_error()).unwrap();
    writeln!(text, "max_abs_diff={:.3e}", report.max_abs_diff).unwrap();
    writeln!(text, "parameters_checked={}", report.parameters_checked).unwrap();
    writeln!(text, "skipped_at_kinks={}", report.skipped_at_kinks).unwrap();
    if let Some(out) = out {
        write_file(&out.join("gradcheck.txt"), &text)?;
        write_meta(out, "gradcheck", cfg, &[])?;
    }
    if !(report.max_rel_error() < tol) {
        print!("{text}");
        return Err(Error::Numeric(format!(
            "max relative gradient error {:.3e} exceeds {tol:e}",
            report.max_rel_error()
        )));
    }
    Ok(text.trim_end().to_string())
}

/// Runs one command and returns its summary.
pub fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Synth { common, mode, num_pairs, negation_aug } => {
            let cfg = build_config(
                &common,
                &[("mode", mode), ("num_pairs", num_pairs.map(|n| n.to_string())), ("negation_aug", negation_aug)],
            )?;
            cfg.effective()?;
            cmd_synth(&cfg, out_dir(&common)?)
        }
        Command::Train { common, mode, data } => {
            let cfg = build_config(&common, &[("mode", mode)])?;
            cfg.effective()?;
            cmd_train(&cfg, data.as_deref(), out_dir(&common)?)
        }
        Command::Distill { common, mode, light, dark, data } => {
            let cfg = build_config(&common, &[("mode", mode)])?;
            cfg.effective()?;
            cmd_distill(&cfg, &light, dark.as_deref(), data.as_deref(), out_dir(&common)?)
        }
        Command::Detect { common, weights, data, image, sample_mode, topk, dump_scores, overlay } => {
            let cfg = build_config(&common, &[("sample_mode", sample_mode), ("k", topk.map(|k| k.to_string()))])?;
            cfg.effective()?;
            let opts = DetectOptions { sampler: cfg.sampler()?, mode: cfg.sample_mode()?, dump_scores, overlay };
            cmd_detect(&cfg, &weights, data.as_deref(), image.as_deref(), out_dir(&common)?, opts)
        }
        Command::Eval { common, data, keypoints } => {
            let cfg = build_config(&common, &[])?;
            cfg.effective()?;
            cmd_eval(&cfg, &data, &keypoints, out_dir(&common)?)
        }
        Command::Gradcheck { common, instances } => {
            let cfg = build_config(&common, &[("instances", instances.map(|n| n.to_string()))])?;
            cfg.effective()?;
            let out = match &common.out {
                Some(_) => Some(out_dir(&common)?),
                None => None,
            };
            cmd_gradcheck(&cfg, out)
        }
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_parses_and_rejects_unknown_keys() {
        let cfg = RunConfig::parse("# comment\nseed = 7\nmode=scenes\n\nk=20 # trailing\n").unwrap();
        assert_eq!(cfg.seed().unwrap(), 7);
        assert_eq!(cfg.mode().unwrap(), SynthMode::Scenes);
        assert_eq!(cfg.sampler().unwrap().k, 20);
        let err = RunConfig::parse("sede=7").unwrap_err();
        assert!(err.to_string().contains("sede"), "{err}");
        assert_eq!(err.exit_code(), 1);
        assert!(RunConfig::parse("seed").is_err());
    }

    #[test]
    fn bad_values_name_their_key() {
        let cfg = RunConfig::parse("lr=fast").unwrap();
        let err = cfg.train_config().unwrap_err();
        assert!(err.to_string().contains("`lr`"), "{err}");
        let cfg = RunConfig::parse("nms_window=4").unwrap();
        assert!(cfg.sampler().unwrap_err().to_string().contains("nms_window"));
        let cfg = RunConfig::parse("threads=0").unwrap();
        assert!(cfg.threads().unwrap_err().to_string().contains("threads"));
    }

    #[test]
    fn mode_dependent_defaults() {
        let toy = RunConfig::default();
        assert_eq!(toy.scene_config().unwrap(), SceneConfig::toy());
        assert_eq!(toy.sampler().unwrap().k, 10);
        assert_eq!(toy.train_config().unwrap().reward.tau_r, 1.0);
        let scenes = RunConfig::parse("mode=scenes").unwrap();
        assert_eq!(scenes.scene_config().unwrap(), SceneConfig::scenes());
        assert_eq!(scenes.sampler().unwrap().k, 512);
    }

    #[test]
    fn effective_config_covers_every_key_and_round_trips() {
        let cfg = RunConfig::parse("mode=scenes\nshapes=dot,blob\nmatching=mutual\nmerge_order=2").unwrap();
        let eff = cfg.effective().unwrap();
        let keys: Vec<&str> = eff.iter().map(|(k, _)| k.as_str()).collect();
        let expected: Vec<&str> = CONFIG_KEYS.iter().map(|(k, _)| *k).collect();
        assert_eq!(keys, expected);
        let text: String = eff
            .iter()
            .filter(|(_, v)| !v.is_empty())
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(back.effective().unwrap(), eff);
    }

    #[test]
    fn flags_override_file_and_set() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "seed=1\nk=5\n").unwrap();
        let common = Common {
            config: Some(path),
            seed: Some(9),
            set: vec!["k=7".into()],
            ..Common::default()
        };
        let cfg = build_config(&common, &[("k", Some("8".into()))]).unwrap();
        assert_eq!(cfg.seed().unwrap(), 9);
        assert_eq!(cfg.sampler().unwrap().k, 8);
        let cfg = build_config(&common, &[("k", None)]).unwrap();
        assert_eq!(cfg.sampler().unwrap().k, 7);
    }

    #[test]
    fn overlay_marks_keypoints() {
        let img = Grid::filled(5, 5, 0.5);
        let kps = KeypointSet::new(vec![crate::sampler::Keypoint::new(0.0, 2.0, 1.0)], (5, 5));
        let o = keypoint_overlay(&img, &kps);
        assert_eq!(*o.get(0, 2), 1.0);
        assert_eq!(*o.get(1, 2), 1.0);
        assert_eq!(*o.get(0, 1), 1.0);
        assert_eq!(*o.get(2, 2), 0.5);
    }

    #[test]
    fn missing_out_is_a_validation_error() {
        let code = main_with_args(["dadkit", "synth", "--num-pairs", "1"]);
        assert_eq!(code, 1);
        let code = main_with_args(["dadkit", "synth", "--bogus"]);
        assert_eq!(code, 1);
    }
}
