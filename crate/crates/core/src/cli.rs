//! Command-line front end.
//!
//! Every run-style subcommand resolves a flat `key = value` table from four
//! layers, lowest first: built-in defaults, the chosen preset, the config
//! file, then flags. The resolved table is echoed into `run.json`, which is
//! the only output that carries wall-clock times.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::attacks::{adversarial_accuracy, AttackSpec, Objective};
use crate::certificates::{
    first_order_certificate, second_order_certificate, summarize, CertMode, CertOptions, Certificate,
};
use crate::data::{
    holdout_split, load_csv, make_blobs, make_quadratic_boundary, shrink_to, write_idx, Dataset, Manifest,
};
use crate::error::{Error, Result};
use crate::models::{build_mlp, build_paper_cnn, margin_graph_pairs, score_batch, Scorer, ScoringModel};
use crate::opnorm::{estimate_opnorm_rows, hg_estimate_rows, OpNormProbe};
use crate::tensor::{Lp, Tensor};
use crate::trainer::{NoObserver, TrainConfig, TrainMode, Trainer};

/// Graph-level failures that indicate a bug rather than bad input.
pub const EXIT_INTERNAL: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_DIVERGENCE: i32 = 4;

/// Rows per opnorm-hist work unit; fixed so output never depends on `--jobs`.
const HIST_CHUNK: usize = 32;

#[derive(Parser, Debug)]
#[command(
    name = "hessreg",
    version,
    about = "Input-Hessian regularized training, PGD evaluation and robustness certificates"
)]
pub struct Cli {
    /// Worker threads; outputs are identical for every value.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model (plain, cross-lipschitz, cross-holder or adversarial).
    Train(TrainArgs),
    /// Adversarial accuracy curves under PGD with CE and CW objectives.
    Attack(AttackArgs),
    /// Per-sample robustness certificates as JSON lines.
    Certify(CertifyArgs),
    /// Per-sample operator-norm versus |Hg| table.
    OpnormHist(HistArgs),
    /// Download the four IDX files of MNIST or Fashion-MNIST and write a manifest.
    DataFetch(FetchArgs),
    /// Convert a CSV file or a synthetic generator into IDX files and a manifest.
    DataConvert(ConvertArgs),
}

#[derive(Args, Debug, Default)]
pub struct CommonArgs {
    /// Flat `key = value` config file; `#` starts a comment.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Hyperparameter bundle: mnist, fmnist or desk.
    #[arg(long)]
    pub preset: Option<String>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Any config key, as KEY=VALUE; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Args, Debug, Default)]
pub struct DataArgs {
    /// Dataset manifest (JSON).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// train, eval (the held-out part of the training file) or test.
    #[arg(long)]
    pub split: Option<String>,
    /// Fraction of the training file held out for evaluation.
    #[arg(long)]
    pub holdout: Option<f64>,
    #[arg(long)]
    pub data_seed: Option<u64>,
    /// Stratified subset size taken from the chosen split.
    #[arg(long)]
    pub subset: Option<usize>,
    /// Pool images down to SIDE×SIDE (zero-padding when needed).
    #[arg(long)]
    pub shrink: Option<usize>,
}

#[derive(Args, Debug, Default)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// plain, cross-lipschitz, cross-holder or adversarial.
    #[arg(long)]
    pub mode: Option<String>,
    /// mlp or cnn.
    #[arg(long)]
    pub arch: Option<String>,
    /// Comma-separated hidden widths for the MLP.
    #[arg(long)]
    pub hidden: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lambda1: Option<f64>,
    #[arg(long)]
    pub lambda2: Option<f64>,
    /// Inner ascent iterations T.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Inner ascent step size o.
    #[arg(long)]
    pub step_size: Option<f64>,
    #[arg(long)]
    pub top_m: Option<usize>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub adv_norm: Option<String>,
    #[arg(long)]
    pub adv_iterations: Option<usize>,
    #[arg(long)]
    pub adv_restarts: Option<usize>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Continue from `<out>/checkpoint` when present.
    #[arg(long)]
    pub resume: bool,
    /// Shorthand for `--mode plain`.
    #[arg(long)]
    pub plain: bool,
}

#[derive(Args, Debug, Default)]
pub struct AttackArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Comma-separated radii.
    #[arg(long)]
    pub eps: Option<String>,
    /// l2 or linf.
    #[arg(long)]
    pub norm: Option<String>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub restarts: Option<usize>,
}

#[derive(Args, Debug, Default)]
pub struct CertifyArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// first, second or both.
    #[arg(long)]
    pub order: Option<String>,
    /// point, ball or both.
    #[arg(long)]
    pub cert_mode: Option<String>,
    /// Uniform samples per ball in sampled-ball mode.
    #[arg(long)]
    pub samples: Option<usize>,
    /// Operator-norm ascent iterations.
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Args, Debug, Default)]
pub struct HistArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub step_size: Option<f64>,
    /// Random starts besides the gradient direction.
    #[arg(long)]
    pub starts: Option<usize>,
}

#[derive(Args, Debug)]
pub struct FetchArgs {
    /// mnist or fmnist.
    #[arg(long, default_value = "mnist")]
    pub dataset: String,
    /// Mirror to download from; defaults to the dataset's public location.
    #[arg(long)]
    pub base_url: Option<String>,
    #[arg(long, default_value = "data/mnist")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ConvertArgs {
    /// CSV with one sample per row (pixels 0–255 plus a label column); `.gz` accepted.
    #[arg(long, conflicts_with = "synthetic")]
    pub input: Option<PathBuf>,
    /// blobs or quadratic.
    #[arg(long)]
    pub synthetic: Option<String>,
    #[arg(long)]
    pub label_first: bool,
    /// Reshape CSV rows into SIDE×SIDE single-channel images.
    #[arg(long)]
    pub image_side: Option<usize>,
    /// Fraction written as the manifest's test split.
    #[arg(long, default_value_t = 0.0)]
    pub test_fraction: f64,
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long, default_value_t = 2)]
    pub classes: usize,
    #[arg(long, default_value_t = 2)]
    pub dim: usize,
    #[arg(long, default_value_t = 4.0)]
    pub separation: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `args`, runs the subcommand and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Divergence(_) => EXIT_DIVERGENCE,
        Error::Io { .. } | Error::Format { .. } | Error::Checksum { .. } | Error::Dataset(_) => EXIT_IO,
        Error::Config { .. } | Error::UnsupportedNorm(_) | Error::Label { .. } | Error::Model(_) => EXIT_CONFIG,
        _ => EXIT_INTERNAL,
    }
}

pub fn execute(cli: Cli) -> Result<()> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(Error::config("jobs", "must be at least 1"));
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::config("jobs", e.to_string()))?;
        return pool.install(|| dispatch(cli.command));
    }
    dispatch(cli.command)
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Train(a) => cmd_train(&a),
        Command::Attack(a) => cmd_attack(&a),
        Command::Certify(a) => cmd_certify(&a),
        Command::OpnormHist(a) => cmd_opnorm_hist(&a),
        Command::DataFetch(a) => cmd_data_fetch(&a),
        Command::DataConvert(a) => cmd_data_convert(&a),
    }
}

// ---------------------------------------------------------------------------
// Settings resolution

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Source {
    Default,
    Preset,
    File,
    Flag,
}

/// Resolved flat configuration with the layer each value came from.
#[derive(Clone, Debug, Default)]
pub struct Settings {
    values: BTreeMap<String, (String, Source)>,
}

pub const NONE: &str = "none";

impl Settings {
    fn layer(&mut self, key: &str, value: impl Into<String>, source: Source) {
        self.values.insert(key.to_string(), (value.into(), source));
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(|(v, _)| v.as_str()).filter(|v| *v != NONE)
    }

    pub fn source(&self, key: &str) -> Option<Source> {
        self.values.get(key).map(|(_, s)| *s)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self
            .raw(key)
            .ok_or_else(|| Error::config(key, "required but not set"))?;
        raw.parse()
            .map_err(|_| Error::config(key, format!("cannot parse {raw:?}")))
    }

    pub fn opt<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.raw(key) {
            None => Ok(None),
            Some(_) => self.get(key).map(Some),
        }
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>> {
        let raw = self
            .raw(key)
            .ok_or_else(|| Error::config(key, "required but not set"))?;
        raw.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|_| Error::config(key, format!("cannot parse {s:?}"))))
            .collect()
    }

    /// Resolved table as JSON; numbers and booleans are typed, `none` is null.
    pub fn to_json(&self) -> Value {
        let mut map = serde_json::Map::new();
        for (k, (v, _)) in &self.values {
            let typed = if v == NONE {
                Value::Null
            } else if let Ok(b) = v.parse::<bool>() {
                Value::Bool(b)
            } else if let Ok(i) = v.parse::<i64>() {
                json!(i)
            } else if let Some(f) = v.parse::<f64>().ok().filter(|f| f.is_finite()) {
                json!(f)
            } else {
                Value::String(v.clone())
            };
            map.insert(k.clone(), typed);
        }
        Value::Object(map)
    }
}

/// Parses a flat `key = value` file. Blank lines and `#` comments are skipped.
pub fn parse_config_file(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_text(&text).map_err(|reason| Error::config(path.display().to_string(), reason))
}

pub fn parse_config_text(text: &str) -> std::result::Result<Vec<(String, String)>, String> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected key = value", n + 1))?;
        out.push((normalize_key(k.trim()), v.trim().to_string()));
    }
    Ok(out)
}

fn normalize_key(k: &str) -> String {
    k.replace('-', "_")
}

const HOLDOUT_DEFAULT: &str = "0.05";

const DATA_KEYS: &[(&str, &str)] = &[
    ("data", NONE),
    ("split", "train"),
    ("holdout", HOLDOUT_DEFAULT),
    ("data_seed", "0"),
    ("subset", NONE),
    ("shrink", NONE),
];

const TRAIN_KEYS: &[(&str, &str)] = &[
    ("mode", "plain"),
    ("arch", "mlp"),
    ("hidden", "64,64"),
    ("epochs", "10"),
    ("batch_size", "64"),
    ("lr", "0.01"),
    ("seed", "0"),
    ("lambda1", NONE),
    ("lambda2", NONE),
    ("steps", "10"),
    ("step_size", "0.1"),
    ("top_m", NONE),
    ("epsilon", NONE),
    ("adv_norm", "l2"),
    ("adv_iterations", "10"),
    ("adv_restarts", "1"),
    ("checkpoint_every", NONE),
    ("resume", "false"),
    ("out", "out/train"),
];

const ATTACK_KEYS: &[(&str, &str)] = &[
    ("model", NONE),
    ("eps", "0.5,1,1.5,2,2.5,3,3.5,4,4.5,5"),
    ("norm", "l2"),
    ("iterations", "50"),
    ("restarts", "10"),
    ("seed", "0"),
    ("out", "out/attack"),
];

const CERTIFY_KEYS: &[(&str, &str)] = &[
    ("model", NONE),
    ("order", "second"),
    ("cert_mode", "point"),
    ("samples", "1000"),
    ("steps", "200"),
    ("seed", "0"),
    ("out", "out/certify"),
];

const HIST_KEYS: &[(&str, &str)] = &[
    ("model", NONE),
    ("steps", "200"),
    ("step_size", "0.1"),
    ("starts", "5"),
    ("seed", "0"),
    ("out", "out/opnorm"),
];

fn preset_values(preset: &str, command: &str, mode: Option<&str>) -> Result<Vec<(&'static str, String)>> {
    let mut v: Vec<(&'static str, String)> = Vec::new();
    let (cl, ch, adv): (f64, (f64, f64), f64) = match preset {
        "mnist" => (0.2, (0.02, 0.5), 5.0),
        "fmnist" => (0.15, (0.2, 0.5), 4.0),
        "desk" => (DESK_CL_LAMBDA1, (DESK_CH_LAMBDA1, DESK_CH_LAMBDA2), DESK_ADV_EPSILON),
        other => {
            return Err(Error::config(
                "preset",
                format!("unknown preset {other:?} (mnist, fmnist, desk)"),
            ))
        }
    };
    let desk = preset == "desk";
    if desk {
        v.push(("shrink", "8".into()));
        if command == "train" {
            v.push(("subset", "2000".into()));
        }
    }
    match command {
        "train" => {
            v.push(("steps", "10".into()));
            v.push(("step_size", "0.1".into()));
            if desk {
                v.extend([
                    ("arch", "mlp".into()),
                    ("hidden", "64,64".into()),
                    ("epochs", DESK_EPOCHS.to_string()),
                    ("batch_size", "32".into()),
                    ("lr", "0.1".into()),
                ]);
            } else {
                v.extend([
                    ("arch", "cnn".into()),
                    ("batch_size", "64".into()),
                    ("lr", "0.01".into()),
                ]);
            }
            match mode {
                Some("cross-lipschitz") => v.push(("lambda1", cl.to_string())),
                Some("cross-holder") => {
                    v.push(("lambda1", ch.0.to_string()));
                    v.push(("lambda2", ch.1.to_string()));
                }
                Some("adversarial") => v.push(("epsilon", adv.to_string())),
                _ => {}
            }
        }
        "attack" if desk => v.push(("eps", DESK_EPS_GRID.into())),
        _ => {}
    }
    Ok(v)
}

/// Desk-scale substitutes for the full-size hyperparameters (8×8 inputs).
pub const DESK_CL_LAMBDA1: f64 = 0.02;
pub const DESK_CH_LAMBDA1: f64 = 0.02;
pub const DESK_CH_LAMBDA2: f64 = 0.1;
pub const DESK_ADV_EPSILON: f64 = 0.3;
pub const DESK_EPOCHS: usize = 60;
pub const DESK_EPS_GRID: &str = "0.1,0.2,0.3,0.4";

fn resolve(
    command: &str,
    defaults: &[&[(&str, &str)]],
    common: &CommonArgs,
    flags: Vec<(&str, Option<String>)>,
) -> Result<Settings> {
    let mut s = Settings::default();
    for table in defaults {
        for (k, v) in *table {
            s.layer(k, *v, Source::Default);
        }
    }
    let keys: Vec<String> = s.values.keys().cloned().collect();
    let known = |k: &str| keys.iter().any(|key| key == k);
    let file = match &common.config {
        Some(p) => parse_config_file(p)?,
        None => Vec::new(),
    };
    let mut overrides: Vec<(String, String)> = Vec::new();
    for item in &common.set {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| Error::config("set", format!("expected KEY=VALUE, got {item:?}")))?;
        overrides.push((normalize_key(k.trim()), v.trim().to_string()));
    }
    for (k, _) in file.iter().chain(&overrides) {
        if !known(k) && k != "preset" {
            return Err(Error::config(k.clone(), format!("unknown key for {command}")));
        }
    }
    let mut flag_values: Vec<(String, String)> = flags
        .into_iter()
        .filter_map(|(k, v)| v.map(|v| (k.to_string(), v)))
        .collect();
    if let Some(o) = &common.out {
        flag_values.push(("out".into(), o.display().to_string()));
    }
    if let Some(seed) = common.seed {
        flag_values.push(("seed".into(), seed.to_string()));
    }
    flag_values.extend(overrides);

    // mode decides which preset values apply, so look it up across all layers first
    let pick = |key: &str| -> Option<String> {
        flag_values
            .iter()
            .rev()
            .chain(file.iter().rev())
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.clone())
    };
    let preset = common.preset.clone().or_else(|| pick("preset"));
    if let Some(p) = &preset {
        let mode = pick("mode").or_else(|| s.raw("mode").map(str::to_string));
        for (k, v) in preset_values(p, command, mode.as_deref())? {
            if known(k) {
                s.layer(k, v, Source::Preset);
            }
        }
        s.layer("preset", p.clone(), Source::Preset);
    }
    for (k, v) in file {
        if k != "preset" {
            s.layer(&k, v, Source::File);
        }
    }
    for (k, v) in flag_values {
        if k != "preset" {
            s.layer(&k, v, Source::Flag);
        }
    }
    Ok(s)
}

fn show<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(ToString::to_string)
}

fn data_flags(d: &DataArgs) -> Vec<(&'static str, Option<String>)> {
    vec![
        ("data", d.data.as_ref().map(|p| p.display().to_string())),
        ("split", d.split.clone()),
        ("holdout", show(&d.holdout)),
        ("data_seed", show(&d.data_seed)),
        ("subset", show(&d.subset)),
        ("shrink", show(&d.shrink)),
    ]
}

fn parse_norm(key: &str, s: &str) -> Result<Lp> {
    match s {
        "l2" | "2" => Ok(Lp::L2),
        "linf" | "inf" => Ok(Lp::LInf),
        _ => Err(Error::config(key, format!("unsupported norm {s:?} (l2, linf)"))),
    }
}

/// Loads the configured split and applies the shrink and subset transforms.
pub fn load_split(s: &Settings) -> Result<Dataset> {
    let path: PathBuf = s.get("data")?;
    let (manifest, dir) = Manifest::read(&path)?;
    let split: String = s.get("split")?;
    let transform = |ds: Dataset| -> Result<Dataset> {
        match s.opt::<usize>("shrink")? {
            Some(side) => shrink_to(&ds, side),
            None => Ok(ds),
        }
    };
    let ds = match split.as_str() {
        "test" => transform(manifest.load(&dir, true)?)?,
        "train" | "eval" => {
            let full = transform(manifest.load(&dir, false)?)?;
            let fraction: f64 = s.get("holdout")?;
            if fraction == 0.0 {
                if split == "eval" {
                    return Err(Error::config("holdout", "eval split needs a holdout fraction > 0"));
                }
                full
            } else {
                let (train, eval) = holdout_split(&full, fraction, s.get("data_seed")?)?;
                if split == "train" {
                    train
                } else {
                    eval
                }
            }
        }
        other => {
            return Err(Error::config(
                "split",
                format!("unknown split {other:?} (train, eval, test)"),
            ))
        }
    };
    let ds = match s.opt::<usize>("subset")? {
        Some(n) if n < ds.len() => ds.stratified_subset(n, s.get("data_seed")?)?,
        _ => ds,
    };
    if ds.is_empty() {
        return Err(Error::Dataset(format!("split {split} of {} is empty", path.display())));
    }
    Ok(ds)
}

fn output_dir(s: &Settings) -> Result<PathBuf> {
    let out: PathBuf = s.get("out")?;
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    Ok(out)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_run_json(out: &Path, command: &str, config: Value, timing: Value) -> Result<()> {
    let doc = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "config": config,
        "timing": timing,
    });
    let text = serde_json::to_string_pretty(&doc).expect("run record serializes");
    write_text(&out.join("run.json"), &(text + "\n"))
}

// ---------------------------------------------------------------------------
// train

/// Resolved settings and the typed training configuration for `train`.
pub fn train_settings(a: &TrainArgs) -> Result<(Settings, TrainConfig)> {
    let mode_flag = match (a.plain, &a.mode) {
        (true, Some(m)) if m != "plain" => {
            return Err(Error::config("mode", format!("--plain conflicts with --mode {m}")));
        }
        (true, _) => Some("plain".to_string()),
        (false, m) => m.clone(),
    };
    let mut flags = data_flags(&a.data);
    flags.extend([
        ("mode", mode_flag),
        ("arch", a.arch.clone()),
        ("hidden", a.hidden.clone()),
        ("epochs", show(&a.epochs)),
        ("batch_size", show(&a.batch_size)),
        ("lr", show(&a.lr)),
        ("lambda1", show(&a.lambda1)),
        ("lambda2", show(&a.lambda2)),
        ("steps", show(&a.steps)),
        ("step_size", show(&a.step_size)),
        ("top_m", show(&a.top_m)),
        ("epsilon", show(&a.epsilon)),
        ("adv_norm", a.adv_norm.clone()),
        ("adv_iterations", show(&a.adv_iterations)),
        ("adv_restarts", show(&a.adv_restarts)),
        ("checkpoint_every", show(&a.checkpoint_every)),
        ("resume", a.resume.then(|| "true".to_string())),
    ]);
    let mut s = resolve("train", &[DATA_KEYS, TRAIN_KEYS], &a.common, flags)?;
    let mode_name: String = s.get("mode")?;
    let explicit = |s: &Settings, k: &str| s.source(k).is_some_and(|src| src >= Source::File) && s.raw(k).is_some();
    let allowed: &[&str] = match mode_name.as_str() {
        "plain" => &[],
        "cross-lipschitz" => &["lambda1"],
        "cross-holder" => &["lambda1", "lambda2"],
        "adversarial" => &["epsilon"],
        other => {
            return Err(Error::config(
                "mode",
                format!("unknown mode {other:?} (plain, cross-lipschitz, cross-holder, adversarial)"),
            ))
        }
    };
    for k in ["lambda1", "lambda2", "epsilon"] {
        if explicit(&s, k) && !allowed.contains(&k) {
            return Err(Error::config(k, format!("not valid for mode {mode_name}")));
        }
    }
    // unset weights fall back to the full-size paper values
    match mode_name.as_str() {
        "cross-lipschitz" if s.raw("lambda1").is_none() => s.layer("lambda1", "0.2", Source::Default),
        "cross-holder" => {
            if s.raw("lambda1").is_none() {
                s.layer("lambda1", "0.02", Source::Default);
            }
            if s.raw("lambda2").is_none() {
                s.layer("lambda2", "0.5", Source::Default);
            }
        }
        "adversarial" if s.raw("epsilon").is_none() => s.layer("epsilon", "5", Source::Default),
        _ => {}
    }
    let mode = match mode_name.as_str() {
        "plain" => TrainMode::Plain,
        "cross-lipschitz" => TrainMode::CrossLipschitz {
            lambda1: s.get("lambda1")?,
        },
        "cross-holder" => TrainMode::CrossHolder {
            lambda1: s.get("lambda1")?,
            lambda2: s.get("lambda2")?,
        },
        _ => TrainMode::Adversarial {
            epsilon: s.get("epsilon")?,
            norm: parse_norm("adv_norm", &s.get::<String>("adv_norm")?)?,
            iterations: s.get("adv_iterations")?,
            restarts: s.get("adv_restarts")?,
            objective: Objective::Ce,
        },
    };
    let out: PathBuf = s.get("out")?;
    let checkpoint_every: Option<usize> = s.opt("checkpoint_every")?;
    let cfg = TrainConfig {
        epochs: s.get("epochs")?,
        batch_size: s.get("batch_size")?,
        learning_rate: s.get("lr")?,
        seed: s.get("seed")?,
        mode,
        probe: OpNormProbe {
            steps: s.get("steps")?,
            step_size: s.get("step_size")?,
            ..OpNormProbe::default()
        },
        top_m: s.opt("top_m")?,
        checkpoint_every,
        checkpoint_dir: checkpoint_every.map(|_| out.join("checkpoint")),
    };
    cfg.validate()?;
    Ok((s, cfg))
}

fn build_model(s: &Settings, data: &Dataset, seed: u64) -> Result<ScoringModel> {
    let arch: String = s.get("arch")?;
    match arch.as_str() {
        "mlp" => build_mlp(
            data.sample_shape(),
            &s.list::<usize>("hidden")?,
            data.num_classes(),
            seed,
        ),
        "cnn" => build_paper_cnn(data.sample_shape(), data.num_classes(), seed),
        other => Err(Error::config(
            "arch",
            format!("unknown architecture {other:?} (mlp, cnn)"),
        )),
    }
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let start = Instant::now();
    let (s, cfg) = train_settings(a)?;
    if s.raw("split") != Some("train") {
        return Err(Error::config("split", "training always uses the train split"));
    }
    let data = load_split(&s)?;
    let out = output_dir(&s)?;
    let checkpoint = out.join("checkpoint");
    let mut trainer = if s.get::<bool>("resume")? && checkpoint.join("checkpoint.json").exists() {
        Trainer::resume(&checkpoint, cfg.clone())?
    } else {
        Trainer::new(build_model(&s, &data, cfg.seed)?, cfg.clone())?
    };
    trainer.train(&data, &mut NoObserver)?;
    trainer.model().save(&out.join("model.hnet"))?;
    let mut lines = String::new();
    for m in trainer.metrics() {
        lines += &serde_json::to_string(m).expect("metrics serialize");
        lines.push('\n');
    }
    write_text(&out.join("metrics.jsonl"), &lines)?;
    let last = trainer.metrics().last();
    println!(
        "{} epochs ({}), final loss {}, clean accuracy {}",
        trainer.epochs_done(),
        cfg.mode.name(),
        last.map_or(f64::NAN, |m| m.loss),
        last.map_or(f64::NAN, |m| m.clean_acc)
    );
    let mut config = s.to_json();
    config["train_config"] = serde_json::to_value(&cfg).expect("config serializes");
    write_run_json(
        &out,
        "train",
        config,
        json!({"wall_time_s": start.elapsed().as_secs_f64(), "epoch_wall_time_s": trainer.epoch_seconds}),
    )
}

// ---------------------------------------------------------------------------
// attack

fn load_model(s: &Settings) -> Result<ScoringModel> {
    let path: PathBuf = s.get("model")?;
    if !path.exists() {
        return Err(Error::io(
            &path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "model file not found"),
        ));
    }
    ScoringModel::load(&path)
}

fn eval_settings(
    command: &str,
    table: &[(&str, &str)],
    common: &CommonArgs,
    data: &DataArgs,
    extra: Vec<(&str, Option<String>)>,
) -> Result<Settings> {
    let mut flags = data_flags(data);
    flags.extend(extra);
    let mut s = resolve(command, &[DATA_KEYS, table], common, flags)?;
    if s.source("split") == Some(Source::Default) {
        s.layer("split", "eval", Source::Default);
    }
    Ok(s)
}

pub fn attack_settings(a: &AttackArgs) -> Result<Settings> {
    eval_settings(
        "attack",
        ATTACK_KEYS,
        &a.common,
        &a.data,
        vec![
            ("model", a.model.as_ref().map(|p| p.display().to_string())),
            ("eps", a.eps.clone()),
            ("norm", a.norm.clone()),
            ("iterations", show(&a.iterations)),
            ("restarts", show(&a.restarts)),
        ],
    )
}

fn cmd_attack(a: &AttackArgs) -> Result<()> {
    let start = Instant::now();
    let s = attack_settings(a)?;
    let model = load_model(&s)?;
    let data = load_split(&s)?;
    let grid: Vec<f64> = s.list("eps")?;
    let norm = parse_norm("norm", &s.get::<String>("norm")?)?;
    let mut base = AttackSpec::new(grid.first().copied().unwrap_or(1.0), norm, Objective::Ce);
    base.iterations = s.get("iterations")?;
    base.restarts = s.get("restarts")?;
    base.clamp = data.clamp();
    base.seed = s.get("seed")?;
    let table = adversarial_accuracy(&model, &data, &grid, &base)?;
    let out = output_dir(&s)?;
    write_text(&out.join("attack.csv"), &table.to_csv())?;
    println!("clean accuracy {} on {} samples", table.clean_accuracy, data.len());
    for (eps, acc) in table.curve("strict_worst") {
        println!("eps {eps}: strict worst-case accuracy {acc}");
    }
    write_run_json(
        &out,
        "attack",
        s.to_json(),
        json!({"wall_time_s": start.elapsed().as_secs_f64()}),
    )
}

// ---------------------------------------------------------------------------
// certify

pub fn certify_settings(a: &CertifyArgs) -> Result<Settings> {
    eval_settings(
        "certify",
        CERTIFY_KEYS,
        &a.common,
        &a.data,
        vec![
            ("model", a.model.as_ref().map(|p| p.display().to_string())),
            ("order", a.order.clone()),
            ("cert_mode", a.cert_mode.clone()),
            ("samples", show(&a.samples)),
            ("steps", show(&a.steps)),
        ],
    )
}

/// Certificates for every sample under each requested `(order, mode)`, then one summary line each.
pub fn certify_lines(model: &dyn Scorer, data: &Dataset, s: &Settings) -> Result<String> {
    let orders: Vec<&str> = match s.get::<String>("order")?.as_str() {
        "first" => vec!["first"],
        "second" => vec!["second"],
        "both" => vec!["first", "second"],
        other => {
            return Err(Error::config(
                "order",
                format!("unknown order {other:?} (first, second, both)"),
            ))
        }
    };
    let samples: usize = s.get("samples")?;
    if samples == 0 {
        return Err(Error::config("samples", "must be at least 1"));
    }
    let modes: Vec<CertMode> = match s.get::<String>("cert_mode")?.as_str() {
        "point" => vec![CertMode::Point],
        "ball" => vec![CertMode::SampledBall { samples }],
        "both" => vec![CertMode::Point, CertMode::SampledBall { samples }],
        other => {
            return Err(Error::config(
                "cert_mode",
                format!("unknown mode {other:?} (point, ball, both)"),
            ))
        }
    };
    let seed: u64 = s.get("seed")?;
    let mut text = String::new();
    for order in &orders {
        for &mode in &modes {
            let opts = CertOptions {
                mode,
                q: Lp::L2,
                probe: OpNormProbe::evaluation(s.get("steps")?, seed),
                seed,
            };
            let certs: Vec<Certificate> = (0..data.len())
                .into_par_iter()
                .map(|i| {
                    let (x, y) = (data.sample(i), data.labels()[i]);
                    if *order == "first" {
                        first_order_certificate(model, &x, i, Some(y), &opts)
                    } else {
                        second_order_certificate(model, &x, i, Some(y), &opts)
                    }
                })
                .collect::<Result<_>>()?;
            for c in &certs {
                text += &serde_json::to_string(c).expect("certificate serializes");
                text.push('\n');
            }
            let summary = json!({"summary": summarize(&certs), "order": order, "mode": mode});
            text += &serde_json::to_string(&summary).expect("summary serializes");
            text.push('\n');
        }
    }
    Ok(text)
}

fn cmd_certify(a: &CertifyArgs) -> Result<()> {
    let start = Instant::now();
    let s = certify_settings(a)?;
    let model = load_model(&s)?;
    let data = load_split(&s)?;
    let text = certify_lines(&model, &data, &s)?;
    let out = output_dir(&s)?;
    write_text(&out.join("certificates.jsonl"), &text)?;
    for line in text.lines().filter(|l| l.starts_with("{\"summary\"")) {
        println!("{line}");
    }
    write_run_json(
        &out,
        "certify",
        s.to_json(),
        json!({"wall_time_s": start.elapsed().as_secs_f64()}),
    )
}

// ---------------------------------------------------------------------------
// opnorm-hist

pub fn hist_settings(a: &HistArgs) -> Result<Settings> {
    eval_settings(
        "opnorm-hist",
        HIST_KEYS,
        &a.common,
        &a.data,
        vec![
            ("model", a.model.as_ref().map(|p| p.display().to_string())),
            ("steps", show(&a.steps)),
            ("step_size", show(&a.step_size)),
            ("starts", show(&a.starts)),
        ],
    )
}

/// `(sample, target, other, ‖H‖ estimate, ‖Hg‖)`.
type HistRow = (usize, usize, usize, f64, f64);

/// One row per sample: the predicted class `t`, its closest competitor `j`,
/// the multi-start estimate of `‖H‖` for `f_t − f_j`, and `‖H g/‖g‖‖`.
pub fn opnorm_table(model: &dyn Scorer, data: &Dataset, probe: &OpNormProbe) -> Result<String> {
    let n = data.len();
    let idx: Vec<usize> = (0..n).collect();
    let rows: Vec<Vec<HistRow>> = idx
        .par_chunks(HIST_CHUNK)
        .map(|chunk| {
            let (xs, _) = data.batch(chunk);
            let logits = score_batch(model, &xs)?;
            let pairs: Vec<(usize, usize)> = (0..chunk.len())
                .map(|r| {
                    let l = logits.row_slice(r);
                    let t = Tensor::vector(l.to_vec()).argmax();
                    let j = (0..l.len())
                        .filter(|&j| j != t)
                        .fold(None, |best: Option<usize>, j| match best {
                            Some(b) if l[b] >= l[j] => Some(b),
                            _ => Some(j),
                        })
                        .expect("at least two classes");
                    (t, j)
                })
                .collect();
            let mut mg = margin_graph_pairs(model, &xs, &pairs)?;
            let keys: Vec<u64> = chunk.iter().map(|&i| i as u64).collect();
            let hv = estimate_opnorm_rows(&mut mg, probe, &keys)?;
            let hg = hg_estimate_rows(&mut mg, probe.q)?;
            Ok(chunk
                .iter()
                .enumerate()
                .map(|(r, &i)| (i, pairs[r].0, pairs[r].1, hv[r].value, hg[r].value))
                .collect())
        })
        .collect::<Result<_>>()?;
    let mut text = String::from("sample,label,target,other,hv_star,hg,diff\n");
    for (i, t, j, hv, hg) in rows.into_iter().flatten() {
        let _ = writeln!(text, "{i},{},{t},{j},{hv:?},{hg:?},{:?}", data.labels()[i], hv - hg);
    }
    Ok(text)
}

fn cmd_opnorm_hist(a: &HistArgs) -> Result<()> {
    let start = Instant::now();
    let s = hist_settings(a)?;
    let model = load_model(&s)?;
    let data = load_split(&s)?;
    let probe = OpNormProbe {
        steps: s.get("steps")?,
        step_size: s.get("step_size")?,
        starts: s.get("starts")?,
        gradient_start: true,
        seed: s.get("seed")?,
        ..OpNormProbe::default()
    };
    probe.validate()?;
    let text = opnorm_table(&model, &data, &probe)?;
    let out = output_dir(&s)?;
    write_text(&out.join("opnorm.csv"), &text)?;
    let diffs: Vec<f64> = text
        .lines()
        .skip(1)
        .filter_map(|l| l.rsplit(',').next()?.parse().ok())
        .collect();
    println!(
        "{} samples, mean |Hv*| - |Hg| = {}",
        diffs.len(),
        diffs.iter().sum::<f64>() / diffs.len().max(1) as f64
    );
    write_run_json(
        &out,
        "opnorm-hist",
        s.to_json(),
        json!({"wall_time_s": start.elapsed().as_secs_f64()}),
    )
}

// ---------------------------------------------------------------------------
// data-fetch and data-convert

pub const IDX_FILES: [&str; 4] = [
    "train-images-idx3-ubyte.gz",
    "train-labels-idx1-ubyte.gz",
    "t10k-images-idx3-ubyte.gz",
    "t10k-labels-idx1-ubyte.gz",
];

fn default_base_url(dataset: &str) -> Result<&'static str> {
    match dataset {
        "mnist" => Ok("https://ossci-datasets.s3.amazonaws.com/mnist/"),
        "fmnist" => Ok("http://fashion-mnist.s3-website.eu-central-1.amazonaws.com/"),
        other => Err(Error::config(
            "dataset",
            format!("unknown dataset {other:?} (mnist, fmnist)"),
        )),
    }
}

fn download(url: &str, dest: &Path) -> Result<()> {
    let fail = |reason: String| Error::io(dest, std::io::Error::other(format!("{url}: {reason}")));
    let mut response = ureq::get(url).call().map_err(|e| fail(e.to_string()))?;
    let bytes = response
        .body_mut()
        .with_config()
        .limit(256 * 1024 * 1024)
        .read_to_vec()
        .map_err(|e| fail(e.to_string()))?;
    std::fs::write(dest, bytes).map_err(|e| Error::io(dest, e))
}

fn cmd_data_fetch(a: &FetchArgs) -> Result<()> {
    let base = match &a.base_url {
        Some(b) => b.clone(),
        None => default_base_url(&a.dataset)?.to_string(),
    };
    let base = if base.ends_with('/') { base } else { base + "/" };
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    for f in IDX_FILES {
        let dest = a.out.join(f);
        println!("fetching {base}{f}");
        download(&format!("{base}{f}"), &dest)?;
    }
    let mut manifest = Manifest {
        name: a.dataset.clone(),
        images: IDX_FILES[0].into(),
        labels: IDX_FILES[1].into(),
        test_images: Some(IDX_FILES[2].into()),
        test_labels: Some(IDX_FILES[3].into()),
        checksums: BTreeMap::new(),
        clamp: Some((0.0, 1.0)),
        num_classes: Some(10),
    };
    manifest.record_checksums(&a.out)?;
    // parse once so a corrupt download fails here rather than at training time
    manifest.load(&a.out, false)?;
    manifest.load(&a.out, true)?;
    manifest.write(&a.out.join("manifest.json"))?;
    println!("wrote {}", a.out.join("manifest.json").display());
    Ok(())
}

fn cmd_data_convert(a: &ConvertArgs) -> Result<()> {
    let ds = match (&a.input, a.synthetic.as_deref()) {
        (Some(path), None) => load_csv(path, a.label_first, a.image_side)?,
        (None, Some("blobs")) => make_blobs(a.n, a.classes, a.dim, a.separation, a.seed)?,
        (None, Some("quadratic")) => make_quadratic_boundary(a.n, a.seed)?,
        (None, Some(other)) => {
            return Err(Error::config(
                "synthetic",
                format!("unknown generator {other:?} (blobs, quadratic)"),
            ))
        }
        _ => return Err(Error::config("input", "give either --input or --synthetic")),
    };
    if !(0.0..1.0).contains(&a.test_fraction) {
        return Err(Error::config("test_fraction", "must lie in [0, 1)"));
    }
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let name = a.name.clone().unwrap_or_else(|| ds.name.clone());
    let (train, test) = if a.test_fraction > 0.0 {
        let (tr, te) = holdout_split(&ds, a.test_fraction, a.seed)?;
        (tr, Some(te))
    } else {
        (ds, None)
    };
    write_idx(&train, &a.out.join("train-images.idx"), &a.out.join("train-labels.idx"))?;
    if let Some(te) = &test {
        write_idx(te, &a.out.join("test-images.idx"), &a.out.join("test-labels.idx"))?;
    }
    let mut manifest = Manifest {
        name,
        images: "train-images.idx".into(),
        labels: "train-labels.idx".into(),
        test_images: test.as_ref().map(|_| "test-images.idx".into()),
        test_labels: test.as_ref().map(|_| "test-labels.idx".into()),
        checksums: BTreeMap::new(),
        clamp: train.clamp(),
        num_classes: Some(train.num_classes()),
    };
    manifest.record_checksums(&a.out)?;
    manifest.write(&a.out.join("manifest.json"))?;
    println!(
        "wrote {} training{} samples to {}",
        train.len(),
        test.as_ref()
            .map_or(String::new(), |t| format!(" and {} test", t.len())),
        a.out.display()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("hessreg").chain(args.iter().copied())).unwrap()
    }

    fn train_args(args: &[&str]) -> TrainArgs {
        match parse(&[&["train"], args].concat()).command {
            Command::Train(t) => t,
            _ => unreachable!(),
        }
    }

    #[test]
    fn mnist_preset_resolves_paper_values() {
        let (s, cfg) = train_settings(&train_args(&["--mode", "cross-holder", "--preset", "mnist"])).unwrap();
        assert_eq!(
            cfg.mode,
            TrainMode::CrossHolder {
                lambda1: 0.02,
                lambda2: 0.5
            }
        );
        assert_eq!((cfg.probe.steps, cfg.probe.step_size), (10, 0.1));
        assert_eq!(s.raw("arch"), Some("cnn"));
        let (_, cl) = train_settings(&train_args(&["--mode", "cross-lipschitz", "--preset", "mnist"])).unwrap();
        assert_eq!(cl.mode, TrainMode::CrossLipschitz { lambda1: 0.2 });
        let (_, adv) = train_settings(&train_args(&["--mode", "adversarial", "--preset", "mnist"])).unwrap();
        assert!(matches!(adv.mode, TrainMode::Adversarial { epsilon, .. } if epsilon == 5.0));
        let (_, f) = train_settings(&train_args(&["--mode", "cross-holder", "--preset", "fmnist"])).unwrap();
        assert_eq!(
            f.mode,
            TrainMode::CrossHolder {
                lambda1: 0.2,
                lambda2: 0.5
            }
        );
    }

    #[test]
    fn lambda_rejected_for_plain() {
        for args in [
            &["--mode", "plain", "--lambda1", "0.5"][..],
            &["--plain", "--lambda1", "0.5"][..],
            &["--mode", "cross-lipschitz", "--lambda2", "0.5"][..],
            &["--mode", "cross-holder", "--epsilon", "1"][..],
        ] {
            let err = train_settings(&train_args(args)).unwrap_err();
            assert_eq!(exit_code(&err), EXIT_CONFIG, "{args:?}");
        }
        // preset values for other modes are not user input
        assert!(train_settings(&train_args(&["--plain", "--preset", "mnist"])).is_ok());
    }

    #[test]
    fn layers_override_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("run.cfg");
        std::fs::write(&file, "# desk run\nmode = cross-holder\nlambda2 = 0.7\nepochs=3\n").unwrap();
        let f = file.to_str().unwrap();
        let (s, cfg) = train_settings(&train_args(&["--config", f, "--preset", "mnist", "--epochs", "4"])).unwrap();
        assert_eq!(cfg.epochs, 4);
        assert_eq!(
            cfg.mode,
            TrainMode::CrossHolder {
                lambda1: 0.02,
                lambda2: 0.7
            }
        );
        assert_eq!(s.source("lambda2"), Some(Source::File));
        let (_, cfg) = train_settings(&train_args(&["--config", f, "--set", "lambda2=0.9"])).unwrap();
        assert_eq!(
            cfg.mode,
            TrainMode::CrossHolder {
                lambda1: 0.02,
                lambda2: 0.9
            }
        );
    }

    #[test]
    fn unknown_keys_and_bad_values_name_the_field() {
        let err = train_settings(&train_args(&["--set", "lamda1=0.1"])).unwrap_err();
        assert!(err.to_string().contains("lamda1"), "{err}");
        let err = train_settings(&train_args(&["--lr=-1"])).unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
        let err = train_settings(&train_args(&["--set", "epochs=ten"])).unwrap_err();
        assert!(err.to_string().contains("epochs"), "{err}");
        assert!(parse_config_text("no equals sign").is_err());
    }

    #[test]
    fn resolved_config_is_complete_and_typed() {
        let (s, _) = train_settings(&train_args(&["--mode", "cross-holder"])).unwrap();
        let j = s.to_json();
        for (k, _) in DATA_KEYS.iter().chain(TRAIN_KEYS) {
            assert!(j.get(*k).is_some(), "{k}");
        }
        assert_eq!(j["lambda1"], json!(0.02));
        assert_eq!(j["top_m"], Value::Null);
        assert_eq!(j["resume"], json!(false));
    }

    #[test]
    fn exit_codes() {
        assert_eq!(run(["hessreg", "train", "--bogus"]), EXIT_CONFIG);
        assert_eq!(
            run(["hessreg", "train", "--data", "/nonexistent/manifest.json"]),
            EXIT_IO
        );
        assert_eq!(exit_code(&Error::Divergence("x".into())), EXIT_DIVERGENCE);
        assert_eq!(run(["hessreg", "--help"]), 0);
    }
}
