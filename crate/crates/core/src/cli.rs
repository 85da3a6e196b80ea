//! Command-line front end for the `stylediff` binary.
//!
//! Every command writes into a run directory (default
//! `$STYLEDIFF_RUN_DIR/<command>`, else `runs/<command>`) and echoes its
//! resolved configuration there as `config.json`.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::Serialize;

use crate::diffusion::{SampleOptions, ScheduleKind};
use crate::error::{Error, Result};
use crate::eval::{evaluate, style_label, train_classifier, train_dual_encoder, ClassifierConfig, DualConfig, EvalReport, Evaluators};
use crate::lora::{AdapterSet, TargetFlags};
use crate::model::{styled_prompt, BaseModel, DenoiserConfig, Vocab};
use crate::motion::io::MOTION_EXTENSION;
use crate::motion::{read_motion_dir, toy, write_motion_dir, LabeledClip};
use crate::train::{train_base, train_lora, Phase, PriorSource, TrainConfig};

pub const RUN_DIR_ENV: &str = "STYLEDIFF_RUN_DIR";
pub const ADAPTER_FILE: &str = "adapter.mdlc";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const CONFIG_ECHO: &str = "config.json";

#[derive(Parser, Debug)]
#[command(name = "stylediff", version, about = "Text-to-motion diffusion with low-rank style adapters")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Log filter passed to env_logger (error, warn, info, debug).
    #[arg(long, global = true, default_value = "info")]
    pub log: String,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic motion dataset.
    GenData(GenDataArgs),
    /// Train a base denoiser on neutral clips.
    TrainBase(TrainBaseArgs),
    /// Fine-tune style adapters on a frozen base model.
    TrainLora(TrainLoraArgs),
    /// Sample clips for one prompt, optionally in a style.
    Generate(GenerateArgs),
    /// Sample clips combining two or more styles.
    Mix(GenerateArgs),
    /// Score generated clips against a reference set.
    Evaluate(EvaluateArgs),
    /// Train and score adapters over a rank x lambda grid.
    Sweep(SweepArgs),
}

#[derive(Args, Debug, Clone)]
pub struct OutArgs {
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Root for default output directories.
    #[arg(long, env = RUN_DIR_ENV)]
    pub run_root: Option<PathBuf>,
    /// Reuse a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Use the first N actions.
    #[arg(long, default_value_t = 3)]
    pub actions: usize,
    /// Comma-separated style names, or `all`. Empty gives a neutral-only set.
    #[arg(long, value_delimiter = ',')]
    pub styles: Vec<String>,
    /// Leave out the neutral cells (only meaningful with --styles).
    #[arg(long)]
    pub no_neutral: bool,
    #[arg(long, default_value_t = 8)]
    pub clips_per_cell: usize,
    #[arg(long, default_value_t = 32)]
    pub frames: usize,
    #[arg(long, default_value_t = 5)]
    pub joints: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub out: OutArgs,
}

/// Overrides applied on top of a preset or config file.
#[derive(Args, Debug, Default)]
pub struct TrainOverrides {
    /// TOML or JSON training config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub diffusion_steps: Option<usize>,
    #[arg(long)]
    pub schedule: Option<String>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainBaseArgs {
    /// Directory of neutral motion clips.
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub train: TrainOverrides,
    #[arg(long)]
    pub cond_dropout: Option<f64>,
    #[arg(long, default_value_t = 64)]
    pub d_model: usize,
    #[arg(long, default_value_t = 4)]
    pub layers: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 256)]
    pub ffn: usize,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Args, Debug)]
pub struct LoraOverrides {
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Comma-separated subset of q,k,v,o,ffn.
    #[arg(long)]
    pub targets: Option<String>,
    /// dataset, generated or mixed.
    #[arg(long)]
    pub prior_source: Option<String>,
    #[arg(long)]
    pub prior_pool: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainLoraArgs {
    /// Base model directory.
    #[arg(long)]
    pub base: PathBuf,
    /// Directory of style clips.
    #[arg(long)]
    pub data: PathBuf,
    /// Directory of neutral clips for the prior term.
    #[arg(long)]
    pub prior: Option<PathBuf>,
    /// Style name; repeat to learn several styles jointly. Defaults to the
    /// styles found in the clip headers.
    #[arg(long = "style")]
    pub styles: Vec<String>,
    #[command(flatten)]
    pub train: TrainOverrides,
    #[command(flatten)]
    pub lora: LoraOverrides,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    pub base: PathBuf,
    /// Adapter file, or a directory holding `adapter.mdlc`.
    #[arg(long)]
    pub adapter: Option<PathBuf>,
    /// Prompt text. A bare toy action name such as `walk forward` expands to
    /// its canonical sentence.
    #[arg(long)]
    pub prompt: String,
    #[arg(long = "style")]
    pub styles: Vec<String>,
    #[arg(long, default_value_t = 8)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 2.5)]
    pub guidance: f64,
    #[arg(long, default_value_t = 32)]
    pub frames: usize,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Args, Debug, Clone)]
pub struct EvaluatorArgs {
    /// Directory holding trained evaluators.
    #[arg(long)]
    pub evaluators: PathBuf,
    /// Train evaluators on the reference set when the directory is empty.
    #[arg(long)]
    pub train_evaluators: bool,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Generated clips.
    #[arg(long)]
    pub data: PathBuf,
    /// Reference clips.
    #[arg(long)]
    pub real: PathBuf,
    #[command(flatten)]
    pub evaluators: EvaluatorArgs,
    #[arg(long, default_value = "model")]
    pub label: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long)]
    pub base: PathBuf,
    /// Style clips.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub prior: Option<PathBuf>,
    #[arg(long)]
    pub style: String,
    /// Reference clips for scoring.
    #[arg(long)]
    pub real: PathBuf,
    #[command(flatten)]
    pub evaluators: EvaluatorArgs,
    #[arg(long, value_delimiter = ',', default_value = "1,5,20")]
    pub ranks: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0,0.25,5")]
    pub lambdas: Vec<f64>,
    #[arg(long, default_value_t = 32)]
    pub n: usize,
    #[command(flatten)]
    pub train: TrainOverrides,
    #[arg(long)]
    pub prior_source: Option<String>,
    #[command(flatten)]
    pub out: OutArgs,
}

/// Process exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::UnknownToken(_) | Error::Invalid(_) => 2,
        Error::MissingArtifact(_) => 3,
        Error::Numerical(_) => 4,
        _ => 1,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::TrainBase(a) => cmd_train_base(a),
        Command::TrainLora(a) => cmd_train_lora(a),
        Command::Generate(a) => generate(a, "generate"),
        Command::Mix(a) => {
            if a.styles.len() < 2 {
                return Err(Error::Config("mix needs at least two --style values".into()));
            }
            generate(a, "mix")
        }
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Sweep(a) => sweep(a),
    }
}

impl OutArgs {
    /// Resolves and prepares the output directory.
    fn prepare(&self, command: &str) -> Result<PathBuf> {
        let dir = match (&self.out, &self.run_root) {
            (Some(o), _) => o.clone(),
            (None, Some(root)) => root.join(command),
            (None, None) => Path::new("runs").join(command),
        };
        if dir.is_dir() && fs::read_dir(&dir)?.next().is_some() {
            if !self.force {
                return Err(Error::Config(format!(
                    "output directory {} is not empty (pass --force)",
                    dir.display()
                )));
            }
            for entry in fs::read_dir(&dir)? {
                let p = entry?.path();
                if p.extension().is_some_and(|e| e == MOTION_EXTENSION) {
                    fs::remove_file(p)?;
                }
            }
        }
        fs::create_dir_all(&dir)?;
        Ok(dir)
    }
}

fn echo_config<C: Serialize>(dir: &Path, c: &C) -> Result<()> {
    fs::write(dir.join(CONFIG_ECHO), serde_json::to_string_pretty(c)? + "\n")?;
    Ok(())
}

fn style_id_of(name: &str) -> Result<usize> {
    toy::style_id(name).ok_or_else(|| Error::Config(format!("unknown style `{name}` (one of {})", toy::STYLES.join(", "))))
}

#[derive(Serialize)]
struct GenDataEcho {
    actions: usize,
    styles: Vec<String>,
    neutral: bool,
    clips_per_cell: usize,
    frames: usize,
    joints: usize,
    seed: u64,
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let styles: Vec<String> = if a.styles.iter().any(|s| s == "all") {
        toy::STYLES.iter().map(|s| s.to_string()).collect()
    } else {
        a.styles.clone()
    };
    let spec = toy::ToySpec {
        joints: a.joints,
        n_actions: a.actions,
        n_styles: 0,
        clips_per_cell: a.clips_per_cell,
        frames: a.frames,
        seed: a.seed,
        include_neutral: true,
    };
    spec.validate()?;
    let neutral = styles.is_empty() || !a.no_neutral;
    let mut cells: Vec<Option<usize>> = if neutral { vec![None] } else { Vec::new() };
    for s in &styles {
        cells.push(Some(style_id_of(s)?));
    }
    let dir = a.out.prepare("gen-data")?;
    let mut clips = Vec::new();
    for style in cells {
        for action in 0..a.actions {
            clips.extend(toy::generate_cell(a.joints, a.frames, action, style, a.clips_per_cell, a.seed)?);
        }
    }
    write_motion_dir(&dir, &clips)?;
    echo_config(
        &dir,
        &GenDataEcho {
            actions: a.actions,
            styles,
            neutral,
            clips_per_cell: a.clips_per_cell,
            frames: a.frames,
            joints: a.joints,
            seed: a.seed,
        },
    )?;
    info!("wrote {} clips to {}", clips.len(), dir.display());
    Ok(())
}

fn read_config_file(path: &Path) -> Result<TrainConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::MissingArtifact(format!("{}: {e}", path.display())))?;
    if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    } else {
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

impl TrainOverrides {
    fn resolve(&self, default_preset: &str) -> Result<TrainConfig> {
        let mut cfg = match (&self.config, &self.preset) {
            (Some(_), Some(_)) => return Err(Error::Config("--config and --preset are exclusive".into())),
            (Some(p), None) => read_config_file(p)?,
            (None, p) => TrainConfig::preset(p.as_deref().unwrap_or(default_preset))?,
        };
        if let Some(v) = self.steps {
            cfg.steps = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.diffusion_steps {
            cfg.diffusion_steps = v;
        }
        if let Some(v) = &self.schedule {
            cfg.schedule = v.parse::<ScheduleKind>()?;
        }
        if let Some(v) = self.checkpoint_every {
            cfg.checkpoint_every = v;
        }
        Ok(cfg)
    }
}

impl LoraOverrides {
    fn apply(&self, cfg: &mut TrainConfig) -> Result<()> {
        if let Some(v) = self.rank {
            cfg.lora.rank = v;
        }
        if let Some(v) = self.lambda {
            cfg.lambda = v;
        }
        if let Some(v) = &self.targets {
            cfg.lora.targets = TargetFlags::parse(v)?;
        }
        if let Some(v) = &self.prior_source {
            cfg.prior_source = v.parse::<PriorSource>()?;
        }
        if let Some(v) = self.prior_pool {
            cfg.prior_pool = v;
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct TrainBaseEcho<'a> {
    data: &'a Path,
    train: &'a TrainConfig,
    model: DenoiserConfig,
}

fn cmd_train_base(a: TrainBaseArgs) -> Result<()> {
    let mut cfg = a.train.resolve("desk-base")?;
    if let Some(v) = a.cond_dropout {
        cfg.cond_dropout = v;
    }
    if cfg.phase != Phase::Base {
        return Err(Error::Config("train-base needs a base-phase config".into()));
    }
    cfg.validate()?;
    let model = DenoiserConfig {
        d_model: a.d_model,
        layers: a.layers,
        heads: a.heads,
        ffn: a.ffn,
        base_steps: cfg.diffusion_steps,
        ..DenoiserConfig::default()
    };
    model.validate()?;
    let data = read_motion_dir(&a.data)?;
    let dir = a.out.prepare("train-base")?;
    echo_config(
        &dir,
        &TrainBaseEcho {
            data: &a.data,
            train: &cfg,
            model,
        },
    )?;
    let ckpt = dir.join("checkpoint");
    let (base, log) = train_base(
        &data,
        model,
        Vocab::toy(),
        &cfg,
        (cfg.checkpoint_every > 0).then_some(ckpt.as_path()),
    )?;
    base.save(&dir)?;
    log.write_jsonl(&dir.join(LOG_FILE))?;
    info!(
        "trained base model for {} steps ({:.1?}), saved to {}",
        cfg.steps,
        log.wall_time,
        dir.display()
    );
    Ok(())
}

/// Style names for a style set: explicit ones, else those in the headers.
fn styles_for(explicit: &[String], clips: &[LabeledClip]) -> Result<Vec<String>> {
    if !explicit.is_empty() {
        for s in explicit {
            style_id_of(s)?;
        }
        return Ok(explicit.to_vec());
    }
    let mut ids: Vec<usize> = clips.iter().filter_map(|c| c.style_id).collect();
    ids.sort_unstable();
    ids.dedup();
    if ids.is_empty() {
        return Err(Error::Config("no --style given and the clips carry no style labels".into()));
    }
    ids.iter()
        .map(|&i| {
            toy::style_name(i)
                .map(str::to_string)
                .ok_or_else(|| Error::Config(format!("unknown style id {i}")))
        })
        .collect()
}

fn read_prior(prior: Option<&Path>) -> Result<Vec<LabeledClip>> {
    match prior {
        Some(p) => read_motion_dir(p),
        None => Ok(Vec::new()),
    }
}

#[derive(Serialize)]
struct TrainLoraEcho<'a> {
    base: &'a Path,
    data: &'a Path,
    prior: Option<&'a Path>,
    train: &'a TrainConfig,
}

fn cmd_train_lora(a: TrainLoraArgs) -> Result<()> {
    let mut cfg = a.train.resolve("desk-lora")?;
    a.lora.apply(&mut cfg)?;
    if cfg.phase != Phase::Lora {
        return Err(Error::Config("train-lora needs a lora-phase config".into()));
    }
    let style_set = read_motion_dir(&a.data)?;
    cfg.styles = styles_for(&a.styles, &style_set)?;
    cfg.validate()?;
    let prior = read_prior(a.prior.as_deref())?;
    let mut base = BaseModel::load(&a.base)?;
    let dir = a.out.prepare("train-lora")?;
    echo_config(
        &dir,
        &TrainLoraEcho {
            base: &a.base,
            data: &a.data,
            prior: a.prior.as_deref(),
            train: &cfg,
        },
    )?;
    let (set, log) = train_lora(&mut base, &style_set, &prior, &cfg, Some(&dir.join(ADAPTER_FILE)))?;
    set.save(&dir.join(ADAPTER_FILE))?;
    log.write_jsonl(&dir.join(LOG_FILE))?;
    info!(
        "trained adapters for {} in {:.1?}, saved to {}",
        cfg.styles.join(", "),
        log.wall_time,
        dir.display()
    );
    Ok(())
}

fn adapter_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(ADAPTER_FILE)
    } else {
        p.to_path_buf()
    }
}

/// Expands a bare toy action name to its canonical prompt.
pub fn expand_prompt(prompt: &str) -> (String, Option<usize>) {
    let p = prompt.trim();
    match toy::action_id(p) {
        Some(a) => (toy::prompt(a, 1), Some(a)),
        None => (p.to_string(), None),
    }
}

#[derive(Serialize)]
struct GenerateEcho<'a> {
    base: &'a Path,
    adapter: Option<PathBuf>,
    prompt: &'a str,
    styles: &'a [String],
    n: usize,
    seed: u64,
    guidance: f64,
    frames: usize,
}

#[derive(Serialize)]
struct GenerateSummary {
    prompt: String,
    style_id: Option<usize>,
    files: Vec<String>,
}

fn generate(a: GenerateArgs, command: &str) -> Result<()> {
    if a.n == 0 {
        return Err(Error::Config("--n must be positive".into()));
    }
    let mut base = BaseModel::load(&a.base)?;
    let adapter = a.adapter.as_deref().map(adapter_path);
    let set = match &adapter {
        Some(p) => Some(AdapterSet::load(p, &mut base.denoiser)?),
        None if !a.styles.is_empty() => return Err(Error::MissingArtifact("style prompts need --adapter".into())),
        None => None,
    };
    let (content, action) = expand_prompt(&a.prompt);
    let prompt = if a.styles.is_empty() {
        content
    } else {
        styled_prompt(&content, &a.styles)
    };
    let style_id = match a.styles.as_slice() {
        [one] => toy::style_id(one),
        _ => None,
    };
    let opts = SampleOptions {
        frames: a.frames,
        guidance: a.guidance,
        seed: a.seed,
    };
    let prompts = vec![prompt.clone(); a.n];
    let motions = base.generate(set.as_ref(), &prompts, &opts)?;
    let clips = motions
        .into_iter()
        .map(|m| LabeledClip::new(m, action, style_id, prompt.clone()))
        .collect::<Result<Vec<_>>>()?;
    let dir = a.out.prepare(command)?;
    echo_config(
        &dir,
        &GenerateEcho {
            base: &a.base,
            adapter,
            prompt: &a.prompt,
            styles: &a.styles,
            n: a.n,
            seed: a.seed,
            guidance: a.guidance,
            frames: a.frames,
        },
    )?;
    let files = write_motion_dir(&dir, &clips)?;
    let summary = GenerateSummary {
        prompt,
        style_id,
        files: files
            .iter()
            .filter_map(|p| p.file_name().map(|f| f.to_string_lossy().into_owned()))
            .collect(),
    };
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    info!("wrote {} clips for \"{}\" to {}", a.n, summary.prompt, dir.display());
    Ok(())
}

/// Loads evaluators from `dir`, or trains and saves them on `real` when
/// allowed and the directory holds none.
pub fn load_or_train_evaluators(dir: &Path, real: &[LabeledClip], train: bool, seed: u64) -> Result<Evaluators> {
    match Evaluators::load(dir) {
        Err(Error::MissingArtifact(_)) if train => {}
        other => return other,
    }
    let labels: Vec<usize> = real.iter().map(style_label).collect();
    let trained = train_classifier(
        real,
        &labels,
        toy::STYLES.len() + 1,
        &ClassifierConfig {
            seed,
            ..Default::default()
        },
    )?;
    info!("style classifier hold-out accuracy {:.3}", trained.holdout_accuracy);
    let dual = train_dual_encoder(
        real,
        &Vocab::toy(),
        &DualConfig {
            seed,
            ..Default::default()
        },
    )?;
    let ev = Evaluators {
        classifier: trained.classifier,
        dual,
    };
    fs::create_dir_all(dir)?;
    ev.save(dir)?;
    Ok(ev)
}

fn write_report(dir: &Path, report: &EvalReport) -> Result<String> {
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(report)? + "\n")?;
    let table = EvalReport::table(std::slice::from_ref(report));
    fs::write(dir.join("report.txt"), &table)?;
    Ok(table)
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let clips = read_motion_dir(&a.data)?;
    let real = read_motion_dir(&a.real)?;
    let ev = load_or_train_evaluators(&a.evaluators.evaluators, &real, a.evaluators.train_evaluators, a.seed)?;
    let report = evaluate(&ev, &clips, &real, &a.label, a.seed)?;
    let dir = a.out.prepare("evaluate")?;
    print!("{}", write_report(&dir, &report)?);
    Ok(())
}

#[derive(Serialize)]
struct SweepRow {
    rank: usize,
    lambda: f64,
    sra_top5: f64,
    r_precision_top3: f64,
    fid: f64,
    mm_dist: f64,
    foot_skating: f64,
    diversity: f64,
}

#[derive(Serialize)]
struct SweepEcho<'a> {
    base: &'a Path,
    data: &'a Path,
    prior: Option<&'a Path>,
    real: &'a Path,
    style: &'a str,
    ranks: &'a [usize],
    lambdas: &'a [f64],
    n: usize,
    train: &'a TrainConfig,
}

fn sweep(a: SweepArgs) -> Result<()> {
    let mut cfg = a.train.resolve("desk-lora")?;
    if let Some(v) = &a.prior_source {
        cfg.prior_source = v.parse::<PriorSource>()?;
    }
    let style_id = style_id_of(&a.style)?;
    cfg.styles = vec![a.style.clone()];
    cfg.validate()?;
    if a.ranks.is_empty() || a.lambdas.is_empty() || a.n < 2 {
        return Err(Error::Config("sweep needs ranks, lambdas and --n >= 2".into()));
    }
    let style_set = read_motion_dir(&a.data)?;
    let prior = read_prior(a.prior.as_deref())?;
    let real = read_motion_dir(&a.real)?;
    let base0 = BaseModel::load(&a.base)?;
    let ev = load_or_train_evaluators(&a.evaluators.evaluators, &real, a.evaluators.train_evaluators, cfg.seed)?;

    let mut content: Vec<String> = prior.iter().chain(&style_set).map(|c| c.prompt.clone()).collect();
    content.sort();
    content.dedup();
    let prompts: Vec<String> = content.iter().cycle().take(a.n).map(|p| styled_prompt(p, &[&a.style])).collect();

    let dir = a.out.prepare("sweep")?;
    echo_config(
        &dir,
        &SweepEcho {
            base: &a.base,
            data: &a.data,
            prior: a.prior.as_deref(),
            real: &a.real,
            style: &a.style,
            ranks: &a.ranks,
            lambdas: &a.lambdas,
            n: a.n,
            train: &cfg,
        },
    )?;
    let mut csv = csv::Writer::from_path(dir.join("sweep.csv")).map_err(|e| Error::Io(e.into()))?;
    let mut reports = Vec::new();
    for &rank in &a.ranks {
        for &lambda in &a.lambdas {
            let mut cell = cfg.clone();
            cell.lora.rank = rank;
            cell.lambda = lambda;
            let mut base = base0.clone();
            let (set, _) = train_lora(&mut base, &style_set, &prior, &cell, None)?;
            let opts = SampleOptions {
                frames: style_set[0].motion.frames(),
                guidance: 2.5,
                seed: cfg.seed,
            };
            let motions = base.generate(Some(&set), &prompts, &opts)?;
            let clips = motions
                .into_iter()
                .zip(&prompts)
                .map(|(m, p)| LabeledClip::new(m, None, Some(style_id), p.clone()))
                .collect::<Result<Vec<_>>>()?;
            let label = format!("r={rank} lambda={lambda}");
            let report = evaluate(&ev, &clips, &real, &label, cfg.seed)?;
            info!("{label}: SRA@5 {:.3} FID {:.3}", report.sra_top5, report.fid);
            csv.serialize(SweepRow {
                rank,
                lambda,
                sra_top5: report.sra_top5,
                r_precision_top3: report.r_precision_top3,
                fid: report.fid,
                mm_dist: report.mm_dist,
                foot_skating: report.foot_skating,
                diversity: report.diversity,
            })
            .map_err(|e| Error::Io(e.into()))?;
            reports.push(report);
        }
    }
    csv.flush()?;
    let table = EvalReport::table(&reports);
    fs::write(dir.join("report.txt"), &table)?;
    print!("{table}");
    Ok(())
}
