//! Base diffusion training and adapter fine-tuning.
//!
//! Both phases minimize the x0 reconstruction loss
//! `|| x0 - G(x_t, t, c) ||^2` with `x_t` drawn by forward noising. Fine-tuning
//! combines a style term (prompt gets the `in <s> style` suffix) with a prior
//! term on neutral clips: `L = L_style + lambda * L_prior`.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{q_sample_with, standard_normal, DiffusionSchedule, SampleOptions, ScheduleKind, X0Predictor};
use crate::error::{Error, Result};
use crate::lora::{AdapterSet, LoraConfig};
use crate::model::{styled_prompt, BaseModel, Bound, Denoiser, DenoiserConfig, Vocab};
use crate::motion::{toy, FeatureStats, LabeledClip, EPS_NORM};
use crate::tensor::{rng, Adam, AdamConfig, Float, Graph, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    #[default]
    Base,
    Lora,
}

/// Where the neutral clips for the prior term come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorSource {
    #[default]
    Dataset,
    /// Sampled from the frozen base model with the style clips' prompts.
    Generated,
    /// Both pools concatenated.
    Mixed,
}

impl FromStr for PriorSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dataset" => Ok(PriorSource::Dataset),
            "generated" => Ok(PriorSource::Generated),
            "mixed" => Ok(PriorSource::Mixed),
            _ => Err(Error::Config(format!("unknown prior source `{s}` (dataset, generated, mixed)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub phase: Phase,
    pub steps: usize,
    /// Clips per step. In the fine-tuning phase the style batch is always the
    /// whole style set and this value is unused.
    pub batch_size: usize,
    pub lr: f64,
    /// Prior weight; only read in the fine-tuning phase.
    pub lambda: f64,
    /// Diffusion steps `T` used to draw training timesteps.
    pub diffusion_steps: usize,
    pub schedule: ScheduleKind,
    pub cond_dropout: f64,
    pub grad_clip: Option<f64>,
    pub seed: u64,
    pub prior_source: PriorSource,
    /// Clips sampled from the base model when the prior is generated.
    pub prior_pool: usize,
    pub styles: Vec<String>,
    pub lora: LoraConfig,
    /// Save a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            phase: Phase::Base,
            steps: 3000,
            batch_size: 8,
            lr: 1e-3,
            lambda: 1.0,
            diffusion_steps: 100,
            schedule: ScheduleKind::Cosine,
            cond_dropout: 0.1,
            grad_clip: None,
            seed: 0,
            prior_source: PriorSource::Dataset,
            prior_pool: 32,
            styles: Vec::new(),
            lora: LoraConfig::default(),
            checkpoint_every: 0,
        }
    }
}

pub const PRESETS: [&str; 5] = ["desk-base", "desk-lora", "paper-base", "paper-main", "paper-ablation-best"];

impl TrainConfig {
    /// Named configurations. `paper-*` are the full-scale settings;
    /// `desk-*` are sized for a single CPU core.
    pub fn preset(name: &str) -> Result<Self> {
        let lora = TrainConfig {
            phase: Phase::Lora,
            diffusion_steps: 1000,
            cond_dropout: 0.0,
            grad_clip: Some(1.0),
            ..TrainConfig::default()
        };
        Ok(match name {
            "desk-base" => TrainConfig::default(),
            "desk-lora" => TrainConfig {
                steps: 1000,
                lr: 1e-3,
                lambda: 0.25,
                ..lora
            },
            "paper-base" => TrainConfig {
                steps: 500_000,
                batch_size: 64,
                lr: 1e-4,
                ..TrainConfig::default()
            },
            "paper-main" => TrainConfig {
                steps: 4000,
                lr: 1e-5,
                lambda: 1.0,
                ..lora
            },
            "paper-ablation-best" => TrainConfig {
                steps: 4000,
                lr: 1e-5,
                lambda: 0.25,
                ..lora
            },
            _ => return Err(Error::Config(format!("unknown preset `{name}` ({})", PRESETS.join(", ")))),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.steps == 0 {
            return bad("steps must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.lr));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda {} must be finite and non-negative", self.lambda));
        }
        if !(0.0..1.0).contains(&self.cond_dropout) {
            return bad(format!("condition dropout {} must lie in [0, 1)", self.cond_dropout));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad(format!("gradient clip {c} must be positive"));
            }
        }
        if self.diffusion_steps == 0 {
            return bad("diffusion steps must be at least 1".into());
        }
        if self.phase == Phase::Lora {
            if self.lora.rank == 0 {
                return bad("adapter rank must be at least 1".into());
            }
            if self.prior_source != PriorSource::Dataset && self.prior_pool == 0 && self.lambda > 0.0 {
                return bad("a generated prior needs prior_pool > 0".into());
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub total: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub style: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior: Option<f64>,
    pub grad_norm: f64,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub checkpoint: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
    #[serde(skip)]
    pub wall_time: Duration,
}

impl TrainLog {
    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.total).collect()
    }

    pub fn checkpoints(&self) -> Vec<usize> {
        self.records.iter().filter(|r| r.checkpoint).map(|r| r.step).collect()
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut records: Vec<StepRecord> = Vec::new();
        for line in f.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let r: StepRecord = serde_json::from_str(&line)?;
            if records.last().is_some_and(|p| p.step >= r.step) {
                return Err(Error::format(path, format!("step {} out of order", r.step)));
            }
            records.push(r);
        }
        Ok(TrainLog {
            records,
            wall_time: Duration::ZERO,
        })
    }
}

/// One training pair in normalized units.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub x0: Tensor<f32>,
    pub prompt: Vec<usize>,
}

/// Stylized example: the clip's prompt with `in <style> style` appended.
pub fn style_example(
    clip: &LabeledClip,
    style: &str,
    vocab: &Vocab,
    lookup: &dyn Fn(&str) -> Option<usize>,
    stats: &FeatureStats,
) -> Result<Example> {
    let text = styled_prompt(&clip.prompt, &[style]);
    Ok(Example {
        x0: stats.normalize(&clip.motion)?,
        prompt: vocab.tokenize(&text, lookup)?,
    })
}

/// Neutral example with the clip's own prompt; stylized clips are refused.
pub fn prior_example(clip: &LabeledClip, vocab: &Vocab, stats: &FeatureStats) -> Result<Example> {
    if clip.style_id.is_some() || clip.prompt.contains('<') {
        return Err(Error::Contract(format!("prior term got a stylized clip ({:?})", clip.prompt)));
    }
    Ok(Example {
        x0: stats.normalize(&clip.motion)?,
        prompt: vocab.tokenize_plain(&clip.prompt)?,
    })
}

struct Noised {
    x0: Tensor<f32>,
    x_t: Tensor<f32>,
    t: Vec<usize>,
    prompts: Vec<Vec<usize>>,
}

/// Draws `t ~ U{1..T}` and `eps ~ N(0, I)` per example and noises the batch.
fn noise_batch(batch: &[&Example], sched: &DiffusionSchedule, r: &mut rng::Rng) -> Result<Noised> {
    let first = batch.first().ok_or_else(|| Error::Invalid("empty training batch".into()))?;
    let shape = first.x0.shape().to_vec();
    let mut x0 = Vec::with_capacity(batch.len() * first.x0.numel());
    let mut x_t = Vec::with_capacity(x0.capacity());
    let mut t = Vec::with_capacity(batch.len());
    for e in batch {
        if e.x0.shape() != shape {
            return Err(Error::shape("batch", &shape, e.x0.shape()));
        }
        let s = r.gen_range(1..=sched.steps());
        let eps = standard_normal(&shape, r);
        x_t.extend(q_sample_with(e.x0.data(), eps.data(), sched.alpha_bar(s))?);
        x0.extend_from_slice(e.x0.data());
        t.push(s);
    }
    let full = [batch.len(), shape[0], shape[1]];
    Ok(Noised {
        x0: Tensor::new(full, x0)?,
        x_t: Tensor::new(full, x_t)?,
        t,
        prompts: batch.iter().map(|e| e.prompt.clone()).collect(),
    })
}

fn mse(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("mse", a.shape(), b.shape()));
    }
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum();
    Ok(s / a.numel() as f64)
}

/// Reconstruction loss of `g` on one noised batch, without gradients.
pub fn simple_loss<G: X0Predictor + ?Sized>(g: &G, batch: &[&Example], sched: &DiffusionSchedule, r: &mut rng::Rng) -> Result<f64> {
    let n = noise_batch(batch, sched, r)?;
    let pred = g.predict_x0(&n.x_t, &n.t, sched.steps(), &n.prompts)?;
    mse(&pred, &n.x0)
}

#[allow(clippy::too_many_arguments)]
pub fn style_loss<G: X0Predictor + ?Sized>(
    g: &G,
    clip: &LabeledClip,
    style: &str,
    vocab: &Vocab,
    lookup: &dyn Fn(&str) -> Option<usize>,
    stats: &FeatureStats,
    sched: &DiffusionSchedule,
    r: &mut rng::Rng,
) -> Result<f64> {
    let e = style_example(clip, style, vocab, lookup, stats)?;
    simple_loss(g, &[&e], sched, r)
}

pub fn prior_loss<G: X0Predictor + ?Sized>(
    g: &G,
    clip: &LabeledClip,
    vocab: &Vocab,
    stats: &FeatureStats,
    sched: &DiffusionSchedule,
    r: &mut rng::Rng,
) -> Result<f64> {
    let e = prior_example(clip, vocab, stats)?;
    simple_loss(g, &[&e], sched, r)
}

fn graph_loss<T: Float>(model: &Denoiser<T>, g: &mut Graph<T>, b: &mut Bound<T>, n: &Noised, steps: usize) -> Result<Var> {
    let x = g.constant(n.x_t.cast());
    let pred = model.forward(g, b, x, &n.t, steps, &n.prompts)?;
    let target = g.constant(n.x0.cast());
    g.mse(pred, target)
}

/// Scales gradients down to global norm `max`; returns the norm before clipping.
fn clip_grads(store: &mut ParamStore<f32>, max: Option<f64>) -> f64 {
    let norm = store.grad_norm_sq().sqrt();
    if let Some(m) = max {
        if norm > m {
            store.scale_grads(m / norm);
        }
    }
    norm
}

fn finite_or_abort(step: usize, value: f64, what: &str, last_ckpt: Option<usize>) -> Result<()> {
    if value.is_finite() {
        return Ok(());
    }
    let keep = match last_ckpt {
        Some(s) => format!("last good checkpoint is from step {s}"),
        None => "no checkpoint was written".into(),
    };
    Err(Error::Numerical(format!("{what} became {value} at step {step}; {keep}")))
}

fn due(cfg: &TrainConfig, step: usize) -> bool {
    step == cfg.steps || (cfg.checkpoint_every > 0 && step.is_multiple_of(cfg.checkpoint_every))
}

/// Trains a fresh denoiser on neutral clips.
///
/// `model.base_steps` is replaced by `cfg.diffusion_steps`. With a
/// checkpoint directory the model is saved there on the configured cadence.
pub fn train_base(
    dataset: &[LabeledClip],
    model: DenoiserConfig,
    vocab: Vocab,
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<(BaseModel, TrainLog)> {
    cfg.validate()?;
    if cfg.phase != Phase::Base {
        return Err(Error::Config("train_base needs phase = base".into()));
    }
    if dataset.is_empty() {
        return Err(Error::Invalid("no training clips".into()));
    }
    let started = Instant::now();
    let stats = FeatureStats::fit(dataset, EPS_NORM)?;
    let config = DenoiserConfig {
        feature_dim: stats.dim(),
        base_steps: cfg.diffusion_steps,
        ..model
    };
    let mut denoiser = Denoiser::new(config, vocab, cfg.seed)?;
    denoiser.set_frozen(false);
    let examples = dataset
        .iter()
        .map(|c| prior_example(c, denoiser.vocab(), &stats))
        .collect::<Result<Vec<_>>>()?;
    let sched = DiffusionSchedule::new(cfg.diffusion_steps, cfg.schedule)?;
    let mut r = rng::stream(cfg.seed, "train-base");
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut log = TrainLog::default();
    let mut last_ckpt = None;
    let mut bundle = BaseModel {
        denoiser,
        stats,
        schedule: cfg.schedule,
    };

    for step in 1..=cfg.steps {
        let mut batch: Vec<Example> = (0..cfg.batch_size)
            .map(|_| examples[r.gen_range(0..examples.len())].clone())
            .collect();
        for e in &mut batch {
            if r.gen_bool(cfg.cond_dropout) {
                e.prompt.clear();
            }
        }
        let refs: Vec<&Example> = batch.iter().collect();
        let noised = noise_batch(&refs, &sched, &mut r)?;

        let model = &mut bundle.denoiser;
        let mut g = Graph::new();
        let mut b = Bound::new(model, true, None);
        let loss = graph_loss(model, &mut g, &mut b, &noised, sched.steps())?;
        let value = g.value(loss).data()[0] as f64;
        finite_or_abort(step, value, "loss", last_ckpt)?;
        g.backward(loss)?;
        let bindings = b.base.bindings();
        let params = model.params_mut();
        params.zero_grad();
        params.accumulate(&g, &bindings)?;
        let norm = clip_grads(params, cfg.grad_clip);
        finite_or_abort(step, norm, "gradient norm", last_ckpt)?;
        adam.step(params)?;

        let checkpoint = checkpoint_dir.is_some() && due(cfg, step);
        if let (true, Some(dir)) = (checkpoint, checkpoint_dir) {
            bundle.save(dir)?;
            last_ckpt = Some(step);
        }
        log.records.push(StepRecord {
            step,
            total: value,
            style: None,
            prior: None,
            grad_norm: norm,
            checkpoint,
        });
        if step % 100 == 0 {
            log::debug!("base step {step}: loss {value:.5}");
        }
    }
    log.wall_time = started.elapsed();
    Ok((bundle, log))
}

/// Token name for each style clip: a single configured style covers every
/// clip; several styles are matched to clips by toy style id.
fn assign_styles(style_set: &[LabeledClip], styles: &[String]) -> Result<Vec<(String, Option<usize>, Vec<usize>)>> {
    match styles {
        [] => Err(Error::Config("fine-tuning needs at least one style name".into())),
        [one] => {
            let ids: Vec<Option<usize>> = style_set.iter().map(|c| c.style_id).collect();
            let id = if ids.windows(2).all(|w| w[0] == w[1]) {
                ids.first().copied().flatten()
            } else {
                None
            };
            Ok(vec![(one.clone(), id, (0..style_set.len()).collect())])
        }
        many => {
            let mut out = Vec::new();
            for name in many {
                let id = toy::style_id(name)
                    .ok_or_else(|| Error::Config(format!("cannot match style `{name}` to clips; use toy style names")))?;
                let idx: Vec<usize> = (0..style_set.len()).filter(|&i| style_set[i].style_id == Some(id)).collect();
                if idx.is_empty() {
                    return Err(Error::Config(format!("no clips for style `{name}`")));
                }
                out.push((name.clone(), Some(id), idx));
            }
            Ok(out)
        }
    }
}

/// Neutral clips for the prior term according to `cfg.prior_source`.
pub fn prior_pool(base: &BaseModel, style_set: &[LabeledClip], prior_set: &[LabeledClip], cfg: &TrainConfig) -> Result<Vec<LabeledClip>> {
    let mut pool = Vec::new();
    if matches!(cfg.prior_source, PriorSource::Dataset | PriorSource::Mixed) {
        pool.extend(prior_set.iter().cloned());
    }
    if matches!(cfg.prior_source, PriorSource::Generated | PriorSource::Mixed) {
        let mut prompts: Vec<String> = style_set.iter().map(|c| c.prompt.clone()).collect();
        prompts.sort();
        prompts.dedup();
        if prompts.is_empty() {
            return Err(Error::Invalid("no style prompts to generate a prior from".into()));
        }
        let frames = style_set[0].motion.frames();
        let wanted: Vec<String> = prompts.iter().cycle().take(cfg.prior_pool).cloned().collect();
        let opts = SampleOptions {
            frames,
            guidance: 2.5,
            seed: rng::derive(cfg.seed, "prior-pool"),
        };
        let clips = base.generate(None, &wanted, &opts)?;
        for (m, p) in clips.into_iter().zip(wanted) {
            pool.push(LabeledClip::new(m, None, None, p)?);
        }
    }
    Ok(pool)
}

/// Fine-tunes fresh adapters (and one token per style) on a frozen base.
///
/// Every step uses the whole style set plus an equally sized prior batch;
/// with `lambda == 0` the prior term is skipped entirely.
pub fn train_lora(
    base: &mut BaseModel,
    style_set: &[LabeledClip],
    prior_set: &[LabeledClip],
    cfg: &TrainConfig,
    checkpoint: Option<&Path>,
) -> Result<(AdapterSet, TrainLog)> {
    cfg.validate()?;
    if cfg.phase != Phase::Lora {
        return Err(Error::Config("train_lora needs phase = lora".into()));
    }
    if style_set.is_empty() {
        return Err(Error::Invalid("no style clips".into()));
    }
    let started = Instant::now();
    let before = base.denoiser.params().checksum();
    let groups = assign_styles(style_set, &cfg.styles)?;
    let pool = if cfg.lambda > 0.0 {
        prior_pool(base, style_set, prior_set, cfg)?
    } else {
        Vec::new()
    };
    if cfg.lambda > 0.0 && pool.is_empty() {
        return Err(Error::MissingArtifact("the prior term needs neutral clips".into()));
    }

    let mut set = AdapterSet::attach(&mut base.denoiser, &cfg.lora, cfg.seed)?;
    let mut names = BTreeMap::new();
    for (name, id, idx) in &groups {
        set.new_style_token(&base.denoiser, name, *id, cfg.seed)?;
        for &i in idx {
            names.insert(i, name.clone());
        }
    }
    let (vocab, stats) = (base.denoiser.vocab(), &base.stats);
    let style_ex = names
        .iter()
        .map(|(&i, name)| style_example(&style_set[i], name, vocab, &set.style_lookup(), stats))
        .collect::<Result<Vec<_>>>()?;
    let prior_ex = pool.iter().map(|c| prior_example(c, vocab, stats)).collect::<Result<Vec<_>>>()?;

    let sched = DiffusionSchedule::new(cfg.diffusion_steps, cfg.schedule)?;
    let mut r_style = rng::stream(cfg.seed, "train-lora/style");
    let mut r_prior = rng::stream(cfg.seed, "train-lora/prior");
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut log = TrainLog::default();
    let mut last_ckpt = None;
    let style_refs: Vec<&Example> = style_ex.iter().collect();

    for step in 1..=cfg.steps {
        let style_batch = noise_batch(&style_refs, &sched, &mut r_style)?;
        let prior_batch = if cfg.lambda > 0.0 {
            let k = style_refs.len();
            let picked: Vec<&Example> = if prior_ex.len() >= k {
                prior_ex.choose_multiple(&mut r_prior, k).collect()
            } else {
                (0..k).map(|_| &prior_ex[r_prior.gen_range(0..prior_ex.len())]).collect()
            };
            Some(noise_batch(&picked, &sched, &mut r_prior)?)
        } else {
            None
        };

        let model = &base.denoiser;
        let mut g = Graph::new();
        let mut b = Bound::new(model, false, Some((&set, true)));
        let ls = graph_loss(model, &mut g, &mut b, &style_batch, sched.steps())?;
        let style_value = g.value(ls).data()[0] as f64;
        let (total, prior_value) = match &prior_batch {
            Some(pb) => {
                let lp = graph_loss(model, &mut g, &mut b, pb, sched.steps())?;
                let pv = g.value(lp).data()[0] as f64;
                let weighted = g.scale(lp, cfg.lambda);
                (g.add(ls, weighted)?, Some(pv))
            }
            None => (ls, None),
        };
        let value = g.value(total).data()[0] as f64;
        finite_or_abort(step, value, "loss", last_ckpt)?;
        g.backward(total)?;
        let bindings = b.adapter.as_ref().map(|(_, binder)| binder.bindings()).unwrap_or_default();
        let params = set.params_mut();
        params.zero_grad();
        params.accumulate(&g, &bindings)?;
        let norm = clip_grads(params, cfg.grad_clip);
        finite_or_abort(step, norm, "gradient norm", last_ckpt)?;
        adam.step(params)?;

        let checkpointed = checkpoint.is_some() && due(cfg, step);
        if let (true, Some(path)) = (checkpointed, checkpoint) {
            set.save(path)?;
            last_ckpt = Some(step);
        }
        log.records.push(StepRecord {
            step,
            total: value,
            style: Some(style_value),
            prior: prior_value,
            grad_norm: norm,
            checkpoint: checkpointed,
        });
        if step % 100 == 0 {
            log::debug!("lora step {step}: style {style_value:.5} prior {prior_value:?}");
        }
    }

    if base.denoiser.params().checksum() != before {
        return Err(Error::Contract("base weights changed during fine-tuning".into()));
    }
    log.wall_time = started.elapsed();
    Ok((set, log))
}
