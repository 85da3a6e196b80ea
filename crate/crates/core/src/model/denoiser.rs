use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::vocab::{Vocab, NULL, PAD};
use crate::diffusion::X0Predictor;
use crate::error::{Error, Result};
use crate::lora::AdapterSet;
use crate::tensor::{read_checkpoint, rng, write_checkpoint, Binder, CheckpointEntry, Float, Graph, ParamId, ParamStore, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;
const MASKED: f64 = -1e9;

pub const CHECKPOINT_FILE: &str = "denoiser.mdlc";
pub const CONFIG_FILE: &str = "denoiser.json";
pub const VOCAB_FILE: &str = "vocab.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub feature_dim: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    /// Diffusion steps the timestep embedding is calibrated to; timesteps of
    /// schedules with a different `T` are rescaled onto this range.
    pub base_steps: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            feature_dim: 59,
            d_model: 64,
            layers: 4,
            heads: 4,
            ffn: 256,
            base_steps: 100,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || !self.d_model.is_multiple_of(2) {
            return bad(format!("d_model must be even and positive, got {}", self.d_model));
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad(format!("d_model {} not divisible by {} heads", self.d_model, self.heads));
        }
        if self.layers == 0 || self.ffn == 0 || self.feature_dim == 0 || self.base_steps == 0 {
            return bad("layers, ffn, feature_dim and base_steps must be positive".into());
        }
        Ok(())
    }

    /// Exact number of scalar parameters for a vocabulary of `vocab` ids.
    ///
    /// Per layer: two attentions `2 * 4 (d^2 + d)`, FFN `2 d h + h + d`, three
    /// layer norms `6 d`. Outside the layers: input and output projections,
    /// the two-layer timestep MLP, the token table and the final layer norm.
    pub fn param_count(&self, vocab: usize) -> usize {
        let (d, h, f) = (self.d_model, self.ffn, self.feature_dim);
        let layer = 8 * (d * d + d) + 2 * d * h + h + d + 6 * d;
        self.layers * layer + (f * d + d) + (d * f + f) + 2 * (d * d + d) + vocab * d + 2 * d
    }
}

#[derive(Clone, Copy, Debug)]
struct AttnIds {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct LayerIds {
    ln: [(ParamId, ParamId); 3],
    self_attn: AttnIds,
    cross_attn: AttnIds,
    ff_w1: ParamId,
    ff_b1: ParamId,
    ff_w2: ParamId,
    ff_b2: ParamId,
}

#[derive(Clone, Debug)]
struct Ids {
    in_w: ParamId,
    in_b: ParamId,
    time_w1: ParamId,
    time_b1: ParamId,
    time_w2: ParamId,
    time_b2: ParamId,
    tok: ParamId,
    layers: Vec<LayerIds>,
    out_ln: (ParamId, ParamId),
    out_w: ParamId,
    out_b: ParamId,
}

impl Ids {
    fn resolve<T: Float>(p: &ParamStore<T>, layers: usize) -> Result<Self> {
        let id = |n: &str| p.id(n).ok_or_else(|| Error::Invalid(format!("missing parameter {n}")));
        let attn = |pre: &str| -> Result<AttnIds> {
            Ok(AttnIds {
                wq: id(&format!("{pre}.wq"))?,
                bq: id(&format!("{pre}.bq"))?,
                wk: id(&format!("{pre}.wk"))?,
                bk: id(&format!("{pre}.bk"))?,
                wv: id(&format!("{pre}.wv"))?,
                bv: id(&format!("{pre}.bv"))?,
                wo: id(&format!("{pre}.wo"))?,
                bo: id(&format!("{pre}.bo"))?,
            })
        };
        let layers = (0..layers)
            .map(|l| {
                let ln = |k: usize| -> Result<(ParamId, ParamId)> { Ok((id(&format!("l{l}.ln{k}.g"))?, id(&format!("l{l}.ln{k}.b"))?)) };
                Ok(LayerIds {
                    ln: [ln(1)?, ln(2)?, ln(3)?],
                    self_attn: attn(&format!("l{l}.self"))?,
                    cross_attn: attn(&format!("l{l}.cross"))?,
                    ff_w1: id(&format!("l{l}.ff.w1"))?,
                    ff_b1: id(&format!("l{l}.ff.b1"))?,
                    ff_w2: id(&format!("l{l}.ff.w2"))?,
                    ff_b2: id(&format!("l{l}.ff.b2"))?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Ids {
            in_w: id("in.w")?,
            in_b: id("in.b")?,
            time_w1: id("time.w1")?,
            time_b1: id("time.b1")?,
            time_w2: id("time.w2")?,
            time_b2: id("time.b2")?,
            tok: id("tok")?,
            layers,
            out_ln: (id("out.ln.g")?, id("out.ln.b")?),
            out_w: id("out.w")?,
            out_b: id("out.b")?,
        })
    }
}

/// The transformer-decoder denoiser: frames attend to each other, then to a
/// memory made of a timestep token followed by the prompt tokens.
#[derive(Clone, Debug)]
pub struct Denoiser<T: Float = f32> {
    config: DenoiserConfig,
    vocab: Vocab,
    params: ParamStore<T>,
    ids: Ids,
    /// Ablation hook: drop every attention output (self and cross).
    pub ablate_attention: bool,
}

/// Parameters of a forward pass placed on a graph: the base model and, when
/// present, an adapter set.
pub struct Bound<'a, T: Float> {
    pub base: Binder<'a, T>,
    pub adapter: Option<(&'a AdapterSet<T>, Binder<'a, T>)>,
}

impl<'a, T: Float> Bound<'a, T> {
    pub fn new(model: &'a Denoiser<T>, train_base: bool, adapter: Option<(&'a AdapterSet<T>, bool)>) -> Self {
        Bound {
            base: Binder::new(model.params(), train_base),
            adapter: adapter.map(|(a, train)| (a, Binder::new(a.params(), train))),
        }
    }
}

/// Sinusoidal embedding of a (possibly fractional) position.
pub fn sinusoid(pos: f64, d: usize) -> Vec<f64> {
    let half = d / 2;
    let mut out = vec![0.0; d];
    for i in 0..half {
        let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
        out[i] = (pos * freq).sin();
        out[i + half] = (pos * freq).cos();
    }
    out
}

fn positional<T: Float>(len: usize, d: usize) -> Tensor<T> {
    let data = (0..len).flat_map(|p| sinusoid(p as f64, d)).map(T::lit).collect();
    Tensor::new([len, d], data).expect("consistent shape")
}

impl Denoiser<f32> {
    pub fn new(config: DenoiserConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(seed, "denoiser-init");
        let (d, f, h) = (config.d_model, config.feature_dim, config.ffn);
        let mut p = ParamStore::new();
        let weight = |p: &mut ParamStore<f32>, name: String, out: usize, inp: usize, r: &mut rng::Rng| {
            p.insert(name, Tensor::randn([out, inp], 1.0 / (inp as f64).sqrt(), r));
        };
        let zeros = |p: &mut ParamStore<f32>, name: String, n: usize| {
            p.insert(name, Tensor::zeros([n]));
        };
        let norm = |p: &mut ParamStore<f32>, pre: String, n: usize| {
            p.insert(format!("{pre}.g"), Tensor::full([n], 1.0));
            p.insert(format!("{pre}.b"), Tensor::zeros([n]));
        };
        weight(&mut p, "in.w".into(), d, f, &mut r);
        zeros(&mut p, "in.b".into(), d);
        weight(&mut p, "time.w1".into(), d, d, &mut r);
        zeros(&mut p, "time.b1".into(), d);
        weight(&mut p, "time.w2".into(), d, d, &mut r);
        zeros(&mut p, "time.b2".into(), d);
        p.insert("tok", Tensor::randn([vocab.len(), d], 1.0, &mut r));
        for l in 0..config.layers {
            for (k, part) in ["self", "cross"].iter().enumerate() {
                norm(&mut p, format!("l{l}.ln{}", k + 1), d);
                for m in ["q", "k", "v", "o"] {
                    weight(&mut p, format!("l{l}.{part}.w{m}"), d, d, &mut r);
                    zeros(&mut p, format!("l{l}.{part}.b{m}"), d);
                }
            }
            norm(&mut p, format!("l{l}.ln3"), d);
            weight(&mut p, format!("l{l}.ff.w1"), h, d, &mut r);
            zeros(&mut p, format!("l{l}.ff.b1"), h);
            weight(&mut p, format!("l{l}.ff.w2"), d, h, &mut r);
            zeros(&mut p, format!("l{l}.ff.b2"), d);
        }
        norm(&mut p, "out.ln".into(), d);
        weight(&mut p, "out.w".into(), f, d, &mut r);
        zeros(&mut p, "out.b".into(), f);
        let ids = Ids::resolve(&p, config.layers)?;
        Ok(Denoiser {
            config,
            vocab,
            params: p,
            ids,
            ablate_attention: false,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let entries: Vec<CheckpointEntry> = self.params.iter().map(|(n, t)| CheckpointEntry::from_tensor(n, t)).collect();
        write_checkpoint(&dir.join(CHECKPOINT_FILE), &entries)?;
        std::fs::write(dir.join(CONFIG_FILE), serde_json::to_string_pretty(&self.config)?)?;
        self.vocab.save(&dir.join(VOCAB_FILE))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let ckpt = dir.join(CHECKPOINT_FILE);
        if !ckpt.is_file() {
            return Err(Error::MissingArtifact(format!("no model checkpoint at {}", ckpt.display())));
        }
        let config: DenoiserConfig = serde_json::from_str(&std::fs::read_to_string(dir.join(CONFIG_FILE))?)?;
        let vocab = Vocab::load(&dir.join(VOCAB_FILE))?;
        let mut model = Denoiser::new(config, vocab, 0)?;
        let entries = read_checkpoint(&ckpt)?;
        if entries.len() != model.params.len() {
            return Err(Error::format(
                &ckpt,
                format!("{} tensors, model expects {}", entries.len(), model.params.len()),
            ));
        }
        for e in entries {
            model
                .params
                .assign(&e.name, &e.shape, &e.data)
                .map_err(|err| Error::format(&ckpt, err.to_string()))?;
        }
        Ok(model)
    }
}

impl<T: Float> Denoiser<T> {
    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn token_table(&self) -> &Tensor<T> {
        self.params.get(self.ids.tok)
    }

    pub fn cast<U: Float>(&self) -> Denoiser<U> {
        Denoiser {
            config: self.config,
            vocab: self.vocab.clone(),
            params: self.params.cast(),
            ids: self.ids.clone(),
            ablate_attention: self.ablate_attention,
        }
    }

    /// Marks every base parameter (not) requiring grad.
    pub fn set_frozen(&mut self, frozen: bool) {
        self.params.tensors_mut().for_each(|t| t.set_requires_grad(!frozen));
    }

    /// Token embeddings plus positional encoding, `[M, d]`; an empty prompt
    /// becomes the single null token.
    pub fn embed_prompt(&self, prompt: &[usize], adapters: Option<&AdapterSet<T>>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let mut b = Bound::new(self, false, adapters.map(|a| (a, false)));
        let (e, _) = self.embed_tokens(&mut g, &mut b, &[prompt.to_vec()])?;
        let shape = g.shape(e)[1..].to_vec();
        Tensor::new(shape, g.data(e).to_vec())
    }

    /// `[B, M, d]` prompt embeddings and the `[B, M]` additive key mask.
    fn embed_tokens(&self, g: &mut Graph<T>, b: &mut Bound<T>, prompts: &[Vec<usize>]) -> Result<(Var, Tensor<T>)> {
        let d = self.config.d_model;
        let m = prompts.iter().map(|p| p.len().max(1)).max().unwrap_or(1);
        let mut ids = Vec::with_capacity(prompts.len() * m);
        let mut mask = Vec::with_capacity(prompts.len() * m);
        for p in prompts {
            let p: &[usize] = if p.is_empty() { &[NULL] } else { p };
            ids.extend_from_slice(p);
            ids.extend(std::iter::repeat_n(PAD, m - p.len()));
            mask.extend(std::iter::repeat_n(T::zero(), p.len()));
            mask.extend(std::iter::repeat_n(T::lit(MASKED), m - p.len()));
        }
        let table = b.base.var(g, self.ids.tok);
        let extra = match b.adapter.as_mut() {
            Some((set, binder)) => set.style_table().map(|(id, first)| (binder.var(g, id), first)),
            None => None,
        };
        let e = g.embedding(table, extra, &ids)?;
        let e = g.reshape(e, &[prompts.len(), m, d])?;
        let e = g.add_const(e, &positional(m, d))?;
        Ok((e, Tensor::new([prompts.len(), m], mask)?))
    }

    fn linear(&self, g: &mut Graph<T>, b: &mut Bound<T>, x: Var, w: ParamId, bias: ParamId) -> Result<Var> {
        let wv = b.base.var(g, w);
        let bv = b.base.var(g, bias);
        let mut y = g.matmul_nt(x, wv)?;
        y = g.add_row(y, bv)?;
        let target = self.params.name(w);
        if let Some((set, binder)) = b.adapter.as_mut() {
            if let Some((a, bb)) = set.lora_for(target) {
                let (a, bb) = (binder.var(g, a), binder.var(g, bb));
                let xb = g.matmul_nt(x, bb)?;
                let delta = g.matmul_nt(xb, a)?;
                let delta = g.scale(delta, set.scale());
                y = g.add(y, delta)?;
            }
        }
        Ok(y)
    }

    fn attention(&self, g: &mut Graph<T>, b: &mut Bound<T>, q_in: Var, kv_in: Var, ids: &AttnIds, mask: Option<&Tensor<T>>) -> Result<Var> {
        let (bs, nq, d) = {
            let s = g.shape(q_in);
            (s[0], s[1], s[2])
        };
        let nk = g.shape(kv_in)[1];
        let (h, dh) = (self.config.heads, d / self.config.heads);
        let split = |g: &mut Graph<T>, v: Var, n: usize| -> Result<Var> {
            let v = g.reshape(v, &[bs, n, h, dh])?;
            g.permute(v, &[0, 2, 1, 3])
        };
        let q = self.linear(g, b, q_in, ids.wq, ids.bq)?;
        let k = self.linear(g, b, kv_in, ids.wk, ids.bk)?;
        let v = self.linear(g, b, kv_in, ids.wv, ids.bv)?;
        let (q, k, v) = (split(g, q, nq)?, split(g, k, nk)?, split(g, v, nk)?);
        let s = g.matmul_nt(q, k)?;
        let mut s = g.scale(s, 1.0 / (dh as f64).sqrt());
        if let Some(m) = mask {
            s = g.key_mask(s, m)?;
        }
        let a = g.softmax(s, 3)?;
        let o = g.matmul(a, v)?;
        let o = g.permute(o, &[0, 2, 1, 3])?;
        let o = g.reshape(o, &[bs, nq, d])?;
        self.linear(g, b, o, ids.wo, ids.bo)
    }

    fn norm(&self, g: &mut Graph<T>, b: &mut Bound<T>, x: Var, (gamma, beta): (ParamId, ParamId)) -> Result<Var> {
        let gv = b.base.var(g, gamma);
        let bv = b.base.var(g, beta);
        g.layer_norm(x, gv, bv, LN_EPS)
    }

    /// Records `x0_hat = G(x_t, t, prompt)` on `g`.
    ///
    /// `x_t` is `[B, N, F]`; `t[b]` is a timestep of a `steps`-step schedule.
    pub fn forward(&self, g: &mut Graph<T>, b: &mut Bound<T>, x_t: Var, t: &[usize], steps: usize, prompts: &[Vec<usize>]) -> Result<Var> {
        let shape = g.shape(x_t).to_vec();
        let (f, d) = (self.config.feature_dim, self.config.d_model);
        if shape.len() != 3 || shape[2] != f {
            return Err(Error::shape("denoise", &shape, &[0, 0, f]));
        }
        let (bs, n) = (shape[0], shape[1]);
        if t.len() != bs || prompts.len() != bs {
            return Err(Error::Invalid(format!(
                "batch of {bs} with {} timesteps and {} prompts",
                t.len(),
                prompts.len()
            )));
        }
        if steps == 0 || t.iter().any(|&s| s > steps) {
            return Err(Error::Invalid(format!("timesteps {t:?} outside [0, {steps}]")));
        }

        let mut h = self.linear(g, b, x_t, self.ids.in_w, self.ids.in_b)?;
        h = g.add_const(h, &positional(n, d))?;

        let scale = self.config.base_steps as f64 / steps as f64;
        let temb: Vec<T> = t.iter().flat_map(|&s| sinusoid(s as f64 * scale, d)).map(T::lit).collect();
        let tv = g.constant(Tensor::new([bs, d], temb)?);
        let th = self.linear(g, b, tv, self.ids.time_w1, self.ids.time_b1)?;
        let th = g.silu(th);
        let th = self.linear(g, b, th, self.ids.time_w2, self.ids.time_b2)?;
        let th = g.reshape(th, &[bs, 1, d])?;

        let (tokens, tok_mask) = self.embed_tokens(g, b, prompts)?;
        let memory = g.concat(&[th, tokens], 1)?;
        let m = tok_mask.shape()[1];
        let mut mask = Vec::with_capacity(bs * (m + 1));
        for row in tok_mask.data().chunks_exact(m) {
            mask.push(T::zero());
            mask.extend_from_slice(row);
        }
        let mask = Tensor::new([bs, m + 1], mask)?;

        for layer in &self.ids.layers {
            if !self.ablate_attention {
                let a = self.norm(g, b, h, layer.ln[0])?;
                let a = self.attention(g, b, a, a, &layer.self_attn, None)?;
                h = g.add(h, a)?;
                let a = self.norm(g, b, h, layer.ln[1])?;
                let a = self.attention(g, b, a, memory, &layer.cross_attn, Some(&mask))?;
                h = g.add(h, a)?;
            }
            let a = self.norm(g, b, h, layer.ln[2])?;
            let a = self.linear(g, b, a, layer.ff_w1, layer.ff_b1)?;
            let a = g.gelu(a);
            let a = self.linear(g, b, a, layer.ff_w2, layer.ff_b2)?;
            h = g.add(h, a)?;
        }
        let h = self.norm(g, b, h, self.ids.out_ln)?;
        self.linear(g, b, h, self.ids.out_w, self.ids.out_b)
    }

    /// Forward pass without gradients.
    pub fn predict(
        &self,
        adapters: Option<&AdapterSet<T>>,
        x_t: &Tensor<T>,
        t: &[usize],
        steps: usize,
        prompts: &[Vec<usize>],
    ) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let mut b = Bound::new(self, false, adapters.map(|a| (a, false)));
        let x = g.constant(x_t.clone());
        let y = self.forward(&mut g, &mut b, x, t, steps, prompts)?;
        Ok(g.value(y).clone())
    }

    /// Random prompt of `len` word ids, for tests and smoke runs.
    pub fn random_prompt(&self, len: usize, r: &mut rng::Rng) -> Vec<usize> {
        let ids = self.vocab.word_ids();
        (0..len).map(|_| r.gen_range(ids.clone())).collect()
    }
}

impl X0Predictor for Denoiser<f32> {
    fn predict_x0(&self, x_t: &Tensor<f32>, t: &[usize], steps: usize, prompts: &[Vec<usize>]) -> Result<Tensor<f32>> {
        self.predict(None, x_t, t, steps, prompts)
    }
}
