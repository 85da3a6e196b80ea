//! Low-rank adapters on frozen denoiser matrices, plus trainable style tokens.
//!
//! An adapter on a weight `W0` (`[d_out, d_in]`, applied as `x W0^T`) adds
//! `scale * (x B^T) A^T`, i.e. the update `dW = scale * A B` with
//! `A: [d_out, r]` and `B: [r, d_in]`.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffusion::X0Predictor;
use crate::error::{Error, Result};
use crate::model::Denoiser;
use crate::tensor::{gemm, read_checkpoint, rng, write_checkpoint, CheckpointEntry, Float, ParamId, ParamStore, Tensor};

const STYLE_TABLE: &str = "style_emb";
const STYLE_INIT_STD: f64 = 0.01;

/// Which matrices of each layer get an adapter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetFlags {
    pub q: bool,
    pub k: bool,
    pub v: bool,
    pub o: bool,
    pub ffn: bool,
}

impl Default for TargetFlags {
    fn default() -> Self {
        TargetFlags {
            q: true,
            k: true,
            v: true,
            o: false,
            ffn: false,
        }
    }
}

impl TargetFlags {
    pub const NONE: TargetFlags = TargetFlags {
        q: false,
        k: false,
        v: false,
        o: false,
        ffn: false,
    };

    /// Parses a comma list such as `q,k,v` or `q,ffn`.
    pub fn parse(s: &str) -> Result<Self> {
        let mut f = TargetFlags::NONE;
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part.to_ascii_lowercase().as_str() {
                "q" | "wq" => f.q = true,
                "k" | "wk" => f.k = true,
                "v" | "wv" => f.v = true,
                "o" | "wo" => f.o = true,
                "ffn" => f.ffn = true,
                other => return Err(Error::Config(format!("unknown adapter target `{other}` (q,k,v,o,ffn)"))),
            }
        }
        Ok(f)
    }

    pub fn names(&self) -> Vec<&'static str> {
        [(self.q, "q"), (self.k, "k"), (self.v, "v"), (self.o, "o"), (self.ffn, "ffn")]
            .into_iter()
            .filter_map(|(on, n)| on.then_some(n))
            .collect()
    }

    pub fn is_empty(&self) -> bool {
        self.names().is_empty()
    }

    /// Base parameter names selected in a model with `layers` layers.
    pub fn matrices(&self, layers: usize) -> Vec<String> {
        let mut out = Vec::new();
        for l in 0..layers {
            for part in ["self", "cross"] {
                for (on, m) in [(self.q, "q"), (self.k, "k"), (self.v, "v"), (self.o, "o")] {
                    if on {
                        out.push(format!("l{l}.{part}.w{m}"));
                    }
                }
            }
            if self.ffn {
                out.push(format!("l{l}.ff.w1"));
                out.push(format!("l{l}.ff.w2"));
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub scale: f64,
    pub targets: TargetFlags,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 5,
            scale: 1.0,
            targets: TargetFlags::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub target: String,
    pub a: ParamId,
    pub b: ParamId,
    pub d_out: usize,
    pub d_in: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StyleToken {
    pub name: String,
    pub token_id: usize,
    pub style_id: Option<usize>,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    rank: usize,
    scale: f64,
    targets: Vec<String>,
    style_tokens: Vec<StyleToken>,
}

/// All adapters of one fine-tuning run and the style tokens it owns.
#[derive(Clone, Debug)]
pub struct AdapterSet<T: Float = f32> {
    config: LoraConfig,
    params: ParamStore<T>,
    adapters: Vec<LoraAdapter>,
    index: HashMap<String, usize>,
    style_table: ParamId,
    first_slot: usize,
    style_tokens: Vec<StyleToken>,
    merged: bool,
}

/// `x W0^T + scale (x B^T) A^T` for row vectors `x: [n, d_in]`.
pub fn apply<T: Float>(w0: &Tensor<T>, a: &Tensor<T>, b: &Tensor<T>, scale: f64, x: &Tensor<T>) -> Result<Tensor<T>> {
    let (d_out, d_in) = (w0.shape()[0], w0.shape()[1]);
    let r = b.shape()[0];
    if a.shape() != [d_out, r] || b.shape() != [r, d_in] || x.rank() != 2 || x.shape()[1] != d_in {
        return Err(Error::shape("lora_apply", w0.shape(), x.shape()));
    }
    let n = x.shape()[0];
    let mut y = vec![T::zero(); n * d_out];
    gemm(n, d_in, d_out, x.data(), false, w0.data(), true, &mut y, false);
    let mut xb = vec![T::zero(); n * r];
    gemm(n, d_in, r, x.data(), false, b.data(), true, &mut xb, false);
    let s = T::lit(scale);
    xb.iter_mut().for_each(|v| *v *= s);
    gemm(n, r, d_out, &xb, false, a.data(), true, &mut y, true);
    Tensor::new([n, d_out], y)
}

/// Number of singular values above `rel_tol * sigma_max`.
pub fn numerical_rank<T: Float>(m: &Tensor<T>, rel_tol: f64) -> usize {
    let (r, c) = (m.shape()[0], m.shape()[1]);
    let mat = nalgebra::DMatrix::from_row_iterator(r, c, m.data().iter().map(|v| v.as_f64()));
    let sv = mat.singular_values();
    let max = sv.iter().copied().fold(0.0, f64::max);
    if max == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * max).count()
}

impl AdapterSet<f32> {
    /// One adapter per selected matrix per layer; freezes the base model.
    pub fn attach(model: &mut Denoiser<f32>, config: &LoraConfig, seed: u64) -> Result<Self> {
        if config.rank == 0 {
            return Err(Error::Config("adapter rank must be at least 1".into()));
        }
        if config.targets.is_empty() {
            return Err(Error::Config("no adapter targets selected".into()));
        }
        model.set_frozen(true);
        let mut r = rng::stream(seed, "lora-init");
        let mut params = ParamStore::new();
        let mut adapters = Vec::new();
        for target in config.targets.matrices(model.config().layers) {
            let w = model
                .params()
                .by_name(&target)
                .ok_or_else(|| Error::Config(format!("model has no matrix {target}")))?;
            let (d_out, d_in) = (w.shape()[0], w.shape()[1]);
            if 4 * config.rank > d_out.min(d_in) {
                log::warn!("rank {} is not small relative to {target} ({d_out}x{d_in})", config.rank);
            }
            let a = params.insert(
                format!("{target}.lora_a"),
                Tensor::randn([d_out, config.rank], (1.0 / config.rank as f64).sqrt(), &mut r),
            );
            let b = params.insert(format!("{target}.lora_b"), Tensor::zeros([config.rank, d_in]));
            adapters.push(LoraAdapter { target, a, b, d_out, d_in });
        }
        let slots = model.vocab().style_slots();
        let style_table = params.insert(STYLE_TABLE, Tensor::zeros([slots.len(), model.config().d_model]));
        let index = adapters.iter().enumerate().map(|(i, a)| (a.target.clone(), i)).collect();
        Ok(AdapterSet {
            config: *config,
            params,
            adapters,
            index,
            style_table,
            first_slot: slots.start,
            style_tokens: Vec::new(),
            merged: false,
        })
    }

    /// Reserves the next style slot for `name`, initialized to the mean word
    /// embedding plus `N(0, 0.01^2)` noise.
    pub fn new_style_token(&mut self, model: &Denoiser<f32>, name: &str, style_id: Option<usize>, seed: u64) -> Result<usize> {
        if name.is_empty() || name.contains(|c: char| c.is_whitespace() || c == '<' || c == '>') {
            return Err(Error::Config(format!("invalid style token name {name:?}")));
        }
        if self.token_id(name).is_some() {
            return Err(Error::Config(format!("style token <{name}> already exists")));
        }
        let k = self.style_tokens.len();
        let d = model.config().d_model;
        if k >= self.params.get(self.style_table).shape()[0] {
            return Err(Error::Config("all style token slots are in use".into()));
        }
        let table = model.token_table();
        let words = model.vocab().word_ids();
        let mut mean = vec![0.0f64; d];
        for id in words.clone() {
            for (m, v) in mean.iter_mut().zip(&table.data()[id * d..(id + 1) * d]) {
                *m += *v as f64;
            }
        }
        let noise = Normal::new(0.0, STYLE_INIT_STD).expect("valid std");
        let mut r = rng::stream(seed, &format!("style-token/{name}"));
        let row: Vec<f32> = mean
            .iter()
            .map(|m| (m / words.len() as f64 + noise.sample(&mut r)) as f32)
            .collect();
        self.params.get_mut(self.style_table).data_mut()[k * d..(k + 1) * d].copy_from_slice(&row);
        let token_id = self.first_slot + k;
        self.style_tokens.push(StyleToken {
            name: name.to_string(),
            token_id,
            style_id,
        });
        Ok(token_id)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let entries: Vec<CheckpointEntry> = self.params.iter().map(|(n, t)| CheckpointEntry::from_tensor(n, t)).collect();
        write_checkpoint(path, &entries)?;
        let side = Sidecar {
            rank: self.config.rank,
            scale: self.config.scale,
            targets: self.config.targets.names().into_iter().map(String::from).collect(),
            style_tokens: self.style_tokens.clone(),
        };
        std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&side)?)?;
        Ok(())
    }

    /// Loads an adapter file against `model`, checking every shape.
    pub fn load(path: &Path, model: &mut Denoiser<f32>) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingArtifact(format!("no adapter file at {}", path.display())));
        }
        let side: Sidecar = serde_json::from_str(&std::fs::read_to_string(sidecar_path(path))?)?;
        let config = LoraConfig {
            rank: side.rank,
            scale: side.scale,
            targets: TargetFlags::parse(&side.targets.join(","))?,
        };
        let mut set = AdapterSet::attach(model, &config, 0)?;
        let entries = read_checkpoint(path)?;
        if entries.len() != set.params.len() {
            return Err(Error::format(
                path,
                format!("{} tensors, expected {}", entries.len(), set.params.len()),
            ));
        }
        for e in entries {
            let id = set
                .params
                .id(&e.name)
                .ok_or_else(|| Error::format(path, format!("unexpected tensor {}", e.name)))?;
            let want = set.params.get(id).shape().to_vec();
            if want != e.shape {
                return Err(Error::Shape {
                    op: "load_adapter",
                    lhs: want,
                    rhs: e.shape,
                });
            }
            set.params.get_mut(id).data_mut().copy_from_slice(&e.data);
        }
        let slots = set.params.get(set.style_table).shape()[0];
        for (k, tok) in side.style_tokens.iter().enumerate() {
            if tok.token_id != set.first_slot + k || k >= slots {
                return Err(Error::format(
                    path,
                    format!("style token <{}> has unexpected id {}", tok.name, tok.token_id),
                ));
            }
        }
        set.style_tokens = side.style_tokens;
        Ok(set)
    }
}

fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

impl<T: Float> AdapterSet<T> {
    pub fn config(&self) -> &LoraConfig {
        &self.config
    }

    pub fn rank(&self) -> usize {
        self.config.rank
    }

    pub fn scale(&self) -> f64 {
        self.config.scale
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn adapters(&self) -> &[LoraAdapter] {
        &self.adapters
    }

    pub fn is_merged(&self) -> bool {
        self.merged
    }

    pub fn style_tokens(&self) -> &[StyleToken] {
        &self.style_tokens
    }

    pub fn token_id(&self, name: &str) -> Option<usize> {
        self.style_tokens.iter().find(|t| t.name == name).map(|t| t.token_id)
    }

    /// Resolver for `<name>` tokens in prompts.
    pub fn style_lookup(&self) -> impl Fn(&str) -> Option<usize> + '_ {
        move |name| self.token_id(name)
    }

    /// Style-token rows override the base table for ids `first..first + K`.
    pub fn style_table(&self) -> Option<(ParamId, usize)> {
        Some((self.style_table, self.first_slot))
    }

    pub fn style_embedding(&self, name: &str) -> Option<&[T]> {
        let id = self.token_id(name)?;
        let t = self.params.get(self.style_table);
        let d = t.shape()[1];
        let k = id - self.first_slot;
        Some(&t.data()[k * d..(k + 1) * d])
    }

    /// Factors wrapping `target`, unless they are merged into the base.
    pub fn lora_for(&self, target: &str) -> Option<(ParamId, ParamId)> {
        if self.merged {
            return None;
        }
        self.index.get(target).map(|&i| (self.adapters[i].a, self.adapters[i].b))
    }

    /// Trainable scalars in the low-rank factors (style embeddings excluded).
    pub fn factor_params(&self) -> usize {
        self.adapters.iter().map(|a| self.config.rank * (a.d_out + a.d_in)).sum()
    }

    /// Materialized `scale * A B` for one adapter.
    pub fn delta(&self, adapter: &LoraAdapter) -> Tensor<T> {
        let (a, b) = (self.params.get(adapter.a), self.params.get(adapter.b));
        let mut out = vec![T::zero(); adapter.d_out * adapter.d_in];
        gemm(
            adapter.d_out,
            self.config.rank,
            adapter.d_in,
            a.data(),
            false,
            b.data(),
            false,
            &mut out,
            false,
        );
        let s = T::lit(self.config.scale);
        out.iter_mut().for_each(|v| *v *= s);
        Tensor::new([adapter.d_out, adapter.d_in], out).expect("consistent shape")
    }

    fn bake(&self, model: &mut Denoiser<T>, sign: f64) -> Result<()> {
        for ad in &self.adapters {
            let delta = self.delta(ad);
            let id = model
                .params()
                .id(&ad.target)
                .ok_or_else(|| Error::Invalid(format!("model has no matrix {}", ad.target)))?;
            let w = model.params_mut().get_mut(id);
            if w.shape() != delta.shape() {
                return Err(Error::shape("merge", w.shape(), delta.shape()));
            }
            let s = T::lit(sign);
            w.data_mut().iter_mut().zip(delta.data()).for_each(|(w, d)| *w += s * *d);
        }
        Ok(())
    }

    /// Adds every `dW` into the base weights; the adapter path is then skipped.
    pub fn merge_into(&mut self, model: &mut Denoiser<T>) -> Result<()> {
        if self.merged {
            return Err(Error::Contract("adapters are already merged".into()));
        }
        self.bake(model, 1.0)?;
        self.merged = true;
        Ok(())
    }

    pub fn unmerge_from(&mut self, model: &mut Denoiser<T>) -> Result<()> {
        if !self.merged {
            return Err(Error::Contract("adapters are not merged".into()));
        }
        self.bake(model, -1.0)?;
        self.merged = false;
        Ok(())
    }

    pub fn cast<U: Float>(&self) -> AdapterSet<U> {
        AdapterSet {
            config: self.config,
            params: self.params.cast(),
            adapters: self.adapters.clone(),
            index: self.index.clone(),
            style_table: self.style_table,
            first_slot: self.first_slot,
            style_tokens: self.style_tokens.clone(),
            merged: self.merged,
        }
    }
}

/// A base model viewed through an adapter set.
#[derive(Clone, Copy)]
pub struct Adapted<'a> {
    pub model: &'a Denoiser<f32>,
    pub adapters: &'a AdapterSet<f32>,
}

impl X0Predictor for Adapted<'_> {
    fn predict_x0(&self, x_t: &Tensor<f32>, t: &[usize], steps: usize, prompts: &[Vec<usize>]) -> Result<Tensor<f32>> {
        self.model.predict(Some(self.adapters), x_t, t, steps, prompts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::standard_normal;
    use crate::model::{DenoiserConfig, Vocab};

    fn model() -> Denoiser {
        let cfg = DenoiserConfig {
            feature_dim: 11,
            d_model: 16,
            layers: 2,
            heads: 2,
            ffn: 32,
            base_steps: 100,
        };
        Denoiser::new(cfg, Vocab::toy(), 5).unwrap()
    }

    #[test]
    fn target_parsing() {
        assert_eq!(TargetFlags::parse("q,k,v").unwrap(), TargetFlags::default());
        assert!(TargetFlags::parse("q,z").is_err());
        assert_eq!(TargetFlags::default().matrices(4).len(), 24);
        let all = TargetFlags::parse("q,k,v,o,ffn").unwrap();
        assert_eq!(all.matrices(1).len(), 10);
    }

    #[test]
    fn apply_examples() {
        let mut r = rng::seeded(0);
        let w0 = Tensor::<f64>::randn([8, 8], 1.0, &mut r);
        let a = Tensor::<f64>::randn([8, 2], 1.0, &mut r);
        let x = Tensor::<f64>::randn([3, 8], 1.0, &mut r);
        let zero_b = Tensor::zeros([2, 8]);
        assert_eq!(
            apply(&w0, &a, &zero_b, 1.0, &x).unwrap(),
            x.matmul(&w0.transpose2().unwrap()).unwrap()
        );

        // W0 = 0, A = e_1 column, B = e_4 row: y = s * x_4 * e_1
        let mut a1 = Tensor::<f64>::zeros([8, 1]);
        a1.data_mut()[1] = 1.0;
        let mut b1 = Tensor::<f64>::zeros([1, 8]);
        b1.data_mut()[4] = 1.0;
        let y = apply(&Tensor::zeros([8, 8]), &a1, &b1, 0.5, &x).unwrap();
        for n in 0..3 {
            for i in 0..8 {
                let want = if i == 1 { 0.5 * x.at2(n, 4) } else { 0.0 };
                assert_eq!(y.at2(n, i), want);
            }
        }

        let b = Tensor::<f64>::randn([2, 8], 1.0, &mut r);
        let dw = a.matmul(&b).unwrap();
        let mut w = w0.clone();
        w.data_mut().iter_mut().zip(dw.data()).for_each(|(w, d)| *w += d);
        let want = x.matmul(&w.transpose2().unwrap()).unwrap();
        let got = apply(&w0, &a, &b, 1.0, &x).unwrap();
        for (u, v) in want.data().iter().zip(got.data()) {
            assert!((u - v).abs() < 1e-5);
        }
    }

    #[test]
    fn fresh_adapters_are_a_no_op() {
        let mut m = model();
        let mut r = rng::seeded(1);
        let x = standard_normal(&[2, 5, 11], &mut r);
        let p = vec![m.random_prompt(3, &mut r), vec![]];
        let before = m.predict(None, &x, &[5, 60], 100, &p).unwrap();
        let set = AdapterSet::attach(&mut m, &LoraConfig::default(), 2).unwrap();
        assert_eq!(set.adapters().len(), 2 * 2 * 3);
        let after = m.predict(Some(&set), &x, &[5, 60], 100, &p).unwrap();
        assert_eq!(before, after);
        assert!(m.params().iter().all(|(_, t)| !t.requires_grad()));
    }

    #[test]
    fn merge_round_trip() {
        let mut m = model();
        let mut set = AdapterSet::attach(
            &mut m,
            &LoraConfig {
                rank: 2,
                ..Default::default()
            },
            3,
        )
        .unwrap();
        let original = m.params().clone();
        // all-zero B: merging changes nothing
        set.merge_into(&mut m).unwrap();
        assert_eq!(m.params().checksum(), original.checksum());
        assert!(set.merge_into(&mut m).is_err());
        set.unmerge_from(&mut m).unwrap();
        assert!(set.unmerge_from(&mut m).is_err());

        let mut r = rng::seeded(4);
        for t in set.params_mut().tensors_mut() {
            let n = t.numel();
            t.data_mut().copy_from_slice(&Tensor::<f32>::randn([n], 0.3, &mut r).into_data());
        }
        for ad in set.adapters() {
            assert!(numerical_rank(&set.delta(ad), 1e-6) <= 2);
        }
        let x = standard_normal(&[1, 5, 11], &mut r);
        let p = vec![m.random_prompt(4, &mut r)];
        let adapter_path = m.predict(Some(&set), &x, &[30], 100, &p).unwrap();
        set.merge_into(&mut m).unwrap();
        let merged = m.predict(Some(&set), &x, &[30], 100, &p).unwrap();
        for (u, v) in adapter_path.data().iter().zip(merged.data()) {
            assert!((u - v).abs() < 1e-5);
        }
        set.unmerge_from(&mut m).unwrap();
        for ((_, a), (_, b)) in m.params().iter().zip(original.iter()) {
            for (u, v) in a.data().iter().zip(b.data()) {
                assert!((u - v).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn style_tokens() {
        let mut m = model();
        let mut set = AdapterSet::attach(&mut m, &LoraConfig::default(), 0).unwrap();
        let a = set.new_style_token(&m, "bounce", Some(1), 0).unwrap();
        let b = set.new_style_token(&m, "lean", Some(2), 0).unwrap();
        assert_ne!(a, b);
        assert!(set.new_style_token(&m, "bounce", None, 0).is_err());
        let emb = m.embed_prompt(&[a], Some(&set)).unwrap();
        let pe = crate::model::sinusoid(0.0, 16);
        for (i, v) in set.style_embedding("bounce").unwrap().iter().enumerate() {
            assert!((emb.data()[i] - (v + pe[i] as f32)).abs() < 1e-6);
        }
        // close to the mean word embedding
        let d = 16;
        let words = m.vocab().word_ids();
        let mean: Vec<f32> = (0..d)
            .map(|j| words.clone().map(|w| m.token_table().at2(w, j)).sum::<f32>() / words.len() as f32)
            .collect();
        let e = set.style_embedding("lean").unwrap();
        assert!(e.iter().zip(&mean).all(|(u, v)| (u - v).abs() < 0.05));
        assert_ne!(set.style_embedding("bounce").unwrap(), e);
    }

    #[test]
    fn slots_run_out() {
        let mut m = model();
        let mut set = AdapterSet::attach(&mut m, &LoraConfig::default(), 0).unwrap();
        for k in 0..8 {
            set.new_style_token(&m, &format!("s{k}"), None, 0).unwrap();
        }
        assert!(set.new_style_token(&m, "extra", None, 0).is_err());
    }

    #[test]
    fn save_load() {
        let mut m = model();
        let mut set = AdapterSet::attach(&mut m, &LoraConfig::default(), 7).unwrap();
        set.new_style_token(&m, "bounce", Some(1), 0).unwrap();
        let mut r = rng::seeded(9);
        for t in set.params_mut().tensors_mut() {
            let n = t.numel();
            t.data_mut().copy_from_slice(&Tensor::<f32>::randn([n], 0.1, &mut r).into_data());
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("style.mdlc");
        set.save(&path).unwrap();
        let back = AdapterSet::load(&path, &mut m).unwrap();
        assert_eq!(back.params().checksum(), set.params().checksum());
        assert_eq!(back.style_tokens(), set.style_tokens());

        // same file against a wider model
        let mut wide = Denoiser::new(
            DenoiserConfig {
                d_model: 32,
                ..*m.config()
            },
            Vocab::toy(),
            0,
        )
        .unwrap();
        assert!(matches!(AdapterSet::load(&path, &mut wide), Err(Error::Shape { .. })));
    }
}
