use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::metrics::Embedding;
use crate::error::{Error, Result};
use crate::model::{Vocab, NULL};
use crate::motion::{FeatureStats, LabeledClip, MotionSequence, EPS_NORM};
use crate::tensor::{
    read_checkpoint, rng, write_checkpoint, Adam, AdamConfig, Binder, CheckpointEntry, Graph, ParamId, ParamStore, Tensor, Var,
};

const KERNEL: usize = 3;
const INFERENCE_CHUNK: usize = 256;

/// Two kernel-3 temporal convolutions with ReLU, then a mean over time.
#[derive(Clone, Copy, Debug)]
struct Backbone {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl Backbone {
    fn init(store: &mut ParamStore<f32>, prefix: &str, f: usize, c: usize, r: &mut rng::Rng) -> Self {
        Backbone {
            w1: store.insert(
                format!("{prefix}.conv1.w"),
                Tensor::randn([c, KERNEL * f], (2.0 / (KERNEL * f) as f64).sqrt(), r),
            ),
            b1: store.insert(format!("{prefix}.conv1.b"), Tensor::zeros([c])),
            w2: store.insert(
                format!("{prefix}.conv2.w"),
                Tensor::randn([c, KERNEL * c], (2.0 / (KERNEL * c) as f64).sqrt(), r),
            ),
            b2: store.insert(format!("{prefix}.conv2.b"), Tensor::zeros([c])),
        }
    }

    fn forward(&self, g: &mut Graph, b: &mut Binder<f32>, x: Var) -> Result<Var> {
        let h = g.unfold1d(x, KERNEL, KERNEL / 2)?;
        let h = linear(g, b, h, self.w1, self.b1)?;
        let h = g.relu(h);
        let h = g.unfold1d(h, KERNEL, KERNEL / 2)?;
        let h = linear(g, b, h, self.w2, self.b2)?;
        let h = g.relu(h);
        g.mean_axis(h, 1)
    }
}

fn linear(g: &mut Graph, b: &mut Binder<f32>, x: Var, w: ParamId, bias: ParamId) -> Result<Var> {
    let (wv, bv) = (b.var(g, w), b.var(g, bias));
    let y = g.matmul_nt(x, wv)?;
    g.add_row(y, bv)
}

fn lookup(store: &ParamStore<f32>, name: &str) -> Result<ParamId> {
    store.id(name).ok_or_else(|| Error::Invalid(format!("missing parameter {name}")))
}

fn backbone_ids(store: &ParamStore<f32>, prefix: &str) -> Result<Backbone> {
    Ok(Backbone {
        w1: lookup(store, &format!("{prefix}.conv1.w"))?,
        b1: lookup(store, &format!("{prefix}.conv1.b"))?,
        w2: lookup(store, &format!("{prefix}.conv2.w"))?,
        b2: lookup(store, &format!("{prefix}.conv2.b"))?,
    })
}

/// Normalized `[B, N, F]` batch; every clip must have the same length.
fn stack(stats: &FeatureStats, clips: &[&MotionSequence]) -> Result<Tensor<f32>> {
    let first = clips.first().ok_or_else(|| Error::Invalid("empty batch".into()))?;
    let (n, f) = (first.frames(), first.dim());
    let mut data = Vec::with_capacity(clips.len() * n * f);
    for c in clips {
        if c.frames() != n || c.dim() != f {
            return Err(Error::shape("stack", &[n, f], &[c.frames(), c.dim()]));
        }
        data.extend(stats.normalize_raw(c.data()));
    }
    Tensor::new([clips.len(), n, f], data)
}

/// Runs `f` over runs of equal-length clips and concatenates the rows.
fn chunked(clips: &[MotionSequence], mut f: impl FnMut(&[&MotionSequence]) -> Result<Vec<Vec<f64>>>) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(clips.len());
    let mut start = 0;
    while start < clips.len() {
        let n = clips[start].frames();
        let mut end = start + 1;
        while end < clips.len() && end - start < INFERENCE_CHUNK && clips[end].frames() == n {
            end += 1;
        }
        let refs: Vec<&MotionSequence> = clips[start..end].iter().collect();
        out.extend(f(&refs)?);
        start = end;
    }
    Ok(out)
}

fn rows(t: &Tensor<f32>) -> Vec<Vec<f64>> {
    t.rows().map(|r| r.iter().map(|&v| v as f64).collect()).collect()
}

fn save_store(path: &Path, store: &ParamStore<f32>) -> Result<()> {
    let entries: Vec<CheckpointEntry> = store.iter().map(|(n, t)| CheckpointEntry::from_tensor(n, t)).collect();
    write_checkpoint(path, &entries)
}

fn load_store(path: &Path, store: &mut ParamStore<f32>) -> Result<()> {
    if !path.is_file() {
        return Err(Error::MissingArtifact(format!("no evaluator weights at {}", path.display())));
    }
    let entries = read_checkpoint(path)?;
    if entries.len() != store.len() {
        return Err(Error::format(path, format!("{} tensors, expected {}", entries.len(), store.len())));
    }
    for e in entries {
        store.assign(&e.name, &e.shape, &e.data)?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub channels: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            channels: 32,
            epochs: 150,
            batch_size: 64,
            lr: 5e-4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ClassifierMeta {
    feature_dim: usize,
    n_classes: usize,
    channels: usize,
    stats: FeatureStats,
}

/// Conv backbone plus a linear head over style classes (class 0: neutral).
#[derive(Clone, Debug)]
pub struct StyleClassifier {
    meta: ClassifierMeta,
    params: ParamStore<f32>,
    backbone: Backbone,
    head_w: ParamId,
    head_b: ParamId,
}

/// Class label of a clip: its style id, or 0 for neutral.
pub fn style_label(clip: &LabeledClip) -> usize {
    clip.style_id.unwrap_or(0)
}

impl StyleClassifier {
    pub fn new(n_classes: usize, channels: usize, stats: FeatureStats, seed: u64) -> Self {
        let mut r = rng::stream(seed, "classifier-init");
        let mut params = ParamStore::new();
        let f = stats.dim();
        let backbone = Backbone::init(&mut params, "enc", f, channels, &mut r);
        let head_w = params.insert(
            "head.w",
            Tensor::randn([n_classes, channels], (1.0 / channels as f64).sqrt(), &mut r),
        );
        let head_b = params.insert("head.b", Tensor::zeros([n_classes]));
        StyleClassifier {
            meta: ClassifierMeta {
                feature_dim: f,
                n_classes,
                channels,
                stats,
            },
            params,
            backbone,
            head_w,
            head_b,
        }
    }

    pub fn n_classes(&self) -> usize {
        self.meta.n_classes
    }

    /// Width of the pooled feature used as the embedding space.
    pub fn feature_dim(&self) -> usize {
        self.meta.channels
    }

    fn forward(&self, g: &mut Graph, b: &mut Binder<f32>, x: Tensor<f32>) -> Result<(Var, Var)> {
        let x = g.constant(x);
        let h = self.backbone.forward(g, b, x)?;
        let logits = linear(g, b, h, self.head_w, self.head_b)?;
        Ok((h, logits))
    }

    fn run(&self, clips: &[&MotionSequence], want_logits: bool) -> Result<Vec<Vec<f64>>> {
        let x = stack(&self.meta.stats, clips)?;
        let mut g = Graph::new();
        let mut b = Binder::new(&self.params, false);
        let (h, logits) = self.forward(&mut g, &mut b, x)?;
        Ok(rows(g.value(if want_logits { logits } else { h })))
    }

    pub fn logits(&self, clips: &[MotionSequence]) -> Result<Vec<Vec<f64>>> {
        chunked(clips, |c| self.run(c, true))
    }

    /// Pooled penultimate features.
    pub fn features(&self, clips: &[MotionSequence]) -> Result<Vec<Embedding>> {
        chunked(clips, |c| self.run(c, false))
    }

    pub fn probabilities(&self, clips: &[MotionSequence]) -> Result<Vec<Vec<f64>>> {
        Ok(self
            .logits(clips)?
            .into_iter()
            .map(|row| {
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
                let s: f64 = e.iter().sum();
                e.into_iter().map(|v| v / s).collect()
            })
            .collect())
    }

    pub fn predict(&self, clips: &[MotionSequence]) -> Result<Vec<usize>> {
        Ok(self
            .logits(clips)?
            .iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0
            })
            .collect())
    }

    pub fn accuracy(&self, clips: &[MotionSequence], labels: &[usize]) -> Result<f64> {
        if clips.len() != labels.len() || clips.is_empty() {
            return Err(Error::shape("accuracy", &[clips.len()], &[labels.len()]));
        }
        let pred = self.predict(clips)?;
        Ok(pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        save_store(&dir.join("classifier.mdlc"), &self.params)?;
        std::fs::write(dir.join("classifier.json"), serde_json::to_string_pretty(&self.meta)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("classifier.json");
        if !meta_path.is_file() {
            return Err(Error::MissingArtifact(format!("no classifier in {}", dir.display())));
        }
        let meta: ClassifierMeta = serde_json::from_str(&std::fs::read_to_string(meta_path)?)?;
        let mut c = StyleClassifier::new(meta.n_classes, meta.channels, meta.stats, 0);
        load_store(&dir.join("classifier.mdlc"), &mut c.params)?;
        c.backbone = backbone_ids(&c.params, "enc")?;
        Ok(c)
    }
}

#[derive(Clone, Debug)]
pub struct TrainedClassifier {
    pub classifier: StyleClassifier,
    /// Accuracy on the held-out clips (one per class).
    pub holdout_accuracy: f64,
    pub holdout: Vec<usize>,
}

/// Cross-entropy training with one clip per class held out for validation.
pub fn train_classifier(clips: &[LabeledClip], labels: &[usize], n_classes: usize, cfg: &ClassifierConfig) -> Result<TrainedClassifier> {
    if clips.len() != labels.len() {
        return Err(Error::shape("train_classifier", &[clips.len()], &[labels.len()]));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::Invalid(format!("label {bad} outside {n_classes} classes")));
    }
    let mut present: Vec<usize> = labels.to_vec();
    present.sort();
    present.dedup();
    if present.len() < 2 {
        return Err(Error::Invalid("classifier training needs at least 2 classes".into()));
    }
    if cfg.batch_size == 0 || cfg.channels == 0 {
        return Err(Error::Config("classifier batch size and channels must be positive".into()));
    }
    let mut r = rng::stream(cfg.seed, "classifier-train");
    let mut order: Vec<usize> = (0..clips.len()).collect();
    order.shuffle(&mut r);
    let mut holdout = Vec::new();
    for &c in &present {
        let members: Vec<usize> = order.iter().copied().filter(|&i| labels[i] == c).collect();
        if members.len() >= 2 {
            holdout.push(members[0]);
        }
    }
    let train: Vec<usize> = order.iter().copied().filter(|i| !holdout.contains(i)).collect();

    let stats = FeatureStats::fit(&train.iter().map(|&i| clips[i].clone()).collect::<Vec<_>>(), EPS_NORM)?;
    let mut model = StyleClassifier::new(n_classes, cfg.channels, stats, cfg.seed);
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut idx = train.clone();
    for _ in 0..cfg.epochs {
        idx.shuffle(&mut r);
        for batch in idx.chunks(cfg.batch_size) {
            let refs: Vec<&MotionSequence> = batch.iter().map(|&i| &clips[i].motion).collect();
            let targets: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let x = stack(&model.meta.stats, &refs)?;
            let mut g = Graph::new();
            let mut b = Binder::new(&model.params, true);
            let (_, logits) = model.forward(&mut g, &mut b, x)?;
            let loss = g.cross_entropy(logits, &targets)?;
            let value = g.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::Numerical(format!("classifier loss became {value}")));
            }
            g.backward(loss)?;
            let bindings = b.bindings();
            model.params.zero_grad();
            model.params.accumulate(&g, &bindings)?;
            adam.step(&mut model.params)?;
        }
    }
    let holdout_accuracy = if holdout.is_empty() {
        f64::NAN
    } else {
        let held: Vec<MotionSequence> = holdout.iter().map(|&i| clips[i].motion.clone()).collect();
        let want: Vec<usize> = holdout.iter().map(|&i| labels[i]).collect();
        model.accuracy(&held, &want)?
    };
    Ok(TrainedClassifier {
        classifier: model,
        holdout_accuracy,
        holdout,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DualConfig {
    pub channels: usize,
    pub text_dim: usize,
    pub embed_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for DualConfig {
    fn default() -> Self {
        DualConfig {
            channels: 32,
            text_dim: 32,
            embed_dim: 32,
            epochs: 60,
            batch_size: 32,
            lr: 1e-3,
            temperature: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct DualMeta {
    config: DualConfig,
    stats: FeatureStats,
}

/// Prompt with any `in <s> style` suffix removed.
pub fn content_prompt(prompt: &str) -> String {
    let words: Vec<&str> = prompt.split_whitespace().collect();
    let cut = (0..words.len())
        .find(|&i| words[i] == "in" && words.get(i + 1).is_some_and(|w| w.starts_with('<')))
        .unwrap_or(words.len());
    words[..cut].join(" ")
}

/// Motion and text encoders into a shared unit-norm space.
#[derive(Clone, Debug)]
pub struct DualEncoder {
    meta: DualMeta,
    vocab: Vocab,
    params: ParamStore<f32>,
    backbone: Backbone,
    m_w: ParamId,
    m_b: ParamId,
    tok: ParamId,
    t_w: ParamId,
    t_b: ParamId,
}

impl DualEncoder {
    pub fn new(vocab: Vocab, stats: FeatureStats, config: DualConfig) -> Self {
        let mut r = rng::stream(config.seed, "dual-init");
        let mut params = ParamStore::new();
        let (c, e, dt) = (config.channels, config.embed_dim, config.text_dim);
        let backbone = Backbone::init(&mut params, "motion", stats.dim(), c, &mut r);
        let m_w = params.insert("motion.proj.w", Tensor::randn([e, c], (1.0 / c as f64).sqrt(), &mut r));
        let m_b = params.insert("motion.proj.b", Tensor::zeros([e]));
        let tok = params.insert("text.tok", Tensor::randn([vocab.len(), dt], 1.0, &mut r));
        let t_w = params.insert("text.proj.w", Tensor::randn([e, dt], (1.0 / dt as f64).sqrt(), &mut r));
        let t_b = params.insert("text.proj.b", Tensor::zeros([e]));
        DualEncoder {
            meta: DualMeta { config, stats },
            vocab,
            params,
            backbone,
            m_w,
            m_b,
            tok,
            t_w,
            t_b,
        }
    }

    fn motion_forward(&self, g: &mut Graph, b: &mut Binder<f32>, x: Tensor<f32>) -> Result<Var> {
        let x = g.constant(x);
        let h = self.backbone.forward(g, b, x)?;
        let z = linear(g, b, h, self.m_w, self.m_b)?;
        g.l2_normalize(z)
    }

    fn tokenize(&self, texts: &[String]) -> Result<Vec<Vec<usize>>> {
        texts
            .iter()
            .map(|t| {
                let ids = self.vocab.tokenize_plain(&content_prompt(t))?;
                Ok(if ids.is_empty() { vec![NULL] } else { ids })
            })
            .collect()
    }

    fn text_forward(&self, g: &mut Graph, b: &mut Binder<f32>, ids: &[Vec<usize>]) -> Result<Var> {
        let flat: Vec<usize> = ids.iter().flatten().copied().collect();
        let mut avg = vec![0.0f32; ids.len() * flat.len()];
        let mut col = 0;
        for (row, p) in ids.iter().enumerate() {
            for _ in p {
                avg[row * flat.len() + col] = 1.0 / p.len() as f32;
                col += 1;
            }
        }
        let table = b.var(g, self.tok);
        let e = g.embedding(table, None, &flat)?;
        let a = g.constant(Tensor::new([ids.len(), flat.len()], avg)?);
        let mean = g.matmul(a, e)?;
        let z = linear(g, b, mean, self.t_w, self.t_b)?;
        g.l2_normalize(z)
    }

    pub fn encode_motions(&self, clips: &[MotionSequence]) -> Result<Vec<Embedding>> {
        chunked(clips, |c| {
            let x = stack(&self.meta.stats, c)?;
            let mut g = Graph::new();
            let mut b = Binder::new(&self.params, false);
            let z = self.motion_forward(&mut g, &mut b, x)?;
            Ok(rows(g.value(z)))
        })
    }

    /// Embeds prompts after stripping style suffixes.
    pub fn encode_texts(&self, texts: &[String]) -> Result<Vec<Embedding>> {
        let ids = self.tokenize(texts)?;
        let mut out = Vec::with_capacity(ids.len());
        for chunk in ids.chunks(INFERENCE_CHUNK) {
            let mut g = Graph::new();
            let mut b = Binder::new(&self.params, false);
            let z = self.text_forward(&mut g, &mut b, chunk)?;
            out.extend(rows(g.value(z)));
        }
        Ok(out)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        save_store(&dir.join("dual.mdlc"), &self.params)?;
        std::fs::write(dir.join("dual.json"), serde_json::to_string_pretty(&self.meta)?)?;
        self.vocab.save(&dir.join("dual_vocab.json"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("dual.json");
        if !meta_path.is_file() {
            return Err(Error::MissingArtifact(format!("no dual encoder in {}", dir.display())));
        }
        let meta: DualMeta = serde_json::from_str(&std::fs::read_to_string(meta_path)?)?;
        let vocab = Vocab::load(&dir.join("dual_vocab.json"))?;
        let mut d = DualEncoder::new(vocab, meta.stats, meta.config);
        load_store(&dir.join("dual.mdlc"), &mut d.params)?;
        Ok(d)
    }
}

/// InfoNCE training on `(prompt, motion)` pairs; negatives with the same
/// text as the positive are masked out.
pub fn train_dual_encoder(clips: &[LabeledClip], vocab: &Vocab, cfg: &DualConfig) -> Result<DualEncoder> {
    if clips.len() < 2 {
        return Err(Error::Invalid("contrastive training needs at least 2 pairs".into()));
    }
    if cfg.batch_size < 2 || !(cfg.temperature > 0.0) {
        return Err(Error::Config(
            "dual encoder needs batch size >= 2 and a positive temperature".into(),
        ));
    }
    let stats = FeatureStats::fit(clips, EPS_NORM)?;
    let mut model = DualEncoder::new(vocab.clone(), stats, *cfg);
    let texts: Vec<String> = clips.iter().map(|c| content_prompt(&c.prompt)).collect();
    let ids = model.tokenize(&texts)?;
    let mut r = rng::stream(cfg.seed, "dual-train");
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut order: Vec<usize> = (0..clips.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut r);
        for batch in order.chunks(cfg.batch_size).filter(|b| b.len() >= 2) {
            let n = batch.len();
            let refs: Vec<&MotionSequence> = batch.iter().map(|&i| &clips[i].motion).collect();
            let x = stack(&model.meta.stats, &refs)?;
            let bid: Vec<Vec<usize>> = batch.iter().map(|&i| ids[i].clone()).collect();
            let mut mask = vec![0.0f32; n * n];
            for i in 0..n {
                for j in 0..n {
                    if i != j && texts[batch[i]] == texts[batch[j]] {
                        mask[i * n + j] = -1e9;
                    }
                }
            }
            let mask = Tensor::new([n, n], mask)?;
            let targets: Vec<usize> = (0..n).collect();

            let mut g = Graph::new();
            let mut b = Binder::new(&model.params, true);
            let zm = model.motion_forward(&mut g, &mut b, x)?;
            let zt = model.text_forward(&mut g, &mut b, &bid)?;
            let sim = g.matmul_nt(zm, zt)?;
            let sim = g.scale(sim, 1.0 / cfg.temperature);
            let sim = g.add_const(sim, &mask)?;
            let l1 = g.cross_entropy(sim, &targets)?;
            let simt = g.permute(sim, &[1, 0])?;
            let l2 = g.cross_entropy(simt, &targets)?;
            let loss = g.add(l1, l2)?;
            let value = g.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::Numerical(format!("contrastive loss became {value}")));
            }
            g.backward(loss)?;
            let bindings = b.bindings();
            model.params.zero_grad();
            model.params.accumulate(&g, &bindings)?;
            adam.step(&mut model.params)?;
        }
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::toy::generate_cell;

    fn styled(n: usize, seed: u64) -> Vec<LabeledClip> {
        let mut clips = generate_cell(5, 32, 0, None, n, seed).unwrap();
        for s in 1..=3 {
            clips.extend(generate_cell(5, 32, 0, Some(s), n, seed + s as u64).unwrap());
        }
        clips
    }

    #[test]
    fn classifier_separates_toy_styles() {
        let clips = styled(12, 1);
        let labels: Vec<usize> = clips.iter().map(style_label).collect();
        let cfg = ClassifierConfig {
            epochs: 60,
            ..Default::default()
        };
        let t = train_classifier(&clips, &labels, 4, &cfg).unwrap();
        assert_eq!(t.holdout.len(), 4);
        assert_eq!(t.holdout_accuracy, 1.0);
        let fresh = styled(5, 99);
        let motions: Vec<MotionSequence> = fresh.iter().map(|c| c.motion.clone()).collect();
        let acc = t
            .classifier
            .accuracy(&motions, &fresh.iter().map(style_label).collect::<Vec<_>>())
            .unwrap();
        assert!(acc > 0.95, "{acc}");
        assert_eq!(t.classifier.features(&motions).unwrap()[0].len(), 32);
        let p = t.classifier.probabilities(&motions[..2]).unwrap();
        assert!((p[0].iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn classifier_rejects_degenerate_input() {
        let clips = generate_cell(5, 32, 0, None, 4, 0).unwrap();
        assert!(train_classifier(&clips, &[0; 4], 2, &ClassifierConfig::default()).is_err());
        assert!(train_classifier(&clips, &[0, 1, 2, 0], 2, &ClassifierConfig::default()).is_err());
    }

    #[test]
    fn classifier_save_load() {
        let clips = styled(3, 2);
        let labels: Vec<usize> = clips.iter().map(style_label).collect();
        let t = train_classifier(
            &clips,
            &labels,
            4,
            &ClassifierConfig {
                epochs: 2,
                ..Default::default()
            },
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        t.classifier.save(dir.path()).unwrap();
        let back = StyleClassifier::load(dir.path()).unwrap();
        let m: Vec<MotionSequence> = clips.iter().map(|c| c.motion.clone()).collect();
        assert_eq!(back.logits(&m).unwrap(), t.classifier.logits(&m).unwrap());
    }

    #[test]
    fn content_prompts() {
        assert_eq!(content_prompt("a person is walking in <bounce> style"), "a person is walking");
        assert_eq!(
            content_prompt("a person is walking in <a> style and in <b> style"),
            "a person is walking"
        );
        assert_eq!(content_prompt("a person is walking"), "a person is walking");
    }

    #[test]
    fn dual_encoder_outputs_unit_vectors_and_round_trips() {
        let mut clips = generate_cell(5, 32, 0, None, 6, 3).unwrap();
        clips.extend(generate_cell(5, 32, 1, None, 6, 4).unwrap());
        let d = train_dual_encoder(
            &clips,
            &Vocab::toy(),
            &DualConfig {
                epochs: 3,
                ..Default::default()
            },
        )
        .unwrap();
        let m: Vec<MotionSequence> = clips.iter().map(|c| c.motion.clone()).collect();
        let zm = d.encode_motions(&m).unwrap();
        let zt = d.encode_texts(&clips.iter().map(|c| c.prompt.clone()).collect::<Vec<_>>()).unwrap();
        for z in zm.iter().chain(&zt) {
            assert!((z.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-5);
        }
        let styled = d.encode_texts(&[format!("{} in <bounce> style", clips[0].prompt)]).unwrap();
        assert_eq!(styled[0], zt[0]);
        let dir = tempfile::tempdir().unwrap();
        d.save(dir.path()).unwrap();
        let back = DualEncoder::load(dir.path()).unwrap();
        assert_eq!(back.encode_motions(&m).unwrap(), zm);
    }
}
