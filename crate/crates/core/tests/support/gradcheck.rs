//! Finite-difference gradient checks shared by the test targets.

use rand::seq::index::sample;
use rand::Rng;
use stylediff::lora::{AdapterSet, LoraConfig};
use stylediff::model::{Bound, Denoiser, DenoiserConfig, Vocab};
use stylediff::tensor::{rng, Float, Graph, Tensor, Var};
use stylediff::Result;

pub const INSTANCES: usize = 100;
const EPS: f64 = 1e-6;
pub const TOL_F64: f64 = 1e-5;
pub const TOL_F32: f64 = 1e-3;

pub type Op<T> = fn(&mut Graph<T>, &[Var]) -> Result<Var>;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
    norm(&d) / norm(a).max(norm(n)).max(1e-10)
}

fn tensor<T: Float>(shape: &[usize], data: &[f64]) -> Tensor<T> {
    Tensor::new(shape, data.iter().map(|&x| T::lit(x)).collect()).unwrap()
}

/// `sum(op(inputs) * w)` and the gradient of every input.
fn loss_and_grads<T: Float>(op: Op<T>, shapes: &[Vec<usize>], inputs: &[Vec<f64>], w: &[f64]) -> (f64, Vec<Vec<f64>>) {
    let mut g = Graph::<T>::new();
    let vars: Vec<Var> = shapes.iter().zip(inputs).map(|(s, d)| g.variable(tensor(s, d))).collect();
    let y = op(&mut g, &vars).unwrap();
    let wv = g.constant(tensor(g.shape(y), &w[..g.value(y).numel()]));
    let prod = g.mul(y, wv).unwrap();
    let loss = g.sum(prod);
    let value = g.data(loss)[0].as_f64();
    g.backward(loss).unwrap();
    let grads = vars
        .iter()
        .map(|&v| {
            g.grad(v)
                .map(|s| s.iter().map(|x| x.as_f64()).collect())
                .unwrap_or_else(|| vec![0.0; g.value(v).numel()])
        })
        .collect();
    (value, grads)
}

/// Worst (f64, f32) relative error of one primitive over all instances.
pub fn check_primitive(name: &str, shapes: &[Vec<usize>], op64: Op<f64>, op32: Op<f32>) -> (f64, f64) {
    let mut worst = (0.0f64, 0.0f64);
    for inst in 0..INSTANCES {
        let mut r = rng::stream(inst as u64, name);
        let inputs: Vec<Vec<f64>> = shapes
            .iter()
            .map(|s| (0..s.iter().product::<usize>()).map(|_| r.gen_range(-1.5..1.5)).collect())
            .collect();
        let w: Vec<f64> = (0..4096).map(|_| r.gen_range(-1.0..1.0)).collect();
        let (_, analytic) = loss_and_grads(op64, shapes, &inputs, &w);
        let (_, analytic32) = loss_and_grads(op32, shapes, &inputs, &w);
        for (i, input) in inputs.iter().enumerate() {
            let numeric: Vec<f64> = (0..input.len())
                .map(|j| {
                    let mut plus = inputs.clone();
                    plus[i][j] += EPS;
                    let mut minus = inputs.clone();
                    minus[i][j] -= EPS;
                    (loss_and_grads(op64, shapes, &plus, &w).0 - loss_and_grads(op64, shapes, &minus, &w).0) / (2.0 * EPS)
                })
                .collect();
            worst.0 = worst.0.max(rel_err(&analytic[i], &numeric));
            worst.1 = worst.1.max(rel_err(&analytic32[i], &numeric));
        }
    }
    worst
}

pub struct Primitive {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub f64: Op<f64>,
    pub f32: Op<f32>,
}

macro_rules! primitives {
    ($($name:ident, [$($shape:expr),+], |$g:ident, $v:ident| $body:expr;)+) => {
        /// Every graph primitive with small input shapes.
        pub fn primitives() -> Vec<Primitive> {
            vec![$({
                fn op<T: Float>($g: &mut Graph<T>, $v: &[Var]) -> Result<Var> {
                    $body
                }
                Primitive { name: stringify!($name), shapes: vec![$($shape.to_vec()),+], f64: op::<f64>, f32: op::<f32> }
            }),+]
        }
    };
}

primitives! {
    matmul, [[2, 3, 4], [4, 5]], |g, v| g.matmul(v[0], v[1]);
    matmul_batched, [[2, 3, 4], [2, 4, 2]], |g, v| g.matmul(v[0], v[1]);
    matmul_nt, [[2, 3, 4], [5, 4]], |g, v| g.matmul_nt(v[0], v[1]);
    add, [[3, 4], [3, 4]], |g, v| g.add(v[0], v[1]);
    sub, [[3, 4], [3, 4]], |g, v| g.sub(v[0], v[1]);
    mul, [[3, 4], [3, 4]], |g, v| g.mul(v[0], v[1]);
    add_row, [[2, 3, 4], [4]], |g, v| g.add_row(v[0], v[1]);
    scale, [[3, 4]], |g, v| Ok(g.scale(v[0], -1.7));
    add_const, [[2, 3, 4]], |g, v| {
    let c = Tensor::new([3, 4], (0..12).map(|i| T::lit(i as f64 * 0.1)).collect())?;
    g.add_const(v[0], &c)
};
    key_mask, [[2, 2, 3, 4]], |g, v| {
    let mask = Tensor::new([2, 4], [0.0, 0.0, -1e9, 0.0, 0.0, -1e9, -1e9, 0.0].iter().map(|&x| T::lit(x)).collect())?;
    let masked = g.key_mask(v[0], &mask)?;
    g.softmax(masked, 3)
};
    gelu, [[3, 5]], |g, v| Ok(g.gelu(v[0]));
    relu, [[3, 5]], |g, v| Ok(g.relu(v[0]));
    silu, [[3, 5]], |g, v| Ok(g.silu(v[0]));
    softmax_last, [[2, 3, 4]], |g, v| g.softmax(v[0], 2);
    softmax_inner, [[2, 3, 4]], |g, v| g.softmax(v[0], 1);
    layer_norm, [[2, 3, 5], [5], [5]], |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5);
    mse, [[3, 4], [3, 4]], |g, v| g.mse(v[0], v[1]);
    sum, [[3, 4]], |g, v| Ok(g.sum(v[0]));
    mean, [[3, 4]], |g, v| Ok(g.mean(v[0]));
    cross_entropy, [[4, 5]], |g, v| g.cross_entropy(v[0], &[0, 4, 2, 2]);
    reshape, [[2, 6]], |g, v| {
    let r = g.reshape(v[0], &[3, 4])?;
    g.softmax(r, 1)
};
    permute, [[2, 3, 4]], |g, v| {
    let p = g.permute(v[0], &[2, 0, 1])?;
    g.softmax(p, 2)
};
    embedding, [[6, 3], [2, 3]], |g, v| g.embedding(v[0], Some((v[1], 4)), &[0, 5, 4, 2, 2, 1]);
    concat, [[2, 3, 2], [2, 3, 4]], |g, v| g.concat(&[v[0], v[1]], 2);
    mean_axis, [[2, 3, 4]], |g, v| g.mean_axis(v[0], 1);
    unfold1d, [[2, 5, 3]], |g, v| g.unfold1d(v[0], 3, 1);
    l2_normalize, [[3, 4]], |g, v| g.l2_normalize(v[0]);
}

fn small_model(seed: u64) -> Denoiser<f32> {
    let cfg = DenoiserConfig {
        feature_dim: 6,
        d_model: 16,
        layers: 2,
        heads: 2,
        ffn: 32,
        base_steps: 100,
    };
    Denoiser::new(cfg, Vocab::toy(), seed).unwrap()
}

struct Case {
    x_t: Vec<f64>,
    x0: Vec<f64>,
    t: Vec<usize>,
    prompts: Vec<Vec<usize>>,
}

const B: usize = 2;
const N: usize = 8;

fn case(model: &Denoiser<f32>, style_token: Option<usize>, r: &mut rng::Rng) -> Case {
    let f = model.config().feature_dim;
    let mut prompts: Vec<Vec<usize>> = (0..B).map(|_| model.random_prompt(4, r)).collect();
    if let Some(tok) = style_token {
        prompts[0].push(tok);
    }
    Case {
        x_t: (0..B * N * f).map(|_| r.gen_range(-1.5..1.5)).collect(),
        x0: (0..B * N * f).map(|_| r.gen_range(-1.5..1.5)).collect(),
        t: (0..B).map(|_| r.gen_range(1..=100)).collect(),
        prompts,
    }
}

fn model_loss<T: Float>(model: &Denoiser<T>, adapters: Option<&AdapterSet<T>>, c: &Case, grads: bool) -> (f64, Vec<(String, Vec<f64>)>) {
    let f = model.config().feature_dim;
    let mut g = Graph::<T>::new();
    let mut b = Bound::new(model, grads && adapters.is_none(), adapters.map(|a| (a, grads)));
    let x = g.constant(tensor(&[B, N, f], &c.x_t));
    let pred = model.forward(&mut g, &mut b, x, &c.t, 100, &c.prompts).unwrap();
    let target = g.constant(tensor(&[B, N, f], &c.x0));
    let loss = g.mse(pred, target).unwrap();
    let value = g.data(loss)[0].as_f64();
    if !grads {
        return (value, Vec::new());
    }
    g.backward(loss).unwrap();
    let (store, binds) = match (&b.adapter, adapters) {
        (Some((_, binder)), Some(a)) => (a.params(), binder.bindings()),
        _ => (model.params(), b.base.bindings()),
    };
    let out = binds
        .into_iter()
        .map(|(id, v)| {
            let grad = g
                .grad(v)
                .map(|s| s.iter().map(|x| x.as_f64()).collect())
                .unwrap_or_else(|| vec![0.0; store.get(id).numel()]);
            (store.name(id).to_string(), grad)
        })
        .collect();
    (value, out)
}

/// Worst (f64, f32) relative error of the denoiser loss gradient, checked on
/// 40 random parameter coordinates per instance.
pub fn check_model(with_adapters: bool) -> (f64, f64) {
    let mut worst = (0.0f64, 0.0f64);
    for inst in 0..INSTANCES as u64 {
        let mut base32 = small_model(inst);
        let mut r = rng::stream(inst, "gradcheck/model");
        let mut set32 = None;
        let mut token = None;
        if with_adapters {
            let mut set = AdapterSet::attach(&mut base32, &LoraConfig::default(), inst).unwrap();
            token = Some(set.new_style_token(&base32, "s", None, inst).unwrap());
            // B starts at zero, which would hide the gradient of A.
            let store = set.params_mut();
            let ids: Vec<_> = store.ids().filter(|&id| store.name(id).ends_with("lora_b")).collect();
            for id in ids {
                for x in store.get_mut(id).data_mut() {
                    *x = r.gen_range(-0.3..0.3);
                }
            }
            set32 = Some(set);
        }
        let c = case(&base32, token, &mut r);
        let base = base32.cast::<f64>();
        let set = set32.as_ref().map(|s| s.cast::<f64>());
        let (_, analytic) = model_loss(&base, set.as_ref(), &c, true);
        let (_, analytic32) = model_loss(&base32, set32.as_ref(), &c, true);
        let sizes: Vec<usize> = analytic.iter().map(|(_, g)| g.len()).collect();
        let total: usize = sizes.iter().sum();
        let mut a64 = Vec::new();
        let mut a32 = Vec::new();
        let mut numeric = Vec::new();
        for flat in sample(&mut r, total, 40).into_iter() {
            let (mut k, mut j) = (0, flat);
            while j >= sizes[k] {
                j -= sizes[k];
                k += 1;
            }
            let name = &analytic[k].0;
            let eval = |delta: f64| {
                let mut m = base.clone();
                let mut s = set.clone();
                let store = match s.as_mut() {
                    Some(s) => s.params_mut(),
                    None => m.params_mut(),
                };
                let id = store.id(name).unwrap();
                store.get_mut(id).data_mut()[j] += delta;
                model_loss(&m, s.as_ref(), &c, false).0
            };
            numeric.push((eval(EPS) - eval(-EPS)) / (2.0 * EPS));
            a64.push(analytic[k].1[j]);
            a32.push(analytic32.iter().find(|(n, _)| n == name).unwrap().1[j]);
        }
        worst.0 = worst.0.max(rel_err(&a64, &numeric));
        worst.1 = worst.1.max(rel_err(&a32, &numeric));
    }
    worst
}
