//! Noise schedules, forward noising, and the ancestral x0-prediction sampler.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::{FeatureLayout, FeatureStats, MotionSequence};
use crate::tensor::{rng, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    #[default]
    Cosine,
    Linear,
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(ScheduleKind::Cosine),
            "linear" => Ok(ScheduleKind::Linear),
            _ => Err(Error::Config(format!("unknown schedule kind `{s}` (cosine|linear)"))),
        }
    }
}

/// Per-step constants of a `T`-step diffusion. Index `t` runs over `1..=T`;
/// `alpha_bar(0) == 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    kind: ScheduleKind,
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
}

const COSINE_OFFSET: f64 = 0.008;
const MAX_BETA: f64 = 0.999;

impl DiffusionSchedule {
    pub fn new(steps: usize, kind: ScheduleKind) -> Result<Self> {
        if steps < 2 {
            return Err(Error::Config(format!("diffusion needs at least 2 steps, got {steps}")));
        }
        let t_max = steps as f64;
        let mut betas = vec![0.0];
        match kind {
            ScheduleKind::Cosine => {
                let f = |t: f64| {
                    ((t / t_max + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2)
                        .cos()
                        .powi(2)
                };
                for t in 1..=steps {
                    let b = 1.0 - f(t as f64) / f(t as f64 - 1.0);
                    betas.push(b.min(MAX_BETA));
                }
            }
            ScheduleKind::Linear => {
                // endpoints 1e-4 and 0.02 at T = 1000, rescaled for other T
                let scale = 1000.0 / t_max;
                let (lo, hi) = (scale * 1e-4, (scale * 0.02).min(MAX_BETA));
                for t in 1..=steps {
                    betas.push(lo + (hi - lo) * (t - 1) as f64 / (t_max - 1.0));
                }
            }
        }
        let mut alpha_bar = vec![1.0];
        for t in 1..=steps {
            let prev = alpha_bar[t - 1];
            alpha_bar.push(prev * (1.0 - betas[t]));
        }
        Ok(DiffusionSchedule { kind, betas, alpha_bar })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// `T`.
    pub fn steps(&self) -> usize {
        self.betas.len() - 1
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.betas[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Invalid(format!("timestep {t} outside [1, {}]", self.steps())));
        }
        Ok(())
    }

    /// `(coef_x0, coef_xt, variance)` of `q(x_{t-1} | x_t, x0)`.
    pub fn posterior(&self, t: usize) -> Result<(f64, f64, f64)> {
        self.check_t(t)?;
        Ok(posterior_coefficients(self.alpha_bar[t], self.alpha_bar[t - 1]))
    }
}

/// Posterior coefficients from `alpha_bar` at `t` and `t - 1`.
pub fn posterior_coefficients(ab_t: f64, ab_prev: f64) -> (f64, f64, f64) {
    let alpha = ab_t / ab_prev;
    let beta = 1.0 - alpha;
    let denom = 1.0 - ab_t;
    if denom <= 0.0 {
        // no noise at all: x_t is already clean
        return (1.0, 0.0, 0.0);
    }
    let c0 = beta * ab_prev.sqrt() / denom;
    let ct = (1.0 - ab_prev) * alpha.sqrt() / denom;
    (c0, ct, beta * (1.0 - ab_prev) / denom)
}

/// `sqrt(ab) * x0 + sqrt(1 - ab) * eps`.
pub fn q_sample_with(x0: &[f32], eps: &[f32], alpha_bar: f64) -> Result<Vec<f32>> {
    if x0.len() != eps.len() {
        return Err(Error::shape("q_sample", &[x0.len()], &[eps.len()]));
    }
    let a = alpha_bar.sqrt() as f32;
    let b = (1.0 - alpha_bar).max(0.0).sqrt() as f32;
    Ok(x0.iter().zip(eps).map(|(&x, &e)| a * x + b * e).collect())
}

/// A noised sample together with the exact noise that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisySample {
    pub x_t: Tensor<f32>,
    pub t: usize,
    pub eps: Tensor<f32>,
}

pub fn q_sample(x0: &Tensor<f32>, t: usize, eps: &Tensor<f32>, sched: &DiffusionSchedule) -> Result<NoisySample> {
    sched.check_t(t)?;
    if x0.shape() != eps.shape() {
        return Err(Error::shape("q_sample", x0.shape(), eps.shape()));
    }
    let data = q_sample_with(x0.data(), eps.data(), sched.alpha_bar(t))?;
    Ok(NoisySample {
        x_t: Tensor::new(x0.shape().to_vec(), data)?,
        t,
        eps: eps.clone(),
    })
}

pub fn standard_normal(shape: &[usize], r: &mut rng::Rng) -> Tensor<f32> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(r)).collect();
    Tensor::new(shape.to_vec(), data).expect("consistent shape")
}

/// Anything that predicts clean motion from a noisy batch.
///
/// `x_t` is `[B, N, F]` in normalized units, `t[b]` is in `1..=steps`, and
/// `prompts[b]` is a token sequence; an empty prompt asks for the
/// unconditional prediction.
pub trait X0Predictor {
    fn predict_x0(&self, x_t: &Tensor<f32>, t: &[usize], steps: usize, prompts: &[Vec<usize>]) -> Result<Tensor<f32>>;
}

/// Classifier-free guided prediction `u + g (c - u)`. With `g == 1`, or when
/// every prompt is already empty, only the conditional pass runs.
pub fn guided_x0<G: X0Predictor + ?Sized>(
    g: &G,
    x_t: &Tensor<f32>,
    t: &[usize],
    steps: usize,
    prompts: &[Vec<usize>],
    guidance: f64,
) -> Result<Tensor<f32>> {
    if guidance == 1.0 || prompts.iter().all(Vec::is_empty) {
        return g.predict_x0(x_t, t, steps, prompts);
    }
    let b = prompts.len();
    let mut shape = x_t.shape().to_vec();
    shape[0] = 2 * b;
    let mut data = x_t.data().to_vec();
    data.extend_from_slice(x_t.data());
    let both = Tensor::new(shape, data)?;
    let mut all_t = t.to_vec();
    all_t.extend_from_slice(t);
    let mut all_p = prompts.to_vec();
    all_p.extend(std::iter::repeat_n(Vec::new(), b));
    let out = g.predict_x0(&both, &all_t, steps, &all_p)?;
    let half = out.numel() / 2;
    let (c, u) = out.data().split_at(half);
    let gf = guidance as f32;
    let blended = c.iter().zip(u).map(|(&c, &u)| u + gf * (c - u)).collect();
    Tensor::new(x_t.shape().to_vec(), blended)
}

/// One reverse step `x_t -> x_{t-1}`. Noise is added only when `noise` is
/// given and `t > 1`.
pub fn p_sample_step<G: X0Predictor + ?Sized>(
    g: &G,
    x_t: &Tensor<f32>,
    t: usize,
    prompts: &[Vec<usize>],
    sched: &DiffusionSchedule,
    guidance: f64,
    noise: Option<&mut rng::Rng>,
) -> Result<Tensor<f32>> {
    let (c0, ct, var) = sched.posterior(t)?;
    let tb = vec![t; prompts.len()];
    let x0 = guided_x0(g, x_t, &tb, sched.steps(), prompts, guidance)?;
    if x0.shape() != x_t.shape() {
        return Err(Error::shape("p_sample_step", x_t.shape(), x0.shape()));
    }
    let bad = x0.data().iter().filter(|v| !v.is_finite()).count();
    if bad > 0 {
        return Err(Error::Numerical(format!(
            "denoiser produced {bad} non-finite values of {} at t={t}",
            x0.numel()
        )));
    }
    let (c0, ct) = (c0 as f32, ct as f32);
    let mut out: Vec<f32> = x0.data().iter().zip(x_t.data()).map(|(&a, &b)| c0 * a + ct * b).collect();
    if let Some(r) = noise.filter(|_| t > 1) {
        let sd = var.sqrt() as f32;
        for v in &mut out {
            let z: f32 = StandardNormal.sample(r);
            *v += sd * z;
        }
    }
    Tensor::new(x_t.shape().to_vec(), out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleOptions {
    pub frames: usize,
    pub guidance: f64,
    pub seed: u64,
}

/// Full `T -> 0` loop in normalized units, returning `[B, N, F]`.
pub fn sample_normalized<G: X0Predictor + ?Sized>(
    g: &G,
    prompts: &[Vec<usize>],
    dim: usize,
    sched: &DiffusionSchedule,
    opts: &SampleOptions,
) -> Result<Tensor<f32>> {
    let mut r = rng::stream(opts.seed, "sample");
    let mut x = standard_normal(&[prompts.len(), opts.frames, dim], &mut r);
    for t in (1..=sched.steps()).rev() {
        x = p_sample_step(g, &x, t, prompts, sched, opts.guidance, Some(&mut r))?;
    }
    Ok(x)
}

/// Samples one motion per prompt and maps it back to feature units.
pub fn sample<G: X0Predictor + ?Sized>(
    g: &G,
    prompts: &[Vec<usize>],
    stats: &FeatureStats,
    sched: &DiffusionSchedule,
    opts: &SampleOptions,
) -> Result<Vec<MotionSequence>> {
    let layout = FeatureLayout::from_dim(stats.dim())?;
    let x = sample_normalized(g, prompts, stats.dim(), sched, opts)?;
    let per = opts.frames * stats.dim();
    x.data()
        .chunks_exact(per)
        .map(|c| MotionSequence::from_generated(layout, stats.denormalize_raw(c)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Oracle(Tensor<f32>);

    impl X0Predictor for Oracle {
        fn predict_x0(&self, x_t: &Tensor<f32>, _: &[usize], _: usize, _: &[Vec<usize>]) -> Result<Tensor<f32>> {
            let reps = x_t.numel() / self.0.numel();
            Tensor::new(x_t.shape().to_vec(), self.0.data().repeat(reps))
        }
    }

    /// Returns `x_t` scaled by 2 when conditioned, by 1 otherwise.
    struct Tagged;

    impl X0Predictor for Tagged {
        fn predict_x0(&self, x_t: &Tensor<f32>, _: &[usize], _: usize, p: &[Vec<usize>]) -> Result<Tensor<f32>> {
            let per = x_t.numel() / p.len();
            let data = x_t
                .data()
                .chunks_exact(per)
                .zip(p)
                .flat_map(|(c, p)| c.iter().map(move |v| if p.is_empty() { *v } else { 2.0 * v }))
                .collect();
            Tensor::new(x_t.shape().to_vec(), data)
        }
    }

    #[test]
    fn schedules_are_monotone() {
        for kind in [ScheduleKind::Cosine, ScheduleKind::Linear] {
            for steps in [2, 10, 100, 1000] {
                let s = DiffusionSchedule::new(steps, kind).unwrap();
                for t in 1..=steps {
                    assert!(s.alpha(t) > 0.0 && s.alpha(t) < 1.0);
                    assert!(s.alpha_bar(t) < s.alpha_bar(t - 1), "{kind:?} T={steps} t={t}");
                }
            }
        }
        assert!(DiffusionSchedule::new(1, ScheduleKind::Cosine).is_err());
    }

    #[test]
    fn schedule_endpoints() {
        let c = DiffusionSchedule::new(100, ScheduleKind::Cosine).unwrap();
        assert!(c.alpha_bar(100) < 0.01);
        let l = DiffusionSchedule::new(1000, ScheduleKind::Linear).unwrap();
        assert!((l.beta(1) - 1e-4).abs() < 1e-15 && (l.beta(1000) - 0.02).abs() < 1e-15);
        assert!(l.alpha_bar(1000) < 1e-4);
    }

    #[test]
    fn q_sample_formula() {
        let x = q_sample_with(&[2.0], &[1.0], 0.25).unwrap();
        assert!((x[0] - (1.0 + 0.75f32.sqrt())).abs() < 1e-6);
        assert_eq!(q_sample_with(&[2.0, -3.5], &[0.7, 9.0], 1.0).unwrap(), vec![2.0, -3.5]);
        assert_eq!(q_sample_with(&[2.0, -3.5], &[0.7, 9.0], 0.0).unwrap(), vec![0.7, 9.0]);
    }

    #[test]
    fn equal_noise_levels_keep_x_t() {
        let (c0, ct, var) = posterior_coefficients(0.3, 0.3);
        assert!(c0.abs() < 1e-15 && (ct - 1.0).abs() < 1e-15 && var.abs() < 1e-15);
    }

    #[test]
    fn perfect_denoiser_recovers_x0() {
        let sched = DiffusionSchedule::new(100, ScheduleKind::Cosine).unwrap();
        let mut r = rng::seeded(1);
        let x0 = standard_normal(&[1, 8, 5], &mut r);
        let oracle = Oracle(x0.clone());
        let mut x = q_sample(&x0, 100, &standard_normal(&[1, 8, 5], &mut r), &sched).unwrap().x_t;
        for t in (1..=100).rev() {
            x = p_sample_step(&oracle, &x, t, &[vec![1]], &sched, 1.0, None).unwrap();
        }
        for (a, b) in x.data().iter().zip(x0.data()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn last_step_is_deterministic() {
        let sched = DiffusionSchedule::new(10, ScheduleKind::Cosine).unwrap();
        let x = standard_normal(&[1, 4, 3], &mut rng::seeded(2));
        let a = p_sample_step(&Tagged, &x, 1, &[vec![1]], &sched, 1.0, Some(&mut rng::seeded(3))).unwrap();
        let b = p_sample_step(&Tagged, &x, 1, &[vec![1]], &sched, 1.0, Some(&mut rng::seeded(4))).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn guidance_blend() {
        let x = Tensor::new([2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = [vec![1], vec![2]];
        assert_eq!(
            guided_x0(&Tagged, &x, &[1, 1], 10, &p, 1.0).unwrap(),
            Tagged.predict_x0(&x, &[1, 1], 10, &p).unwrap()
        );
        // u = x, c = 2x -> x + 2.5 x
        let g = guided_x0(&Tagged, &x, &[1, 1], 10, &p, 2.5).unwrap();
        assert_eq!(g.data(), &[3.5, 7.0, 10.5, 14.0]);
    }

    #[test]
    fn non_finite_prediction_aborts() {
        let sched = DiffusionSchedule::new(10, ScheduleKind::Cosine).unwrap();
        let bad = Oracle(Tensor::full([1, 2, 2], f32::NAN));
        let x = Tensor::zeros([1, 2, 2]);
        assert!(matches!(
            p_sample_step(&bad, &x, 5, &[vec![]], &sched, 1.0, None),
            Err(Error::Numerical(_))
        ));
    }

    #[test]
    fn sampling_is_seeded() {
        let sched = DiffusionSchedule::new(20, ScheduleKind::Linear).unwrap();
        let opts = SampleOptions {
            frames: 4,
            guidance: 2.5,
            seed: 11,
        };
        let a = sample_normalized(&Tagged, &[vec![3]], 6, &sched, &opts).unwrap();
        let b = sample_normalized(&Tagged, &[vec![3]], 6, &sched, &opts).unwrap();
        assert_eq!(a, b);
        let c = sample_normalized(&Tagged, &[vec![3]], 6, &sched, &SampleOptions { seed: 12, ..opts }).unwrap();
        assert_ne!(a, c);
    }
}
