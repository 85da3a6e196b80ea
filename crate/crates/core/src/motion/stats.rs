use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FeatureLayout, LabeledClip, MotionSequence};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Lower bound on per-feature standard deviations.
pub const EPS_NORM: f32 = 1e-2;

/// Per-feature z-normalization statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl FeatureStats {
    pub fn identity(dim: usize) -> Self {
        FeatureStats {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Mean and (population) standard deviation over every frame of `clips`,
    /// with std clamped to at least `eps`.
    pub fn fit(clips: &[LabeledClip], eps: f32) -> Result<Self> {
        let first = clips
            .first()
            .ok_or_else(|| Error::Invalid("cannot fit statistics on no clips".into()))?;
        let f = first.motion.dim();
        let mut sum = vec![0.0f64; f];
        let mut sq = vec![0.0f64; f];
        let mut count = 0usize;
        for c in clips {
            if c.motion.dim() != f {
                return Err(Error::shape("fit_stats", &[f], &[c.motion.dim()]));
            }
            for row in c.motion.data().chunks_exact(f) {
                for (i, &v) in row.iter().enumerate() {
                    sum[i] += v as f64;
                    sq[i] += v as f64 * v as f64;
                }
            }
            count += c.motion.frames();
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| ((s / n - m * m).max(0.0).sqrt() as f32).max(eps))
            .collect();
        Ok(FeatureStats {
            mean: mean.into_iter().map(|m| m as f32).collect(),
            std,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn check(&self, dim: usize) -> Result<()> {
        if dim != self.dim() || self.std.len() != self.dim() {
            return Err(Error::shape("feature_stats", &[self.dim()], &[dim]));
        }
        Ok(())
    }

    /// `(x - mean) / std` per feature, as an `[N, F]` tensor.
    pub fn normalize(&self, m: &MotionSequence) -> Result<Tensor<f32>> {
        self.check(m.dim())?;
        let data = self.normalize_raw(m.data());
        Tensor::new([m.frames(), m.dim()], data)
    }

    pub fn normalize_raw(&self, data: &[f32]) -> Vec<f32> {
        let f = self.dim();
        data.iter()
            .enumerate()
            .map(|(i, &v)| (v - self.mean[i % f]) / self.std[i % f])
            .collect()
    }

    pub fn denormalize_raw(&self, data: &[f32]) -> Vec<f32> {
        let f = self.dim();
        data.iter()
            .enumerate()
            .map(|(i, &v)| v * self.std[i % f] + self.mean[i % f])
            .collect()
    }

    /// Inverse of [`FeatureStats::normalize`]; contacts are clamped into `[0, 1]`.
    pub fn denormalize(&self, x: &Tensor<f32>) -> Result<MotionSequence> {
        let f = *x.shape().last().unwrap_or(&0);
        self.check(f)?;
        MotionSequence::from_generated(FeatureLayout::from_dim(f)?, self.denormalize_raw(x.data()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s: FeatureStats = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if s.mean.len() != s.std.len() || s.std.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::format(path, "inconsistent feature statistics"));
        }
        Ok(s)
    }
}
