use super::FeatureLayout;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `N` poses of `F = 12 J - 1` features each, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionSequence {
    layout: FeatureLayout,
    frames: usize,
    data: Vec<f32>,
}

impl MotionSequence {
    /// Validates shape, finiteness and the contact range.
    pub fn new(layout: FeatureLayout, data: Vec<f32>) -> Result<Self> {
        let f = layout.dim();
        if !data.len().is_multiple_of(f) {
            return Err(Error::Layout(format!(
                "{} values is not a whole number of {f}-wide frames",
                data.len()
            )));
        }
        let frames = data.len() / f;
        if frames < 2 {
            return Err(Error::Invalid(format!("a motion needs at least 2 frames, got {frames}")));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite feature at frame {}, index {}", i / f, i % f)));
        }
        let contacts = layout.foot_contacts();
        for (n, row) in data.chunks_exact(f).enumerate() {
            if row[contacts.clone()].iter().any(|c| !(0.0..=1.0).contains(c)) {
                return Err(Error::Invalid(format!("foot contact outside [0, 1] at frame {n}")));
            }
        }
        Ok(MotionSequence { layout, frames, data })
    }

    /// Like [`MotionSequence::new`] but clamps contacts into `[0, 1]` first,
    /// as needed for model outputs.
    pub fn from_generated(layout: FeatureLayout, mut data: Vec<f32>) -> Result<Self> {
        let f = layout.dim();
        let contacts = layout.foot_contacts();
        for row in data.chunks_exact_mut(f) {
            row[contacts.clone()].iter_mut().for_each(|c| *c = c.clamp(0.0, 1.0));
        }
        Self::new(layout, data)
    }

    pub fn layout(&self) -> FeatureLayout {
        self.layout
    }

    pub fn joints(&self) -> usize {
        self.layout.joints()
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.layout.dim()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn frame(&self, n: usize) -> &[f32] {
        let f = self.dim();
        &self.data[n * f..(n + 1) * f]
    }

    /// Values of one feature across all frames.
    pub fn column(&self, i: usize) -> impl Iterator<Item = f32> + '_ {
        self.data.iter().skip(i).step_by(self.dim()).copied()
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new([self.frames, self.dim()], self.data.clone()).expect("consistent shape")
    }
}

/// A motion with its action, optional style, and text prompt.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledClip {
    pub motion: MotionSequence,
    pub action_id: Option<usize>,
    /// `Some` exactly when the clip belongs to a style set.
    pub style_id: Option<usize>,
    pub prompt: String,
}

impl LabeledClip {
    pub fn new(motion: MotionSequence, action_id: Option<usize>, style_id: Option<usize>, prompt: impl Into<String>) -> Result<Self> {
        let prompt = prompt.into();
        if prompt.trim().is_empty() {
            return Err(Error::Invalid("clip prompt is empty".into()));
        }
        Ok(LabeledClip {
            motion,
            action_id,
            style_id,
            prompt,
        })
    }
}
