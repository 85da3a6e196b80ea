use std::ops::Range;

use crate::error::{Error, Result};

/// Per-frame feature layout for a skeleton of `J` joints.
///
/// Each pose is `F = 12 J - 1` floats, in order:
///
/// | slice | width | meaning |
/// |---|---|---|
/// | root angular velocity | 1 | yaw change per frame (rad) |
/// | root linear velocity | 2 | planar (x, z) velocity in the root frame |
/// | root height | 1 | world y of the root |
/// | joint positions | 3 (J-1) | non-root joints relative to the root, in the root frame |
/// | joint rotations | 6 (J-1) | 6D rotation of the segment ending at each non-root joint |
/// | joint velocities | 3 J | per-joint world displacement to the next frame, in the root frame |
/// | foot contacts | 4 | left heel, left toe, right heel, right toe in [0, 1] |
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureLayout {
    joints: usize,
}

impl FeatureLayout {
    pub const MIN_JOINTS: usize = 3;

    pub fn new(joints: usize) -> Result<Self> {
        if joints < Self::MIN_JOINTS {
            return Err(Error::Layout(format!("need at least {} joints, got {joints}", Self::MIN_JOINTS)));
        }
        Ok(FeatureLayout { joints })
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    pub fn dim(&self) -> usize {
        12 * self.joints - 1
    }

    pub fn root_angular_velocity(&self) -> Range<usize> {
        0..1
    }

    pub fn root_linear_velocity(&self) -> Range<usize> {
        1..3
    }

    pub fn root_height(&self) -> Range<usize> {
        3..4
    }

    pub fn joint_positions(&self) -> Range<usize> {
        4..4 + 3 * (self.joints - 1)
    }

    pub fn joint_rotations(&self) -> Range<usize> {
        let s = self.joint_positions().end;
        s..s + 6 * (self.joints - 1)
    }

    pub fn joint_velocities(&self) -> Range<usize> {
        let s = self.joint_rotations().end;
        s..s + 3 * self.joints
    }

    pub fn foot_contacts(&self) -> Range<usize> {
        let s = self.joint_velocities().end;
        s..s + 4
    }

    /// All slices in order; they partition `0..dim()`.
    pub fn segments(&self) -> [(&'static str, Range<usize>); 7] {
        [
            ("root_angular_velocity", self.root_angular_velocity()),
            ("root_linear_velocity", self.root_linear_velocity()),
            ("root_height", self.root_height()),
            ("joint_positions", self.joint_positions()),
            ("joint_rotations", self.joint_rotations()),
            ("joint_velocities", self.joint_velocities()),
            ("foot_contacts", self.foot_contacts()),
        ]
    }

    /// Infers `J` from a feature width, rejecting widths not of the form `12 J - 1`.
    pub fn from_dim(dim: usize) -> Result<Self> {
        if !(dim + 1).is_multiple_of(12) {
            return Err(Error::Layout(format!("feature width {dim} is not 12*J - 1")));
        }
        Self::new((dim + 1) / 12)
    }
}
