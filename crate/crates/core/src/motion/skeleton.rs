use nalgebra::Vector3;

use super::FeatureLayout;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum JointRole {
    Root,
    LeftFoot,
    RightFoot,
    LeftHand,
    RightHand,
    /// `k`-th link of the spine chain above the root.
    Spine(usize),
}

/// Toy skeleton: a root, single-segment legs and arms, and an optional spine
/// chain for larger joint counts.
///
/// Joint order is root, left foot, right foot, left hand, right hand, then
/// spine links bottom to top. Skeletons with 3 or 4 joints keep a prefix of
/// that order. Local axes: `+x` left, `+y` up, `+z` forward.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Skeleton {
    joints: usize,
}

pub const LEG_LENGTH: f64 = 0.9;
pub const HIP_WIDTH: f64 = 0.1;
pub const SHOULDER_WIDTH: f64 = 0.18;
pub const SHOULDER_HEIGHT: f64 = 0.45;
pub const ARM_LENGTH: f64 = 0.55;
pub const SPINE_HEIGHT: f64 = 0.6;

impl Skeleton {
    pub fn new(joints: usize) -> Result<Self> {
        if joints < FeatureLayout::MIN_JOINTS {
            return Err(Error::Layout(format!("skeleton needs at least 3 joints, got {joints}")));
        }
        Ok(Skeleton { joints })
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    pub fn layout(&self) -> FeatureLayout {
        FeatureLayout::new(self.joints).expect("validated joint count")
    }

    pub fn role(&self, j: usize) -> JointRole {
        match j {
            0 => JointRole::Root,
            1 => JointRole::LeftFoot,
            2 => JointRole::RightFoot,
            3 => JointRole::LeftHand,
            4 => JointRole::RightHand,
            k => JointRole::Spine(k - 5),
        }
    }

    pub fn parent(&self, j: usize) -> Option<usize> {
        match j {
            0 => None,
            1..=5 => Some(0),
            k => Some(k - 1),
        }
    }

    /// Indices of the left and right foot joints.
    pub fn feet(&self) -> [usize; 2] {
        [1, 2]
    }

    pub fn spine_links(&self) -> usize {
        self.joints.saturating_sub(5)
    }

    /// Root-relative position of joint `j` in the rest pose.
    pub fn rest_offset(&self, j: usize) -> Vector3<f64> {
        match self.role(j) {
            JointRole::Root => Vector3::zeros(),
            JointRole::LeftFoot => Vector3::new(HIP_WIDTH, -LEG_LENGTH, 0.0),
            JointRole::RightFoot => Vector3::new(-HIP_WIDTH, -LEG_LENGTH, 0.0),
            JointRole::LeftHand => Vector3::new(SHOULDER_WIDTH, SHOULDER_HEIGHT - ARM_LENGTH, 0.0),
            JointRole::RightHand => Vector3::new(-SHOULDER_WIDTH, SHOULDER_HEIGHT - ARM_LENGTH, 0.0),
            JointRole::Spine(k) => Vector3::new(0.0, SPINE_HEIGHT * (k + 1) as f64 / self.spine_links() as f64, 0.0),
        }
    }

    /// Unit direction of the segment ending at `j` in the rest pose.
    pub fn rest_direction(&self, j: usize) -> Vector3<f64> {
        let parent = self.parent(j).expect("root has no segment");
        (self.rest_offset(j) - self.rest_offset(parent)).normalize()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_skeleton_roles() {
        let s = Skeleton::new(5).unwrap();
        assert_eq!(s.role(3), JointRole::LeftHand);
        assert_eq!(s.parent(4), Some(0));
        assert_eq!(s.layout().dim(), 59);
    }

    #[test]
    fn spine_is_a_chain() {
        let s = Skeleton::new(22).unwrap();
        assert_eq!(s.spine_links(), 17);
        assert_eq!(s.parent(5), Some(0));
        assert_eq!(s.parent(21), Some(20));
        assert!((s.rest_offset(21).y - SPINE_HEIGHT).abs() < 1e-12);
        for j in 1..22 {
            assert!((s.rest_direction(j).norm() - 1.0).abs() < 1e-12);
        }
    }
}
