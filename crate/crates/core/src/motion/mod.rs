//! Pose features, the toy motion corpus, normalization and motion files.

pub mod io;
pub mod kinematics;
mod layout;
mod sequence;
mod skeleton;
mod stats;
pub mod toy;

pub use io::{read_motion, read_motion_dir, write_motion, write_motion_dir};
pub use kinematics::{encode, to_global, to_global_from, Trajectory, CONTACT_THRESHOLD};
pub use layout::FeatureLayout;
pub use sequence::{LabeledClip, MotionSequence};
pub use skeleton::{JointRole, Skeleton};
pub use stats::{FeatureStats, EPS_NORM};
pub use toy::{generate_toy_dataset, ToySpec};
