//! Conversion between world-space joint trajectories and pose features.

use nalgebra::{Rotation3, Unit, Vector3};

use super::{LabeledClip, MotionSequence, Skeleton};
use crate::error::{Error, Result};

/// Foot height under which a foot counts as planted.
pub const CONTACT_THRESHOLD: f64 = 0.05;

/// Rotation about the vertical axis: `[[c, 0, s], [0, 1, 0], [-s, 0, c]]`.
pub fn yaw_rotation(theta: f64) -> Rotation3<f64> {
    Rotation3::from_axis_angle(&Vector3::y_axis(), theta)
}

/// First two columns of a rotation matrix, column-major.
pub fn rotation_6d(r: &Rotation3<f64>) -> [f64; 6] {
    let m = r.matrix();
    [m[(0, 0)], m[(1, 0)], m[(2, 0)], m[(0, 1)], m[(1, 1)], m[(2, 1)]]
}

/// Shortest-arc rotation taking unit vector `from` onto the direction of `to`.
pub fn align_rotation(from: &Vector3<f64>, to: &Vector3<f64>) -> Rotation3<f64> {
    let to = to.normalize();
    Rotation3::rotation_between(from, &to).unwrap_or_else(|| {
        // antiparallel: any axis orthogonal to `from` works
        let helper = if from.x.abs() < 0.9 { Vector3::x() } else { Vector3::z() };
        Rotation3::from_axis_angle(&Unit::new_normalize(from.cross(&helper)), std::f64::consts::PI)
    })
}

/// A world-space trajectory in the form the feature encoder consumes.
///
/// `local[n][j]` is joint `j` relative to the root, expressed in the heading
/// frame at frame `n`; entry 0 (the root) is ignored.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub yaw: Vec<f64>,
    pub root: Vec<Vector3<f64>>,
    pub local: Vec<Vec<Vector3<f64>>>,
}

impl Trajectory {
    pub fn frames(&self) -> usize {
        self.yaw.len()
    }

    pub fn world(&self) -> Vec<Vec<Vector3<f64>>> {
        (0..self.frames())
            .map(|n| {
                let r = yaw_rotation(self.yaw[n]);
                let mut joints = vec![self.root[n]];
                joints.extend(self.local[n].iter().skip(1).map(|q| self.root[n] + r * q));
                joints
            })
            .collect()
    }
}

/// Encodes a trajectory into pose features.
///
/// Velocities at frame `n` are displacements to frame `n + 1` expressed in
/// the heading frame at `n`; the last frame repeats the previous one.
pub fn encode(skeleton: &Skeleton, traj: &Trajectory) -> Result<MotionSequence> {
    let layout = skeleton.layout();
    let (nf, j) = (traj.frames(), skeleton.joints());
    if nf < 2 || traj.root.len() != nf || traj.local.len() != nf || traj.local.iter().any(|l| l.len() != j) {
        return Err(Error::Invalid(format!("inconsistent trajectory for {j} joints over {nf} frames")));
    }
    let world = traj.world();
    let [lf, rf] = skeleton.feet();
    let mut data = Vec::with_capacity(nf * layout.dim());
    for n in 0..nf {
        let (a, b) = if n + 1 < nf { (n, n + 1) } else { (n - 1, n) };
        let inv = yaw_rotation(traj.yaw[a]).inverse();
        let dyaw = traj.yaw[b] - traj.yaw[a];
        let v = inv * (traj.root[b] - traj.root[a]);
        data.extend([dyaw, v.x, v.z, traj.root[n].y]);
        for q in &traj.local[n][1..] {
            data.extend([q.x, q.y, q.z]);
        }
        for k in 1..j {
            let p = skeleton.parent(k).expect("non-root");
            let seg = traj.local[n][k] - if p == 0 { Vector3::zeros() } else { traj.local[n][p] };
            data.extend(rotation_6d(&align_rotation(&skeleton.rest_direction(k), &seg)));
        }
        for k in 0..j {
            let d = inv * (world[b][k] - world[a][k]);
            data.extend([d.x, d.y, d.z]);
        }
        let cl = f64::from(u8::from(world[n][lf].y < CONTACT_THRESHOLD));
        let cr = f64::from(u8::from(world[n][rf].y < CONTACT_THRESHOLD));
        data.extend([cl, cl, cr, cr]);
    }
    MotionSequence::new(layout, data.into_iter().map(|v| v as f32).collect())
}

/// World joint positions `[N][J]` recovered by integrating root motion,
/// starting at the origin facing `+z`.
pub fn to_global(m: &MotionSequence) -> Vec<Vec<Vector3<f64>>> {
    to_global_from(m, 0.0, Vector3::zeros())
}

/// [`to_global`] with an initial heading and planar start position.
pub fn to_global_from(m: &MotionSequence, initial_yaw: f64, origin: Vector3<f64>) -> Vec<Vec<Vector3<f64>>> {
    let layout = m.layout();
    let j = layout.joints();
    let jp = layout.joint_positions().start;
    let mut yaw = initial_yaw;
    let mut xz = Vector3::new(origin.x, 0.0, origin.z);
    let mut out = Vec::with_capacity(m.frames());
    for n in 0..m.frames() {
        let f = m.frame(n);
        let r = yaw_rotation(yaw);
        let root = Vector3::new(xz.x, f[3] as f64, xz.z);
        let mut joints = Vec::with_capacity(j);
        joints.push(root);
        for k in 0..j - 1 {
            let q = Vector3::new(f[jp + 3 * k] as f64, f[jp + 3 * k + 1] as f64, f[jp + 3 * k + 2] as f64);
            joints.push(root + r * q);
        }
        out.push(joints);
        xz += r * Vector3::new(f[1] as f64, 0.0, f[2] as f64);
        yaw += f[0] as f64;
    }
    out
}

/// World positions of a clip, for external viewers: one line per frame of
/// `J * 3` space-separated coordinates.
pub fn world_dump(clip: &LabeledClip) -> String {
    let mut s = String::new();
    for frame in to_global(&clip.motion) {
        let line: Vec<String> = frame.iter().flat_map(|p| [p.x, p.y, p.z]).map(|v| format!("{v:.5}")).collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    s
}
