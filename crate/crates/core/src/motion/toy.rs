//! Procedural gait synthesizer with ground-truth action and style labels.

use std::f64::consts::PI;

use nalgebra::{Rotation3, Vector3};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::kinematics::{encode, Trajectory};
use super::skeleton::{ARM_LENGTH, HIP_WIDTH, SHOULDER_HEIGHT, SHOULDER_WIDTH, SPINE_HEIGHT};
use super::{JointRole, LabeledClip, Skeleton};
use crate::error::{Error, Result};
use crate::tensor::rng;

/// Action names; the index is the action id.
pub const ACTIONS: [&str; 7] = [
    "walk forward",
    "run forward",
    "idle",
    "walk backward",
    "run backward",
    "walk sideways",
    "run sideways",
];

/// Style names; style id `s` is `STYLES[s - 1]` (id 0 is reserved for neutral).
pub const STYLES: [&str; 6] = ["bounce", "lean", "swing", "highstep", "crouch", "armsup"];

const SPEED_VARIANTS: [(f64, &str); 3] = [(0.75, " slowly"), (1.0, ""), (1.3, " quickly")];

pub fn style_id(name: &str) -> Option<usize> {
    STYLES.iter().position(|s| *s == name).map(|i| i + 1)
}

pub fn style_name(id: usize) -> Option<&'static str> {
    id.checked_sub(1).and_then(|i| STYLES.get(i).copied())
}

pub fn action_id(name: &str) -> Option<usize> {
    ACTIONS.iter().position(|a| *a == name)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToySpec {
    pub joints: usize,
    /// Uses actions `0..n_actions` of [`ACTIONS`].
    pub n_actions: usize,
    /// Uses styles `1..=n_styles` of [`STYLES`].
    pub n_styles: usize,
    pub clips_per_cell: usize,
    pub frames: usize,
    pub seed: u64,
    /// Emit the neutral cell of each action as well as the styled ones.
    pub include_neutral: bool,
}

impl Default for ToySpec {
    fn default() -> Self {
        ToySpec {
            joints: 5,
            n_actions: 3,
            n_styles: 0,
            clips_per_cell: 8,
            frames: 32,
            seed: 0,
            include_neutral: true,
        }
    }
}

impl ToySpec {
    pub fn validate(&self) -> Result<()> {
        if self.joints < 3 {
            return Err(Error::Config(format!("joints must be >= 3, got {}", self.joints)));
        }
        if self.frames < 16 {
            return Err(Error::Config(format!("frames must be >= 16, got {}", self.frames)));
        }
        if self.n_actions == 0 || self.n_actions > ACTIONS.len() {
            return Err(Error::Config(format!("n_actions must be in 1..={}", ACTIONS.len())));
        }
        if self.n_styles > STYLES.len() {
            return Err(Error::Config(format!("n_styles must be <= {}", STYLES.len())));
        }
        if self.clips_per_cell == 0 {
            return Err(Error::Config("clips_per_cell must be positive".into()));
        }
        Ok(())
    }
}

/// Generates every (action, style) cell of `spec`, neutral cells first.
pub fn generate_toy_dataset(spec: &ToySpec) -> Result<Vec<LabeledClip>> {
    spec.validate()?;
    let mut styles: Vec<Option<usize>> = Vec::new();
    if spec.include_neutral || spec.n_styles == 0 {
        styles.push(None);
    }
    styles.extend((1..=spec.n_styles).map(Some));
    let mut out = Vec::new();
    for style in styles {
        for action in 0..spec.n_actions {
            out.extend(generate_cell(
                spec.joints,
                spec.frames,
                action,
                style,
                spec.clips_per_cell,
                spec.seed,
            )?);
        }
    }
    Ok(out)
}

/// `count` clips of one action in one style (or neutral).
pub fn generate_cell(
    joints: usize,
    frames: usize,
    action: usize,
    style: Option<usize>,
    count: usize,
    seed: u64,
) -> Result<Vec<LabeledClip>> {
    let skeleton = Skeleton::new(joints)?;
    if frames < 2 {
        return Err(Error::Config(format!("frames must be >= 2, got {frames}")));
    }
    if action >= ACTIONS.len() {
        return Err(Error::Config(format!("unknown action id {action}")));
    }
    if let Some(s) = style {
        style_name(s).ok_or_else(|| Error::Config(format!("unknown style id {s}")))?;
    }
    (0..count)
        .map(|i| {
            let label = format!("toy/{action}/{}/{i}", style.unwrap_or(0));
            let mut r = rng::stream(seed, &label);
            let variant = i % SPEED_VARIANTS.len();
            let gait = Gait::sample(action, style, variant, &mut r)?;
            let traj = gait.trajectory(&skeleton, frames, &mut r)?;
            let motion = encode(&skeleton, &traj)?;
            LabeledClip::new(motion, Some(action), style, prompt(action, variant))
        })
        .collect()
}

/// Text for an action at a speed variant, e.g. "a person is running forward quickly".
pub fn prompt(action: usize, variant: usize) -> String {
    let base = match action {
        0 => "a person is walking forward",
        1 => "a person is running forward",
        2 => return "a person is standing still".into(),
        3 => "a person is walking backward",
        4 => "a person is running backward",
        5 => "a person is walking sideways",
        _ => "a person is running sideways",
    };
    format!("{base}{}", SPEED_VARIANTS[variant % SPEED_VARIANTS.len()].1)
}

/// Every word the toy prompts can contain.
pub fn prompt_words() -> Vec<&'static str> {
    vec![
        "a", "person", "is", "walking", "running", "standing", "still", "forward", "backward", "sideways", "slowly", "quickly",
    ]
}

#[derive(Clone, Copy, Debug)]
struct Gait {
    speed: f64,
    freq: f64,
    stride: f64,
    arm_amp: f64,
    arm_base: f64,
    bounce: f64,
    lift: f64,
    root_height: f64,
    lean: f64,
    direction: Vector3<f64>,
    phase: f64,
    scale: f64,
    yaw_rate: f64,
}

impl Gait {
    fn sample(action: usize, style: Option<usize>, variant: usize, r: &mut rng::Rng) -> Result<Self> {
        let normal = |std: f64| Normal::new(0.0, std).map_err(|e| Error::Invalid(e.to_string()));
        let kind = action % 2; // walk-like 0, run-like 1 (idle handled separately)
        let (speed, freq, leg, arm, bounce, lift, height): (f64, f64, f64, f64, f64, f64, f64) = match (action, kind) {
            (2, _) => (0.0, 1.0 / 30.0, 0.05, 0.05, 0.01, 0.03, 0.92),
            (_, 1) => (0.15, 1.0 / 16.0, 0.6, 0.6, 0.04, 0.10, 0.88),
            _ => (0.06, 1.0 / 24.0, 0.35, 0.3, 0.02, 0.06, 0.92),
        };
        let direction = match action {
            3 | 4 => -Vector3::z(),
            5 | 6 => Vector3::x(),
            _ => Vector3::z(),
        };
        let factor = SPEED_VARIANTS[variant % SPEED_VARIANTS.len()].0;
        let mut jit = || r.gen_range(0.9..1.1);
        let mut g = Gait {
            speed: speed * factor,
            freq: freq * factor.sqrt() * jit(),
            stride: LEG_SWING * leg.sin() * factor * jit(),
            arm_amp: arm * jit(),
            arm_base: 0.0,
            bounce: bounce * jit(),
            lift: lift * jit(),
            root_height: height,
            lean: 0.0,
            direction,
            phase: 0.0,
            scale: 1.0,
            yaw_rate: 0.0,
        };
        if action == 5 || action == 6 {
            g.stride *= 0.5;
        }
        g.phase = r.gen_range(0.0..2.0 * PI);
        g.scale = r.gen_range(0.95..1.05);
        g.yaw_rate = normal(0.004)?.sample(r);
        g.lean = normal(0.03)?.sample(r);
        match style {
            None => {}
            Some(1) => g.bounce = g.bounce * 3.0 + 0.06,
            Some(2) => g.lean += 0.35,
            Some(3) => g.arm_amp += 0.8,
            Some(4) => g.lift += 0.18,
            Some(5) => g.root_height -= 0.22,
            Some(6) => g.arm_base += 1.3,
            Some(s) => return Err(Error::Config(format!("unknown style id {s}"))),
        }
        Ok(g)
    }

    fn trajectory(&self, skel: &Skeleton, frames: usize, r: &mut rng::Rng) -> Result<Trajectory> {
        let noise = Normal::new(0.0, 0.003).map_err(|e| Error::Invalid(e.to_string()))?;
        let s = self.scale;
        let mut yaw = Vec::with_capacity(frames);
        let mut root = Vec::with_capacity(frames);
        let mut local = Vec::with_capacity(frames);
        let mut xz = Vector3::zeros();
        for n in 0..frames {
            let theta = self.yaw_rate * n as f64;
            let phi = 2.0 * PI * self.freq * n as f64 + self.phase;
            let height = self.root_height * s + self.bounce * (2.0 * phi).cos();
            let roll = self.lean + 0.03 * phi.sin();
            let upper = Rotation3::from_axis_angle(&Vector3::z_axis(), roll);
            let mut joints = vec![Vector3::zeros(); skel.joints()];
            for (j, q) in joints.iter_mut().enumerate().skip(1) {
                *q = match skel.role(j) {
                    JointRole::Root => unreachable!("root skipped"),
                    JointRole::LeftFoot | JointRole::RightFoot => {
                        let side = if skel.role(j) == JointRole::LeftFoot { 1.0 } else { -1.0 };
                        let swing = self.stride * s * side * phi.sin();
                        let foot_y = 0.01 + self.lift * (side * phi.cos()).max(0.0);
                        Vector3::new(side * HIP_WIDTH * s, foot_y - height, 0.0) + self.direction * swing
                    }
                    JointRole::LeftHand | JointRole::RightHand => {
                        let side = if skel.role(j) == JointRole::LeftHand { 1.0 } else { -1.0 };
                        let a = self.arm_base - side * self.arm_amp * phi.sin();
                        let shoulder = Vector3::new(side * SHOULDER_WIDTH, SHOULDER_HEIGHT, 0.0);
                        upper * ((shoulder + ARM_LENGTH * Vector3::new(0.0, -a.cos(), a.sin())) * s)
                    }
                    JointRole::Spine(k) => {
                        let h = SPINE_HEIGHT * (k + 1) as f64 / skel.spine_links() as f64;
                        upper * Vector3::new(0.0, h * s, 0.0)
                    }
                };
                *q += Vector3::new(noise.sample(r), noise.sample(r), noise.sample(r));
            }
            yaw.push(theta);
            root.push(Vector3::new(xz.x, height, xz.z));
            local.push(joints);
            xz += super::kinematics::yaw_rotation(theta) * (self.direction * self.speed * s);
        }
        Ok(Trajectory { yaw, root, local })
    }
}

/// Leg length used to turn swing angles into stride lengths.
const LEG_SWING: f64 = super::skeleton::LEG_LENGTH;
