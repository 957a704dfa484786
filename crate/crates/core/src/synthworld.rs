//! Synthetic articulated figures with exact ground truth.
//!
//! A person is eight 2D capsules (head, torso, upper/lower arms, legs) drawn
//! in painter's order over a smooth background. Every capsule carries an
//! analytic UV chart: `u` runs along the spine including both end caps and
//! `v` across it, so part identity, UV coordinates and the texture atlas are
//! known exactly. The ground-truth image is produced by the renderer from
//! those signals, which makes every frame exactly realizable by the model.
//!
//! World coordinates are normalized to the image, `x = (px + 0.5) / size`.
//! Keypoints are reported in pixels.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::bundle::{Bundle, DATA_MAGIC};
use crate::error::{Error, Result};
use crate::renderer::render;
use crate::tensor::Tensor;

pub const N_BASE_PARTS: usize = 8;
pub const BASE_PART_NAMES: [&str; N_BASE_PARTS] =
    ["head", "torso", "l_upper_arm", "l_lower_arm", "r_upper_arm", "r_lower_arm", "l_leg", "r_leg"];

pub const N_JOINTS: usize = 16;
pub const JOINT_NAMES: [&str; N_JOINTS] = [
    "head_top", "neck", "chest", "pelvis", "l_shoulder", "l_elbow", "l_wrist", "r_shoulder", "r_elbow",
    "r_wrist", "l_hip", "l_knee", "l_ankle", "r_hip", "r_knee", "r_ankle",
];
const PELVIS: usize = 3;

/// Stickman bones: the 15 tree edges of the skeleton plus the shoulder and
/// hip lines. Channel `i` draws bone `i`; the last channel is a root disc at
/// the pelvis.
pub const BONES: [(usize, usize); 17] = [
    (1, 0),
    (1, 2),
    (2, 3),
    (1, 4),
    (4, 5),
    (5, 6),
    (1, 7),
    (7, 8),
    (8, 9),
    (3, 10),
    (10, 11),
    (11, 12),
    (3, 13),
    (13, 14),
    (14, 15),
    (4, 7),
    (10, 13),
];
pub const STICKMAN_CHANNELS: usize = BONES.len() + 1;

/// Spine endpoints (joint indices) of each base part.
pub const PART_JOINTS: [(usize, usize); N_BASE_PARTS] =
    [(1, 0), (3, 1), (4, 5), (5, 6), (7, 8), (8, 9), (10, 12), (13, 15)];

/// Joint angles driven by the motion model, in this order.
pub const ANGLE_NAMES: [&str; 8] =
    ["lean", "head_tilt", "l_shoulder", "l_elbow", "r_shoulder", "r_elbow", "l_hip", "r_hip"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    /// Body parts; a multiple of 8 splits every capsule into equal axial segments.
    pub n_parts: usize,
    pub image_size: usize,
    pub atlas_size: usize,
    pub persons_train: usize,
    pub persons_test: usize,
    pub frames_per_person: usize,
    pub seed: u64,
    /// Largest per-frame change of any joint angle, radians.
    pub max_angle_delta: f64,
    /// Stickman line width in pixels.
    pub stick_width: f64,
    /// Relative spread of limb lengths and widths between persons.
    pub shape_variation: f64,
}

impl WorldConfig {
    pub fn desk() -> Self {
        Self {
            n_parts: 8,
            image_size: 64,
            atlas_size: 32,
            persons_train: 6,
            persons_test: 2,
            frames_per_person: 200,
            seed: 0,
            max_angle_delta: 0.15,
            stick_width: 2.0,
            shape_variation: 0.25,
        }
    }

    pub fn paper() -> Self {
        Self {
            n_parts: 24,
            image_size: 256,
            atlas_size: 128,
            persons_train: 50,
            persons_test: 12,
            frames_per_person: 1000,
            seed: 0,
            max_angle_delta: 0.15,
            stick_width: 6.0,
            shape_variation: 0.25,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_parts == 0 || self.n_parts % N_BASE_PARTS != 0 {
            return Err(Error::config("world.n_parts", format!("must be a positive multiple of 8, got {}", self.n_parts)));
        }
        if self.image_size < 8 {
            return Err(Error::config("world.image_size", "must be at least 8"));
        }
        if self.atlas_size < 2 {
            return Err(Error::config("world.atlas_size", "must be at least 2"));
        }
        if self.frames_per_person == 0 {
            return Err(Error::config("world.frames_per_person", "must be positive"));
        }
        if !(self.max_angle_delta > 0.0 && self.max_angle_delta.is_finite()) {
            return Err(Error::config("world.max_angle_delta", "must be positive"));
        }
        if !(self.stick_width > 0.0 && self.stick_width.is_finite()) {
            return Err(Error::config("world.stick_width", "must be positive"));
        }
        if !(0.0..0.9).contains(&self.shape_variation) {
            return Err(Error::config("world.shape_variation", "must lie in [0, 0.9)"));
        }
        Ok(())
    }

    pub fn segments_per_part(&self) -> usize {
        self.n_parts / N_BASE_PARTS
    }
}

/// Mix a base seed with a path of indices into an independent stream seed.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    path.iter().fold(splitmix(base), |acc, &p| splitmix(acc ^ splitmix(p)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PartTexture {
    Solid { color: [f64; 3] },
    Stripe { a: [f64; 3], b: [f64; 3], freq: f64, along_u: bool },
    Checker { a: [f64; 3], b: [f64; 3], cells: usize },
}

impl PartTexture {
    pub fn eval(&self, u: f64, v: f64) -> [f64; 3] {
        match self {
            PartTexture::Solid { color } => *color,
            PartTexture::Stripe { a, b, freq, along_u } => {
                let t = if *along_u { u } else { v };
                if (t * freq).fract() < 0.5 { *a } else { *b }
            }
            PartTexture::Checker { a, b, cells } => {
                let c = *cells as f64;
                let i = ((u * c).floor() as i64).min(*cells as i64 - 1);
                let j = ((v * c).floor() as i64).min(*cells as i64 - 1);
                if (i + j) % 2 == 0 { *a } else { *b }
            }
        }
    }

    fn colors(&self) -> Vec<[f64; 3]> {
        match self {
            PartTexture::Solid { color } => vec![*color],
            PartTexture::Stripe { a, b, .. } | PartTexture::Checker { a, b, .. } => vec![*a, *b],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackgroundSpec {
    /// Corner colors: top-left, top-right, bottom-left, bottom-right.
    pub corners: [[f64; 3]; 4],
    pub wave_amplitude: f64,
    pub wave_freq: [f64; 2],
    pub wave_phase: f64,
}

impl BackgroundSpec {
    pub fn eval(&self, x: f64, y: f64) -> [f64; 3] {
        let wave = self.wave_amplitude * (2.0 * PI * (self.wave_freq[0] * x + self.wave_freq[1] * y) + self.wave_phase).sin();
        let mut out = [0.0; 3];
        for (c, o) in out.iter_mut().enumerate() {
            let top = self.corners[0][c] * (1.0 - x) + self.corners[1][c] * x;
            let bot = self.corners[2][c] * (1.0 - x) + self.corners[3][c] * x;
            *o = (top * (1.0 - y) + bot * y + wave).clamp(0.0, 1.0);
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Oscillator {
    pub base: f64,
    pub amplitude: f64,
    pub freq: f64,
    pub phase: f64,
}

impl Oscillator {
    pub fn at(&self, t: f64) -> f64 {
        self.base + self.amplitude * (self.freq * t + self.phase).sin()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionSpec {
    pub angles: Vec<Oscillator>,
    pub root_x: Oscillator,
    pub root_y: Oscillator,
    /// An arm is drawn in front of the torso while its oscillator is positive.
    pub arm_depth: [Oscillator; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BodyShape {
    /// Spine length per base part, normalized units.
    pub lengths: [f64; N_BASE_PARTS],
    pub radii: [f64; N_BASE_PARTS],
    pub shoulder_offset: f64,
    pub hip_offset: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PersonSpec {
    pub person_id: String,
    pub seed: u64,
    pub n_parts: usize,
    pub shape: BodyShape,
    pub part_textures: Vec<PartTexture>,
    pub background: BackgroundSpec,
    pub motion: MotionSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseSample {
    pub joint_angles: Vec<f64>,
    /// Pelvis position, normalized units.
    pub root_position: [f64; 2],
    pub arm_front: [bool; 2],
    /// Joint positions, normalized units (unclamped).
    pub joints: Vec<[f64; 2]>,
}

impl PoseSample {
    /// Keypoints in pixels for a square image, clamped to the image.
    pub fn keypoints(&self, size: usize) -> Vec<[f64; 2]> {
        let s = size as f64;
        self.joints.iter().map(|j| [(j[0] * s).clamp(0.0, s), (j[1] * s).clamp(0.0, s)]).collect()
    }
}

fn random_color<R: Rng>(rng: &mut R) -> [f64; 3] {
    [rng.random_range(0.05..0.95), rng.random_range(0.05..0.95), rng.random_range(0.05..0.95)]
}

fn random_texture<R: Rng>(rng: &mut R) -> PartTexture {
    let a = random_color(rng);
    // second color is a shifted shade of the first so part palettes stay distinct
    let b = a.map(|c: f64| (c + rng.random_range(-0.3..0.3)).clamp(0.0, 1.0));
    match rng.random_range(0..3) {
        0 => PartTexture::Solid { color: a },
        1 => PartTexture::Stripe { a, b, freq: rng.random_range(2..5) as f64, along_u: rng.random_bool(0.5) },
        _ => PartTexture::Checker { a, b, cells: rng.random_range(2..5) },
    }
}

fn oscillator<R: Rng>(rng: &mut R, base: f64, amp: (f64, f64), max_delta: f64) -> Oscillator {
    let amplitude = rng.random_range(amp.0..amp.1);
    let mut freq = rng.random_range(0.03..0.12);
    if amplitude * freq > max_delta {
        freq = max_delta / amplitude;
    }
    Oscillator { base, amplitude, freq, phase: rng.random_range(0.0..2.0 * PI) }
}

/// Deterministic person for a seed.
pub fn make_person(seed: u64, config: &WorldConfig) -> PersonSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let var = config.shape_variation;
    let mut jitter = |x: f64| x * (1.0 + rng.random_range(-var..=var));
    let (head, torso, upper, lower, leg) = (jitter(0.07), jitter(0.24), jitter(0.13), jitter(0.12), jitter(0.30));
    let (rh, rt, ru, rl, rleg) = (jitter(0.065), jitter(0.08), jitter(0.034), jitter(0.03), jitter(0.042));
    let shape = BodyShape {
        lengths: [head, torso, upper, lower, upper, lower, leg, leg],
        radii: [rh, rt, ru, rl, ru, rl, rleg, rleg],
        shoulder_offset: 0.9 * rt,
        hip_offset: 0.55 * rt,
    };
    let part_textures = (0..config.n_parts).map(|_| random_texture(&mut rng)).collect();
    let background = BackgroundSpec {
        corners: [random_color(&mut rng), random_color(&mut rng), random_color(&mut rng), random_color(&mut rng)],
        wave_amplitude: rng.random_range(0.0..0.08),
        wave_freq: [rng.random_range(0.5..2.0), rng.random_range(0.5..2.0)],
        wave_phase: rng.random_range(0.0..2.0 * PI),
    };
    let d = config.max_angle_delta;
    let shoulder = rng.random_range(0.3..0.8);
    let elbow = rng.random_range(0.2..0.8);
    let hip = rng.random_range(0.05..0.25);
    let angles = vec![
        oscillator(&mut rng, 0.0, (0.0, 0.12), d),
        oscillator(&mut rng, 0.0, (0.0, 0.25), d),
        oscillator(&mut rng, shoulder, (0.3, 0.9), d),
        oscillator(&mut rng, elbow, (0.2, 0.6), d),
        oscillator(&mut rng, shoulder, (0.3, 0.9), d),
        oscillator(&mut rng, elbow, (0.2, 0.6), d),
        oscillator(&mut rng, hip, (0.05, 0.3), d),
        oscillator(&mut rng, hip, (0.05, 0.3), d),
    ];
    let root_x = Oscillator {
        base: 0.5,
        amplitude: rng.random_range(0.0..0.08),
        freq: rng.random_range(0.01..0.04),
        phase: rng.random_range(0.0..2.0 * PI),
    };
    let root_y = Oscillator {
        base: 0.5 + rng.random_range(-0.02..0.02),
        amplitude: rng.random_range(0.0..0.02),
        freq: rng.random_range(0.01..0.04),
        phase: rng.random_range(0.0..2.0 * PI),
    };
    let mut depth = || Oscillator { base: 0.0, amplitude: 1.0, freq: rng.random_range(0.02..0.06), phase: rng.random_range(0.0..2.0 * PI) };
    let arm_depth = [depth(), depth()];
    PersonSpec {
        person_id: format!("p{seed:016x}"),
        seed,
        n_parts: config.n_parts,
        shape,
        part_textures,
        background,
        motion: MotionSpec { angles, root_x, root_y, arm_depth },
    }
}

fn rot(v: [f64; 2], a: f64) -> [f64; 2] {
    let (s, c) = a.sin_cos();
    [c * v[0] - s * v[1], s * v[0] + c * v[1]]
}

fn add(a: [f64; 2], b: [f64; 2], k: f64) -> [f64; 2] {
    [a[0] + k * b[0], a[1] + k * b[1]]
}

impl PersonSpec {
    /// Pose at a frame index of this person's motion.
    pub fn pose(&self, frame: usize) -> PoseSample {
        let t = frame as f64;
        let m = &self.motion;
        let angles: Vec<f64> = m.angles.iter().map(|o| o.at(t)).collect();
        let root = [m.root_x.at(t), m.root_y.at(t)];
        let arm_front = [m.arm_depth[0].at(t) > 0.0, m.arm_depth[1].at(t) > 0.0];
        self.pose_from(angles, root, arm_front)
    }

    /// Forward kinematics for explicit angles.
    pub fn pose_from(&self, joint_angles: Vec<f64>, root: [f64; 2], arm_front: [bool; 2]) -> PoseSample {
        let s = &self.shape;
        let a = &joint_angles;
        let lean = a[0];
        // body frame: `up` along the torso, `side` towards the figure's left (+x when upright)
        let up = rot([0.0, -1.0], lean);
        let side = rot([1.0, 0.0], lean);
        let down = [-up[0], -up[1]];
        let pelvis = root;
        let neck = add(pelvis, up, s.lengths[1]);
        let chest = add(pelvis, up, 0.5 * s.lengths[1]);
        let head_top = add(neck, rot(up, a[1]), s.lengths[0]);
        let mut joints = vec![[0.0; 2]; N_JOINTS];
        joints[0] = head_top;
        joints[1] = neck;
        joints[2] = chest;
        joints[3] = pelvis;
        for (side_sign, base) in [(1.0, 4usize), (-1.0, 7usize)] {
            let angle_idx = if side_sign > 0.0 { 2 } else { 4 };
            let shoulder = add(add(neck, side, side_sign * s.shoulder_offset), down, 0.25 * s.radii[1]);
            let upper_dir = rot(down, -side_sign * a[angle_idx]);
            let elbow = add(shoulder, upper_dir, s.lengths[2]);
            let lower_dir = rot(upper_dir, -side_sign * a[angle_idx + 1]);
            let wrist = add(elbow, lower_dir, s.lengths[3]);
            joints[base] = shoulder;
            joints[base + 1] = elbow;
            joints[base + 2] = wrist;
        }
        for (side_sign, base, angle_idx) in [(1.0, 10usize, 6usize), (-1.0, 13, 7)] {
            let hip = add(pelvis, side, side_sign * s.hip_offset);
            let ankle = add(hip, rot(down, -side_sign * a[angle_idx]), s.lengths[6]);
            joints[base] = hip;
            joints[base + 1] = [(hip[0] + ankle[0]) / 2.0, (hip[1] + ankle[1]) / 2.0];
            joints[base + 2] = ankle;
        }
        PoseSample { joint_angles, root_position: root, arm_front, joints }
    }

    /// Base parts from back to front.
    pub fn paint_order(&self, pose: &PoseSample) -> Vec<usize> {
        let mut depth = [0.0, 1.0, 2.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        for (side, upper) in [(0, 2), (1, 4)] {
            let d = if pose.arm_front[side] { 3.0 } else { 0.5 };
            depth[upper] = d + 0.01 * side as f64;
            depth[upper + 1] = d + 0.1 + 0.01 * side as f64;
        }
        let mut order: Vec<usize> = (0..N_BASE_PARTS).collect();
        order.sort_by(|&a, &b| depth[a].total_cmp(&depth[b]).then(a.cmp(&b)));
        order
    }

    /// Ground-truth atlas `[n, 3, A, A]`, sampled at texel centers with the
    /// renderer's align-corners convention.
    pub fn gt_atlas(&self, atlas_size: usize) -> Tensor {
        let a = atlas_size;
        let scale = (a - 1) as f64;
        let mut out = Tensor::zeros(&[self.n_parts, 3, a, a]);
        for (k, tex) in self.part_textures.iter().enumerate() {
            for y in 0..a {
                for x in 0..a {
                    let rgb = tex.eval(x as f64 / scale, y as f64 / scale);
                    for c in 0..3 {
                        out[((k * 3 + c) * a + y) * a + x] = rgb[c] as f32;
                    }
                }
            }
        }
        out
    }

    pub fn background_image(&self, size: usize) -> Tensor {
        let mut out = Tensor::zeros(&[3, size, size]);
        for y in 0..size {
            for x in 0..size {
                let rgb = self.background.eval((x as f64 + 0.5) / size as f64, (y as f64 + 0.5) / size as f64);
                for c in 0..3 {
                    out[(c * size + y) * size + x] = rgb[c] as f32;
                }
            }
        }
        out
    }

    /// Mean texture color of every part.
    pub fn palette(&self) -> Vec<[f64; 3]> {
        self.part_textures
            .iter()
            .map(|t| {
                let cs = t.colors();
                let mut m = [0.0; 3];
                for c in &cs {
                    for i in 0..3 {
                        m[i] += c[i] / cs.len() as f64;
                    }
                }
                m
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PartialTexture {
    /// `[n, 3, A, A]`, zero where invisible.
    pub atlas: Tensor,
    /// `[n, A, A]`, 1 where a texel received splat weight >= 0.5.
    pub visibility: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GtFrame {
    pub image: Tensor,
    pub mask: Tensor,
    pub scores: Tensor,
    pub uv: Tensor,
    pub keypoints: Vec<[f64; 2]>,
    pub stickman: Tensor,
    pub partial: PartialTexture,
}

struct Capsule {
    a: [f64; 2],
    dir: [f64; 2],
    len: f64,
    r: f64,
}

impl Capsule {
    fn new(a: [f64; 2], b: [f64; 2], r: f64) -> Self {
        let d = [b[0] - a[0], b[1] - a[1]];
        let len = (d[0] * d[0] + d[1] * d[1]).sqrt();
        let dir = if len > 1e-12 { [d[0] / len, d[1] / len] } else { [0.0, 1.0] };
        Self { a, dir, len, r }
    }

    /// (axial, signed perpendicular) coordinates of a point.
    fn local(&self, p: [f64; 2]) -> (f64, f64) {
        let q = [p[0] - self.a[0], p[1] - self.a[1]];
        (q[0] * self.dir[0] + q[1] * self.dir[1], self.dir[0] * q[1] - self.dir[1] * q[0])
    }

    fn contains(&self, s: f64, perp: f64) -> bool {
        let t = s.clamp(0.0, self.len);
        (s - t).powi(2) + perp * perp <= self.r * self.r
    }

    fn uv(&self, s: f64, perp: f64) -> (f64, f64) {
        let u = (s + self.r) / (self.len + 2.0 * self.r);
        let v = (perp / self.r + 1.0) / 2.0;
        (u.clamp(0.0, 1.0), v.clamp(0.0, 1.0))
    }
}

/// Render a ground-truth frame at `size × size`.
pub fn render_gt(person: &PersonSpec, pose: &PoseSample, size: usize, atlas_size: usize, stick_width: f64) -> GtFrame {
    let n = person.n_parts;
    let segs = n / N_BASE_PARTS;
    let hw = size * size;
    let capsules: Vec<Capsule> = (0..N_BASE_PARTS)
        .map(|k| {
            let (i, j) = PART_JOINTS[k];
            Capsule::new(pose.joints[i], pose.joints[j], person.shape.radii[k])
        })
        .collect();
    let order = person.paint_order(pose);
    let mut uv = Tensor::zeros(&[1, 2 * n, size, size]);
    let mut scores = Tensor::zeros(&[1, n + 1, size, size]);
    for py in 0..size {
        for px in 0..size {
            let p = [(px as f64 + 0.5) / size as f64, (py as f64 + 0.5) / size as f64];
            let pix = py * size + px;
            let mut owner = n;
            for &k in &order {
                let c = &capsules[k];
                let (s, perp) = c.local(p);
                if c.contains(s, perp) {
                    let (u, _) = c.uv(s, perp);
                    let seg = ((u * segs as f64).floor() as usize).min(segs - 1);
                    owner = k * segs + seg;
                }
            }
            for (k, c) in capsules.iter().enumerate() {
                let (s, perp) = c.local(p);
                let (u, v) = c.uv(s, perp);
                for seg in 0..segs {
                    let part = k * segs + seg;
                    let ul = (u * segs as f64 - seg as f64).clamp(0.0, 1.0);
                    uv[(2 * part) * hw + pix] = ul as f32;
                    uv[(2 * part + 1) * hw + pix] = v as f32;
                }
            }
            scores[owner * hw + pix] = 1.0;
        }
    }
    let atlas = person.gt_atlas(atlas_size);
    let bg = person.background_image(size).reshape(&[1, 3, size, size]).unwrap();
    let image = render(&atlas, &uv, &scores, Some(&bg)).expect("consistent shapes");
    let mask = Tensor::from_fn(&[1, size, size], |i| 1.0 - scores[n * hw + i]);
    let image = image.reshape(&[3, size, size]).unwrap();
    let uv = uv.reshape(&[2 * n, size, size]).unwrap();
    let scores = scores.reshape(&[n + 1, size, size]).unwrap();
    // stored at f32 precision so frames survive a bundle round trip unchanged
    let keypoints: Vec<[f64; 2]> =
        pose.keypoints(size).iter().map(|k| [k[0] as f32 as f64, k[1] as f32 as f64]).collect();
    let stickman = rasterize_stickman(&keypoints, size, stick_width);
    let partial = extract_partial_texture(&image, &uv, &scores, atlas_size);
    GtFrame { image, mask, scores, uv, keypoints, stickman, partial }
}

/// Length of `[c - 0.5, c + 0.5] ∩ [lo, hi]`.
fn overlap(c: f64, lo: f64, hi: f64) -> f64 {
    ((c + 0.5).min(hi) - (c - 0.5).max(lo)).clamp(0.0, 1.0)
}

fn disc(size: usize, center: [f64; 2], radius: f64, out: &mut [f32]) {
    for py in 0..size {
        for px in 0..size {
            let dx = px as f64 + 0.5 - center[0];
            let dy = py as f64 + 0.5 - center[1];
            let d = (dx * dx + dy * dy).sqrt();
            out[py * size + px] = (radius + 0.5 - d).clamp(0.0, 1.0) as f32;
        }
    }
}

/// Stickman `[channels, size, size]` from pixel keypoints. Each bone is a box-
/// filtered band of width `width`: pixel coverage is the product of its
/// perpendicular and axial overlaps, so an axis-aligned bone of length `L`
/// has total mass `L * width`.
pub fn rasterize_stickman(keypoints: &[[f64; 2]], size: usize, width: f64) -> Tensor {
    let hw = size * size;
    let mut out = Tensor::zeros(&[STICKMAN_CHANNELS, size, size]);
    for (ch, &(i, j)) in BONES.iter().enumerate() {
        let plane = &mut out.data_mut()[ch * hw..(ch + 1) * hw];
        let (a, b) = (keypoints[i], keypoints[j]);
        let d = [b[0] - a[0], b[1] - a[1]];
        let len = (d[0] * d[0] + d[1] * d[1]).sqrt();
        if len < 1e-6 {
            disc(size, a, width / 2.0, plane);
            continue;
        }
        let dir = [d[0] / len, d[1] / len];
        for py in 0..size {
            for px in 0..size {
                let q = [px as f64 + 0.5 - a[0], py as f64 + 0.5 - a[1]];
                let s = q[0] * dir[0] + q[1] * dir[1];
                let perp = dir[0] * q[1] - dir[1] * q[0];
                plane[py * size + px] = (overlap(perp, -width / 2.0, width / 2.0) * overlap(s, 0.0, len)) as f32;
            }
        }
    }
    let root = &mut out.data_mut()[BONES.len() * hw..];
    disc(size, keypoints[PELVIS], width, root);
    out
}

/// Inverse-warp an image into a partial atlas by bilinear splatting.
/// `image [3,H,W]`, `uv [2n,H,W]`, `scores [n+1,H,W]`.
pub fn extract_partial_texture(image: &Tensor, uv: &Tensor, scores: &Tensor, atlas_size: usize) -> PartialTexture {
    let (c_s, h, w) = (scores.shape()[0], scores.shape()[1], scores.shape()[2]);
    let n = c_s - 1;
    let hw = h * w;
    let a = atlas_size;
    let ap = a * a;
    let scale = (a - 1) as f32;
    let mut acc = vec![0f32; n * 3 * ap];
    let mut weight = vec![0f32; n * ap];
    for p in 0..hw {
        let (mut best, mut k) = (f32::NEG_INFINITY, n);
        for c in 0..c_s {
            if scores[c * hw + p] > best {
                best = scores[c * hw + p];
                k = c;
            }
        }
        if k == n || best < 0.5 {
            continue;
        }
        let x = uv[(2 * k) * hw + p].clamp(0.0, 1.0) * scale;
        let y = uv[(2 * k + 1) * hw + p].clamp(0.0, 1.0) * scale;
        let x0 = (x.floor() as usize).min(a - 2);
        let y0 = (y.floor() as usize).min(a - 2);
        let (fx, fy) = (x - x0 as f32, y - y0 as f32);
        for (ty, tx, wgt) in [
            (y0, x0, (1.0 - fx) * (1.0 - fy)),
            (y0, x0 + 1, fx * (1.0 - fy)),
            (y0 + 1, x0, (1.0 - fx) * fy),
            (y0 + 1, x0 + 1, fx * fy),
        ] {
            let t = ty * a + tx;
            weight[k * ap + t] += wgt;
            for c in 0..3 {
                acc[(k * 3 + c) * ap + t] += wgt * image[c * hw + p];
            }
        }
    }
    let mut atlas = Tensor::zeros(&[n, 3, a, a]);
    let mut visibility = Tensor::zeros(&[n, a, a]);
    for k in 0..n {
        for t in 0..ap {
            let wgt = weight[k * ap + t];
            if wgt >= 0.5 {
                visibility[k * ap + t] = 1.0;
                for c in 0..3 {
                    atlas[(k * 3 + c) * ap + t] = acc[(k * 3 + c) * ap + t] / wgt;
                }
            }
        }
    }
    PartialTexture { atlas, visibility }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Anything that can hand out ground-truth frames by (split, person, frame).
pub trait FrameSource: Sync {
    fn config(&self) -> &WorldConfig;
    fn persons(&self, split: Split) -> &[PersonSpec];
    fn frame(&self, split: Split, person: usize, frame: usize) -> Result<GtFrame>;
}

/// The procedural world; frames are regenerated on demand.
#[derive(Clone, Debug)]
pub struct World {
    pub config: WorldConfig,
    pub train: Vec<PersonSpec>,
    pub test: Vec<PersonSpec>,
}

impl World {
    pub fn new(config: WorldConfig) -> Result<Self> {
        config.validate()?;
        let people = |split: Split, count: usize, tag: u64| -> Vec<PersonSpec> {
            (0..count)
                .map(|i| {
                    let mut p = make_person(derive_seed(config.seed, &[tag, i as u64]), &config);
                    p.person_id = format!("{}_{i:03}", if split == Split::Train { "train" } else { "test" });
                    p
                })
                .collect()
        };
        let train = people(Split::Train, config.persons_train, 1);
        let test = people(Split::Test, config.persons_test, 2);
        Ok(Self { config, train, test })
    }

    pub fn render_frame(&self, person: &PersonSpec, frame: usize) -> GtFrame {
        let c = &self.config;
        render_gt(person, &person.pose(frame), c.image_size, c.atlas_size, c.stick_width)
    }
}

impl FrameSource for World {
    fn config(&self) -> &WorldConfig {
        &self.config
    }

    fn persons(&self, split: Split) -> &[PersonSpec] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    fn frame(&self, split: Split, person: usize, frame: usize) -> Result<GtFrame> {
        let p = self
            .persons(split)
            .get(person)
            .ok_or_else(|| Error::Invalid(format!("no {split:?} person {person}")))?;
        if frame >= self.config.frames_per_person {
            return Err(Error::InsufficientFrames {
                person: p.person_id.clone(),
                needed: frame + 1,
                available: self.config.frames_per_person,
            });
        }
        Ok(self.render_frame(p, frame))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PersonRecord {
    pub split: Split,
    pub spec: PersonSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub split: Split,
    pub person: String,
    pub frame: usize,
    pub path: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub format: String,
    pub version: u32,
    pub config: WorldConfig,
    pub persons: Vec<PersonRecord>,
    pub frames: Vec<FrameRecord>,
}

pub const DATASET_FORMAT: &str = "geotex-dataset";

impl DatasetIndex {
    pub fn count(&self, split: Split) -> usize {
        self.frames.iter().filter(|f| f.split == split).count()
    }
}

pub fn frame_to_bundle(frame: &GtFrame, meta: serde_json::Value) -> Bundle {
    let mut b = Bundle::new(meta);
    b.insert("image", frame.image.clone());
    b.insert("mask", frame.mask.clone());
    b.insert("scores", frame.scores.clone());
    b.insert("uv", frame.uv.clone());
    let kp: Vec<f32> = frame.keypoints.iter().flat_map(|k| [k[0] as f32, k[1] as f32]).collect();
    b.insert("keypoints", Tensor::new(&[frame.keypoints.len(), 2], kp).unwrap());
    b.insert("stickman", frame.stickman.clone());
    b.insert("partial_atlas", frame.partial.atlas.clone());
    b.insert("partial_visibility", frame.partial.visibility.clone());
    b
}

pub fn frame_from_bundle(b: &Bundle, config: &WorldConfig) -> Result<GtFrame> {
    let (n, s, a) = (config.n_parts, config.image_size, config.atlas_size);
    let kp = b.get_shaped("keypoints", &[N_JOINTS, 2])?;
    Ok(GtFrame {
        image: b.get_shaped("image", &[3, s, s])?.clone(),
        mask: b.get_shaped("mask", &[1, s, s])?.clone(),
        scores: b.get_shaped("scores", &[n + 1, s, s])?.clone(),
        uv: b.get_shaped("uv", &[2 * n, s, s])?.clone(),
        keypoints: kp.data().chunks(2).map(|c| [c[0] as f64, c[1] as f64]).collect(),
        stickman: b.get_shaped("stickman", &[STICKMAN_CHANNELS, s, s])?.clone(),
        partial: PartialTexture {
            atlas: b.get_shaped("partial_atlas", &[n, 3, a, a])?.clone(),
            visibility: b.get_shaped("partial_visibility", &[n, a, a])?.clone(),
        },
    })
}

/// Refuse a non-empty output directory unless `force`; with `force` its
/// previous contents are removed.
pub fn prepare_output_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_some();
        if non_empty {
            if !force {
                return Err(Error::OutputExists(dir.to_path_buf()));
            }
            fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Write the full dataset for a configuration.
pub fn generate_dataset(config: &WorldConfig, out: &Path, force: bool) -> Result<DatasetIndex> {
    let world = World::new(config.clone())?;
    prepare_output_dir(out, force)?;
    let mut persons = Vec::new();
    let mut jobs = Vec::new();
    for split in [Split::Train, Split::Test] {
        for (pi, p) in world.persons(split).iter().enumerate() {
            persons.push(PersonRecord { split, spec: p.clone() });
            let dir = out.join(&p.person_id);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for f in 0..config.frames_per_person {
                jobs.push((split, pi, f));
            }
        }
    }
    let frames: Vec<FrameRecord> = jobs
        .par_iter()
        .map(|&(split, pi, f)| -> Result<FrameRecord> {
            let p = &world.persons(split)[pi];
            let frame = world.render_frame(p, f);
            let rel = format!("{}/{f:06}.tns", p.person_id);
            let bundle = frame_to_bundle(&frame, json!({"person": p.person_id, "frame": f, "split": split}));
            bundle.write(&out.join(&rel), DATA_MAGIC)?;
            Ok(FrameRecord { split, person: p.person_id.clone(), frame: f, path: rel })
        })
        .collect::<Result<_>>()?;
    let index = DatasetIndex {
        format: DATASET_FORMAT.into(),
        version: 1,
        config: config.clone(),
        persons,
        frames,
    };
    let path = out.join("index.json");
    let text = serde_json::to_string_pretty(&index)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(index)
}

/// A dataset read back from disk.
#[derive(Clone, Debug)]
pub struct DiskDataset {
    pub root: PathBuf,
    pub index: DatasetIndex,
    train: Vec<PersonSpec>,
    test: Vec<PersonSpec>,
}

impl DiskDataset {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join("index.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let index: DatasetIndex = serde_json::from_str(&text)?;
        if index.format != DATASET_FORMAT {
            return Err(Error::Corrupt { path: path.display().to_string(), reason: format!("unknown format {}", index.format) });
        }
        index.config.validate()?;
        let pick = |s: Split| index.persons.iter().filter(|p| p.split == s).map(|p| p.spec.clone()).collect();
        let (train, test) = (pick(Split::Train), pick(Split::Test));
        Ok(Self { root: root.to_path_buf(), index, train, test })
    }
}

impl FrameSource for DiskDataset {
    fn config(&self) -> &WorldConfig {
        &self.index.config
    }

    fn persons(&self, split: Split) -> &[PersonSpec] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    fn frame(&self, split: Split, person: usize, frame: usize) -> Result<GtFrame> {
        let p = self
            .persons(split)
            .get(person)
            .ok_or_else(|| Error::Invalid(format!("no {split:?} person {person}")))?;
        let path = self.root.join(&p.person_id).join(format!("{frame:06}.tns"));
        if !path.exists() {
            return Err(Error::InsufficientFrames {
                person: p.person_id.clone(),
                needed: frame + 1,
                available: self.index.config.frames_per_person,
            });
        }
        frame_from_bundle(&Bundle::read(&path, DATA_MAGIC)?, &self.index.config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn desk() -> WorldConfig {
        WorldConfig::desk()
    }

    fn masked_l1(a: &Tensor, b: &Tensor, mask: &Tensor) -> f64 {
        let hw = mask.len();
        let mut num = 0.0;
        let mut den = 0.0;
        for c in 0..3 {
            for p in 0..hw {
                num += (mask[p] * (a[c * hw + p] - b[c * hw + p])).abs() as f64;
                den += mask[p] as f64;
            }
        }
        if den == 0.0 { 0.0 } else { num / den }
    }

    #[test]
    fn person_is_deterministic_and_seeds_differ() {
        let c = desk();
        assert_eq!(make_person(0, &c), make_person(0, &c));
        let (a, b) = (make_person(0, &c), make_person(1, &c));
        assert!(a.shape != b.shape || a.part_textures != b.part_textures);
        assert_eq!(a.part_textures.len(), c.n_parts);
        for k in 0..N_BASE_PARTS {
            assert!(a.shape.lengths[k] > 0.0 && a.shape.radii[k] > 0.0);
        }
        for col in a.palette() {
            assert!(col.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn scores_are_one_hot_and_uv_in_range() {
        let world = World::new(desk()).unwrap();
        for f in [0, 17, 133] {
            let fr = world.frame(Split::Train, 1, f).unwrap();
            let n = world.config.n_parts;
            let hw = 64 * 64;
            for p in 0..hw {
                let total: f32 = (0..=n).map(|k| fr.scores[k * hw + p]).sum();
                assert_eq!(total, 1.0);
                assert_eq!(fr.mask[p], 1.0 - fr.scores[n * hw + p]);
            }
            assert!(fr.uv.data().iter().all(|v| (0.0..=1.0).contains(v)));
            let fg: f32 = fr.mask.data().iter().sum();
            assert!(fg > 200.0, "figure should be visible, got {fg} px");
        }
    }

    #[test]
    fn offscreen_pose_gives_empty_foreground() {
        let c = desk();
        let person = make_person(3, &c);
        let base = person.pose(0);
        let pose = person.pose_from(base.joint_angles.clone(), [5.0, 5.0], [true, false]);
        let fr = render_gt(&person, &pose, 64, 32, 2.0);
        assert!(fr.mask.data().iter().all(|&m| m == 0.0));
        assert!(fr.scores.data()[8 * 4096..].iter().all(|&s| s == 1.0));
        assert!(fr.partial.visibility.data().iter().all(|&v| v == 0.0));
        assert!(fr.keypoints.iter().all(|k| k[0] <= 64.0 && k[1] <= 64.0));
    }

    #[test]
    fn ground_truth_round_trips_through_renderer() {
        let world = World::new(desk()).unwrap();
        let p = &world.train[2];
        let atlas = p.gt_atlas(32);
        let bg = p.background_image(64).reshape(&[1, 3, 64, 64]).unwrap();
        for f in [0, 50, 199] {
            let fr = world.render_frame(p, f);
            let uv = fr.uv.reshaped(&[1, 16, 64, 64]).unwrap();
            let s = fr.scores.reshaped(&[1, 9, 64, 64]).unwrap();
            let out = render(&atlas, &uv, &s, Some(&bg)).unwrap();
            assert!(masked_l1(&out.reshape(&[3, 64, 64]).unwrap(), &fr.image, &fr.mask) <= 0.02);
        }
    }

    #[test]
    fn poses_are_temporally_smooth() {
        let c = desk();
        for seed in 0..10 {
            let p = make_person(seed, &c);
            for f in 0..199 {
                let (a, b) = (p.pose(f), p.pose(f + 1));
                for (x, y) in a.joint_angles.iter().zip(&b.joint_angles) {
                    assert!((x - y).abs() <= c.max_angle_delta + 1e-12);
                }
            }
        }
    }

    #[test]
    fn stickman_degenerate_bones_are_centered_discs() {
        let kp = vec![[16.0, 16.0]; N_JOINTS];
        let st = rasterize_stickman(&kp, 32, 2.0);
        for ch in 0..BONES.len() {
            let plane = &st.data()[ch * 1024..(ch + 1) * 1024];
            let mass: f32 = plane.iter().sum();
            let cx: f32 = (0..1024).map(|i| plane[i] * ((i % 32) as f32 + 0.5)).sum::<f32>() / mass;
            let cy: f32 = (0..1024).map(|i| plane[i] * ((i / 32) as f32 + 0.5)).sum::<f32>() / mass;
            assert!((cx - 16.0).abs() < 1e-4 && (cy - 16.0).abs() < 1e-4);
            assert!((mass - std::f32::consts::PI).abs() < 0.6, "disc mass {mass}");
        }
    }

    #[test]
    fn horizontal_bone_mass_matches_length_times_width() {
        let mut kp = vec![[0.0, 0.0]; N_JOINTS];
        // bone 0 joins joint 1 -> joint 0
        kp[1] = [5.0, 10.3];
        kp[0] = [25.0, 10.3];
        let st = rasterize_stickman(&kp, 32, 2.0);
        let mass: f32 = st.data()[..1024].iter().sum();
        assert!((mass - 40.0).abs() < 1e-3, "mass {mass}");
        // diagonal bones are still close to L * w
        kp[0] = [19.0, 24.3];
        let st = rasterize_stickman(&kp, 32, 2.0);
        let mass: f32 = st.data()[..1024].iter().sum();
        let len = (14.0f32 * 14.0 * 2.0).sqrt();
        assert!((mass - 2.0 * len).abs() < 0.1 * 2.0 * len, "mass {mass} vs {}", 2.0 * len);
    }

    proptest! {
        #[test]
        fn stickman_is_translation_equivariant(seed in 0u64..50, f in 0usize..200, dx in -3i32..=3, dy in -3i32..=3) {
            let c = desk();
            let p = make_person(seed, &c);
            // keep the figure well inside a larger canvas so nothing clips
            let kp: Vec<[f64; 2]> = p.pose(f).joints.iter().map(|j| [j[0] * 64.0 + 16.0, j[1] * 64.0 + 16.0]).collect();
            let moved: Vec<[f64; 2]> = kp.iter().map(|k| [k[0] + dx as f64, k[1] + dy as f64]).collect();
            let a = rasterize_stickman(&kp, 96, 2.0);
            let b = rasterize_stickman(&moved, 96, 2.0);
            for ch in 0..STICKMAN_CHANNELS {
                for y in 4..92usize {
                    for x in 4..92usize {
                        let src = a[(ch * 96 + y) * 96 + x];
                        let dst = b[(ch * 96 + (y as i32 + dy) as usize) * 96 + (x as i32 + dx) as usize];
                        prop_assert!((src - dst).abs() < 1e-4);
                    }
                }
            }
        }

        #[test]
        fn stickman_values_in_unit_range(seed in 0u64..100, f in 0usize..200) {
            let c = desk();
            let p = make_person(seed, &c);
            let st = rasterize_stickman(&p.pose(f).keypoints(64), 64, 2.0);
            prop_assert!(st.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn frames_are_one_hot_for_random_persons(seed in 0u64..1000, f in 0usize..200) {
            let c = desk();
            let p = make_person(seed, &c);
            let fr = render_gt(&p, &p.pose(f), 32, 16, 1.0);
            let hw = 32 * 32;
            for px in 0..hw {
                let total: f32 = (0..=c.n_parts).map(|k| fr.scores[k * hw + px]).sum();
                prop_assert_eq!(total, 1.0);
            }
            prop_assert!(fr.partial.atlas.data().iter().all(|v| (0.0..=1.0 + 1e-6).contains(v)));
        }
    }

    #[test]
    fn solid_part_extracts_its_color() {
        let c = desk();
        let mut p = make_person(7, &c);
        let red = [0.9, 0.1, 0.1];
        p.part_textures[1] = PartTexture::Solid { color: red };
        let fr = render_gt(&p, &p.pose(10), 64, 32, 2.0);
        let ap = 32 * 32;
        let mut seen = 0;
        for t in 0..ap {
            if fr.partial.visibility[ap + t] == 1.0 {
                seen += 1;
                for ch in 0..3 {
                    assert!((fr.partial.atlas[(3 + ch) * ap + t] - red[ch] as f32).abs() <= 0.02);
                }
            }
        }
        assert!(seen > 50);
        // invisible texels are zero
        for i in 0..fr.partial.visibility.len() {
            if fr.partial.visibility[i] == 0.0 {
                let (k, t) = (i / ap, i % ap);
                for ch in 0..3 {
                    assert_eq!(fr.partial.atlas[(k * 3 + ch) * ap + t], 0.0);
                }
            }
        }
    }

    #[test]
    fn extracted_texture_rerenders_visible_pixels() {
        // a 16x16 atlas keeps enough texels fully observed at 64x64
        let world = World::new(desk()).unwrap();
        let (n, hw, a) = (8, 4096, 16);
        let ap = a * a;
        let mut total = (0.0f64, 0.0f64);
        for (pi, f) in [(0, 3), (3, 120), (5, 77)] {
            let person = &world.train[pi];
            let fr = render_gt(person, &person.pose(f), 64, a, 2.0);
            let uv = fr.uv.reshaped(&[1, 2 * n, 64, 64]).unwrap();
            let s = fr.scores.reshaped(&[1, n + 1, 64, 64]).unwrap();
            let out = render(&fr.partial.atlas, &uv, &s, None).unwrap();
            for p in 0..hw {
                let Some(k) = (0..n).find(|&k| fr.scores[k * hw + p] == 1.0) else { continue };
                let x = fr.uv[2 * k * hw + p] * (a - 1) as f32;
                let y = fr.uv[(2 * k + 1) * hw + p] * (a - 1) as f32;
                let (x0, y0) = ((x.floor() as usize).min(a - 2), (y.floor() as usize).min(a - 2));
                let (fx, fy) = (x - x0 as f32, y - y0 as f32);
                let vis = [(y0, x0, (1.0 - fx) * (1.0 - fy)), (y0, x0 + 1, fx * (1.0 - fy)), (y0 + 1, x0, (1.0 - fx) * fy), (y0 + 1, x0 + 1, fx * fy)]
                    .iter()
                    .all(|&(ty, tx, w)| w == 0.0 || fr.partial.visibility[k * ap + ty * a + tx] == 1.0);
                if vis {
                    for c in 0..3 {
                        total.0 += (out[c * hw + p] - fr.image[c * hw + p]).abs() as f64;
                    }
                    total.1 += 3.0;
                }
            }
        }
        assert!(total.1 > 300.0, "only {} visible samples", total.1);
        assert!(total.0 / total.1 <= 0.05, "round-trip L1 {}", total.0 / total.1);
    }

    #[test]
    fn subdivided_parts_stay_one_hot() {
        let mut c = desk();
        c.n_parts = 24;
        let p = make_person(2, &c);
        let fr = render_gt(&p, &p.pose(5), 64, 16, 2.0);
        let hw = 4096;
        let used: usize = (0..24).filter(|&k| fr.scores.data()[k * hw..(k + 1) * hw].iter().any(|&v| v == 1.0)).count();
        assert!(used > 12);
        for px in 0..hw {
            let total: f32 = (0..=24).map(|k| fr.scores[k * hw + px]).sum();
            assert_eq!(total, 1.0);
        }
    }

    #[test]
    fn config_validation_names_field() {
        let mut c = desk();
        c.n_parts = 0;
        let err = c.validate().unwrap_err();
        assert!(err.to_string().contains("n_parts"));
        assert!(err.is_validation());
    }

    #[test]
    fn dataset_round_trip_and_determinism() {
        let mut c = desk();
        c.persons_train = 2;
        c.persons_test = 1;
        c.frames_per_person = 3;
        c.image_size = 16;
        c.atlas_size = 8;
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        let index = generate_dataset(&c, &a, false).unwrap();
        assert_eq!(index.count(Split::Train), 6);
        assert_eq!(index.count(Split::Test), 3);
        generate_dataset(&c, &b, false).unwrap();
        for rec in &index.frames {
            assert_eq!(fs::read(a.join(&rec.path)).unwrap(), fs::read(b.join(&rec.path)).unwrap());
        }
        assert_eq!(fs::read(a.join("index.json")).unwrap(), fs::read(b.join("index.json")).unwrap());
        let train_ids: Vec<_> = index.persons.iter().filter(|p| p.split == Split::Train).map(|p| &p.spec.person_id).collect();
        assert!(index.persons.iter().filter(|p| p.split == Split::Test).all(|p| !train_ids.contains(&&p.spec.person_id)));

        assert!(matches!(generate_dataset(&c, &a, false), Err(Error::OutputExists(_))));
        generate_dataset(&c, &a, true).unwrap();

        let disk = DiskDataset::open(&a).unwrap();
        let world = World::new(c.clone()).unwrap();
        assert_eq!(disk.frame(Split::Train, 1, 2).unwrap(), world.frame(Split::Train, 1, 2).unwrap());
        assert!(matches!(disk.frame(Split::Test, 0, 9), Err(Error::InsufficientFrames { .. })));
    }
}
