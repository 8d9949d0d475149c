//! Synthetic walkers: a stick-and-ellipse body with sinusoidal limb swing.
//!
//! Each identity draws body proportions and gait dynamics once; each
//! sequence draws a fresh phase and a small placement jitter. The view
//! angle scales horizontal limb swing and torso width and shears the body;
//! a bag adds a blob at hip height and a coat widens and lengthens the
//! torso.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Condition, DatasetIndex, SilhouetteSequence};
use crate::error::{Error, Result};

/// Generator settings, read from JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub n_ids: usize,
    /// Identities in the training split; defaults to two thirds.
    pub train_ids: Option<usize>,
    /// View angles in degrees.
    pub views: Vec<u32>,
    /// Sequences per condition, e.g. `{"nm": 2, "bg": 1}`.
    pub conditions: BTreeMap<Condition, usize>,
    /// Frames per sequence.
    pub frames: usize,
    /// `(H, W)`.
    pub resolution: [usize; 2],
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n_ids: 24,
            train_ids: None,
            views: vec![0, 36, 72, 108, 144, 180],
            conditions: BTreeMap::from([(Condition::Nm, 2), (Condition::Bg, 1)]),
            frames: 40,
            resolution: [64, 44],
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn train_ids(&self) -> usize {
        self.train_ids.unwrap_or(self.n_ids * 2 / 3)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_ids < 2 {
            return Err(Error::Config("n_ids must be at least 2".into()));
        }
        if self.train_ids() > self.n_ids {
            return Err(Error::Config("train_ids exceeds n_ids".into()));
        }
        if self.views.is_empty() || self.frames == 0 {
            return Err(Error::Config("views and frames must be non-empty".into()));
        }
        if self.conditions.values().all(|&n| n == 0) {
            return Err(Error::Config("at least one condition needs sequences".into()));
        }
        let [h, w] = self.resolution;
        if h < 8 || w < 8 {
            return Err(Error::Config("resolution must be at least 8x8".into()));
        }
        Ok(())
    }
}

/// Body height as a fraction of the frame height.
const BODY_HEIGHT: f64 = 0.9;

/// Per-identity body and gait parameters, in fractions of body height.
/// Frames are height-normalized, so every walker spans the same height.
#[derive(Clone, Debug)]
struct Walker {
    head: f64,
    torso_len: f64,
    torso_w: f64,
    limb: f64,
    arm_len: f64,
    stride: f64,
    arm_swing: f64,
    knee: f64,
    period: f64,
    lean: f64,
}

impl Walker {
    fn draw<R: Rng>(rng: &mut R) -> Self {
        Self {
            head: rng.gen_range(0.055..0.085),
            torso_len: rng.gen_range(0.27..0.37),
            torso_w: rng.gen_range(0.07..0.13),
            limb: rng.gen_range(0.035..0.065),
            arm_len: rng.gen_range(0.30..0.40),
            stride: rng.gen_range(0.30..0.60),
            arm_swing: rng.gen_range(0.20..0.60),
            knee: rng.gen_range(0.20..0.70),
            period: rng.gen_range(12.0..20.0),
            lean: rng.gen_range(-0.10..0.10),
        }
    }
}

/// Per-sequence placement.
#[derive(Clone, Copy, Debug)]
struct Placement {
    phase: f64,
    dx: f64,
    scale: f64,
}

struct Canvas {
    h: usize,
    w: usize,
    px: Vec<u8>,
}

impl Canvas {
    fn new(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            px: vec![0; h * w],
        }
    }

    fn fill<F: Fn(f64, f64) -> bool>(&mut self, inside: F) {
        for y in 0..self.h {
            for x in 0..self.w {
                if inside(x as f64 + 0.5, y as f64 + 0.5) {
                    self.px[y * self.w + x] = 1;
                }
            }
        }
    }

    fn capsule(&mut self, a: (f64, f64), b: (f64, f64), r: f64) {
        self.fill(|x, y| seg_dist(x, y, a, b) <= r);
    }
}

fn seg_dist(x: f64, y: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((x - a.0) * dx + (y - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (px, py) = (a.0 + t * dx, a.1 + t * dy);
    ((x - px).powi(2) + (y - py).powi(2)).sqrt()
}

/// Renders one binary frame.
fn render(
    body: &Walker,
    place: Placement,
    view: u32,
    condition: Condition,
    frame: usize,
    h: usize,
    w: usize,
) -> Vec<u8> {
    let (hf, wf) = (h as f64, w as f64);
    let v = f64::from(view).to_radians();
    let swing_x = (0.25 + 0.75 * v.sin().abs()) * if view <= 90 { 1.0 } else { -1.0 };
    let width_x = 1.0 + 0.4 * v.cos().abs();
    let shear = 0.25 * v.cos() + body.lean;

    let s = BODY_HEIGHT * hf * place.scale;
    let theta = 2.0 * PI * frame as f64 / body.period + place.phase;
    let bob = 0.015 * s * theta.cos().abs();
    let base = 0.97 * hf;
    let top = base - s + bob;
    let head_r = body.head * s;
    let neck = top + 2.0 * head_r;
    let torso_l = body.torso_len * s;
    let hip = neck + torso_l;
    let leg = base - hip;
    let r = 0.5 * body.limb * s;
    let cx = 0.5 * wf + place.dx * wf;
    // horizontal position of the body axis at height y
    let axis = move |y: f64| cx + shear * (y - hip);
    let joint = move |from: (f64, f64), len: f64, angle: f64| {
        let y = from.1 + len * angle.cos();
        let x = from.0 + len * angle.sin() * swing_x + shear * (y - from.1);
        (x, y)
    };

    let mut c = Canvas::new(h, w);
    let head_c = (axis(top + head_r), top + head_r);
    c.fill(|x, y| (x - head_c.0).powi(2) + (y - head_c.1).powi(2) <= head_r * head_r);

    let (mut ta, mut tb, mut tc) = (body.torso_w * s * width_x, 0.5 * torso_l, neck + 0.5 * torso_l);
    if condition == Condition::Cl {
        ta *= 1.35;
        tb *= 1.3;
        tc += 0.15 * torso_l;
    }
    c.fill(|x, y| ((x - axis(y)) / ta).powi(2) + ((y - tc) / tb).powi(2) <= 1.0);

    let hip_j = (axis(hip), hip);
    for (k, sign) in [(0.0, 1.0), (PI, -1.0)] {
        let th = body.stride * theta.sin() * sign;
        let bend = body.knee * (theta + k + 1.0).sin().max(0.0);
        let knee = joint(hip_j, 0.5 * leg, th);
        let foot = joint(knee, 0.5 * leg, th - bend);
        c.capsule(hip_j, knee, r);
        c.capsule(knee, foot, r);
    }
    let shoulder_y = neck + 0.1 * torso_l;
    let shoulder = (axis(shoulder_y), shoulder_y);
    for sign in [1.0, -1.0] {
        let a = -body.arm_swing * theta.sin() * sign;
        let hand = joint(shoulder, body.arm_len * s, a);
        c.capsule(shoulder, hand, 0.85 * r);
    }
    if condition == Condition::Bg {
        let (bx, by) = (axis(hip) + 1.1 * body.torso_w * s * width_x * swing_x.signum(), hip - 0.05 * s);
        let (ba, bb) = (0.09 * s, 0.11 * s);
        c.fill(|x, y| ((x - bx) / ba).powi(2) + ((y - by) / bb).powi(2) <= 1.0);
    }
    c.px
}

/// Generates a dataset deterministically from `cfg.seed`.
pub fn synthesize(cfg: &GenConfig) -> Result<DatasetIndex> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let [h, w] = cfg.resolution;
    let walkers: Vec<Walker> = (0..cfg.n_ids).map(|_| Walker::draw(&mut rng)).collect();
    let mut sequences = Vec::new();
    for (i, body) in walkers.iter().enumerate() {
        for (&condition, &count) in &cfg.conditions {
            for seq in 1..=count {
                for &view in &cfg.views {
                    let place = Placement {
                        phase: rng.gen_range(0.0..2.0 * PI),
                        dx: rng.gen_range(-0.03..0.03),
                        scale: rng.gen_range(0.98..1.02),
                    };
                    let frames = (0..cfg.frames)
                        .map(|f| render(body, place, view, condition, f, h, w))
                        .collect();
                    sequences.push(SilhouetteSequence {
                        id: i + 1,
                        condition,
                        seq,
                        view,
                        height: h,
                        width: w,
                        frames,
                    });
                }
            }
        }
    }
    DatasetIndex::new(cfg.resolution, sequences, cfg.train_ids())
}
