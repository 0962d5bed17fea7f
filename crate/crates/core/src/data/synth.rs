//! Procedural cartoon faces for desk-scale runs.
//!
//! Landmarks: 0 left eye centre, 1 right eye centre, 2 nose tip,
//! 3 left mouth corner, 4 right mouth corner ("left" = smaller x at zero
//! rotation).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{BBox, GrayImage, Sample};
use crate::shape::{LandmarkShape, Point};

pub const SYNTH_LANDMARKS: usize = 5;
pub const SYNTH_MIRROR: [usize; SYNTH_LANDMARKS] = [1, 0, 2, 4, 3];

/// Rotation modes of the pose mixture, in degrees.
const POSE_MODES: [f64; 3] = [-25.0, 0.0, 25.0];

// Face-local geometry in units of the head radius.
const EYE: [(f64, f64); 2] = [(-0.38, -0.25), (0.38, -0.25)];
const EYE_RADIUS: f64 = 0.13;
const NOSE: (f64, f64) = (0.0, 0.12);
const NOSE_RADIUS: f64 = 0.07;
const MOUTH_Y: f64 = 0.5;
const MOUTH_HALF_LEN: f64 = 0.34;
const MOUTH_HALF_THICK: f64 = 0.07;
const HEAD_Y_RATIO: f64 = 1.25;

const BACKGROUND: f64 = 0.1;
const HEAD: f64 = 0.7;
const EYE_SHADE: [f64; 2] = [0.05, 0.3];
const NOSE_SHADE: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// Side of the square source image.
    pub canvas: usize,
    /// Head radius in pixels before the random scale factor.
    pub head_radius: f64,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            canvas: 96,
            head_radius: 24.0,
            noise: 0.02,
        }
    }
}

struct Pose {
    center: Point,
    radius: f64,
    aspect: f64,
    cos: f64,
    sin: f64,
}

impl Pose {
    fn to_image(&self, (qx, qy): (f64, f64)) -> Point {
        let (x, y) = (qx * self.radius, qy * self.radius * self.aspect);
        Point::new(
            self.center.x + self.cos * x - self.sin * y,
            self.center.y + self.sin * x + self.cos * y,
        )
    }

    fn to_local(&self, p: Point) -> (f64, f64) {
        let (dx, dy) = (p.x - self.center.x, p.y - self.center.y);
        let (x, y) = (self.cos * dx + self.sin * dy, -self.sin * dx + self.cos * dy);
        (x / self.radius, y / (self.radius * self.aspect))
    }
}

fn shade((qx, qy): (f64, f64)) -> f64 {
    let disc = |(cx, cy): (f64, f64), r: f64| (qx - cx).powi(2) + (qy - cy).powi(2) <= r * r;
    if qx * qx + (qy / HEAD_Y_RATIO).powi(2) > 1.0 {
        return BACKGROUND;
    }
    for (centre, s) in EYE.iter().zip(EYE_SHADE) {
        if disc(*centre, EYE_RADIUS) {
            return s;
        }
    }
    if disc(NOSE, NOSE_RADIUS) {
        return NOSE_SHADE;
    }
    if (qy - MOUTH_Y).abs() <= MOUTH_HALF_THICK && qx.abs() <= MOUTH_HALF_LEN {
        return 0.15 + 0.3 * (qx + MOUTH_HALF_LEN) / (2.0 * MOUTH_HALF_LEN);
    }
    HEAD
}

fn render(pose: &Pose, canvas: usize, noise: f64, rng: &mut ChaCha8Rng) -> GrayImage {
    const SUB: usize = 3;
    let normal = Normal::new(0.0, noise.max(0.0)).expect("finite noise level");
    let mut img = GrayImage::from_fn(canvas, canvas, |x, y| {
        let mut acc = 0.0;
        for sy in 0..SUB {
            for sx in 0..SUB {
                let p = Point::new(
                    x as f64 + (sx as f64 + 0.5) / SUB as f64 - 0.5,
                    y as f64 + (sy as f64 + 0.5) / SUB as f64 - 0.5,
                );
                acc += shade(pose.to_local(p));
            }
        }
        acc / (SUB * SUB) as f64
    });
    if noise > 0.0 {
        for y in 0..canvas {
            for x in 0..canvas {
                let v = img.get(x, y) + normal.sample(rng);
                img.set(x, y, v);
            }
        }
    }
    img
}

/// Deterministic synthetic dataset of `count` faces.
pub fn synth_faces(count: usize, seed: u64, cfg: &SynthConfig) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = cfg.canvas as f64 / 2.0;
    (0..count)
        .map(|_| {
            let mode = POSE_MODES[rng.random_range(0..POSE_MODES.len())];
            let angle = mode + rng.random_range(-5.0..=5.0);
            let radius = cfg.head_radius * rng.random_range(0.9..=1.1);
            let shift = 0.08 * cfg.canvas as f64;
            let center = Point::new(
                half + rng.random_range(-shift..=shift),
                half + rng.random_range(-shift..=shift),
            );
            let (sin, cos) = f64::to_radians(angle).sin_cos();
            let pose = Pose {
                center,
                radius,
                aspect: rng.random_range(0.9..=1.1),
                cos,
                sin,
            };
            let shape = LandmarkShape::new(vec![
                pose.to_image(EYE[0]),
                pose.to_image(EYE[1]),
                pose.to_image(NOSE),
                pose.to_image((-MOUTH_HALF_LEN, MOUTH_Y)),
                pose.to_image((MOUTH_HALF_LEN, MOUTH_Y)),
            ]);
            // Detector-style box: square around the head with some slack.
            let side = 2.2 * radius * rng.random_range(0.95..=1.05);
            let bc = Point::new(
                center.x + side * rng.random_range(-0.04..=0.04),
                center.y + side * rng.random_range(-0.04..=0.04),
            );
            let bbox = BBox::new(bc.x - side / 2.0, bc.y - side / 2.0, side, side);
            let image = render(&pose, cfg.canvas, cfg.noise, &mut rng);
            Sample { image, shape, bbox }
        })
        .collect()
}
