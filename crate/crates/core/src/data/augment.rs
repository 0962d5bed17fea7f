use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::geometry::{jitter_bbox, mirror_sample, rotate_sample, validate_permutation, JitterRanges, MIRROR_68};
use super::Sample;
use crate::error::{Error, Result};

pub const PAPER_ANGLES: [f64; 13] = [
    -30.0, -25.0, -20.0, -15.0, -10.0, -5.0, 0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub angles: Vec<f64>,
    pub jitter_count: usize,
    pub jitter: JitterRanges,
    pub mirror: bool,
    pub mirror_permutation: Vec<usize>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            angles: PAPER_ANGLES.to_vec(),
            jitter_count: 2,
            jitter: JitterRanges::default(),
            mirror: true,
            mirror_permutation: MIRROR_68.to_vec(),
        }
    }
}

impl AugmentConfig {
    /// No-op configuration: angle 0, one jitter, no mirror.
    pub fn identity() -> Self {
        AugmentConfig {
            angles: vec![0.0],
            jitter_count: 1,
            jitter: JitterRanges {
                scale_min: 1.0,
                scale_max: 1.0,
                translate: 0.0,
            },
            mirror: false,
            ..AugmentConfig::default()
        }
    }

    pub fn multiplicity(&self) -> usize {
        self.angles.len() * self.jitter_count * if self.mirror { 2 } else { 1 }
    }

    pub fn validate(&self, landmarks: usize) -> Result<()> {
        if !self.angles.contains(&0.0) {
            return Err(Error::Config("augmentation angles must include 0".into()));
        }
        if self.angles.iter().any(|a| !a.is_finite()) {
            return Err(Error::Config("augmentation angles must be finite".into()));
        }
        if self.jitter_count == 0 {
            return Err(Error::Config("jitter_count must be at least 1".into()));
        }
        let j = &self.jitter;
        if !(0.0 < j.scale_min && j.scale_min <= j.scale_max && j.translate >= 0.0) {
            return Err(Error::Config(format!("invalid jitter ranges {j:?}")));
        }
        if self.mirror {
            validate_permutation(&self.mirror_permutation, landmarks)?;
        }
        Ok(())
    }
}

/// Seed for the rng stream of one (sample, variant) pair.
pub fn variant_seed(seed: u64, sample: usize, variant: usize) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    mix(mix(mix(seed) ^ sample as u64) ^ variant as u64)
}

/// All variants of one sample, ordered angle-major, then jitter, then
/// mirror (original before flipped).
pub fn augment_sample(sample: &Sample, index: usize, cfg: &AugmentConfig, seed: u64) -> Result<Vec<Sample>> {
    let mut out = Vec::with_capacity(cfg.multiplicity());
    for (ai, &angle) in cfg.angles.iter().enumerate() {
        let rotated = rotate_sample(sample, angle)?;
        for j in 0..cfg.jitter_count {
            let mut rng = ChaCha8Rng::seed_from_u64(variant_seed(seed, index, ai * cfg.jitter_count + j));
            let variant = Sample {
                bbox: jitter_bbox(&rotated.bbox, &cfg.jitter, &mut rng),
                ..rotated.clone()
            };
            if cfg.mirror {
                let flipped = mirror_sample(&variant, &cfg.mirror_permutation)?;
                out.push(variant);
                out.push(flipped);
            } else {
                out.push(variant);
            }
        }
    }
    Ok(out)
}

pub fn augment_dataset(samples: &[Sample], cfg: &AugmentConfig, seed: u64) -> Result<Vec<Sample>> {
    if let Some(first) = samples.first() {
        cfg.validate(first.shape.len())?;
    }
    let mut out = Vec::with_capacity(samples.len() * cfg.multiplicity());
    for (i, s) in samples.iter().enumerate() {
        out.extend(augment_sample(s, i, cfg, seed)?);
    }
    Ok(out)
}
