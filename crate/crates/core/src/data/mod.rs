//! Dataset ingestion, geometric normalization, augmentation and synthetic faces.

mod augment;
mod geometry;
mod image;
mod manifest;
mod pts;
mod synth;

pub use augment::{augment_dataset, augment_sample, variant_seed, AugmentConfig, PAPER_ANGLES};
pub use geometry::{
    crop_and_resize, jitter_bbox, jitter_bbox_with, mirror_sample, rotate_sample, validate_permutation, Affine,
    Cropped, JitterRanges, MIRROR_68, DEFAULT_PAD_FRACTION,
};
pub use image::GrayImage;
pub use manifest::{load_manifest, parse_manifest, write_manifest, ManifestEntry};
pub use pts::{parse_pts, write_pts};
pub use synth::{synth_faces, SynthConfig, SYNTH_LANDMARKS, SYNTH_MIRROR};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::shape::{LandmarkShape, Point};

/// Face bounding box in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub left: f64,
    pub top: f64,
    pub width: f64,
    pub height: f64,
}

impl BBox {
    pub fn new(left: f64, top: f64, width: f64, height: f64) -> Self {
        BBox {
            left,
            top,
            width,
            height,
        }
    }

    pub fn center(&self) -> Point {
        Point::new(self.left + self.width / 2.0, self.top + self.height / 2.0)
    }

    pub fn corners(&self) -> [Point; 4] {
        let (r, b) = (self.left + self.width, self.top + self.height);
        [
            Point::new(self.left, self.top),
            Point::new(r, self.top),
            Point::new(self.left, b),
            Point::new(r, b),
        ]
    }

    /// Axis-aligned hull of a set of points.
    pub fn enclosing(points: &[Point]) -> BBox {
        let min_x = points.iter().map(|p| p.x).fold(f64::INFINITY, f64::min);
        let max_x = points.iter().map(|p| p.x).fold(f64::NEG_INFINITY, f64::max);
        let min_y = points.iter().map(|p| p.y).fold(f64::INFINITY, f64::min);
        let max_y = points.iter().map(|p| p.y).fold(f64::NEG_INFINITY, f64::max);
        BBox::new(min_x, min_y, max_x - min_x, max_y - min_y)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.left, self.top, self.width, self.height].iter().all(|v| v.is_finite());
        if !finite || self.width <= 0.0 || self.height <= 0.0 {
            return Err(Error::Data(format!("invalid bounding box {self:?}")));
        }
        Ok(())
    }
}

/// One annotated face image.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: GrayImage,
    pub shape: LandmarkShape,
    pub bbox: BBox,
}
