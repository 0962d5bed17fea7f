use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{BBox, GrayImage, Sample};
use crate::error::{Error, Result};
use crate::shape::{LandmarkShape, Point};

pub const DEFAULT_PAD_FRACTION: f64 = 0.2;

/// Left/right symmetry of the 68-point markup.
#[rustfmt::skip]
pub const MIRROR_68: [usize; 68] = [
    16, 15, 14, 13, 12, 11, 10, 9, 8, 7, 6, 5, 4, 3, 2, 1, 0,
    26, 25, 24, 23, 22, 21, 20, 19, 18, 17,
    27, 28, 29, 30,
    35, 34, 33, 32, 31,
    45, 44, 43, 42, 47, 46,
    39, 38, 37, 36, 41, 40,
    54, 53, 52, 51, 50, 49, 48,
    59, 58, 57, 56, 55,
    64, 63, 62, 61, 60,
    67, 66, 65,
];

/// `x' = a·x + b·y + c`, `y' = d·x + e·y + f`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine {
    pub m: [f64; 6],
}

impl Affine {
    pub const IDENTITY: Affine = Affine {
        m: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
    };

    /// Axis-aligned scale after translation: `x' = (x - x0)·sx`.
    pub fn crop(x0: f64, y0: f64, sx: f64, sy: f64) -> Self {
        Affine {
            m: [sx, 0.0, -x0 * sx, 0.0, sy, -y0 * sy],
        }
    }

    /// Rotation by `degrees` about `center` in image coordinates.
    pub fn rotation_about(center: Point, degrees: f64) -> Self {
        let (s, c) = degrees.to_radians().sin_cos();
        Affine {
            m: [
                c,
                -s,
                center.x - c * center.x + s * center.y,
                s,
                c,
                center.y - s * center.x - c * center.y,
            ],
        }
    }

    pub fn apply(&self, p: Point) -> Point {
        let m = &self.m;
        Point::new(m[0] * p.x + m[1] * p.y + m[2], m[3] * p.x + m[4] * p.y + m[5])
    }

    pub fn apply_shape(&self, shape: &LandmarkShape) -> LandmarkShape {
        shape.map(|p| self.apply(p))
    }

    pub fn inverse(&self) -> Result<Affine> {
        let m = &self.m;
        let det = m[0] * m[4] - m[1] * m[3];
        if det == 0.0 || !det.is_finite() {
            return Err(Error::Contract("singular affine map".into()));
        }
        let (a, b, d, e) = (m[4] / det, -m[1] / det, -m[3] / det, m[0] / det);
        Ok(Affine {
            m: [a, b, -(a * m[2] + b * m[5]), d, e, -(d * m[2] + e * m[5])],
        })
    }
}

/// Resamples `src` into a `width`×`height` raster where output pixel `q`
/// reads the source at `to_source(q)`.
fn warp(src: &GrayImage, width: usize, height: usize, to_source: &Affine) -> GrayImage {
    GrayImage::from_fn(width, height, |x, y| {
        let p = to_source.apply(Point::new(x as f64, y as f64));
        src.sample_bilinear(p.x, p.y)
    })
}

/// A sample mapped into the working frame together with the map used.
#[derive(Debug, Clone)]
pub struct Cropped {
    pub sample: Sample,
    /// Original image coordinates to working-frame coordinates.
    pub frame: Affine,
}

/// Crops the bbox grown by `pad_fraction·width` on every side and resizes
/// the window to `size`×`size`.
pub fn crop_and_resize(sample: &Sample, size: usize, pad_fraction: f64) -> Result<Cropped> {
    if size == 0 {
        return Err(Error::Contract("crop output size must be positive".into()));
    }
    let b = &sample.bbox;
    let pad = pad_fraction * b.width;
    let (x0, y0) = (b.left - pad, b.top - pad);
    let (ww, wh) = (b.width + 2.0 * pad, b.height + 2.0 * pad);
    if !(ww > 0.0 && wh > 0.0) || !x0.is_finite() || !y0.is_finite() {
        return Err(Error::Contract(format!("degenerate crop window for bbox {b:?}")));
    }
    let (iw, ih) = (sample.image.width() as f64, sample.image.height() as f64);
    let overlap_w = (x0 + ww).min(iw) - x0.max(0.0);
    let overlap_h = (y0 + wh).min(ih) - y0.max(0.0);
    if overlap_w <= 0.0 || overlap_h <= 0.0 {
        return Err(Error::Contract(format!(
            "crop window for bbox {b:?} does not intersect the {iw}x{ih} image"
        )));
    }
    let frame = Affine::crop(x0, y0, size as f64 / ww, size as f64 / wh);
    let image = warp(&sample.image, size, size, &frame.inverse()?);
    let [tl, .., br] = b.corners();
    let (tl, br) = (frame.apply(tl), frame.apply(br));
    Ok(Cropped {
        sample: Sample {
            image,
            shape: frame.apply_shape(&sample.shape),
            bbox: BBox::new(tl.x, tl.y, br.x - tl.x, br.y - tl.y),
        },
        frame,
    })
}

/// Rotates image and shape about the bbox centre; the new bbox is the
/// axis-aligned hull of the rotated corners.
pub fn rotate_sample(sample: &Sample, degrees: f64) -> Result<Sample> {
    if degrees == 0.0 {
        return Ok(sample.clone());
    }
    let rot = Affine::rotation_about(sample.bbox.center(), degrees);
    let (w, h) = (sample.image.width(), sample.image.height());
    let corners = sample.bbox.corners().map(|c| rot.apply(c));
    Ok(Sample {
        image: warp(&sample.image, w, h, &rot.inverse()?),
        shape: rot.apply_shape(&sample.shape),
        bbox: BBox::enclosing(&corners),
    })
}

/// Ranges for random bbox perturbation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JitterRanges {
    pub scale_min: f64,
    pub scale_max: f64,
    /// Maximum centre shift as a fraction of the corresponding side.
    pub translate: f64,
}

impl Default for JitterRanges {
    fn default() -> Self {
        JitterRanges {
            scale_min: 0.9,
            scale_max: 1.1,
            translate: 0.05,
        }
    }
}

/// Scales both sides by `u` about the centre, then shifts the centre by
/// `(vx·width, vy·height)`.
pub fn jitter_bbox_with(bbox: &BBox, u: f64, vx: f64, vy: f64) -> BBox {
    let c = bbox.center();
    let (w, h) = (bbox.width * u, bbox.height * u);
    let (cx, cy) = (c.x + vx * bbox.width, c.y + vy * bbox.height);
    BBox::new(cx - w / 2.0, cy - h / 2.0, w, h)
}

pub fn jitter_bbox(bbox: &BBox, ranges: &JitterRanges, rng: &mut impl Rng) -> BBox {
    let u = rng.random_range(ranges.scale_min..=ranges.scale_max);
    let vx = rng.random_range(-ranges.translate..=ranges.translate);
    let vy = rng.random_range(-ranges.translate..=ranges.translate);
    jitter_bbox_with(bbox, u, vx, vy)
}

pub fn validate_permutation(perm: &[usize], landmarks: usize) -> Result<()> {
    if perm.len() != landmarks {
        return Err(Error::Config(format!(
            "mirror permutation has {} entries for {landmarks} landmarks",
            perm.len()
        )));
    }
    for (i, &j) in perm.iter().enumerate() {
        if j >= landmarks || perm[j] != i {
            return Err(Error::Config(format!("mirror permutation is not an involution at index {i}")));
        }
    }
    Ok(())
}

/// Horizontal flip; landmark `i` of the result is the flipped landmark
/// `perm[i]` of the input.
pub fn mirror_sample(sample: &Sample, perm: &[usize]) -> Result<Sample> {
    validate_permutation(perm, sample.shape.len())?;
    let w = sample.image.width() as f64;
    let pts = sample.shape.points();
    let shape = LandmarkShape::new(
        perm.iter()
            .map(|&j| Point::new(w - 1.0 - pts[j].x, pts[j].y))
            .collect(),
    );
    let b = &sample.bbox;
    Ok(Sample {
        image: sample.image.flip_horizontal(),
        shape,
        bbox: BBox::new(w - 1.0 - (b.left + b.width), b.top, b.width, b.height),
    })
}
