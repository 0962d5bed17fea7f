//! Landmark shapes: ordered 2-D points in pixel coordinates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A 2-D point; `x` is the column coordinate, `y` the row coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn distance(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    /// Nearest grid cell `(col, row)` under round-half-up, clamped into a
    /// `width x height` grid. Both dimensions must be non-zero.
    pub fn grid_cell(&self, width: usize, height: usize) -> (usize, usize) {
        (round_clamp(self.x, width), round_clamp(self.y, height))
    }
}

fn round_clamp(v: f64, len: usize) -> usize {
    let r = (v + 0.5).floor();
    if r.is_nan() || r <= 0.0 {
        0
    } else {
        (r as usize).min(len - 1)
    }
}

/// An ordered list of `p` landmarks. Serializes to the flat
/// `(x1, y1, ..., xp, yp)` layout used by the regressors.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LandmarkShape {
    points: Vec<Point>,
}

impl LandmarkShape {
    pub fn new(points: Vec<Point>) -> Self {
        LandmarkShape { points }
    }

    pub fn from_pairs(pairs: &[(f64, f64)]) -> Self {
        LandmarkShape {
            points: pairs.iter().map(|&(x, y)| Point::new(x, y)).collect(),
        }
    }

    pub fn zeros(p: usize) -> Self {
        LandmarkShape {
            points: vec![Point::default(); p],
        }
    }

    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if flat.len() % 2 != 0 {
            return Err(Error::shape("LandmarkShape::from_flat", "even length", flat.len()));
        }
        Ok(LandmarkShape {
            points: flat.chunks_exact(2).map(|c| Point::new(c[0], c[1])).collect(),
        })
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.points.iter().flat_map(|p| [p.x, p.y]).collect()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn points_mut(&mut self) -> &mut [Point] {
        &mut self.points
    }

    pub fn map(&self, f: impl Fn(Point) -> Point) -> LandmarkShape {
        LandmarkShape {
            points: self.points.iter().map(|&p| f(p)).collect(),
        }
    }

    /// `self + delta`, where `delta` is a flat `(dx1, dy1, ...)` vector.
    pub fn offset_by(&self, delta: &[f64]) -> Result<LandmarkShape> {
        self.expect_flat_len("LandmarkShape::offset_by", delta.len())?;
        Ok(LandmarkShape {
            points: self
                .points
                .iter()
                .zip(delta.chunks_exact(2))
                .map(|(p, d)| Point::new(p.x + d[0], p.y + d[1]))
                .collect(),
        })
    }

    /// Flat residual `other - self`.
    pub fn residual_to(&self, other: &LandmarkShape) -> Result<Vec<f64>> {
        self.expect_same_len(other)?;
        Ok(self
            .points
            .iter()
            .zip(&other.points)
            .flat_map(|(a, b)| [b.x - a.x, b.y - a.y])
            .collect())
    }

    /// Squared Euclidean distance between the flattened shapes.
    pub fn sq_distance(&self, other: &LandmarkShape) -> Result<f64> {
        self.expect_same_len(other)?;
        Ok(self
            .points
            .iter()
            .zip(&other.points)
            .map(|(a, b)| (a.x - b.x).powi(2) + (a.y - b.y).powi(2))
            .sum())
    }

    /// Rounds every point to its grid cell (round-half-up, clamped).
    pub fn rounded(&self, width: usize, height: usize) -> LandmarkShape {
        self.map(|p| {
            let (c, r) = p.grid_cell(width, height);
            Point::new(c as f64, r as f64)
        })
    }

    pub(crate) fn expect_same_len(&self, other: &LandmarkShape) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::shape(
                "LandmarkShape",
                format!("{} landmarks", self.len()),
                other.len(),
            ));
        }
        Ok(())
    }

    fn expect_flat_len(&self, op: &'static str, len: usize) -> Result<()> {
        if len != 2 * self.len() {
            return Err(Error::shape(op, 2 * self.len(), len));
        }
        Ok(())
    }
}
