//! Inter-pupil normalized landmark error and cumulative error distribution.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::shape::{LandmarkShape, Point};

/// Landmark indices whose means define the two pupil centres.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EyeIndices {
    pub left: Vec<usize>,
    pub right: Vec<usize>,
}

impl EyeIndices {
    pub fn ibug68() -> Self {
        EyeIndices {
            left: (36..42).collect(),
            right: (42..48).collect(),
        }
    }

    /// Two eye-centre landmarks of the synthetic faces.
    pub fn synth5() -> Self {
        EyeIndices {
            left: vec![0],
            right: vec![1],
        }
    }

    /// 68-point sets for 68 landmarks, otherwise landmarks 0 and 1.
    pub fn for_landmarks(p: usize) -> Self {
        if p == 68 {
            Self::ibug68()
        } else {
            Self::synth5()
        }
    }

    pub fn validate(&self, landmarks: usize) -> Result<()> {
        if self.left.is_empty() || self.right.is_empty() {
            return Err(Error::Config("eye index sets must be non-empty".into()));
        }
        if let Some(i) = self.left.iter().chain(&self.right).find(|&&i| i >= landmarks) {
            return Err(Error::Config(format!("eye index {i} out of range for {landmarks} landmarks")));
        }
        if self.left.iter().any(|i| self.right.contains(i)) {
            return Err(Error::Config("left and right eye index sets overlap".into()));
        }
        Ok(())
    }
}

fn centroid(shape: &LandmarkShape, idx: &[usize]) -> Point {
    let pts = shape.points();
    let n = idx.len() as f64;
    let (sx, sy) = idx.iter().fold((0.0, 0.0), |(sx, sy), &i| (sx + pts[i].x, sy + pts[i].y));
    Point::new(sx / n, sy / n)
}

pub fn inter_pupil_distance(shape: &LandmarkShape, eyes: &EyeIndices) -> Result<f64> {
    eyes.validate(shape.len())?;
    Ok(centroid(shape, &eyes.left).distance(&centroid(shape, &eyes.right)))
}

/// Per-image errors `e_i = mean_j ‖pred_ij − gt_ij‖ / D_i` and their mean.
pub fn mean_error(
    predictions: &[LandmarkShape],
    truths: &[LandmarkShape],
    eyes: &EyeIndices,
) -> Result<(Vec<f64>, f64)> {
    if predictions.len() != truths.len() {
        return Err(Error::shape("mean_error", truths.len(), predictions.len()));
    }
    if truths.is_empty() {
        return Err(Error::Contract("mean_error needs at least one image".into()));
    }
    let mut errors = Vec::with_capacity(truths.len());
    for (i, (pred, gt)) in predictions.iter().zip(truths).enumerate() {
        if pred.len() != gt.len() {
            return Err(Error::shape("mean_error", gt.len(), pred.len()));
        }
        let d = inter_pupil_distance(gt, eyes)?;
        if d <= 0.0 {
            return Err(Error::Data(format!("image {i} has zero inter-pupil distance")));
        }
        let total: f64 = pred.points().iter().zip(gt.points()).map(|(a, b)| a.distance(b)).sum();
        errors.push(total / gt.len() as f64 / d);
    }
    let mean = errors.iter().sum::<f64>() / errors.len() as f64;
    Ok((errors, mean))
}

/// Fraction of errors at or below each threshold.
pub fn ced(errors: &[f64], thresholds: &[f64]) -> Result<Vec<(f64, f64)>> {
    if errors.is_empty() {
        return Err(Error::Contract("CED of an empty error list".into()));
    }
    if thresholds.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Contract("CED thresholds must be sorted ascending".into()));
    }
    let n = errors.len() as f64;
    Ok(thresholds
        .iter()
        .map(|&l| (l, errors.iter().filter(|&&e| e <= l).count() as f64 / n))
        .collect())
}

/// Thresholds 0.00, 0.01, ..., 0.30.
pub fn default_thresholds() -> Vec<f64> {
    (0..=30).map(|i| i as f64 / 100.0).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub errors: Vec<f64>,
    pub mean: f64,
    pub curve: Vec<(f64, f64)>,
    pub images: usize,
    pub landmarks: usize,
}

impl EvalReport {
    pub fn compute(
        predictions: &[LandmarkShape],
        truths: &[LandmarkShape],
        eyes: &EyeIndices,
        thresholds: &[f64],
    ) -> Result<Self> {
        let (errors, mean) = mean_error(predictions, truths, eyes)?;
        let curve = ced(&errors, thresholds)?;
        Ok(EvalReport {
            images: errors.len(),
            landmarks: truths[0].len(),
            errors,
            mean,
            curve,
        })
    }

    pub fn mean_error_percent(&self) -> f64 {
        self.mean * 100.0
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        if !self.curve.is_empty() {
            out.push_str("threshold,fraction\n");
            for (l, f) in &self.curve {
                let _ = writeln!(out, "{l:.6},{f:.6}");
            }
        }
        let _ = writeln!(out, "mean_error_percent,{:.6}", self.mean_error_percent());
        out
    }

    /// `key=value` summary for scripts.
    pub fn to_summary(&self) -> String {
        let max = self.errors.iter().cloned().fold(0.0, f64::max);
        format!(
            "images={}\nlandmarks={}\nmean_error={:.6}\nmean_error_percent={:.6}\nmax_error={:.6}\n",
            self.images,
            self.landmarks,
            self.mean,
            self.mean_error_percent(),
            max
        )
    }
}

pub fn write_report(report: &EvalReport, path: &Path) -> Result<()> {
    fs::write(path, report.to_csv()).map_err(|e| Error::io(path, e))
}

/// Parses a CSV written by [`write_report`] into the curve and the mean
/// error in percent.
pub fn parse_report(text: &str) -> Result<(Vec<(f64, f64)>, f64)> {
    let mut curve = Vec::new();
    let mut mean = None;
    for (i, line) in text.lines().enumerate() {
        let err = |m: &str| Error::Parse {
            line: i + 1,
            message: m.to_string(),
        };
        if line == "threshold,fraction" || line.is_empty() {
            continue;
        }
        let (a, b) = line.split_once(',').ok_or_else(|| err("expected two fields"))?;
        let v: f64 = b.parse().map_err(|_| err("non-numeric value"))?;
        if a == "mean_error_percent" {
            mean = Some(v);
        } else {
            curve.push((a.parse().map_err(|_| err("non-numeric threshold"))?, v));
        }
    }
    let mean = mean.ok_or_else(|| Error::Parse {
        line: text.lines().count(),
        message: "missing mean_error_percent line".into(),
    })?;
    Ok((curve, mean))
}
