//! Candidate shape space and initialization search.
//!
//! Candidates come from k-means over flattened training shapes (k-means++
//! seeding, Lloyd iterations under squared Euclidean distance). At test
//! time the coarse shape read off the probability maps selects its nearest
//! candidate as the cascade's starting shape.

use std::cmp::Ordering;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::maps::argmax_location;
use crate::shape::{LandmarkShape, Point};
use crate::tensor::Tensor;

/// Documented full-scale candidate count.
pub const PAPER_CANDIDATES: usize = 5000;
/// Candidate count for the desk-scale profile.
pub const DESK_CANDIDATES: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct ShapeSpace {
    candidates: Vec<LandmarkShape>,
    seed: u64,
}

impl ShapeSpace {
    pub fn new(candidates: Vec<LandmarkShape>, seed: u64) -> Result<Self> {
        let p = candidates
            .first()
            .ok_or_else(|| Error::Contract("shape space needs at least one candidate".into()))?
            .len();
        if candidates.iter().any(|c| c.len() != p) {
            return Err(Error::Contract("shape space candidates must share p".into()));
        }
        Ok(ShapeSpace { candidates, seed })
    }

    pub fn candidates(&self) -> &[LandmarkShape] {
        &self.candidates
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn landmarks(&self) -> usize {
        self.candidates[0].len()
    }
}

/// Per-iteration diagnostics from [`kmeans_shapes_with_report`].
#[derive(Debug, Clone, PartialEq)]
pub struct KMeansReport {
    /// Objective after each assignment step.
    pub objectives: Vec<f64>,
    /// Cluster count actually used (may be below the request).
    pub clusters: usize,
    pub converged: bool,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn distinct_count(points: &[Vec<f64>]) -> usize {
    let mut sorted: Vec<&Vec<f64>> = points.iter().collect();
    let cmp = |a: &&Vec<f64>, b: &&Vec<f64>| {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| *o != Ordering::Equal)
            .unwrap_or(Ordering::Equal)
    };
    sorted.sort_by(cmp);
    sorted.dedup_by(|a, b| cmp(&&**a, &&**b) == Ordering::Equal);
    sorted.len()
}

/// Nearest centroid for every point (ties to the lower index) and the total objective.
fn assign(points: &[Vec<f64>], centroids: &[Vec<f64>], labels: &mut [usize], dists: &mut [f64]) -> f64 {
    let mut total = 0.0;
    for (i, p) in points.iter().enumerate() {
        let (mut best, mut best_d) = (0, f64::INFINITY);
        for (c, cen) in centroids.iter().enumerate() {
            let d = sq_dist(p, cen);
            if d < best_d {
                best = c;
                best_d = d;
            }
        }
        labels[i] = best;
        dists[i] = best_d;
        total += best_d;
    }
    total
}

fn kmeans_pp(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let target = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = None;
        for (i, &d) in d2.iter().enumerate() {
            if d <= 0.0 {
                continue;
            }
            acc += d;
            pick = Some(i);
            if acc > target {
                break;
            }
        }
        let Some(i) = pick else { break };
        centroids.push(points[i].clone());
        for (dj, p) in d2.iter_mut().zip(points) {
            *dj = dj.min(sq_dist(p, &points[i]));
        }
    }
    centroids
}

/// Clusters `shapes` into at most `n` candidates.
pub fn kmeans_shapes(shapes: &[LandmarkShape], n: usize, seed: u64, max_iters: usize) -> Result<ShapeSpace> {
    kmeans_shapes_with_report(shapes, n, seed, max_iters).map(|(s, _)| s)
}

pub fn kmeans_shapes_with_report(
    shapes: &[LandmarkShape],
    n: usize,
    seed: u64,
    max_iters: usize,
) -> Result<(ShapeSpace, KMeansReport)> {
    let p = shapes
        .first()
        .ok_or_else(|| Error::Contract("k-means needs at least one shape".into()))?
        .len();
    if shapes.iter().any(|s| s.len() != p) {
        return Err(Error::Contract("k-means shapes must share p".into()));
    }
    if n == 0 {
        return Err(Error::Config("candidate count must be at least 1".into()));
    }
    let points: Vec<Vec<f64>> = shapes.iter().map(LandmarkShape::to_flat).collect();
    let distinct = distinct_count(&points);
    let k = if n > distinct {
        warn!("requested {n} candidate shapes but only {distinct} distinct shapes exist; using {distinct}");
        distinct
    } else {
        n
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_pp(&points, k, &mut rng);
    let dim = 2 * p;
    let mut labels = vec![usize::MAX; points.len()];
    let mut prev_labels = labels.clone();
    let mut dists = vec![0.0; points.len()];
    let mut objectives = vec![assign(&points, &centroids, &mut labels, &mut dists)];
    let mut converged = false;

    for _ in 0..max_iters {
        let mut sums = vec![vec![0.0; dim]; centroids.len()];
        let mut counts = vec![0usize; centroids.len()];
        for (pt, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(pt) {
                *s += v;
            }
        }
        for (c, cen) in centroids.iter_mut().enumerate() {
            if counts[c] > 0 {
                for (cv, s) in cen.iter_mut().zip(&sums[c]) {
                    *cv = s / counts[c] as f64;
                }
            }
        }
        // Empty clusters move onto the point currently farthest from its centroid.
        for c in 0..centroids.len() {
            if counts[c] == 0 {
                let far = (0..points.len())
                    .fold(0, |best, i| if dists[i] > dists[best] { i } else { best });
                centroids[c] = points[far].clone();
                dists[far] = 0.0;
            }
        }
        prev_labels.copy_from_slice(&labels);
        objectives.push(assign(&points, &centroids, &mut labels, &mut dists));
        if labels == prev_labels {
            converged = true;
            break;
        }
    }

    let candidates = centroids
        .iter()
        .map(|c| LandmarkShape::from_flat(c))
        .collect::<Result<Vec<_>>>()?;
    Ok((
        ShapeSpace::new(candidates, seed)?,
        KMeansReport {
            objectives,
            clusters: k,
            converged,
        },
    ))
}

/// Coarse shape from probability maps (`1 x p x H x W`): each landmark sits
/// at its channel's argmax.
pub fn predict_shape_from_maps(maps: &Tensor) -> Result<LandmarkShape> {
    let d = maps.dims();
    if d.n != 1 || d.plane() == 0 {
        return Err(Error::shape("predict_shape_from_maps", "1 x p x H x W with H, W > 0", d));
    }
    Ok(LandmarkShape::new(
        (0..d.c)
            .map(|c| {
                let (x, y) = argmax_location(maps.plane(0, c), d.w);
                Point::new(x as f64, y as f64)
            })
            .collect(),
    ))
}

/// Nearest candidate under squared Euclidean distance; ties resolve to
/// the lowest index. Returns `(index, candidate, squared distance)`.
pub fn select_initialization(
    predicted: &LandmarkShape,
    space: &ShapeSpace,
) -> Result<(usize, LandmarkShape, f64)> {
    if space.is_empty() {
        return Err(Error::Contract("initialization search over an empty shape space".into()));
    }
    let mut best = (0, f64::INFINITY);
    for (i, c) in space.candidates().iter().enumerate() {
        let d = predicted.sq_distance(c)?;
        if d < best.1 {
            best = (i, d);
        }
    }
    Ok((best.0, space.candidates()[best.0].clone(), best.1))
}

/// Coordinate-wise mean of `shapes`.
pub fn mean_shape(shapes: &[LandmarkShape]) -> Result<LandmarkShape> {
    let first = shapes
        .first()
        .ok_or_else(|| Error::Contract("mean of zero shapes".into()))?;
    let mut acc = vec![0.0; 2 * first.len()];
    for s in shapes {
        first.expect_same_len(s)?;
        for (a, v) in acc.iter_mut().zip(s.to_flat()) {
            *a += v;
        }
    }
    let n = shapes.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    LandmarkShape::from_flat(&acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maps::target_tensor;

    fn single(x: f64, y: f64) -> LandmarkShape {
        LandmarkShape::from_pairs(&[(x, y)])
    }

    #[test]
    fn one_cluster_is_centroid() {
        let s = kmeans_shapes(&[single(0.0, 0.0), single(10.0, 10.0)], 1, 0, 50).unwrap();
        assert_eq!(s.candidates(), &[single(5.0, 5.0)]);
    }

    #[test]
    fn exact_cover_has_zero_objective() {
        let shapes: Vec<_> = (0..7).map(|i| single(i as f64 * 3.0, (i * i) as f64)).collect();
        let (space, rep) = kmeans_shapes_with_report(&shapes, 7, 11, 20).unwrap();
        assert_eq!(*rep.objectives.last().unwrap(), 0.0);
        let mut got: Vec<Vec<f64>> = space.candidates().iter().map(|c| c.to_flat()).collect();
        let mut want: Vec<Vec<f64>> = shapes.iter().map(|c| c.to_flat()).collect();
        got.sort_by(|a, b| a[0].total_cmp(&b[0]));
        want.sort_by(|a, b| a[0].total_cmp(&b[0]));
        assert_eq!(got, want);
    }

    #[test]
    fn too_many_clusters_are_reduced() {
        let shapes = vec![single(1.0, 1.0), single(1.0, 1.0), single(2.0, 2.0)];
        let (space, rep) = kmeans_shapes_with_report(&shapes, 5, 0, 10).unwrap();
        assert_eq!(space.len(), 2);
        assert_eq!(rep.clusters, 2);
        assert!(kmeans_shapes(&[], 1, 0, 10).is_err());
    }

    #[test]
    fn selection_examples() {
        let space = ShapeSpace::new(vec![single(0.0, 0.0), single(10.0, 10.0)], 0).unwrap();
        let (i, _, d) = select_initialization(&single(2.0, 2.0), &space).unwrap();
        assert_eq!((i, d), (0, 8.0));
        let (i, c, d) = select_initialization(&single(10.0, 10.0), &space).unwrap();
        assert_eq!((i, d), (1, 0.0));
        assert_eq!(c, single(10.0, 10.0));
        let (i, _, _) = select_initialization(&single(5.0, 5.0), &space).unwrap();
        assert_eq!(i, 0);
    }

    #[test]
    fn mean_shape_examples() {
        let a = LandmarkShape::from_pairs(&[(0.0, 0.0)]);
        let b = LandmarkShape::from_pairs(&[(2.0, 4.0)]);
        assert_eq!(mean_shape(&[a.clone(), b]).unwrap(), single(1.0, 2.0));
        assert_eq!(mean_shape(std::slice::from_ref(&a)).unwrap(), a);
        assert!(mean_shape(&[]).is_err());
    }

    #[test]
    fn maps_recover_shape() {
        let s = LandmarkShape::from_pairs(&[(3.0, 1.0), (0.0, 7.0), (5.0, 5.0)]);
        let maps = target_tensor(&s, 8, 6).unwrap();
        assert_eq!(predict_shape_from_maps(&maps).unwrap(), s);
        let uniform = Tensor::filled(maps.dims(), 0.1);
        assert_eq!(predict_shape_from_maps(&uniform).unwrap(), LandmarkShape::zeros(3));
    }
}
