//! Shape-indexed pooling: per-landmark max pooling of every feature channel
//! inside a `(2b+1) x (2b+1)` box centred on the landmark.
//!
//! The output for one image is laid out landmark-major, channel-minor:
//! `out[j * M + m]` is the maximum of channel `m` around landmark `j`.
//! Boxes are clamped to the map; landmarks off the map are clamped to the
//! border first. Landmark coordinates receive no gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::shape::LandmarkShape;
use crate::tensor::{Dims, Tensor};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SipConfig {
    /// Box half-width `b`; the box side is `2b + 1`.
    pub half_width: usize,
    /// Network tap the features are read from.
    pub tap: String,
}

impl Default for SipConfig {
    fn default() -> Self {
        SipConfig {
            half_width: 3,
            tap: "deconv7".to_string(),
        }
    }
}

impl SipConfig {
    pub fn with_half_width(half_width: usize) -> Self {
        SipConfig {
            half_width,
            ..SipConfig::default()
        }
    }
}

/// Positions selected by a forward pass, needed to scatter gradients back.
#[derive(Debug, Clone, PartialEq)]
pub struct SipRecord {
    featmap_dims: Dims,
    argmax: Vec<usize>,
}

impl SipRecord {
    pub fn featmap_dims(&self) -> Dims {
        self.featmap_dims
    }

    /// Flat featmap index chosen for every output component.
    pub fn argmax(&self) -> &[usize] {
        &self.argmax
    }
}

fn check_featmaps(featmaps: &Tensor) -> Result<()> {
    let d = featmaps.dims();
    if d.is_empty() {
        return Err(Error::Contract(format!("shape-indexed pooling on empty featmap {d}")));
    }
    Ok(())
}

fn pool_item(
    featmaps: &Tensor,
    item: usize,
    shape: &LandmarkShape,
    half_width: usize,
    out: &mut Vec<f64>,
    argmax: &mut Vec<usize>,
) {
    let d = featmaps.dims();
    let data = featmaps.data();
    for p in shape.points() {
        let (cx, cy) = p.grid_cell(d.w, d.h);
        let (x0, x1) = (cx.saturating_sub(half_width), (cx + half_width).min(d.w - 1));
        let (y0, y1) = (cy.saturating_sub(half_width), (cy + half_width).min(d.h - 1));
        for m in 0..d.c {
            let mut best_idx = d.offset(item, m, y0, x0);
            let mut best = data[best_idx];
            for y in y0..=y1 {
                let row = d.offset(item, m, y, 0);
                for x in x0..=x1 {
                    if data[row + x] > best {
                        best = data[row + x];
                        best_idx = row + x;
                    }
                }
            }
            out.push(best);
            argmax.push(best_idx);
        }
    }
}

/// Pools a single image's `1 x M x H x W` feature maps into an `M·p` vector.
pub fn shape_indexed_pool(
    featmaps: &Tensor,
    shape: &LandmarkShape,
    cfg: &SipConfig,
) -> Result<(Vec<f64>, SipRecord)> {
    check_featmaps(featmaps)?;
    let d = featmaps.dims();
    if d.n != 1 {
        return Err(Error::shape("shape_indexed_pool", "a single batch item", d));
    }
    let mut out = Vec::with_capacity(d.c * shape.len());
    let mut argmax = Vec::with_capacity(d.c * shape.len());
    pool_item(featmaps, 0, shape, cfg.half_width, &mut out, &mut argmax);
    Ok((
        out,
        SipRecord {
            featmap_dims: d,
            argmax,
        },
    ))
}

/// Batched pooling: one shape per batch item; output dims `(n, 1, 1, M·p)`.
pub fn shape_indexed_pool_batch(
    featmaps: &Tensor,
    shapes: &[LandmarkShape],
    cfg: &SipConfig,
) -> Result<(Tensor, SipRecord)> {
    check_featmaps(featmaps)?;
    let d = featmaps.dims();
    if shapes.len() != d.n {
        return Err(Error::shape("shape_indexed_pool", format!("{} shapes", d.n), shapes.len()));
    }
    let p = shapes[0].len();
    if shapes.iter().any(|s| s.len() != p) {
        return Err(Error::Contract("shapes in a batch must share p".into()));
    }
    let mut out = Vec::with_capacity(d.n * d.c * p);
    let mut argmax = Vec::with_capacity(d.n * d.c * p);
    for (i, s) in shapes.iter().enumerate() {
        pool_item(featmaps, i, s, cfg.half_width, &mut out, &mut argmax);
    }
    Ok((
        Tensor::from_vec(Dims::vector(d.n, d.c * p), out)?,
        SipRecord {
            featmap_dims: d,
            argmax,
        },
    ))
}

/// Scatters `upstream` back onto the recorded argmax cells.
pub fn shape_indexed_pool_backward(upstream: &[f64], record: &SipRecord) -> Result<Tensor> {
    if upstream.len() != record.argmax.len() {
        return Err(Error::Contract(format!(
            "stale pooling record: {} upstream components for {} pooled outputs",
            upstream.len(),
            record.argmax.len()
        )));
    }
    let mut g = Tensor::zeros(record.featmap_dims);
    for (&u, &idx) in upstream.iter().zip(&record.argmax) {
        g.data_mut()[idx] += u;
    }
    Ok(g)
}
