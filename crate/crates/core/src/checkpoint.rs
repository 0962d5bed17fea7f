//! Single-file model persistence.
//!
//! Little-endian binary layout:
//!
//! ```text
//! "CASC" | version u32
//! frame:   input_size u64 | pad_fraction f64
//! network: spec_len u64 | spec JSON | count u64 | count x tensor
//! space:   seed u64 | N u64 | p u64 | N*2p f64
//! cascade: K u64 | b u64 | tap_len u64 | tap utf-8 | K x (rows u64 | cols u64 | rows*cols f64 | rows f64)
//! tensor:  n c h w (u64 each) | n*c*h*w f64
//! ```
//!
//! All floats are stored bit-exactly.

use std::fs;
use std::path::Path;

use crate::cascade::{CascadeModel, CascadeStage};
use crate::error::{Error, Result};
use crate::network::{Network, NetworkSpec};
use crate::shape::LandmarkShape;
use crate::shape_space::ShapeSpace;
use crate::sip::SipConfig;
use crate::tensor::{Dims, Tensor};

pub const MAGIC: &[u8; 4] = b"CASC";
pub const VERSION: u32 = 1;

/// Everything needed to run inference.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub input_size: usize,
    pub pad_fraction: f64,
    pub network: Network,
    pub shape_space: ShapeSpace,
    pub cascade: CascadeModel,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u64(&mut self, v: usize) {
        self.0.extend((v as u64).to_le_bytes());
    }

    fn f64s(&mut self, vals: &[f64]) {
        for v in vals {
            self.0.extend(v.to_le_bytes());
        }
    }

    fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len());
        self.0.extend(b);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated at byte {} (wanted {n} more)", self.pos))
        })?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| Error::Checkpoint(format!("length {v} does not fit in memory")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let len = n.checked_mul(8).ok_or_else(|| Error::Checkpoint("array length overflow".into()))?;
        Ok(self
            .take(len)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u64()?;
        self.take(n)
    }
}

fn corrupt(e: Error) -> Error {
    match e {
        Error::Checkpoint(_) => e,
        other => Error::Checkpoint(other.to_string()),
    }
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer(MAGIC.to_vec());
        w.0.extend(VERSION.to_le_bytes());
        w.u64(self.input_size);
        w.f64s(&[self.pad_fraction]);

        let spec = serde_json::to_vec(self.network.spec()).expect("spec serializes");
        w.bytes(&spec);
        w.u64(self.network.params().len());
        for t in self.network.params() {
            for d in t.dims().as_array() {
                w.u64(d);
            }
            w.f64s(t.data());
        }

        let space = &self.shape_space;
        w.u64(space.seed() as usize);
        w.u64(space.len());
        w.u64(space.landmarks());
        for c in space.candidates() {
            w.f64s(&c.to_flat());
        }

        let cascade = &self.cascade;
        w.u64(cascade.stages().len());
        w.u64(cascade.sip().half_width);
        w.bytes(cascade.sip().tap.as_bytes());
        for s in cascade.stages() {
            w.u64(s.rows());
            w.u64(s.cols());
            w.f64s(s.weights());
            w.f64s(s.bias());
        }
        w.0
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (this build reads {VERSION})"
            )));
        }
        let input_size = r.u64()?;
        let pad_fraction = r.f64s(1)?[0];

        let spec: NetworkSpec = serde_json::from_slice(r.bytes()?)
            .map_err(|e| Error::Checkpoint(format!("network spec: {e}")))?;
        let count = r.u64()?;
        let mut params = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let dims = Dims::new(r.u64()?, r.u64()?, r.u64()?, r.u64()?);
            params.push(Tensor::from_vec(dims, r.f64s(dims.len())?).map_err(corrupt)?);
        }
        let network = Network::from_parts(spec, params).map_err(corrupt)?;

        let seed = r.u64()? as u64;
        let (n, p) = (r.u64()?, r.u64()?);
        let mut candidates = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            candidates.push(LandmarkShape::from_flat(&r.f64s(2 * p)?).map_err(corrupt)?);
        }
        let shape_space = ShapeSpace::new(candidates, seed).map_err(corrupt)?;

        let k = r.u64()?;
        let half_width = r.u64()?;
        let tap = String::from_utf8(r.bytes()?.to_vec())
            .map_err(|_| Error::Checkpoint("SIP tap is not UTF-8".into()))?;
        let mut stages = Vec::with_capacity(k.min(1 << 16));
        for index in 0..k {
            let (rows, cols) = (r.u64()?, r.u64()?);
            let len = rows
                .checked_mul(cols)
                .ok_or_else(|| Error::Checkpoint("stage size overflow".into()))?;
            let weights = r.f64s(len)?;
            let bias = r.f64s(rows)?;
            stages.push(CascadeStage::new(index, rows, cols, weights, bias).map_err(corrupt)?);
        }
        let cascade = CascadeModel::new(stages, SipConfig { half_width, tap }).map_err(corrupt)?;
        if r.pos != buf.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Checkpoint {
            input_size,
            pad_fraction,
            network,
            shape_space,
            cascade,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Checkpoint::decode(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cascade::CascadeStage;

    fn sample() -> Checkpoint {
        let p = 2;
        let spec = NetworkSpec::tiny(p);
        let network = Network::init(spec.clone(), 3).unwrap();
        let m = spec.feature_channels();
        let stage = |i: usize| {
            let w = (0..2 * p * m * p).map(|j| (j as f64 * 0.37 + i as f64).sin() / 7.0).collect();
            CascadeStage::new(i, 2 * p, m * p, w, vec![0.1 * i as f64, -0.2, 1e-300, f64::MIN_POSITIVE]).unwrap()
        };
        Checkpoint {
            input_size: 16,
            pad_fraction: 0.2,
            network,
            shape_space: ShapeSpace::new(
                vec![
                    LandmarkShape::from_pairs(&[(1.0, 2.0), (3.0, 4.0)]),
                    LandmarkShape::from_pairs(&[(5.5, 6.25), (7.0, 8.0 / 3.0)]),
                ],
                11,
            )
            .unwrap(),
            cascade: CascadeModel::new(vec![stage(0), stage(1)], SipConfig::with_half_width(2)).unwrap(),
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = sample();
        let bytes = ck.encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.encode(), bytes);
    }

    #[test]
    fn rejects_version_and_corruption() {
        let mut bytes = sample().encode();
        bytes[4] = 9;
        let err = Checkpoint::decode(&bytes).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(ref m) if m.contains("version 9")));

        let good = sample().encode();
        assert!(matches!(Checkpoint::decode(&good[..good.len() - 3]), Err(Error::Checkpoint(_))));
        assert!(matches!(Checkpoint::decode(b"JUNK\x01\x00\x00\x00"), Err(Error::Checkpoint(_))));
        let mut long = good.clone();
        long.push(0);
        assert!(Checkpoint::decode(&long).is_err());
    }
}
