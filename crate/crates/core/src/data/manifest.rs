//! Dataset manifests: one `image_path pts_path left top width height` per
//! line. Relative paths resolve against the manifest's directory; blank
//! lines and `#` comments are skipped.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{parse_pts, BBox, GrayImage, Sample};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub pts: PathBuf,
    pub bbox: BBox,
}

pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |message: String| Error::Parse { line: i + 1, message };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 6 {
            return Err(err(format!("expected 6 fields, found {}", fields.len())));
        }
        let mut nums = [0.0; 4];
        for (slot, tok) in nums.iter_mut().zip(&fields[2..]) {
            *slot = tok.parse().map_err(|_| err(format!("non-numeric bbox value {tok:?}")))?;
        }
        let bbox = BBox::new(nums[0], nums[1], nums[2], nums[3]);
        bbox.validate().map_err(|e| err(e.to_string()))?;
        out.push(ManifestEntry {
            image: base.join(fields[0]),
            pts: base.join(fields[1]),
            bbox,
        });
    }
    Ok(out)
}

pub fn write_manifest(entries: &[ManifestEntry]) -> String {
    let mut out = String::new();
    for e in entries {
        let b = &e.bbox;
        let _ = writeln!(
            out,
            "{} {} {} {} {} {}",
            e.image.display(),
            e.pts.display(),
            b.left,
            b.top,
            b.width,
            b.height
        );
    }
    out
}

/// Reads a manifest and every image and landmark file it references.
pub fn load_manifest(path: &Path) -> Result<Vec<Sample>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let entries = parse_manifest(&text, base).map_err(|e| match e {
        Error::Parse { line, message } => Error::Data(format!("{}:{line}: {message}", path.display())),
        other => other,
    })?;
    let mut samples = Vec::with_capacity(entries.len());
    for e in entries {
        let image = GrayImage::load(&e.image)?;
        let pts_text = fs::read_to_string(&e.pts).map_err(|err| Error::io(&e.pts, err))?;
        let shape = parse_pts(&pts_text).map_err(|err| match err {
            Error::Parse { line, message } => Error::Data(format!("{}:{line}: {message}", e.pts.display())),
            other => other,
        })?;
        samples.push(Sample {
            image,
            shape,
            bbox: e.bbox,
        });
    }
    if let Some(first) = samples.first() {
        let p = first.shape.len();
        if let Some(bad) = samples.iter().position(|s| s.shape.len() != p) {
            return Err(Error::Data(format!(
                "{}: entry {} has {} landmarks, expected {p}",
                path.display(),
                bad + 1,
                samples[bad].shape.len()
            )));
        }
    }
    Ok(samples)
}
