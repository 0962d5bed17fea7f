//! Run configuration: one JSON document layered over a profile preset.
//!
//! A config file only needs the keys it changes. Loading reads the
//! `profile` key (default `desk`), starts from that preset and merges the
//! document over it recursively.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::cascade::Ridge;
use crate::data::{AugmentConfig, SynthConfig, MIRROR_68, SYNTH_LANDMARKS, SYNTH_MIRROR};
use crate::error::{Error, Result};
use crate::metrics::EyeIndices;
use crate::network::NetworkSpec;
use crate::optim::SgdConfig;
use crate::shape_space::{DESK_CANDIDATES, PAPER_CANDIDATES};
use crate::sip::SipConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Desk,
    Paper,
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            other => Err(Error::Config(format!("unknown profile {other:?} (desk or paper)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingMode {
    /// Closed-form stage-by-stage fit on frozen features.
    Sequential,
    /// Sequential fit followed by joint SGD of network and cascade.
    Joint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NetworkChoice {
    Preset(String),
    Spec(NetworkSpec),
}

/// Generated faces used in place of manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticData {
    pub train: usize,
    pub test: usize,
    pub seed: u64,
    pub render: SynthConfig,
}

impl Default for SyntheticData {
    fn default() -> Self {
        SyntheticData {
            train: 500,
            test: 100,
            seed: 2024,
            render: SynthConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub profile: Profile,
    pub network: NetworkChoice,
    /// Working-frame side `T`.
    pub input_size: usize,
    pub pad_fraction: f64,
    pub landmarks: usize,
    /// Cascade length `K`.
    pub stages: usize,
    pub sip: SipConfig,
    /// Shape-space size `N`.
    pub candidates: usize,
    pub kmeans_iters: usize,
    pub ridge: Ridge,
    pub sgd: SgdConfig,
    pub epochs: usize,
    /// Learning-rate multiplier applied after every epoch.
    pub lr_decay: f64,
    pub mode: TrainingMode,
    pub joint_epochs: usize,
    pub joint_learning_rate: f64,
    /// Applied to the training set before phase 1 when present.
    pub augment: Option<AugmentConfig>,
    pub seed: u64,
    pub train_manifest: Option<PathBuf>,
    pub test_manifest: Option<PathBuf>,
    pub synthetic: Option<SyntheticData>,
    pub eyes: Option<EyeIndices>,
}

impl RunConfig {
    /// T=64, p=5 synthetic faces, tiny network, N=64, K=8, b=3.
    pub fn desk() -> Self {
        RunConfig {
            profile: Profile::Desk,
            network: NetworkChoice::Preset("tiny".into()),
            input_size: 64,
            pad_fraction: 0.2,
            landmarks: SYNTH_LANDMARKS,
            stages: 8,
            sip: SipConfig::with_half_width(3),
            candidates: DESK_CANDIDATES,
            kmeans_iters: 100,
            ridge: Ridge::default(),
            sgd: SgdConfig {
                learning_rate: 0.02,
                ..SgdConfig::default()
            },
            epochs: 8,
            lr_decay: 0.8,
            mode: TrainingMode::Sequential,
            joint_epochs: 1,
            joint_learning_rate: 1e-4,
            augment: None,
            seed: 7,
            train_manifest: None,
            test_manifest: None,
            synthetic: Some(SyntheticData::default()),
            eyes: None,
        }
    }

    /// The published settings: T=256, 68 landmarks, VGG-19 trunk, N=5000,
    /// K=8, b=3, 52x augmentation.
    pub fn paper() -> Self {
        RunConfig {
            profile: Profile::Paper,
            network: NetworkChoice::Preset("vgg19".into()),
            input_size: 256,
            landmarks: 68,
            candidates: PAPER_CANDIDATES,
            sgd: SgdConfig::default(),
            epochs: 10,
            lr_decay: 1.0,
            augment: Some(AugmentConfig::default()),
            synthetic: None,
            ..RunConfig::desk()
        }
    }

    pub fn for_profile(profile: Profile) -> Self {
        match profile {
            Profile::Desk => RunConfig::desk(),
            Profile::Paper => RunConfig::paper(),
        }
    }

    /// Parses a JSON document over the preset named by its `profile` key,
    /// or `fallback` when the key is absent.
    pub fn from_json(text: &str, fallback: Profile) -> Result<Self> {
        let doc: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid JSON: {e}")))?;
        if !doc.is_object() {
            return Err(Error::Config("configuration must be a JSON object".into()));
        }
        let profile = match doc.get("profile") {
            Some(v) => serde_json::from_value(v.clone()).map_err(|e| Error::Config(format!("profile: {e}")))?,
            None => fallback,
        };
        let mut base = serde_json::to_value(RunConfig::for_profile(profile)).expect("config serializes");
        // Enum-valued keys are replaced, never merged.
        if let (Some(b), Some(o)) = (base.as_object_mut(), doc.as_object()) {
            for key in ["ridge", "network"] {
                if o.contains_key(key) {
                    b.remove(key);
                }
            }
        }
        merge(&mut base, doc);
        serde_json::from_value(base).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path, fallback: Profile) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let cfg = RunConfig::from_json(&text, fallback)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn network_spec(&self) -> Result<NetworkSpec> {
        let spec = match &self.network {
            NetworkChoice::Preset(name) => NetworkSpec::preset(name, self.landmarks)?,
            NetworkChoice::Spec(spec) => spec.clone(),
        };
        if spec.head.channels != self.landmarks {
            return Err(Error::Config(format!(
                "network head has {} channels for {} landmarks",
                spec.head.channels, self.landmarks
            )));
        }
        Ok(spec)
    }

    pub fn eye_indices(&self) -> EyeIndices {
        self.eyes.clone().unwrap_or_else(|| EyeIndices::for_landmarks(self.landmarks))
    }

    /// Augmentation with the mirror table matched to the landmark count.
    pub fn augment_config(&self) -> Option<AugmentConfig> {
        self.augment.clone().map(|mut a| {
            if self.landmarks == SYNTH_LANDMARKS && a.mirror_permutation.len() != SYNTH_LANDMARKS {
                a.mirror_permutation = SYNTH_MIRROR.to_vec();
            }
            a
        })
    }

    /// Augmentation for `landmarks`-point data: the configured one, or the
    /// paper default with a matching mirror table.
    pub fn augment_or_default(&self, landmarks: usize) -> Result<AugmentConfig> {
        let mut a = self.augment.clone().unwrap_or_default();
        if a.mirror_permutation.len() != landmarks {
            a.mirror_permutation = match landmarks {
                SYNTH_LANDMARKS => SYNTH_MIRROR.to_vec(),
                68 => MIRROR_68.to_vec(),
                _ if a.mirror => {
                    return Err(Error::Config(format!(
                        "no mirror permutation configured for {landmarks} landmarks"
                    )))
                }
                _ => a.mirror_permutation,
            };
        }
        a.validate(landmarks)?;
        Ok(a)
    }

    /// Checks value ranges and that referenced manifests exist.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.stages == 0 {
            return bad("stages (K) must be at least 1".into());
        }
        if self.candidates == 0 {
            return bad("candidates (N) must be at least 1".into());
        }
        if self.input_size == 0 || self.input_size % 4 != 0 {
            return bad(format!("input_size {} must be a positive multiple of 4", self.input_size));
        }
        if self.landmarks == 0 {
            return bad("landmarks must be positive".into());
        }
        if !(self.pad_fraction >= 0.0 && self.pad_fraction.is_finite()) {
            return bad(format!("pad_fraction {} must be non-negative", self.pad_fraction));
        }
        let s = &self.sgd;
        if !(s.learning_rate > 0.0) || s.batch_size == 0 || !(0.0..1.0).contains(&s.momentum) || s.weight_decay < 0.0 {
            return bad(format!("invalid optimizer settings {s:?}"));
        }
        if !(self.lr_decay > 0.0) {
            return bad("lr_decay must be positive".into());
        }
        match self.ridge {
            Ridge::Relative(v) | Ridge::Absolute(v) if !(v >= 0.0 && v.is_finite()) => {
                return bad(format!("ridge strength {v} must be non-negative"));
            }
            _ => {}
        }
        let spec = self.network_spec()?;
        spec.validate()?;
        spec.output_size(self.input_size, self.input_size)?;
        self.eye_indices().validate(self.landmarks)?;
        if let Some(a) = self.augment_config() {
            a.validate(self.landmarks)?;
        }
        match (&self.synthetic, &self.train_manifest) {
            (Some(_), _) if self.landmarks != SYNTH_LANDMARKS => {
                return bad(format!("synthetic data has {SYNTH_LANDMARKS} landmarks, config says {}", self.landmarks));
            }
            (None, None) => return bad("either synthetic data or train_manifest is required".into()),
            _ => {}
        }
        // A missing data file is a data error, not a configuration error.
        for path in [&self.train_manifest, &self.test_manifest].into_iter().flatten() {
            if !path.exists() {
                return Err(Error::Data(format!("manifest {} does not exist", path.display())));
            }
        }
        Ok(())
    }
}

fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
