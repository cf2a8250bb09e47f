//! Run configuration, read from a TOML document.
//!
//! Every table and key is optional; omitted values take the defaults below.
//! Unknown keys are rejected.

use std::path::Path;

use calc_neural::AdamConfig;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stage1::{self, Cnn1Spec, Omega};
use crate::stage2::{self, Cnn2Spec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Candidate threshold, inclusive.
    pub threshold_hu: f32,
    pub grid: GridConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub split: SplitConfig,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub inplane_spacing_mm: f64,
    pub slab_thickness_mm: f64,
    pub slab_spacing_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Config {
    /// One of 35, 67, 131, 259.
    pub receptive_field: usize,
    pub width: usize,
    pub fusion_width: usize,
    pub dropout: f64,
    /// Weight of the auxiliary losses.
    pub gamma: f64,
    pub omega: Omega,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Training patch side; at least the receptive field.
    pub patch: usize,
    pub steps: usize,
    pub validation_every: usize,
    pub validation_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage2Config {
    pub widths: [usize; 3],
    pub hidden: usize,
    pub dropout: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub validation_every: usize,
    pub validation_samples: usize,
    /// Skip stage 2 at inference; stage-1 labels are final.
    pub disabled: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub train: f64,
    pub validation: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            threshold_hu: 130.0,
            grid: GridConfig::default(),
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
            split: SplitConfig::default(),
            seed: 0,
        }
    }
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { inplane_spacing_mm: 0.66, slab_thickness_mm: 3.0, slab_spacing_mm: 1.5 }
    }
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            receptive_field: 131,
            width: 32,
            fusion_width: 128,
            dropout: 0.35,
            gamma: 0.05,
            omega: Omega::default(),
            learning_rate: 5e-4,
            weight_decay: 5e-5,
            batch_size: 64,
            patch: 155,
            steps: 20_000,
            validation_every: 500,
            validation_samples: 256,
        }
    }
}

impl Default for Stage2Config {
    fn default() -> Self {
        let spec = stage2::build_cnn2();
        Self {
            widths: spec.widths,
            hidden: spec.hidden,
            dropout: spec.dropout,
            learning_rate: 5e-4,
            weight_decay: 1e-5,
            batch_size: 64,
            steps: 10_000,
            validation_every: 500,
            validation_samples: 256,
            disabled: false,
        }
    }
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { train: 0.6, validation: 0.1 }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn stage1_spec(&self) -> Result<Cnn1Spec> {
        let s = &self.stage1;
        let spec = Cnn1Spec {
            dropout: s.dropout,
            gamma: s.gamma,
            omega: s.omega,
            ..stage1::build_cnn1(s.receptive_field)?.with_width(s.width, s.fusion_width)
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn stage2_spec(&self) -> Result<Cnn2Spec> {
        let s = &self.stage2;
        let spec = Cnn2Spec { dropout: s.dropout, ..stage2::build_cnn2().with_widths(s.widths, s.hidden) };
        spec.validate()?;
        Ok(spec)
    }

    pub fn stage1_adam(&self) -> AdamConfig {
        AdamConfig { learning_rate: self.stage1.learning_rate, weight_decay: self.stage1.weight_decay, ..AdamConfig::default() }
    }

    pub fn stage2_adam(&self) -> AdamConfig {
        AdamConfig { learning_rate: self.stage2.learning_rate, weight_decay: self.stage2.weight_decay, ..AdamConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !self.threshold_hu.is_finite() {
            return bad("threshold_hu must be finite".into());
        }
        let g = &self.grid;
        if [g.inplane_spacing_mm, g.slab_thickness_mm, g.slab_spacing_mm].iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return bad("grid spacings and slab thickness must be positive".into());
        }
        let s1 = &self.stage1;
        if s1.patch < s1.receptive_field || s1.patch % 2 == 0 {
            return bad(format!("stage1.patch {} must be odd and >= receptive_field {}", s1.patch, s1.receptive_field));
        }
        for (name, lr, wd, batch, every) in [
            ("stage1", s1.learning_rate, s1.weight_decay, s1.batch_size, s1.validation_every),
            ("stage2", self.stage2.learning_rate, self.stage2.weight_decay, self.stage2.batch_size, self.stage2.validation_every),
        ] {
            if !(lr > 0.0) || !(wd >= 0.0) {
                return bad(format!("{name}: learning_rate must be positive and weight_decay non-negative"));
            }
            if batch < 2 || every == 0 {
                return bad(format!("{name}: batch_size must be >= 2 and validation_every >= 1"));
            }
        }
        let sp = &self.split;
        if !(sp.train > 0.0 && sp.validation > 0.0 && sp.train + sp.validation < 1.0) {
            return bad("split fractions must be positive and leave room for a test split".into());
        }
        self.stage1_spec()?;
        self.stage2_spec()?;
        Ok(())
    }

    /// Content hash of the canonical TOML form.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        Sha256::digest(self.to_toml().as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}
