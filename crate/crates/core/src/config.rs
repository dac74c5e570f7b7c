//! Pipeline configuration: one JSON document, every field defaulted.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{BinarizePolicy, SplitFractions, TableFormat};
use crate::error::{Error, Result};
use crate::expansion::ExpansionConfig;
use crate::nn::{standard_grid, FeatureWidths, GridPoint, Site, TrainConfig};
use crate::skeleton::SkeletonConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub path: Option<PathBuf>,
    pub format: TableFormat,
    /// Column names for triplet formats.
    pub vocab: Option<PathBuf>,
    /// One class label per row; needed from `train` on.
    pub labels: Option<PathBuf>,
    /// `None`: `positive` for non-negative integer tables, `median` otherwise.
    pub binarize: Option<BinarizePolicy>,
    /// Rescale network inputs to zero mean and unit variance (fitted on train).
    pub standardize: bool,
    pub split: SplitFractions,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: None,
            format: TableFormat::DenseCsv,
            vocab: None,
            labels: None,
            binarize: None,
            standardize: false,
            split: SplitFractions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub points: Vec<GridPoint>,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            points: standard_grid(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InterpretConfig {
    pub embeddings: Option<PathBuf>,
    pub top_k: usize,
    /// Hidden units to score; `None` means the top feature group of a
    /// TSE-Net or the last hidden layer of a dense net.
    pub site: Option<Site>,
}

impl Default for InterpretConfig {
    fn default() -> Self {
        Self {
            embeddings: None,
            top_k: 10,
            site: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VizConfig {
    /// Image height × width must equal the number of observed variables.
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Master seed; copied into every stage by [`PipelineConfig::effective`].
    pub seed: u64,
    pub out: PathBuf,
    pub data: DataConfig,
    pub skeleton: SkeletonConfig,
    pub expansion: ExpansionConfig,
    pub net: FeatureWidths,
    pub train: TrainConfig,
    pub grid: GridConfig,
    pub interpret: InterpretConfig,
    pub viz: VizConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("tsenet-out"),
            data: DataConfig::default(),
            skeleton: SkeletonConfig::default(),
            expansion: ExpansionConfig::default(),
            net: FeatureWidths::default(),
            train: TrainConfig::default(),
            grid: GridConfig::default(),
            interpret: InterpretConfig::default(),
            viz: VizConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Stage seeds follow the master seed.
    pub fn effective(mut self) -> Self {
        self.skeleton.seed = self.seed;
        self.skeleton.em.seed = self.seed;
        self.train.seed = self.seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.skeleton.validate()?;
        self.expansion.validate()?;
        self.train.validate()?;
        if self.net.top == 0 || self.net.skip == 0 {
            return Err(Error::Config("feature widths must be at least 1".into()));
        }
        if self.interpret.top_k == 0 {
            return Err(Error::Config("top_k must be at least 1".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON of every field except the output directory.
    pub fn semantic_hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(m) = v.as_object_mut() {
            m.remove("out");
        }
        // serde_json maps are ordered by key, so this text is canonical
        let text = serde_json::to_string(&v).expect("value serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = PipelineConfig::default();
        let text = serde_json::to_string_pretty(&c).unwrap();
        let back: PipelineConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, c);
        let sparse: PipelineConfig =
            serde_json::from_str(r#"{"seed": 4, "expansion": {"fan_in_fraction": 0.1}}"#).unwrap();
        assert_eq!(sparse.seed, 4);
        assert_eq!(sparse.expansion.fan_in_fraction, 0.1);
        assert_eq!(sparse.skeleton, SkeletonConfig::default());
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"sed": 4}"#).is_err());
    }

    #[test]
    fn hash_tracks_semantic_fields_only() {
        let a = PipelineConfig::default();
        let mut b = a.clone();
        b.out = PathBuf::from("elsewhere");
        assert_eq!(a.semantic_hash(), b.semantic_hash());
        b.skeleton.delta = 2.5;
        assert_ne!(a.semantic_hash(), b.semantic_hash());
        let mut c = a.clone();
        c.train.dropout_rate = 0.4;
        assert_ne!(a.semantic_hash(), c.semantic_hash());
        let mut d = a.clone();
        d.seed = 1;
        assert_ne!(a.semantic_hash(), d.semantic_hash());
        assert_eq!(a.semantic_hash().len(), 64);
    }
}
