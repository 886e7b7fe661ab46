//! Run configuration. Every section falls back to its defaults, so an empty
//! file is a valid configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bboxreg::BboxRegConfig;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::model::{DEFAULT_NMS_IOU, DEFAULT_TOP_K};
use crate::segfeat::{GridSpec, DEFAULT_LAMBDA};
use crate::synth::SynthConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    /// Grid size `K` of the inside-box segment and background features.
    pub grid: u32,
    /// Offset subtracted from the box/segment IoU feature.
    pub lambda: f64,
    /// Segments with fewer pixels are dropped at ingest; overrides the
    /// manifest's value when set.
    pub min_segment_pixels: Option<u64>,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            grid: 2,
            lambda: DEFAULT_LAMBDA,
            min_segment_pixels: None,
        }
    }
}

impl FeatureConfig {
    pub fn grid_spec(&self) -> Result<GridSpec> {
        GridSpec::new(self.grid)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectConfig {
    pub nms_iou: f64,
    pub top_k: usize,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            nms_iou: DEFAULT_NMS_IOU,
            top_k: DEFAULT_TOP_K,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Worker threads; machine parallelism when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    pub features: FeatureConfig,
    pub detect: DetectConfig,
    pub train: TrainConfig,
    pub bboxreg: BboxRegConfig,
    pub eval: EvalConfig,
    pub synth: SynthConfig,
}

impl Config {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = toml::from_str(&text).map_err(|e| crate::dataset::toml_error(path, &text, e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Invalid(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.features.grid_spec()?;
        if !self.features.lambda.is_finite() {
            return Err(Error::Invalid("features.lambda must be finite".into()));
        }
        if !(0.0..=1.0).contains(&self.detect.nms_iou) || self.detect.top_k == 0 {
            return Err(Error::Invalid(
                "detect: nms_iou must lie in [0, 1] and top_k be positive".into(),
            ));
        }
        if self.threads == Some(0) {
            return Err(Error::Invalid("threads must be at least 1".into()));
        }
        let b = &self.bboxreg;
        if !(b.change_thresh >= 0.0 && b.change_thresh <= 1.0) || !(b.pair_iou > 0.0 && b.pair_iou <= 1.0) {
            return Err(Error::Invalid(
                "bboxreg: change_thresh and pair_iou must lie in [0, 1]".into(),
            ));
        }
        if !(self.eval.iou_thresh > 0.0 && self.eval.iou_thresh <= 1.0) {
            return Err(Error::Invalid("eval.iou_thresh must lie in (0, 1]".into()));
        }
        self.train.validate()?;
        self.synth.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_all_defaults() {
        let cfg: Config = toml::from_str("").unwrap();
        assert_eq!(cfg, Config::default());
        assert_eq!(cfg.features.grid, 2);
        assert_eq!(cfg.features.lambda, -0.7);
        assert_eq!(cfg.detect.nms_iou, 0.3);
        assert_eq!(cfg.train.c_reg, 1e-2);
        assert_eq!(cfg.bboxreg.change_thresh, 0.2);
        assert_eq!(cfg.eval.iou_thresh, 0.5);
        cfg.validate().unwrap();
    }

    #[test]
    fn roundtrip_and_partial_override() {
        let text = Config::default().to_toml().unwrap();
        assert_eq!(toml::from_str::<Config>(&text).unwrap(), Config::default());
        let cfg: Config = toml::from_str("threads = 4\n[train.sgd]\nepochs = 3\n").unwrap();
        assert_eq!(cfg.threads, Some(4));
        assert_eq!(cfg.train.sgd.epochs, 3);
        assert_eq!(cfg.train.sgd.batch_size, 32);
    }

    #[test]
    fn unknown_keys_are_positioned_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "[train]\nc_reg = 0.1\nbogus = 1\n").unwrap();
        match Config::read(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }
}
