//! Run configuration: TOML file, then command-line overrides.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use tdm_core::features::CarryParams;
use tdm_core::{FeatureMask, ForestParams, PipelineConfig, ReportFormat, ScenarioParams, SegmenterConfig};

use crate::{GlobalArgs, SynthArgs};

/// A usage mistake: bad flag value, missing input, unreadable config.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Comma list of feature groups; unset means all groups for training
    /// and the bundle's own mask elsewhere.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
    pub format: String,
    pub max_gap: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    pub paths: Paths,
    pub forest: ForestSection,
    pub segmenter: SegmenterSection,
    pub carry: CarrySection,
    pub synth: SynthSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval: Option<PathBuf>,
    pub model_dir: PathBuf,
    /// Report, segmentation or feature output; stdout when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<PathBuf>,
    pub data_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            train: None,
            eval: None,
            model_dir: "model".into(),
            report: None,
            data_dir: "data".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForestSection {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    pub n_candidate_features: usize,
}

impl Default for ForestSection {
    fn default() -> Self {
        let p = ForestParams::default();
        ForestSection {
            n_trees: p.n_trees,
            max_depth: p.max_depth,
            min_leaf: p.min_leaf,
            n_candidate_features: p.n_candidate_features,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmenterSection {
    pub variance_floor: f64,
    pub absent_distance: f64,
}

impl Default for SegmenterSection {
    fn default() -> Self {
        let c = SegmenterConfig::default();
        SegmenterSection {
            variance_floor: c.variance_floor,
            absent_distance: c.absent_distance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CarrySection {
    pub angle_threshold: f64,
    pub speed_epsilon: f64,
}

impl Default for CarrySection {
    fn default() -> Self {
        let c = CarryParams::default();
        CarrySection {
            angle_threshold: c.angle_threshold,
            speed_epsilon: c.speed_epsilon,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub n_train: usize,
    pub n_eval: usize,
    pub n_frames: usize,
    pub noise_sigma: f64,
    pub depth_noise_sigma: f64,
    pub depth_signal: f64,
}

impl Default for SynthSection {
    fn default() -> Self {
        let p = ScenarioParams::default();
        SynthSection {
            n_train: 50,
            n_eval: 50,
            n_frames: p.n_frames,
            noise_sigma: p.noise_sigma,
            depth_noise_sigma: p.depth_noise_sigma,
            depth_signal: p.depth_signal,
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            mask: None,
            format: "table".into(),
            max_gap: tdm_core::track::DEFAULT_MAX_GAP,
            threads: None,
            paths: Paths::default(),
            forest: ForestSection::default(),
            segmenter: SegmenterSection::default(),
            carry: CarrySection::default(),
            synth: SynthSection::default(),
        }
    }
}

/// Which path `--out` names for a subcommand.
#[derive(Debug, Clone, Copy)]
pub enum OutTarget {
    DataDir,
    ModelDir,
    Report,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, Usage> {
        let text = fs::read_to_string(path)
            .map_err(|e| Usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Usage(format!("bad config {}: {e}", path.display())))
    }

    /// Flags win over file values.
    pub fn apply_flags(&mut self, flags: &GlobalArgs, out: OutTarget) {
        if let Some(v) = flags.seed {
            self.seed = v;
        }
        if let Some(v) = &flags.mask {
            self.mask = Some(v.clone());
        }
        if let Some(v) = flags.trees {
            self.forest.n_trees = v;
        }
        if let Some(v) = flags.max_depth {
            self.forest.max_depth = v;
        }
        if let Some(v) = &flags.format {
            self.format = v.clone();
        }
        if let Some(v) = flags.threads {
            self.threads = Some(v);
        }
        if let Some(v) = &flags.out {
            match out {
                OutTarget::DataDir => self.paths.data_dir = v.clone(),
                OutTarget::ModelDir => self.paths.model_dir = v.clone(),
                OutTarget::Report => self.paths.report = Some(v.clone()),
            }
        }
    }

    pub fn apply_synth_flags(&mut self, args: &SynthArgs) {
        let s = &mut self.synth;
        if let Some(v) = args.n_train {
            s.n_train = v;
        }
        if let Some(v) = args.n_eval {
            s.n_eval = v;
        }
        if let Some(v) = args.n_frames {
            s.n_frames = v;
        }
        if let Some(v) = args.noise {
            s.noise_sigma = v;
        }
        if let Some(v) = args.depth_noise {
            s.depth_noise_sigma = v;
        }
        if let Some(v) = args.depth_signal {
            s.depth_signal = v;
        }
    }

    /// Rejects values that cannot describe a run.
    pub fn check(&self) -> Result<(), Usage> {
        self.feature_mask()?;
        self.report_format()?;
        self.forest_params()
            .validate()
            .map_err(|e| Usage(e.to_string()))?;
        self.scenario().validate().map_err(|e| Usage(e.to_string()))?;
        if self.synth.n_train == 0 || self.synth.n_eval == 0 {
            return Err(Usage("synthetic splits need at least one video per class".into()));
        }
        if self.threads == Some(0) {
            return Err(Usage("threads must be at least 1".into()));
        }
        if self.segmenter.variance_floor.is_nan() || self.segmenter.variance_floor <= 0.0 {
            return Err(Usage("segmenter.variance_floor must be positive".into()));
        }
        Ok(())
    }

    pub fn feature_mask(&self) -> Result<FeatureMask, Usage> {
        match &self.mask {
            Some(s) => s.parse().map_err(|e: tdm_core::TdmError| Usage(e.to_string())),
            None => Ok(FeatureMask::ALL),
        }
    }

    pub fn report_format(&self) -> Result<ReportFormat, Usage> {
        self.format.parse().map_err(|e: tdm_core::TdmError| Usage(e.to_string()))
    }

    pub fn carry(&self) -> CarryParams {
        CarryParams {
            angle_threshold: self.carry.angle_threshold,
            speed_epsilon: self.carry.speed_epsilon,
        }
    }

    pub fn forest_params(&self) -> ForestParams {
        ForestParams {
            n_trees: self.forest.n_trees,
            max_depth: self.forest.max_depth,
            min_leaf: self.forest.min_leaf,
            n_candidate_features: self.forest.n_candidate_features,
            seed: self.seed,
        }
    }

    pub fn scenario(&self) -> ScenarioParams {
        ScenarioParams {
            n_frames: self.synth.n_frames,
            noise_sigma: self.synth.noise_sigma,
            depth_noise_sigma: self.synth.depth_noise_sigma,
            depth_signal: self.synth.depth_signal,
            seed: self.seed,
        }
    }

    pub fn pipeline(&self) -> Result<PipelineConfig, Usage> {
        Ok(PipelineConfig {
            max_gap: self.max_gap,
            segmenter: SegmenterConfig {
                variance_floor: self.segmenter.variance_floor,
                absent_distance: self.segmenter.absent_distance,
            },
            carry: self.carry(),
            mask: self.feature_mask()?,
            forest: self.forest_params(),
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configuration serializes")
    }
}
