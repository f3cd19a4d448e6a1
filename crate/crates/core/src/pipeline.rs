//! End-to-end training, prediction, evaluation and model persistence.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TdmError};
use crate::eval::EvalReport;
use crate::features::{video_features, CarryParams, FeatureMask};
use crate::forest::{predict_class, train_class_forest, ClassModel, ForestParams};
use crate::phase::{fit_phase_model, segment, PhaseModel, SegmenterConfig};
use crate::track::{interpolate_missing, normalize_depth, ActionClass, ClassId, VideoSample, DEFAULT_MAX_GAP};

const MANIFEST_FORMAT: &str = "tdm-bundle-v1";
const MANIFEST_FILE: &str = "bundle.json";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub max_gap: usize,
    pub segmenter: SegmenterConfig,
    pub carry: CarryParams,
    pub mask: FeatureMask,
    pub forest: ForestParams,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            max_gap: DEFAULT_MAX_GAP,
            segmenter: SegmenterConfig::default(),
            carry: CarryParams::default(),
            mask: FeatureMask::ALL,
            forest: ForestParams::default(),
        }
    }
}

/// Gap interpolation followed by depth normalization.
pub fn preprocess(sample: &VideoSample, max_gap: usize) -> VideoSample {
    normalize_depth(&interpolate_missing(sample, max_gap))
}

/// One phase model per class, fitted on that class's labelled videos.
/// Samples must already be preprocessed.
pub fn fit_phase_models(
    train: &[VideoSample],
    classes: &[ActionClass],
    config: SegmenterConfig,
) -> Result<BTreeMap<ClassId, PhaseModel>> {
    classes
        .iter()
        .map(|class| {
            let own: Vec<VideoSample> = train
                .iter()
                .filter(|s| s.class_id == Some(class.id) && s.phase_truth.is_some())
                .cloned()
                .collect();
            if own.is_empty() {
                return Err(TdmError::Training(format!(
                    "class {} has no phase-labelled training videos",
                    class.id
                )));
            }
            let model = fit_phase_model(&own, config)
                .map_err(|e| TdmError::Training(format!("class {}: {e}", class.id)))?;
            Ok((class.id, model))
        })
        .collect()
}

/// A trained set of class models plus the preprocessing they expect.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub classes: Vec<ActionClass>,
    pub models: BTreeMap<ClassId, ClassModel>,
    pub max_gap: usize,
}

/// Trains every class's phase model and one-vs-rest forest.
///
/// Class `c`'s forest sees each training video through `c`'s own
/// segmentation, exactly as at prediction time.
pub fn train_models(
    train: &[VideoSample],
    classes: &[ActionClass],
    config: &PipelineConfig,
) -> Result<ModelBundle> {
    config.forest.validate()?;
    let mut row_classes = Vec::with_capacity(train.len());
    for s in train {
        row_classes.push(s.class_id.ok_or_else(|| {
            TdmError::Training(format!("training video \"{}\" has no class_id", s.video_id))
        })?);
    }
    for class in classes {
        if !row_classes.contains(&class.id) {
            return Err(TdmError::Training(format!(
                "class {} has no training examples",
                class.id
            )));
        }
    }
    let prepared: Vec<VideoSample> = train
        .par_iter()
        .map(|s| preprocess(s, config.max_gap))
        .collect();
    let phase_models = fit_phase_models(&prepared, classes, config.segmenter)?;

    let models = classes
        .par_iter()
        .map(|class| {
            let phase_model = phase_models[&class.id].clone();
            let rows = prepared
                .par_iter()
                .map(|s| {
                    let seg = segment(&phase_model, s)?;
                    video_features(s, &seg, config.mask, config.carry)
                })
                .collect::<Result<Vec<_>>>()?;
            let forest = train_class_forest(&rows, &row_classes, class.id, &config.forest)?;
            Ok((
                class.id,
                ClassModel {
                    class_id: class.id,
                    phase_model,
                    forest,
                    params: config.forest,
                    mask: config.mask,
                    carry: config.carry,
                },
            ))
        })
        .collect::<Result<BTreeMap<_, _>>>()?;
    Ok(ModelBundle {
        classes: classes.to_vec(),
        models,
        max_gap: config.max_gap,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestWire {
    format: String,
    max_gap: usize,
    classes: Vec<ManifestClass>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestClass {
    id: ClassId,
    name: String,
    model: String,
}

impl ModelBundle {
    pub fn class_ids(&self) -> Vec<ClassId> {
        self.models.keys().copied().collect()
    }

    pub fn mask(&self) -> FeatureMask {
        self.models
            .values()
            .next()
            .map(|m| m.mask)
            .unwrap_or_default()
    }

    pub fn predict(&self, sample: &VideoSample) -> Result<ClassId> {
        predict_class(&self.models, &preprocess(sample, self.max_gap))
    }

    /// Predicts every labelled video and tallies the results.
    pub fn evaluate(&self, samples: &[VideoSample], model_id: &str) -> Result<EvalReport> {
        let pairs = samples
            .par_iter()
            .map(|s| {
                let truth = s.class_id.ok_or_else(|| {
                    TdmError::Argument(format!("evaluation video \"{}\" has no class_id", s.video_id))
                })?;
                Ok((truth, self.predict(s)?))
            })
            .collect::<Result<Vec<_>>>()?;
        EvalReport::from_pairs(model_id, self.mask(), &pairs, &self.class_ids())
    }

    /// Writes `bundle.json`, plus `class_<id>.json` and `phase_<id>.json`
    /// for every class, into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut classes = Vec::new();
        for (id, model) in &self.models {
            let phase_file = format!("phase_{id}.json");
            let model_file = format!("class_{id}.json");
            fs::write(dir.join(&phase_file), model.phase_model.to_json() + "\n")?;
            fs::write(dir.join(&model_file), model.to_bundle_json(&phase_file) + "\n")?;
            let name = self
                .classes
                .iter()
                .find(|c| c.id == *id)
                .map(|c| c.name.clone())
                .unwrap_or_default();
            classes.push(ManifestClass {
                id: *id,
                name,
                model: model_file,
            });
        }
        let manifest = ManifestWire {
            format: MANIFEST_FORMAT.into(),
            max_gap: self.max_gap,
            classes,
        };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serialization");
        fs::write(dir.join(MANIFEST_FILE), text + "\n")?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<ModelBundle> {
        let manifest: ManifestWire =
            serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
        if manifest.format != MANIFEST_FORMAT {
            return Err(TdmError::Format(format!(
                "expected format \"{MANIFEST_FORMAT}\", found \"{}\"",
                manifest.format
            )));
        }
        let mut models = BTreeMap::new();
        let mut classes = Vec::new();
        for entry in manifest.classes {
            let text = fs::read_to_string(dir.join(&entry.model))?;
            let model = ClassModel::from_bundle_json(&text, |phase_ref| {
                PhaseModel::from_json(&fs::read_to_string(dir.join(phase_ref))?)
            })?;
            if model.class_id != entry.id {
                return Err(TdmError::Format(format!(
                    "{} holds class {} but the manifest says {}",
                    entry.model, model.class_id, entry.id
                )));
            }
            classes.push(ActionClass::new(entry.id, entry.name));
            models.insert(entry.id, model);
        }
        if models.is_empty() {
            return Err(TdmError::Format("bundle contains no class models".into()));
        }
        Ok(ModelBundle {
            classes,
            models,
            max_gap: manifest.max_gap,
        })
    }
}
