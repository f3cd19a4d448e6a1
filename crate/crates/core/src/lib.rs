//! Interpretable top-down action recognition from object and hand
//! bounding-box tracks.
//!
//! The pipeline: [`track`] ingests and cleans annotated videos, [`phase`]
//! splits each video into the five manipulation phases a..e, [`features`]
//! turns a segmented video into a fixed-length relational feature vector,
//! [`forest`] trains one random forest per action class and arbitrates by
//! highest probability, and [`eval`] reports per-class precision and
//! recall with macro averages. [`synth`] generates labelled scenarios for
//! end-to-end checks and [`pipeline`] wires everything together.

pub mod error;
pub mod eval;
pub mod features;
pub mod forest;
pub mod phase;
pub mod pipeline;
pub mod seed;
pub mod synth;
pub mod track;

pub use error::{Result, TdmError};
pub use eval::{
    confusion, macro_average, precision_recall, render_report, ConfusionMatrix, EvalReport,
    MetricsTable, ReportFormat,
};
pub use features::{
    feature_names, hand_carry, iou, video_features, CarryParams, FeatureMask, FeatureVector,
    PhaseFeatureVector, FEATURE_DIM,
};
pub use forest::{
    gini, predict_class, predict_proba, train_forest, train_one_vs_rest, train_tree, ClassModel,
    ForestParams, Tree,
};
pub use phase::{
    brute_force_segment, fit_phase_model, frame_descriptor, phase_log_score, segment,
    FrameDescriptor, PhaseLabel, PhaseModel, PhaseSegmentation, SegmenterConfig,
};
pub use pipeline::{ModelBundle, PipelineConfig};
pub use synth::{gen_dataset, gen_sample, ScenarioParams};
pub use track::{
    interpolate_missing, normalize_depth, parse_dataset, write_dataset, ActionClass, BoundingBox,
    ClassId, FrameAnnotation, VideoSample,
};
