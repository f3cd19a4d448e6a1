//! Fixtures shared by the pipeline benchmarks.

use tdm_core::pipeline::{preprocess, train_models};
use tdm_core::synth::gen_splits;
use tdm_core::{
    segment, video_features, ActionClass, FeatureMask, FeatureVector, ModelBundle, PipelineConfig,
    ScenarioParams, VideoSample,
};

/// Default synthetic splits, already preprocessed.
pub fn splits(n_per_class: usize) -> (Vec<VideoSample>, Vec<VideoSample>) {
    let (train, eval) = gen_splits(n_per_class, n_per_class, &ScenarioParams::default())
        .expect("default scenario is valid");
    let prep = |v: Vec<VideoSample>| v.iter().map(|s| preprocess(s, 3)).collect();
    (prep(train), prep(eval))
}

pub fn bundle(train: &[VideoSample], n_trees: usize) -> ModelBundle {
    let mut config = PipelineConfig::default();
    config.forest.n_trees = n_trees;
    train_models(train, &ActionClass::putting_classes(), &config).expect("synthetic data trains")
}

/// Feature rows and binary labels for one class, segmented with that
/// class's phase model.
pub fn feature_table(bundle: &ModelBundle, samples: &[VideoSample], class: u32) -> (Vec<FeatureVector>, Vec<bool>) {
    let model = &bundle.models[&class];
    samples
        .iter()
        .map(|s| {
            let seg = segment(&model.phase_model, s).expect("non-empty video");
            let x = video_features(s, &seg, FeatureMask::ALL, model.carry).expect("matching lengths");
            (x, s.class_id == Some(class))
        })
        .unzip()
}
