//! Procedural source/target scenes with weather sub-domains, plus the
//! on-disk dataset format and batch loading.

mod condition;
mod dataset;
mod scene;

pub use condition::{apply_condition, ConditionId, ConditionKind, FOG_HAZE};
pub use dataset::{
    build_dataset, load_label, load_rgb, mix_seed, save_label, save_rgb, Batch, BuiltDataset, ConditionSampler,
    DataConfig, Dataset, DatasetManifest, Record, Split, MANIFEST_VERSION, SOURCE_EVAL, SOURCE_TRAIN, TARGET_EVAL,
    TARGET_TRAIN,
};
pub use scene::{generate_scene, Domain, Sample, SceneSpec};
