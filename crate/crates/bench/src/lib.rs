//! Shared fixtures for the benchmarks.

use reid_core::data::{augment, generate_synthetic, preprocess, AugmentConfig, ReidDataset, SynthConfig};
use reid_core::model::ModelConfig;

/// Preprocessed and augmented desk-preset training set of `ids` identities.
pub fn desk_training_set(ids: usize) -> (ModelConfig, ReidDataset) {
    let model = ModelConfig::desk(ids);
    let raw = generate_synthetic(&SynthConfig::new(ids, 2, 4, model.input_size, 1000))
        .expect("valid synthetic config");
    let pre = preprocess(&raw, model.input_size).expect("non-empty");
    let ds = augment(&pre, &AugmentConfig::new(model.input_size), 0).expect("valid augment config");
    (model, ds)
}
