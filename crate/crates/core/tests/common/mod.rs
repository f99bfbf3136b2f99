#![allow(dead_code)]

pub mod gradcheck;
pub mod lpcheck;
pub mod reference;

use std::sync::OnceLock;

use consistency_at::augment::AugmentPolicy;
use consistency_at::data::{synthetic_split, DatasetSplit};
use consistency_at::model::ModelSpec;
use consistency_at::objective::LossConfig;
use consistency_at::train::{run_training, RunOptions, TrainConfig};
use consistency_at::{Classifier, RngState};

pub const CLASSES: usize = 4;
pub const SIZE: usize = 8;

pub fn fixture_data() -> &'static DatasetSplit {
    static DATA: OnceLock<DatasetSplit> = OnceLock::new();
    DATA.get_or_init(|| synthetic_split(CLASSES, 48, 32, (3, SIZE, SIZE), RngState::new(11)))
}

pub fn fixture_config(seed: u64) -> TrainConfig {
    TrainConfig {
        model: ModelSpec::new("tiny_cnn", CLASSES, (3, SIZE, SIZE)),
        epochs: 6,
        batch_size: 16,
        lr: 0.05,
        loss: LossConfig {
            regularizer: "none".into(),
            lambda: 0.0,
            ..LossConfig::default()
        },
        augment: AugmentPolicy::none(),
        seed,
        dataset: "synthetic-fixture".into(),
        eval_limit: Some(32),
        ..TrainConfig::default()
    }
}

/// Two adversarially trained tiny_cnn models on the synthetic fixture data.
pub fn fixture_models() -> &'static (Classifier, Classifier) {
    static MODELS: OnceLock<(Classifier, Classifier)> = OnceLock::new();
    MODELS.get_or_init(|| {
        let train = |seed| {
            run_training(&fixture_config(seed), fixture_data(), &RunOptions::default())
                .expect("fixture training")
                .last
                .model
        };
        (train(1), train(2))
    })
}
