//! Small models and datasets shared by the integration tests.
#![allow(dead_code)]

use csiqa::checkpoint::TrainingState;
use csiqa::config::RunConfig;
use csiqa_core::synth::{synthetic_dataset, SynthConfig};
use csiqa_core::train::{select, split_dataset, Sample, TrainConfig, Trainer};
use csiqa_core::{Model, ModelConfig, RatioMode};

pub fn tiny_config(ratio_mode: RatioMode) -> RunConfig {
    let model =
        ModelConfig { embed_dim: 16, depth: 1, heads: 2, crop_size: 16, ratio_mode, seed: 5, ..ModelConfig::default() };
    let train = TrainConfig { batch_size: 4, epochs: 100, eval_crops: 2, ..TrainConfig::default() };
    RunConfig { model, train, split_seed: 9 }
}

pub fn fresh_state(config: RunConfig) -> TrainingState {
    let model = Model::new(config.model.clone()).unwrap();
    TrainingState { trainer: Trainer::new(model, config.train), config }
}

/// Train and validation parts of a 20-image synthetic dataset.
pub fn toy_split() -> (Vec<Sample>, Vec<Sample>) {
    let data = synthetic_dataset(20, &SynthConfig { size: 20, blur_fraction: 0.25 }, 3);
    let split = split_dataset(data.len(), 9);
    (select(&data, &split.train), select(&data, &split.val))
}

/// One optimizer step, closing the epoch when its last batch was consumed.
pub fn advance(state: &mut TrainingState, train: &[Sample], val: &[Sample]) {
    state.trainer.train_step(train).unwrap();
    if state.trainer.epoch_complete() {
        state.trainer.end_epoch(val).unwrap();
    }
}
