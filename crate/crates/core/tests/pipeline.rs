//! End-to-end forward, training and sampler pretraining behaviour.

use csiqa_core::csm::{pretrain_csm, reconstruction_mse, split_blocks, PretrainConfig, SamplingMatrix};
use csiqa_core::optim::AdamConfig;
use csiqa_core::synth::{synthetic_corpus, synthetic_dataset, SynthConfig};
use csiqa_core::train::{evaluate, train, Sample, TrainConfig, Trainer};
use csiqa_core::{seeded_rng, Error, Graph, Image, Model, ModelConfig, RatioMode, Tensor, Variant};

fn toy(variant: Variant, ratio_mode: RatioMode) -> ModelConfig {
    ModelConfig { variant, ratio_mode, crop_size: 16, seed: 5, ..ModelConfig::default() }
}

#[test]
fn forward_is_finite_and_repeatable() {
    for variant in [Variant::ClIqa, Variant::CsIqa] {
        let m = Model::new(toy(variant, RatioMode::Fixed(0.5))).unwrap();
        let img = Image::filled(16, 16, 0.5);
        let a = m.forward(&img, 0.5).unwrap();
        let b = m.forward(&img, 0.5).unwrap();
        assert!(a.score.is_finite());
        assert_eq!(a.score.to_bits(), b.score.to_bits());
        assert_eq!(a, b);
        assert_eq!(a.token_weights.len(), 16);
    }
}

#[test]
fn identity_sampling_and_embedding_feed_raw_blocks() {
    let mut rng = seeded_rng(71);
    let cfg = ModelConfig { embed_dim: 16, heads: 2, crop_size: 16, ..ModelConfig::default() };
    for variant in [Variant::ClIqa, Variant::CsIqa] {
        let mut m = Model::new(ModelConfig { variant, ..cfg.clone() }).unwrap();
        m.set_phi(&SamplingMatrix::identity(4)).unwrap();
        if let Some(id) = m.layout.embed {
            m.store.set(id, Tensor::eye(16)).unwrap();
        }
        let img = csiqa_core::synth::clean_pattern(16, &mut rng);
        let through = m.forward(&img, 1.0).unwrap().score;
        let (blocks, grid) = split_blocks(&img, 4).unwrap();
        let mut g = Graph::new();
        let bound = m.store.bind(&mut g);
        let raw = g.constant(blocks);
        let direct = m.forward_tokens_on(&mut g, &bound, raw, &grid).unwrap();
        assert!((g.value(direct.score).item() - through).abs() <= 1e-12, "{variant:?}");
    }
}

fn small_data() -> Vec<Sample> {
    synthetic_dataset(12, &SynthConfig { size: 20, ..SynthConfig::default() }, 3)
}

fn cfg(lr: f64) -> TrainConfig {
    TrainConfig { adam: AdamConfig { lr, ..AdamConfig::default() }, epochs: 1, eval_crops: 2, ..TrainConfig::default() }
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let data = small_data();
    let model = Model::new(toy(Variant::ClIqa, RatioMode::Fixed(0.2))).unwrap();
    let before = model.store.clone();
    let mut t = Trainer::new(model, cfg(0.0));
    t.run_epoch(&data, &data[..4]).unwrap();
    assert_eq!(t.step, 2);
    assert_eq!(t.model.store, before);
}

#[test]
fn same_seed_gives_identical_runs() {
    let data = small_data();
    let run = || {
        let model = Model::new(toy(Variant::ClIqa, RatioMode::Arbitrary(vec![0.1, 0.5]))).unwrap();
        let mut t = Trainer::new(model, cfg(1e-3));
        let losses: Vec<u64> = (0..4).map(|_| t.train_step(&data).unwrap().to_bits()).collect();
        (losses, t.model.store)
    };
    let (a, sa) = run();
    let (b, sb) = run();
    assert_eq!(a, b);
    assert_eq!(sa, sb);
}

#[test]
fn training_returns_best_validation_snapshot() {
    let data = small_data();
    let model = Model::new(toy(Variant::CsIqa, RatioMode::Fixed(0.5))).unwrap();
    let out = train(model, &data[..8], &data[8..], TrainConfig { epochs: 3, ..cfg(1e-3) }).unwrap();
    assert_eq!(out.history.len(), 3);
    let best = out.history.iter().map(|r| r.val_srcc).fold(f64::NEG_INFINITY, f64::max);
    let again = evaluate(&out.model, &data[8..], 0.5, 2, 5).unwrap();
    assert_eq!(again.srcc, best);
    assert!(train(out.model, &[], &data, cfg(1e-3)).is_err());
}

#[test]
fn non_finite_targets_stop_training() {
    let mut data = small_data();
    data[0].mos = f64::NAN;
    let model = Model::new(toy(Variant::ClIqa, RatioMode::Fixed(0.2))).unwrap();
    let mut t = Trainer::new(model, TrainConfig { batch_size: 12, ..cfg(1e-3) });
    assert!(matches!(t.train_step(&data), Err(Error::NonFiniteLoss { step: 0 })));
}

#[test]
fn evaluation_is_deterministic_and_pads_small_images() {
    let data = synthetic_dataset(6, &SynthConfig { size: 12, ..SynthConfig::default() }, 4);
    let model = Model::new(toy(Variant::ClIqa, RatioMode::Fixed(0.2))).unwrap();
    let a = evaluate(&model, &data, 0.2, 5, 9).unwrap();
    let b = evaluate(&model, &data, 0.2, 5, 9).unwrap();
    assert_eq!(a, b);
    assert!(a.predictions.iter().all(|p| p.is_finite()));
}

#[test]
fn pretraining_reduces_reconstruction_error() {
    let corpus = synthetic_corpus(3, 16, 8);
    let mut rng = seeded_rng(72);
    let phi = SamplingMatrix::orthogonal_gaussian(4, &mut rng);
    let cfg = PretrainConfig { epochs: 120, lr: 1e-2, width: 8, ..PretrainConfig::default() };
    let out = pretrain_csm(&corpus, phi, &cfg, &mut rng).unwrap();
    let (first, last) = (out.losses[0], *out.losses.last().unwrap());
    assert!(last * 10.0 <= first, "{first} -> {last}");
    let mse = reconstruction_mse(&out.phi, &out.reconstructor, &corpus, 0.25).unwrap();
    assert!(mse <= last * 1.5, "{mse} vs {last}");
}

#[test]
fn constant_corpus_is_learned_quickly() {
    let corpus: Vec<Image> = [0.2, 0.5, 0.8].iter().map(|&v| Image::filled(8, 8, v)).collect();
    let mut rng = seeded_rng(73);
    let phi = SamplingMatrix::orthogonal_gaussian(4, &mut rng);
    let cfg = PretrainConfig { epochs: 300, lr: 1e-2, width: 8, ..PretrainConfig::default() };
    let out = pretrain_csm(&corpus, phi, &cfg, &mut rng).unwrap();
    let last = *out.losses.last().unwrap();
    assert!(last < 1e-4 && last * 1e3 < out.losses[0], "{} -> {last}", out.losses[0]);
}
