//! Reverse-mode gradients against central differences, op by op and through
//! whole modules.

mod common;

use common::{max_op_error, max_store_errors, randn, randn_away_from_zero};
use csiqa_core::csm::{sample_on, split_blocks, CsnetReconstructor, SamplingMatrix};
use csiqa_core::encoder::{encode, Sstm, SstmConfig, VitBlock, VitConfig};
use csiqa_core::head::SCORE_EPS;
use csiqa_core::params::ParamStore;
use csiqa_core::synth::clean_pattern;
use csiqa_core::{seeded_rng, Graph, Model, ModelConfig, Tensor, Variant};

const TOL: f64 = 1e-4;

fn assert_op(name: &str, inputs: &[Tensor], build: &dyn Fn(&mut Graph, &[csiqa_core::Var]) -> csiqa_core::Var) {
    let err = max_op_error(inputs, build);
    assert!(
        err <= TOL,
        "{name}: max relative error {err:e} for shapes {:?}",
        inputs.iter().map(|t| t.shape().to_vec()).collect::<Vec<_>>()
    );
}

const SHAPES: [[usize; 3]; 3] = [[1, 1, 1], [2, 3, 4], [5, 2, 3]];

#[test]
fn matmul_and_transpose() {
    let mut rng = seeded_rng(1);
    for [m, k, n] in SHAPES {
        let a = randn(&[m, k], &mut rng);
        let b = randn(&[k, n], &mut rng);
        assert_op("matmul", &[a.clone(), b], &|g, v| g.matmul(v[0], v[1]).unwrap());
        assert_op("transpose", &[a], &|g, v| g.transpose(v[0]).unwrap());
    }
}

#[test]
fn elementwise_binary() {
    let mut rng = seeded_rng(2);
    for [m, n, _] in SHAPES {
        let a = randn(&[m, n], &mut rng);
        let b = randn(&[m, n], &mut rng);
        let d = randn_away_from_zero(&[m, n], &mut rng);
        assert_op("add", &[a.clone(), b.clone()], &|g, v| g.add(v[0], v[1]).unwrap());
        assert_op("sub", &[a.clone(), b.clone()], &|g, v| g.sub(v[0], v[1]).unwrap());
        assert_op("mul", &[a.clone(), b.clone()], &|g, v| g.mul(v[0], v[1]).unwrap());
        assert_op("div", &[a.clone(), d], &|g, v| g.div(v[0], v[1]).unwrap());
        let row = randn(&[n], &mut rng);
        assert_op("add_row", &[a, row], &|g, v| g.add_row(v[0], v[1]).unwrap());
    }
}

#[test]
fn scalar_ops_and_reductions() {
    let mut rng = seeded_rng(3);
    for [m, n, _] in SHAPES {
        let a = randn(&[m, n], &mut rng);
        assert_op("scale", std::slice::from_ref(&a), &|g, v| g.scale(v[0], -1.7));
        assert_op("add_scalar", std::slice::from_ref(&a), &|g, v| g.add_scalar(v[0], 0.3));
        assert_op("sum", std::slice::from_ref(&a), &|g, v| g.sum(v[0]));
        assert_op("mean", &[a], &|g, v| g.mean(v[0]));
    }
}

#[test]
fn softmax_along_each_axis() {
    let mut rng = seeded_rng(4);
    for [m, n, k] in SHAPES {
        let a = randn(&[m, n], &mut rng);
        assert_op("softmax axis 0", std::slice::from_ref(&a), &|g, v| g.softmax(v[0], 0).unwrap());
        assert_op("softmax axis 1", &[a], &|g, v| g.softmax(v[0], 1).unwrap());
        let c = randn(&[m, n, k], &mut rng);
        assert_op("softmax rank 3", &[c], &|g, v| g.softmax(v[0], 1).unwrap());
    }
}

#[test]
fn layer_norm_all_inputs() {
    let mut rng = seeded_rng(5);
    for [m, _, n] in SHAPES.iter().map(|s| [s[0], s[1], s[2] + 1]) {
        let x = randn(&[m, n], &mut rng);
        let gain = randn(&[n], &mut rng);
        let bias = randn(&[n], &mut rng);
        assert_op("layer_norm", &[x, gain, bias], &|g, v| g.layer_norm(v[0], v[1], v[2], 1e-8).unwrap());
    }
}

#[test]
fn activations() {
    let mut rng = seeded_rng(6);
    for [m, n, _] in SHAPES {
        let a = randn(&[m, n], &mut rng);
        assert_op("gelu", std::slice::from_ref(&a), &|g, v| g.gelu(v[0]));
        assert_op("sigmoid", &[a], &|g, v| g.sigmoid(v[0]));
        let b = randn_away_from_zero(&[m, n], &mut rng);
        assert_op("relu", &[b], &|g, v| g.relu(v[0]));
    }
}

#[test]
fn shape_ops() {
    let mut rng = seeded_rng(7);
    for [m, n, k] in SHAPES {
        let a = randn(&[m, n * k], &mut rng);
        assert_op("reshape", std::slice::from_ref(&a), &|g, v| g.reshape(v[0], &[m * n, k]).unwrap());
        assert_op("narrow", std::slice::from_ref(&a), &|g, v| g.narrow(v[0], 1, n * k - 1, 1).unwrap());
        let b = randn(&[k, n * k], &mut rng);
        assert_op("concat rows", &[a.clone(), b], &|g, v| g.concat(&[v[0], v[1]], 0).unwrap());
        let c = randn(&[m, 2], &mut rng);
        assert_op("concat cols", &[a.clone(), c], &|g, v| g.concat(&[v[1], v[0], v[1]], 1).unwrap());
        let idx: Vec<usize> = (0..7).map(|i| (i * 5) % (m * n * k)).collect();
        assert_op("gather", std::slice::from_ref(&a), &|g, v| g.gather(v[0], idx.clone(), &[7]).unwrap());
        let rows: Vec<usize> = (0..m + 1).map(|i| (i * 3) % m).collect();
        assert_op("gather_rows", &[a], &|g, v| g.gather_rows(v[0], &rows).unwrap());
    }
}

#[test]
fn conv2d_strides_and_padding() {
    let mut rng = seeded_rng(8);
    for (c, o, h, k, stride, pad) in [(1, 1, 3, 1, 1, 0), (2, 3, 5, 3, 1, 1), (3, 2, 6, 2, 2, 0)] {
        let x = randn(&[c, h, h], &mut rng);
        let w = randn(&[o, c, k, k], &mut rng);
        let b = randn(&[o], &mut rng);
        assert_op("conv2d", &[x.clone(), w.clone(), b], &|g, v| g.conv2d(v[0], v[1], Some(v[2]), stride, pad).unwrap());
        assert_op("conv2d no bias", &[x, w], &|g, v| g.conv2d(v[0], v[1], None, stride, pad).unwrap());
    }
}

fn assert_store(label: &str, errors: &[(String, f64)]) {
    assert!(!errors.is_empty());
    for (name, err) in errors {
        assert!(*err <= TOL, "{label}: {name} max relative error {err:e}");
    }
}

#[test]
fn vit_encoder_parameters() {
    let mut rng = seeded_rng(9);
    let cfg = VitConfig::new(2, 2, 4);
    let mut store = ParamStore::new();
    let blocks: Vec<VitBlock> =
        (0..2).map(|i| VitBlock::register(&mut store, &format!("b{i}"), &cfg, &mut rng)).collect();
    let x = randn(&[3, 4], &mut rng);
    let target = randn(&[3, 4], &mut rng);
    let errors = max_store_errors(&store, &|s, g| {
        let bound = s.bind(g);
        let xv = g.constant(x.clone());
        let h = encode(g, &bound, &blocks, xv, 2).unwrap();
        let t = g.constant(target.clone());
        let p = g.mul(h, t).unwrap();
        (g.mean(p), bound)
    });
    assert_store("encoder", &errors);
}

#[test]
fn sstm_parameters_including_alpha() {
    let mut rng = seeded_rng(10);
    let cfg = VitConfig::new(1, 2, 4);
    let mut store = ParamStore::new();
    let sstm_cfg = SstmConfig { window: 2, alpha: 0.3, alpha_learnable: true };
    let sstm = Sstm::register(&mut store, "s", &cfg, &sstm_cfg, &mut rng);
    let x = randn(&[16, 4], &mut rng);
    let target = randn(&[16, 4], &mut rng);
    let errors = max_store_errors(&store, &|s, g| {
        let bound = s.bind(g);
        let xv = g.constant(x.clone());
        let h = sstm.forward(g, &bound, xv, (4, 4), 2, 2).unwrap();
        let t = g.constant(target.clone());
        let p = g.mul(h, t).unwrap();
        (g.mean(p), bound)
    });
    assert!(errors.iter().any(|(n, _)| n == "s.alpha"));
    assert_store("sstm", &errors);
}

#[test]
fn reconstructor_and_sampling_parameters() {
    let mut rng = seeded_rng(11);
    let rec = CsnetReconstructor::new(4, 0.25, 4, &mut rng).unwrap();
    let mut store = rec.store.clone();
    // The final convolution starts at zero; move it off so the residual
    // path contributes to every gradient.
    for id in store.trainable_ids() {
        if store.get(id).data().iter().all(|&v| v == 0.0) {
            let shape = store.get(id).shape().to_vec();
            store.set(id, randn(&shape, &mut rng).reshaped(&shape).unwrap()).unwrap();
        }
    }
    let phi_id = store.add("phi", SamplingMatrix::orthogonal_gaussian(4, &mut rng).phi);
    let img = clean_pattern(8, &mut rng);
    let (blocks, grid) = split_blocks(&img, 4).unwrap();
    let layout = rec.layout.clone();
    let errors = max_store_errors(&store, &|s, g| {
        let bound = s.bind(g);
        let x = g.constant(blocks.clone());
        let y = sample_on(g, bound[phi_id], x, layout.rows).unwrap();
        let out = layout.forward(g, &bound, y, &grid).unwrap();
        let target = g.constant(Tensor::new(&[1, 8, 8], img.data().to_vec()).unwrap());
        let d = g.sub(out, target).unwrap();
        let sq = g.mul(d, d).unwrap();
        (g.mean(sq), bound)
    });
    assert_store("reconstructor", &errors);
}

fn pipeline_errors(variant: Variant) -> Vec<(String, f64)> {
    let cfg = ModelConfig {
        variant,
        block: 4,
        embed_dim: 16,
        depth: 2,
        heads: 2,
        window: 2,
        crop_size: 8,
        alpha_learnable: true,
        seed: 21,
        ..ModelConfig::default()
    };
    let model = Model::new(cfg).unwrap();
    let mut rng = seeded_rng(12);
    let img = clean_pattern(8, &mut rng);
    let (blocks, grid) = split_blocks(&img, 4).unwrap();
    // Target a little off the current prediction so the loss stays O(1).
    let target = model.forward(&img, 0.5).unwrap().score + 0.3;
    max_store_errors(&model.store, &|s, g| {
        let bound = s.bind(g);
        let out = model.forward_blocks_on(g, &bound, blocks.clone(), &grid, 0.5).unwrap();
        let e = g.add_scalar(out.score, -target);
        (g.mul(e, e).unwrap(), bound)
    })
}

#[test]
fn full_pipeline_cl_variant() {
    assert_eq!(SCORE_EPS, 1e-8);
    assert_store("cl-iqa", &pipeline_errors(Variant::ClIqa));
}

#[test]
fn full_pipeline_cs_variant() {
    assert_store("cs-iqa", &pipeline_errors(Variant::CsIqa));
}
