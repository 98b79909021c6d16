//! Shared helpers: random tensors and central-difference gradient checks.
#![allow(dead_code)]

use csiqa_core::params::ParamStore;
use csiqa_core::{seeded_rng, Graph, Rng, Tensor, Var};
use rand_distr::{Distribution, StandardNormal};

/// Central-difference step.
pub const STEP: f64 = 1e-5;
/// Denominator floor of [`rel_err`]; keeps near-zero gradients from turning
/// rounding noise into large relative errors.
pub const FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, FLOOR)`.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

pub fn randn(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape, data).unwrap()
}

/// Random entries with magnitude in `[0.2, 1.2]`, away from kinks at zero.
pub fn randn_away_from_zero(shape: &[usize], rng: &mut Rng) -> Tensor {
    let mut t = randn(shape, rng);
    for v in t.data_mut() {
        let s: f64 = StandardNormal.sample(rng);
        *v = v.signum() * (0.2 + (s.abs()).min(1.0));
    }
    t
}

/// Reduces an arbitrary output to a scalar with fixed random weights, so
/// every output element contributes a distinct term.
fn project(g: &mut Graph, out: Var) -> Var {
    let shape = g.shape(out).to_vec();
    let mut rng = seeded_rng(0xfeed);
    let r = g.constant(randn(&shape, &mut rng));
    let p = g.mul(out, r).unwrap();
    g.sum(p)
}

fn eval(inputs: &[Tensor], build: &dyn Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = build(&mut g, &vars);
    let l = project(&mut g, out);
    g.value(l).item()
}

/// Largest relative error between reverse-mode and central-difference
/// gradients of `build` with respect to every element of every input.
pub fn max_op_error(inputs: &[Tensor], build: &dyn Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t)).collect();
    let out = build(&mut g, &vars);
    let l = project(&mut g, out);
    let grads = g.backward(l).unwrap();
    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).unwrap();
        for i in 0..inputs[k].numel() {
            let x0 = inputs[k].data()[i];
            probe[k].data_mut()[i] = x0 + STEP;
            let up = eval(&probe, build);
            probe[k].data_mut()[i] = x0 - STEP;
            let down = eval(&probe, build);
            probe[k].data_mut()[i] = x0;
            let numeric = (up - down) / (2.0 * STEP);
            worst = worst.max(rel_err(analytic.data()[i], numeric));
        }
    }
    worst
}

/// Per-parameter worst relative error of `loss` (which binds the store
/// itself) against central differences over every trainable element.
/// Losses should be O(1): the difference quotient cannot resolve gradients
/// below `ulp(loss) / (2 * STEP)`.
pub fn max_store_errors(
    store: &ParamStore,
    loss: &dyn Fn(&ParamStore, &mut Graph) -> (Var, csiqa_core::params::Bound),
) -> Vec<(String, f64)> {
    let mut g = Graph::new();
    let (l, bound) = loss(store, &mut g);
    let grads = g.backward(l).unwrap();
    let analytic = store.collect_grads(&bound, &grads);
    let value = |s: &ParamStore| {
        let mut g = Graph::new();
        let (l, _) = loss(s, &mut g);
        g.value(l).item()
    };
    let mut probe = store.clone();
    let mut out = Vec::new();
    for (id, a) in store.trainable_ids().into_iter().zip(analytic) {
        let mut worst = 0.0f64;
        for i in 0..a.numel() {
            let x0 = store.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = x0 + STEP;
            let up = value(&probe);
            probe.get_mut(id).data_mut()[i] = x0 - STEP;
            let down = value(&probe);
            probe.get_mut(id).data_mut()[i] = x0;
            worst = worst.max(rel_err(a.data()[i], (up - down) / (2.0 * STEP)));
        }
        out.push((store.name(id).to_string(), worst));
    }
    out
}
