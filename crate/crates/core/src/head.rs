//! Dual-branch scoring: per-token scores `s_i` and positive weights `w_i`
//! from two small MLPs of identical shape, pooled as
//! `sum(s_i w_i) / (sum(w_i) + eps)`.

use alloc::format;
use alloc::vec::Vec;

use crate::csm::BlockGrid;
use crate::encoder::Linear;
use crate::error::{contract, Result};
use crate::graph::{sigmoid_scalar, Graph, Var};
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;
use crate::Rng;

/// Denominator guard of the weighted average.
pub const SCORE_EPS: f64 = 1e-8;

/// `d -> d/2 -> 1` with GELU in between.
#[derive(Debug, Clone, Copy)]
pub struct Branch {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Branch {
    pub fn register(store: &mut ParamStore, name: &str, dim: usize, rng: &mut Rng) -> Self {
        let hidden = (dim / 2).max(1);
        Self {
            fc1: Linear::register(store, &format!("{name}.fc1"), dim, hidden, rng),
            fc2: Linear::register(store, &format!("{name}.fc2"), hidden, 1, rng),
        }
    }

    fn forward(&self, g: &mut Graph, bound: &Bound, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, bound, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, bound, h)
    }
}

/// Scoring branch (identity output) and weighting branch (sigmoid output).
#[derive(Debug, Clone, Copy)]
pub struct DualBranch {
    pub score: Branch,
    pub weight: Branch,
}

/// Graph handles of one pooled prediction.
#[derive(Debug, Clone, Copy)]
pub struct ScoreVars {
    pub score: Var,
    /// `[L, 1]` per-token scores.
    pub s: Var,
    /// `[L, 1]` per-token weights in `(0, 1)`.
    pub w: Var,
}

impl DualBranch {
    pub fn register(store: &mut ParamStore, name: &str, dim: usize, rng: &mut Rng) -> Self {
        Self {
            score: Branch::register(store, &format!("{name}.score"), dim, rng),
            weight: Branch::register(store, &format!("{name}.weight"), dim, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, bound: &Bound, features: Var, eps: f64) -> Result<ScoreVars> {
        let s = self.score.forward(g, bound, features)?;
        let wl = self.weight.forward(g, bound, features)?;
        let w = g.sigmoid(wl);
        let score = pool_on(g, s, w, eps)?;
        Ok(ScoreVars { score, s, w })
    }
}

/// Weighted average of `s` by `w` on the graph.
pub fn pool_on(g: &mut Graph, s: Var, w: Var, eps: f64) -> Result<Var> {
    let sw = g.mul(s, w)?;
    let num = g.sum(sw);
    let den = g.sum(w);
    let den = g.add_scalar(den, eps);
    g.div(num, den)
}

/// Pooled score of explicit per-token values.
pub fn pool(s: &[f64], w: &[f64], eps: f64) -> Result<f64> {
    if s.is_empty() || s.len() != w.len() {
        return Err(contract(format!("{} scores and {} weights", s.len(), w.len())));
    }
    let num: f64 = s.iter().zip(w).map(|(a, b)| a * b).sum();
    let den: f64 = w.iter().sum();
    Ok(num / (den + eps))
}

/// Scores `features: [L, d]`, returning the pooled score with the per-token
/// scores and weights.
pub fn score(store: &ParamStore, head: &DualBranch, features: &Tensor, eps: f64) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if features.dims2()?.0 == 0 {
        return Err(contract("no tokens to score"));
    }
    let mut g = Graph::new();
    let bound = store.bind(&mut g);
    let f = g.constant(features.clone());
    let out = head.forward(&mut g, &bound, f, eps)?;
    Ok((g.value(out.score).item(), g.value(out.s).data().to_vec(), g.value(out.w).data().to_vec()))
}

/// Per-token weights laid out on the block grid and min-max normalized to
/// `[0, 1]`; a constant map becomes 0.5 everywhere. Row-major
/// `blocks_h x blocks_w`.
pub fn weight_map(weights: &[f64], grid: &BlockGrid) -> Result<Vec<f64>> {
    if weights.len() != grid.len() {
        return Err(contract(format!("{} weights for a grid of {} blocks", weights.len(), grid.len())));
    }
    let lo = weights.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    Ok(weights.iter().map(|w| if span > 0.0 { ((w - lo) / span).clamp(0.0, 1.0) } else { 0.5 }).collect())
}

/// Sigmoid used by the weighting branch.
pub fn weight_activation(x: f64) -> f64 {
    sigmoid_scalar(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn hand_evaluated_pool() {
        assert_eq!(pool(&[1.0, 3.0], &[0.25, 0.75], 0.0).unwrap(), 2.5);
        assert!(pool(&[], &[], 0.0).is_err());
    }

    #[test]
    fn single_token_returns_its_score() {
        // the guard shifts the result by s * eps / (w + eps), at most eps / w relative
        let s = 3.7;
        for w in [0.4, 0.999] {
            let v = pool(&[s], &[w], SCORE_EPS).unwrap();
            assert!((v - s).abs() <= SCORE_EPS / w * s.abs());
        }
        assert_eq!(pool(&[s], &[0.4], 0.0).unwrap(), s);
    }

    #[test]
    fn weight_map_normalization() {
        let grid = BlockGrid::for_image(4, 8, 4).unwrap();
        assert_eq!(weight_map(&[0.1, 0.9], &grid).unwrap(), vec![0.0, 1.0]);
        assert_eq!(weight_map(&[0.3, 0.3], &grid).unwrap(), vec![0.5, 0.5]);
        assert!(weight_map(&[0.3], &grid).is_err());
    }

    #[test]
    fn weights_strictly_inside_unit_interval() {
        for x in [-30.0, -1.0, 0.0, 2.0, 30.0] {
            let w = weight_activation(x);
            assert!(w > 0.0 && w < 1.0);
        }
    }
}
