//! Ratio-adaptive embedding: a `d x B^2` matrix whose first `rows` columns
//! map each measurement vector to a `d`-dimensional token, plus a learnable
//! positional table. The parameter-free bypass zero-pads measurements to
//! width `d` instead.

use alloc::format;

use crate::csm::MeasurementSet;
use crate::error::{contract, Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{truncated_normal, xavier_uniform};
use crate::tensor::Tensor;
use crate::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    /// `d x B^2`.
    pub m: Tensor,
}

impl EmbeddingMatrix {
    pub fn new(m: Tensor) -> Result<Self> {
        m.dims2()?;
        Ok(Self { m })
    }

    pub fn init(embed_dim: usize, block_dim: usize, rng: &mut Rng) -> Self {
        Self { m: xavier_uniform(block_dim, embed_dim, &[embed_dim, block_dim], rng) }
    }

    pub fn embed_dim(&self) -> usize {
        self.m.shape()[0]
    }

    /// The first `rows` columns.
    pub fn truncate(&self, rows: usize) -> Result<Tensor> {
        let mut g = Graph::new();
        let m = g.constant(self.m.clone());
        let t = g.narrow(m, 1, 0, rows)?;
        Ok(g.value(t).clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PositionalTable {
    /// `L_max x d`.
    pub p: Tensor,
}

impl PositionalTable {
    /// Truncated normal with standard deviation 0.02.
    pub fn init(max_tokens: usize, embed_dim: usize, rng: &mut Rng) -> Self {
        Self { p: truncated_normal(&[max_tokens, embed_dim], 0.02, rng) }
    }

    pub fn max_tokens(&self) -> usize {
        self.p.shape()[0]
    }
}

/// `t_i = M[:, ..rows] y_i` for every row of `y: [L x rows]`.
pub fn embed_on(g: &mut Graph, m: Var, y: Var) -> Result<Var> {
    let rows = g.shape(y)[1];
    let cols = g.shape(m)[1];
    if rows > cols {
        return Err(contract(format!("{rows} measurements per block exceed embedding width {cols}")));
    }
    let m_r = g.narrow(m, 1, 0, rows)?;
    let m_t = g.transpose(m_r)?;
    g.matmul(y, m_t)
}

/// `x^0 = t + P[..L]`.
pub fn add_position_on(g: &mut Graph, tokens: Var, p: Var) -> Result<Var> {
    let l = g.shape(tokens)[0];
    let max = g.shape(p)[0];
    if l > max {
        return Err(contract(format!("{l} tokens exceed positional table of {max} rows")));
    }
    let rows = g.narrow(p, 0, 0, l)?;
    g.add(tokens, rows)
}

/// Zero-pads each measurement vector to `embed_dim`.
pub fn bypass_on(g: &mut Graph, y: Var, embed_dim: usize) -> Result<Var> {
    let (l, rows) = (g.shape(y)[0], g.shape(y)[1]);
    if rows > embed_dim {
        return Err(contract(format!("bypass needs at most {embed_dim} measurements per block, got {rows}")));
    }
    if rows == embed_dim {
        return Ok(y);
    }
    let zeros = g.constant(Tensor::zeros(&[l, embed_dim - rows]));
    g.concat(&[y, zeros], 1)
}

pub fn embed(m: &EmbeddingMatrix, meas: &MeasurementSet) -> Result<Tensor> {
    let mut g = Graph::new();
    let mv = g.constant(m.m.clone());
    let y = g.constant(meas.y.clone());
    let t = embed_on(&mut g, mv, y)?;
    Ok(g.value(t).clone())
}

pub fn add_position(tokens: &Tensor, p: &PositionalTable) -> Result<Tensor> {
    let (_, d) = tokens.dims2()?;
    if p.p.shape()[1] != d {
        return Err(Error::ShapeMismatch { op: "add_position", lhs: tokens.shape().into(), rhs: p.p.shape().into() });
    }
    let mut g = Graph::new();
    let t = g.constant(tokens.clone());
    let pv = g.constant(p.p.clone());
    let x = add_position_on(&mut g, t, pv)?;
    Ok(g.value(x).clone())
}

pub fn bypass_embed(meas: &MeasurementSet, embed_dim: usize) -> Result<Tensor> {
    let mut g = Graph::new();
    let y = g.constant(meas.y.clone());
    let t = bypass_on(&mut g, y, embed_dim)?;
    Ok(g.value(t).clone())
}
