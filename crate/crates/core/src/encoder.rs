//! Transformer feature extraction: a stack of post-norm ViT blocks followed
//! by the scaled Swin module (two window-attention layers, the second with a
//! cyclic half-window shift, then `alpha * conv3x3(x) + x` over the token
//! grid).

use alloc::format;
use alloc::vec::Vec;

use crate::error::{contract, Result};
use crate::graph::{Graph, Var};
use crate::params::{xavier_uniform, Bound, ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::Rng;

/// Layer norm epsilon used throughout the encoder and head.
pub const LN_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VitConfig {
    pub depth: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub ff_hidden: usize,
}

impl VitConfig {
    pub fn new(depth: usize, heads: usize, embed_dim: usize) -> Self {
        Self { depth, heads, embed_dim, ff_hidden: 4 * embed_dim }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(contract(format!("embedding dim {} is not divisible by {} heads", self.embed_dim, self.heads)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SstmConfig {
    pub window: usize,
    pub alpha: f64,
    pub alpha_learnable: bool,
}

impl Default for SstmConfig {
    fn default() -> Self {
        Self { window: 2, alpha: 0.1, alpha_learnable: false }
    }
}

/// `y = x W + b` with `W: [in, out]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn register(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let w = store.add(format!("{name}.weight"), xavier_uniform(fan_in, fan_out, &[fan_in, fan_out], rng));
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
        Self { w, b }
    }

    pub fn forward(&self, g: &mut Graph, bound: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, bound[self.w])?;
        g.add_row(y, bound[self.b])
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn register(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Tensor::full(&[dim], 1.0));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[dim]));
        Self { gain, bias }
    }

    pub fn forward(&self, g: &mut Graph, bound: &Bound, x: Var) -> Result<Var> {
        g.layer_norm(x, bound[self.gain], bound[self.bias], LN_EPS)
    }
}

/// Multi-head self-attention with biased Q, K, V and output projections.
#[derive(Debug, Clone, Copy)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl Attention {
    pub fn register(store: &mut ParamStore, name: &str, dim: usize, rng: &mut Rng) -> Self {
        Self {
            q: Linear::register(store, &format!("{name}.q"), dim, dim, rng),
            k: Linear::register(store, &format!("{name}.k"), dim, dim, rng),
            v: Linear::register(store, &format!("{name}.v"), dim, dim, rng),
            o: Linear::register(store, &format!("{name}.out"), dim, dim, rng),
        }
    }

    /// Global attention over all rows of `x: [n, d]`. Also returns the
    /// `[n, n]` attention probabilities of every head.
    pub fn forward(&self, g: &mut Graph, bound: &Bound, x: Var, heads: usize) -> Result<(Var, Vec<Var>)> {
        let d = g.shape(x)[1];
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(contract(format!("embedding dim {d} is not divisible by {heads} heads")));
        }
        let dh = d / heads;
        let scale = 1.0 / libm::sqrt(dh as f64);
        let q = self.q.forward(g, bound, x)?;
        let k = self.k.forward(g, bound, x)?;
        let v = self.v.forward(g, bound, x)?;
        let mut outs = Vec::with_capacity(heads);
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = g.narrow(q, 1, h * dh, dh)?;
            let kh = g.narrow(k, 1, h * dh, dh)?;
            let vh = g.narrow(v, 1, h * dh, dh)?;
            let kt = g.transpose(kh)?;
            let logits = g.matmul(qh, kt)?;
            let logits = g.scale(logits, scale);
            let a = g.softmax(logits, 1)?;
            outs.push(g.matmul(a, vh)?);
            probs.push(a);
        }
        let cat = if heads == 1 { outs[0] } else { g.concat(&outs, 1)? };
        Ok((self.o.forward(g, bound, cat)?, probs))
    }
}

/// Token order that makes every `window x window` window of the grid
/// contiguous after a cyclic shift of `shift` (the grid is rolled so token
/// `(y, x)` of the shifted grid is token `((y + shift) % h, (x + shift) % w)`
/// of the original).
pub fn window_order(grid_h: usize, grid_w: usize, window: usize, shift: usize) -> Result<Vec<usize>> {
    if window == 0 || !grid_h.is_multiple_of(window) || !grid_w.is_multiple_of(window) {
        return Err(contract(format!("window {window} does not divide the {grid_h}x{grid_w} token grid")));
    }
    let mut order = Vec::with_capacity(grid_h * grid_w);
    for wy in 0..grid_h / window {
        for wx in 0..grid_w / window {
            for iy in 0..window {
                for ix in 0..window {
                    let y = (wy * window + iy + shift) % grid_h;
                    let x = (wx * window + ix + shift) % grid_w;
                    order.push(y * grid_w + x);
                }
            }
        }
    }
    Ok(order)
}

fn inverse(perm: &[usize]) -> Vec<usize> {
    let mut inv = alloc::vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Attention restricted to non-overlapping windows of the (shifted) token
/// grid. No mask is applied to windows that wrap around after the shift.
#[allow(clippy::too_many_arguments)]
pub fn window_attention(
    g: &mut Graph,
    bound: &Bound,
    attn: &Attention,
    x: Var,
    grid: (usize, usize),
    window: usize,
    shift: usize,
    heads: usize,
) -> Result<(Var, Vec<Var>)> {
    let (gh, gw) = grid;
    if g.shape(x)[0] != gh * gw {
        return Err(contract(format!("{} tokens do not fill a {gh}x{gw} grid", g.shape(x)[0])));
    }
    let order = window_order(gh, gw, window, shift)?;
    let xp = g.gather_rows(x, &order)?;
    let per = window * window;
    let mut outs = Vec::with_capacity(order.len() / per);
    let mut probs = Vec::new();
    for w in 0..order.len() / per {
        let xw = g.narrow(xp, 0, w * per, per)?;
        let (o, p) = attn.forward(g, bound, xw, heads)?;
        outs.push(o);
        probs.extend(p);
    }
    let cat = if outs.len() == 1 { outs[0] } else { g.concat(&outs, 0)? };
    Ok((g.gather_rows(cat, &inverse(&order))?, probs))
}

fn feed_forward(g: &mut Graph, bound: &Bound, ff1: &Linear, ff2: &Linear, x: Var) -> Result<Var> {
    let h = ff1.forward(g, bound, x)?;
    let h = g.gelu(h);
    ff2.forward(g, bound, h)
}

/// Post-norm transformer block:
/// `x~ = Norm(MSA(x) + x)`, `out = Norm(FF(x~) + x~)`.
#[derive(Debug, Clone, Copy)]
pub struct VitBlock {
    pub attn: Attention,
    pub norm1: Norm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub norm2: Norm,
}

impl VitBlock {
    pub fn register(store: &mut ParamStore, name: &str, cfg: &VitConfig, rng: &mut Rng) -> Self {
        let d = cfg.embed_dim;
        Self {
            attn: Attention::register(store, &format!("{name}.attn"), d, rng),
            norm1: Norm::register(store, &format!("{name}.norm1"), d),
            ff1: Linear::register(store, &format!("{name}.ff1"), d, cfg.ff_hidden, rng),
            ff2: Linear::register(store, &format!("{name}.ff2"), cfg.ff_hidden, d, rng),
            norm2: Norm::register(store, &format!("{name}.norm2"), d),
        }
    }

    pub fn forward(&self, g: &mut Graph, bound: &Bound, x: Var, heads: usize) -> Result<Var> {
        let (a, _) = self.attn.forward(g, bound, x, heads)?;
        let r = g.add(a, x)?;
        let xt = self.norm1.forward(g, bound, r)?;
        let f = feed_forward(g, bound, &self.ff1, &self.ff2, xt)?;
        let r = g.add(f, xt)?;
        self.norm2.forward(g, bound, r)
    }
}

/// Sequential application of `blocks`; an empty stack is the identity.
pub fn encode(g: &mut Graph, bound: &Bound, blocks: &[VitBlock], x: Var, heads: usize) -> Result<Var> {
    blocks.iter().try_fold(x, |h, b| b.forward(g, bound, h, heads))
}

/// Swin layer in its usual pre-norm arrangement:
/// `x' = x + WMSA(Norm(x))`, `out = x' + FF(Norm(x'))`.
#[derive(Debug, Clone, Copy)]
pub struct SwinLayer {
    pub norm1: Norm,
    pub attn: Attention,
    pub norm2: Norm,
    pub ff1: Linear,
    pub ff2: Linear,
}

impl SwinLayer {
    pub fn register(store: &mut ParamStore, name: &str, cfg: &VitConfig, rng: &mut Rng) -> Self {
        let d = cfg.embed_dim;
        Self {
            norm1: Norm::register(store, &format!("{name}.norm1"), d),
            attn: Attention::register(store, &format!("{name}.attn"), d, rng),
            norm2: Norm::register(store, &format!("{name}.norm2"), d),
            ff1: Linear::register(store, &format!("{name}.ff1"), d, cfg.ff_hidden, rng),
            ff2: Linear::register(store, &format!("{name}.ff2"), cfg.ff_hidden, d, rng),
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        bound: &Bound,
        x: Var,
        grid: (usize, usize),
        window: usize,
        shift: usize,
        heads: usize,
    ) -> Result<Var> {
        let n = self.norm1.forward(g, bound, x)?;
        let (a, _) = window_attention(g, bound, &self.attn, n, grid, window, shift, heads)?;
        let x1 = g.add(x, a)?;
        let n = self.norm2.forward(g, bound, x1)?;
        let f = feed_forward(g, bound, &self.ff1, &self.ff2, n)?;
        g.add(x1, f)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Sstm {
    pub layers: [SwinLayer; 2],
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    /// `[1]` scale on the convolution branch.
    pub alpha: ParamId,
}

impl Sstm {
    pub fn register(store: &mut ParamStore, name: &str, vit: &VitConfig, cfg: &SstmConfig, rng: &mut Rng) -> Self {
        let d = vit.embed_dim;
        let layers = [
            SwinLayer::register(store, &format!("{name}.stl0"), vit, rng),
            SwinLayer::register(store, &format!("{name}.stl1"), vit, rng),
        ];
        let conv_w = store.add(format!("{name}.conv.weight"), xavier_uniform(d * 9, d * 9, &[d, d, 3, 3], rng));
        let conv_b = store.add(format!("{name}.conv.bias"), Tensor::zeros(&[d]));
        let alpha = store.add_with(format!("{name}.alpha"), Tensor::scalar(cfg.alpha), cfg.alpha_learnable);
        Self { layers, conv_w, conv_b, alpha }
    }

    /// Tokens `[L, d]` laid out row-major on a `grid.0 x grid.1` grid.
    pub fn forward(
        &self,
        g: &mut Graph,
        bound: &Bound,
        x: Var,
        grid: (usize, usize),
        window: usize,
        heads: usize,
    ) -> Result<Var> {
        let (gh, gw) = grid;
        window_order(gh, gw, window, 0)?;
        let h = self.layers[0].forward(g, bound, x, grid, window, 0, heads)?;
        let h = self.layers[1].forward(g, bound, h, grid, window, window / 2, heads)?;
        let d = g.shape(h)[1];
        let ht = g.transpose(h)?;
        let maps = g.reshape(ht, &[d, gh, gw])?;
        let c = g.conv2d(maps, bound[self.conv_w], Some(bound[self.conv_b]), 1, 1)?;
        let c = g.reshape(c, &[d, gh * gw])?;
        let c = g.transpose(c)?;
        let alpha = g.gather(bound[self.alpha], alloc::vec![0; gh * gw * d], &[gh * gw, d])?;
        let scaled = g.mul(alpha, c)?;
        g.add(scaled, h)
    }
}
