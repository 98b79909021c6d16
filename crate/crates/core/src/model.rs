//! Full quality model: sampling, embedding (or bypass), positional table,
//! ViT stack, scaled Swin modules and the dual-branch head.

use alloc::format;
use alloc::vec::Vec;

use crate::aem::{add_position_on, bypass_on, embed_on, EmbeddingMatrix, PositionalTable};
use crate::csm::{rows_for_ratio, sample_on, split_blocks, BlockGrid, SamplingMatrix};
use crate::encoder::{encode, Sstm, SstmConfig, VitBlock, VitConfig};
use crate::error::{contract, Result};
use crate::graph::{Graph, Var};
use crate::head::{DualBranch, ScoreVars, SCORE_EPS};
use crate::image::Image;
use crate::params::{Bound, ParamId, ParamStore};
use crate::seeded_rng;
use crate::tensor::Tensor;

/// Ratios used by the arbitrary-ratio variant and for cross-ratio evaluation.
pub const RATIO_GRID: [f64; 4] = [0.1, 0.2, 0.5, 1.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Learned adaptive embedding of measurements.
    ClIqa,
    /// Measurements zero-padded straight into the transformer.
    CsIqa,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::ClIqa => "cl-iqa",
            Variant::CsIqa => "cs-iqa",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "cl-iqa" => Some(Variant::ClIqa),
            "cs-iqa" => Some(Variant::CsIqa),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RatioMode {
    /// One ratio for training and evaluation.
    Fixed(f64),
    /// A ratio drawn uniformly from the set for every training batch.
    Arbitrary(Vec<f64>),
}

impl RatioMode {
    pub fn ratios(&self) -> Vec<f64> {
        match self {
            RatioMode::Fixed(r) => alloc::vec![*r],
            RatioMode::Arbitrary(rs) => rs.clone(),
        }
    }

    /// Ratio used when evaluation does not name one: the fixed ratio, or the
    /// largest ratio of the set.
    pub fn default_eval_ratio(&self) -> f64 {
        self.ratios().into_iter().fold(f64::MIN, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub block: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub window: usize,
    pub alpha: f64,
    pub alpha_learnable: bool,
    pub sstm_count: usize,
    pub ratio_mode: RatioMode,
    pub crop_size: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    /// Desk-scale configuration.
    fn default() -> Self {
        Self {
            variant: Variant::ClIqa,
            block: 4,
            embed_dim: 32,
            depth: 2,
            heads: 4,
            window: 2,
            alpha: 0.1,
            alpha_learnable: false,
            sstm_count: 1,
            ratio_mode: RatioMode::Fixed(0.1),
            crop_size: 32,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// ViT-B sized configuration on 224-pixel crops with 16-pixel blocks.
    pub fn full_scale() -> Self {
        Self { block: 16, embed_dim: 768, depth: 12, heads: 12, window: 7, crop_size: 224, ..Self::default() }
    }

    /// Blocks per side of a crop.
    pub fn grid_side(&self) -> usize {
        self.crop_size.div_ceil(self.block)
    }

    pub fn max_tokens(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn vit(&self) -> VitConfig {
        VitConfig::new(self.depth, self.heads, self.embed_dim)
    }

    pub fn sstm(&self) -> SstmConfig {
        SstmConfig { window: self.window, alpha: self.alpha, alpha_learnable: self.alpha_learnable }
    }

    pub fn validate(&self) -> Result<()> {
        if self.block == 0 || self.crop_size == 0 || self.embed_dim == 0 {
            return Err(contract("block size, crop size and embedding dim must be positive"));
        }
        self.vit().validate()?;
        if !self.alpha.is_finite() {
            return Err(contract("alpha must be finite"));
        }
        if self.sstm_count > 0 && (self.window == 0 || !self.grid_side().is_multiple_of(self.window)) {
            return Err(contract(format!(
                "window {} does not divide the {}-block grid side",
                self.window,
                self.grid_side()
            )));
        }
        let ratios = self.ratio_mode.ratios();
        if ratios.is_empty() {
            return Err(contract("empty ratio set"));
        }
        for r in ratios {
            self.check_ratio(r)?;
        }
        Ok(())
    }

    /// Whether the model can run at `ratio`.
    pub fn check_ratio(&self, ratio: f64) -> Result<usize> {
        let rows = rows_for_ratio(ratio, self.block)?;
        if self.variant == Variant::CsIqa && rows > self.embed_dim {
            return Err(contract(format!(
                "ratio {ratio} gives {rows} measurements per block, more than the {} token width the bypass can carry",
                self.embed_dim
            )));
        }
        Ok(rows)
    }
}

/// Handles into the model's parameter store.
#[derive(Debug, Clone)]
pub struct Layout {
    pub phi: ParamId,
    pub embed: Option<ParamId>,
    pub pos: ParamId,
    pub blocks: Vec<VitBlock>,
    pub sstms: Vec<Sstm>,
    pub head: DualBranch,
}

/// Configuration plus parameters; registration order is fixed by the
/// configuration, so a store can be refilled by name.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub layout: Layout,
}

/// One scored image.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub score: f64,
    pub token_scores: Vec<f64>,
    pub token_weights: Vec<f64>,
    pub grid: BlockGrid,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seeded_rng(cfg.seed);
        let mut store = ParamStore::new();
        let n = cfg.block * cfg.block;
        let phi = store.add("csm.phi", SamplingMatrix::orthogonal_gaussian(cfg.block, &mut rng).phi);
        let embed = match cfg.variant {
            Variant::ClIqa => Some(store.add("aem.m", EmbeddingMatrix::init(cfg.embed_dim, n, &mut rng).m)),
            Variant::CsIqa => None,
        };
        let pos = store.add("aem.pos", PositionalTable::init(cfg.max_tokens(), cfg.embed_dim, &mut rng).p);
        let vit = cfg.vit();
        let blocks =
            (0..cfg.depth).map(|i| VitBlock::register(&mut store, &format!("vit.{i}"), &vit, &mut rng)).collect();
        let sstm_cfg = cfg.sstm();
        let sstms = (0..cfg.sstm_count)
            .map(|i| Sstm::register(&mut store, &format!("sstm.{i}"), &vit, &sstm_cfg, &mut rng))
            .collect();
        let head = DualBranch::register(&mut store, "head", cfg.embed_dim, &mut rng);
        Ok(Self { cfg, store, layout: Layout { phi, embed, pos, blocks, sstms, head } })
    }

    pub fn phi(&self) -> SamplingMatrix {
        SamplingMatrix { phi: self.store.get(self.layout.phi).clone(), block: self.cfg.block }
    }

    pub fn set_phi(&mut self, phi: &SamplingMatrix) -> Result<()> {
        if phi.block != self.cfg.block {
            return Err(contract(format!("sampling matrix block {} but model block {}", phi.block, self.cfg.block)));
        }
        self.store.set(self.layout.phi, phi.phi.clone())
    }

    /// Everything after the token sequence: positions, encoder, Swin modules
    /// and head.
    pub fn forward_tokens_on(&self, g: &mut Graph, bound: &Bound, tokens: Var, grid: &BlockGrid) -> Result<ScoreVars> {
        let x = add_position_on(g, tokens, bound[self.layout.pos])?;
        let mut h = encode(g, bound, &self.layout.blocks, x, self.cfg.heads)?;
        for s in &self.layout.sstms {
            h = s.forward(g, bound, h, (grid.blocks_h, grid.blocks_w), self.cfg.window, self.cfg.heads)?;
        }
        self.layout.head.forward(g, bound, h, SCORE_EPS)
    }

    /// Scores a block matrix `[L, B^2]` at `ratio`.
    pub fn forward_blocks_on(
        &self,
        g: &mut Graph,
        bound: &Bound,
        blocks: Tensor,
        grid: &BlockGrid,
        ratio: f64,
    ) -> Result<ScoreVars> {
        let rows = self.cfg.check_ratio(ratio)?;
        let x = g.constant(blocks);
        let y = sample_on(g, bound[self.layout.phi], x, rows)?;
        let tokens = match self.layout.embed {
            Some(m) => embed_on(g, bound[m], y)?,
            None => bypass_on(g, y, self.cfg.embed_dim)?,
        };
        self.forward_tokens_on(g, bound, tokens, grid)
    }

    /// Scores a single-channel image whose block grid fits the model.
    pub fn forward_on(&self, g: &mut Graph, bound: &Bound, img: &Image, ratio: f64) -> Result<(ScoreVars, BlockGrid)> {
        let (blocks, grid) = split_blocks(img, self.cfg.block)?;
        if grid.len() > self.cfg.max_tokens() {
            return Err(contract(format!(
                "{}x{} image needs {} tokens, model supports {}",
                img.height(),
                img.width(),
                grid.len(),
                self.cfg.max_tokens()
            )));
        }
        Ok((self.forward_blocks_on(g, bound, blocks, &grid, ratio)?, grid))
    }

    pub fn forward(&self, img: &Image, ratio: f64) -> Result<Prediction> {
        let mut g = Graph::new();
        let bound = self.store.bind(&mut g);
        let (out, grid) = self.forward_on(&mut g, &bound, img, ratio)?;
        Ok(Prediction {
            score: g.value(out.score).item(),
            token_scores: g.value(out.s).data().to_vec(),
            token_weights: g.value(out.w).data().to_vec(),
            grid,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        assert!(ModelConfig::full_scale().validate().is_ok());
        let bad_window = ModelConfig { window: 3, ..ModelConfig::default() };
        assert!(bad_window.validate().is_err());
        let bad_heads = ModelConfig { heads: 5, ..ModelConfig::default() };
        assert!(bad_heads.validate().is_err());
        let narrow = ModelConfig { variant: Variant::CsIqa, embed_dim: 8, heads: 2, ..ModelConfig::default() };
        assert!(narrow.check_ratio(0.5).is_ok());
        assert!(narrow.check_ratio(1.0).is_err());
    }

    #[test]
    fn registration_order_is_stable() {
        let a = Model::new(ModelConfig::default()).unwrap();
        let b = Model::new(ModelConfig::default()).unwrap();
        assert_eq!(a.store, b.store);
        let names = a.store.names();
        assert_eq!(names[0], "csm.phi");
        assert_eq!(names[1], "aem.m");
        assert_eq!(names[2], "aem.pos");
        assert!(names.last().unwrap().starts_with("head.weight"));
    }

    #[test]
    fn cs_variant_has_no_embedding() {
        let cfg = ModelConfig { variant: Variant::CsIqa, ..ModelConfig::default() };
        let m = Model::new(cfg).unwrap();
        assert!(m.store.find("aem.m").is_none());
    }

    #[test]
    fn oversized_image_rejected() {
        let m = Model::new(ModelConfig { crop_size: 8, ..ModelConfig::default() }).unwrap();
        assert!(m.forward(&Image::filled(12, 12, 0.5), 0.5).is_err());
        assert!(m.forward(&Image::filled(8, 8, 0.5), 0.5).is_ok());
    }
}
