//! Block-based compressed sampling.
//!
//! An image is reflect-padded to a multiple of the block size `B`, cut into
//! `L` non-overlapping `B x B` blocks in row-major order, and every flattened
//! block is multiplied by the first `ceil(ratio * B^2)` rows of a learnable
//! `B^2 x B^2` sampling matrix. The same sampling can be run as a stride-`B`
//! convolution whose kernels are those rows.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{contract, Error, Result};
use crate::graph::{Graph, Var};
use crate::image::{reflect, Image};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::params::{gaussian, xavier_uniform, Bound, ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::Rng;

/// Number of measurement rows kept at `ratio`: `ceil(ratio * B^2)`.
pub fn rows_for_ratio(ratio: f64, block: usize) -> Result<usize> {
    check_ratio(ratio)?;
    let n = block * block;
    // tolerate representation error such as 0.3 * 100 = 30.000000000000004
    let rows = libm::ceil(ratio * n as f64 - 1e-9) as usize;
    Ok(rows.clamp(1, n))
}

pub fn check_ratio(ratio: f64) -> Result<()> {
    if ratio.is_finite() && ratio > 0.0 && ratio <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidRatio(ratio))
    }
}

/// Geometry of the block partition of one image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockGrid {
    pub block: usize,
    pub blocks_h: usize,
    pub blocks_w: usize,
    /// Size of the image before padding.
    pub height: usize,
    pub width: usize,
}

impl BlockGrid {
    pub fn for_image(height: usize, width: usize, block: usize) -> Result<Self> {
        if block == 0 {
            return Err(contract("block size must be positive"));
        }
        if height == 0 || width == 0 {
            return Err(contract("empty image"));
        }
        Ok(Self { block, blocks_h: height.div_ceil(block), blocks_w: width.div_ceil(block), height, width })
    }

    /// Number of blocks `L`.
    pub fn len(&self) -> usize {
        self.blocks_h * self.blocks_w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn padded_height(&self) -> usize {
        self.blocks_h * self.block
    }

    pub fn padded_width(&self) -> usize {
        self.blocks_w * self.block
    }

    pub fn block_dim(&self) -> usize {
        self.block * self.block
    }

    /// Flat source pixel for every entry of the `L x B^2` block matrix,
    /// reflecting past the bottom and right edges.
    pub fn block_index(&self) -> Vec<usize> {
        let b = self.block;
        let mut idx = Vec::with_capacity(self.len() * b * b);
        for by in 0..self.blocks_h {
            for bx in 0..self.blocks_w {
                for iy in 0..b {
                    for ix in 0..b {
                        let y = reflect(by * b + iy, self.height);
                        let x = reflect(bx * b + ix, self.width);
                        idx.push(y * self.width + x);
                    }
                }
            }
        }
        idx
    }

    /// Inverse layout: for each pixel of the padded image, its position in
    /// the flattened block matrix.
    pub fn merge_index(&self) -> Vec<usize> {
        let b = self.block;
        let (ph, pw) = (self.padded_height(), self.padded_width());
        let mut idx = Vec::with_capacity(ph * pw);
        for y in 0..ph {
            for x in 0..pw {
                let blk = (y / b) * self.blocks_w + x / b;
                idx.push(blk * b * b + (y % b) * b + x % b);
            }
        }
        idx
    }
}

/// Measurement vectors of every block at one ratio.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementSet {
    /// `L x rows` matrix, one measurement vector per row.
    pub y: Tensor,
    pub grid: BlockGrid,
    pub ratio: f64,
}

impl MeasurementSet {
    pub fn rows(&self) -> usize {
        self.y.shape()[1]
    }

    /// Total number of measured scalars.
    pub fn scalar_count(&self) -> usize {
        self.y.numel()
    }
}

/// Splits a single-channel image into row-major flattened blocks,
/// reflect-padding to a multiple of `block` first.
pub fn split_blocks(img: &Image, block: usize) -> Result<(Tensor, BlockGrid)> {
    if img.channels() != 1 {
        return Err(contract("block splitting expects a single-channel image"));
    }
    let grid = BlockGrid::for_image(img.height(), img.width(), block)?;
    let data = grid.block_index().into_iter().map(|i| img.data()[i]).collect();
    Ok((Tensor::new(&[grid.len(), grid.block_dim()], data)?, grid))
}

/// Reassembles blocks into the padded image.
pub fn merge_blocks(blocks: &Tensor, grid: &BlockGrid) -> Result<Image> {
    if blocks.shape() != [grid.len(), grid.block_dim()] {
        return Err(contract(format!(
            "block matrix {:?} does not fit grid of {} blocks of {}",
            blocks.shape(),
            grid.len(),
            grid.block_dim()
        )));
    }
    let data = grid.merge_index().into_iter().map(|i| blocks.data()[i]).collect();
    Image::gray(grid.padded_height(), grid.padded_width(), data)
}

/// Learnable base sampling matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingMatrix {
    pub phi: Tensor,
    pub block: usize,
}

impl SamplingMatrix {
    pub fn new(phi: Tensor, block: usize) -> Result<Self> {
        let n = block * block;
        if block == 0 || phi.shape() != [n, n] {
            return Err(contract(format!("sampling matrix for block {block} must be {n}x{n}, got {:?}", phi.shape())));
        }
        Ok(Self { phi, block })
    }

    pub fn identity(block: usize) -> Self {
        Self { phi: Tensor::eye(block * block), block }
    }

    /// Gaussian rows orthonormalized by modified Gram-Schmidt, then scaled
    /// by `1 / B`.
    pub fn orthogonal_gaussian(block: usize, rng: &mut Rng) -> Self {
        let n = block * block;
        let raw = gaussian(&[n, n], 1.0, rng);
        let mut rows: Vec<Vec<f64>> = raw.data().chunks(n).map(|r| r.to_vec()).collect();
        for i in 0..n {
            for j in 0..i {
                let (done, rest) = rows.split_at_mut(i);
                let dot: f64 = rest[0].iter().zip(&done[j]).map(|(a, b)| a * b).sum();
                rest[0].iter_mut().zip(&done[j]).for_each(|(a, b)| *a -= dot * b);
            }
            let norm = libm::sqrt(rows[i].iter().map(|v| v * v).sum());
            rows[i].iter_mut().for_each(|v| *v /= norm);
        }
        let scale = 1.0 / block as f64;
        let data = rows.into_iter().flatten().map(|v| v * scale).collect();
        Self { phi: Tensor::new(&[n, n], data).expect("square"), block }
    }

    /// I.i.d. Gaussian entries with standard deviation `1 / B^2`, matching
    /// the expected row norm of [`Self::orthogonal_gaussian`].
    pub fn random_gaussian(block: usize, rng: &mut Rng) -> Self {
        let n = block * block;
        Self { phi: gaussian(&[n, n], 1.0 / n as f64, rng), block }
    }

    pub fn block_dim(&self) -> usize {
        self.block * self.block
    }

    /// The first `ceil(ratio * B^2)` rows.
    pub fn truncate(&self, ratio: f64) -> Result<Tensor> {
        let rows = rows_for_ratio(ratio, self.block)?;
        let n = self.block_dim();
        Tensor::new(&[rows, n], self.phi.data()[..rows * n].to_vec())
    }
}

/// Records `blocks * phi[..rows]^T` on the graph.
pub fn sample_on(g: &mut Graph, phi: Var, blocks: Var, rows: usize) -> Result<Var> {
    let phi_r = g.narrow(phi, 0, 0, rows)?;
    let phi_t = g.transpose(phi_r)?;
    g.matmul(blocks, phi_t)
}

/// Same measurements computed as a stride-`B` convolution over the padded
/// image, one `B x B` kernel per kept row.
pub fn sample_conv_on(g: &mut Graph, phi: Var, image: Var, grid: &BlockGrid, rows: usize) -> Result<Var> {
    let b = grid.block;
    let padded = pad_on(g, image, grid)?;
    let phi_r = g.narrow(phi, 0, 0, rows)?;
    let kernels = g.reshape(phi_r, &[rows, 1, b, b])?;
    let maps = g.conv2d(padded, kernels, None, b, 0)?;
    let flat = g.reshape(maps, &[rows, grid.len()])?;
    g.transpose(flat)
}

/// Reflect padding of a `[1, H, W]` image node to the grid's padded size.
pub fn pad_on(g: &mut Graph, image: Var, grid: &BlockGrid) -> Result<Var> {
    let (ph, pw) = (grid.padded_height(), grid.padded_width());
    let index = (0..ph)
        .flat_map(|y| (0..pw).map(move |x| (y, x)))
        .map(|(y, x)| reflect(y, grid.height) * grid.width + reflect(x, grid.width))
        .collect();
    g.gather(image, index, &[1, ph, pw])
}

fn image_tensor(img: &Image) -> Result<Tensor> {
    Tensor::new(&[1, img.height(), img.width()], img.data().to_vec())
}

/// `y_i = phi_ratio * x_i` for every block.
pub fn sample(phi: &SamplingMatrix, img: &Image, ratio: f64) -> Result<MeasurementSet> {
    let rows = rows_for_ratio(ratio, phi.block)?;
    let (blocks, grid) = split_blocks(img, phi.block)?;
    let mut g = Graph::new();
    let p = g.constant(phi.phi.clone());
    let x = g.constant(blocks);
    let y = sample_on(&mut g, p, x, rows)?;
    Ok(MeasurementSet { y: g.value(y).clone(), grid, ratio })
}

/// Convolutional form of [`sample`].
pub fn sample_conv(phi: &SamplingMatrix, img: &Image, ratio: f64) -> Result<MeasurementSet> {
    let rows = rows_for_ratio(ratio, phi.block)?;
    if img.channels() != 1 {
        return Err(contract("sampling expects a single-channel image"));
    }
    let grid = BlockGrid::for_image(img.height(), img.width(), phi.block)?;
    let mut g = Graph::new();
    let p = g.constant(phi.phi.clone());
    let x = g.constant(image_tensor(img)?);
    let y = sample_conv_on(&mut g, p, x, &grid, rows)?;
    Ok(MeasurementSet { y: g.value(y).clone(), grid, ratio })
}

/// Default hidden width of the refinement stack.
pub const CSNET_WIDTH: usize = 16;

/// Parameter handles of a CSNet-style reconstructor inside a [`ParamStore`]:
/// a per-block linear initial reconstruction followed by a residual stack of
/// three 3x3 convolutions with ReLU between them.
#[derive(Debug, Clone)]
pub struct CsnetLayout {
    pub rows: usize,
    pub block: usize,
    pub init_w: ParamId,
    pub init_b: ParamId,
    pub convs: [(ParamId, ParamId); 3],
}

impl CsnetLayout {
    /// Registers a reconstructor under `prefix`. The last convolution starts
    /// at zero so the refinement begins as the identity.
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        block: usize,
        rows: usize,
        width: usize,
        rng: &mut Rng,
    ) -> Self {
        let n = block * block;
        let init_w = store.add(format!("{prefix}.init.weight"), xavier_uniform(rows, n, &[n, rows], rng));
        let init_b = store.add(format!("{prefix}.init.bias"), Tensor::zeros(&[n]));
        let chans = [(1, width), (width, width), (width, 1)];
        let convs = core::array::from_fn(|i| {
            let (cin, cout) = chans[i];
            let w = if i == 2 {
                Tensor::zeros(&[cout, cin, 3, 3])
            } else {
                xavier_uniform(cin * 9, cout * 9, &[cout, cin, 3, 3], rng)
            };
            let wid = store.add(format!("{prefix}.refine{i}.weight"), w);
            let bid = store.add(format!("{prefix}.refine{i}.bias"), Tensor::zeros(&[cout]));
            (wid, bid)
        });
        Self { rows, block, init_w, init_b, convs }
    }

    /// Reconstructs the padded image `[1, Hp, Wp]` from `y: [L x rows]`.
    pub fn forward(&self, g: &mut Graph, bound: &Bound, y: Var, grid: &BlockGrid) -> Result<Var> {
        let shape = g.shape(y).to_vec();
        if shape != [grid.len(), self.rows] || grid.block != self.block {
            return Err(contract(format!(
                "reconstructor expects {} blocks of {} measurements (block {}), got {shape:?} (block {})",
                grid.len(),
                self.rows,
                self.block,
                grid.block
            )));
        }
        let wt = g.transpose(bound[self.init_w])?;
        let lin = g.matmul(y, wt)?;
        let blocks = g.add_row(lin, bound[self.init_b])?;
        let img = g.gather(blocks, grid.merge_index(), &[1, grid.padded_height(), grid.padded_width()])?;
        let mut h = img;
        for (i, &(w, b)) in self.convs.iter().enumerate() {
            h = g.conv2d(h, bound[w], Some(bound[b]), 1, 1)?;
            if i < 2 {
                h = g.relu(h);
            }
        }
        g.add(img, h)
    }
}

/// A standalone reconstructor with its own parameters.
#[derive(Debug, Clone)]
pub struct CsnetReconstructor {
    pub store: ParamStore,
    pub layout: CsnetLayout,
}

impl CsnetReconstructor {
    pub fn new(block: usize, ratio: f64, width: usize, rng: &mut Rng) -> Result<Self> {
        let rows = rows_for_ratio(ratio, block)?;
        let mut store = ParamStore::new();
        let layout = CsnetLayout::register(&mut store, "csnet", block, rows, width, rng);
        Ok(Self { store, layout })
    }
}

/// Reconstructs the padded image from a measurement set.
pub fn csnet_reconstruct(rec: &CsnetReconstructor, m: &MeasurementSet) -> Result<Image> {
    if m.rows() != rec.layout.rows {
        return Err(contract(format!(
            "reconstructor built for {} measurements per block, got {}",
            rec.layout.rows,
            m.rows()
        )));
    }
    let mut g = Graph::new();
    let bound = rec.store.bind(&mut g);
    let y = g.constant(m.y.clone());
    let out = rec.layout.forward(&mut g, &bound, y, &m.grid)?;
    let grid = m.grid;
    Image::gray(grid.padded_height(), grid.padded_width(), g.value(out).data().to_vec())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainConfig {
    pub ratio: f64,
    pub epochs: usize,
    pub lr: f64,
    pub width: usize,
    /// When false the sampling matrix stays fixed and only the reconstructor
    /// learns.
    pub train_phi: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { ratio: 0.25, epochs: 200, lr: 1e-3, width: CSNET_WIDTH, train_phi: true }
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub phi: SamplingMatrix,
    pub reconstructor: CsnetReconstructor,
    /// Mean reconstruction MSE over the corpus before each update, followed
    /// by the value after the last update.
    pub losses: Vec<f64>,
}

/// Mean squared reconstruction error over a corpus, measured on the
/// original (unpadded) pixels.
pub fn reconstruction_mse(phi: &SamplingMatrix, rec: &CsnetReconstructor, corpus: &[Image], ratio: f64) -> Result<f64> {
    let mut store = rec.store.clone();
    let phi_id = store.add_with("csm.phi", phi.phi.clone(), false);
    let mut g = Graph::new();
    let bound = store.bind(&mut g);
    let loss = corpus_loss(&mut g, &bound, phi_id, &rec.layout, corpus, ratio)?;
    Ok(g.value(loss).item())
}

fn corpus_loss(
    g: &mut Graph,
    bound: &Bound,
    phi: ParamId,
    layout: &CsnetLayout,
    corpus: &[Image],
    ratio: f64,
) -> Result<Var> {
    let rows = rows_for_ratio(ratio, layout.block)?;
    let mut total: Option<Var> = None;
    let mut count = 0usize;
    for img in corpus {
        let luma = img.to_luma()?;
        let (blocks, grid) = split_blocks(&luma, layout.block)?;
        let x = g.constant(blocks);
        let y = sample_on(g, bound[phi], x, rows)?;
        let rec = layout.forward(g, bound, y, &grid)?;
        let crop: Vec<usize> =
            (0..grid.height).flat_map(|r| (0..grid.width).map(move |c| r * grid.padded_width() + c)).collect();
        let n = crop.len();
        let rec = g.gather(rec, crop, &[n])?;
        let target = g.constant(Tensor::new(&[n], luma.data().to_vec())?);
        let diff = g.sub(rec, target)?;
        let sq = g.mul(diff, diff)?;
        let s = g.sum(sq);
        total = Some(match total {
            Some(t) => g.add(t, s)?,
            None => s,
        });
        count += n;
    }
    let total = total.ok_or_else(|| contract("empty corpus"))?;
    Ok(g.scale(total, 1.0 / count as f64))
}

/// Jointly trains the sampling matrix and a CSNet-style reconstructor to
/// minimize mean reconstruction MSE over `corpus`, one full-batch Adam step
/// per epoch.
pub fn pretrain_csm(
    corpus: &[Image],
    phi: SamplingMatrix,
    cfg: &PretrainConfig,
    rng: &mut Rng,
) -> Result<PretrainOutcome> {
    if corpus.is_empty() {
        return Err(contract("pretraining corpus is empty"));
    }
    let rec = CsnetReconstructor::new(phi.block, cfg.ratio, cfg.width, rng)?;
    let mut store = rec.store.clone();
    let phi_id = store.add_with("csm.phi", phi.phi.clone(), cfg.train_phi);
    let layout = rec.layout;
    let adam = AdamConfig { lr: cfg.lr, weight_decay: 0.0, ..AdamConfig::default() };
    let mut state = AdamState::new();
    let mut losses = Vec::with_capacity(cfg.epochs + 1);
    for _ in 0..cfg.epochs {
        let mut g = Graph::new();
        let bound = store.bind(&mut g);
        let loss = corpus_loss(&mut g, &bound, phi_id, &layout, corpus, cfg.ratio)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { step: losses.len() as u64 });
        }
        losses.push(value);
        let grads = g.backward(loss)?;
        let grads = store.collect_grads(&bound, &grads);
        store.with_trainable(|params| adam_step(params, &grads, &mut state, &adam))?;
    }
    let mut g = Graph::new();
    let bound = store.bind(&mut g);
    let loss = corpus_loss(&mut g, &bound, phi_id, &layout, corpus, cfg.ratio)?;
    losses.push(g.value(loss).item());

    let phi = SamplingMatrix::new(store.get(phi_id).clone(), phi.block)?;
    // the reconstructor's entries were registered first, so they form a prefix
    let rec_store = store.prefix(rec.store.len());
    Ok(PretrainOutcome { phi, reconstructor: CsnetReconstructor { store: rec_store, layout }, losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded_rng;

    fn ramp(h: usize, w: usize) -> Image {
        Image::gray(h, w, (0..h * w).map(|i| i as f64 / (h * w) as f64).collect()).unwrap()
    }

    #[test]
    fn single_block_is_row_major_flatten() {
        let img = ramp(4, 4);
        let (blocks, grid) = split_blocks(&img, 4).unwrap();
        assert_eq!(grid.len(), 1);
        assert_eq!(blocks.data(), img.data());
    }

    #[test]
    fn split_merge_roundtrip() {
        let img = ramp(8, 8);
        let (blocks, grid) = split_blocks(&img, 4).unwrap();
        assert_eq!(grid.len(), 4);
        assert_eq!(merge_blocks(&blocks, &grid).unwrap(), img);
    }

    #[test]
    fn padded_split_roundtrip() {
        let img = ramp(10, 10);
        let (blocks, grid) = split_blocks(&img, 4).unwrap();
        assert_eq!((grid.padded_height(), grid.padded_width(), grid.len()), (12, 12, 9));
        let merged = merge_blocks(&blocks, &grid).unwrap();
        assert_eq!(merged.crop(0, 0, 10, 10).unwrap(), img);
        // reflected row 10 mirrors row 8
        assert_eq!(merged.get(0, 10, 3), img.get(0, 8, 3));
    }

    #[test]
    fn zero_block_is_rejected() {
        assert!(split_blocks(&ramp(4, 4), 0).is_err());
    }

    #[test]
    fn truncation_row_counts() {
        let mut rng = seeded_rng(1);
        let phi = SamplingMatrix::orthogonal_gaussian(4, &mut rng);
        assert_eq!(phi.truncate(1.0).unwrap(), phi.phi);
        assert_eq!(phi.truncate(0.25).unwrap().shape(), &[4, 16]);
        assert_eq!(rows_for_ratio(0.1, 16).unwrap(), 26);
        assert_eq!(rows_for_ratio(0.1, 4).unwrap(), 2);
        assert_eq!(rows_for_ratio(0.3, 10).unwrap(), 30);
        assert!(matches!(phi.truncate(0.0), Err(Error::InvalidRatio(_))));
        assert!(phi.truncate(1.5).is_err());
        assert!(phi.truncate(f64::NAN).is_err());
    }

    #[test]
    fn orthogonal_rows() {
        let mut rng = seeded_rng(3);
        let phi = SamplingMatrix::orthogonal_gaussian(4, &mut rng);
        let d = phi.phi.data();
        for i in 0..16 {
            for j in 0..16 {
                let dot: f64 = (0..16).map(|k| d[i * 16 + k] * d[j * 16 + k]).sum();
                let expect = if i == j { 1.0 / 16.0 } else { 0.0 };
                assert!((dot - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identity_sampling() {
        let img = ramp(8, 8);
        let phi = SamplingMatrix::identity(4);
        let (blocks, _) = split_blocks(&img, 4).unwrap();
        let m = sample(&phi, &img, 1.0).unwrap();
        assert_eq!(m.y, blocks);
        let m = sample(&phi, &img, 0.25).unwrap();
        for (i, row) in m.y.data().chunks(4).enumerate() {
            assert_eq!(row, &blocks.data()[i * 16..i * 16 + 4]);
        }
    }

    #[test]
    fn averaging_kernel() {
        let img = ramp(8, 8);
        let mut phi = SamplingMatrix::identity(4);
        phi.phi.data_mut()[..16].iter_mut().for_each(|v| *v = 1.0 / 16.0);
        let m = sample_conv(&phi, &img, 1.0 / 16.0).unwrap();
        let (blocks, _) = split_blocks(&img, 4).unwrap();
        for (i, chunk) in blocks.data().chunks(16).enumerate() {
            let mean = chunk.iter().sum::<f64>() / 16.0;
            assert!((m.y.data()[i] - mean).abs() < 1e-15);
        }
        let id = SamplingMatrix::identity(4);
        assert_eq!(sample_conv(&id, &img, 1.0).unwrap().y, blocks);
    }

    #[test]
    fn zero_measurements_give_bias_image() {
        let mut rng = seeded_rng(5);
        let mut rec = CsnetReconstructor::new(4, 0.25, 8, &mut rng).unwrap();
        let bias: Vec<f64> = (0..16).map(|i| i as f64 * 0.1).collect();
        rec.store.set(rec.layout.init_b, Tensor::new(&[16], bias.clone()).unwrap()).unwrap();
        let grid = BlockGrid::for_image(8, 8, 4).unwrap();
        let m = MeasurementSet { y: Tensor::zeros(&[4, 4]), grid, ratio: 0.25 };
        let out = csnet_reconstruct(&rec, &m).unwrap();
        let blocks = Tensor::new(&[4, 16], bias.repeat(4)).unwrap();
        assert_eq!(out, merge_blocks(&blocks, &grid).unwrap());
    }

    #[test]
    fn lossless_path() {
        let mut rng = seeded_rng(6);
        let mut rec = CsnetReconstructor::new(4, 1.0, 8, &mut rng).unwrap();
        rec.store.set(rec.layout.init_w, Tensor::eye(16)).unwrap();
        let img = ramp(8, 8);
        let m = sample(&SamplingMatrix::identity(4), &img, 1.0).unwrap();
        let out = csnet_reconstruct(&rec, &m).unwrap();
        for (a, b) in out.data().iter().zip(img.data()) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn reconstructor_ratio_mismatch() {
        let mut rng = seeded_rng(7);
        let rec = CsnetReconstructor::new(4, 0.5, 8, &mut rng).unwrap();
        let m = sample(&SamplingMatrix::identity(4), &ramp(8, 8), 0.25).unwrap();
        assert!(csnet_reconstruct(&rec, &m).is_err());
    }

    #[test]
    fn empty_corpus_rejected() {
        let mut rng = seeded_rng(8);
        let phi = SamplingMatrix::identity(4);
        assert!(pretrain_csm(&[], phi, &PretrainConfig::default(), &mut rng).is_err());
    }

    #[test]
    fn zero_lr_leaves_parameters() {
        let mut rng = seeded_rng(9);
        let phi = SamplingMatrix::orthogonal_gaussian(4, &mut rng);
        let cfg = PretrainConfig { epochs: 3, lr: 0.0, width: 4, ..Default::default() };
        let mut r1 = seeded_rng(10);
        let out = pretrain_csm(&[ramp(8, 8)], phi.clone(), &cfg, &mut r1).unwrap();
        assert_eq!(out.phi, phi);
        let mut r2 = seeded_rng(10);
        let fresh = CsnetReconstructor::new(4, 0.25, 4, &mut r2).unwrap();
        assert_eq!(out.reconstructor.store, fresh.store);
    }
}
