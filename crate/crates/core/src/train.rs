//! Training and evaluation over in-memory datasets.

use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::error::{contract, Error, Result};
use crate::graph::Graph;
use crate::image::Image;
use crate::metrics::{plcc, srcc};
use crate::model::{Model, RatioMode};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::params::ParamStore;
use crate::Rng;

/// One labelled image (single channel).
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub mos: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub epochs: usize,
    /// Crops averaged per image when scoring the validation split.
    pub eval_crops: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { batch_size: 8, adam: AdamConfig::default(), epochs: 100, eval_crops: 5 }
    }
}

/// Index sets of a seeded split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

fn shuffle(items: &mut [usize], rng: &mut Rng) {
    // Fisher-Yates
    for i in (1..items.len()).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        items.swap(i, j);
    }
}

fn uniform_index(n: usize, rng: &mut Rng) -> usize {
    (rng.next_u64() % n as u64) as usize
}

/// 8:2 train/test split, then 10% of the training part held out for
/// validation. All three sets are disjoint and sorted.
pub fn split_dataset(n: usize, seed: u64) -> Split {
    let mut rng = crate::seeded_rng(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    shuffle(&mut idx, &mut rng);
    let n_test = libm::round(n as f64 * 0.2) as usize;
    let (test, rest) = idx.split_at(n_test);
    let n_val = libm::round(rest.len() as f64 * 0.1) as usize;
    let (val, train) = rest.split_at(n_val);
    let sorted = |s: &[usize]| {
        let mut v = s.to_vec();
        v.sort_unstable();
        v
    };
    Split { train: sorted(train), val: sorted(val), test: sorted(test) }
}

/// Random `size x size` window; images smaller than `size` are
/// reflect-padded first.
pub fn random_crop(img: &Image, size: usize, rng: &mut Rng) -> Result<Image> {
    let img = img.to_luma()?;
    let img = if img.height() < size || img.width() < size { img.reflect_pad_to(size, size)? } else { img };
    let top = uniform_index(img.height() - size + 1, rng);
    let left = uniform_index(img.width() - size + 1, rng);
    img.crop(top, left, size, size)
}

/// Mean score over `n_crops` seeded random crops.
pub fn predict(model: &Model, img: &Image, ratio: f64, n_crops: usize, rng: &mut Rng) -> Result<f64> {
    if n_crops == 0 {
        return Err(contract("at least one crop is required"));
    }
    let mut total = 0.0;
    for _ in 0..n_crops {
        let crop = random_crop(img, model.cfg.crop_size, rng)?;
        total += model.forward(&crop, ratio)?.score;
    }
    Ok(total / n_crops as f64)
}

/// Independent crop stream for image `index` under `seed`.
pub fn image_rng(seed: u64, index: usize) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub plcc: f64,
    pub srcc: f64,
    pub predictions: Vec<f64>,
}

/// Predicts every sample and correlates against its MOS.
pub fn evaluate(model: &Model, samples: &[Sample], ratio: f64, n_crops: usize, seed: u64) -> Result<Evaluation> {
    let predictions = samples
        .iter()
        .enumerate()
        .map(|(i, s)| predict(model, &s.image, ratio, n_crops, &mut image_rng(seed, i)))
        .collect::<Result<Vec<f64>>>()?;
    let mos: Vec<f64> = samples.iter().map(|s| s.mos).collect();
    Ok(Evaluation { plcc: plcc(&predictions, &mos)?, srcc: srcc(&predictions, &mos)?, predictions })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: u64,
    pub mean_loss: f64,
    /// NaN when there is no validation split or the correlation is undefined.
    pub val_srcc: f64,
    pub val_plcc: f64,
}

/// Serializable generator position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &Rng) -> Self {
        Self { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Best-on-validation snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct BestState {
    pub epoch: u64,
    pub val_srcc: f64,
    pub store: ParamStore,
}

/// Mini-batch Adam/MSE training with resumable state.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model,
    pub cfg: TrainConfig,
    pub adam: AdamState,
    pub rng: Rng,
    /// Visiting order of the current epoch and the position within it.
    pub order: Vec<usize>,
    pub cursor: usize,
    pub step: u64,
    pub epoch: u64,
    /// Batch losses of the epoch in progress.
    pub epoch_losses: Vec<f64>,
    pub history: Vec<EpochRecord>,
    pub best: Option<BestState>,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(model.cfg.seed);
        rng.set_stream(0x74_7261_696e);
        Self {
            model,
            cfg,
            adam: AdamState::new(),
            rng,
            order: Vec::new(),
            cursor: 0,
            step: 0,
            epoch: 0,
            epoch_losses: Vec::new(),
            history: Vec::new(),
            best: None,
        }
    }

    fn next_batch(&mut self, n: usize) -> Vec<usize> {
        if self.cursor >= self.order.len() || self.order.len() != n {
            self.order = (0..n).collect();
            shuffle(&mut self.order, &mut self.rng);
            self.cursor = 0;
        }
        let end = (self.cursor + self.cfg.batch_size).min(n);
        let batch = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        batch
    }

    fn draw_ratio(&mut self) -> f64 {
        match &self.model.cfg.ratio_mode {
            RatioMode::Fixed(r) => *r,
            RatioMode::Arbitrary(rs) => {
                let rs = rs.clone();
                rs[uniform_index(rs.len(), &mut self.rng)]
            }
        }
    }

    /// One optimizer step on the next batch of `data`. Returns the batch
    /// MSE before the update.
    pub fn train_step(&mut self, data: &[Sample]) -> Result<f64> {
        if data.is_empty() {
            return Err(contract("training split is empty"));
        }
        if self.cfg.batch_size == 0 {
            return Err(contract("batch size must be positive"));
        }
        let batch = self.next_batch(data.len());
        let ratio = self.draw_ratio();
        let crop = self.model.cfg.crop_size;
        let mut g = Graph::new();
        let bound = self.model.store.bind(&mut g);
        let mut terms = Vec::with_capacity(batch.len());
        for &i in &batch {
            let img = random_crop(&data[i].image, crop, &mut self.rng)?;
            let (out, _) = self.model.forward_on(&mut g, &bound, &img, ratio)?;
            let err = g.add_scalar(out.score, -data[i].mos);
            terms.push(g.mul(err, err)?);
        }
        let stacked = g.concat(&terms, 0)?;
        let loss = g.mean(stacked);
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { step: self.step });
        }
        let grads = g.backward(loss)?;
        let grads = self.model.store.collect_grads(&bound, &grads);
        let (adam, cfg) = (&mut self.adam, &self.cfg.adam);
        self.model.store.with_trainable(|p| adam_step(p, &grads, adam, cfg))?;
        self.step += 1;
        self.epoch_losses.push(value);
        Ok(value)
    }

    /// Whether the last step finished a pass over the training split.
    pub fn epoch_complete(&self) -> bool {
        !self.order.is_empty() && self.cursor >= self.order.len() && !self.epoch_losses.is_empty()
    }

    /// Runs the remaining steps of the current pass over `train`, then
    /// closes the epoch with [`Trainer::end_epoch`].
    pub fn run_epoch(&mut self, train: &[Sample], val: &[Sample]) -> Result<EpochRecord> {
        loop {
            self.train_step(train)?;
            if self.epoch_complete() {
                break;
            }
        }
        self.end_epoch(val)
    }

    /// Records the finished epoch: mean batch loss, validation scores and
    /// the best snapshot.
    pub fn end_epoch(&mut self, val: &[Sample]) -> Result<EpochRecord> {
        if self.epoch_losses.is_empty() {
            return Err(contract("no steps taken in this epoch"));
        }
        self.epoch += 1;
        let losses = core::mem::take(&mut self.epoch_losses);
        let mean_loss = losses.iter().sum::<f64>() / losses.len() as f64;
        let (val_srcc, val_plcc) = if val.len() >= 2 {
            let ratio = self.model.cfg.ratio_mode.default_eval_ratio();
            match evaluate(&self.model, val, ratio, self.cfg.eval_crops, self.model.cfg.seed) {
                Ok(e) => (e.srcc, e.plcc),
                Err(Error::UndefinedCorrelation(_)) => (f64::NAN, f64::NAN),
                Err(e) => return Err(e),
            }
        } else {
            (f64::NAN, f64::NAN)
        };
        let record = EpochRecord { epoch: self.epoch, mean_loss, val_srcc, val_plcc };
        self.history.push(record);
        let improved = match &self.best {
            None => true,
            Some(b) => val_srcc > b.val_srcc || (b.val_srcc.is_nan() && !val_srcc.is_nan()),
        };
        if improved {
            self.best = Some(BestState { epoch: self.epoch, val_srcc, store: self.model.store.clone() });
        }
        Ok(record)
    }

    /// The best-on-validation model, or the current one when validation
    /// never produced a score.
    pub fn best_model(&self) -> Model {
        let mut m = self.model.clone();
        if let Some(b) = &self.best {
            if !b.val_srcc.is_nan() {
                m.store = b.store.clone();
            }
        }
        m
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<EpochRecord>,
}

/// Trains for `cfg.epochs` epochs and returns the best-on-validation model.
pub fn train(model: Model, train: &[Sample], val: &[Sample], cfg: TrainConfig) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(contract("training split is empty"));
    }
    let mut t = Trainer::new(model, cfg);
    for _ in 0..cfg.epochs {
        t.run_epoch(train, val)?;
    }
    Ok(TrainOutcome { model: t.best_model(), history: t.history })
}

/// Indices into `samples` picked out as owned samples.
pub fn select(samples: &[Sample], idx: &[usize]) -> Vec<Sample> {
    idx.iter().map(|&i| samples[i].clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_proportions() {
        for n in [10, 32, 50, 101] {
            let s = split_dataset(n, 7);
            let train_total = s.train.len() + s.val.len();
            assert!((train_total as f64 - 0.8 * n as f64).abs() <= 1.0);
            let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..n).collect::<Vec<_>>());
            assert_eq!(s, split_dataset(n, 7));
        }
        assert_ne!(split_dataset(50, 1), split_dataset(50, 2));
    }

    #[test]
    fn crop_pads_small_images() {
        let img = Image::gray(3, 5, (0..15).map(f64::from).collect()).unwrap();
        let mut rng = crate::seeded_rng(0);
        let c = random_crop(&img, 8, &mut rng).unwrap();
        assert_eq!((c.height(), c.width()), (8, 8));
        assert_eq!(c.crop(0, 0, 3, 5).unwrap(), img);
    }

    #[test]
    fn rng_state_roundtrip() {
        let mut rng = crate::seeded_rng(3);
        rng.next_u64();
        let st = RngState::capture(&rng);
        let mut back = st.restore();
        assert_eq!(rng.next_u64(), back.next_u64());
    }
}
