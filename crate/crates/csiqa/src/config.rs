//! `key = value` settings files (`#` starts a comment) and the textual
//! form of run configurations stored in checkpoints.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use csiqa_core::model::RATIO_GRID;
use csiqa_core::optim::AdamConfig;
use csiqa_core::train::TrainConfig;
use csiqa_core::{ModelConfig, RatioMode, Variant};

use crate::error::{Error, Result};

/// Every key a settings file may set.
pub const KNOWN_KEYS: &[&str] = &[
    "variant",
    "block",
    "embed_dim",
    "depth",
    "heads",
    "window",
    "alpha",
    "alpha_learnable",
    "sstm_count",
    "ratio",
    "crop_size",
    "seed",
    "split_seed",
    "batch_size",
    "lr",
    "weight_decay",
    "beta1",
    "beta2",
    "adam_eps",
    "epochs",
    "eval_crops",
    "crops",
    "width",
];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Settings {
    origin: String,
    values: BTreeMap<String, (usize, String)>,
}

impl Settings {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Config { origin: origin.to_string(), line, msg };
            let (k, v) =
                content.split_once('=').ok_or_else(|| err(format!("expected `key = value`, got `{content}`")))?;
            let (k, v) = (k.trim(), v.trim());
            if !KNOWN_KEYS.contains(&k) {
                return Err(err(format!("unknown key `{k}`")));
            }
            if values.insert(k.to_string(), (line, v.to_string())).is_some() {
                return Err(err(format!("duplicate key `{k}`")));
            }
        }
        Ok(Self { origin: origin.to_string(), values })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Raw value of `key`, if set.
    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(|(_, v)| v.as_str())
    }

    fn fail(&self, key: &str, msg: String) -> Error {
        let line = self.values.get(key).map_or(0, |(l, _)| *l);
        Error::Config { origin: self.origin.clone(), line, msg }
    }

    /// Typed value of `key`, if set.
    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|_| self.fail(key, format!("invalid value `{v}` for `{key}`"))),
        }
    }

    pub fn get_with<T>(&self, key: &str, parse: impl Fn(&str) -> Option<T>) -> Result<Option<T>> {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => parse(v).map(Some).ok_or_else(|| self.fail(key, format!("invalid value `{v}` for `{key}`"))),
        }
    }
}

/// Textual ratio setting: a number for a fixed ratio, `r` for the
/// arbitrary-ratio grid, or a comma-separated list for a custom set.
pub fn parse_ratio_mode(s: &str) -> Option<RatioMode> {
    let s = s.trim();
    if s == "r" {
        return Some(RatioMode::Arbitrary(RATIO_GRID.to_vec()));
    }
    if s.contains(',') {
        let rs: Option<Vec<f64>> = s.split(',').map(|p| p.trim().parse().ok()).collect();
        return rs.filter(|v| !v.is_empty()).map(RatioMode::Arbitrary);
    }
    s.parse().ok().map(RatioMode::Fixed)
}

pub fn format_ratio_mode(mode: &RatioMode) -> String {
    match mode {
        RatioMode::Fixed(r) => r.to_string(),
        RatioMode::Arbitrary(rs) if rs.as_slice() == RATIO_GRID => "r".into(),
        RatioMode::Arbitrary(rs) => rs.iter().map(f64::to_string).collect::<Vec<_>>().join(","),
    }
}

/// Everything needed to rebuild a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub split_seed: u64,
}

impl RunConfig {
    /// `key = value` lines in a fixed order. Floats use the shortest
    /// representation that parses back to the same value.
    pub fn to_text(&self) -> String {
        let (m, t) = (&self.model, &self.train);
        let rows: Vec<(&str, String)> = vec![
            ("variant", m.variant.as_str().into()),
            ("block", m.block.to_string()),
            ("embed_dim", m.embed_dim.to_string()),
            ("depth", m.depth.to_string()),
            ("heads", m.heads.to_string()),
            ("window", m.window.to_string()),
            ("alpha", m.alpha.to_string()),
            ("alpha_learnable", m.alpha_learnable.to_string()),
            ("sstm_count", m.sstm_count.to_string()),
            ("ratio", format_ratio_mode(&m.ratio_mode)),
            ("crop_size", m.crop_size.to_string()),
            ("seed", m.seed.to_string()),
            ("split_seed", self.split_seed.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("lr", t.adam.lr.to_string()),
            ("weight_decay", t.adam.weight_decay.to_string()),
            ("beta1", t.adam.beta1.to_string()),
            ("beta2", t.adam.beta2.to_string()),
            ("adam_eps", t.adam.eps.to_string()),
            ("epochs", t.epochs.to_string()),
            ("eval_crops", t.eval_crops.to_string()),
        ];
        rows.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Inverse of [`RunConfig::to_text`]; every key must be present.
    pub fn from_settings(s: &Settings) -> Result<Self> {
        fn req<T>(s: &Settings, key: &str, v: Result<Option<T>>) -> Result<T> {
            v?.ok_or_else(|| Error::Config { origin: s.origin.clone(), line: 0, msg: format!("missing key `{key}`") })
        }
        macro_rules! get {
            ($k:literal) => {
                req(s, $k, s.get($k))?
            };
        }
        let model = ModelConfig {
            variant: req(s, "variant", s.get_with("variant", Variant::parse))?,
            block: get!("block"),
            embed_dim: get!("embed_dim"),
            depth: get!("depth"),
            heads: get!("heads"),
            window: get!("window"),
            alpha: get!("alpha"),
            alpha_learnable: get!("alpha_learnable"),
            sstm_count: get!("sstm_count"),
            ratio_mode: req(s, "ratio", s.get_with("ratio", parse_ratio_mode))?,
            crop_size: get!("crop_size"),
            seed: get!("seed"),
        };
        let train = TrainConfig {
            batch_size: get!("batch_size"),
            adam: AdamConfig {
                lr: get!("lr"),
                weight_decay: get!("weight_decay"),
                beta1: get!("beta1"),
                beta2: get!("beta2"),
                eps: get!("adam_eps"),
            },
            epochs: get!("epochs"),
            eval_crops: get!("eval_crops"),
        };
        Ok(Self { model, train, split_seed: get!("split_seed") })
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_settings(&Settings::parse(text, "checkpoint config")?)
    }
}
