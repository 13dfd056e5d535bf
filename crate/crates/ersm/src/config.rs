//! Run configuration: defaults, then a `key = value` file, then
//! command-line overrides, each layer replacing the one before.

use std::path::Path;

use ersm_core::data::{Background, GeneratorConfig};
use ersm_core::evaluation::DEFAULT_RANDOM_SEEDS;
use ersm_core::model::{BackboneConfig, ConvLayerSpec, ModelConfig, ParamGroup, Variant};
use ersm_core::training::TrainConfig;
use ersm_core::FeatureShape;

use crate::error::{CliError, Result};
use crate::fsio;

/// Every recognised key, in the order `render` writes them.
pub const KEYS: &[&str] = &[
    "seed",
    "samples",
    "classes",
    "channels",
    "height",
    "width",
    "object_size",
    "background",
    "noise",
    "backbone",
    "pool",
    "patch",
    "variant",
    "lambda_unary",
    "lambda_pair",
    "epochs",
    "batch_size",
    "lr",
    "min_lr",
    "weight_decay",
    "freeze",
    "eval_interval",
    "train_fraction",
    "keep_fraction",
    "random_seeds",
    "mask_limit",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Seeds data generation, initialization, the split and shuffling.
    pub seed: u64,
    pub samples: usize,
    pub classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub object_size: usize,
    pub background: Background,
    pub noise: f64,
    /// Output channels of each `conv3×3 → relu → maxpool` block.
    pub backbone: Vec<usize>,
    pub pool: usize,
    pub patch: usize,
    pub variant: Variant,
    pub lambda_unary: f64,
    pub lambda_pair: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub freeze: Vec<ParamGroup>,
    pub eval_interval: usize,
    pub train_fraction: f64,
    pub keep_fraction: f64,
    pub random_seeds: usize,
    /// At most this many mask images are exported by `eval`.
    pub mask_limit: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let g = GeneratorConfig::default();
        let m = ModelConfig::default();
        let t = TrainConfig::default();
        RunConfig {
            seed: 0,
            samples: 4000,
            classes: g.classes,
            channels: g.channels,
            height: g.height,
            width: g.width,
            object_size: g.object_size,
            background: g.background,
            noise: g.noise,
            backbone: m.backbone.layers.iter().map(|l| l.out_channels).collect(),
            pool: 2,
            patch: m.patch,
            variant: m.variant,
            lambda_unary: m.lambda_unary,
            lambda_pair: m.lambda_pair,
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            min_lr: t.min_lr,
            weight_decay: t.weight_decay,
            freeze: t.frozen,
            eval_interval: t.eval_interval,
            train_fraction: 0.8,
            keep_fraction: 0.3,
            random_seeds: DEFAULT_RANDOM_SEEDS,
            mask_limit: 16,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| CliError::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(|v| parse_num(key, v.trim())).collect()
}

fn parse_groups(value: &str) -> Result<Vec<ParamGroup>> {
    if value.trim() == "none" || value.trim().is_empty() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for v in value.split(',') {
        let g = match v.trim() {
            "backbone" => ParamGroup::Backbone,
            "mask" => ParamGroup::Mask,
            "head" => ParamGroup::Head,
            other => return Err(CliError::Config(format!("freeze: unknown group {other:?}"))),
        };
        if !out.contains(&g) {
            out.push(g);
        }
    }
    Ok(out)
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse_num(key, v)?,
            "samples" => self.samples = parse_num(key, v)?,
            "classes" => self.classes = parse_num(key, v)?,
            "channels" => self.channels = parse_num(key, v)?,
            "height" => self.height = parse_num(key, v)?,
            "width" => self.width = parse_num(key, v)?,
            "object_size" => self.object_size = parse_num(key, v)?,
            "background" => {
                self.background = Background::parse(v)
                    .ok_or_else(|| CliError::Config(format!("background: expected constant or field, got {v:?}")))?
            }
            "noise" => self.noise = parse_num(key, v)?,
            "backbone" => self.backbone = parse_list(key, v)?,
            "pool" => self.pool = parse_num(key, v)?,
            "patch" => self.patch = parse_num(key, v)?,
            "variant" => {
                self.variant = Variant::parse(v)
                    .ok_or_else(|| CliError::Config(format!("variant: expected baseline, unary or full, got {v:?}")))?
            }
            "lambda_unary" => self.lambda_unary = parse_num(key, v)?,
            "lambda_pair" => self.lambda_pair = parse_num(key, v)?,
            "epochs" => self.epochs = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "lr" => self.lr = parse_num(key, v)?,
            "min_lr" => self.min_lr = parse_num(key, v)?,
            "weight_decay" => self.weight_decay = parse_num(key, v)?,
            "freeze" => self.freeze = parse_groups(v)?,
            "eval_interval" => self.eval_interval = parse_num(key, v)?,
            "train_fraction" => self.train_fraction = parse_num(key, v)?,
            "keep_fraction" => self.keep_fraction = parse_num(key, v)?,
            "random_seeds" => self.random_seeds = parse_num(key, v)?,
            "mask_limit" => self.mask_limit = parse_num(key, v)?,
            other => return Err(CliError::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines. Blank lines and `#` comments are
    /// skipped; a repeated or unknown key is an error.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut seen = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected key = value", n + 1)))?;
            let k = k.trim();
            if seen.contains(&k) {
                return Err(CliError::Config(format!("line {}: {k} given twice", n + 1)));
            }
            seen.push(k);
            self.set(k, v).map_err(|e| match e {
                CliError::Config(msg) => CliError::Config(format!("line {}: {msg}", n + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let bytes = fsio::read_all(path)?;
        let text = String::from_utf8(bytes).map_err(|_| CliError::Config(format!("{}: not UTF-8", path.display())))?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    /// The configuration as a file `apply_text` reads back unchanged.
    pub fn render(&self) -> String {
        let groups: Vec<&str> = self.freeze.iter().map(|g| g.name()).collect();
        let freeze = if groups.is_empty() { "none".to_string() } else { groups.join(",") };
        let values = [
            self.seed.to_string(),
            self.samples.to_string(),
            self.classes.to_string(),
            self.channels.to_string(),
            self.height.to_string(),
            self.width.to_string(),
            self.object_size.to_string(),
            self.background.name().to_string(),
            self.noise.to_string(),
            join(&self.backbone),
            self.pool.to_string(),
            self.patch.to_string(),
            self.variant.name().to_string(),
            self.lambda_unary.to_string(),
            self.lambda_pair.to_string(),
            self.epochs.to_string(),
            self.batch_size.to_string(),
            self.lr.to_string(),
            self.min_lr.to_string(),
            self.weight_decay.to_string(),
            freeze,
            self.eval_interval.to_string(),
            self.train_fraction.to_string(),
            self.keep_fraction.to_string(),
            self.random_seeds.to_string(),
            self.mask_limit.to_string(),
        ];
        KEYS.iter().zip(values).map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn generator(&self) -> GeneratorConfig {
        GeneratorConfig {
            classes: self.classes,
            channels: self.channels,
            height: self.height,
            width: self.width,
            object_size: self.object_size,
            background: self.background,
            noise: self.noise,
            seed: self.seed,
        }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                input: FeatureShape::new(self.channels, self.height, self.width),
                layers: self.backbone.iter().map(|&c| ConvLayerSpec::same(c, self.pool)).collect(),
            },
            classes: self.classes,
            patch: self.patch,
            lambda_unary: self.lambda_unary,
            lambda_pair: self.lambda_pair,
            variant: self.variant,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            min_lr: self.min_lr,
            weight_decay: self.weight_decay,
            seed: self.seed,
            frozen: self.freeze.clone(),
            eval_interval: self.eval_interval,
            ..TrainConfig::default()
        }
    }

    /// Seeds for the random deletion policy.
    pub fn random_policy_seeds(&self) -> Vec<u64> {
        (0..self.random_seeds as u64).map(|i| self.seed.wrapping_add(i + 1)).collect()
    }

    /// Checks everything the core crate does not.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.samples == 0 {
            return bad("samples must be at least 1".into());
        }
        if self.backbone.is_empty() && self.pool != 1 {
            return bad("pool has no effect without backbone layers; set pool = 1".into());
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad(format!("train_fraction {} outside (0, 1)", self.train_fraction));
        }
        if !(self.keep_fraction > 0.0 && self.keep_fraction <= 1.0) {
            return bad(format!("keep_fraction {} outside (0, 1]", self.keep_fraction));
        }
        if self.random_seeds == 0 {
            return bad("random_seeds must be at least 1".into());
        }
        self.generator().validate()?;
        self.model().validate()?;
        self.train().validate()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_round_trips() {
        let mut c = RunConfig::default();
        c.set("freeze", "backbone,head").unwrap();
        c.set("lambda_pair", "0").unwrap();
        c.set("backbone", "8, 8").unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&c.render()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_and_repeated_keys_fail() {
        let mut c = RunConfig::default();
        assert!(c.apply_text("lamda_pair = 1e-3").is_err());
        assert!(c.apply_text("seed = 1\nseed = 2").is_err());
        assert!(c.apply_text("seed 1").is_err());
    }

    #[test]
    fn comments_and_blanks() {
        let mut c = RunConfig::default();
        c.apply_text("# header\n\nepochs = 3 # short\nvariant = unary\n").unwrap();
        assert_eq!(c.epochs, 3);
        assert_eq!(c.variant, Variant::Unary);
    }

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
        assert_eq!(RunConfig::default().render().lines().count(), KEYS.len());
    }
}
