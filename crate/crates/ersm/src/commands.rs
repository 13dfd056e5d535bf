//! The four pipeline commands. Each reads its inputs completely, computes,
//! and only then writes its outputs.

use std::path::{Path, PathBuf};

use ersm_core::data::{self, Sample};
use ersm_core::energy_mask::{self, Mode};
use ersm_core::evaluation::{self, Policy};
use ersm_core::model::{self, ModelConfig, ModelParams, Variant};
use ersm_core::training::{self, EpochMetrics, GridReport};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::dataset::{self, Dataset};
use crate::error::{CliError, Result};
use crate::{checkpoint, fsio, pgm, report};

pub const DATASET_FILE: &str = "dataset.ersd";
pub const METRICS_FILE: &str = "metrics.csv";
pub const FINAL_CHECKPOINT: &str = "final.ersm";
pub const BEST_CHECKPOINT: &str = "best.ersm";
pub const GRID_FILE: &str = "grid.csv";
pub const CURVES_FILE: &str = "curves.csv";
pub const SPARSITY_FILE: &str = "sparsity.csv";
pub const ALIGNMENT_FILE: &str = "alignment.csv";

#[derive(Debug, Clone, PartialEq)]
pub struct GenerateSummary {
    pub path: PathBuf,
    pub samples: usize,
    pub classes: usize,
    pub shape: [usize; 3],
    pub seed: u64,
}

pub fn cmd_generate(cfg: &RunConfig, out_dir: &Path) -> Result<GenerateSummary> {
    cfg.validate()?;
    let g = cfg.generator();
    let samples = data::generate(&g, cfg.samples)?;
    let ds = Dataset { classes: g.classes, channels: g.channels, height: g.height, width: g.width, samples };
    let path = out_dir.join(DATASET_FILE);
    dataset::write(&path, &ds)?;
    Ok(GenerateSummary {
        path,
        samples: ds.samples.len(),
        classes: ds.classes,
        shape: [ds.channels, ds.height, ds.width],
        seed: cfg.seed,
    })
}

fn load_dataset(cfg: &RunConfig, path: &Path) -> Result<Dataset> {
    let ds = dataset::read(path)?;
    let want = (cfg.classes, cfg.channels, cfg.height, cfg.width);
    let got = (ds.classes, ds.channels, ds.height, ds.width);
    if want != got {
        return Err(CliError::Config(format!(
            "{}: dataset has (classes, channels, height, width) = {got:?}, configuration expects {want:?}",
            path.display()
        )));
    }
    Ok(ds)
}

fn split(cfg: &RunConfig, ds: &Dataset) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let (tr, te) = data::split(&ds.labels(), (cfg.train_fraction, 1.0 - cfg.train_fraction), cfg.seed)?;
    Ok((ds.subset(&tr), ds.subset(&te)))
}

/// Fresh parameters from the run seed; with `warm` the backbone and head
/// are copied from that checkpoint.
pub fn initial_params(cfg: &RunConfig, warm: Option<&Path>) -> Result<ModelParams> {
    let model = cfg.model();
    let mut params = ModelParams::init(&model, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    if let Some(path) = warm {
        let source = checkpoint::load(path, &model)?;
        params.warm_start(&source)?;
    }
    Ok(params)
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub peak_test_acc: f64,
    pub best_epoch: usize,
    pub final_mean_mask: f64,
    pub metrics: Vec<EpochMetrics>,
}

pub fn cmd_train(
    cfg: &RunConfig,
    data_path: &Path,
    out_dir: &Path,
    warm: Option<&Path>,
    on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainSummary> {
    cfg.validate()?;
    let ds = load_dataset(cfg, data_path)?;
    let (train_set, test_set) = split(cfg, &ds)?;
    let init = initial_params(cfg, warm)?;
    let outcome = training::train_with(&cfg.model(), init, &train_set, &test_set, &cfg.train(), on_epoch)?;
    fsio::write_atomic(&out_dir.join(METRICS_FILE), report::metrics_csv(&outcome.metrics).as_bytes())?;
    checkpoint::write(&out_dir.join(FINAL_CHECKPOINT), &outcome.final_params)?;
    checkpoint::write(&out_dir.join(BEST_CHECKPOINT), &outcome.best_params)?;
    Ok(TrainSummary {
        peak_test_acc: outcome.peak_test_acc(),
        best_epoch: outcome.best_epoch,
        final_mean_mask: outcome.final_metrics().mean_mask,
        metrics: outcome.metrics,
    })
}

/// Parses a comma-separated list of non-negative energy weights.
pub fn parse_grid(spec: &str) -> Result<Vec<f64>> {
    let values: Vec<f64> = spec
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.trim().parse::<f64>().map_err(|_| CliError::Config(format!("grid: cannot parse {s:?}"))))
        .collect::<Result<_>>()?;
    if values.is_empty() {
        return Err(CliError::Config("grid: empty value list".into()));
    }
    if let Some(v) = values.iter().find(|v| !(**v >= 0.0 && v.is_finite())) {
        return Err(CliError::Config(format!("grid: {v} is not a non-negative weight")));
    }
    Ok(values)
}

pub fn cmd_ablate(
    cfg: &RunConfig,
    data_path: &Path,
    out_dir: &Path,
    unary_grid: &[f64],
    pair_grid: &[f64],
    warm: Option<&Path>,
) -> Result<GridReport> {
    cfg.validate()?;
    if unary_grid.is_empty() || pair_grid.is_empty() {
        return Err(CliError::Config("grid: empty value list".into()));
    }
    let ds = load_dataset(cfg, data_path)?;
    let (train_set, test_set) = split(cfg, &ds)?;
    let init = initial_params(cfg, warm)?;
    let grid = training::grid_search(&cfg.model(), unary_grid, pair_grid, &train_set, &test_set, &cfg.train(), &init)?;
    fsio::write_atomic(&out_dir.join(GRID_FILE), report::grid_csv(&grid).as_bytes())?;
    Ok(grid)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub accuracy: f64,
    /// Mean accuracy of energy-guided minus random deletion over `k ∈ [1, N/2]`.
    pub gap: f64,
    pub mean_mask: f64,
    pub alignment: f64,
    pub alignment_random: f64,
    pub masks_written: usize,
}

/// Keep probabilities of one image on the token grid (all ones for the
/// bypass baseline).
pub fn mask_of(config: &ModelConfig, params: &ModelParams, image: &ersm_core::Tensor) -> Result<Vec<f64>> {
    if config.variant == Variant::Baseline {
        return Ok(vec![1.0; config.geometry()?.tokens()]);
    }
    let features = model::backbone_forward(config, params, image)?;
    let (_, diag) = energy_mask::forward(&features, &params.mask, Mode::Infer)?;
    Ok(diag.m)
}

pub fn cmd_eval(
    cfg: &RunConfig,
    checkpoint_path: &Path,
    data_path: &Path,
    out_dir: &Path,
    masks_out: Option<&Path>,
) -> Result<EvalSummary> {
    cfg.validate()?;
    let model = cfg.model();
    let params = checkpoint::load(checkpoint_path, &model)?;
    let ds = load_dataset(cfg, data_path)?;
    if ds.samples.is_empty() {
        return Err(CliError::Config(format!("{}: dataset is empty", data_path.display())));
    }
    let energy = evaluation::deletion_curve(&model, &params, &ds.samples, Policy::Energy, &[])?;
    let random = evaluation::deletion_curve(&model, &params, &ds.samples, Policy::Random, &cfg.random_policy_seeds())?;
    let sparsity = evaluation::sparsity_report(&model, &params, &ds.samples)?;
    let alignment = evaluation::alignment_report(&model, &params, &ds.samples, cfg.keep_fraction, cfg.seed)?;
    let geom = model.geometry()?;
    let masks = match masks_out {
        Some(_) => ds
            .samples
            .iter()
            .take(cfg.mask_limit)
            .map(|s| mask_of(&model, &params, &s.image))
            .collect::<Result<Vec<_>>>()?,
        None => Vec::new(),
    };

    fsio::write_atomic(&out_dir.join(CURVES_FILE), report::curves_csv(&[&energy, &random]).as_bytes())?;
    fsio::write_atomic(&out_dir.join(SPARSITY_FILE), report::sparsity_csv(&sparsity).as_bytes())?;
    fsio::write_atomic(&out_dir.join(ALIGNMENT_FILE), report::alignment_csv(&alignment).as_bytes())?;
    if let Some(dir) = masks_out {
        for (i, m) in masks.iter().enumerate() {
            let path = dir.join(format!("mask_{i:05}.pgm"));
            pgm::write_mask(&path, m, (geom.grid_h(), geom.grid_w()), (cfg.height, cfg.width))?;
        }
    }
    let half = geom.tokens() / 2;
    Ok(EvalSummary {
        accuracy: energy.points[0].accuracy,
        gap: energy.mean_accuracy(1, half) - random.mean_accuracy(1, half),
        mean_mask: sparsity.mean_mask,
        alignment: alignment.mean,
        alignment_random: alignment.baseline_mean,
        masks_written: masks.len(),
    })
}
