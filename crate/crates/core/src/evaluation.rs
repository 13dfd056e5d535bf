//! Deletion robustness, emergent sparsity and mask/object alignment.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Sample;
use crate::energy_mask::{self, Mode};
use crate::error::{Error, Result};
use crate::model::{self, ModelConfig, ModelParams, Variant};
use crate::tensor::{Tensor, TokenGeometry};
use crate::training::{argmax, mask_histogram, MASK_BINS};

/// Default number of random permutations averaged for the random policy.
pub const DEFAULT_RANDOM_SEEDS: usize = 5;
/// Random token sets drawn per image for the alignment baseline.
pub const ALIGNMENT_BASELINE_DRAWS: usize = 100;
/// Fraction of a token's receptive pixels that must be object pixels for
/// the token to count as covering the object.
pub const OBJECT_COVERAGE: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Policy {
    /// Highest unary score first.
    Energy,
    /// A fresh uniform permutation per input and seed.
    Random,
}

impl Policy {
    pub fn name(self) -> &'static str {
        match self {
            Policy::Energy => "energy",
            Policy::Random => "random",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    /// Tokens removed.
    pub k: usize,
    pub accuracy: f64,
    /// Standard error across seeds (0 for a single seed).
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobustnessCurve {
    pub policy: Policy,
    /// `k = 0, 1, …, N−1`.
    pub points: Vec<CurvePoint>,
    pub seeds: Vec<u64>,
    pub tokens: usize,
}

impl RobustnessCurve {
    /// Mean accuracy over `k ∈ [lo, hi]`.
    pub fn mean_accuracy(&self, lo: usize, hi: usize) -> f64 {
        let sel: Vec<f64> = self.points.iter().filter(|p| p.k >= lo && p.k <= hi).map(|p| p.accuracy).collect();
        sel.iter().sum::<f64>() / sel.len().max(1) as f64
    }

    /// Area under the curve by the trapezoid rule over unit steps in `k`.
    pub fn area(&self) -> f64 {
        self.points.windows(2).map(|w| 0.5 * (w[0].accuracy + w[1].accuracy)).sum()
    }
}

/// Token order for deletion: unary score descending, ties by index.
pub fn ranking_from_scores(z: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..z.len()).collect();
    order.sort_by(|&a, &b| z[b].total_cmp(&z[a]).then(a.cmp(&b)));
    order
}

/// Unary scores of a feature map under the model's mask template.
pub fn scores_from_features(params: &ModelParams, features: &Tensor) -> Result<Vec<f64>> {
    let toks = energy_mask::tokenize(features, params.mask.patch)?;
    Ok(energy_mask::unary_scores(&toks.normalized, &params.mask)?.into_data())
}

/// Highest-energy-first permutation of the tokens of image `x`.
pub fn energy_ranking(config: &ModelConfig, params: &ModelParams, x: &Tensor) -> Result<Vec<usize>> {
    let features = model::backbone_forward(config, params, x)?;
    Ok(ranking_from_scores(&scores_from_features(params, &features)?))
}

fn features_of(config: &ModelConfig, params: &ModelParams, dataset: &[Sample]) -> Result<Vec<Tensor>> {
    dataset.iter().map(|s| model::backbone_forward(config, params, &s.image)).collect()
}

/// Accuracy for each `k` when every image loses its first `k` ranked tokens.
fn curve_for_orders(
    config: &ModelConfig,
    params: &ModelParams,
    features: &[Tensor],
    labels: &[usize],
    orders: &[Vec<usize>],
    tokens: usize,
) -> Result<Vec<f64>> {
    let mut correct = vec![0usize; tokens];
    for ((f, &label), order) in features.iter().zip(labels).zip(orders) {
        for (k, c) in correct.iter_mut().enumerate() {
            let logits = model::logits_with_deletion(config, params, f, &order[..k])?;
            if argmax(logits.data()) == label {
                *c += 1;
            }
        }
    }
    Ok(correct.into_iter().map(|c| c as f64 / features.len() as f64).collect())
}

/// Accuracy after hard-deleting the first `k` tokens of each image's
/// ranking, for `k = 0..N−1`. The random policy averages one permutation
/// per image per seed; the energy policy ignores `seeds`.
pub fn deletion_curve(
    config: &ModelConfig,
    params: &ModelParams,
    dataset: &[Sample],
    policy: Policy,
    seeds: &[u64],
) -> Result<RobustnessCurve> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("deletion curve needs at least one image".into()));
    }
    let geom = config.geometry()?;
    let n = geom.tokens();
    let features = features_of(config, params, dataset)?;
    let labels: Vec<usize> = dataset.iter().map(|s| s.label).collect();
    let per_seed: Vec<Vec<f64>> = match policy {
        Policy::Energy => {
            let orders = features
                .iter()
                .map(|f| scores_from_features(params, f).map(|z| ranking_from_scores(&z)))
                .collect::<Result<Vec<_>>>()?;
            vec![curve_for_orders(config, params, &features, &labels, &orders, n)?]
        }
        Policy::Random => {
            if seeds.is_empty() {
                return Err(Error::InvalidArgument("random deletion needs at least one seed".into()));
            }
            let mut runs = Vec::with_capacity(seeds.len());
            for &seed in seeds {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let orders: Vec<Vec<usize>> = features
                    .iter()
                    .map(|_| {
                        let mut p: Vec<usize> = (0..n).collect();
                        p.shuffle(&mut rng);
                        p
                    })
                    .collect();
                runs.push(curve_for_orders(config, params, &features, &labels, &orders, n)?);
            }
            runs
        }
    };
    let s = per_seed.len() as f64;
    let points = (0..n)
        .map(|k| {
            let mean = per_seed.iter().map(|r| r[k]).sum::<f64>() / s;
            let stderr = if per_seed.len() > 1 {
                let var = per_seed.iter().map(|r| (r[k] - mean) * (r[k] - mean)).sum::<f64>() / (s - 1.0);
                libm::sqrt(var / s)
            } else {
                0.0
            };
            CurvePoint { k, accuracy: mean, stderr }
        })
        .collect();
    let seeds = if policy == Policy::Random { seeds.to_vec() } else { Vec::new() };
    Ok(RobustnessCurve { policy, points, seeds, tokens: n })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparsityReport {
    /// Mean keep probability over every token of every image.
    pub mean_mask: f64,
    /// Fraction of tokens per keep-probability decile.
    pub histogram: [f64; MASK_BINS],
    /// Mean keep probability of each image.
    pub per_image: Vec<f64>,
}

/// Keep-probability statistics of the mask layer in inference mode. The
/// bypass baseline keeps every token.
pub fn sparsity_report(config: &ModelConfig, params: &ModelParams, dataset: &[Sample]) -> Result<SparsityReport> {
    let mut all = Vec::new();
    let mut per_image = Vec::with_capacity(dataset.len());
    if config.variant == Variant::Baseline {
        let n = config.geometry()?.tokens();
        let (mean_mask, histogram, _) = mask_histogram(core::iter::repeat_n(1.0, n * dataset.len()));
        return Ok(SparsityReport { mean_mask, histogram, per_image: vec![1.0; dataset.len()] });
    }
    for s in dataset {
        let features = model::backbone_forward(config, params, &s.image)?;
        let (_, diag) = energy_mask::forward(&features, &params.mask, Mode::Infer)?;
        per_image.push(diag.mean_mask());
        all.extend_from_slice(&diag.m);
    }
    let (mean_mask, histogram, _) = mask_histogram(all.into_iter());
    Ok(SparsityReport { mean_mask, histogram, per_image })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentReport {
    pub keep_fraction: f64,
    /// Tokens retained per image, `ceil(keep_fraction·N)`.
    pub retained: usize,
    /// Intersection-over-union of retained and object tokens, per image.
    pub per_image: Vec<f64>,
    pub mean: f64,
    /// Mean IoU of random equal-size token sets, per image.
    pub baseline_per_image: Vec<f64>,
    pub baseline_mean: f64,
}

/// Tokens whose receptive region is at least [`OBJECT_COVERAGE`] object pixels.
pub fn object_tokens(config: &ModelConfig, truth_mask: &[u8]) -> Result<Vec<bool>> {
    let geom = config.geometry()?;
    let (sh, sw) = config.feature_stride()?;
    let input = config.backbone.input;
    if truth_mask.len() != input.h * input.w {
        return Err(Error::InvalidArgument("truth mask does not match the input size".into()));
    }
    Ok(object_tokens_for(&geom, sh, sw, input.w, truth_mask))
}

fn object_tokens_for(geom: &TokenGeometry, sh: usize, sw: usize, width: usize, mask: &[u8]) -> Vec<bool> {
    let (ph, pw) = (geom.patch * sh, geom.patch * sw);
    (0..geom.tokens())
        .map(|t| {
            let (gy, gx) = geom.cell(t);
            let mut count = 0usize;
            for y in gy * ph..(gy + 1) * ph {
                for x in gx * pw..(gx + 1) * pw {
                    count += usize::from(mask[y * width + x] != 0);
                }
            }
            count as f64 >= OBJECT_COVERAGE * (ph * pw) as f64
        })
        .collect()
}

fn iou(selected: &[usize], object: &[bool]) -> f64 {
    let inter = selected.iter().filter(|&&t| object[t]).count();
    let union = selected.len() + object.iter().filter(|&&o| o).count() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Number of tokens retained at `keep_fraction`.
pub fn retained_count(keep_fraction: f64, tokens: usize) -> usize {
    let r = libm::ceil(keep_fraction * tokens as f64 - 1e-9) as usize;
    r.clamp(1, tokens)
}

/// Overlap between each image's lowest-energy tokens and its object tokens,
/// against random token sets of the same size drawn with `seed`.
pub fn alignment_report(
    config: &ModelConfig,
    params: &ModelParams,
    dataset: &[Sample],
    keep_fraction: f64,
    seed: u64,
) -> Result<AlignmentReport> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::InvalidArgument("keep fraction must lie in (0, 1]".into()));
    }
    let n = config.geometry()?.tokens();
    let retained = retained_count(keep_fraction, n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_image = Vec::with_capacity(dataset.len());
    let mut baseline_per_image = Vec::with_capacity(dataset.len());
    for s in dataset {
        let object = object_tokens(config, &s.truth_mask)?;
        let features = model::backbone_forward(config, params, &s.image)?;
        let z = scores_from_features(params, &features)?;
        let mut ranking: Vec<usize> = (0..n).collect();
        ranking.sort_by(|&a, &b| z[a].total_cmp(&z[b]).then(a.cmp(&b)));
        per_image.push(iou(&ranking[..retained], &object));
        let draws: f64 =
            (0..ALIGNMENT_BASELINE_DRAWS).map(|_| iou(&index::sample(&mut rng, n, retained).into_vec(), &object)).sum();
        baseline_per_image.push(draws / ALIGNMENT_BASELINE_DRAWS as f64);
    }
    let mean_of = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    Ok(AlignmentReport {
        keep_fraction,
        retained,
        mean: mean_of(&per_image),
        baseline_mean: mean_of(&baseline_per_image),
        per_image,
        baseline_per_image,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_scores_rank_by_index() {
        assert_eq!(ranking_from_scores(&[0.0; 5]), vec![0, 1, 2, 3, 4]);
        assert_eq!(ranking_from_scores(&[0.1, 0.5, 0.1, 0.9]), vec![3, 1, 0, 2]);
    }

    #[test]
    fn retained_counts() {
        assert_eq!(retained_count(0.3, 16), 5);
        assert_eq!(retained_count(0.3, 10), 3);
        assert_eq!(retained_count(1.0, 16), 16);
        assert_eq!(retained_count(1e-6, 16), 1);
    }

    #[test]
    fn iou_cases() {
        let object = [true, true, false, false];
        assert_eq!(iou(&[0, 1], &object), 1.0);
        assert_eq!(iou(&[2, 3], &object), 0.0);
        assert!((iou(&[0, 2], &object) - 1.0 / 3.0).abs() < 1e-15);
    }
}
