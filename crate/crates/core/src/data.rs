//! Synthetic planted-object images with known object masks.
//!
//! Each image holds one `s×s` oriented grating (class `k` is oriented at
//! `k·π/K`) on a smooth background. The object box is recorded as a binary
//! mask that is never used for training.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Grating period in pixels.
const GRATING_PERIOD: f64 = 4.0;
const BACKGROUND_LEVEL: f64 = 0.5;
/// Per-component amplitude bound of the low-frequency field.
const FIELD_AMPLITUDE: f64 = 0.08;
const FIELD_COMPONENTS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Background {
    /// Flat level plus noise.
    Constant,
    /// Sum of a few random waves of at most one cycle per image, plus noise.
    Field,
}

impl Background {
    pub fn name(self) -> &'static str {
        match self {
            Background::Constant => "constant",
            Background::Field => "field",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "constant" => Some(Background::Constant),
            "field" => Some(Background::Field),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub object_size: usize,
    pub background: Background,
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            classes: 4,
            channels: 1,
            height: 32,
            width: 32,
            object_size: 10,
            background: Background::Field,
            noise: 0.05,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.channels == 0 || self.height == 0 || self.width == 0 || self.object_size == 0 {
            return Err(Error::InvalidArgument("image and object extents must be positive".into()));
        }
        if self.object_size >= self.height || self.object_size >= self.width {
            return Err(Error::InvalidArgument(format!(
                "object size {} does not fit in a {}x{} image",
                self.object_size, self.height, self.width
            )));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::InvalidArgument(format!("noise amplitude must be non-negative, got {}", self.noise)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub label: usize,
    /// `H×W`, 1 on object pixels.
    pub truth_mask: Vec<u8>,
}

/// The `s×s` grating for `class`.
pub fn glyph(class: usize, classes: usize, size: usize) -> Vec<f64> {
    let theta = class as f64 * core::f64::consts::PI / classes as f64;
    let (sin, cos) = (libm::sin(theta), libm::cos(theta));
    let c = (size as f64 - 1.0) / 2.0;
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let u = (x as f64 - c) * cos + (y as f64 - c) * sin;
            out.push(0.5 + 0.5 * libm::cos(2.0 * core::f64::consts::PI * u / GRATING_PERIOD));
        }
    }
    out
}

/// Generates `n` samples. Labels are a seeded shuffle of a balanced
/// sequence; each sample draws from its own ChaCha stream.
pub fn generate(config: &GeneratorConfig, n: usize) -> Result<Vec<Sample>> {
    config.validate()?;
    if n == 0 {
        return Err(Error::InvalidArgument("sample count must be at least 1".into()));
    }
    let mut label_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut labels: Vec<usize> = (0..n).map(|i| i % config.classes).collect();
    labels.shuffle(&mut label_rng);
    let glyphs: Vec<Vec<f64>> = (0..config.classes).map(|k| glyph(k, config.classes, config.object_size)).collect();
    labels
        .into_iter()
        .enumerate()
        .map(|(i, label)| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(i as u64 + 1);
            sample(config, label, &glyphs[label], &mut rng)
        })
        .collect()
}

fn sample(config: &GeneratorConfig, label: usize, glyph: &[f64], rng: &mut ChaCha8Rng) -> Result<Sample> {
    let (h, w, s) = (config.height, config.width, config.object_size);
    let mut base = vec![BACKGROUND_LEVEL; h * w];
    if config.background == Background::Field {
        for _ in 0..FIELD_COMPONENTS {
            let amp = rng.random_range(0.0..FIELD_AMPLITUDE);
            let fy = rng.random_range(-1.0..1.0);
            let fx = rng.random_range(-1.0..1.0);
            let phase = rng.random_range(0.0..2.0 * core::f64::consts::PI);
            for y in 0..h {
                for x in 0..w {
                    let arg =
                        2.0 * core::f64::consts::PI * (fx * x as f64 / w as f64 + fy * y as f64 / h as f64) + phase;
                    base[y * w + x] += amp * libm::cos(arg);
                }
            }
        }
    }
    let top = rng.random_range(0..=h - s);
    let left = rng.random_range(0..=w - s);
    let mut truth_mask = vec![0u8; h * w];
    for y in 0..s {
        for x in 0..s {
            let idx = (top + y) * w + left + x;
            base[idx] = glyph[y * s + x];
            truth_mask[idx] = 1;
        }
    }
    let mut image = Vec::with_capacity(config.channels * h * w);
    let noise = if config.noise > 0.0 {
        Some(Normal::new(0.0, config.noise).map_err(|e| Error::InvalidArgument(format!("noise: {e}")))?)
    } else {
        None
    };
    for _ in 0..config.channels {
        for &v in &base {
            image.push(match &noise {
                Some(dist) => v + dist.sample(rng),
                None => v,
            });
        }
    }
    Ok(Sample { image: Tensor::new(&[config.channels, h, w], image)?, label, truth_mask })
}

/// Label-stratified, seed-deterministic split into `(train, test)` index
/// lists, each ascending. The train size is `round(f_train·n)`; per-class
/// quotas are apportioned by largest remainder.
pub fn split(labels: &[usize], fractions: (f64, f64), seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let (ft, fe) = fractions;
    for f in [ft, fe] {
        if !(f > 0.0 && f < 1.0) {
            return Err(Error::InvalidArgument(format!("split fraction {f} outside (0, 1)")));
        }
    }
    if (ft + fe - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("split fractions sum to {}", ft + fe)));
    }
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let target = libm::round(ft * labels.len() as f64) as usize;
    let ideal: Vec<f64> = by_class.iter().map(|c| ft * c.len() as f64).collect();
    let mut quota: Vec<usize> = ideal.iter().map(|&v| libm::floor(v) as usize).collect();
    let mut order: Vec<usize> = (0..classes).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (ideal[a] - quota[a] as f64, ideal[b] - quota[b] as f64);
        rb.partial_cmp(&ra).unwrap_or(core::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    let mut assigned: usize = quota.iter().sum();
    for &c in order.iter().cycle().take(classes * 2) {
        if assigned >= target {
            break;
        }
        if quota[c] < by_class[c].len() {
            quota[c] += 1;
            assigned += 1;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (members, &q) in by_class.iter_mut().zip(&quota) {
        members.shuffle(&mut rng);
        train.extend_from_slice(&members[..q]);
        test.extend_from_slice(&members[q..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_reproducible() {
        let cfg = GeneratorConfig { seed: 17, ..Default::default() };
        assert_eq!(generate(&cfg, 3).unwrap(), generate(&cfg, 3).unwrap());
        let other = GeneratorConfig { seed: 18, ..Default::default() };
        assert_ne!(generate(&cfg, 3).unwrap(), generate(&other, 3).unwrap());
    }

    #[test]
    fn noiseless_constant_background_is_flat() {
        let cfg = GeneratorConfig { background: Background::Constant, noise: 0.0, ..Default::default() };
        for s in generate(&cfg, 5).unwrap() {
            let bg: Vec<f64> =
                s.image.data().iter().zip(&s.truth_mask).filter(|(_, &m)| m == 0).map(|(&v, _)| v).collect();
            assert!(bg.iter().all(|&v| v == bg[0]));
        }
    }

    #[test]
    fn truth_mask_has_object_area() {
        let cfg = GeneratorConfig::default();
        for s in generate(&cfg, 20).unwrap() {
            let count = s.truth_mask.iter().filter(|&&m| m == 1).count();
            assert_eq!(count, cfg.object_size * cfg.object_size);
            assert!(s.label < cfg.classes);
        }
    }

    #[test]
    fn oversized_object_is_rejected() {
        let cfg = GeneratorConfig { object_size: 40, ..Default::default() };
        assert!(generate(&cfg, 1).is_err());
        assert!(generate(&GeneratorConfig::default(), 0).is_err());
    }

    #[test]
    fn glyphs_are_distinct() {
        let g: Vec<Vec<f64>> = (0..4).map(|k| glyph(k, 4, 12)).collect();
        for a in 0..4 {
            for b in a + 1..4 {
                assert_ne!(g[a], g[b]);
            }
        }
    }

    #[test]
    fn split_sizes_and_disjointness() {
        let labels: Vec<usize> = (0..100).map(|i| i % 3).collect();
        let (tr, te) = split(&labels, (0.8, 0.2), 4).unwrap();
        assert_eq!((tr.len(), te.len()), (80, 20));
        let mut all: Vec<usize> = tr.iter().chain(&te).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert_eq!(split(&labels, (0.8, 0.2), 4).unwrap(), (tr, te));
    }

    #[test]
    fn split_rejects_bad_fractions() {
        let labels = [0, 1, 0, 1];
        assert!(split(&labels, (1.0, 0.0), 0).is_err());
        assert!(split(&labels, (0.5, 0.6), 0).is_err());
    }
}
