//! Year-based train/test splits and training-set undersampling.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labeling::LabelSet;

pub const MAX_SPLIT_REJECTIONS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub n_train_years: usize,
    pub n_test_years: usize,
    /// Relative tolerance on the test positive fraction against the train one.
    pub proportion_tolerance: f64,
    pub split_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    /// Random partitions drawn, including the accepted one.
    pub draws: usize,
    pub accepted: bool,
}

fn fraction(labels: &LabelSet, level: usize, years: &[usize]) -> f64 {
    labels.positives_in(level, years) as f64 / (years.len() * labels.season_samples) as f64
}

/// Relative mismatch of test and train positive fractions at `level`.
pub fn proportion_mismatch(labels: &LabelSet, level: usize, train: &[usize], test: &[usize]) -> f64 {
    let (f_train, f_test) = (fraction(labels, level, train), fraction(labels, level, test));
    if f_train == 0.0 {
        return f64::INFINITY;
    }
    (f_test - f_train).abs() / f_train
}

/// Random year partition, redrawn until the test and train positive
/// fractions at the least extreme level agree within tolerance.
pub fn split_years(labels: &LabelSet, cfg: &SplitConfig) -> Result<Split> {
    let total = labels.n_years;
    if cfg.n_train_years == 0 || cfg.n_test_years == 0 || cfg.n_train_years + cfg.n_test_years > total {
        return Err(Error::Config(format!(
            "cannot split {total} years into {} train and {} test years",
            cfg.n_train_years, cfg.n_test_years
        )));
    }
    let all: Vec<usize> = (0..total).collect();
    if labels.n_levels() == 0 || labels.positives_in(0, &all) == 0 {
        return Err(Error::Unsplittable("dataset has no positive samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.split_seed);
    let mut best: Option<(f64, Vec<usize>, Vec<usize>)> = None;
    for draw in 1..=MAX_SPLIT_REJECTIONS {
        let mut years = all.clone();
        years.shuffle(&mut rng);
        let mut test = years[..cfg.n_test_years].to_vec();
        let mut train = years[cfg.n_test_years..cfg.n_test_years + cfg.n_train_years].to_vec();
        test.sort_unstable();
        train.sort_unstable();
        let mismatch = proportion_mismatch(labels, 0, &train, &test);
        if mismatch <= cfg.proportion_tolerance {
            return Ok(Split { train, test, draws: draw, accepted: true });
        }
        if best.as_ref().is_none_or(|b| mismatch < b.0) {
            best = Some((mismatch, train, test));
        }
    }
    let (mismatch, train, test) = best.expect("at least one draw");
    log::warn!(
        "no split within tolerance {} after {MAX_SPLIT_REJECTIONS} draws; using best mismatch {mismatch:.3}",
        cfg.proportion_tolerance
    );
    Ok(Split { train, test, draws: MAX_SPLIT_REJECTIONS, accepted: false })
}

/// Negative-class retention for an imbalance ratio (negatives per positive)
/// at level `p`. Ratio 1 balances exactly; larger ratios use the rounded
/// `ratio * p` rates of the reference table. `None` keeps everything.
pub fn imbalance_rate(ratio: Option<f64>, p: f64) -> f64 {
    match ratio {
        None => 1.0,
        Some(r) if r == 1.0 => p / (1.0 - p),
        Some(r) => (r * p).min(1.0),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UndersampleConfig {
    /// Fraction of negatives kept, in (0, 1].
    pub rate: f64,
    /// Keep exactly `round(rate * n_neg)` negatives instead of thinning.
    pub strict: bool,
    pub seed: u64,
}

/// `K p + K (1 - p) r` with the negative part rounded half up.
pub fn expected_size(n_pos: usize, n_neg: usize, rate: f64) -> usize {
    n_pos + kept_negatives(n_neg, rate)
}

fn kept_negatives(n_neg: usize, rate: f64) -> usize {
    // the nudge keeps exact halves from rounding down through representation error
    ((n_neg as f64 * rate) * (1.0 + 1e-12) + 0.5).floor() as usize
}

/// Keeps every positive and a seeded subset of negatives, preserving the
/// input order.
pub fn undersample(samples: &[usize], labels: &[bool], cfg: &UndersampleConfig) -> Result<Vec<usize>> {
    if !(cfg.rate > 0.0 && cfg.rate <= 1.0) {
        return Err(Error::Config(format!("undersampling rate {} outside (0, 1]", cfg.rate)));
    }
    if cfg.rate == 1.0 {
        return Ok(samples.to_vec());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let negatives: Vec<usize> = samples.iter().copied().filter(|&s| !labels[s]).collect();
    let mut keep = vec![false; negatives.len()];
    if cfg.strict {
        let mut order: Vec<usize> = (0..negatives.len()).collect();
        order.shuffle(&mut rng);
        for &i in &order[..kept_negatives(negatives.len(), cfg.rate).min(negatives.len())] {
            keep[i] = true;
        }
    } else {
        use rand::Rng;
        keep.iter_mut().for_each(|k| *k = rng.random::<f64>() < cfg.rate);
    }
    let mut neg_i = 0;
    Ok(samples
        .iter()
        .copied()
        .filter(|&s| {
            if labels[s] {
                return true;
            }
            neg_i += 1;
            keep[neg_i - 1]
        })
        .collect())
}
