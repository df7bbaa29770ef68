//! Experiment orchestration: trials of split, undersample, train and score,
//! optionally chained across levels by warm starts, and lead-time sweeps.

pub mod metrics;
pub mod split;
pub mod train;

use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use metrics::{mcc, score, ConfusionCounts, Scores};
pub use split::{
    expected_size, imbalance_rate, proportion_mismatch, split_years, undersample, Split, SplitConfig,
    UndersampleConfig,
};
pub use train::{and_combine, predict_labels, train_model, EpochRecord, Member, Model, SampleSource, Standardizer, TrainConfig, TrainJob};

use crate::archive::FieldArchive;
use crate::error::{Error, Result};
use crate::features::{FeatureStore, Protocol};
use crate::grid::Region;
use crate::labeling::LabelSet;
use crate::synth::{oracle_score, OracleModel, OracleRecords, TS, ZG};

/// Mixes `parts` into `base` (splitmix64 finalizer per part).
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mix = |mut z: u64| {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    };
    parts.iter().fold(mix(base), |acc, &p| mix(acc ^ mix(p)))
}

/// Generator-side knowledge for the oracle predictor.
#[derive(Debug, Clone)]
pub struct OracleContext {
    pub records: OracleRecords,
    pub model: OracleModel,
    pub d_days: usize,
}

/// Labels plus spectral features at every lead time of interest.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub labels: LabelSet,
    pub stores: BTreeMap<usize, FeatureStore>,
    pub oracle: Option<OracleContext>,
}

impl ExperimentData {
    pub fn build(
        archive: &FieldArchive,
        labels: LabelSet,
        predictor: &Region,
        spectral_rows: usize,
        spectral_cols: usize,
        taus: &[usize],
        oracle: Option<OracleContext>,
    ) -> Result<Self> {
        let vars = [archive.variable(TS)?, archive.variable(ZG)?];
        let clims = [archive.climatology(vars[0])?, archive.climatology(vars[1])?];
        let mut stores = BTreeMap::new();
        for &tau in taus {
            let store = FeatureStore::build(
                archive,
                [&clims[0], &clims[1]],
                vars,
                predictor,
                spectral_rows,
                spectral_cols,
                tau,
                &labels,
            )?;
            stores.insert(tau, store);
        }
        Ok(ExperimentData { labels, stores, oracle })
    }

    pub fn store(&self, tau_days: usize) -> Result<&FeatureStore> {
        self.stores.get(&tau_days).ok_or_else(|| {
            Error::Bounds(format!(
                "no features for a lead of {tau_days} days (built: {:?})",
                self.stores.keys().collect::<Vec<_>>()
            ))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub protocol: Protocol,
    /// Level indices to report, least extreme first.
    pub levels: Vec<usize>,
    pub tau_days: usize,
    pub transfer: bool,
    /// Negatives per positive after undersampling; `None` disables it.
    pub imbalance_ratio: Option<f64>,
    pub strict_undersample: bool,
    pub n_train_years: usize,
    pub n_test_years: usize,
    pub proportion_tolerance: f64,
    /// Epochs of from-scratch runs and of the first chain link.
    pub epochs_first: usize,
    /// Epochs of warm-started chain links.
    pub epochs_transfer: usize,
    pub train: TrainConfig,
    pub n_trials: usize,
    pub seed: u64,
    /// When false every trial reuses the seeds of trial 0.
    pub vary_seeds: bool,
    pub workers: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            protocol: Protocol::P4,
            levels: vec![0, 1, 2],
            tau_days: 0,
            transfer: true,
            imbalance_ratio: Some(2.0),
            strict_undersample: true,
            n_train_years: 90,
            n_test_years: 10,
            proportion_tolerance: 0.10,
            epochs_first: 10,
            epochs_transfer: 5,
            train: TrainConfig::default(),
            n_trials: 10,
            seed: 2021,
            vary_seeds: true,
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialSeeds {
    pub split: u64,
    pub model: u64,
    pub undersample: u64,
    pub train: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    pub trial: usize,
    pub level_index: usize,
    pub level: f64,
    pub protocol: Protocol,
    pub tau_days: usize,
    pub transfer: bool,
    pub undersample_rate: f64,
    pub train_size: usize,
    pub seeds: TrialSeeds,
    /// Epoch whose test counts are reported; 0 for an untrained model.
    pub selected_epoch: usize,
    pub counts: ConfusionCounts,
    pub scores: Scores,
    pub curve: Vec<EpochRecord>,
    /// Oracle predictor on the same test samples.
    pub oracle: Option<ConfusionCounts>,
    pub seconds: f64,
}

/// Trains a chain of models, each link warm-started from the previous
/// link's final parameters with a fresh optimizer.
pub fn transfer_chain(
    initial: Model,
    levels: &[f64],
    jobs: &[TrainJob],
    epochs: &[usize],
    cfg: &TrainConfig,
    seeds: &[u64],
) -> Result<Vec<(Model, Vec<EpochRecord>)>> {
    if jobs.is_empty() || jobs.len() != levels.len() || jobs.len() != epochs.len() || jobs.len() != seeds.len() {
        return Err(Error::ChainOrder(format!(
            "{} levels, {} jobs, {} epoch budgets, {} seeds",
            levels.len(),
            jobs.len(),
            epochs.len(),
            seeds.len()
        )));
    }
    if levels.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::ChainOrder(format!("levels {levels:?} must go from least to most extreme")));
    }
    let mut out: Vec<(Model, Vec<EpochRecord>)> = Vec::with_capacity(jobs.len());
    let mut model = initial;
    for ((job, &ep), &seed) in jobs.iter().zip(epochs).zip(seeds) {
        let curve = train_model(&mut model, job, ep, cfg, seed)?;
        out.push((model.clone(), curve));
    }
    Ok(out)
}

/// Oracle predictor counts: the test samples with the highest oracle
/// exceedance probability are called positive, as many as there are
/// actual positives.
pub fn oracle_counts(
    oracle: &OracleContext,
    labels: &LabelSet,
    level_index: usize,
    test: &[usize],
    tau_days: usize,
) -> Result<ConfusionCounts> {
    let p = labels.thresholds.get(level_index).map(|t| t.level).ok_or_else(|| Error::Bounds(format!("level {level_index}")))?;
    let threshold = oracle.model.unconditional_threshold(p, oracle.d_days);
    let season = labels.season_samples;
    let mut scored = Vec::with_capacity(test.len());
    for (i, &s) in test.iter().enumerate() {
        let (year, t) = (s / season, labels.season_start + s % season);
        scored.push((oracle_score(&oracle.records, &oracle.model, year, t, tau_days, oracle.d_days, threshold)?, i));
    }
    let actual: Vec<bool> = test.iter().map(|&s| labels.labels[level_index][s]).collect();
    let k = actual.iter().filter(|&&z| z).count();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut predicted = vec![false; test.len()];
    for &(_, i) in &scored[..k] {
        predicted[i] = true;
    }
    Ok(ConfusionCounts::from_predictions(&predicted, &actual))
}

/// Seeds of `trial` at `level`; the split seed is shared by all levels.
pub fn trial_seeds(cfg: &ExperimentConfig, trial: usize, level: usize) -> TrialSeeds {
    let base = derive_seed(cfg.seed, &[if cfg.vary_seeds { trial as u64 } else { 0 }]);
    TrialSeeds {
        split: derive_seed(base, &[1]),
        model: derive_seed(base, &[2, level as u64]),
        undersample: derive_seed(base, &[3, level as u64]),
        train: derive_seed(base, &[4, level as u64]),
    }
}

/// The year partition of `trial`.
pub fn trial_split(labels: &LabelSet, cfg: &ExperimentConfig, trial: usize) -> Result<Split> {
    split_years(
        labels,
        &SplitConfig {
            n_train_years: cfg.n_train_years,
            n_test_years: cfg.n_test_years,
            proportion_tolerance: cfg.proportion_tolerance,
            split_seed: trial_seeds(cfg, trial, 0).split,
        },
    )
}

/// Samples of every in-season time of `years`.
pub fn year_samples(labels: &LabelSet, years: &[usize]) -> Vec<usize> {
    let s = labels.season_samples;
    years.iter().flat_map(|&y| y * s..(y + 1) * s).collect()
}

/// One independent split, trained at every configured level.
pub fn run_trial(data: &ExperimentData, cfg: &ExperimentConfig, trial: usize) -> Result<Vec<TrialReport>> {
    Ok(run_trial_with_models(data, cfg, trial)?.0)
}

/// [`run_trial`] that also returns the final model of every reported level.
pub fn run_trial_with_models(
    data: &ExperimentData,
    cfg: &ExperimentConfig,
    trial: usize,
) -> Result<(Vec<TrialReport>, Vec<(usize, Model)>)> {
    let labels = &data.labels;
    if cfg.levels.is_empty() || cfg.levels.iter().any(|&l| l >= labels.n_levels()) {
        return Err(Error::Config(format!("levels {:?} outside the {} labeled levels", cfg.levels, labels.n_levels())));
    }
    if cfg.levels.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::ChainOrder(format!("levels {:?} must be listed least extreme first", cfg.levels)));
    }
    let store = data.store(cfg.tau_days)?;
    let split_seed = trial_seeds(cfg, trial, 0).split;
    let split = trial_split(labels, cfg, trial)?;
    let train_all = year_samples(labels, &split.train);
    let test = year_samples(labels, &split.test);
    let scaler = Standardizer::fit(store, &train_all);
    let source = SampleSource { store, scaler: &scaler };
    let (rows, cols) = (store.rows, store.cols);

    // a chain visits every level up to the most extreme one requested
    let run_levels: Vec<usize> = if cfg.transfer { (0..=*cfg.levels.last().unwrap()).collect() } else { cfg.levels.clone() };
    let mut reports = Vec::new();
    let mut finals = Vec::new();
    let mut model: Option<Model> = None;
    for (link, &li) in run_levels.iter().enumerate() {
        let start = Instant::now();
        let seeds = trial_seeds(cfg, trial, li);
        let p = labels.thresholds[li].level;
        let rate = imbalance_rate(cfg.imbalance_ratio, p);
        let level_labels = &labels.labels[li];
        let train = undersample(&train_all, level_labels, &UndersampleConfig { rate, strict: cfg.strict_undersample, seed: seeds.undersample })?;
        let job = TrainJob { source, labels: level_labels, train: &train, test: &test, test_years: &split.test };
        let warm = cfg.transfer && link > 0;
        let mut m = match (warm, model.take()) {
            (true, Some(prev)) => prev,
            (true, None) => return Err(Error::ChainOrder(format!("level {li} has no preceding model"))),
            (false, _) => Model::new(cfg.protocol, rows, cols, &cfg.train.arch, seeds.model)?,
        };
        let epochs = if warm { cfg.epochs_transfer } else { cfg.epochs_first };
        let curve = train_model(&mut m, &job, epochs, &cfg.train, seeds.train)?;
        let (selected_epoch, counts) = if curve.is_empty() {
            (0, job.evaluate(&m, &test, cfg.train.eval_batch)?)
        } else if cfg.transfer {
            let last = curve.last().unwrap();
            (last.epoch, last.test)
        } else {
            let best = curve.iter().fold(&curve[0], |b, r| if r.test_mcc() > b.test_mcc() { r } else { b });
            (best.epoch, best.test)
        };
        let oracle = data.oracle.as_ref().map(|o| oracle_counts(o, labels, li, &test, cfg.tau_days)).transpose()?;
        if cfg.levels.contains(&li) {
            reports.push(TrialReport {
                trial,
                level_index: li,
                level: p,
                protocol: cfg.protocol,
                tau_days: cfg.tau_days,
                transfer: cfg.transfer,
                undersample_rate: rate,
                train_size: train.len(),
                seeds: TrialSeeds { split: split_seed, ..seeds },
                selected_epoch,
                counts,
                scores: score(&counts)?,
                curve,
                oracle,
                seconds: start.elapsed().as_secs_f64(),
            });
            finals.push((li, m.clone()));
        }
        if cfg.transfer {
            model = Some(m);
        }
    }
    Ok((reports, finals))
}

/// Independent trials, run on `cfg.workers` threads. Each trial is
/// sequential internally, so results do not depend on the worker count.
pub fn run_trials(data: &ExperimentData, cfg: &ExperimentConfig) -> Result<Vec<TrialReport>> {
    if cfg.n_trials == 0 {
        return Err(Error::Config("n_trials must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let per_trial: Vec<Result<Vec<TrialReport>>> =
        pool.install(|| (0..cfg.n_trials).into_par_iter().map(|t| run_trial(data, cfg, t)).collect());
    let mut out = Vec::new();
    for r in per_trial {
        out.extend(r?);
    }
    Ok(out)
}

/// `run_trials` at each lead time with all other settings fixed.
pub fn tau_sweep(data: &ExperimentData, cfg: &ExperimentConfig, taus: &[usize]) -> Result<Vec<TrialReport>> {
    for &tau in taus {
        data.store(tau)?;
    }
    let mut out = Vec::new();
    for &tau in taus {
        out.extend(run_trials(data, &ExperimentConfig { tau_days: tau, ..cfg.clone() })?);
    }
    Ok(out)
}

/// Mean, population standard deviation, median and maximum absolute
/// deviation from the median.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub mean: f64,
    pub std: f64,
    pub median: f64,
    pub max_abs_dev: f64,
}

impl Stats {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Stats { mean: f64::NAN, std: f64::NAN, median: f64::NAN, max_abs_dev: f64::NAN };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let mid = sorted.len() / 2;
        let median = if sorted.len() % 2 == 1 { sorted[mid] } else { (sorted[mid - 1] + sorted[mid]) / 2.0 };
        let max_abs_dev = values.iter().map(|v| (v - median).abs()).fold(0.0, f64::max);
        Stats { mean, std, median, max_abs_dev }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub level: f64,
    pub protocol: Protocol,
    pub tau_days: usize,
    pub transfer: bool,
    pub undersample_rate: f64,
    pub n_trials: usize,
    pub mcc: Stats,
    pub tpr: Stats,
    pub fpr: Stats,
    pub oracle_mcc: Option<Stats>,
}

/// Aggregates reports by (level, protocol, lead time, transfer, rate), in
/// first-seen order.
pub fn summarize(reports: &[TrialReport]) -> Vec<SummaryRow> {
    let mut groups: Vec<(String, Vec<&TrialReport>)> = Vec::new();
    for r in reports {
        let key = format!("{}|{}|{}|{}|{}", r.level, r.protocol, r.tau_days, r.transfer, r.undersample_rate);
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, g)) => g.push(r),
            None => groups.push((key, vec![r])),
        }
    }
    groups
        .into_iter()
        .map(|(_, g)| {
            let pick = |f: fn(&Scores) -> f64| Stats::of(&g.iter().map(|r| f(&r.scores)).collect::<Vec<_>>());
            let oracle: Option<Vec<f64>> = g.iter().map(|r| r.oracle.map(|c| mcc(&c))).collect();
            SummaryRow {
                level: g[0].level,
                protocol: g[0].protocol,
                tau_days: g[0].tau_days,
                transfer: g[0].transfer,
                undersample_rate: g[0].undersample_rate,
                n_trials: g.len(),
                mcc: pick(|s| s.mcc),
                tpr: pick(|s| s.tpr),
                fpr: pick(|s| s.fpr),
                oracle_mcc: oracle.map(|v| Stats::of(&v)),
            }
        })
        .collect()
}
