//! Models, mini-batch training and evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::derive_seed;
use super::metrics::{score, ConfusionCounts};
use crate::error::{Error, Result};
use crate::features::{FeatureStore, Protocol};
use crate::nn::{ArchConfig, Mode, Network, Shape};
use crate::optim::{AmsGrad, AmsGradConfig};

/// Multiplicative per-coefficient scaling to unit root-mean-square over the
/// training samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub ts: Vec<f32>,
    pub zg: Vec<f32>,
}

impl Standardizer {
    pub fn identity(len: usize) -> Self {
        Standardizer { ts: vec![1.0; len], zg: vec![1.0; len] }
    }

    pub fn fit(store: &FeatureStore, samples: &[usize]) -> Self {
        let p = store.per_field();
        let mut acc = [vec![0.0f64; p], vec![0.0f64; p]];
        for &s in samples {
            for (a, v) in acc[0].iter_mut().zip(store.ts_of(s)) {
                *a += (*v as f64).powi(2);
            }
            for (a, v) in acc[1].iter_mut().zip(store.zg_of(s)) {
                *a += (*v as f64).powi(2);
            }
        }
        let n = samples.len().max(1) as f64;
        let [ts, zg] = acc.map(|a| {
            a.into_iter()
                .map(|s| {
                    let rms = (s / n).sqrt();
                    if rms > 1e-12 {
                        (1.0 / rms) as f32
                    } else {
                        1.0
                    }
                })
                .collect()
        });
        Standardizer { ts, zg }
    }
}

/// Standardized network inputs drawn from a feature store.
#[derive(Clone, Copy)]
pub struct SampleSource<'a> {
    pub store: &'a FeatureStore,
    pub scaler: &'a Standardizer,
}

impl SampleSource<'_> {
    pub fn year_of(&self, sample: usize) -> usize {
        sample / self.store.season_samples
    }

    /// One buffer per tower of a single-network protocol.
    pub fn batch(&self, samples: &[usize], protocol: Protocol) -> Vec<Vec<f32>> {
        let p = self.store.per_field();
        let scaled = |src: &[f32], k: &[f32], out: &mut Vec<f32>| out.extend(src.iter().zip(k).map(|(a, b)| a * b));
        let mut ts = Vec::new();
        let mut zg = Vec::new();
        let want_ts = protocol != Protocol::P2;
        let want_zg = protocol != Protocol::P1;
        let stacked = protocol == Protocol::P4;
        for &s in samples {
            if want_ts {
                scaled(self.store.ts_of(s), &self.scaler.ts, &mut ts);
            }
            if want_zg {
                let dst = if stacked { &mut ts } else { &mut zg };
                scaled(self.store.zg_of(s), &self.scaler.zg, dst);
            }
        }
        debug_assert!(ts.len() % p == 0 && zg.len() % p == 0);
        match protocol {
            Protocol::P1 | Protocol::P4 => vec![ts],
            Protocol::P2 => vec![zg],
            Protocol::P3 => vec![ts, zg],
            Protocol::And => unreachable!("AND combines separate networks"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Member {
    /// Input assembly of this network (never `And`).
    pub inputs: Protocol,
    pub net: Network<f32>,
}

/// One network, or two combined by logical AND.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub protocol: Protocol,
    pub members: Vec<Member>,
}

impl Model {
    pub fn new(protocol: Protocol, rows: usize, cols: usize, arch: &ArchConfig, seed: u64) -> Result<Self> {
        let inputs = match protocol {
            Protocol::And => vec![Protocol::P1, Protocol::P2],
            p => vec![p],
        };
        let members = inputs
            .into_iter()
            .enumerate()
            .map(|(k, p)| {
                Ok(Member { inputs: p, net: Network::build(&p.tower_channels(), rows, cols, arch, derive_seed(seed, &[k as u64]))? })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Model { protocol, members })
    }

    /// Rebuilds a model from checkpointed networks, checking that each one
    /// accepts this protocol's inputs at `rows x cols`.
    pub fn from_networks(protocol: Protocol, nets: Vec<Network<f32>>, rows: usize, cols: usize) -> Result<Self> {
        let inputs = match protocol {
            Protocol::And => vec![Protocol::P1, Protocol::P2],
            p => vec![p],
        };
        if nets.len() != inputs.len() {
            return Err(Error::Checkpoint(format!("{protocol} needs {} networks, got {}", inputs.len(), nets.len())));
        }
        let members = inputs
            .into_iter()
            .zip(nets)
            .map(|(p, net)| {
                let want: Vec<Shape> = p.tower_channels().iter().map(|&c| Shape::new(c, rows, cols)).collect();
                if net.input_shapes() != want {
                    return Err(Error::Checkpoint(format!(
                        "network inputs {:?} do not fit {p} at {rows}x{cols}",
                        net.input_shapes()
                    )));
                }
                Ok(Member { inputs: p, net })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Model { protocol, members })
    }

    /// Eval-mode probabilities of each member.
    pub fn member_probabilities(&self, src: SampleSource, samples: &[usize], eval_batch: usize) -> Result<Vec<Vec<f32>>> {
        self.members
            .iter()
            .map(|m| {
                let mut q = Vec::with_capacity(samples.len());
                for chunk in samples.chunks(eval_batch.max(1)) {
                    q.extend(m.net.predict(&src.batch(chunk, m.inputs), chunk.len())?);
                }
                Ok(q)
            })
            .collect()
    }

    pub fn predict(&self, src: SampleSource, samples: &[usize], eval_batch: usize) -> Result<Vec<bool>> {
        let probs = self.member_probabilities(src, samples, eval_batch)?;
        let decisions: Vec<Vec<bool>> = probs.iter().map(|q| predict_labels(q)).collect();
        Ok(and_combine(&decisions))
    }
}

/// Strict threshold: `q > 0.5` is positive.
pub fn predict_labels(q: &[f32]) -> Vec<bool> {
    q.iter().map(|&v| v > 0.5).collect()
}

pub fn and_combine(decisions: &[Vec<bool>]) -> Vec<bool> {
    let n = decisions.first().map_or(0, |d| d.len());
    (0..n).map(|i| decisions.iter().all(|d| d[i])).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub eval_batch: usize,
    pub arch: ArchConfig,
    pub optimizer: AmsGradConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { batch_size: 64, eval_batch: 512, arch: ArchConfig::desk(), optimizer: AmsGradConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub train: ConfusionCounts,
    pub test: ConfusionCounts,
}

impl EpochRecord {
    pub fn test_mcc(&self) -> f64 {
        super::metrics::mcc(&self.test)
    }
}

/// Labels of one level and the sample sets of one trial.
pub struct TrainJob<'a> {
    pub source: SampleSource<'a>,
    pub labels: &'a [bool],
    /// Undersampled training samples.
    pub train: &'a [usize],
    pub test: &'a [usize],
    pub test_years: &'a [usize],
}

impl TrainJob<'_> {
    fn targets(&self, samples: &[usize]) -> Vec<bool> {
        samples.iter().map(|&s| self.labels[s]).collect()
    }

    pub fn evaluate(&self, model: &Model, samples: &[usize], eval_batch: usize) -> Result<ConfusionCounts> {
        let pred = model.predict(self.source, samples, eval_batch)?;
        Ok(ConfusionCounts::from_predictions(&pred, &self.targets(samples)))
    }
}

/// Trains every member for `epochs` epochs with fresh optimizers, recording
/// train and test counts after each epoch. Batches are drawn in a seeded
/// shuffled order and audited against the test years.
pub fn train_model(model: &mut Model, job: &TrainJob, epochs: usize, cfg: &TrainConfig, seed: u64) -> Result<Vec<EpochRecord>> {
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    if job.test.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    let n_years = job.source.store.n_years;
    let mut is_test_year = vec![false; n_years];
    for &y in job.test_years {
        *is_test_year
            .get_mut(y)
            .ok_or_else(|| Error::Bounds(format!("test year {y} outside {n_years} stored years")))? = true;
    }
    let mut optimizers: Vec<AmsGrad> = model.members.iter().map(|_| AmsGrad::new(cfg.optimizer)).collect();
    let mut records = Vec::with_capacity(epochs);
    for epoch in 1..=epochs {
        let mut loss_sum = 0.0;
        let mut loss_n = 0usize;
        for (k, (member, opt)) in model.members.iter_mut().zip(&mut optimizers).enumerate() {
            let mut order = job.train.to_vec();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[epoch as u64, k as u64])));
            for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
                if let Some(&s) = chunk.iter().find(|&&s| is_test_year[job.source.year_of(s)]) {
                    return Err(Error::Leakage { year: job.source.year_of(s) });
                }
                let inputs = job.source.batch(chunk, member.inputs);
                let targets: Vec<f32> = chunk.iter().map(|&s| if job.labels[s] { 1.0 } else { 0.0 }).collect();
                let dropout_seed = derive_seed(seed, &[epoch as u64, k as u64, b as u64, 0xd0]);
                let cache = member.net.forward(&inputs, chunk.len(), Mode::Train, dropout_seed)?;
                member.net.update_running_stats(&cache)?;
                let (grads, loss) = member.net.backward(&cache, &targets)?;
                opt.step(&mut member.net.tensors_mut(), &grads.0)?;
                loss_sum += loss * chunk.len() as f64;
                loss_n += chunk.len();
            }
            member.net.epoch += 1;
        }
        let train = job.evaluate(model, job.train, cfg.eval_batch)?;
        let test = job.evaluate(model, job.test, cfg.eval_batch)?;
        log::debug!(
            "epoch {epoch}: loss {:.4}, train MCC {:.3}, test MCC {:.3}",
            loss_sum / loss_n.max(1) as f64,
            score(&train)?.mcc,
            score(&test)?.mcc
        );
        records.push(EpochRecord { epoch, train_loss: loss_sum / loss_n.max(1) as f64, train, test });
    }
    Ok(records)
}
