//! Plain-text `key = value` experiment configuration.
//!
//! Values resolve in three layers: built-in defaults, then the config file,
//! then command-line overrides. The `scale` key is applied before any other
//! key so that it only replaces defaults, never explicit settings.

use std::fmt;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features::Protocol;
use crate::grid::{AreaWeighting, GridSpec, Region, SECONDS_PER_DAY};
use crate::labeling::HeatwaveConfig;
use crate::nn::ArchConfig;
use crate::pipeline::{ExperimentConfig, TrainConfig};
use crate::synth::{BoxSpec, SynthConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    Desk,
    Full,
}

impl Scale {
    fn name(self) -> &'static str {
        match self {
            Scale::Desk => "desk",
            Scale::Full => "full",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub scale: Scale,
    pub synth: SynthConfig,
    pub n_years: usize,
    pub d_days: usize,
    pub levels: Vec<f64>,
    pub predictor_lat_min: f64,
    pub spectral_rows: usize,
    pub spectral_cols: usize,
    /// Lead times swept by `sweep`.
    pub tau_list: Vec<usize>,
    pub experiment: ExperimentConfig,
}

/// One violated constraint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigIssue {
    pub key: String,
    pub value: String,
    pub constraint: String,
}

impl fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} = {:?}: {}", self.key, self.value, self.constraint)
    }
}

fn list<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn parse_list<T: std::str::FromStr>(s: &str) -> std::result::Result<Vec<T>, String> {
    s.split(',')
        .map(str::trim)
        .filter(|x| !x.is_empty())
        .map(|x| x.parse().map_err(|_| format!("cannot parse list element {x:?}")))
        .collect()
}

fn parse_bool(s: &str) -> std::result::Result<bool, String> {
    match s.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err("expected true or false".into()),
    }
}

fn num<T: std::str::FromStr>(s: &str) -> std::result::Result<T, String> {
    s.parse().map_err(|_| format!("expected a {}", std::any::type_name::<T>()))
}

impl Default for Config {
    fn default() -> Self {
        Config::for_scale(Scale::Desk)
    }
}

impl Config {
    pub fn for_scale(scale: Scale) -> Self {
        let desk = Config {
            scale,
            synth: SynthConfig::default(),
            n_years: 100,
            d_days: 14,
            levels: vec![0.05, 0.025, 0.0125],
            predictor_lat_min: 30.0,
            spectral_rows: 16,
            spectral_cols: 16,
            tau_list: vec![0, 5, 10, 15, 20],
            experiment: ExperimentConfig::default(),
        };
        match scale {
            Scale::Desk => desk,
            Scale::Full => {
                let mut c = desk;
                c.synth.spec = GridSpec::full_scale();
                c.synth.target = BoxSpec { lat_lo: 42.0, lat_hi: 52.0, col_lo: 0, col_hi: 4 };
                c.n_years = 1000;
                c.spectral_rows = 64;
                c.spectral_cols = 64;
                c.experiment.n_train_years = 900;
                c.experiment.n_test_years = 100;
                c.experiment.n_trials = 40;
                c.experiment.train = TrainConfig { batch_size: 1000, arch: ArchConfig::full_scale(), ..TrainConfig::default() };
                c
            }
        }
    }

    /// Every key with its current value, in canonical order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let s = &self.synth;
        let e = &self.experiment;
        let a = &e.train.arch;
        let o = &e.train.optimizer;
        vec![
            ("scale", self.scale.name().into()),
            ("synth_seed", s.seed.to_string()),
            ("n_years", self.n_years.to_string()),
            ("n_lat", s.spec.n_lat.to_string()),
            ("n_lon", s.spec.n_lon.to_string()),
            ("lat_min", s.spec.lat_min_deg.to_string()),
            ("lat_max", s.spec.lat_max_deg.to_string()),
            ("samples_per_day", s.spec.samples_per_day.to_string()),
            ("days_per_season", s.spec.days_per_season.to_string()),
            ("correlation_days", s.correlation_days.to_string()),
            ("coupling_strength", s.coupling_strength.to_string()),
            ("coupling_lead_days", s.coupling_lead_days.to_string()),
            ("noise_sigma", s.noise_sigma.to_string()),
            ("spatial_corr_cells", s.spatial_corr_cells.to_string()),
            ("zg_meters_per_kelvin", s.zg_meters_per_kelvin.to_string()),
            ("max_tau_days", s.max_tau_days.to_string()),
            ("trail_days", s.trail_days.to_string()),
            ("target_lat_lo", s.target.lat_lo.to_string()),
            ("target_lat_hi", s.target.lat_hi.to_string()),
            ("target_col_lo", s.target.col_lo.to_string()),
            ("target_col_hi", s.target.col_hi.to_string()),
            (
                "weighting",
                match s.weighting {
                    AreaWeighting::CosLatitude => "cos_latitude",
                    AreaWeighting::Uniform => "uniform",
                }
                .into(),
            ),
            ("d_days", self.d_days.to_string()),
            ("levels", list(&self.levels)),
            ("predictor_lat_min", self.predictor_lat_min.to_string()),
            ("spectral_rows", self.spectral_rows.to_string()),
            ("spectral_cols", self.spectral_cols.to_string()),
            ("protocol", e.protocol.name().into()),
            ("tau", e.tau_days.to_string()),
            ("tau_list", list(&self.tau_list)),
            ("conv_channels", a.conv_channels.to_string()),
            ("kernel_early", a.kernel_early.to_string()),
            ("kernel_late", a.kernel_late.to_string()),
            ("dense_hidden", a.dense_hidden.to_string()),
            ("dropout_rate", a.dropout_rate.to_string()),
            ("learning_rate", o.learning_rate.to_string()),
            ("beta1", o.beta1.to_string()),
            ("beta2", o.beta2.to_string()),
            ("epsilon", o.epsilon.to_string()),
            ("batch_size", e.train.batch_size.to_string()),
            ("eval_batch", e.train.eval_batch.to_string()),
            ("epochs_first", e.epochs_first.to_string()),
            ("epochs_transfer", e.epochs_transfer.to_string()),
            ("transfer", e.transfer.to_string()),
            ("imbalance_ratio", e.imbalance_ratio.map_or("none".into(), |r| r.to_string())),
            ("strict_undersample", e.strict_undersample.to_string()),
            ("n_train_years", e.n_train_years.to_string()),
            ("n_test_years", e.n_test_years.to_string()),
            ("proportion_tolerance", e.proportion_tolerance.to_string()),
            ("n_trials", e.n_trials.to_string()),
            ("trial_levels", list(&e.levels)),
            ("trial_seed", e.seed.to_string()),
            ("vary_seeds", e.vary_seeds.to_string()),
            ("workers", e.workers.to_string()),
        ]
    }

    pub fn keys() -> Vec<&'static str> {
        Config::default().entries().into_iter().map(|(k, _)| k).collect()
    }

    /// Sets one key; the error describes the expected value.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let v = value.trim();
        let s = &mut self.synth;
        let e = &mut self.experiment;
        match key {
            "scale" => {
                let scale = match v.to_ascii_lowercase().as_str() {
                    "desk" => Scale::Desk,
                    "full" => Scale::Full,
                    _ => return Err("expected desk or full".into()),
                };
                *self = Config::for_scale(scale);
            }
            "synth_seed" => s.seed = num(v)?,
            "n_years" => self.n_years = num(v)?,
            "n_lat" => s.spec.n_lat = num(v)?,
            "n_lon" => s.spec.n_lon = num(v)?,
            "lat_min" => s.spec.lat_min_deg = num(v)?,
            "lat_max" => s.spec.lat_max_deg = num(v)?,
            "samples_per_day" => {
                s.spec.samples_per_day = num(v)?;
                if s.spec.samples_per_day > 0 {
                    s.spec.seconds_per_sample = SECONDS_PER_DAY / s.spec.samples_per_day as u32;
                }
            }
            "days_per_season" => s.spec.days_per_season = num(v)?,
            "correlation_days" => s.correlation_days = num(v)?,
            "coupling_strength" => s.coupling_strength = num(v)?,
            "coupling_lead_days" => s.coupling_lead_days = num(v)?,
            "noise_sigma" => s.noise_sigma = num(v)?,
            "spatial_corr_cells" => s.spatial_corr_cells = num(v)?,
            "zg_meters_per_kelvin" => s.zg_meters_per_kelvin = num(v)?,
            "max_tau_days" => s.max_tau_days = num(v)?,
            "trail_days" => s.trail_days = num(v)?,
            "target_lat_lo" => s.target.lat_lo = num(v)?,
            "target_lat_hi" => s.target.lat_hi = num(v)?,
            "target_col_lo" => s.target.col_lo = num(v)?,
            "target_col_hi" => s.target.col_hi = num(v)?,
            "weighting" => {
                s.weighting = match v.to_ascii_lowercase().as_str() {
                    "cos_latitude" => AreaWeighting::CosLatitude,
                    "uniform" => AreaWeighting::Uniform,
                    _ => return Err("expected cos_latitude or uniform".into()),
                }
            }
            "d_days" => self.d_days = num(v)?,
            "levels" => self.levels = parse_list(v)?,
            "predictor_lat_min" => self.predictor_lat_min = num(v)?,
            "spectral_rows" => self.spectral_rows = num(v)?,
            "spectral_cols" => self.spectral_cols = num(v)?,
            "protocol" => e.protocol = Protocol::parse(v).map_err(|_| "expected P1, P2, P3, P4 or AND".to_string())?,
            "tau" => e.tau_days = num(v)?,
            "tau_list" => self.tau_list = parse_list(v)?,
            "conv_channels" => e.train.arch.conv_channels = num(v)?,
            "kernel_early" => e.train.arch.kernel_early = num(v)?,
            "kernel_late" => e.train.arch.kernel_late = num(v)?,
            "dense_hidden" => e.train.arch.dense_hidden = num(v)?,
            "dropout_rate" => e.train.arch.dropout_rate = num(v)?,
            "learning_rate" => e.train.optimizer.learning_rate = num(v)?,
            "beta1" => e.train.optimizer.beta1 = num(v)?,
            "beta2" => e.train.optimizer.beta2 = num(v)?,
            "epsilon" => e.train.optimizer.epsilon = num(v)?,
            "batch_size" => e.train.batch_size = num(v)?,
            "eval_batch" => e.train.eval_batch = num(v)?,
            "epochs_first" => e.epochs_first = num(v)?,
            "epochs_transfer" => e.epochs_transfer = num(v)?,
            "transfer" => e.transfer = parse_bool(v)?,
            "imbalance_ratio" => {
                e.imbalance_ratio = if v.eq_ignore_ascii_case("none") { None } else { Some(num(v)?) }
            }
            "strict_undersample" => e.strict_undersample = parse_bool(v)?,
            "n_train_years" => e.n_train_years = num(v)?,
            "n_test_years" => e.n_test_years = num(v)?,
            "proportion_tolerance" => e.proportion_tolerance = num(v)?,
            "n_trials" => e.n_trials = num(v)?,
            "trial_levels" => e.levels = parse_list(v)?,
            "trial_seed" => e.seed = num(v)?,
            "vary_seeds" => e.vary_seeds = parse_bool(v)?,
            "workers" => e.workers = num(v)?,
            _ => return Err(format!("unknown key; valid keys: {}", Config::keys().join(", "))),
        }
        Ok(())
    }

    /// Range and consistency checks, all violations at once.
    pub fn issues(&self) -> Vec<ConfigIssue> {
        let mut out = Vec::new();
        let values: std::collections::HashMap<_, _> = self.entries().into_iter().collect();
        let mut check = |ok: bool, key: &str, constraint: &str| {
            if !ok {
                out.push(ConfigIssue { key: key.into(), value: values[key].clone(), constraint: constraint.into() });
            }
        };
        let s = &self.synth;
        let e = &self.experiment;
        let a = &e.train.arch;
        let o = &e.train.optimizer;
        check(s.spec.n_lat >= 2, "n_lat", "must be at least 2");
        check(s.spec.n_lon >= 1, "n_lon", "must be at least 1");
        check(
            (-90.0..=90.0).contains(&s.spec.lat_min_deg) && s.spec.lat_min_deg < s.spec.lat_max_deg,
            "lat_min",
            "must lie in [-90, 90] and below lat_max",
        );
        check((-90.0..=90.0).contains(&s.spec.lat_max_deg), "lat_max", "must lie in [-90, 90]");
        check(
            s.spec.samples_per_day > 0 && SECONDS_PER_DAY as usize % s.spec.samples_per_day == 0,
            "samples_per_day",
            "must divide 86400",
        );
        check(s.spec.days_per_season >= 1, "days_per_season", "must be at least 1");
        check(s.correlation_days > 0.0, "correlation_days", "must be > 0");
        check((0.0..=1.0).contains(&s.coupling_strength), "coupling_strength", "must lie in [0, 1]");
        check(s.coupling_lead_days >= 0.0, "coupling_lead_days", "must be >= 0");
        check(s.noise_sigma > 0.0, "noise_sigma", "must be > 0");
        check(s.spatial_corr_cells > 0.0, "spatial_corr_cells", "must be > 0");
        check(s.zg_meters_per_kelvin.is_finite(), "zg_meters_per_kelvin", "must be finite");
        check(s.trail_days >= self.d_days, "trail_days", "must be at least d_days");
        check(s.target.lat_lo < s.target.lat_hi, "target_lat_lo", "must be below target_lat_hi");
        check(
            s.target.col_lo < s.target.col_hi && s.target.col_hi <= s.spec.n_lon,
            "target_col_hi",
            "must exceed target_col_lo and not exceed n_lon",
        );
        check(self.n_years >= 2, "n_years", "must be at least 2");
        check(self.d_days >= 1, "d_days", "must be at least 1");
        check(
            !self.levels.is_empty()
                && self.levels.iter().all(|&p| p > 0.0 && p < 1.0)
                && self.levels.windows(2).all(|w| w[1] < w[0]),
            "levels",
            "must be strictly decreasing fractions in (0, 1)",
        );
        check(self.spectral_rows >= 1, "spectral_rows", "must be at least 1");
        check(self.spectral_cols >= 1, "spectral_cols", "must be at least 1");
        check(e.tau_days <= s.max_tau_days, "tau", "must lie in [0, max_tau_days]");
        check(
            !self.tau_list.is_empty() && self.tau_list.iter().all(|&t| t <= s.max_tau_days),
            "tau_list",
            "must be non-empty with every lead in [0, max_tau_days]",
        );
        check(a.conv_channels >= 1, "conv_channels", "must be at least 1");
        check(a.kernel_early >= 1, "kernel_early", "must be at least 1");
        check(a.kernel_late >= 1, "kernel_late", "must be at least 1");
        check(a.dense_hidden >= 1, "dense_hidden", "must be at least 1");
        check((0.0..1.0).contains(&a.dropout_rate), "dropout_rate", "must lie in [0, 1)");
        check(o.learning_rate > 0.0 && o.learning_rate.is_finite(), "learning_rate", "must be > 0");
        check((0.0..1.0).contains(&o.beta1), "beta1", "must lie in [0, 1)");
        check((0.0..1.0).contains(&o.beta2), "beta2", "must lie in [0, 1)");
        check(o.epsilon > 0.0, "epsilon", "must be > 0");
        check(e.train.batch_size >= 1, "batch_size", "must be at least 1");
        check(e.train.eval_batch >= 1, "eval_batch", "must be at least 1");
        check(e.imbalance_ratio.is_none_or(|r| r > 0.0 && r.is_finite()), "imbalance_ratio", "must be > 0 or none");
        check(
            e.n_train_years >= 1 && e.n_test_years >= 1 && e.n_train_years + e.n_test_years <= self.n_years,
            "n_train_years",
            "train and test years must be positive and fit within n_years",
        );
        check(e.proportion_tolerance >= 0.0, "proportion_tolerance", "must be >= 0");
        check(e.n_trials >= 1, "n_trials", "must be at least 1");
        check(
            !e.levels.is_empty()
                && e.levels.iter().all(|&l| l < self.levels.len())
                && e.levels.windows(2).all(|w| w[1] > w[0]),
            "trial_levels",
            "must be increasing indices into levels",
        );
        check(e.workers >= 1, "workers", "must be at least 1");
        if let Some(r) = e.imbalance_ratio {
            for &p in &self.levels {
                if crate::pipeline::imbalance_rate(Some(r), p) <= 0.0 {
                    check(false, "imbalance_ratio", "gives a non-positive undersampling rate");
                }
            }
        }
        out
    }

    /// Applies `pairs` in order over the defaults, `scale` first.
    pub fn resolve(pairs: &[(String, String)]) -> std::result::Result<Config, Vec<ConfigIssue>> {
        let mut cfg = Config::default();
        let mut issues = Vec::new();
        let (scales, rest): (Vec<_>, Vec<_>) = pairs.iter().partition(|(k, _)| k == "scale");
        for (k, v) in scales.into_iter().chain(rest) {
            if let Err(constraint) = cfg.set(k, v) {
                issues.push(ConfigIssue { key: k.clone(), value: v.clone(), constraint });
            }
        }
        issues.extend(cfg.issues());
        if issues.is_empty() {
            Ok(cfg)
        } else {
            Err(issues)
        }
    }

    /// Config from file text followed by `KEY=VALUE` overrides.
    pub fn load(text: &str, overrides: &[String]) -> std::result::Result<Config, Vec<ConfigIssue>> {
        let mut pairs = Vec::new();
        let mut issues = Vec::new();
        for (n, line) in text.lines().enumerate() {
            match parse_line(line) {
                Ok(Some(p)) => pairs.push(p),
                Ok(None) => {}
                Err(msg) => issues.push(ConfigIssue { key: format!("line {}", n + 1), value: line.into(), constraint: msg }),
            }
        }
        for o in overrides {
            match parse_line(o) {
                Ok(Some(p)) => pairs.push(p),
                _ => issues.push(ConfigIssue { key: "--set".into(), value: o.clone(), constraint: "expected KEY=VALUE".into() }),
            }
        }
        match Config::resolve(&pairs) {
            Ok(cfg) if issues.is_empty() => Ok(cfg),
            Ok(_) => Err(issues),
            Err(more) => {
                issues.extend(more);
                Err(issues)
            }
        }
    }

    pub fn load_file(path: Option<&Path>, overrides: &[String]) -> std::result::Result<Config, Vec<ConfigIssue>> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| {
                vec![ConfigIssue { key: "--config".into(), value: p.display().to_string(), constraint: e.to_string() }]
            })?,
            None => String::new(),
        };
        Config::load(&text, overrides)
    }

    /// `key = value` lines in canonical order; parses back to `self`.
    pub fn normalized(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Single-line form for CSV comments.
    pub fn inline(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(";")
    }

    pub fn from_inline(s: &str) -> Result<Config> {
        let text = s.split(';').collect::<Vec<_>>().join("\n");
        Config::load(&text, &[]).map_err(|issues| Error::Format(issues.iter().map(|i| i.to_string()).collect::<Vec<_>>().join("; ")))
    }

    /// SHA-256 of the normalized form, hex.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.normalized().as_bytes()))
    }

    pub fn heatwave(&self) -> Result<HeatwaveConfig> {
        HeatwaveConfig::new(self.synth.target_region()?, self.d_days, self.levels.clone())
    }

    pub fn predictor(&self) -> Result<Region> {
        Region::above_latitude(&self.synth.spec, self.predictor_lat_min, self.synth.weighting)
    }
}

fn parse_line(line: &str) -> std::result::Result<Option<(String, String)>, String> {
    let line = line.split('#').next().unwrap_or("").trim();
    if line.is_empty() {
        return Ok(None);
    }
    let (k, v) = line.split_once('=').ok_or("expected KEY = VALUE")?;
    let k = k.trim();
    if k.is_empty() {
        return Err("empty key".into());
    }
    Ok(Some((k.to_string(), v.trim().to_string())))
}
