//! Synthetic surface-temperature / geopotential archives with a planted,
//! lagged precursor.
//!
//! Per year, a latent unit-variance AR(1) scalar `P` is imprinted on `ZG` as a
//! fixed Gaussian bump upstream of the target box, and the target-box mean
//! temperature anomaly is
//!
//! ```text
//! c * P(t - lead) + (1 - c) * R(t) + noise_sigma * sum_i w_i e_i(t)
//! ```
//!
//! with `R` an independent unit-variance AR(1) and `e_i` independent per-cell
//! AR(1) noise. All processes share the e-folding time `correlation_days`, so
//! the law of the `D`-day mean `Y(t)` given `P(t - tau)` is Gaussian with a
//! closed form (see [`OracleModel`]).

use std::f64::consts::PI;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::archive::{read_f32s, write_f32s, FieldArchive, Header, ORACLE_VARIABLE};
use crate::error::{Error, Result};
use crate::grid::{AreaWeighting, GridSpec, Region};

pub const TS: &str = "TS";
pub const ZG: &str = "ZG";

const STREAM_TS: u64 = 0;
const STREAM_ZG: u64 = 1;
const STREAM_LATENT: u64 = 2;

/// Latitude/column box used for the target (heatwave) region.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxSpec {
    pub lat_lo: f64,
    pub lat_hi: f64,
    pub col_lo: usize,
    pub col_hi: usize,
}

impl BoxSpec {
    pub fn region(&self, spec: &GridSpec, weighting: AreaWeighting) -> Result<Region> {
        Region::lat_lon_box(spec, self.lat_lo, self.lat_hi, self.col_lo..self.col_hi, weighting)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub spec: GridSpec,
    pub seed: u64,
    pub correlation_days: f64,
    pub coupling_strength: f64,
    pub coupling_lead_days: f64,
    /// Per-cell noise standard deviation, Kelvin.
    pub noise_sigma: f64,
    pub spatial_corr_cells: f64,
    /// Geopotential metres per unit of latent/noise amplitude.
    pub zg_meters_per_kelvin: f64,
    /// Largest lead time inputs will be drawn from.
    pub max_tau_days: usize,
    /// Days stored past the season end (must cover the heatwave duration).
    pub trail_days: usize,
    pub target: BoxSpec,
    pub weighting: AreaWeighting,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            spec: GridSpec::desk(),
            seed: 2021,
            correlation_days: 4.0,
            coupling_strength: 0.6,
            coupling_lead_days: 10.0,
            noise_sigma: 1.0,
            spatial_corr_cells: 3.0,
            zg_meters_per_kelvin: 30.0,
            max_tau_days: 20,
            trail_days: 14,
            target: BoxSpec { lat_lo: 42.0, lat_hi: 52.0, col_lo: 14, col_hi: 18 },
            weighting: AreaWeighting::CosLatitude,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if !(self.correlation_days > 0.0) {
            return Err(Error::Config("correlation_days must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.coupling_strength) {
            return Err(Error::Config("coupling_strength must lie in [0, 1]".into()));
        }
        if !(self.noise_sigma > 0.0) {
            return Err(Error::Config("noise_sigma must be > 0".into()));
        }
        if !(self.coupling_lead_days >= 0.0) {
            return Err(Error::Config("coupling_lead_days must be >= 0".into()));
        }
        if !(self.spatial_corr_cells > 0.0) {
            return Err(Error::Config("spatial_corr_cells must be > 0".into()));
        }
        Ok(())
    }

    /// Per-sample lag-one autocorrelation of every red-noise process.
    pub fn rho(&self) -> f64 {
        (-1.0 / (self.correlation_days * self.spec.samples_per_day as f64)).exp()
    }

    pub fn lead_samples(&self) -> usize {
        (self.coupling_lead_days * self.spec.samples_per_day as f64).round() as usize
    }

    /// Days stored before the season start.
    pub fn lead_days(&self) -> usize {
        self.coupling_lead_days.ceil() as usize + self.max_tau_days
    }

    pub fn times_per_year(&self) -> usize {
        (self.lead_days() + self.spec.days_per_season + self.trail_days) * self.spec.samples_per_day
    }

    pub fn target_region(&self) -> Result<Region> {
        self.target.region(&self.spec, self.weighting)
    }
}

/// Latent precursor values for every stored `(year, t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleRecords {
    pub n_years: usize,
    pub times_per_year: usize,
    pub samples_per_day: usize,
    pub days_per_season: usize,
    pub lead_days: usize,
    pub trail_days: usize,
    /// `[year][t]`
    pub values: Vec<f32>,
}

impl OracleRecords {
    pub fn get(&self, year: usize, t: usize) -> f64 {
        self.values[year * self.times_per_year + t] as f64
    }

    fn header(&self) -> Header {
        Header {
            n_lat: 1,
            n_lon: 1,
            samples_per_day: self.samples_per_day as u32,
            days_per_season: self.days_per_season as u32,
            n_years: self.n_years as u32,
            variables: vec![ORACLE_VARIABLE.to_string()],
            lead_days: self.lead_days as u32,
            trail_days: self.trail_days as u32,
            lat_min_deg: 0.0,
            lat_max_deg: 0.0,
        }
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        self.header().write_to(w)?;
        write_f32s(w, &self.values)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let h = Header::read_from(r)?;
        if h.variables != [ORACLE_VARIABLE] || h.n_lat != 1 || h.n_lon != 1 {
            return Err(Error::Format("not an oracle sidecar file".into()));
        }
        let values = read_f32s(r, h.payload_len())?;
        Ok(OracleRecords {
            n_years: h.n_years as usize,
            times_per_year: h.times_per_year(),
            samples_per_day: h.samples_per_day as usize,
            days_per_season: h.days_per_season as usize,
            lead_days: h.lead_days as usize,
            trail_days: h.trail_days as usize,
            values,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(std::fs::File::open(path)?))
    }
}

/// One generated year in double precision, before archiving.
#[derive(Debug, Clone)]
pub struct GeneratedYear {
    /// `[t][cell]`
    pub ts: Vec<f64>,
    pub zg: Vec<f64>,
    /// Latent precursor on `[0, times_per_year)`.
    pub precursor: Vec<f64>,
    /// Deterministic seasonal state of `TS`, `[t][cell]`.
    pub ts_mean: Vec<f64>,
}

/// Deterministic generator; year `y` is a pure function of `(config, y)`.
pub struct Generator {
    cfg: SynthConfig,
    target: Region,
    ts_pattern: Vec<f64>,
    zg_pattern: Vec<f64>,
}

fn rng_for(seed: u64, stream: u64, year: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((stream << 32) | year as u64);
    rng
}

fn cyclic_dist(a: usize, b: usize, n: usize) -> f64 {
    let d = a.abs_diff(b);
    d.min(n - d) as f64
}

impl Generator {
    pub fn new(cfg: SynthConfig) -> Result<Self> {
        cfg.validate()?;
        let spec = cfg.spec;
        let target = cfg.target_region()?;
        let (r0, r1, c0, c1) = target.bounding_box();
        let w = cfg.spatial_corr_cells;

        let mut ts_pattern = vec![0.0; spec.n_cells()];
        let mut zg_pattern = vec![0.0; spec.n_cells()];
        let centre_row = (r0 + r1 - 1) as f64 / 2.0;
        let centre_col = (c0 + c1 - 1) / 2;
        let upstream = (centre_col + spec.n_lon - ((2.0 * w).round() as usize % spec.n_lon)) % spec.n_lon;
        for row in 0..spec.n_lat {
            for col in 0..spec.n_lon {
                let i = spec.index(row, col);
                ts_pattern[i] = if target.mask[i] {
                    1.0
                } else {
                    let dr = if row < r0 { r0 - row } else { row.saturating_sub(r1 - 1) } as f64;
                    let dc = if (c0..c1).contains(&col) {
                        0.0
                    } else {
                        cyclic_dist(col, c0, spec.n_lon).min(cyclic_dist(col, c1 - 1, spec.n_lon))
                    };
                    (-(dr * dr + dc * dc) / (2.0 * w * w)).exp()
                };
                let dr = row as f64 - centre_row;
                let dc = cyclic_dist(col, upstream, spec.n_lon);
                zg_pattern[i] = (-(dr * dr + dc * dc) / (2.0 * w * w)).exp();
            }
        }
        Ok(Generator { cfg, target, ts_pattern, zg_pattern })
    }

    pub fn config(&self) -> &SynthConfig {
        &self.cfg
    }

    pub fn target(&self) -> &Region {
        &self.target
    }

    fn day_of_year(&self, t: usize) -> f64 {
        // Season begins on day 152 (1 June).
        152.0 - self.cfg.lead_days() as f64 + t as f64 / self.cfg.spec.samples_per_day as f64
    }

    fn ts_mean(&self, row: usize, t: usize) -> f64 {
        let lat = self.cfg.spec.latitude(row).to_radians();
        let base = 302.0 - 45.0 * lat.sin().powi(2);
        let season = 8.0 * lat.sin() * (2.0 * PI * (self.day_of_year(t) - 110.0) / 365.0).sin();
        base + season
    }

    fn zg_mean(&self, row: usize, t: usize) -> f64 {
        let lat = self.cfg.spec.latitude(row).to_radians();
        let base = 5900.0 - 500.0 * lat.sin().powi(2);
        let season = 80.0 * (2.0 * PI * (self.day_of_year(t) - 110.0) / 365.0).sin();
        base + season
    }

    fn ar1(rng: &mut ChaCha8Rng, rho: f64, n: usize) -> Vec<f64> {
        let innov = (1.0 - rho * rho).sqrt();
        let mut out = Vec::with_capacity(n);
        let mut x: f64 = StandardNormal.sample(rng);
        for _ in 0..n {
            out.push(x);
            let e: f64 = StandardNormal.sample(rng);
            x = rho * x + innov * e;
        }
        out
    }

    pub fn year(&self, year: usize) -> GeneratedYear {
        let cfg = &self.cfg;
        let spec = cfg.spec;
        let n_t = cfg.times_per_year();
        let n_cells = spec.n_cells();
        let rho = cfg.rho();
        let lead = cfg.lead_samples();
        let c = cfg.coupling_strength;

        let mut latent = rng_for(cfg.seed, STREAM_LATENT, year);
        // precursor on [-lead, n_t)
        let p_ext = Self::ar1(&mut latent, rho, n_t + lead);
        let red = Self::ar1(&mut latent, rho, n_t);
        let precursor = p_ext[lead..].to_vec();

        let innov = (1.0 - rho * rho).sqrt();
        let mut ts = vec![0.0; n_t * n_cells];
        let mut zg = vec![0.0; n_t * n_cells];
        let mut ts_mean = vec![0.0; n_t * n_cells];
        for (stream, out) in [(STREAM_TS, &mut ts), (STREAM_ZG, &mut zg)] {
            let mut rng = rng_for(cfg.seed, stream, year);
            let mut state: Vec<f64> = (0..n_cells).map(|_| StandardNormal.sample(&mut rng)).collect();
            for t in 0..n_t {
                let row = &mut out[t * n_cells..(t + 1) * n_cells];
                for (dst, s) in row.iter_mut().zip(state.iter_mut()) {
                    *dst = *s;
                    let e: f64 = StandardNormal.sample(&mut rng);
                    *s = rho * *s + innov * e;
                }
            }
        }

        for t in 0..n_t {
            let drive = c * p_ext[t] + (1.0 - c) * red[t];
            for r in 0..spec.n_lat {
                let tm = self.ts_mean(r, t);
                let zm = self.zg_mean(r, t);
                for col in 0..spec.n_lon {
                    let i = spec.index(r, col);
                    let k = t * n_cells + i;
                    ts_mean[k] = tm;
                    ts[k] = tm + self.ts_pattern[i] * drive + cfg.noise_sigma * ts[k];
                    zg[k] = zm
                        + cfg.zg_meters_per_kelvin
                            * (self.zg_pattern[i] * precursor[t] + cfg.noise_sigma * zg[k]);
                }
            }
        }
        GeneratedYear { ts, zg, precursor, ts_mean }
    }

    pub fn oracle_model(&self) -> OracleModel {
        OracleModel {
            coupling: self.cfg.coupling_strength,
            rho: self.cfg.rho(),
            lead_samples: self.cfg.lead_samples(),
            regional_noise_var: self.cfg.noise_sigma.powi(2) * self.target.sum_squared_weights(),
            samples_per_day: self.cfg.spec.samples_per_day,
        }
    }
}

/// Generates `n_years` of `TS`/`ZG` fields plus the latent precursor record.
pub fn generate(cfg: &SynthConfig, n_years: usize) -> Result<(FieldArchive, OracleRecords)> {
    if n_years < 2 {
        return Err(Error::InsufficientData(format!("need at least 2 years, got {n_years}")));
    }
    let gen = Generator::new(cfg.clone())?;
    let n_t = cfg.times_per_year();
    let per_year = n_t * cfg.spec.n_cells();
    let mut ts = vec![0.0f32; n_years * per_year];
    let mut zg = vec![0.0f32; n_years * per_year];
    let mut oracle = vec![0.0f32; n_years * n_t];
    ts.par_chunks_mut(per_year)
        .zip(zg.par_chunks_mut(per_year))
        .zip(oracle.par_chunks_mut(n_t))
        .enumerate()
        .for_each(|(year, ((ts, zg), p))| {
            let y = gen.year(year);
            ts.iter_mut().zip(&y.ts).for_each(|(d, s)| *d = *s as f32);
            zg.iter_mut().zip(&y.zg).for_each(|(d, s)| *d = *s as f32);
            p.iter_mut().zip(&y.precursor).for_each(|(d, s)| *d = *s as f32);
        });
    let archive = FieldArchive {
        spec: cfg.spec,
        n_years,
        lead_days: cfg.lead_days(),
        trail_days: cfg.trail_days,
        variables: vec![TS.into(), ZG.into()],
        data: vec![ts, zg],
    };
    let records = OracleRecords {
        n_years,
        times_per_year: n_t,
        samples_per_day: cfg.spec.samples_per_day,
        days_per_season: cfg.spec.days_per_season,
        lead_days: cfg.lead_days(),
        trail_days: cfg.trail_days,
        values: oracle,
    };
    Ok((archive, records))
}

/// Closed-form law of the `D`-day regional mean given the precursor at `t - tau`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleModel {
    pub coupling: f64,
    pub rho: f64,
    pub lead_samples: usize,
    /// `noise_sigma^2 * sum_i w_i^2` over the target region.
    pub regional_noise_var: f64,
    pub samples_per_day: usize,
}

impl OracleModel {
    /// Variance of the mean of `n` consecutive unit-variance AR(1) samples.
    pub fn window_mean_var(&self, n: usize) -> f64 {
        let nf = n as f64;
        let mut acc = nf;
        let mut rk = 1.0;
        for k in 1..n {
            rk *= self.rho;
            acc += 2.0 * (nf - k as f64) * rk;
        }
        acc / (nf * nf)
    }

    /// Unconditional variance of `Y`.
    pub fn y_var(&self, d_days: usize) -> f64 {
        let c = self.coupling;
        let n = d_days * self.samples_per_day;
        (c * c + (1.0 - c) * (1.0 - c) + self.regional_noise_var) * self.window_mean_var(n)
    }

    /// `Cov(Y(t), P(t - tau))` for lead `tau` in samples.
    pub fn covariance(&self, tau_samples: usize, d_days: usize) -> f64 {
        let n = d_days * self.samples_per_day;
        let s0 = -(tau_samples as i64);
        let lead = self.lead_samples as i64;
        let sum: f64 = (0..n as i64)
            .map(|u| self.rho.powi((u - lead - s0).unsigned_abs() as i32))
            .sum();
        self.coupling * sum / n as f64
    }

    /// Threshold whose unconditional exceedance probability is `p`.
    pub fn unconditional_threshold(&self, p: f64, d_days: usize) -> f64 {
        let sd = self.y_var(d_days).sqrt();
        Normal::new(0.0, sd).expect("positive sd").inverse_cdf(1.0 - p)
    }

    /// `P(Y > threshold | P(t - tau) = precursor)`.
    pub fn exceedance(&self, precursor: f64, tau_samples: usize, d_days: usize, threshold: f64) -> f64 {
        let k = self.covariance(tau_samples, d_days);
        let mean = k * precursor;
        let var = self.y_var(d_days) - k * k;
        if var <= 1e-24 {
            return if mean > threshold { 1.0 } else { 0.0 };
        }
        let z = Normal::new(mean, var.sqrt()).expect("positive sd");
        z.sf(threshold)
    }
}

/// Oracle probability that `Y(t)` exceeds `threshold` for label time `t`
/// (index within the stored year) and lead `tau_days`.
pub fn oracle_score(
    records: &OracleRecords,
    model: &OracleModel,
    year: usize,
    t: usize,
    tau_days: usize,
    d_days: usize,
    threshold: f64,
) -> Result<f64> {
    let spd = records.samples_per_day;
    let tau = tau_days * spd;
    if year >= records.n_years || t < tau || t + d_days * spd > records.times_per_year {
        return Err(Error::Bounds(format!(
            "oracle window [{}, {}) for year {year} outside records ({} years x {} samples)",
            t as i64 - tau as i64,
            t + d_days * spd,
            records.n_years,
            records.times_per_year
        )));
    }
    Ok(model.exceedance(records.get(year, t - tau), tau, d_days, threshold))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small_cfg() -> SynthConfig {
        SynthConfig {
            spec: GridSpec::new(8, 8, 20.0, 70.0, 2, 30).unwrap(),
            target: BoxSpec { lat_lo: 40.0, lat_hi: 50.0, col_lo: 4, col_hi: 6 },
            max_tau_days: 5,
            ..SynthConfig::default()
        }
    }

    fn regional_anomaly(gen: &Generator, y: &GeneratedYear) -> Vec<f64> {
        let n = gen.config().spec.n_cells();
        let anom: Vec<f64> = y.ts.iter().zip(&y.ts_mean).map(|(a, b)| a - b).collect();
        anom.chunks_exact(n).map(|c| gen.target().average(c)).collect()
    }

    fn corr(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn rejects_too_few_years_and_bad_config() {
        assert!(matches!(generate(&small_cfg(), 1), Err(Error::InsufficientData(_))));
        let bad = SynthConfig { coupling_strength: 1.5, ..small_cfg() };
        assert!(matches!(generate(&bad, 3), Err(Error::Config(_))));
    }

    #[test]
    fn deterministic_bytes() {
        let cfg = small_cfg();
        let (a, o) = generate(&cfg, 3).unwrap();
        let (b, p) = generate(&cfg, 3).unwrap();
        let (mut ba, mut bb) = (Vec::new(), Vec::new());
        a.write_to(&mut ba).unwrap();
        b.write_to(&mut bb).unwrap();
        assert_eq!(ba, bb);
        assert_eq!(o, p);
        let other = generate(&SynthConfig { seed: 9, ..cfg }, 3).unwrap().0;
        assert_ne!(a.data, other.data);
    }

    #[test]
    fn oracle_sidecar_roundtrip() {
        let (_, o) = generate(&small_cfg(), 2).unwrap();
        let mut buf = Vec::new();
        o.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"HCST");
        assert_eq!(OracleRecords::read_from(&mut buf.as_slice()).unwrap(), o);
    }

    #[test]
    fn deterministic_limit_tracks_lagged_precursor() {
        let cfg = SynthConfig { coupling_strength: 1.0, noise_sigma: 1e-12, ..small_cfg() };
        let gen = Generator::new(cfg).unwrap();
        let lead = gen.config().lead_samples();
        let y = gen.year(0);
        let reg = regional_anomaly(&gen, &y);
        for t in lead..reg.len() {
            assert!((reg[t] - y.precursor[t - lead]).abs() < 1e-6, "t = {t}");
        }
    }

    #[test]
    fn decoupled_precursor_is_uncorrelated() {
        let cfg = SynthConfig { coupling_strength: 0.0, ..small_cfg() };
        let gen = Generator::new(cfg).unwrap();
        let lead = gen.config().lead_samples();
        let (mut p, mut r) = (Vec::new(), Vec::new());
        for year in 0..40 {
            let y = gen.year(year);
            let reg = regional_anomaly(&gen, &y);
            // one pair per 10 days keeps samples nearly independent
            for t in (lead..reg.len()).step_by(20) {
                p.push(y.precursor[t - lead]);
                r.push(reg[t]);
            }
        }
        let rho = corr(&p, &r);
        assert!(rho.abs() < 3.0 / (p.len() as f64).sqrt(), "r = {rho}, n = {}", p.len());
    }

    #[test]
    fn regional_anomaly_lag_one_day_autocorrelation() {
        let gen = Generator::new(SynthConfig::default()).unwrap();
        let spd = gen.config().spec.samples_per_day;
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for year in 0..50 {
            let reg = regional_anomaly(&gen, &gen.year(year));
            for t in 0..reg.len() - spd {
                a.push(reg[t]);
                b.push(reg[t + spd]);
            }
        }
        let r = corr(&a, &b);
        assert!((r - (-0.25f64).exp()).abs() < 0.1, "lag-1 autocorrelation {r}");
    }

    #[test]
    fn yearly_means_are_stationary() {
        let gen = Generator::new(small_cfg()).unwrap();
        let n_years = 60;
        let means: Vec<f64> = (0..n_years)
            .map(|y| {
                let reg = regional_anomaly(&gen, &gen.year(y));
                reg.iter().sum::<f64>() / reg.len() as f64
            })
            .collect();
        let m = means.iter().sum::<f64>() / n_years as f64;
        let sd = (means.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n_years - 1) as f64).sqrt();
        assert!(m.abs() < 3.0 * sd / (n_years as f64).sqrt(), "mean {m} sd {sd}");
    }

    #[test]
    fn oracle_without_coupling_is_unconditional() {
        let cfg = SynthConfig { coupling_strength: 0.0, ..small_cfg() };
        let gen = Generator::new(cfg.clone()).unwrap();
        let model = gen.oracle_model();
        let (_, rec) = generate(&cfg, 2).unwrap();
        let a = model.unconditional_threshold(0.05, 14);
        let start = cfg.lead_days() * cfg.spec.samples_per_day;
        for t in (start..start + 40).step_by(7) {
            let s = oracle_score(&rec, &model, 1, t, 3, 14, a).unwrap();
            assert!((s - 0.05).abs() < 1e-9);
        }
    }

    #[test]
    fn oracle_limits_and_bounds() {
        let cfg = small_cfg();
        let model = Generator::new(cfg.clone()).unwrap().oracle_model();
        assert!(model.exceedance(1e6, 0, 14, 1.0) > 1.0 - 1e-12);
        assert!(model.exceedance(-1e6, 0, 14, 1.0) < 1e-12);
        let (_, rec) = generate(&cfg, 2).unwrap();
        let n_t = cfg.times_per_year();
        assert!(matches!(oracle_score(&rec, &model, 0, 2, 5, 14, 0.0), Err(Error::Bounds(_))));
        assert!(matches!(oracle_score(&rec, &model, 0, n_t - 3, 0, 14, 0.0), Err(Error::Bounds(_))));
        assert!(matches!(oracle_score(&rec, &model, 2, 40, 0, 14, 0.0), Err(Error::Bounds(_))));
    }

    /// Simulates Y given the precursor at `t - tau` by running the AR(1)
    /// processes outward from the conditioning point.
    fn monte_carlo_exceedance(
        model: &OracleModel,
        p0: f64,
        tau: usize,
        n: usize,
        threshold: f64,
        draws: usize,
        rng: &mut ChaCha8Rng,
    ) -> f64 {
        let rho = model.rho;
        let innov = (1.0 - rho * rho).sqrt();
        let lead = model.lead_samples as i64;
        // P is needed at indices u - lead for u in [0, n), relative to s0 = -tau
        let lo = -lead;
        let hi = n as i64 - 1 - lead;
        let s0 = -(tau as i64);
        let c = model.coupling;
        let noise_sd = model.regional_noise_var.sqrt();
        let mut hits = 0usize;
        let mut path = vec![0.0; (hi.max(s0) - lo.min(s0) + 1) as usize];
        let base = lo.min(s0);
        for _ in 0..draws {
            path[(s0 - base) as usize] = p0;
            for s in s0 + 1..=hi.max(s0) {
                let e: f64 = rng.sample(StandardNormal);
                path[(s - base) as usize] = rho * path[(s - 1 - base) as usize] + innov * e;
            }
            for s in (lo.min(s0)..s0).rev() {
                let e: f64 = rng.sample(StandardNormal);
                path[(s - base) as usize] = rho * path[(s + 1 - base) as usize] + innov * e;
            }
            let mut r: f64 = rng.sample(StandardNormal);
            let mut z: f64 = rng.sample(StandardNormal);
            let mut y = 0.0;
            for u in 0..n as i64 {
                y += c * path[(u - lead - base) as usize] + (1.0 - c) * r + noise_sd * z;
                let (e1, e2): (f64, f64) = (rng.sample(StandardNormal), rng.sample(StandardNormal));
                r = rho * r + innov * e1;
                z = rho * z + innov * e2;
            }
            if y / n as f64 > threshold {
                hits += 1;
            }
        }
        hits as f64 / draws as f64
    }

    #[test]
    fn oracle_matches_monte_carlo() {
        let cfg = SynthConfig::default();
        let gen = Generator::new(cfg.clone()).unwrap();
        let model = gen.oracle_model();
        let y = gen.year(3);
        let spd = cfg.spec.samples_per_day;
        let d = 14;
        let threshold = model.unconditional_threshold(0.05, d);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let start = cfg.lead_days() * spd;
        for (i, tau_days) in [0usize, 2, 5, 10, 20, 0, 3, 7, 12, 15].into_iter().enumerate() {
            let t = start + 17 * i;
            let tau = tau_days * spd;
            let p0 = y.precursor[t - tau];
            let exact = model.exceedance(p0, tau, d, threshold);
            let mc = monte_carlo_exceedance(&model, p0, tau, d * spd, threshold, 100_000, &mut rng);
            assert!((exact - mc).abs() < 0.02, "tau {tau_days}: exact {exact} mc {mc}");
        }
    }

    /// Within-year samples are strongly correlated, so 100 years leaves
    /// decile frequencies too noisy for a 0.05 band; 400 years does not.
    #[test]
    fn oracle_is_calibrated() {
        
        let cfg = SynthConfig { spec: GridSpec::new(8, 8, 20.0, 70.0, 2, 90).unwrap(), ..small_cfg() };
        let gen = Generator::new(cfg.clone()).unwrap();
        let model = gen.oracle_model();
        let spd = cfg.spec.samples_per_day;
        let d = 14;
        let n = d * spd;
        let tau = 2 * spd;
        let threshold = model.unconditional_threshold(0.2, d);
        let start = cfg.lead_days() * spd;
        let mut pairs = Vec::new();
        for year in 0..400 {
            let y = gen.year(year);
            let reg = regional_anomaly(&gen, &y);
            for t in (start..start + cfg.spec.season_samples()).step_by(spd) {
                let yv = reg[t..t + n].iter().sum::<f64>() / n as f64;
                let s = model.exceedance(y.precursor[t - tau], tau, d, threshold);
                pairs.push((s, yv > threshold));
            }
        }
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        for bin in pairs.chunks(pairs.len() / 10) {
            let mean_s = bin.iter().map(|p| p.0).sum::<f64>() / bin.len() as f64;
            let freq = bin.iter().filter(|p| p.1).count() as f64 / bin.len() as f64;
            assert!((mean_s - freq).abs() < 0.05, "bin mean {mean_s} vs freq {freq}");
        }
    }
}
