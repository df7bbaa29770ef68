//! Heatwave labels: the `D`-day regional-mean temperature anomaly `Y(t)`,
//! pooled empirical thresholds per exceedance level, and binary labels.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::archive::FieldArchive;
use crate::error::{Error, Result};
use crate::grid::{Climatology, Region};

#[derive(Debug, Clone)]
pub struct HeatwaveConfig {
    pub region: Region,
    pub d_days: usize,
    /// Exceedance fractions, strictly decreasing.
    pub levels: Vec<f64>,
}

impl HeatwaveConfig {
    pub fn new(region: Region, d_days: usize, levels: Vec<f64>) -> Result<Self> {
        let cfg = HeatwaveConfig { region, d_days, levels };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_days < 1 {
            return Err(Error::Config("heatwave duration must be at least one day".into()));
        }
        if self.levels.is_empty() || self.levels.iter().any(|&p| !(p > 0.0 && p < 1.0)) {
            return Err(Error::Config(format!("levels {:?} must lie in (0, 1)", self.levels)));
        }
        if self.levels.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Config(format!("levels {:?} must be strictly decreasing", self.levels)));
        }
        Ok(())
    }
}

/// Mean of the `d_days * samples_per_day` samples starting at `t`.
pub fn compute_y(series: &[f64], t: usize, d_days: usize, samples_per_day: usize) -> Result<f64> {
    let n = d_days * samples_per_day;
    if n == 0 || t + n > series.len() {
        return Err(Error::Bounds(format!(
            "window [{t}, {}) exceeds series of length {}",
            t + n,
            series.len()
        )));
    }
    Ok(series[t..t + n].iter().sum::<f64>() / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub level: f64,
    pub a_kelvin: f64,
    pub n_positive: usize,
    pub n_total: usize,
    /// Ties at the threshold left fewer than `floor(level * n)` exceedances.
    pub degenerate: bool,
}

/// Number of samples that must exceed the threshold at level `p`.
pub fn exceedance_count(p: f64, n: usize) -> usize {
    (p * n as f64 + 1e-9).floor() as usize
}

/// Returns `a` = the `(k+1)`-th largest value, `k = floor(p * N)`, so that
/// exactly `k` values satisfy `Y > a` when there are no ties at `a`.
pub fn empirical_threshold(values: &[f64], p: f64) -> Result<Threshold> {
    if values.is_empty() {
        return Err(Error::InsufficientData("no Y values".into()));
    }
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Config(format!("level {p} must lie in (0, 1)")));
    }
    let n = values.len();
    let k = exceedance_count(p, n);
    if k < 1 {
        return Err(Error::LevelTooExtreme { level: p, n });
    }
    let mut sorted = values.to_vec();
    sorted.sort_unstable_by(|a, b| b.total_cmp(a));
    let a = sorted[k];
    let n_positive = values.iter().filter(|&&y| y > a).count();
    Ok(Threshold { level: p, a_kelvin: a, n_positive, n_total: n, degenerate: n_positive != k })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelSet {
    pub n_years: usize,
    pub season_samples: usize,
    /// Archive sample index of the first in-season sample.
    pub season_start: usize,
    pub samples_per_day: usize,
    /// `[year][in-season t]`
    pub y: Vec<f64>,
    pub thresholds: Vec<Threshold>,
    /// Per level, `[year][in-season t]`.
    pub labels: Vec<Vec<bool>>,
}

impl LabelSet {
    /// Pools `y` (`[year][in-season t]`) and labels it at every level.
    pub fn from_y(
        y: Vec<f64>,
        n_years: usize,
        season_samples: usize,
        season_start: usize,
        samples_per_day: usize,
        levels: &[f64],
    ) -> Result<Self> {
        if y.len() != n_years * season_samples {
            return Err(Error::Dimension(format!(
                "{} Y values for {n_years} years x {season_samples} samples",
                y.len()
            )));
        }
        let thresholds = levels
            .iter()
            .map(|&p| empirical_threshold(&y, p))
            .collect::<Result<Vec<_>>>()?;
        for t in thresholds.iter().filter(|t| t.degenerate) {
            log::warn!(
                "degenerate threshold at level {}: {} of {} exceed a = {}",
                t.level,
                t.n_positive,
                exceedance_count(t.level, t.n_total),
                t.a_kelvin
            );
        }
        let labels = thresholds
            .iter()
            .map(|th| y.iter().map(|&v| v > th.a_kelvin).collect())
            .collect();
        Ok(LabelSet { n_years, season_samples, season_start, samples_per_day, y, thresholds, labels })
    }

    pub fn n_samples(&self) -> usize {
        self.y.len()
    }

    pub fn n_levels(&self) -> usize {
        self.labels.len()
    }

    pub fn label(&self, level: usize, year: usize, t: usize) -> bool {
        self.labels[level][year * self.season_samples + t]
    }

    /// Positive count of `level` within `years`.
    pub fn positives_in(&self, level: usize, years: &[usize]) -> usize {
        years
            .iter()
            .map(|&y| {
                self.labels[level][y * self.season_samples..(y + 1) * self.season_samples]
                    .iter()
                    .filter(|&&z| z)
                    .count()
            })
            .sum()
    }

    pub fn write_level_csv<W: Write>(&self, level: usize, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["year", "t", "Y_kelvin", "label"])?;
        for year in 0..self.n_years {
            for t in 0..self.season_samples {
                let i = year * self.season_samples + t;
                out.write_record([
                    year.to_string(),
                    t.to_string(),
                    format!("{:.6}", self.y[i]),
                    (self.labels[level][i] as u8).to_string(),
                ])?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn thresholds_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Entry {
            level: f64,
            a_kelvin: f64,
            n_positive: usize,
            n_total: usize,
        }
        let entries: Vec<Entry> = self
            .thresholds
            .iter()
            .map(|t| Entry { level: t.level, a_kelvin: t.a_kelvin, n_positive: t.n_positive, n_total: t.n_total })
            .collect();
        Ok(serde_json::to_string_pretty(&entries)?)
    }

    /// Writes `labels_<level>.csv` per level and `thresholds.json` into `dir`.
    pub fn export(&self, dir: &Path, header_comment: &str) -> Result<()> {
        for (i, th) in self.thresholds.iter().enumerate() {
            let path = dir.join(format!("labels_{}.csv", level_tag(th.level)));
            let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
            writeln!(f, "{header_comment}")?;
            self.write_level_csv(i, &mut f)?;
        }
        std::fs::write(dir.join("thresholds.json"), self.thresholds_json()? + "\n")?;
        Ok(())
    }
}

/// `0.05 -> "5"`, `0.0125 -> "1.25"`.
pub fn level_tag(p: f64) -> String {
    let pct = format!("{:.4}", p * 100.0);
    pct.trim_end_matches('0').trim_end_matches('.').to_string()
}

/// Regional-mean anomaly series `[year][t]` over the full stored window.
pub fn regional_series(archive: &FieldArchive, var: usize, clim: &Climatology, region: &Region) -> Vec<f64> {
    let n_t = archive.times_per_year();
    let clim_means: Vec<f64> = (0..n_t).map(|t| region.average(clim.slice(t))).collect();
    let mut out = vec![0.0; archive.n_years * n_t];
    out.par_chunks_mut(n_t).enumerate().for_each(|(year, row)| {
        for (t, dst) in row.iter_mut().enumerate() {
            *dst = region.average(archive.slice(var, year, t)) - clim_means[t];
        }
    });
    out
}

/// Labels every in-season sample of every archived year.
pub fn make_labels(archive: &FieldArchive, var: usize, clim: &Climatology, cfg: &HeatwaveConfig) -> Result<LabelSet> {
    cfg.validate()?;
    let spd = archive.spec.samples_per_day;
    let n_t = archive.times_per_year();
    let season = archive.spec.season_samples();
    let start = archive.season_start();
    let window = cfg.d_days * spd;
    if start + season - 1 + window > n_t {
        return Err(Error::Bounds(format!(
            "archive keeps {} trailing days, heatwave duration needs {}",
            archive.trail_days, cfg.d_days
        )));
    }
    if clim.n_times != n_t || clim.spec.n_cells() != archive.spec.n_cells() {
        return Err(Error::Dimension("climatology does not match archive".into()));
    }
    let series = regional_series(archive, var, clim, &cfg.region);
    let mut y = Vec::with_capacity(archive.n_years * season);
    for year in series.chunks_exact(n_t) {
        for t in start..start + season {
            y.push(compute_y(year, t, cfg.d_days, spd)?);
        }
    }
    LabelSet::from_y(y, archive.n_years, season, start, spd, &cfg.levels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{AreaWeighting, GridSpec};
    use crate::synth::{generate, SynthConfig};
    use proptest::{prop_assert, prop_assert_eq, prop_assume, proptest};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn y_small_cases() {
        assert_eq!(compute_y(&[2.0; 50], 7, 3, 8).unwrap(), 2.0);
        assert_eq!(compute_y(&[1.0, 2.0, 3.0, 4.0], 0, 1, 4).unwrap(), 2.5);
        assert!(matches!(compute_y(&[1.0, 2.0, 3.0, 4.0], 1, 1, 4), Err(Error::Bounds(_))));
    }

    #[test]
    fn y_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let series: Vec<f64> = (0..90 * 8).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        for t in [0, 13, 200, 90 * 8 - 14 * 8] {
            let mut acc = 0.0;
            let mut i = 0;
            while i < 14 * 8 {
                acc += series[t + i];
                i += 1;
            }
            assert!((compute_y(&series, t, 14, 8).unwrap() - acc / 112.0).abs() < 1e-12);
        }
    }

    #[test]
    fn threshold_sort_convention() {
        let ys: Vec<f64> = (1..=100).map(|v| v as f64).collect();
        let th = empirical_threshold(&ys, 0.05).unwrap();
        // 96..=100 exceed, the sixth-largest value is the threshold
        assert_eq!(th.a_kelvin, 95.0);
        assert_eq!(th.n_positive, 5);
        assert!(!th.degenerate);
        assert!(matches!(empirical_threshold(&ys, 0.005), Err(Error::LevelTooExtreme { .. })));
    }

    #[test]
    fn threshold_ties_are_degenerate() {
        let th = empirical_threshold(&[3.0; 40], 0.1).unwrap();
        assert_eq!(th.n_positive, 0);
        assert!(th.degenerate);
    }

    #[test]
    fn threshold_large_normal_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let ys: Vec<f64> = (0..10_000).map(|_| rng.sample(StandardNormal)).collect();
        let th = empirical_threshold(&ys, 0.05).unwrap();
        assert!((th.a_kelvin - 1.6449).abs() < 0.05, "a = {}", th.a_kelvin);
    }

    #[test]
    fn level_tags() {
        assert_eq!(level_tag(0.05), "5");
        assert_eq!(level_tag(0.025), "2.5");
        assert_eq!(level_tag(0.0125), "1.25");
    }

    fn tiny_cfg() -> SynthConfig {
        SynthConfig {
            spec: GridSpec::new(8, 8, 20.0, 70.0, 2, 30).unwrap(),
            target: crate::synth::BoxSpec { lat_lo: 40.0, lat_hi: 50.0, col_lo: 4, col_hi: 6 },
            max_tau_days: 2,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn labels_on_synthetic_archive() {
        let cfg = tiny_cfg();
        let (archive, _) = generate(&cfg, 20).unwrap();
        let clim = archive.climatology(0).unwrap();
        let hw = HeatwaveConfig::new(cfg.target_region().unwrap(), 14, vec![0.05, 0.025, 0.0125]).unwrap();
        let labels = make_labels(&archive, 0, &clim, &hw).unwrap();
        let n = labels.n_samples();
        assert_eq!(n, 20 * 60);
        for (i, th) in labels.thresholds.iter().enumerate() {
            let count = labels.labels[i].iter().filter(|&&z| z).count();
            assert_eq!(count, exceedance_count(th.level, n));
            assert_eq!(count, th.n_positive);
        }
        for i in 0..n {
            assert!(!labels.labels[2][i] || labels.labels[1][i]);
            assert!(!labels.labels[1][i] || labels.labels[0][i]);
        }
        let json: serde_json::Value = serde_json::from_str(&labels.thresholds_json().unwrap()).unwrap();
        assert_eq!(json.as_array().unwrap().len(), 3);
    }

    #[test]
    fn all_zero_anomalies_give_no_positives() {
        let cfg = tiny_cfg();
        let (mut archive, _) = generate(&cfg, 3).unwrap();
        let n = archive.data[0].len() / 3;
        let first = archive.data[0][..n].to_vec();
        for year in archive.data[0].chunks_exact_mut(n) {
            year.copy_from_slice(&first);
        }
        let clim = archive.climatology(0).unwrap();
        let hw = HeatwaveConfig::new(cfg.target_region().unwrap(), 14, vec![0.05, 0.025]).unwrap();
        let labels = make_labels(&archive, 0, &clim, &hw).unwrap();
        assert!(labels.labels.iter().flatten().all(|&z| !z));
        assert!(labels.thresholds.iter().all(|t| t.degenerate));
    }

    #[test]
    fn short_trailing_window_is_rejected() {
        let cfg = SynthConfig { trail_days: 5, ..tiny_cfg() };
        let (archive, _) = generate(&cfg, 3).unwrap();
        let clim = archive.climatology(0).unwrap();
        let hw = HeatwaveConfig::new(cfg.target_region().unwrap(), 14, vec![0.05]).unwrap();
        assert!(matches!(make_labels(&archive, 0, &clim, &hw), Err(Error::Bounds(_))));
    }

    #[test]
    fn config_validation() {
        let spec = GridSpec::new(4, 4, 0.0, 60.0, 8, 2).unwrap();
        let r = Region::lat_lon_box(&spec, 0.0, 60.0, 0..2, AreaWeighting::Uniform).unwrap();
        assert!(HeatwaveConfig::new(r.clone(), 0, vec![0.05]).is_err());
        assert!(HeatwaveConfig::new(r.clone(), 14, vec![0.025, 0.05]).is_err());
        assert!(HeatwaveConfig::new(r, 14, vec![0.05, 1.0]).is_err());
    }

    proptest! {
        #[test]
        fn exact_counts_nesting_and_shift(seed in 0u64..500, shift in -5.0f64..5.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n_years = rng.random_range(2..12);
            let season = rng.random_range(20..90);
            let y: Vec<f64> = (0..n_years * season).map(|_| rng.sample(StandardNormal)).collect();
            let levels = [0.05, 0.025, 0.0125];
            let feasible: Vec<f64> = levels.iter().copied()
                .filter(|&p| exceedance_count(p, y.len()) >= 1).collect();
            prop_assume!(!feasible.is_empty());
            let set = LabelSet::from_y(y.clone(), n_years, season, 0, 8, &feasible).unwrap();
            for (i, th) in set.thresholds.iter().enumerate() {
                let count = set.labels[i].iter().filter(|&&z| z).count();
                prop_assert_eq!(count, exceedance_count(th.level, y.len()));
            }
            for w in set.labels.windows(2) {
                prop_assert!(w[1].iter().zip(&w[0]).all(|(rare, common)| !rare || *common));
            }
            let shifted = LabelSet::from_y(y.iter().map(|v| v + shift).collect(), n_years, season, 0, 8, &feasible).unwrap();
            prop_assert_eq!(&shifted.labels, &set.labels);
            for (a, b) in shifted.thresholds.iter().zip(&set.thresholds) {
                prop_assert!((a.a_kelvin - b.a_kelvin - shift).abs() < 1e-12);
            }
        }
    }
}
