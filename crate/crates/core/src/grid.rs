//! Grid geometry, climatology, anomalies and area-weighted regional means.
//!
//! Grids are equal-angle: `n_lat` latitude rows spaced uniformly between
//! `lat_min_deg` and `lat_max_deg` (row centres, inclusive) and `n_lon`
//! longitude columns covering the full circle. Values are stored row-major
//! (`[lat][lon]`).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SECONDS_PER_DAY: u32 = 86_400;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub n_lat: usize,
    pub n_lon: usize,
    pub lat_min_deg: f64,
    pub lat_max_deg: f64,
    pub seconds_per_sample: u32,
    pub samples_per_day: usize,
    pub days_per_season: usize,
}

impl GridSpec {
    pub fn new(
        n_lat: usize,
        n_lon: usize,
        lat_min_deg: f64,
        lat_max_deg: f64,
        samples_per_day: usize,
        days_per_season: usize,
    ) -> Result<Self> {
        if samples_per_day == 0 || SECONDS_PER_DAY as usize % samples_per_day != 0 {
            return Err(Error::Config(format!(
                "samples_per_day = {samples_per_day} must divide {SECONDS_PER_DAY}"
            )));
        }
        let spec = GridSpec {
            n_lat,
            n_lon,
            lat_min_deg,
            lat_max_deg,
            seconds_per_sample: SECONDS_PER_DAY / samples_per_day as u32,
            samples_per_day,
            days_per_season,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// 64x128 global grid sampled every 3 hours with a 90-day season.
    pub fn full_scale() -> Self {
        GridSpec::new(64, 128, -87.86, 87.86, 8, 90).expect("valid full-scale grid")
    }

    /// 32x32 northern grid (10N..88N) sampled twice a day.
    pub fn desk() -> Self {
        GridSpec::new(32, 32, 10.0, 88.0, 2, 90).expect("valid desk grid")
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_lat < 2 || self.n_lon < 2 {
            return Err(Error::Config(format!(
                "grid must be at least 2x2, got {}x{}",
                self.n_lat, self.n_lon
            )));
        }
        if self.samples_per_day as u64 * self.seconds_per_sample as u64 != SECONDS_PER_DAY as u64 {
            return Err(Error::Config(format!(
                "samples_per_day ({}) x seconds_per_sample ({}) must equal {SECONDS_PER_DAY}",
                self.samples_per_day, self.seconds_per_sample
            )));
        }
        if !(self.lat_min_deg < self.lat_max_deg)
            || self.lat_min_deg < -90.0
            || self.lat_max_deg > 90.0
        {
            return Err(Error::Config(format!(
                "latitude range [{}, {}] invalid",
                self.lat_min_deg, self.lat_max_deg
            )));
        }
        if self.days_per_season == 0 {
            return Err(Error::Config("days_per_season must be positive".into()));
        }
        Ok(())
    }

    pub fn n_cells(&self) -> usize {
        self.n_lat * self.n_lon
    }

    pub fn season_samples(&self) -> usize {
        self.days_per_season * self.samples_per_day
    }

    pub fn latitude(&self, row: usize) -> f64 {
        let step = (self.lat_max_deg - self.lat_min_deg) / (self.n_lat - 1) as f64;
        self.lat_min_deg + step * row as f64
    }

    pub fn longitude(&self, col: usize) -> f64 {
        360.0 * col as f64 / self.n_lon as f64
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.n_lon + col
    }
}

/// One horizontal snapshot of a variable.
#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    pub spec: GridSpec,
    pub values: Vec<f64>,
    pub year: usize,
    pub t: usize,
}

impl GridField {
    pub fn new(spec: GridSpec, values: Vec<f64>, year: usize, t: usize) -> Result<Self> {
        if values.len() != spec.n_cells() {
            return Err(Error::Dimension(format!(
                "field has {} values, grid has {} cells",
                values.len(),
                spec.n_cells()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Format(format!("non-finite value at cell {i}")));
        }
        Ok(GridField { spec, values, year, t })
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[self.spec.index(row, col)]
    }
}

/// Per-location, per-intra-year-sample mean over years.
#[derive(Debug, Clone, PartialEq)]
pub struct Climatology {
    pub spec: GridSpec,
    pub n_times: usize,
    pub years_used: usize,
    /// `[t][cell]`
    pub values: Vec<f64>,
}

impl Climatology {
    pub fn slice(&self, t: usize) -> &[f64] {
        let n = self.spec.n_cells();
        &self.values[t * n..(t + 1) * n]
    }

    /// Accumulates `[year][t][cell]` data in year order.
    pub fn from_year_major(
        spec: GridSpec,
        n_years: usize,
        n_times: usize,
        data: &[f32],
    ) -> Result<Self> {
        let n_cells = spec.n_cells();
        if n_years < 2 {
            return Err(Error::InsufficientData(format!(
                "climatology needs at least 2 years, got {n_years}"
            )));
        }
        if data.len() != n_years * n_times * n_cells {
            return Err(Error::Dimension(format!(
                "expected {} values, got {}",
                n_years * n_times * n_cells,
                data.len()
            )));
        }
        let per_year = n_times * n_cells;
        let mut sums = vec![0.0f64; per_year];
        for year in data.chunks_exact(per_year) {
            for (s, &v) in sums.iter_mut().zip(year) {
                *s += v as f64;
            }
        }
        let inv = 1.0 / n_years as f64;
        sums.iter_mut().for_each(|s| *s *= inv);
        Ok(Climatology { spec, n_times, years_used: n_years, values: sums })
    }
}

/// Mean over years at every `(cell, t)`. Every `(year, t)` pair must appear
/// exactly once; years and times are taken to be `0..max+1`.
pub fn compute_climatology(fields: &[GridField]) -> Result<Climatology> {
    let first = fields
        .first()
        .ok_or_else(|| Error::InsufficientData("no fields".into()))?;
    let spec = first.spec;
    let n_years = fields.iter().map(|f| f.year).max().unwrap_or(0) + 1;
    let n_times = fields.iter().map(|f| f.t).max().unwrap_or(0) + 1;
    if n_years < 2 {
        return Err(Error::InsufficientData(format!(
            "climatology needs at least 2 years, got {n_years}"
        )));
    }
    let mut slots: Vec<Option<&GridField>> = vec![None; n_years * n_times];
    for f in fields {
        if f.spec != spec {
            return Err(Error::Dimension("fields come from different grids".into()));
        }
        let slot = &mut slots[f.year * n_times + f.t];
        if slot.is_some() {
            return Err(Error::IncompleteDataset(format!(
                "duplicate field for year {} t {}",
                f.year, f.t
            )));
        }
        *slot = Some(f);
    }
    if let Some(missing) = slots.iter().position(Option::is_none) {
        return Err(Error::IncompleteDataset(format!(
            "missing field for year {} t {}",
            missing / n_times,
            missing % n_times
        )));
    }

    let n_cells = spec.n_cells();
    let mut values = vec![0.0f64; n_times * n_cells];
    for year in 0..n_years {
        for t in 0..n_times {
            let f = slots[year * n_times + t].expect("checked above");
            let dst = &mut values[t * n_cells..(t + 1) * n_cells];
            for (d, v) in dst.iter_mut().zip(&f.values) {
                *d += v;
            }
        }
    }
    let inv = 1.0 / n_years as f64;
    values.iter_mut().for_each(|v| *v *= inv);
    Ok(Climatology { spec, n_times, years_used: n_years, values })
}

pub fn anomaly(field: &GridField, clim: &Climatology) -> Result<GridField> {
    if field.spec.n_lat != clim.spec.n_lat || field.spec.n_lon != clim.spec.n_lon {
        return Err(Error::Dimension(format!(
            "field grid {}x{} vs climatology grid {}x{}",
            field.spec.n_lat, field.spec.n_lon, clim.spec.n_lat, clim.spec.n_lon
        )));
    }
    if field.t >= clim.n_times {
        return Err(Error::Dimension(format!(
            "t = {} outside climatology range 0..{}",
            field.t, clim.n_times
        )));
    }
    let values = field
        .values
        .iter()
        .zip(clim.slice(field.t))
        .map(|(v, c)| v - c)
        .collect();
    Ok(GridField { spec: field.spec, values, year: field.year, t: field.t })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum AreaWeighting {
    #[default]
    CosLatitude,
    Uniform,
}

/// A set of grid cells with normalized area weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub n_lat: usize,
    pub n_lon: usize,
    pub mask: Vec<bool>,
    /// Full-grid weights, zero outside the mask, summing to one.
    pub weights: Vec<f64>,
}

impl Region {
    pub fn from_mask(spec: &GridSpec, mask: Vec<bool>, weighting: AreaWeighting) -> Result<Self> {
        if mask.len() != spec.n_cells() {
            return Err(Error::Dimension(format!(
                "mask has {} cells, grid has {}",
                mask.len(),
                spec.n_cells()
            )));
        }
        let mut weights = vec![0.0; mask.len()];
        for row in 0..spec.n_lat {
            let w = match weighting {
                AreaWeighting::CosLatitude => spec.latitude(row).to_radians().cos().max(0.0),
                AreaWeighting::Uniform => 1.0,
            };
            for col in 0..spec.n_lon {
                let i = spec.index(row, col);
                if mask[i] {
                    weights[i] = w;
                }
            }
        }
        let total: f64 = weights.iter().sum();
        if !mask.iter().any(|&m| m) || total <= 0.0 {
            return Err(Error::EmptyRegion);
        }
        weights.iter_mut().for_each(|w| *w /= total);
        Ok(Region { n_lat: spec.n_lat, n_lon: spec.n_lon, mask, weights })
    }

    /// Cells with latitude in `[lat_lo, lat_hi]` and column in `cols`.
    pub fn lat_lon_box(
        spec: &GridSpec,
        lat_lo: f64,
        lat_hi: f64,
        cols: std::ops::Range<usize>,
        weighting: AreaWeighting,
    ) -> Result<Self> {
        let mut mask = vec![false; spec.n_cells()];
        for row in 0..spec.n_lat {
            let lat = spec.latitude(row);
            if lat < lat_lo || lat > lat_hi {
                continue;
            }
            for col in cols.clone().filter(|&c| c < spec.n_lon) {
                mask[spec.index(row, col)] = true;
            }
        }
        Region::from_mask(spec, mask, weighting)
    }

    /// Every cell at or north of `lat_lo`.
    pub fn above_latitude(spec: &GridSpec, lat_lo: f64, weighting: AreaWeighting) -> Result<Self> {
        Region::lat_lon_box(spec, lat_lo, 90.0, 0..spec.n_lon, weighting)
    }

    pub fn n_cells(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// `(row_start, row_end, col_start, col_end)`, half-open.
    pub fn bounding_box(&self) -> (usize, usize, usize, usize) {
        let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
        for (i, _) in self.mask.iter().enumerate().filter(|(_, &m)| m) {
            let (r, c) = (i / self.n_lon, i % self.n_lon);
            r0 = r0.min(r);
            r1 = r1.max(r + 1);
            c0 = c0.min(c);
            c1 = c1.max(c + 1);
        }
        (r0, r1, c0, c1)
    }

    pub fn sum_squared_weights(&self) -> f64 {
        self.weights.iter().map(|w| w * w).sum()
    }

    /// Weighted mean of a raw `[lat][lon]` slice.
    pub fn average<T: Copy + Into<f64>>(&self, values: &[T]) -> f64 {
        self.weights
            .iter()
            .zip(values)
            .filter(|(w, _)| **w != 0.0)
            .map(|(w, &v)| w * v.into())
            .sum()
    }
}

pub fn region_average(field: &GridField, region: &Region) -> Result<f64> {
    if field.spec.n_lat != region.n_lat || field.spec.n_lon != region.n_lon {
        return Err(Error::Dimension("region belongs to a different grid".into()));
    }
    if region.n_cells() == 0 {
        return Err(Error::EmptyRegion);
    }
    Ok(region.average(&field.values))
}
