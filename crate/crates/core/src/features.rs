//! Network inputs: predictor-box anomalies mapped onto a fixed spectral grid.
//!
//! Along each axis of length `n` mapped onto `m` spectral bins, the output
//! bin `k` holds frequency `f = k - m/2` (zero frequency centred). Bins whose
//! frequency exists in the `n`-point DFT (`-floor(n/2) <= f <= ceil(n/2) - 1`)
//! receive that coefficient, others stay zero: long axes are truncated to
//! their lowest frequencies, short axes are zero-filled in frequency.
//! Coefficients are divided by the number of box cells.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::archive::{read_f32s, write_f32s, FieldArchive};

use crate::error::{Error, Result};
use crate::grid::{Climatology, Region};
use crate::labeling::LabelSet;

const STORE_MAGIC: &[u8; 4] = b"HCFS";
const STORE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Protocol {
    /// Surface temperature alone.
    P1,
    /// Geopotential height alone.
    P2,
    /// Two towers joined at the final dense layer.
    P3,
    /// Both fields stacked as four channels.
    P4,
    /// Logical AND of independently trained P1 and P2 predictions.
    And,
}

impl Protocol {
    pub fn name(&self) -> &'static str {
        match self {
            Protocol::P1 => "P1",
            Protocol::P2 => "P2",
            Protocol::P3 => "P3",
            Protocol::P4 => "P4",
            Protocol::And => "AND",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "P1" | "TS" => Ok(Protocol::P1),
            "P2" | "ZG" => Ok(Protocol::P2),
            "P3" | "COMBINED" => Ok(Protocol::P3),
            "P4" | "STACKED" => Ok(Protocol::P4),
            "AND" => Ok(Protocol::And),
            other => Err(Error::Config(format!("unknown protocol {other:?} (P1, P2, P3, P4, AND)"))),
        }
    }

    /// Channel count of each network tower's input.
    pub fn tower_channels(&self) -> Vec<usize> {
        match self {
            Protocol::P1 | Protocol::P2 => vec![2],
            Protocol::P3 => vec![2, 2],
            Protocol::P4 => vec![4],
            Protocol::And => vec![],
        }
    }
}

impl std::fmt::Display for Protocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone)]
pub struct FeatureConfig {
    pub predictor: Region,
    pub spectral_rows: usize,
    pub spectral_cols: usize,
    pub protocol: Protocol,
    pub tau_days: usize,
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.spectral_rows < 2 || self.spectral_cols < 2 {
            return Err(Error::Config(format!(
                "spectral grid {}x{} must be at least 2x2",
                self.spectral_rows, self.spectral_cols
            )));
        }
        Ok(())
    }
}

/// A `channels x rows x cols` input, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct InputTensor {
    pub rows: usize,
    pub cols: usize,
    pub channels: usize,
    pub values: Vec<f32>,
    pub year: usize,
    /// In-season label sample index.
    pub t_label: usize,
}

impl InputTensor {
    pub fn get(&self, row: usize, col: usize, channel: usize) -> f32 {
        self.values[(channel * self.rows + row) * self.cols + col]
    }
}

/// Output bin `k` of an `m`-bin axis to DFT index of an `n`-point transform.
fn bin_to_dft_index(k: usize, m: usize, n: usize) -> Option<usize> {
    let f = k as i64 - (m / 2) as i64;
    let lo = -((n / 2) as i64);
    let hi = n.div_ceil(2) as i64 - 1;
    (lo..=hi).contains(&f).then(|| f.rem_euclid(n as i64) as usize)
}

/// 2-D DFT onto a fixed `out_rows x out_cols` spectral grid.
pub struct SpectralTransform {
    box_rows: usize,
    box_cols: usize,
    out_rows: usize,
    out_cols: usize,
    row_fft: Arc<dyn Fft<f64>>,
    col_fft: Arc<dyn Fft<f64>>,
    row_map: Vec<Option<usize>>,
    col_map: Vec<Option<usize>>,
}

impl SpectralTransform {
    pub fn new(box_rows: usize, box_cols: usize, out_rows: usize, out_cols: usize) -> Result<Self> {
        if box_rows == 0 || box_cols == 0 {
            return Err(Error::Config("predictor box is empty".into()));
        }
        if out_rows < 2 || out_cols < 2 {
            return Err(Error::Config(format!("spectral grid {out_rows}x{out_cols} must be at least 2x2")));
        }
        let mut planner = FftPlanner::new();
        Ok(SpectralTransform {
            box_rows,
            box_cols,
            out_rows,
            out_cols,
            // along a row: length box_cols
            row_fft: planner.plan_fft_forward(box_cols),
            col_fft: planner.plan_fft_forward(box_rows),
            row_map: (0..out_rows).map(|k| bin_to_dft_index(k, out_rows, box_rows)).collect(),
            col_map: (0..out_cols).map(|k| bin_to_dft_index(k, out_cols, box_cols)).collect(),
        })
    }

    pub fn output_len(&self) -> usize {
        2 * self.out_rows * self.out_cols
    }

    /// `box_values` is `box_rows x box_cols` row-major. Output is
    /// `[re | im]`, each `out_rows x out_cols`.
    pub fn apply(&self, box_values: &[f64], out: &mut [f64]) {
        let (nr, nc) = (self.box_rows, self.box_cols);
        assert_eq!(box_values.len(), nr * nc);
        assert_eq!(out.len(), self.output_len());
        let mut rows: Vec<Complex64> = box_values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        for row in rows.chunks_exact_mut(nc) {
            self.row_fft.process(row);
        }
        let scale = 1.0 / (nr * nc) as f64;
        let plane = self.out_rows * self.out_cols;
        out.iter_mut().for_each(|v| *v = 0.0);
        let mut column = vec![Complex64::new(0.0, 0.0); nr];
        for (oc, src_c) in self.col_map.iter().enumerate() {
            let Some(c) = *src_c else { continue };
            for (r, dst) in column.iter_mut().enumerate() {
                *dst = rows[r * nc + c];
            }
            self.col_fft.process(&mut column);
            for (or, src_r) in self.row_map.iter().enumerate() {
                if let Some(r) = *src_r {
                    let z = column[r] * scale;
                    out[or * self.out_cols + oc] = z.re;
                    out[plane + or * self.out_cols + oc] = z.im;
                }
            }
        }
    }
}

/// Convenience wrapper: transform a `rows x cols` box to a `2 x m_r x m_c` tensor.
pub fn spectral_transform(box_values: &[f64], rows: usize, cols: usize, out_rows: usize, out_cols: usize) -> Result<Vec<f64>> {
    if box_values.len() != rows * cols {
        return Err(Error::Dimension(format!("{} values for a {rows}x{cols} box", box_values.len())));
    }
    let st = SpectralTransform::new(rows, cols, out_rows, out_cols)?;
    let mut out = vec![0.0; st.output_len()];
    st.apply(box_values, &mut out);
    Ok(out)
}

/// Spectral features of both fields for every labeled sample at one lead time.
#[derive(Debug, Clone)]
pub struct FeatureStore {
    pub rows: usize,
    pub cols: usize,
    pub tau_days: usize,
    pub n_years: usize,
    pub season_samples: usize,
    /// `[sample][2][rows][cols]`, sample = year * season_samples + t.
    pub ts: Vec<f32>,
    pub zg: Vec<f32>,
}

impl FeatureStore {
    /// `clims` are the climatologies of `TS` and `ZG`, in that order.
    pub fn build(
        archive: &FieldArchive,
        clims: [&Climatology; 2],
        vars: [usize; 2],
        predictor: &Region,
        spectral_rows: usize,
        spectral_cols: usize,
        tau_days: usize,
        labels: &LabelSet,
    ) -> Result<Self> {
        let spd = archive.spec.samples_per_day;
        let lead = tau_days * spd;
        if lead > archive.season_start() {
            return Err(Error::Bounds(format!(
                "lead time of {tau_days} days needs {lead} samples before the season, archive keeps {}",
                archive.season_start()
            )));
        }
        if labels.n_years != archive.n_years || labels.season_start != archive.season_start() {
            return Err(Error::Dimension("labels do not match archive".into()));
        }
        let (r0, r1, c0, c1) = predictor.bounding_box();
        let (br, bc) = (r1 - r0, c1 - c0);
        let st = SpectralTransform::new(br, bc, spectral_rows, spectral_cols)?;
        let per = st.output_len();
        let season = labels.season_samples;
        let n_lon = archive.spec.n_lon;

        let mut fields = [vec![0.0f32; archive.n_years * season * per], vec![0.0f32; archive.n_years * season * per]];
        for (k, dst) in fields.iter_mut().enumerate() {
            dst.par_chunks_mut(season * per).enumerate().for_each(|(year, year_out)| {
                let mut boxed = vec![0.0; br * bc];
                let mut spec_out = vec![0.0; per];
                for t in 0..season {
                    let src_t = labels.season_start + t - lead;
                    let field = archive.slice(vars[k], year, src_t);
                    let clim = clims[k].slice(src_t);
                    for r in 0..br {
                        for c in 0..bc {
                            let i = (r0 + r) * n_lon + c0 + c;
                            boxed[r * bc + c] = if predictor.mask[i] { field[i] as f64 - clim[i] } else { 0.0 };
                        }
                    }
                    st.apply(&boxed, &mut spec_out);
                    for (d, s) in year_out[t * per..(t + 1) * per].iter_mut().zip(&spec_out) {
                        *d = *s as f32;
                    }
                }
            });
        }
        let [ts, zg] = fields;
        Ok(FeatureStore {
            rows: spectral_rows,
            cols: spectral_cols,
            tau_days,
            n_years: archive.n_years,
            season_samples: season,
            ts,
            zg,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.n_years * self.season_samples
    }

    pub fn per_field(&self) -> usize {
        2 * self.rows * self.cols
    }

    pub fn ts_of(&self, sample: usize) -> &[f32] {
        let p = self.per_field();
        &self.ts[sample * p..(sample + 1) * p]
    }

    pub fn zg_of(&self, sample: usize) -> &[f32] {
        let p = self.per_field();
        &self.zg[sample * p..(sample + 1) * p]
    }

    /// Root-mean-square coefficient of each field over `samples`.
    pub fn field_rms(&self, samples: &[usize]) -> [f64; 2] {
        let mut acc = [0.0f64; 2];
        for &s in samples {
            acc[0] += self.ts_of(s).iter().map(|&v| (v as f64).powi(2)).sum::<f64>();
            acc[1] += self.zg_of(s).iter().map(|&v| (v as f64).powi(2)).sum::<f64>();
        }
        let n = (samples.len() * self.per_field()).max(1) as f64;
        acc.map(|a| (a / n).sqrt())
    }

    /// Network inputs of one sample under a protocol (two tensors for P3).
    pub fn inputs(&self, sample: usize, protocol: Protocol) -> Vec<InputTensor> {
        let year = sample / self.season_samples;
        let t_label = sample % self.season_samples;
        let make = |parts: &[&[f32]]| {
            let values: Vec<f32> = parts.iter().flat_map(|p| p.iter().copied()).collect();
            InputTensor { rows: self.rows, cols: self.cols, channels: 2 * parts.len(), values, year, t_label }
        };
        match protocol {
            Protocol::P1 => vec![make(&[self.ts_of(sample)])],
            Protocol::P2 => vec![make(&[self.zg_of(sample)])],
            Protocol::P3 => vec![make(&[self.ts_of(sample)]), make(&[self.zg_of(sample)])],
            Protocol::P4 => vec![make(&[self.ts_of(sample), self.zg_of(sample)])],
            Protocol::And => vec![make(&[self.ts_of(sample)]), make(&[self.zg_of(sample)])],
        }
    }

    /// `HCFS | version | rows | cols | tau_days | n_years | season_samples`
    /// (u32 little-endian), then the TS and ZG coefficient arrays.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(STORE_MAGIC)?;
        for v in [STORE_VERSION as usize, self.rows, self.cols, self.tau_days, self.n_years, self.season_samples] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        write_f32s(w, &self.ts)?;
        write_f32s(w, &self.zg)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != STORE_MAGIC {
            return Err(Error::Format("bad magic, expected HCFS".into()));
        }
        let mut h = [0usize; 6];
        for v in &mut h {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            *v = u32::from_le_bytes(b) as usize;
        }
        if h[0] != STORE_VERSION as usize {
            return Err(Error::Format(format!("unsupported feature store version {}", h[0])));
        }
        let n = h[4] * h[5] * 2 * h[1] * h[2];
        let ts = read_f32s(r, n)?;
        let zg = read_f32s(r, n)?;
        Ok(FeatureStore { rows: h[1], cols: h[2], tau_days: h[3], n_years: h[4], season_samples: h[5], ts, zg })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut std::io::BufReader::new(std::fs::File::open(path)?))
    }

    /// Tensor dump: `rows u32 | cols u32 | channels u32 | n_samples u64`,
    /// then f32 values per sample in `[row][col][channel]` order.
    pub fn write_dump<W: Write>(&self, protocol: Protocol, mut w: W) -> Result<()> {
        let channels: usize = protocol.tower_channels().iter().sum::<usize>().max(2);
        w.write_all(&(self.rows as u32).to_le_bytes())?;
        w.write_all(&(self.cols as u32).to_le_bytes())?;
        w.write_all(&(channels as u32).to_le_bytes())?;
        w.write_all(&(self.n_samples() as u64).to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.rows * self.cols * channels * 4);
        for s in 0..self.n_samples() {
            let parts = self.inputs(s, protocol);
            buf.clear();
            for r in 0..self.rows {
                for c in 0..self.cols {
                    for p in &parts {
                        for ch in 0..p.channels {
                            buf.extend_from_slice(&p.get(r, c, ch).to_le_bytes());
                        }
                    }
                }
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }
}

/// `(inputs, label)` pairs for one level, ordered by `(year, t)`.
pub fn build_inputs(
    archive: &FieldArchive,
    clims: [&Climatology; 2],
    vars: [usize; 2],
    feat: &FeatureConfig,
    labels: &LabelSet,
    level: usize,
) -> Result<Vec<(Vec<InputTensor>, bool)>> {
    feat.validate()?;
    let store = FeatureStore::build(
        archive,
        clims,
        vars,
        &feat.predictor,
        feat.spectral_rows,
        feat.spectral_cols,
        feat.tau_days,
        labels,
    )?;
    Ok((0..store.n_samples())
        .map(|s| (store.inputs(s, feat.protocol), labels.labels[level][s]))
        .collect())
}
