//! Binary field archive (`HCST`) shared by the generator and the labeler.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "HCST" | version u32 | n_lat u32 | n_lon u32 | samples_per_day u32
//!        | days_per_season u32 | n_years u32 | n_variables u32
//!        | n_variables x (len u32, UTF-8 bytes)
//!        | lead_days u32 | trail_days u32 | lat_min_deg f64 | lat_max_deg f64
//! payload: f32 values ordered [variable][year][t][lat][lon]
//! ```
//!
//! Each stored year covers `lead_days + days_per_season + trail_days` days;
//! the season proper starts at sample `lead_days * samples_per_day`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{Climatology, GridField, GridSpec};

pub const MAGIC: &[u8; 4] = b"HCST";
pub const VERSION: u32 = 1;
pub const ORACLE_VARIABLE: &str = "ORACLE";

/// Raw header fields; the oracle sidecar reuses it with a 1x1 grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Header {
    pub n_lat: u32,
    pub n_lon: u32,
    pub samples_per_day: u32,
    pub days_per_season: u32,
    pub n_years: u32,
    pub variables: Vec<String>,
    pub lead_days: u32,
    pub trail_days: u32,
    pub lat_min_deg: f64,
    pub lat_max_deg: f64,
}

impl Header {
    pub fn times_per_year(&self) -> usize {
        (self.lead_days + self.days_per_season + self.trail_days) as usize * self.samples_per_day as usize
    }

    pub fn payload_len(&self) -> usize {
        self.variables.len()
            * self.n_years as usize
            * self.times_per_year()
            * self.n_lat as usize
            * self.n_lon as usize
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        for v in [
            VERSION,
            self.n_lat,
            self.n_lon,
            self.samples_per_day,
            self.days_per_season,
            self.n_years,
            self.variables.len() as u32,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        for name in &self.variables {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
        }
        w.write_all(&self.lead_days.to_le_bytes())?;
        w.write_all(&self.trail_days.to_le_bytes())?;
        w.write_all(&self.lat_min_deg.to_le_bytes())?;
        w.write_all(&self.lat_max_deg.to_le_bytes())?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("bad magic {magic:?}, expected HCST")));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported archive version {version}")));
        }
        let n_lat = read_u32(r)?;
        let n_lon = read_u32(r)?;
        let samples_per_day = read_u32(r)?;
        let days_per_season = read_u32(r)?;
        let n_years = read_u32(r)?;
        let n_vars = read_u32(r)?;
        let mut variables = Vec::with_capacity(n_vars as usize);
        for _ in 0..n_vars {
            let len = read_u32(r)? as usize;
            if len > 1 << 16 {
                return Err(Error::Format(format!("variable name length {len} too large")));
            }
            let mut buf = vec![0u8; len];
            r.read_exact(&mut buf)?;
            variables.push(
                String::from_utf8(buf).map_err(|e| Error::Format(format!("variable name: {e}")))?,
            );
        }
        let lead_days = read_u32(r)?;
        let trail_days = read_u32(r)?;
        let lat_min_deg = read_f64(r)?;
        let lat_max_deg = read_f64(r)?;
        Ok(Header {
            n_lat,
            n_lon,
            samples_per_day,
            days_per_season,
            n_years,
            variables,
            lead_days,
            trail_days,
            lat_min_deg,
            lat_max_deg,
        })
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

pub(crate) fn write_f32s<W: Write>(w: &mut W, values: &[f32]) -> Result<()> {
    let mut buf = Vec::with_capacity(values.len() * 4);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub(crate) fn read_f32s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f32>> {
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Multi-year, multi-variable field storage.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldArchive {
    pub spec: GridSpec,
    pub n_years: usize,
    pub lead_days: usize,
    pub trail_days: usize,
    pub variables: Vec<String>,
    /// One `[year][t][lat][lon]` buffer per variable.
    pub data: Vec<Vec<f32>>,
}

impl FieldArchive {
    pub fn times_per_year(&self) -> usize {
        (self.lead_days + self.spec.days_per_season + self.trail_days) * self.spec.samples_per_day
    }

    /// First in-season sample index within a stored year.
    pub fn season_start(&self) -> usize {
        self.lead_days * self.spec.samples_per_day
    }

    pub fn variable(&self, name: &str) -> Result<usize> {
        self.variables
            .iter()
            .position(|v| v == name)
            .ok_or_else(|| Error::Format(format!("archive has no variable {name:?}")))
    }

    pub fn slice(&self, var: usize, year: usize, t: usize) -> &[f32] {
        let n = self.spec.n_cells();
        let off = (year * self.times_per_year() + t) * n;
        &self.data[var][off..off + n]
    }

    pub fn field(&self, var: usize, year: usize, t: usize) -> Result<GridField> {
        if year >= self.n_years || t >= self.times_per_year() {
            return Err(Error::Bounds(format!(
                "field (year {year}, t {t}) outside archive ({} years x {} samples)",
                self.n_years,
                self.times_per_year()
            )));
        }
        let values = self.slice(var, year, t).iter().map(|&v| v as f64).collect();
        GridField::new(self.spec, values, year, t)
    }

    pub fn climatology(&self, var: usize) -> Result<Climatology> {
        Climatology::from_year_major(self.spec, self.n_years, self.times_per_year(), &self.data[var])
    }

    pub fn header(&self) -> Header {
        Header {
            n_lat: self.spec.n_lat as u32,
            n_lon: self.spec.n_lon as u32,
            samples_per_day: self.spec.samples_per_day as u32,
            days_per_season: self.spec.days_per_season as u32,
            n_years: self.n_years as u32,
            variables: self.variables.clone(),
            lead_days: self.lead_days as u32,
            trail_days: self.trail_days as u32,
            lat_min_deg: self.spec.lat_min_deg,
            lat_max_deg: self.spec.lat_max_deg,
        }
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        self.header().write_to(w)?;
        for var in &self.data {
            write_f32s(w, var)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let h = Header::read_from(r)?;
        let spec = GridSpec::new(
            h.n_lat as usize,
            h.n_lon as usize,
            h.lat_min_deg,
            h.lat_max_deg,
            h.samples_per_day as usize,
            h.days_per_season as usize,
        )?;
        let per_var = h.payload_len() / h.variables.len().max(1);
        let data = (0..h.variables.len())
            .map(|_| read_f32s(r, per_var))
            .collect::<Result<Vec<_>>>()?;
        Ok(FieldArchive {
            spec,
            n_years: h.n_years as usize,
            lead_days: h.lead_days as usize,
            trail_days: h.trail_days as usize,
            variables: h.variables,
            data,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> FieldArchive {
        let spec = GridSpec::new(2, 3, 0.0, 50.0, 2, 1).unwrap();
        let per_var = 2 * 4 * 6;
        FieldArchive {
            spec,
            n_years: 2,
            lead_days: 1,
            trail_days: 0,
            variables: vec!["TS".into(), "ZG".into()],
            data: vec![
                (0..per_var).map(|i| i as f32).collect(),
                (0..per_var).map(|i| -(i as f32)).collect(),
            ],
        }
    }

    #[test]
    fn roundtrip_and_layout() {
        let a = tiny();
        let mut buf = Vec::new();
        a.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"HCST");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), VERSION);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 2);
        let b = FieldArchive::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(a, b);
        // [var][year][t][cell]: year 1, t 2, cell 4 of TS
        assert_eq!(b.slice(0, 1, 2)[4], ((4 + 2) * 6 + 4) as f32);
        assert_eq!(b.season_start(), 2);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let mut buf = Vec::new();
        tiny().write_to(&mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(FieldArchive::read_from(&mut bad.as_slice()), Err(Error::Format(_))));
        buf.truncate(buf.len() - 3);
        assert!(FieldArchive::read_from(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn field_bounds() {
        let a = tiny();
        assert!(a.field(0, 1, 3).is_ok());
        assert!(matches!(a.field(0, 2, 0), Err(Error::Bounds(_))));
        assert!(matches!(a.field(0, 0, 4), Err(Error::Bounds(_))));
    }
}
