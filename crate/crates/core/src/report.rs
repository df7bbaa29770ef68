//! CSV emission of trial results and their reshaping into table- and
//! figure-shaped series.
//!
//! Every file starts with `#` comment lines holding the config hash, the
//! seeds and the full config, so any file can be regenerated from itself.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::features::Protocol;
use crate::pipeline::{ConfusionCounts, Stats, SummaryRow, TrialReport};

pub const TRIAL_COLUMNS: [&str; 14] =
    ["trial_id", "level", "protocol", "tau", "epoch", "split", "TP", "FP", "TN", "FN", "TPR", "FPR", "MCC", "seconds"];

pub const SUMMARY_COLUMNS: [&str; 11] = [
    "level",
    "protocol",
    "tau",
    "mean_mcc",
    "std_mcc",
    "median_mcc",
    "maxabsdev_mcc",
    "mean_tpr",
    "std_tpr",
    "mean_fpr",
    "std_fpr",
];

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Comment block naming the config hash, seeds and config.
pub fn provenance(cfg: &Config, reports: &[TrialReport]) -> String {
    let mut seeds: Vec<String> = vec![format!("synth_seed={}", cfg.synth.seed), format!("trial_seed={}", cfg.experiment.seed)];
    for r in reports {
        seeds.push(format!(
            "t{}/l{}/tau{}:split={},model={},undersample={},train={}",
            r.trial, r.level_index, r.tau_days, r.seeds.split, r.seeds.model, r.seeds.undersample, r.seeds.train
        ));
    }
    format!("# config_sha256={}\n# seeds {}\n# config {}\n", cfg.hash(), seeds.join(" "), cfg.inline())
}

fn counts_fields(c: &ConfusionCounts) -> Result<[String; 7]> {
    let s = crate::pipeline::score(c)?;
    Ok([
        c.tp.to_string(),
        c.fp.to_string(),
        c.tn.to_string(),
        c.fn_.to_string(),
        s.tpr.to_string(),
        s.fpr.to_string(),
        s.mcc.to_string(),
    ])
}

/// Per-epoch train and test rows, the selected row and, when present, the
/// oracle row of every report. Wall times are left blank unless
/// `with_seconds`.
pub fn write_trials_csv<W: Write>(mut w: W, cfg: &Config, reports: &[TrialReport], with_seconds: bool) -> Result<()> {
    w.write_all(provenance(cfg, reports).as_bytes())?;
    let mut out = csv::Writer::from_writer(w);
    out.write_record(TRIAL_COLUMNS)?;
    for r in reports {
        let mut row = |epoch: usize, split: &str, c: &ConfusionCounts, seconds: String| -> Result<()> {
            let mut rec = vec![
                r.trial.to_string(),
                r.level.to_string(),
                r.protocol.name().to_string(),
                r.tau_days.to_string(),
                epoch.to_string(),
                split.to_string(),
            ];
            rec.extend(counts_fields(c)?);
            rec.push(seconds);
            out.write_record(&rec)?;
            Ok(())
        };
        for e in &r.curve {
            row(e.epoch, "train", &e.train, String::new())?;
            row(e.epoch, "test", &e.test, String::new())?;
        }
        let seconds = if with_seconds { format!("{:.3}", r.seconds) } else { String::new() };
        row(r.selected_epoch, "selected", &r.counts, seconds)?;
        if let Some(o) = &r.oracle {
            row(r.selected_epoch, "oracle", o, String::new())?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Counts of a reloaded model on one trial's test years.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub trial: usize,
    pub level: f64,
    pub protocol: Protocol,
    pub tau: usize,
    pub epoch: usize,
    pub counts: ConfusionCounts,
}

/// Trial-shaped CSV with one `final` row per evaluated model.
pub fn write_evaluation_csv<W: Write>(mut w: W, cfg: &Config, rows: &[EvalRow]) -> Result<()> {
    w.write_all(provenance(cfg, &[]).as_bytes())?;
    let mut out = csv::Writer::from_writer(w);
    out.write_record(TRIAL_COLUMNS)?;
    for r in rows {
        let mut rec = vec![
            r.trial.to_string(),
            r.level.to_string(),
            r.protocol.name().to_string(),
            r.tau.to_string(),
            r.epoch.to_string(),
            "final".to_string(),
        ];
        rec.extend(counts_fields(&r.counts)?);
        rec.push(String::new());
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_summary_csv<W: Write>(mut w: W, cfg: &Config, reports: &[TrialReport], rows: &[SummaryRow]) -> Result<()> {
    w.write_all(provenance(cfg, reports).as_bytes())?;
    let mut out = csv::Writer::from_writer(w);
    out.write_record(SUMMARY_COLUMNS)?;
    for r in rows {
        out.write_record([
            r.level.to_string(),
            r.protocol.name().to_string(),
            r.tau_days.to_string(),
            r.mcc.mean.to_string(),
            r.mcc.std.to_string(),
            r.mcc.median.to_string(),
            r.mcc.max_abs_dev.to_string(),
            r.tpr.mean.to_string(),
            r.tpr.std.to_string(),
            r.fpr.mean.to_string(),
            r.fpr.std.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialRow {
    pub trial: usize,
    pub level: f64,
    pub protocol: Protocol,
    pub tau: usize,
    pub epoch: usize,
    pub split: String,
    pub counts: ConfusionCounts,
    pub tpr: f64,
    pub fpr: f64,
    pub mcc: f64,
    pub seconds: Option<f64>,
}

/// A parsed trials CSV.
#[derive(Debug, Clone)]
pub struct TrialTable {
    pub name: String,
    pub config: Config,
    pub config_hash: String,
    pub rows: Vec<TrialRow>,
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize) -> Result<T> {
    let s = rec.get(i).ok_or_else(|| Error::Format(format!("missing column {}", TRIAL_COLUMNS[i])))?;
    s.parse().map_err(|_| Error::Format(format!("bad {} value {s:?}", TRIAL_COLUMNS[i])))
}

pub fn read_trials_csv(name: &str, text: &str) -> Result<TrialTable> {
    let mut hash = None;
    let mut config = None;
    let mut body = String::new();
    for line in text.lines() {
        if let Some(c) = line.strip_prefix("# config_sha256=") {
            hash = Some(c.trim().to_string());
        } else if let Some(c) = line.strip_prefix("# config ") {
            config = Some(Config::from_inline(c.trim())?);
        } else if !line.starts_with('#') {
            body.push_str(line);
            body.push('\n');
        }
    }
    let config = config.ok_or_else(|| Error::Format(format!("{name}: no config comment line")))?;
    let config_hash = hash.ok_or_else(|| Error::Format(format!("{name}: no config hash line")))?;
    if config.hash() != config_hash {
        return Err(Error::Format(format!("{name}: config does not match its recorded hash")));
    }
    let mut rdr = csv::Reader::from_reader(body.as_bytes());
    if rdr.headers()?.iter().collect::<Vec<_>>() != TRIAL_COLUMNS {
        return Err(Error::Format(format!("{name}: unexpected header")));
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        rows.push(TrialRow {
            trial: field(&rec, 0)?,
            level: field(&rec, 1)?,
            protocol: Protocol::parse(&field::<String>(&rec, 2)?)?,
            tau: field(&rec, 3)?,
            epoch: field(&rec, 4)?,
            split: field(&rec, 5)?,
            counts: ConfusionCounts { tp: field(&rec, 6)?, fp: field(&rec, 7)?, tn: field(&rec, 8)?, fn_: field(&rec, 9)? },
            tpr: field(&rec, 10)?,
            fpr: field(&rec, 11)?,
            mcc: field(&rec, 12)?,
            seconds: rec.get(13).and_then(|s| s.parse().ok()),
        });
    }
    Ok(TrialTable { name: name.to_string(), config, config_hash, rows })
}

/// Aggregated selected rows of one run at one (protocol, level, lead).
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub run: String,
    pub protocol: Protocol,
    pub level: f64,
    pub tau: usize,
    pub transfer: bool,
    pub imbalance_ratio: Option<f64>,
    pub n_trials: usize,
    pub mcc: Stats,
    pub tpr: Stats,
    pub fpr: Stats,
    pub oracle_mcc: Option<Stats>,
}

pub fn cells(table: &TrialTable) -> Vec<Cell> {
    let mut groups: BTreeMap<(String, u64, usize), Vec<&TrialRow>> = BTreeMap::new();
    let mut oracle: BTreeMap<(String, u64, usize), Vec<f64>> = BTreeMap::new();
    for r in &table.rows {
        let key = (r.protocol.name().to_string(), r.level.to_bits(), r.tau);
        match r.split.as_str() {
            "selected" => groups.entry(key).or_default().push(r),
            "oracle" => oracle.entry(key).or_default().push(r.mcc),
            _ => {}
        }
    }
    let e = &table.config.experiment;
    groups
        .into_iter()
        .map(|(key, rows)| {
            let pick = |f: fn(&TrialRow) -> f64| Stats::of(&rows.iter().map(|r| f(r)).collect::<Vec<_>>());
            Cell {
                run: table.name.clone(),
                protocol: rows[0].protocol,
                level: rows[0].level,
                tau: rows[0].tau,
                transfer: e.transfer,
                imbalance_ratio: e.imbalance_ratio,
                n_trials: rows.len(),
                mcc: pick(|r| r.mcc),
                tpr: pick(|r| r.tpr),
                fpr: pick(|r| r.fpr),
                oracle_mcc: oracle.get(&key).map(|v| Stats::of(v)),
            }
        })
        .collect()
}

/// Per-epoch test MCC dispersion of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochPoint {
    pub run: String,
    pub protocol: Protocol,
    pub level: f64,
    pub tau: usize,
    pub epoch: usize,
    pub mcc: Stats,
}

pub fn epoch_series(table: &TrialTable) -> Vec<EpochPoint> {
    let mut groups: BTreeMap<(String, u64, usize, usize), Vec<f64>> = BTreeMap::new();
    for r in table.rows.iter().filter(|r| r.split == "test") {
        groups.entry((r.protocol.name().to_string(), r.level.to_bits(), r.tau, r.epoch)).or_default().push(r.mcc);
    }
    groups
        .into_iter()
        .map(|((p, level, tau, epoch), v)| EpochPoint {
            run: table.name.clone(),
            protocol: Protocol::parse(&p).expect("name round-trips"),
            level: f64::from_bits(level),
            tau,
            epoch,
            mcc: Stats::of(&v),
        })
        .collect()
}

fn ratio_str(r: Option<f64>) -> String {
    r.map_or("none".into(), |r| r.to_string())
}

fn write_cells<W: Write>(mut w: W, comment: &str, cells: &[&Cell]) -> Result<()> {
    w.write_all(comment.as_bytes())?;
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "run",
        "protocol",
        "transfer",
        "imbalance_ratio",
        "level",
        "tau",
        "n_trials",
        "mean_mcc",
        "std_mcc",
        "median_mcc",
        "maxabsdev_mcc",
        "mean_tpr",
        "std_tpr",
        "mean_fpr",
        "std_fpr",
        "oracle_mean_mcc",
    ])?;
    for c in cells {
        out.write_record([
            c.run.clone(),
            c.protocol.name().into(),
            c.transfer.to_string(),
            ratio_str(c.imbalance_ratio),
            c.level.to_string(),
            c.tau.to_string(),
            c.n_trials.to_string(),
            c.mcc.mean.to_string(),
            c.mcc.std.to_string(),
            c.mcc.median.to_string(),
            c.mcc.max_abs_dev.to_string(),
            c.tpr.mean.to_string(),
            c.tpr.std.to_string(),
            c.fpr.mean.to_string(),
            c.fpr.std.to_string(),
            c.oracle_mcc.map_or(String::new(), |s| s.mean.to_string()),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Files written by [`write_report`].
pub const REPORT_FILES: [&str; 6] =
    ["table1_fields.csv", "table2_combined.csv", "table3_imbalance.csv", "fig3_epochs.csv", "fig4_tau_mcc.csv", "fig5_tau_rates.csv"];

/// Reshapes trial tables into table and figure series under `dir`.
/// `inputs` pairs each table with the checksum of its source file.
pub fn write_report(dir: &Path, inputs: &[(TrialTable, String)]) -> Result<()> {
    let comment: String = std::iter::once("# report inputs (sha256)\n".to_string())
        .chain(inputs.iter().map(|(t, sum)| format!("# {} {sum}\n", t.name)))
        .collect();
    let all: Vec<Cell> = inputs.iter().flat_map(|(t, _)| cells(t)).collect();
    let create = |name: &str| -> Result<std::io::BufWriter<std::fs::File>> {
        Ok(std::io::BufWriter::new(std::fs::File::create(dir.join(name))?))
    };
    let select = |f: &dyn Fn(&Cell) -> bool| all.iter().filter(|c| f(c)).collect::<Vec<_>>();
    write_cells(
        create(REPORT_FILES[0])?,
        &comment,
        &select(&|c| matches!(c.protocol, Protocol::P1 | Protocol::P2 | Protocol::And)),
    )?;
    write_cells(create(REPORT_FILES[1])?, &comment, &select(&|c| matches!(c.protocol, Protocol::P3 | Protocol::P4)))?;
    let mut imbalance = select(&|_| true);
    imbalance.sort_by(|a, b| {
        (a.protocol.name(), a.tau, b.level.to_bits())
            .cmp(&(b.protocol.name(), b.tau, a.level.to_bits()))
            .then(a.imbalance_ratio.unwrap_or(f64::INFINITY).total_cmp(&b.imbalance_ratio.unwrap_or(f64::INFINITY)))
    });
    write_cells(create(REPORT_FILES[2])?, &comment, &imbalance)?;

    let mut w = create(REPORT_FILES[3])?;
    w.write_all(comment.as_bytes())?;
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["run", "protocol", "level", "tau", "epoch", "mean_mcc", "std_mcc", "median_mcc", "maxabsdev_mcc"])?;
    for (t, _) in inputs {
        for p in epoch_series(t) {
            out.write_record([
                p.run,
                p.protocol.name().into(),
                p.level.to_string(),
                p.tau.to_string(),
                p.epoch.to_string(),
                p.mcc.mean.to_string(),
                p.mcc.std.to_string(),
                p.mcc.median.to_string(),
                p.mcc.max_abs_dev.to_string(),
            ])?;
        }
    }
    out.flush()?;

    let mut by_tau = select(&|_| true);
    by_tau.sort_by(|a, b| (&a.run, a.protocol.name(), b.level.to_bits(), a.tau).cmp(&(&b.run, b.protocol.name(), a.level.to_bits(), b.tau)));
    let mut w = create(REPORT_FILES[4])?;
    w.write_all(comment.as_bytes())?;
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["run", "protocol", "level", "tau", "median_mcc", "maxabsdev_mcc", "mean_mcc", "std_mcc"])?;
    for c in &by_tau {
        out.write_record([
            c.run.clone(),
            c.protocol.name().into(),
            c.level.to_string(),
            c.tau.to_string(),
            c.mcc.median.to_string(),
            c.mcc.max_abs_dev.to_string(),
            c.mcc.mean.to_string(),
            c.mcc.std.to_string(),
        ])?;
    }
    out.flush()?;
    let mut w = create(REPORT_FILES[5])?;
    w.write_all(comment.as_bytes())?;
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["run", "protocol", "level", "tau", "mean_tpr", "std_tpr", "mean_fpr", "std_fpr"])?;
    for c in &by_tau {
        out.write_record([
            c.run.clone(),
            c.protocol.name().into(),
            c.level.to_string(),
            c.tau.to_string(),
            c.tpr.mean.to_string(),
            c.tpr.std.to_string(),
            c.fpr.mean.to_string(),
            c.fpr.std.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}
