//! `heatcast`: generate synthetic archives, label heatwaves, build spectral
//! features, train and evaluate classifiers, sweep lead times and reshape
//! results into report tables.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use rayon::prelude::*;

use heatcast_core::archive::FieldArchive;
use heatcast_core::config::Config;
use heatcast_core::features::{FeatureStore, Protocol};
use heatcast_core::labeling::{make_labels, LabelSet};
use heatcast_core::nn::{load_checkpoint, save_checkpoint};
use heatcast_core::pipeline::{
    run_trial_with_models, summarize, tau_sweep, trial_split, year_samples, ExperimentData, Model, OracleContext,
    SampleSource, Standardizer, TrialReport, TrainJob,
};
use heatcast_core::report::{self, EvalRow};
use heatcast_core::synth::{generate, Generator, OracleRecords, TS};

#[derive(Parser)]
#[command(name = "heatcast", version, about = "Heatwave forecasting experiments on synthetic climate archives")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,

    /// Key = value config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one config key; repeatable and applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,

    /// Trials run in parallel.
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// One worker, and wall times kept out of result files.
    #[arg(long, global = true)]
    strict_deterministic: bool,

    /// Artifact directory.
    #[arg(long, global = true, default_value = "heatcast-out")]
    out: PathBuf,
}

#[derive(Subcommand, Clone, Copy, PartialEq, Eq)]
enum Verb {
    /// Synthetic field archive and oracle sidecar.
    Generate,
    /// Heatwave labels and thresholds.
    Label,
    /// Spectral feature stores for every configured lead time.
    Features,
    /// Trials at the configured protocol, levels and lead time.
    Train,
    /// Reload trained checkpoints and score them on their test years.
    Evaluate,
    /// Trials at every lead time in `tau_list`.
    Sweep,
    /// Table- and figure-shaped CSVs from every trial file.
    Report,
    /// Print the normalized config or every violation.
    Validate,
}

impl Verb {
    fn name(self) -> &'static str {
        match self {
            Verb::Generate => "generate",
            Verb::Label => "label",
            Verb::Features => "features",
            Verb::Train => "train",
            Verb::Evaluate => "evaluate",
            Verb::Sweep => "sweep",
            Verb::Report => "report",
            Verb::Validate => "validate",
        }
    }
}

struct Layout {
    out: PathBuf,
}

impl Layout {
    fn archive(&self) -> PathBuf {
        self.out.join("archive.hcst")
    }
    fn oracle(&self) -> PathBuf {
        self.out.join("oracle.bin")
    }
    fn labels(&self) -> PathBuf {
        self.out.join("labels")
    }
    fn thresholds(&self) -> PathBuf {
        self.labels().join("thresholds.json")
    }
    fn features(&self) -> PathBuf {
        self.out.join("features")
    }
    fn store(&self, tau: usize) -> PathBuf {
        self.features().join(format!("tau_{tau}.hcfs"))
    }
    fn checkpoints(&self, tag: &str) -> PathBuf {
        self.out.join("checkpoints").join(tag)
    }
    fn checkpoint(&self, tag: &str, trial: usize, level: usize, member: usize) -> PathBuf {
        self.checkpoints(tag).join(format!("t{trial}_l{level}_m{member}.hcnn"))
    }
}

fn require(path: &Path, producer: Verb) -> Result<()> {
    if !path.exists() {
        bail!("missing {}: run `heatcast {}` first", path.display(), producer.name());
    }
    Ok(())
}

/// Identifies a train or sweep run among others in the same directory.
fn run_tag(cfg: &Config, tau: Option<usize>) -> String {
    let e = &cfg.experiment;
    let ratio = e.imbalance_ratio.map_or("none".to_string(), |r| r.to_string());
    let mode = if e.transfer { "transfer" } else { "scratch" };
    match tau {
        Some(t) => format!("{}_tau{t}_r{ratio}_{mode}", e.protocol),
        None => format!("sweep_{}_r{ratio}_{mode}", e.protocol),
    }
}

fn load_config(cli: &Cli) -> Result<Config> {
    let mut overrides = cli.set.clone();
    if let Some(w) = cli.workers {
        overrides.push(format!("workers={w}"));
    }
    if cli.strict_deterministic {
        overrides.push("workers=1".into());
    }
    Config::load_file(cli.config.as_deref(), &overrides).map_err(|issues| {
        for i in &issues {
            eprintln!("config error: {i}");
        }
        anyhow::anyhow!("{} config error(s)", issues.len())
    })
}

fn load_archive(layout: &Layout) -> Result<FieldArchive> {
    require(&layout.archive(), Verb::Generate)?;
    FieldArchive::load(&layout.archive()).with_context(|| format!("reading {}", layout.archive().display()))
}

/// Labels recomputed from the archive, checked against the `label` output.
fn load_labels(layout: &Layout, cfg: &Config, archive: &FieldArchive) -> Result<LabelSet> {
    require(&layout.thresholds(), Verb::Label)?;
    let labels = compute_labels(cfg, archive)?;
    if fs::read_to_string(layout.thresholds())?.trim_end() != labels.thresholds_json()? {
        bail!("{} does not match the current config: rerun `heatcast label`", layout.thresholds().display());
    }
    Ok(labels)
}

fn compute_labels(cfg: &Config, archive: &FieldArchive) -> Result<LabelSet> {
    let ts = archive.variable(TS)?;
    let clim = archive.climatology(ts)?;
    Ok(make_labels(archive, ts, &clim, &cfg.heatwave()?)?)
}

fn load_data(layout: &Layout, cfg: &Config, taus: &[usize]) -> Result<ExperimentData> {
    let archive = load_archive(layout)?;
    let labels = load_labels(layout, cfg, &archive)?;
    let mut stores = BTreeMap::new();
    for &tau in taus {
        require(&layout.store(tau), Verb::Features)?;
        let store = FeatureStore::load(&layout.store(tau))?;
        if store.n_years != labels.n_years || store.season_samples != labels.season_samples || store.tau_days != tau {
            bail!("{} does not match the labels: rerun `heatcast features`", layout.store(tau).display());
        }
        stores.insert(tau, store);
    }
    let oracle = if layout.oracle().exists() {
        Some(OracleContext {
            records: OracleRecords::load(&layout.oracle())?,
            model: Generator::new(cfg.synth.clone())?.oracle_model(),
            d_days: cfg.d_days,
        })
    } else {
        None
    };
    Ok(ExperimentData { labels, stores, oracle })
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(fs::File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn write_results(layout: &Layout, cfg: &Config, tag: &str, reports: &[TrialReport], with_seconds: bool) -> Result<()> {
    let trials = layout.out.join(format!("trials_{tag}.csv"));
    let mut w = create(&trials)?;
    report::write_trials_csv(&mut w, cfg, reports, with_seconds)?;
    w.flush()?;
    let summary = layout.out.join(format!("summary_{tag}.csv"));
    let mut w = create(&summary)?;
    report::write_summary_csv(&mut w, cfg, reports, &summarize(reports))?;
    w.flush()?;
    for row in summarize(reports) {
        println!(
            "{} level {} tau {}: MCC {:.3} +- {:.3} (median {:.3}), TPR {:.3}, FPR {:.3}, {} trials",
            row.protocol, row.level, row.tau_days, row.mcc.mean, row.mcc.std, row.mcc.median, row.tpr.mean, row.fpr.mean, row.n_trials
        );
    }
    println!("wrote {} and {}", trials.display(), summary.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let layout = Layout { out: cli.out.clone() };
    let with_seconds = !cli.strict_deterministic;
    if cli.verb != Verb::Validate {
        fs::create_dir_all(&layout.out)?;
    }
    match cli.verb {
        Verb::Validate => print!("{}", cfg.normalized()),
        Verb::Generate => {
            let (archive, oracle) = generate(&cfg.synth, cfg.n_years)?;
            archive.save(&layout.archive())?;
            oracle.save(&layout.oracle())?;
            println!("wrote {} ({} years) and {}", layout.archive().display(), cfg.n_years, layout.oracle().display());
        }
        Verb::Label => {
            let archive = load_archive(&layout)?;
            let labels = compute_labels(&cfg, &archive)?;
            fs::create_dir_all(layout.labels())?;
            labels.export(&layout.labels(), &format!("# config_sha256={}", cfg.hash()))?;
            for t in &labels.thresholds {
                println!("level {}: a = {:.4} K, {} of {} samples positive", t.level, t.a_kelvin, t.n_positive, t.n_total);
            }
        }
        Verb::Features => {
            let archive = load_archive(&layout)?;
            let labels = load_labels(&layout, &cfg, &archive)?;
            let vars = [archive.variable(TS)?, archive.variable(heatcast_core::synth::ZG)?];
            let clims = [archive.climatology(vars[0])?, archive.climatology(vars[1])?];
            let predictor = cfg.predictor()?;
            let mut taus = cfg.tau_list.clone();
            taus.push(cfg.experiment.tau_days);
            taus.sort_unstable();
            taus.dedup();
            fs::create_dir_all(layout.features())?;
            for tau in taus {
                let store = FeatureStore::build(
                    &archive,
                    [&clims[0], &clims[1]],
                    vars,
                    &predictor,
                    cfg.spectral_rows,
                    cfg.spectral_cols,
                    tau,
                    &labels,
                )?;
                store.save(&layout.store(tau))?;
                if tau == cfg.experiment.tau_days && cfg.experiment.protocol != Protocol::And {
                    let dump = layout.features().join(format!("inputs_{}_tau{tau}.bin", cfg.experiment.protocol));
                    let mut w = create(&dump)?;
                    store.write_dump(cfg.experiment.protocol, &mut w)?;
                    w.flush()?;
                }
                println!("wrote {}", layout.store(tau).display());
            }
        }
        Verb::Train => {
            let tau = cfg.experiment.tau_days;
            let data = load_data(&layout, &cfg, &[tau])?;
            let tag = run_tag(&cfg, Some(tau));
            let e = &cfg.experiment;
            let pool = rayon::ThreadPoolBuilder::new().num_threads(e.workers).build()?;
            let per_trial: Vec<_> =
                pool.install(|| (0..e.n_trials).into_par_iter().map(|t| run_trial_with_models(&data, e, t)).collect());
            let mut reports = Vec::new();
            for (trial, result) in per_trial.into_iter().enumerate() {
                let (r, models) = result?;
                reports.extend(r);
                for (level, model) in models {
                    for (k, m) in model.members.iter().enumerate() {
                        let path = layout.checkpoint(&tag, trial, level, k);
                        fs::create_dir_all(path.parent().expect("checkpoint dir"))?;
                        save_checkpoint(&m.net, None, &path)?;
                    }
                }
            }
            write_results(&layout, &cfg, &tag, &reports, with_seconds)?;
        }
        Verb::Evaluate => {
            let tau = cfg.experiment.tau_days;
            let tag = run_tag(&cfg, Some(tau));
            require(&layout.checkpoints(&tag), Verb::Train)?;
            let data = load_data(&layout, &cfg, &[tau])?;
            let store = data.store(tau)?;
            let e = &cfg.experiment;
            let n_members = if e.protocol == Protocol::And { 2 } else { 1 };
            let mut rows = Vec::new();
            for trial in 0..e.n_trials {
                let split = trial_split(&data.labels, e, trial)?;
                let scaler = Standardizer::fit(store, &year_samples(&data.labels, &split.train));
                let test = year_samples(&data.labels, &split.test);
                for &level in &e.levels {
                    let mut nets = Vec::new();
                    for k in 0..n_members {
                        let path = layout.checkpoint(&tag, trial, level, k);
                        require(&path, Verb::Train)?;
                        nets.push(load_checkpoint::<f32>(&path)?.0);
                    }
                    let epoch = nets[0].epoch as usize;
                    let model = Model::from_networks(e.protocol, nets, store.rows, store.cols)?;
                    let job = TrainJob {
                        source: SampleSource { store, scaler: &scaler },
                        labels: &data.labels.labels[level],
                        train: &[],
                        test: &test,
                        test_years: &split.test,
                    };
                    let counts = job.evaluate(&model, &test, e.train.eval_batch)?;
                    rows.push(EvalRow {
                        trial,
                        level: data.labels.thresholds[level].level,
                        protocol: e.protocol,
                        tau,
                        epoch,
                        counts,
                    });
                }
            }
            let path = layout.out.join(format!("evaluation_{tag}.csv"));
            let mut w = create(&path)?;
            report::write_evaluation_csv(&mut w, &cfg, &rows)?;
            w.flush()?;
            println!("wrote {} ({} models)", path.display(), rows.len());
        }
        Verb::Sweep => {
            let data = load_data(&layout, &cfg, &cfg.tau_list)?;
            let reports = tau_sweep(&data, &cfg.experiment, &cfg.tau_list)?;
            write_results(&layout, &cfg, &run_tag(&cfg, None), &reports, with_seconds)?;
        }
        Verb::Report => {
            let mut inputs = Vec::new();
            let mut names: Vec<PathBuf> = fs::read_dir(&layout.out)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    p.file_name()
                        .and_then(|n| n.to_str())
                        .is_some_and(|n| n.starts_with("trials_") && n.ends_with(".csv"))
                })
                .collect();
            names.sort();
            if names.is_empty() {
                bail!("no trials_*.csv in {}: run `heatcast train` or `heatcast sweep` first", layout.out.display());
            }
            for path in names {
                let bytes = fs::read(&path)?;
                let name = path.file_stem().and_then(|n| n.to_str()).unwrap_or_default().to_string();
                let table = report::read_trials_csv(&name, std::str::from_utf8(&bytes)?)?;
                inputs.push((table, report::sha256_hex(&bytes)));
            }
            let dir = layout.out.join("report");
            fs::create_dir_all(&dir)?;
            report::write_report(&dir, &inputs)?;
            println!("wrote {} files under {} from {} trial files", report::REPORT_FILES.len(), dir.display(), inputs.len());
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let start = Instant::now();
    let result = run(&cli);
    if cli.verb != Verb::Validate && cli.out.is_dir() {
        let line = format!(
            "{} {} {:.3}s\n",
            cli.verb.name(),
            if result.is_ok() { "ok" } else { "failed" },
            start.elapsed().as_secs_f64()
        );
        let log = fs::OpenOptions::new().create(true).append(true).open(cli.out.join("heatcast.log"));
        if let Ok(mut f) = log {
            let _ = f.write_all(line.as_bytes());
        }
    }
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
