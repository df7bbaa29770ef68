use heatcast_core::features::{FeatureStore, Protocol};
use heatcast_core::grid::{AreaWeighting, Region};
use heatcast_core::labeling::{make_labels, HeatwaveConfig, LabelSet};
use heatcast_core::nn::{read_checkpoint, write_checkpoint, Network};
use heatcast_core::pipeline::*;
use heatcast_core::synth::{generate, SynthConfig, TS};
use heatcast_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEASON: usize = 20;
const YEARS: usize = 10;
const SIDE: usize = 16;

/// Ten years of twenty samples; positives carry a +1 offset on every
/// temperature coefficient, negatives -1, both with small noise.
fn toy() -> (FeatureStore, LabelSet) {
    let n = YEARS * SEASON;
    let per = 2 * SIDE * SIDE;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let z: Vec<bool> = (0..n).map(|i| i % 4 == 0).collect();
    let mut ts = Vec::with_capacity(n * per);
    let mut zg = Vec::with_capacity(n * per);
    for &pos in &z {
        let mean = if pos { 1.0 } else { -1.0 };
        ts.extend((0..per).map(|_| mean + 0.3 * (rng.random::<f32>() - 0.5)));
        zg.extend((0..per).map(|_| rng.random::<f32>() - 0.5));
    }
    let store = FeatureStore { rows: SIDE, cols: SIDE, tau_days: 0, n_years: YEARS, season_samples: SEASON, ts, zg };
    let labels = LabelSet {
        n_years: YEARS,
        season_samples: SEASON,
        season_start: 0,
        samples_per_day: 1,
        y: z.iter().map(|&p| if p { 1.0 } else { 0.0 }).collect(),
        thresholds: vec![],
        labels: vec![z.clone(), z],
    };
    (store, labels)
}

fn samples_of(years: &[usize]) -> Vec<usize> {
    years.iter().flat_map(|&y| y * SEASON..(y + 1) * SEASON).collect()
}

fn fast() -> TrainConfig {
    let mut cfg = TrainConfig { batch_size: 16, ..TrainConfig::default() };
    cfg.optimizer.learning_rate = 1e-3;
    cfg
}

#[test]
fn separable_toy_reaches_perfect_train_mcc() {
    let (store, labels) = toy();
    let scaler = Standardizer::identity(store.per_field());
    let train = samples_of(&(0..9).collect::<Vec<_>>());
    let test = samples_of(&[9]);
    let job = TrainJob {
        source: SampleSource { store: &store, scaler: &scaler },
        labels: &labels.labels[0],
        train: &train,
        test: &test,
        test_years: &[9],
    };
    let mut model = Model::new(Protocol::P1, SIDE, SIDE, &fast().arch, 1).unwrap();
    let curve = train_model(&mut model, &job, 50, &fast(), 2).unwrap();
    let first = curve.iter().position(|e| mcc(&e.train) == 1.0);
    assert!(first.is_some(), "train MCC never reached 1: {:?}", curve.iter().map(|e| mcc(&e.train)).collect::<Vec<_>>());
}

#[test]
fn zero_epochs_is_identity() {
    let (store, labels) = toy();
    let scaler = Standardizer::identity(store.per_field());
    let train = samples_of(&[0, 1, 2]);
    let test = samples_of(&[3]);
    let job = TrainJob {
        source: SampleSource { store: &store, scaler: &scaler },
        labels: &labels.labels[0],
        train: &train,
        test: &test,
        test_years: &[3],
    };
    let mut model = Model::new(Protocol::P4, SIDE, SIDE, &fast().arch, 5).unwrap();
    let before = model.clone();
    assert!(train_model(&mut model, &job, 0, &fast(), 0).unwrap().is_empty());
    assert_eq!(model, before);
}

#[test]
fn training_batches_never_see_test_years() {
    let (store, labels) = toy();
    let scaler = Standardizer::identity(store.per_field());
    let train = samples_of(&[0, 1, 2]);
    let test = samples_of(&[2]);
    let job = TrainJob {
        source: SampleSource { store: &store, scaler: &scaler },
        labels: &labels.labels[0],
        train: &train,
        test: &test,
        test_years: &[2],
    };
    let mut model = Model::new(Protocol::P1, SIDE, SIDE, &fast().arch, 5).unwrap();
    assert!(matches!(train_model(&mut model, &job, 1, &fast(), 0), Err(Error::Leakage { year: 2 })));
}

#[test]
fn warm_start_predictions_match_donor() {
    let (store, labels) = toy();
    let scaler = Standardizer::identity(store.per_field());
    let train = samples_of(&[0, 1, 2, 3]);
    let test = samples_of(&[4, 5]);
    let job = TrainJob {
        source: SampleSource { store: &store, scaler: &scaler },
        labels: &labels.labels[0],
        train: &train,
        test: &test,
        test_years: &[4, 5],
    };
    let mut donor = Model::new(Protocol::P3, SIDE, SIDE, &fast().arch, 3).unwrap();
    train_model(&mut donor, &job, 2, &fast(), 4).unwrap();
    let mut bytes = Vec::new();
    write_checkpoint(&donor.members[0].net, None, &mut bytes).unwrap();
    let (net, _) = read_checkpoint::<f32, _>(&mut bytes.as_slice()).unwrap();
    let restored = Model::from_networks(Protocol::P3, vec![net.clone()], SIDE, SIDE).unwrap();
    let src = job.source;
    assert_eq!(
        restored.member_probabilities(src, &test, 64).unwrap(),
        donor.member_probabilities(src, &test, 64).unwrap()
    );
    // a two-tower network cannot stand in for a stacked single-tower one
    assert!(matches!(Model::from_networks(Protocol::P4, vec![net.clone()], SIDE, SIDE), Err(Error::Checkpoint(_))));
    assert!(matches!(Model::from_networks(Protocol::P3, vec![net], 8, 8), Err(Error::Checkpoint(_))));
}

fn chain_fixture() -> (FeatureStore, LabelSet, Vec<usize>, Vec<usize>) {
    let (store, labels) = toy();
    (store, labels, samples_of(&[0, 1, 2, 3, 4, 5]), samples_of(&[6, 7]))
}

#[test]
fn pass_through_chain_keeps_first_link() {
    let (store, labels, train, test) = chain_fixture();
    let scaler = Standardizer::identity(store.per_field());
    let jobs: Vec<TrainJob> = (0..3)
        .map(|_| TrainJob {
            source: SampleSource { store: &store, scaler: &scaler },
            labels: &labels.labels[0],
            train: &train,
            test: &test,
            test_years: &[6, 7],
        })
        .collect();
    let initial = Model::new(Protocol::P4, SIDE, SIDE, &fast().arch, 8).unwrap();
    let out = transfer_chain(initial.clone(), &[0.05, 0.025, 0.0125], &jobs, &[2, 0, 0], &fast(), &[1, 2, 3]).unwrap();
    assert_eq!(out.len(), 3);
    assert_ne!(out[0].0, initial);
    assert_eq!(out[2].0, out[0].0);
    assert!(out[1].1.is_empty() && out[2].1.is_empty());

    let again = transfer_chain(initial.clone(), &[0.05, 0.025, 0.0125], &jobs, &[2, 0, 0], &fast(), &[1, 2, 3]).unwrap();
    assert_eq!(again.last().unwrap().0, out.last().unwrap().0);

    let misordered = transfer_chain(initial.clone(), &[0.025, 0.05, 0.0125], &jobs, &[1, 1, 1], &fast(), &[1, 2, 3]);
    assert!(matches!(misordered, Err(Error::ChainOrder(_))));
    let short = transfer_chain(initial, &[0.05, 0.025, 0.0125], &jobs[..2], &[1, 1, 1], &fast(), &[1, 2, 3]);
    assert!(matches!(short, Err(Error::ChainOrder(_))));
}

#[test]
fn and_mode_true_positives_bounded_by_members() {
    let (store, labels, train, test) = chain_fixture();
    let scaler = Standardizer::identity(store.per_field());
    let job = TrainJob {
        source: SampleSource { store: &store, scaler: &scaler },
        labels: &labels.labels[0],
        train: &train,
        test: &test,
        test_years: &[6, 7],
    };
    let mut model = Model::new(Protocol::And, SIDE, SIDE, &fast().arch, 11).unwrap();
    train_model(&mut model, &job, 3, &fast(), 12).unwrap();
    let actual: Vec<bool> = test.iter().map(|&s| labels.labels[0][s]).collect();
    let probs = model.member_probabilities(job.source, &test, 64).unwrap();
    let tp = |pred: &[bool]| ConfusionCounts::from_predictions(pred, &actual).tp;
    let members: Vec<u64> = probs.iter().map(|q| tp(&predict_labels(q))).collect();
    let combined = tp(&model.predict(job.source, &test, 64).unwrap());
    assert!(combined <= *members.iter().min().unwrap(), "{combined} vs {members:?}");
}

fn small_experiment(n_years: usize, taus: &[usize]) -> ExperimentData {
    let synth = SynthConfig::default();
    let (archive, _) = generate(&synth, n_years).unwrap();
    let ts = archive.variable(TS).unwrap();
    let clim = archive.climatology(ts).unwrap();
    let hw = HeatwaveConfig::new(synth.target_region().unwrap(), 14, vec![0.05, 0.025, 0.0125]).unwrap();
    let labels = make_labels(&archive, ts, &clim, &hw).unwrap();
    let predictor = Region::above_latitude(&synth.spec, 30.0, AreaWeighting::CosLatitude).unwrap();
    ExperimentData::build(&archive, labels, &predictor, 16, 16, taus, None).unwrap()
}

fn small_config() -> ExperimentConfig {
    ExperimentConfig {
        levels: vec![0],
        transfer: false,
        n_train_years: 8,
        n_test_years: 2,
        epochs_first: 1,
        n_trials: 3,
        ..ExperimentConfig::default()
    }
}

#[test]
fn trial_statistics() {
    let data = small_experiment(10, &[0, 5]);
    let single = run_trials(&data, &ExperimentConfig { n_trials: 1, ..small_config() }).unwrap();
    let s = &summarize(&single)[0];
    assert_eq!((s.mcc.std, s.mcc.max_abs_dev, s.tpr.std, s.fpr.std), (0.0, 0.0, 0.0, 0.0));

    let same = run_trials(&data, &ExperimentConfig { vary_seeds: false, ..small_config() }).unwrap();
    assert!(same.windows(2).all(|w| w[0].counts == w[1].counts && w[0].seeds == w[1].seeds));
    assert_eq!(summarize(&same)[0].mcc.std, 0.0);

    let varied = run_trials(&data, &small_config()).unwrap();
    assert_eq!(varied.len(), 3);
    assert!(varied.windows(2).all(|w| w[0].seeds.split != w[1].seeds.split));
    let rerun = run_trials(&data, &ExperimentConfig { workers: 2, ..small_config() }).unwrap();
    assert_eq!(
        varied.iter().map(|r| r.counts).collect::<Vec<_>>(),
        rerun.iter().map(|r| r.counts).collect::<Vec<_>>()
    );

    let sweep = tau_sweep(&data, &small_config(), &[0]).unwrap();
    assert_eq!(sweep.iter().map(|r| r.counts).collect::<Vec<_>>(), varied.iter().map(|r| r.counts).collect::<Vec<_>>());
    assert!(matches!(tau_sweep(&data, &small_config(), &[0, 10]), Err(Error::Bounds(_))));
}

#[test]
fn transfer_trial_reports_requested_levels() {
    let data = small_experiment(10, &[0]);
    let cfg = ExperimentConfig {
        levels: vec![0, 2],
        transfer: true,
        epochs_first: 1,
        epochs_transfer: 1,
        n_trials: 1,
        ..small_config()
    };
    let reports = run_trial(&data, &cfg, 0).unwrap();
    assert_eq!(reports.iter().map(|r| r.level_index).collect::<Vec<_>>(), vec![0, 2]);
    assert!(reports.iter().all(|r| r.selected_epoch == r.curve.len()));
    let bad = ExperimentConfig { levels: vec![2, 0], ..cfg };
    assert!(matches!(run_trial(&data, &bad, 0), Err(Error::ChainOrder(_))));
}

#[test]
fn untrained_network_predicts_in_unit_interval() {
    let net: Network<f32> = Network::build(&[4], SIDE, SIDE, &fast().arch, 1).unwrap();
    let q = net.predict(&[vec![0.1; 4 * SIDE * SIDE * 3]], 3).unwrap();
    assert!(q.iter().all(|&v| v > 0.0 && v < 1.0));
}
