//! Experiment runner behind the `rankpool` binary.

pub mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rankpool::artifact::{save_checkpoint, save_scorer};
use rankpool::data::{load_cifar10, load_mnist, subset, synthetic_split, Dataset};
use rankpool::linalg::ScatterPair;
use rankpool::nn::{Init, LayerSpec, Network};
use rankpool::numdiff::{central_difference, max_relative_error};
use rankpool::pooling::{PoolSpec, Strategy};
use rankpool::projection::{fit_projection, gradient, objective, project, FitConfig};
use rankpool::ranking::{fit_ranking, score_instances, DEFAULT_BINS};
use rankpool::tensor::{ActivationStack, Matrix};
use rankpool::train::{
    collect_layer_rows, network_gradient_error, refit_pool_scorers, train, TrainReport,
};

pub use config::ExperimentConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("gradient check failed: {0}")]
    GradcheckFailed(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Dataset(_) => 3,
            CliError::Diverged(_) => 4,
            CliError::GradcheckFailed(_) | CliError::Other(_) => 1,
        }
    }
}

impl From<rankpool::Error> for CliError {
    fn from(e: rankpool::Error) -> Self {
        CliError::Other(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Other(e.to_string())
    }
}

fn dataset_err(e: rankpool::Error) -> CliError {
    CliError::Dataset(e.to_string())
}

/// Loads, subsets and optionally mean-centres the train and test sets.
pub fn load_datasets(cfg: &config::DatasetConfig) -> Result<(Dataset, Dataset), CliError> {
    let (mut train_set, mut test_set) = match cfg.name.as_str() {
        "synthetic" => synthetic_split(
            cfg.train_size,
            cfg.test_size,
            cfg.height,
            cfg.width,
            cfg.classes,
            cfg.seed,
        )
        .map_err(dataset_err)?,
        "mnist" => {
            let dir = cfg.resolve_dir()?;
            (
                load_mnist(
                    dir.join("train-images-idx3-ubyte"),
                    dir.join("train-labels-idx1-ubyte"),
                )
                .map_err(dataset_err)?,
                load_mnist(
                    dir.join("t10k-images-idx3-ubyte"),
                    dir.join("t10k-labels-idx1-ubyte"),
                )
                .map_err(dataset_err)?,
            )
        }
        "cifar10" => {
            let dir = cfg.resolve_dir()?;
            let batches: Vec<PathBuf> = (1..=5)
                .map(|i| dir.join(format!("data_batch_{i}.bin")))
                .collect();
            (
                load_cifar10(&batches).map_err(dataset_err)?,
                load_cifar10(&[dir.join("test_batch.bin")]).map_err(dataset_err)?,
            )
        }
        other => return Err(CliError::Config(format!("unknown dataset {other:?}"))),
    };
    if cfg.train_per_class > 0 {
        train_set = subset(&train_set, cfg.train_per_class, cfg.seed);
    }
    if cfg.test_per_class > 0 {
        test_set = subset(&test_set, cfg.test_per_class, cfg.seed.wrapping_add(1));
    }
    if cfg.mean_subtract {
        let mean = train_set.pixel_mean();
        train_set.subtract_mean(&mean).map_err(dataset_err)?;
        test_set.subtract_mean(&mean).map_err(dataset_err)?;
    }
    info!(
        "{}: {} training and {} test images",
        train_set.name,
        train_set.len(),
        test_set.len()
    );
    Ok((train_set, test_set))
}

/// One strategy's finished (or aborted) run.
pub struct StrategyRun {
    pub strategy: Strategy,
    pub network: Network,
    pub report: TrainReport,
    pub seconds: f64,
}

pub fn run_strategy(
    cfg: &ExperimentConfig,
    strategy: Strategy,
    train_set: &Dataset,
    test_set: &Dataset,
) -> Result<StrategyRun, CliError> {
    let specs = cfg
        .architecture
        .layer_specs(train_set.class_count, strategy)?;
    let input = (
        train_set.images.h(),
        train_set.images.w(),
        train_set.images.d(),
    );
    let tc = cfg.training.to_train_config()?;
    let mut net = Network::new(
        input,
        train_set.class_count,
        &specs,
        cfg.architecture.init()?,
        tc.seed,
    )
    .map_err(|e| CliError::Config(e.to_string()))?;
    info!("training with {strategy} pooling");
    let started = Instant::now();
    let report = train(&mut net, train_set, test_set, &tc)?;
    for w in &report.warnings {
        warn!("{strategy}: {w}");
    }
    Ok(StrategyRun {
        strategy,
        network: net,
        report,
        seconds: started.elapsed().as_secs_f64(),
    })
}

/// `strategy,epoch,train_loss,train_err_pct,test_loss,test_err_pct`.
pub const METRICS_HEADER: [&str; 6] = [
    "strategy",
    "epoch",
    "train_loss",
    "train_err_pct",
    "test_loss",
    "test_err_pct",
];

fn write_outputs(out: &Path, runs: &[StrategyRun]) -> Result<(), CliError> {
    let mut metrics = csv::Writer::from_path(out.join("metrics.csv"))?;
    let mut timing = csv::Writer::from_path(out.join("timing.csv"))?;
    let mut summary = csv::Writer::from_path(out.join("summary.csv"))?;
    metrics.write_record(METRICS_HEADER)?;
    timing.write_record(["strategy", "epoch", "epoch_seconds"])?;
    summary.write_record(["strategy", "train_err", "test_err"])?;
    for run in runs {
        let name = run.strategy.name();
        for m in &run.report.epochs {
            metrics.write_record([
                name.to_string(),
                m.epoch.to_string(),
                m.train_loss.to_string(),
                m.train_err_pct.to_string(),
                m.test_loss.to_string(),
                m.test_err_pct.to_string(),
            ])?;
            timing.write_record([
                name.to_string(),
                m.epoch.to_string(),
                format!("{:.3}", m.seconds),
            ])?;
        }
        if let Some(last) = run.report.epochs.last() {
            summary.write_record([
                name.to_string(),
                last.train_err_pct.to_string(),
                last.test_err_pct.to_string(),
            ])?;
        }
        if run.report.aborted.is_none() {
            save_checkpoint(out.join(format!("checkpoint_{name}.bin")), &run.network)?;
            for (layer, scorer) in &run.report.scorers {
                save_scorer(out.join(format!("scorer_{name}_layer{layer}.bin")), scorer)?;
            }
        }
    }
    metrics.flush()?;
    timing.flush()?;
    summary.flush()?;
    Ok(())
}

/// Trains every configured strategy and writes `metrics.csv`, `timing.csv`,
/// `summary.csv`, checkpoints and scorer artifacts into `out`.
///
/// Strategies run one after another unless `parallel_strategies` is set;
/// output order and content are the same either way.
pub fn cmd_train(
    cfg: &ExperimentConfig,
    out: &Path,
    parallel_strategies: bool,
) -> Result<Vec<StrategyRun>, CliError> {
    let strategies = cfg.strategies()?;
    let (train_set, test_set) = load_datasets(&cfg.dataset)?;
    fs::create_dir_all(out)?;
    let runs: Vec<StrategyRun> = if parallel_strategies {
        std::thread::scope(|s| {
            let handles: Vec<_> = strategies
                .iter()
                .map(|&st| {
                    let (tr, te) = (&train_set, &test_set);
                    s.spawn(move || run_strategy(cfg, st, tr, te))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| {
                    h.join()
                        .unwrap_or_else(|_| Err(CliError::Other("training thread panicked".into())))
                })
                .collect::<Result<_, _>>()
        })?
    } else {
        strategies
            .iter()
            .map(|&st| run_strategy(cfg, st, &train_set, &test_set))
            .collect::<Result<_, _>>()?
    };
    write_outputs(out, &runs)?;
    for run in &runs {
        if let Some(last) = run.report.epochs.last() {
            info!(
                "{}: train err {:.2}% test err {:.2}% in {:.1}s",
                run.strategy, last.train_err_pct, last.test_err_pct, run.seconds
            );
        }
    }
    if let Some(run) = runs.iter().find(|r| r.report.aborted.is_some()) {
        let why = run
            .report
            .aborted
            .as_ref()
            .map(|e| e.to_string())
            .unwrap_or_default();
        return Err(CliError::Diverged(format!("{}: {why}", run.strategy)));
    }
    Ok(runs)
}

/// Deliberate gradient corruption used to prove the checker can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Flip the sign of the orthogonality regularizer's gradient.
    RegularizerSign,
}

#[derive(Debug, Clone)]
pub struct GradcheckOptions {
    pub instances: usize,
    pub lambdas: Vec<f64>,
    pub seed: u64,
    pub tolerance: f64,
    pub fault: Option<Fault>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            instances: 50,
            lambdas: vec![0.0, 0.1, 1.0, 10.0],
            seed: 0,
            tolerance: 1e-3,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub projection_max_error: f64,
    /// Per pooling strategy, the tiny-network maximum relative error.
    pub network_errors: Vec<(Strategy, f64)>,
}

impl GradcheckReport {
    pub fn worst(&self) -> f64 {
        self.network_errors
            .iter()
            .map(|e| e.1)
            .fold(self.projection_max_error, f64::max)
    }
}

fn random_psd(rng: &mut ChaCha8Rng, d: usize, rank: usize) -> Matrix {
    let g = Matrix::from_fn(rank, d, |_, _| rng.gen_range(-1.0..1.0));
    g.t_matmul(&g).expect("shapes agree")
}

/// Random `(A, S_w, S_b)` instance with `d ≤ 10`, `c ≤ 5`.
pub fn random_projection_instance(rng: &mut ChaCha8Rng) -> (Matrix, ScatterPair) {
    let d = rng.gen_range(2..=10);
    let c = rng.gen_range(1..=5usize.min(d));
    let s_w = random_psd(rng, d, d + 2);
    let s_b = random_psd(rng, d, c + 1);
    let a = Matrix::from_fn(d, c, |_, _| rng.gen_range(-1.0..1.0));
    (a, ScatterPair::new(s_w, s_b).expect("square"))
}

fn projection_error(
    a: &Matrix,
    pair: &ScatterPair,
    lambda: f64,
    fault: Option<Fault>,
) -> Result<f64, CliError> {
    let mut analytic = gradient(a, pair, lambda)?;
    if fault == Some(Fault::RegularizerSign) {
        let quotient = gradient(a, pair, 0.0)?;
        analytic = quotient.scale(2.0).sub(&analytic)?;
    }
    let (d, c) = a.shape();
    let numeric = central_difference(
        |x| {
            objective(&Matrix::new(d, c, x.to_vec()).expect("shape"), pair, lambda)
                .unwrap_or(f64::NAN)
        },
        a.data(),
        1e-6,
    );
    Ok(max_relative_error(analytic.data(), &numeric, 1e-6))
}

/// Input 8×8×1, conv 3×3×2, 2×2 pooling, fc 10.
pub fn tiny_network(strategy: Strategy, seed: u64) -> Result<Network, CliError> {
    let specs = [
        LayerSpec::Conv {
            kernel: (3, 3),
            out_channels: 2,
        },
        LayerSpec::Pool(PoolSpec::square(2, strategy)),
        LayerSpec::Fc { out_units: 10 },
        LayerSpec::SoftmaxLoss,
    ];
    Ok(Network::new(
        (8, 8, 1),
        10,
        &specs,
        Init::Gaussian(0.5),
        seed,
    )?)
}

/// Central-difference check of the projection objective over random
/// instances and of every layer of the tiny network for all strategies.
pub fn cmd_gradcheck(opts: &GradcheckOptions) -> Result<GradcheckReport, CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut projection_max_error = 0.0f64;
    for i in 0..opts.instances {
        let (a, pair) = random_projection_instance(&mut rng);
        let lambda = opts.lambdas[i % opts.lambdas.len().max(1)];
        projection_max_error =
            projection_max_error.max(projection_error(&a, &pair, lambda, opts.fault)?);
    }
    let images = ActivationStack::from_fn(10, 8, 8, 1, |_, _, _, _| rng.gen_range(-1.0..1.0));
    let labels: Vec<usize> = (0..10).collect();
    let sample = Dataset {
        images: images.clone(),
        labels: labels.clone(),
        class_count: 10,
        name: "gradcheck".into(),
    };
    let mut network_errors = Vec::new();
    for strategy in Strategy::ALL {
        let mut net = tiny_network(strategy, opts.seed.wrapping_add(11))?;
        if strategy == Strategy::Multipartite {
            refit_pool_scorers(
                &mut net,
                &sample,
                10_000,
                DEFAULT_BINS,
                &FitConfig::default(),
                opts.seed,
            )?;
        }
        network_errors.push((
            strategy,
            network_gradient_error(&net, &images, &labels, 0.01, 1e-5)?,
        ));
    }
    let report = GradcheckReport {
        projection_max_error,
        network_errors,
    };
    println!(
        "projection objective: max relative error {:.3e}",
        report.projection_max_error
    );
    for (s, e) in &report.network_errors {
        println!("tiny network, {s} pooling: max relative error {e:.3e}");
    }
    if report.worst() < opts.tolerance {
        Ok(report)
    } else {
        Err(CliError::GradcheckFailed(format!(
            "max relative error {:.3e} ≥ {:.0e}",
            report.worst(),
            opts.tolerance
        )))
    }
}

#[derive(Debug, Clone)]
pub struct RankDemoOptions {
    /// Activations entering this layer are ranked; `None` picks the first
    /// pool layer.
    pub layer: Option<usize>,
    pub images: usize,
    pub permute_labels: bool,
    pub hist_bins: usize,
}

impl Default for RankDemoOptions {
    fn default() -> Self {
        Self {
            layer: None,
            images: 1000,
            permute_labels: false,
            hist_bins: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankDemoResult {
    pub column_kl: Vec<f64>,
    /// Mean instance score per class.
    pub class_mean_score: Vec<f64>,
}

/// Fits a projection and ranking model on one layer's activations of the
/// (untrained, seeded) configured network and writes `column_kl.csv` and
/// `score_histogram.csv` into `out`.
pub fn cmd_rank_demo(
    cfg: &ExperimentConfig,
    out: &Path,
    opts: &RankDemoOptions,
) -> Result<RankDemoResult, CliError> {
    let (train_set, _) = load_datasets(&cfg.dataset)?;
    let specs = cfg
        .architecture
        .layer_specs(train_set.class_count, Strategy::Max)?;
    let input = (
        train_set.images.h(),
        train_set.images.w(),
        train_set.images.d(),
    );
    let tc = cfg.training.to_train_config()?;
    let net = Network::new(
        input,
        train_set.class_count,
        &specs,
        cfg.architecture.init()?,
        tc.seed,
    )
    .map_err(|e| CliError::Config(e.to_string()))?;
    let layer = match opts.layer {
        Some(l) if l < specs.len() => l,
        Some(l) => return Err(CliError::Config(format!("layer {l} out of range"))),
        None => specs
            .iter()
            .position(|s| matches!(s, LayerSpec::Pool(_)))
            .ok_or_else(|| CliError::Config("architecture has no pool layer".into()))?,
    };
    let sample = if opts.images < train_set.len() {
        let mut idx = rand::seq::index::sample(
            &mut ChaCha8Rng::seed_from_u64(tc.seed),
            train_set.len(),
            opts.images,
        )
        .into_vec();
        idx.sort_unstable();
        train_set.select(&idx)
    } else {
        train_set
    };
    let mut data = collect_layer_rows(&net, &sample, layer, tc.score_sample_cap, tc.seed)?;
    if opts.permute_labels {
        data.labels
            .shuffle(&mut ChaCha8Rng::seed_from_u64(tc.seed ^ 0x5EED));
    }
    let proj = fit_projection(&data, &tc.fit)?;
    let projected = project(&data.matrix, &proj)?;
    let model = fit_ranking(&projected, &data.labels, tc.bins)?;
    let scores = score_instances(&projected, &model)?.scores;

    fs::create_dir_all(out)?;
    let mut kl = csv::Writer::from_path(out.join("column_kl.csv"))?;
    kl.write_record(["column", "kl"])?;
    for (i, v) in model.column_kl().iter().enumerate() {
        kl.write_record([i.to_string(), v.to_string()])?;
    }
    kl.flush()?;

    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo {
        (hi - lo) / opts.hist_bins as f64
    } else {
        1.0
    };
    let classes = net.classes;
    let mut counts = vec![vec![0usize; opts.hist_bins]; classes];
    let mut sums = vec![(0.0, 0usize); classes];
    for (&s, &l) in scores.iter().zip(&data.labels) {
        let b = (((s - lo) / width) as usize).min(opts.hist_bins - 1);
        counts[l][b] += 1;
        sums[l].0 += s;
        sums[l].1 += 1;
    }
    let mut hist = csv::Writer::from_path(out.join("score_histogram.csv"))?;
    hist.write_record(["class", "bin_lo", "bin_hi", "count"])?;
    for (c, row) in counts.iter().enumerate() {
        for (b, n) in row.iter().enumerate() {
            let a = lo + b as f64 * width;
            hist.write_record([
                c.to_string(),
                a.to_string(),
                (a + width).to_string(),
                n.to_string(),
            ])?;
        }
    }
    hist.flush()?;
    Ok(RankDemoResult {
        column_kl: model.column_kl(),
        class_mean_score: sums
            .iter()
            .map(|&(s, n)| if n > 0 { s / n as f64 } else { 0.0 })
            .collect(),
    })
}
