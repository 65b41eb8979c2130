//! Command-line front-end: model audits, shape traces, synthetic data,
//! training, walk-forward evaluation and progressive-learning runs.

pub mod report;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use granite::data::{load_csv, make_windows, synth_series, write_csv, write_csv_to, SeriesDataset, SynthKind, SynthParams, Variables};
use granite::graph::TrainDefaults;
use granite::progressive::{run_modes, ClusterStream, CycleConfig, CycleLog, CycleMode};
use granite::tensor::Activation;
use granite::training::{derive_seed, AdamConfig, Dataset, Loss, Metric, TrainConfig, TrainLog, Trainer};
use granite::walkforward::{run_rounds, RefitPolicy, WalkForwardConfig};
use granite::zoo::{build_model, mlp, ModelCard};
use granite::{Error, ModelId, Network, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::report::{emit, Envelope};

pub const SEED_ENV: &str = "GRANITE_SEED";

#[derive(Debug, Parser)]
#[command(name = "granite", version, about = "Weekly price forecasting and progressive-learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Per-layer parameter counts; every model when none is named.
    Audit(AuditArgs),
    /// Output shape after every layer of a model.
    Trace(TraceArgs),
    /// Writes a synthetic OHLCV series as CSV.
    Synth(SynthArgs),
    /// Trains a model once on the training weeks of a series.
    Train(TrainArgs),
    /// Walk-forward evaluation over several seeded rounds.
    Walkforward(WalkforwardArgs),
    /// Progressive growth and pruning cycles compared against a static model.
    Progressive(ProgressiveArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Format {
    Json,
    Csv,
}

#[derive(Debug, Args)]
struct Output {
    /// Report destination; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    format: Option<Format>,
}

#[derive(Debug, Args)]
struct AuditArgs {
    #[arg(long)]
    model: Option<String>,
    #[command(flatten)]
    output: Output,
}

#[derive(Debug, Args)]
struct TraceArgs {
    #[arg(long)]
    model: String,
    #[command(flatten)]
    output: Output,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value = "sine")]
    kind: String,
    /// Number of daily records.
    #[arg(long, default_value_t = 2500)]
    n: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    amplitude: Option<f64>,
    #[arg(long)]
    period: Option<f64>,
    #[arg(long)]
    offset: Option<f64>,
    #[arg(long)]
    slope: Option<f64>,
    #[arg(long)]
    drift: Option<f64>,
    #[arg(long)]
    volatility: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
    /// CSV destination; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DataArgs {
    #[arg(long)]
    model: String,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// First test week; about 80% of the weeks train when omitted.
    #[arg(long)]
    split_week: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    output: Output,
}

#[derive(Debug, Args)]
struct WalkforwardArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 10)]
    rounds: usize,
    /// none, incremental:<epochs> or full.
    #[arg(long, default_value = "none")]
    refit: String,
    /// Worker threads; 0 uses every core. Rounds run in parallel above 1.
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    #[command(flatten)]
    output: Output,
}

#[derive(Debug, Args)]
struct ProgressiveArgs {
    /// Forecasting series; a drifting-cluster classification stream when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Architecture for forecasting runs.
    #[arg(long)]
    model: Option<String>,
    /// One of static, frozen or free; all three when omitted.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Training epochs per cycle.
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.1)]
    prune_q: f64,
    /// Number of data batches, one cycle each.
    #[arg(long, default_value_t = 10)]
    batches: usize,
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    #[command(flatten)]
    output: Output,
}

/// Parses `argv` (including the program name) and runs the command.
///
/// Exit codes: 0 success, 1 usage, 2 data error, 3 numerical abort.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    run_with(argv, &mut std::io::stdout(), &mut std::io::stderr())
}

pub fn run_with<I, T>(argv: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    let _ = write!(stdout, "{e}");
                    0
                }
                _ => {
                    let _ = write!(stderr, "{e}");
                    1
                }
            };
            return code;
        }
    };
    match dispatch(cli.command, stdout, stderr) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_numerical_abort() {
        3
    } else if e.is_data_error() {
        2
    } else {
        1
    }
}

fn dispatch(cmd: Command, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<i32> {
    match cmd {
        Command::Audit(a) => audit(a, stdout),
        Command::Trace(a) => trace(a, stdout).map(|_| 0),
        Command::Synth(a) => synth(a, stdout, stderr).map(|_| 0),
        Command::Train(a) => train(a, stdout, stderr).map(|_| 0),
        Command::Walkforward(a) => walkforward(a, stdout, stderr).map(|_| 0),
        Command::Progressive(a) => progressive(a, stdout, stderr).map(|_| 0),
    }
}

/// Flag, then environment, then a fresh random seed that is announced.
fn resolve_seed(flag: Option<u64>, stderr: &mut dyn Write) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    if let Ok(v) = std::env::var(SEED_ENV) {
        return v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{SEED_ENV}=`{v}` is not an unsigned integer")));
    }
    let s: u64 = rand::random();
    let _ = writeln!(stderr, "no seed given; using seed {s}");
    Ok(s)
}

fn with_pool<R: Send>(jobs: usize, f: impl FnOnce() -> R + Send) -> Result<R> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {jobs} worker threads: {e}")))?;
    Ok(pool.install(f))
}

fn parallel(jobs: usize) -> bool {
    jobs != 1 && (jobs > 1 || rayon::current_num_threads() > 1)
}

/// Audit totals for the ten architectures as published.
pub const EXPECTED_TOTALS: [(ModelId, usize); 10] = [
    (ModelId::CNN_UNIV_5, 289),
    (ModelId::CNN_UNIV_10, 769),
    (ModelId::CNN_MULTV_10, 7373),
    (ModelId::CNN_MULTH_10, 132965),
    (ModelId::LSTM_UNIV_5, 182235),
    (ModelId::LSTM_UNIV_10, 182235),
    (ModelId::LSTM_UNIV_ED_10, 502601),
    (ModelId::LSTM_MULTV_ED_10, 505801),
    (ModelId::LSTM_UNIV_CNN_10, 347209),
    (ModelId::LSTM_UNIV_CONV_10, 384777),
];

#[derive(Debug, Serialize)]
struct AuditRow {
    card: ModelCard,
    expected: usize,
    matches: bool,
}

fn audit(a: AuditArgs, stdout: &mut dyn Write) -> Result<i32> {
    let ids: Vec<ModelId> = match &a.model {
        Some(m) => vec![m.parse()?],
        None => ModelId::ALL.to_vec(),
    };
    let mut rows = Vec::new();
    for id in &ids {
        let card = ModelCard::new(&build_model(*id))?;
        let expected = EXPECTED_TOTALS.iter().find(|(m, _)| m == id).map_or(0, |e| e.1);
        let matches = card.total == expected;
        rows.push(AuditRow { card, expected, matches });
    }
    let all_match = rows.iter().all(|r| r.matches);
    let body = match a.output.format {
        Some(Format::Json) => {
            Envelope::new("audit", serde_json::json!({ "model": a.model }), None, &rows).to_json()?
        }
        Some(Format::Csv) => {
            let mut s = String::from("model,block,layer,output_shape,params\n");
            for r in &rows {
                for e in &r.card.layers {
                    s += &format!("{},{},{},{},{}\n", r.card.id, e.block, e.layer, shape_str(&e.output_shape), e.params);
                }
                s += &format!("{},,total,,{}\n", r.card.id, r.card.total);
            }
            s
        }
        None => {
            let mut s = String::new();
            for r in &rows {
                s += &format!("{}  input {}\n", r.card.id, shape_str(&r.card.input_shape));
                s += &format!("  {:<12} {:<18} {:<12} {:>8}\n", "block", "layer", "output", "params");
                for e in &r.card.layers {
                    s += &format!("  {:<12} {:<18} {:<12} {:>8}\n", e.block, e.layer, shape_str(&e.output_shape), e.params);
                }
                let mark = if r.matches { "ok" } else { "MISMATCH" };
                s += &format!("  total {} (expected {}) {mark}\n\n", r.card.total, r.expected);
            }
            s
        }
    };
    emit(&body, a.output.out.as_deref(), stdout)?;
    Ok(if all_match { 0 } else { 1 })
}

fn shape_str(shape: &[usize]) -> String {
    let parts: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
    format!("({})", parts.join(";"))
}

fn trace(a: TraceArgs, stdout: &mut dyn Write) -> Result<()> {
    let id: ModelId = a.model.parse()?;
    let entries = build_model(id).shape_trace()?;
    let body = match a.output.format {
        Some(Format::Csv) => {
            let mut s = String::from("block,layer,shape\n");
            for e in &entries {
                s += &format!("{},{},{}\n", e.block, e.layer, shape_str(&e.shape));
            }
            s
        }
        _ => Envelope::new("trace", serde_json::json!({ "model": id }), None, &entries).to_json()?,
    };
    emit(&body, a.output.out.as_deref(), stdout)
}

fn synth(a: SynthArgs, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<()> {
    let kind: SynthKind = a.kind.parse()?;
    let seed = resolve_seed(a.seed, stderr)?;
    let mut p = SynthParams::default();
    let overrides = [
        (&mut p.amplitude, a.amplitude),
        (&mut p.period, a.period),
        (&mut p.offset, a.offset),
        (&mut p.slope, a.slope),
        (&mut p.drift, a.drift),
        (&mut p.volatility, a.volatility),
        (&mut p.noise, a.noise),
    ];
    for (slot, v) in overrides {
        if let Some(v) = v {
            *slot = v;
        }
    }
    let records = synth_series(kind, a.n, seed, &p)?;
    match &a.out {
        Some(path) => {
            write_csv(path, &records)?;
            let summary = serde_json::json!({ "path": path, "records": records.len() });
            let config = serde_json::json!({ "kind": kind, "n": a.n, "params": p });
            emit(&Envelope::new("synth", config, Some(seed), summary).to_json()?, None, stdout)
        }
        None => write_csv_to(stdout, &records),
    }
}

#[derive(Debug, Serialize)]
struct DataConfig {
    model: ModelId,
    data: PathBuf,
    split_week: usize,
    weeks: usize,
    epochs: usize,
    batch_size: usize,
}

fn load_series(path: &Path, split_week: Option<usize>) -> Result<SeriesDataset> {
    let records = load_csv(path)?;
    match split_week {
        Some(s) => SeriesDataset::new(records, s),
        None => SeriesDataset::with_fraction(records, 0.8),
    }
}

fn variables(id: ModelId) -> Variables {
    if id.multivariate() {
        Variables::Multivariate
    } else {
        Variables::Univariate
    }
}

fn data_config(d: &DataArgs) -> Result<(ModelId, SeriesDataset, DataConfig)> {
    let id: ModelId = d.model.parse()?;
    let ds = load_series(&d.data, d.split_week)?;
    let defaults = build_model(id).train;
    let cfg = DataConfig {
        model: id,
        data: d.data.clone(),
        split_week: ds.split_week,
        weeks: ds.n_weeks(),
        epochs: d.epochs.unwrap_or(defaults.epochs),
        batch_size: d.batch_size.unwrap_or(defaults.batch_size),
    };
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::Config("epochs and batch size must be at least 1".into()));
    }
    Ok((id, ds, cfg))
}

#[derive(Debug, Serialize)]
struct TrainReport {
    log: TrainLog,
    /// Test-week RMSE in price units after the last epoch.
    test_rmse: f64,
}

fn train(a: TrainArgs, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<()> {
    let (id, ds, cfg) = data_config(&a.data)?;
    let seed = resolve_seed(a.data.seed, stderr)?;
    let windows = make_windows(&ds, id.lookback_weeks(), variables(id))?;
    let train_set = windows.before_week(ds.split_week);
    let test_idx: Vec<usize> = (0..windows.len()).filter(|&i| windows.week_index[i] >= ds.split_week).collect();
    let test_set = Dataset {
        inputs: test_idx.iter().map(|&i| windows.x[i].clone()).collect(),
        targets: test_idx.iter().map(|&i| windows.y[i].clone()).collect(),
    };
    if train_set.is_empty() || test_set.is_empty() {
        return Err(Error::InsufficientData("split leaves no training or no test windows".into()));
    }
    let mut net = Network::<f64>::build(&build_model(id), &mut ChaCha8Rng::seed_from_u64(seed))?;
    let tc = TrainConfig {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        seed: derive_seed(seed, 1),
        loss: Loss::Mse,
        shuffle: true,
    };
    let log = Trainer::new(tc, AdamConfig::default())?.train(&mut net, &train_set, Some((&test_set, Metric::NegRmse)))?;
    let scaled = log.epochs.last().and_then(|e| e.val_metric).unwrap_or(f64::NAN);
    let range = ds.scaler.max[0] - ds.scaler.min[0];
    let report = TrainReport {
        log,
        test_rmse: -scaled * range,
    };
    let body = match a.output.format {
        Some(Format::Csv) => {
            let mut s = String::from("epoch,train_loss,val_neg_rmse,time_s\n");
            for e in &report.log.epochs {
                s += &format!("{},{},{},{}\n", e.epoch + 1, e.train_loss, e.val_metric.unwrap_or(f64::NAN), e.wall_seconds);
            }
            s
        }
        _ => Envelope::new("train", &cfg, Some(seed), &report).to_json()?,
    };
    emit(&body, a.output.out.as_deref(), stdout)
}

#[derive(Debug, Serialize)]
struct WalkforwardConfigOut {
    #[serde(flatten)]
    data: DataConfig,
    rounds: usize,
    refit: String,
    adam: AdamConfig,
}

fn walkforward(a: WalkforwardArgs, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<()> {
    let (id, ds, dcfg) = data_config(&a.data)?;
    let refit: RefitPolicy = a.refit.parse()?;
    let seed = resolve_seed(a.data.seed, stderr)?;
    let mut cfg = WalkForwardConfig::new(id, seed);
    cfg.rounds = a.rounds;
    cfg.refit = refit;
    cfg.epochs = dcfg.epochs;
    cfg.batch_size = dcfg.batch_size;
    let summary = with_pool(a.jobs, || run_rounds(&ds, &cfg, parallel(a.jobs)))??;
    let body = match a.output.format {
        Some(Format::Csv) => summary.to_csv(),
        _ => {
            let out = WalkforwardConfigOut {
                data: dcfg,
                rounds: cfg.rounds,
                refit: refit.to_string(),
                adam: cfg.adam,
            };
            Envelope::new("walkforward", out, Some(seed), &summary).to_json()?
        }
    };
    emit(&body, a.output.out.as_deref(), stdout)
}

#[derive(Debug, Serialize)]
struct ProgressiveConfigOut {
    source: serde_json::Value,
    modes: Vec<CycleMode>,
    cycle: CycleConfig,
}

#[derive(Debug, Serialize)]
struct ProgressiveReport {
    logs: Vec<CycleLog>,
}

/// Consecutive chunks of windows, each split five to one into train and validation.
fn forecasting_batches(ds: &SeriesDataset, id: ModelId, batches: usize) -> Result<Vec<(Dataset<f64>, Dataset<f64>)>> {
    let w = make_windows(ds, id.lookback_weeks(), variables(id))?;
    let per = w.len() / batches.max(1);
    if batches == 0 || per < 6 {
        return Err(Error::InsufficientData(format!(
            "{} windows cannot form {batches} batches of at least 6",
            w.len()
        )));
    }
    let mut out = Vec::with_capacity(batches);
    for b in 0..batches {
        let idx: Vec<usize> = (b * per..(b + 1) * per).collect();
        let cut = per * 5 / 6;
        let take = |r: &[usize]| Dataset {
            inputs: r.iter().map(|&i| w.x[i].clone()).collect(),
            targets: r.iter().map(|&i| w.y[i].clone()).collect(),
        };
        out.push((take(&idx[..cut]), take(&idx[cut..])));
    }
    Ok(out)
}

fn progressive(a: ProgressiveArgs, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<()> {
    let modes = match &a.mode {
        Some(m) => vec![m.parse::<CycleMode>()?],
        None => CycleMode::ALL.to_vec(),
    };
    let mut cycle = CycleConfig {
        epochs_per_cycle: a.epochs,
        batch_size: a.batch_size,
        prune_q: a.prune_q,
        ..CycleConfig::default()
    };
    cycle.validate()?;
    let seed = resolve_seed(a.seed, stderr)?;
    let (graph, batches, source) = match &a.data {
        None => {
            if a.model.is_some() {
                return Err(Error::Config("--model needs --data; the cluster stream uses a fixed MLP".into()));
            }
            let stream = ClusterStream {
                batches: a.batches,
                ..ClusterStream::default()
            };
            let graph = mlp(
                "MLP_16_16",
                2,
                &[16, 16],
                stream.classes,
                Activation::Linear,
                TrainDefaults {
                    epochs: a.epochs,
                    batch_size: a.batch_size,
                },
            );
            let batches = stream.generate::<f64>(derive_seed(seed, 0xDA7A))?;
            (graph, batches, serde_json::json!({ "cluster_stream": stream }))
        }
        Some(path) => {
            let id: ModelId = a.model.as_deref().unwrap_or("CNN_UNIV_5").parse()?;
            let records = load_csv(path)?;
            let weeks = records.len() / 5;
            // cycles compare relative validation scores, so one scaler over the whole series suffices
            let ds = SeriesDataset::new(records, weeks)?;
            cycle.loss = Loss::Mse;
            cycle.metric = Metric::NegRmse;
            let batches = forecasting_batches(&ds, id, a.batches)?;
            (build_model(id), batches, serde_json::json!({ "data": path, "model": id }))
        }
    };
    let logs = with_pool(a.jobs, || run_modes(&graph, &batches, &cycle, &modes, seed, parallel(a.jobs)))??;
    let body = match a.output.format {
        Some(Format::Csv) => {
            let mut s = String::new();
            for (i, log) in logs.iter().enumerate() {
                for (k, line) in log.to_csv().lines().enumerate() {
                    if k == 0 && i > 0 {
                        continue;
                    }
                    let lead = if k == 0 { "mode".to_string() } else { log.mode.to_string() };
                    s += &format!("{lead},{line}\n");
                }
            }
            s
        }
        _ => {
            let cfg = ProgressiveConfigOut { source, modes, cycle };
            Envelope::new("progressive", cfg, Some(seed), ProgressiveReport { logs }).to_json()?
        }
    };
    emit(&body, a.output.out.as_deref(), stdout)
}
