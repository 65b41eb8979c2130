//! Week-by-week walk-forward evaluation.

use std::cell::Cell;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{week_target, window_input, OhlcvRecord, Scaler, SeriesDataset, Variables, WEEK};
use crate::error::{Error, Result};
use crate::graph::Network;
use crate::training::{derive_seed, AdamConfig, Dataset, Loss, TrainConfig, Trainer};
use crate::zoo::{build_model, ModelId};

/// What happens after each test week is appended to the training window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefitPolicy {
    /// Predict only; the model is trained once.
    None,
    /// Continue training for this many epochs on the grown window.
    Incremental { epochs: usize },
    /// Retrain from scratch on the grown window.
    Full,
}

impl fmt::Display for RefitPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RefitPolicy::None => f.write_str("none"),
            RefitPolicy::Incremental { epochs } => write!(f, "incremental:{epochs}"),
            RefitPolicy::Full => f.write_str("full"),
        }
    }
}

impl FromStr for RefitPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(RefitPolicy::None),
            "full" => Ok(RefitPolicy::Full),
            _ => {
                let epochs = s
                    .strip_prefix("incremental:")
                    .and_then(|k| k.parse::<usize>().ok())
                    .filter(|&k| k > 0)
                    .ok_or_else(|| {
                        Error::config(format!(
                            "bad refit policy `{s}`; expected none, incremental:<k> or full"
                        ))
                    })?;
                Ok(RefitPolicy::Incremental { epochs })
            }
        }
    }
}

/// Read-only view of the weeks a forecaster may see.
///
/// Reads of weeks at or beyond the visible boundary fail, and every read is
/// recorded so callers can audit causality.
pub struct History<'a> {
    ds: &'a SeriesDataset,
    visible: usize,
    max_read: Cell<Option<usize>>,
}

impl<'a> History<'a> {
    pub fn new(ds: &'a SeriesDataset, visible: usize) -> Self {
        Self {
            ds,
            visible: visible.min(ds.n_weeks()),
            max_read: Cell::new(None),
        }
    }

    pub fn visible_weeks(&self) -> usize {
        self.visible
    }

    pub fn scaler(&self) -> &Scaler {
        &self.ds.scaler
    }

    pub fn week(&self, w: usize) -> Result<&'a [OhlcvRecord]> {
        if w >= self.visible {
            return Err(Error::FutureAccess {
                week: w,
                visible: self.visible,
            });
        }
        self.max_read.set(Some(self.max_read.get().map_or(w, |m| m.max(w))));
        Ok(self.ds.week(w))
    }

    /// The last `n` visible weeks, oldest first.
    pub fn last_weeks(&self, n: usize) -> Result<Vec<&'a [OhlcvRecord]>> {
        if n > self.visible {
            return Err(Error::InsufficientData(format!(
                "{n} weeks of history requested, {} visible",
                self.visible
            )));
        }
        (self.visible - n..self.visible).map(|w| self.week(w)).collect()
    }

    /// Every training sample whose target week is visible.
    pub fn windows(&self, lookback: usize, vars: Variables) -> Result<Dataset<f64>> {
        let mut inputs = Vec::new();
        let mut targets = Vec::new();
        for w in lookback..self.visible {
            let hist = (w - lookback..w).map(|k| self.week(k)).collect::<Result<Vec<_>>>()?;
            inputs.push(window_input(&hist, self.scaler(), vars));
            targets.push(week_target(self.week(w)?, self.scaler()));
        }
        Dataset::new(inputs, targets)
    }

    fn reveal(&mut self) {
        self.visible = (self.visible + 1).min(self.ds.n_weeks());
    }

    fn take_max_read(&self) -> Option<usize> {
        self.max_read.replace(None)
    }
}

/// A model evaluated by the walk-forward protocol.
pub trait Forecaster {
    /// Initial training on the visible history.
    fn fit(&mut self, history: &History) -> Result<()>;
    /// Forecast of the five opens of the first invisible week, in price units.
    fn predict(&mut self, history: &History) -> Result<[f64; WEEK]>;
    /// Called after a week's actuals become visible.
    fn update(&mut self, history: &History) -> Result<()>;
}

/// Repeats the last observed open.
#[derive(Debug, Clone, Copy, Default)]
pub struct Persistence;

impl Forecaster for Persistence {
    fn fit(&mut self, _: &History) -> Result<()> {
        Ok(())
    }

    fn predict(&mut self, history: &History) -> Result<[f64; WEEK]> {
        let last = history.last_weeks(1)?[0][WEEK - 1].open;
        Ok([last; WEEK])
    }

    fn update(&mut self, _: &History) -> Result<()> {
        Ok(())
    }
}

/// One of the zoo architectures wrapped as a forecaster.
pub struct NetworkForecaster {
    pub model: ModelId,
    pub net: Network<f64>,
    pub train: TrainConfig,
    pub adam: AdamConfig,
    pub refit: RefitPolicy,
    seed: u64,
    trainer: Option<Trainer<f64>>,
}

impl NetworkForecaster {
    pub fn new(model: ModelId, train: TrainConfig, adam: AdamConfig, refit: RefitPolicy, seed: u64) -> Result<Self> {
        let net = Network::build(&build_model(model), &mut ChaCha8Rng::seed_from_u64(seed))?;
        Ok(Self {
            model,
            net,
            train,
            adam,
            refit,
            seed,
            trainer: None,
        })
    }

    fn vars(&self) -> Variables {
        if self.model.multivariate() {
            Variables::Multivariate
        } else {
            Variables::Univariate
        }
    }

    fn train_from_scratch(&mut self, history: &History) -> Result<()> {
        let data = history.windows(self.model.lookback_weeks(), self.vars())?;
        if data.is_empty() {
            return Err(Error::InsufficientData(format!(
                "no complete {}-week training windows before the first test week",
                self.model.lookback_weeks()
            )));
        }
        self.net = Network::build(&build_model(self.model), &mut ChaCha8Rng::seed_from_u64(self.seed))?;
        let cfg = TrainConfig {
            seed: derive_seed(self.seed, 1),
            ..self.train
        };
        let mut trainer = Trainer::new(cfg, self.adam)?;
        trainer.train(&mut self.net, &data, None)?;
        self.trainer = Some(trainer);
        Ok(())
    }
}

impl Forecaster for NetworkForecaster {
    fn fit(&mut self, history: &History) -> Result<()> {
        self.train_from_scratch(history)
    }

    fn predict(&mut self, history: &History) -> Result<[f64; WEEK]> {
        let weeks = history.last_weeks(self.model.lookback_weeks())?;
        let x = window_input(&weeks, history.scaler(), self.vars());
        let y = self.net.predict(&x)?;
        let scaler = history.scaler();
        Ok(std::array::from_fn(|j| scaler.invert(0, y.data()[j])))
    }

    fn update(&mut self, history: &History) -> Result<()> {
        match self.refit {
            RefitPolicy::None => Ok(()),
            RefitPolicy::Full => self.train_from_scratch(history),
            RefitPolicy::Incremental { epochs } => {
                let data = history.windows(self.model.lookback_weeks(), self.vars())?;
                let trainer = self
                    .trainer
                    .as_mut()
                    .ok_or_else(|| Error::config("update called before fit"))?;
                for _ in 0..epochs {
                    trainer.epoch(&mut self.net, &data)?;
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub agg_rmse: f64,
    pub day_rmse: [f64; WEEK],
    pub ratio: f64,
    pub mean_actual: f64,
}

/// RMSE over all cells, per forecast position, and relative to the mean actual.
pub fn metrics(preds: &[[f64; WEEK]], actuals: &[[f64; WEEK]]) -> Result<Metrics> {
    if preds.is_empty() || preds.len() != actuals.len() {
        return Err(Error::InsufficientData(format!(
            "metrics need equal non-empty inputs, got {} predictions and {} actuals",
            preds.len(),
            actuals.len()
        )));
    }
    let n = preds.len() as f64;
    let mut day_sq = [0.0; WEEK];
    let mut total = 0.0;
    for (p, a) in preds.iter().zip(actuals) {
        for j in 0..WEEK {
            day_sq[j] += (p[j] - a[j]).powi(2);
            total += a[j];
        }
    }
    let mean_actual = total / (n * WEEK as f64);
    let agg_rmse = (day_sq.iter().sum::<f64>() / (n * WEEK as f64)).sqrt();
    Ok(Metrics {
        agg_rmse,
        day_rmse: day_sq.map(|s| (s / n).sqrt()),
        ratio: agg_rmse / mean_actual,
        mean_actual,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeekForecast {
    pub week: usize,
    pub pred: [f64; WEEK],
    pub actual: [f64; WEEK],
}

/// What the forecaster could see when predicting one test week.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessProbe {
    pub test_week: usize,
    pub visible_weeks: usize,
    /// Highest week index read since the previous prediction.
    pub max_week_read: Option<usize>,
    /// Records in the training window after this week was appended.
    pub train_records_after: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WalkForwardReport {
    pub round: usize,
    pub seed: u64,
    pub agg_rmse: f64,
    pub day_rmse: [f64; WEEK],
    pub ratio: f64,
    pub mean_actual: f64,
    pub wall_seconds: f64,
    pub weeks: Vec<WeekForecast>,
}

/// Runs `f` over every test week of `ds`.
pub fn walk_forward<F: Forecaster + ?Sized>(
    ds: &SeriesDataset,
    f: &mut F,
) -> Result<(Vec<WeekForecast>, Vec<AccessProbe>)> {
    if ds.split_week >= ds.n_weeks() {
        return Err(Error::InsufficientData("no test weeks after the split".into()));
    }
    let mut history = History::new(ds, ds.split_week);
    f.fit(&history)?;
    let mut weeks = Vec::new();
    let mut probes = Vec::new();
    for w in ds.split_week..ds.n_weeks() {
        let pred = f.predict(&history)?;
        let max_week_read = history.take_max_read();
        let visible_weeks = history.visible_weeks();
        let actual: [f64; WEEK] = std::array::from_fn(|j| ds.week(w)[j].open);
        weeks.push(WeekForecast { week: w, pred, actual });
        history.reveal();
        probes.push(AccessProbe {
            test_week: w,
            visible_weeks,
            max_week_read,
            train_records_after: history.visible_weeks() * WEEK,
        });
        if w + 1 < ds.n_weeks() {
            f.update(&history)?;
        }
    }
    Ok((weeks, probes))
}

/// Builds a report from a finished walk.
pub fn report_from(round: usize, seed: u64, weeks: Vec<WeekForecast>, wall_seconds: f64) -> Result<WalkForwardReport> {
    let preds: Vec<_> = weeks.iter().map(|w| w.pred).collect();
    let actuals: Vec<_> = weeks.iter().map(|w| w.actual).collect();
    let m = metrics(&preds, &actuals)?;
    Ok(WalkForwardReport {
        round,
        seed,
        agg_rmse: m.agg_rmse,
        day_rmse: m.day_rmse,
        ratio: m.ratio,
        mean_actual: m.mean_actual,
        wall_seconds,
        weeks,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WalkForwardConfig {
    pub model: ModelId,
    pub rounds: usize,
    pub seed: u64,
    pub refit: RefitPolicy,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
}

impl WalkForwardConfig {
    /// Model defaults for epochs and batch size.
    pub fn new(model: ModelId, seed: u64) -> Self {
        let t = build_model(model).train;
        Self {
            model,
            rounds: 10,
            seed,
            refit: RefitPolicy::None,
            epochs: t.epochs,
            batch_size: t.batch_size,
            adam: AdamConfig::default(),
        }
    }

    fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed,
            loss: Loss::Mse,
            shuffle: true,
        }
    }
}

/// One full round: train on the split, then walk through the test weeks.
pub fn run_walkforward(ds: &SeriesDataset, cfg: &WalkForwardConfig, round: usize) -> Result<WalkForwardReport> {
    let start = Instant::now();
    if ds.split_week <= cfg.model.lookback_weeks() {
        return Err(Error::InsufficientData(format!(
            "{} needs more than {} training weeks, split is at week {}",
            cfg.model,
            cfg.model.lookback_weeks(),
            ds.split_week
        )));
    }
    let seed = derive_seed(cfg.seed, round as u64);
    let mut f = NetworkForecaster::new(cfg.model, cfg.train_config(seed), cfg.adam, cfg.refit, seed)?;
    let (weeks, _) = walk_forward(ds, &mut f)?;
    report_from(round, seed, weeks, start.elapsed().as_secs_f64())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryMeans {
    pub agg_rmse: f64,
    pub day_rmse: [f64; WEEK],
    pub ratio: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundSummary {
    pub model: String,
    pub rounds: Vec<WalkForwardReport>,
    pub summary: SummaryMeans,
}

impl RoundSummary {
    pub fn from_rounds(model: &str, rounds: Vec<WalkForwardReport>) -> Result<Self> {
        if rounds.is_empty() {
            return Err(Error::config("summary needs at least one round"));
        }
        let n = rounds.len() as f64;
        let mean = |f: &dyn Fn(&WalkForwardReport) -> f64| rounds.iter().map(f).sum::<f64>() / n;
        let summary = SummaryMeans {
            agg_rmse: mean(&|r| r.agg_rmse),
            day_rmse: std::array::from_fn(|j| mean(&|r| r.day_rmse[j])),
            ratio: mean(&|r| r.ratio),
            wall_seconds: mean(&|r| r.wall_seconds),
        };
        Ok(Self {
            model: model.to_string(),
            rounds,
            summary,
        })
    }

    /// Per-round table with a mean row and a relative-to-mean-open row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("round,agg_rmse,day1,day2,day3,day4,day5,time_s\n");
        let row = |label: String, agg: f64, days: &[f64; WEEK], t: String| {
            let d: Vec<String> = days.iter().map(|v| v.to_string()).collect();
            format!("{label},{agg},{},{t}\n", d.join(","))
        };
        for r in &self.rounds {
            out += &row((r.round + 1).to_string(), r.agg_rmse, &r.day_rmse, r.wall_seconds.to_string());
        }
        let s = &self.summary;
        out += &row("mean".into(), s.agg_rmse, &s.day_rmse, s.wall_seconds.to_string());
        let mean_open = self.rounds[0].mean_actual;
        out += &row(
            "rmse_over_mean".into(),
            s.agg_rmse / mean_open,
            &s.day_rmse.map(|d| d / mean_open),
            String::new(),
        );
        out
    }
}

/// All rounds of `cfg`, either one after another or spread over the rayon pool.
///
/// Each round draws its seed from `(cfg.seed, round)`, so both schedules give
/// identical reports apart from timing.
pub fn run_rounds(ds: &SeriesDataset, cfg: &WalkForwardConfig, parallel: bool) -> Result<RoundSummary> {
    if cfg.rounds == 0 {
        return Err(Error::config("rounds must be at least 1"));
    }
    let reports = if parallel {
        (0..cfg.rounds)
            .into_par_iter()
            .map(|r| run_walkforward(ds, cfg, r))
            .collect::<Result<Vec<_>>>()?
    } else {
        (0..cfg.rounds)
            .map(|r| run_walkforward(ds, cfg, r))
            .collect::<Result<Vec<_>>>()?
    };
    RoundSummary::from_rounds(cfg.model.name(), reports)
}
