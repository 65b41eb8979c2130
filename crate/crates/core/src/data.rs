//! OHLCV ingestion, weekly framing, scaling, windowing and synthetic series.

use std::io::Read;
use std::path::Path;

use chrono::{NaiveDate, NaiveDateTime};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::training::Dataset;

/// Steps per week and forecast horizon.
pub const WEEK: usize = 5;

pub const FEATURES: [&str; 5] = ["open", "high", "low", "close", "volume"];

const HEADER: [&str; 6] = ["timestamp", "open", "high", "low", "close", "volume"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OhlcvRecord {
    pub timestamp: String,
    pub open: f64,
    pub high: f64,
    pub low: f64,
    pub close: f64,
    pub volume: f64,
}

impl OhlcvRecord {
    pub fn features(&self) -> [f64; 5] {
        [self.open, self.high, self.low, self.close, self.volume]
    }

    /// `low <= min(open, close) <= max(open, close) <= high`.
    pub fn is_consistent(&self) -> bool {
        self.low <= self.open.min(self.close) && self.open.max(self.close) <= self.high
    }
}

fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    if let Ok(t) = chrono::DateTime::parse_from_rfc3339(s) {
        return Some(t.naive_utc());
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M"] {
        if let Ok(t) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(t);
        }
    }
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .ok()
        .and_then(|d| d.and_hms_opt(0, 0, 0))
}

pub fn load_csv(path: &Path) -> Result<Vec<OhlcvRecord>> {
    let file = std::fs::File::open(path)
        .map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
    read_csv(file, path)
}

/// Parses OHLCV rows from `reader`; `path` only labels error messages.
pub fn read_csv<R: Read>(reader: R, path: &Path) -> Result<Vec<OhlcvRecord>> {
    let err = |line: u64, reason: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(|e| err(1, e.to_string()))?.clone();
    let mut cols = [0usize; 6];
    for (slot, name) in cols.iter_mut().zip(HEADER) {
        *slot = headers
            .iter()
            .position(|h| h.eq_ignore_ascii_case(name))
            .ok_or_else(|| err(1, format!("missing column `{name}`")))?;
    }

    let mut out = Vec::new();
    let mut prev: Option<(NaiveDateTime, String)> = None;
    for row in rdr.records() {
        let row = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            err(line, e.to_string())
        })?;
        let line = row.position().map_or(0, |p| p.line());
        let field = |i: usize| row.get(cols[i]).unwrap_or("");
        let ts = field(0).to_string();
        let when = parse_timestamp(&ts).ok_or_else(|| err(line, format!("bad timestamp `{ts}`")))?;
        let mut values = [0.0; 5];
        for (k, v) in values.iter_mut().enumerate() {
            let raw = field(k + 1);
            *v = raw
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| err(line, format!("non-numeric {} `{raw}`", FEATURES[k])))?;
        }
        if values[..4].iter().any(|&p| p <= 0.0) {
            return Err(err(line, "prices must be positive".into()));
        }
        if values[4] < 0.0 {
            return Err(err(line, "volume must be non-negative".into()));
        }
        if let Some((t0, s0)) = &prev {
            if when <= *t0 {
                return Err(err(
                    line,
                    format!("timestamps out of order: `{ts}` does not follow `{s0}`"),
                ));
            }
        }
        let rec = OhlcvRecord {
            timestamp: ts.clone(),
            open: values[0],
            high: values[1],
            low: values[2],
            close: values[3],
            volume: values[4],
        };
        if !rec.is_consistent() {
            log::warn!("{}:{line}: high/low do not bracket open/close", path.display());
        }
        out.push(rec);
        prev = Some((when, ts));
    }
    Ok(out)
}

pub fn write_csv(path: &Path, records: &[OhlcvRecord]) -> Result<()> {
    write_csv_to(std::fs::File::create(path)?, records)
}

pub fn write_csv_to<W: std::io::Write>(writer: W, records: &[OhlcvRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in records {
        w.serialize(r).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Splits records into consecutive five-step weeks, dropping any remainder.
pub fn partition_weeks(records: &[OhlcvRecord]) -> Result<Vec<&[OhlcvRecord]>> {
    if records.len() < WEEK {
        return Err(Error::InsufficientData(format!(
            "{} records do not fill one {WEEK}-step week",
            records.len()
        )));
    }
    let rem = records.len() % WEEK;
    if rem != 0 {
        log::warn!("dropping {rem} trailing records that do not fill a week");
    }
    Ok(records.chunks_exact(WEEK).collect())
}

/// Per-feature min-max scaler with headroom on both ends.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub min: [f64; 5],
    pub max: [f64; 5],
}

impl Scaler {
    /// Fraction of the observed range added on each side.
    pub const HEADROOM: f64 = 0.05;

    pub fn fit(rows: &[OhlcvRecord]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InsufficientData("no rows to fit the scaler".into()));
        }
        let mut lo = [f64::INFINITY; 5];
        let mut hi = [f64::NEG_INFINITY; 5];
        for r in rows {
            for (k, v) in r.features().into_iter().enumerate() {
                lo[k] = lo[k].min(v);
                hi[k] = hi[k].max(v);
            }
        }
        for k in 0..5 {
            let range = hi[k] - lo[k];
            if range <= 0.0 {
                return Err(Error::ConstantFeature(FEATURES[k].into()));
            }
            lo[k] -= Self::HEADROOM * range;
            hi[k] += Self::HEADROOM * range;
        }
        Ok(Self { min: lo, max: hi })
    }

    pub fn apply(&self, feature: usize, x: f64) -> f64 {
        (x - self.min[feature]) / (self.max[feature] - self.min[feature])
    }

    pub fn invert(&self, feature: usize, x: f64) -> f64 {
        x * (self.max[feature] - self.min[feature]) + self.min[feature]
    }

    pub fn apply_record(&self, r: &OhlcvRecord) -> [f64; 5] {
        let f = r.features();
        std::array::from_fn(|k| self.apply(k, f[k]))
    }
}

/// Records split into weeks, with a scaler fitted on the training weeks.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesDataset {
    records: Vec<OhlcvRecord>,
    /// First test week.
    pub split_week: usize,
    pub scaler: Scaler,
}

impl SeriesDataset {
    pub fn new(records: Vec<OhlcvRecord>, split_week: usize) -> Result<Self> {
        let weeks = partition_weeks(&records)?.len();
        if split_week == 0 || split_week > weeks {
            return Err(Error::InsufficientData(format!(
                "split week {split_week} is outside 1..={weeks}"
            )));
        }
        let mut records = records;
        records.truncate(weeks * WEEK);
        let scaler = Scaler::fit(&records[..split_week * WEEK])?;
        Ok(Self {
            records,
            split_week,
            scaler,
        })
    }

    /// Splits roughly `train_fraction` of the weeks into training.
    pub fn with_fraction(records: Vec<OhlcvRecord>, train_fraction: f64) -> Result<Self> {
        let weeks = records.len() / WEEK;
        let split = ((weeks as f64 * train_fraction).round() as usize).clamp(1, weeks.max(1));
        Self::new(records, split)
    }

    pub fn records(&self) -> &[OhlcvRecord] {
        &self.records
    }

    pub fn n_weeks(&self) -> usize {
        self.records.len() / WEEK
    }

    pub fn week(&self, w: usize) -> &[OhlcvRecord] {
        &self.records[w * WEEK..(w + 1) * WEEK]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variables {
    Univariate,
    Multivariate,
}

impl Variables {
    pub fn channels(self) -> usize {
        match self {
            Variables::Univariate => 1,
            Variables::Multivariate => 5,
        }
    }
}

/// Scaled model input from consecutive weeks, oldest first.
pub fn window_input(weeks: &[&[OhlcvRecord]], scaler: &Scaler, vars: Variables) -> Tensor<f64> {
    let c = vars.channels();
    let mut data = Vec::with_capacity(weeks.len() * WEEK * c);
    for r in weeks.iter().flat_map(|w| w.iter()) {
        let s = scaler.apply_record(r);
        data.extend_from_slice(&s[..c]);
    }
    Tensor::new(vec![weeks.len() * WEEK, c], data).expect("window shape matches data")
}

/// Scaled opens of one week.
pub fn week_target(week: &[OhlcvRecord], scaler: &Scaler) -> Tensor<f64> {
    Tensor::vector(week.iter().map(|r| scaler.apply(0, r.open)).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowedSamples {
    pub x: Vec<Tensor<f64>>,
    pub y: Vec<Tensor<f64>>,
    /// Index of the target week of each sample.
    pub week_index: Vec<usize>,
}

impl WindowedSamples {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    /// Samples whose target week is below `end`.
    pub fn before_week(&self, end: usize) -> Dataset<f64> {
        let keep: Vec<usize> = (0..self.len()).filter(|&i| self.week_index[i] < end).collect();
        Dataset {
            inputs: keep.iter().map(|&i| self.x[i].clone()).collect(),
            targets: keep.iter().map(|&i| self.y[i].clone()).collect(),
        }
    }

    pub fn to_dataset(&self) -> Dataset<f64> {
        Dataset {
            inputs: self.x.clone(),
            targets: self.y.clone(),
        }
    }
}

/// One sample per week with a full lookback, stepping a week at a time.
pub fn make_windows(
    ds: &SeriesDataset,
    lookback_weeks: usize,
    vars: Variables,
) -> Result<WindowedSamples> {
    if lookback_weeks == 0 {
        return Err(Error::config("lookback must be at least one week"));
    }
    if ds.n_weeks() <= lookback_weeks {
        return Err(Error::InsufficientData(format!(
            "{} weeks cannot support a {lookback_weeks}-week lookback plus a target week",
            ds.n_weeks()
        )));
    }
    let mut out = WindowedSamples {
        x: Vec::new(),
        y: Vec::new(),
        week_index: Vec::new(),
    };
    for w in lookback_weeks..ds.n_weeks() {
        let hist: Vec<&[OhlcvRecord]> = (w - lookback_weeks..w).map(|k| ds.week(k)).collect();
        out.x.push(window_input(&hist, &ds.scaler, vars));
        out.y.push(week_target(ds.week(w), &ds.scaler));
        out.week_index.push(w);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    Sine,
    RandomWalk,
    LinearTrend,
}

impl std::str::FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sine" => Ok(SynthKind::Sine),
            "random_walk" | "random-walk" => Ok(SynthKind::RandomWalk),
            "linear_trend" | "linear-trend" => Ok(SynthKind::LinearTrend),
            _ => Err(Error::config(format!(
                "unknown series kind `{s}`; expected sine, random_walk or linear_trend"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    /// Sine amplitude.
    pub amplitude: f64,
    /// Sine period in steps.
    pub period: f64,
    /// Sine offset, trend intercept and random-walk start.
    pub offset: f64,
    /// Trend slope per step.
    pub slope: f64,
    /// Mean of the log-price increment per step.
    pub drift: f64,
    /// Standard deviation of the log-price increment per step.
    pub volatility: f64,
    /// Standard deviation of Gaussian noise added to sine and trend opens.
    pub noise: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            amplitude: 10.0,
            period: 17.3,
            offset: 100.0,
            slope: 0.05,
            drift: 0.0002,
            volatility: 0.01,
            noise: 0.0,
        }
    }
}

/// Deterministic synthetic OHLCV series with daily timestamps.
pub fn synth_series(kind: SynthKind, n: usize, seed: u64, p: &SynthParams) -> Result<Vec<OhlcvRecord>> {
    if n < WEEK {
        return Err(Error::config(format!("need at least {WEEK} steps, got {n}")));
    }
    if p.offset <= 0.0 {
        return Err(Error::config("offset must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tau = std::f64::consts::TAU;
    let opens: Vec<f64> = match kind {
        SynthKind::Sine => {
            if p.amplitude < 0.0 || p.period <= 0.0 || p.offset - p.amplitude <= 0.0 {
                return Err(Error::config(format!(
                    "sine with amplitude {} and offset {} does not stay positive",
                    p.amplitude, p.offset
                )));
            }
            (0..=n)
                .map(|t| p.amplitude * (tau * t as f64 / p.period).sin() + p.offset)
                .collect()
        }
        SynthKind::LinearTrend => (0..=n).map(|t| p.offset + p.slope * t as f64).collect(),
        SynthKind::RandomWalk => {
            let mut log_p = p.offset.ln();
            let mut v = Vec::with_capacity(n + 1);
            for _ in 0..=n {
                v.push(log_p.exp());
                let z: f64 = rng.sample(StandardNormal);
                log_p += p.drift + p.volatility * z;
            }
            v
        }
    };
    let start = NaiveDate::from_ymd_opt(2013, 1, 1).expect("valid date");
    let mut out = Vec::with_capacity(n);
    for t in 0..n {
        let mut open = opens[t];
        let mut close = match kind {
            SynthKind::Sine => p.amplitude * (tau * (t as f64 + 0.5) / p.period).sin() + p.offset,
            SynthKind::LinearTrend => p.offset + p.slope * (t as f64 + 0.5),
            SynthKind::RandomWalk => opens[t + 1],
        };
        if kind != SynthKind::RandomWalk && p.noise > 0.0 {
            let z1: f64 = rng.sample(StandardNormal);
            let z2: f64 = rng.sample(StandardNormal);
            open += p.noise * z1;
            close += p.noise * z2;
        }
        let spread = 0.002 * open.abs() * (1.0 + rng.random::<f64>());
        let high = open.max(close) + spread;
        let low = open.min(close) - spread;
        if low <= 0.0 {
            return Err(Error::config(format!(
                "series reaches a non-positive price at step {t}"
            )));
        }
        let volume = (1.0e6 * (1.0 + 0.5 * (tau * t as f64 / 23.0).sin()) * (0.9 + 0.2 * rng.random::<f64>())).round();
        let day = start + chrono::Days::new(t as u64);
        out.push(OhlcvRecord {
            timestamp: day.format("%Y-%m-%d").to_string(),
            open,
            high,
            low,
            close,
            volume,
        });
    }
    Ok(out)
}
