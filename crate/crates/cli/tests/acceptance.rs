//! End-to-end acceptance checks, one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`) so each line reports its own
//! runtime against the budget. Any failure makes the process exit non-zero.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use granite::data::{synth_series, OhlcvRecord, SeriesDataset, SynthKind, SynthParams, WEEK};
use granite::graph::{Network, TrainDefaults};
use granite::layers::{build, LayerSpec, LayerState, Mode};
use granite::progressive::{
    freeze_priors, progress, prune_loop, prune_step, run_cycles, run_modes, ClusterStream, CycleConfig, CycleLog,
    CycleMode,
};
use granite::tensor::{Activation, Tensor};
use granite::training::{derive_seed, evaluate, AdamConfig, Dataset, Loss, Metric, TrainConfig, Trainer};
use granite::walkforward::{
    run_rounds, run_walkforward, walk_forward, NetworkForecaster, RefitPolicy, WalkForwardConfig,
};
use granite::zoo::{build_model, mlp, ModelId};
use granite_cli::{run_with, EXPECTED_TOTALS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        {
            let ok: bool = $cond;
            if !ok {
                return Err(format!($($fmt)+));
            }
        }
    };
}

fn criterion(n: u32, name: &str, budget: Duration, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let result = f();
    let took = start.elapsed();
    let (ok, detail) = match result {
        Ok(d) if took <= budget => (true, d),
        Ok(d) => (false, format!("{d}; over the {budget:?} budget")),
        Err(e) => (false, e),
    };
    println!(
        "criterion {n} {}: {name} ({:.2}s / {}s) {detail}",
        if ok { "PASS" } else { "FAIL" },
        took.as_secs_f64(),
        budget.as_secs()
    );
    ok
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

const FD_H: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;

enum Check {
    Ok,
    /// Matched only after shrinking the step past a nearby kink.
    Refined,
    /// Sits on a kink: the one-sided slopes disagree.
    Kink,
    Bad(f64),
}

/// Compares an analytic derivative with central differences of `f` around
/// the current point. A mismatch is retried with a ten times smaller step,
/// since a ReLU or max-pool switch inside the step skews the difference.
fn compare(analytic: f64, f: &mut dyn FnMut(f64) -> f64) -> Check {
    let central = |f: &mut dyn FnMut(f64) -> f64, h: f64| (f(h) - f(-h)) / (2.0 * h);
    if rel_err(analytic, central(f, FD_H)) <= FD_TOL {
        return Check::Ok;
    }
    let small = FD_H / 10.0;
    let fd = central(f, small);
    if rel_err(analytic, fd) <= FD_TOL {
        return Check::Refined;
    }
    let f0 = f(0.0);
    let (right, left) = ((f(small) - f0) / small, (f0 - f(-small)) / small);
    if rel_err(right, left) > 1e-3 {
        Check::Kink
    } else {
        Check::Bad(rel_err(analytic, fd))
    }
}

#[derive(Default)]
struct Tally {
    ok: usize,
    refined: usize,
    kinks: usize,
}

impl Tally {
    fn record(&mut self, c: Check, what: impl FnOnce() -> String) -> Result<(), String> {
        match c {
            Check::Ok => self.ok += 1,
            Check::Refined => self.refined += 1,
            Check::Kink => self.kinks += 1,
            Check::Bad(e) => return Err(format!("{}: rel err {e:.2e}", what())),
        }
        Ok(())
    }

    fn total(&self) -> usize {
        self.ok + self.refined + self.kinks
    }
}

fn layer_cases() -> Vec<(LayerSpec, Vec<usize>)> {
    use LayerSpec::*;
    vec![
        (Conv1d { filters: 3, kernel: 3, activation: Activation::Relu }, vec![7, 2]),
        (Conv1d { filters: 2, kernel: 2, activation: Activation::Linear }, vec![4, 3]),
        (MaxPool1d, vec![6, 3]),
        (MaxPool1d, vec![1, 4]),
        (Flatten, vec![3, 2]),
        (Dense { units: 4, activation: Activation::Sigmoid }, vec![5]),
        (Dense { units: 3, activation: Activation::Relu }, vec![4]),
        (Dense { units: 3, activation: Activation::Softmax }, vec![4]),
        (Dense { units: 2, activation: Activation::Tanh }, vec![3]),
        (Dropout { rate: 0.3 }, vec![5]),
        (Lstm { units: 4, return_sequences: false }, vec![3, 2]),
        (Lstm { units: 3, return_sequences: true }, vec![4, 2]),
        (RepeatVector { times: 3 }, vec![4]),
        (TimeDistributedDense { units: 2, activation: Activation::Relu }, vec![3, 4]),
        (ConvLstm1d { filters: 3, kernel: 3, subsequences: 2 }, vec![10, 2]),
        (Concatenate, vec![2, 3]),
    ]
}

fn layer_loss(l: &LayerState<f64>, x: &Tensor<f64>, w: &Tensor<f64>, mask_seed: u64) -> f64 {
    let (y, _) = l.forward(x, Mode::Train, &mut ChaCha8Rng::seed_from_u64(mask_seed)).unwrap();
    y.mul(w).unwrap().sum()
}

/// Full finite-difference check of one layer over its inputs and parameters.
fn check_layer(spec: &LayerSpec, shape: &[usize], seed: u64, tally: &mut Tally) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layer = build::<f64>(spec, shape, &mut rng).map_err(|e| e.to_string())?;
    for p in &mut layer.params {
        if !p.prunable {
            for v in p.value.data_mut() {
                *v += rng.random_range(-0.5..0.5);
            }
        }
    }
    let x = rand_tensor(&mut rng, shape, -1.0, 1.0);
    let w = rand_tensor(&mut rng, &layer.output_shape, -1.0, 1.0);
    let mask_seed = rng.random();
    let (_, cache) = layer
        .forward(&x, Mode::Train, &mut ChaCha8Rng::seed_from_u64(mask_seed))
        .map_err(|e| e.to_string())?;
    let (gx, gp) = layer.backward(&cache, &w).map_err(|e| e.to_string())?;
    for i in 0..x.len() {
        let mut f = |d: f64| {
            let mut xp = x.clone();
            xp.data_mut()[i] += d;
            layer_loss(&layer, &xp, &w, mask_seed)
        };
        tally.record(compare(gx.data()[i], &mut f), || format!("{} input[{i}] seed {seed}", spec.kind_name()))?;
    }
    for (pi, g) in gp.iter().enumerate() {
        for j in 0..g.len() {
            let mut f = |d: f64| {
                let mut lp = layer.clone();
                lp.params[pi].value.data_mut()[j] += d;
                layer_loss(&lp, &x, &w, mask_seed)
            };
            tally.record(compare(g.data()[j], &mut f), || {
                format!("{} {}[{j}] seed {seed}", spec.kind_name(), layer.params[pi].name)
            })?;
        }
    }
    Ok(())
}

/// Sampled finite-difference check of a whole model: a few coordinates of
/// every parameter tensor.
fn check_model(id: ModelId, seed: u64, per_tensor: usize, tally: &mut Tally) -> Result<(), String> {
    let g = build_model(id);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = Network::<f64>::build(&g, &mut rng).map_err(|e| e.to_string())?;
    let x = rand_tensor(&mut rng, &g.input_shape, 0.0, 1.0);
    let w = rand_tensor(&mut rng, &[g.output_len], -1.0, 1.0);
    let loss = |n: &Network<f64>| {
        let (y, _) = n.forward(&x, Mode::Train, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        y.mul(&w).unwrap().sum()
    };
    let (_, cache) = net
        .forward(&x, Mode::Train, &mut ChaCha8Rng::seed_from_u64(seed))
        .map_err(|e| e.to_string())?;
    let grads = net.backward(&cache, &w).map_err(|e| e.to_string())?;
    let ids: Vec<_> = net.params().iter().map(|(id, _, _)| *id).collect();
    for (pid, gr) in ids.iter().zip(&grads) {
        for _ in 0..per_tensor {
            let j = rng.random_range(0..gr.len());
            let mut f = |d: f64| {
                let mut n = net.clone();
                n.param_mut(*pid).value.data_mut()[j] += d;
                loss(&n)
            };
            tally.record(compare(gr.data()[j], &mut f), || format!("{id} {pid:?}[{j}] seed {seed}"))?;
        }
    }
    Ok(())
}

fn audit_oracle() -> Outcome {
    let conv = |k: usize, d: usize, f: usize| (k * d + 1) * f;
    let dense = |p: usize, c: usize| p * c + c;
    let lstm = |x: usize, y: usize| 4 * ((x + y) * x + x);
    let conv_lstm = |k: usize, d: usize, x: usize| 4 * x * (k * (d + x) + 1);
    let multh: Vec<usize> = (0..5)
        .flat_map(|_| [conv(3, 1, 32), conv(3, 32, 32)])
        .chain([dense(480, 200), dense(200, 100), dense(100, 5)])
        .collect();
    // rows as printed in the parameter tables, with formula values where a row
    // disagrees with its own formula
    let tables: Vec<(ModelId, Vec<usize>)> = vec![
        (ModelId::CNN_UNIV_5, vec![64, 170, 55]),
        (ModelId::CNN_UNIV_10, vec![64, 650, 55]),
        (ModelId::CNN_MULTV_10, vec![512, 3104, 1552, 1700, 505]),
        (ModelId::CNN_MULTH_10, multh.clone()),
        (ModelId::LSTM_UNIV_5, vec![161600, 20100, 505, 30]),
        (ModelId::LSTM_UNIV_10, vec![161600, 20100, 505, 30]),
        (ModelId::LSTM_UNIV_ED_10, vec![161600, 320800, 20100, 101]),
        (ModelId::LSTM_MULTV_ED_10, vec![164800, 320800, 20100, 101]),
        (ModelId::LSTM_UNIV_CNN_10, vec![256, 12352, 314400, 20100, 101]),
        (ModelId::LSTM_UNIV_CONV_10, vec![50176, 314400, 20100, 101]),
    ];
    let formula: Vec<Vec<usize>> = vec![
        vec![conv(3, 1, 16), dense(16, 10), dense(10, 5)],
        vec![conv(3, 1, 16), dense(64, 10), dense(10, 5)],
        vec![conv(3, 5, 32), conv(3, 32, 32), conv(3, 32, 16), dense(16, 100), dense(100, 5)],
        multh,
        vec![lstm(200, 1), dense(200, 100), dense(100, 5), dense(5, 5)],
        vec![lstm(200, 1), dense(200, 100), dense(100, 5), dense(5, 5)],
        vec![lstm(200, 1), lstm(200, 200), dense(200, 100), dense(100, 1)],
        vec![lstm(200, 5), lstm(200, 200), dense(200, 100), dense(100, 1)],
        vec![conv(3, 1, 64), conv(3, 64, 64), lstm(200, 192), dense(200, 100), dense(100, 1)],
        vec![conv_lstm(3, 1, 64), lstm(200, 192), dense(200, 100), dense(100, 1)],
    ];
    for (((id, rows), want), (eid, total)) in tables.iter().zip(&formula).zip(EXPECTED_TOTALS) {
        ensure!(*id == eid, "model order differs at {id}");
        let audit = build_model(*id).audit().map_err(|e| e.to_string())?;
        let got: Vec<usize> = audit.entries.iter().map(|e| e.params).filter(|&p| p > 0).collect();
        ensure!(&got == rows, "{id}: rows {got:?} differ from table {rows:?}");
        ensure!(&got == want, "{id}: rows {got:?} differ from formulas {want:?}");
        ensure!(audit.total == total, "{id}: total {} != {total}", audit.total);
        ensure!(want.iter().sum::<usize>() == total, "{id}: formula total differs from {total}");
    }
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = run_with(["granite", "audit", "--format", "json"], &mut out, &mut err);
    ensure!(code == 0, "`granite audit` exited {code}");
    let code = run_with(["granite", "audit", "--model", "NOPE"], &mut Vec::new(), &mut Vec::new());
    ensure!(code == 1, "`granite audit --model NOPE` exited {code}, expected 1");
    Ok("10 totals and all per-layer rows match tables and formulas".into())
}

fn trace_oracle() -> Outcome {
    let quoted: Vec<(ModelId, Vec<Vec<usize>>)> = vec![
        (ModelId::CNN_UNIV_5, vec![vec![5, 1], vec![3, 16], vec![1, 16], vec![16], vec![10], vec![5]]),
        (ModelId::CNN_UNIV_10, vec![vec![10, 1], vec![8, 16], vec![4, 16], vec![64], vec![10], vec![5]]),
        (
            ModelId::CNN_MULTV_10,
            vec![vec![10, 5], vec![8, 32], vec![6, 32], vec![3, 32], vec![1, 16], vec![1, 16], vec![16], vec![100], vec![5]],
        ),
        (
            ModelId::LSTM_UNIV_CNN_10,
            vec![vec![10, 1], vec![8, 64], vec![6, 64], vec![3, 64], vec![192], vec![5, 192], vec![5, 200], vec![5, 100], vec![5, 1]],
        ),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut layers = 0;
    for id in ModelId::ALL {
        let g = build_model(id);
        let symbolic: Vec<Vec<usize>> = g.shape_trace().map_err(|e| e.to_string())?.into_iter().map(|e| e.shape).collect();
        let net = Network::<f64>::build(&g, &mut rng).map_err(|e| e.to_string())?;
        let x = rand_tensor(&mut rng, &g.input_shape, 0.0, 1.0);
        let concrete = net.forward_trace(&x).map_err(|e| e.to_string())?;
        ensure!(symbolic == concrete, "{id}: symbolic {symbolic:?} vs concrete {concrete:?}");
        ensure!(symbolic.last() == Some(&vec![5]) || symbolic.last() == Some(&vec![5, 1]), "{id}: output {:?}", symbolic.last());
        layers += symbolic.len();
        if let Some((_, want)) = quoted.iter().find(|(q, _)| *q == id) {
            ensure!(&symbolic == want, "{id}: trace {symbolic:?} differs from quoted {want:?}");
        }
    }
    let multh: Vec<Vec<usize>> = build_model(ModelId::CNN_MULTH_10)
        .shape_trace()
        .map_err(|e| e.to_string())?
        .into_iter()
        .map(|e| e.shape)
        .collect();
    ensure!(multh.iter().filter(|s| **s == vec![3, 32]).count() == 5, "CNN_MULTH_10 heads do not pool to (3, 32)");
    ensure!(multh.iter().filter(|s| **s == vec![96]).count() == 5, "CNN_MULTH_10 heads do not flatten to 96");
    ensure!(multh.contains(&vec![480]), "CNN_MULTH_10 does not concatenate to 480");
    let conv = build_model(ModelId::LSTM_UNIV_CONV_10).shape_trace().map_err(|e| e.to_string())?;
    ensure!(conv.iter().any(|e| e.shape == vec![192]), "LSTM_UNIV_CONV_10 does not flatten to 192");
    Ok(format!("{layers} traced shapes agree; quoted shapes reproduced"))
}

fn gradient_suite() -> Outcome {
    let seeds = 20;
    let mut layers = Tally::default();
    for seed in 0..seeds {
        for (spec, shape) in layer_cases() {
            check_layer(&spec, &shape, seed, &mut layers)?;
        }
    }
    let mut models = Tally::default();
    for id in ModelId::ALL {
        for seed in 0..seeds {
            check_model(id, 1000 + seed, 2, &mut models)?;
        }
    }
    let kinks = layers.kinks + models.kinks;
    let total = layers.total() + models.total();
    ensure!(kinks * 100 < total, "{kinks} of {total} coordinates sat on kinks");
    Ok(format!(
        "{} layer kinds and 10 models over {seeds} seeds; {} layer and {} model coordinates within {FD_TOL:e} \
         ({} needed a smaller step, {kinks} kink coordinates skipped)",
        layer_cases().len(),
        layers.total(),
        models.total(),
        layers.refined + models.refined
    ))
}

fn sine_records(n: usize, noise: f64, seed: u64) -> Vec<OhlcvRecord> {
    let p = SynthParams {
        noise,
        ..SynthParams::default()
    };
    synth_series(SynthKind::Sine, n, seed, &p).unwrap()
}

fn walkforward_suite() -> Outcome {
    let recs = sine_records(300, 0.5, 3);
    let ds = SeriesDataset::new(recs.clone(), 10).map_err(|e| e.to_string())?;
    let train = TrainConfig {
        epochs: 3,
        batch_size: 4,
        seed: 1,
        loss: Loss::Mse,
        shuffle: true,
    };
    let refit = RefitPolicy::Incremental { epochs: 1 };
    let forecaster = || NetworkForecaster::new(ModelId::CNN_UNIV_5, train, AdamConfig::default(), refit, 5).unwrap();
    let (weeks, probes) = walk_forward(&ds, &mut forecaster()).map_err(|e| e.to_string())?;
    ensure!(weeks.len() == 50, "{} test weeks, expected 50", weeks.len());
    for (i, p) in probes.iter().enumerate() {
        ensure!(p.visible_weeks == p.test_week, "week {}: {} weeks visible", p.test_week, p.visible_weeks);
        match p.max_week_read {
            Some(m) => ensure!(m < p.test_week, "week {} read week {m}", p.test_week),
            None => return Err(format!("week {}: no reads recorded", p.test_week)),
        }
        if i > 0 {
            ensure!(
                p.train_records_after == probes[i - 1].train_records_after + WEEK,
                "training window did not grow by one week at week {}",
                p.test_week
            );
        }
    }
    // brute-force leak scan: corrupting every record from week w on must not
    // change any forecast made before w's actuals were revealed
    for w in [10usize, 27, 59] {
        let mut corrupt = recs.clone();
        for r in &mut corrupt[w * WEEK..] {
            r.open *= 3.0;
            r.high *= 3.0;
            r.low *= 3.0;
            r.close *= 3.0;
        }
        let cds = SeriesDataset::new(corrupt, 10).map_err(|e| e.to_string())?;
        let (cw, _) = walk_forward(&cds, &mut forecaster()).map_err(|e| e.to_string())?;
        for (a, b) in weeks.iter().zip(&cw).take_while(|(a, _)| a.week <= w) {
            ensure!(a.pred == b.pred, "forecast for week {} changed when weeks >= {w} were altered", a.week);
        }
    }
    let cfg = WalkForwardConfig {
        rounds: 3,
        epochs: 3,
        ..WalkForwardConfig::new(ModelId::CNN_UNIV_5, 11)
    };
    let strip = |mut s: granite::walkforward::RoundSummary| {
        s.summary.wall_seconds = 0.0;
        s.rounds.iter_mut().for_each(|r| r.wall_seconds = 0.0);
        s
    };
    let serial = strip(run_rounds(&ds, &cfg, false).map_err(|e| e.to_string())?);
    let parallel = strip(run_rounds(&ds, &cfg, true).map_err(|e| e.to_string())?);
    ensure!(serial == parallel, "serial and parallel rounds differ");
    for r in &serial.rounds {
        ensure!((r.ratio * r.mean_actual - r.agg_rmse).abs() <= 1e-9, "ratio * mean != agg_rmse in round {}", r.round);
        let cells: Vec<f64> = r
            .weeks
            .iter()
            .flat_map(|w| (0..WEEK).map(move |j| (w.pred[j] - w.actual[j]).powi(2)))
            .collect();
        let mean_sq = cells.iter().sum::<f64>() / cells.len() as f64;
        ensure!((r.agg_rmse.powi(2) - mean_sq).abs() <= 1e-9, "agg^2 != mean squared error in round {}", r.round);
    }
    Ok("50 test weeks, zero future reads, leak scan clean, identities hold, 3 rounds serial == parallel".into())
}

fn learnability_gate() -> Outcome {
    let recs = sine_records(2500, 0.0, 0);
    let ds = SeriesDataset::new(recs.clone(), 400).map_err(|e| e.to_string())?;
    ensure!(ds.n_weeks() - ds.split_week == 100, "expected 100 test weeks");
    let cfg = WalkForwardConfig::new(ModelId::CNN_UNIV_5, 2024);
    let report = run_walkforward(&ds, &cfg, 0).map_err(|e| e.to_string())?;
    // persistence straight from the raw records
    let (mut sq, mut sum) = (0.0, 0.0);
    for w in 400..500 {
        let last = recs[w * WEEK - 1].open;
        for j in 0..WEEK {
            let actual = recs[w * WEEK + j].open;
            sq += (last - actual).powi(2);
            sum += actual;
        }
    }
    let persist_rmse = (sq / 500.0).sqrt();
    let persist_ratio = persist_rmse / (sum / 500.0);
    ensure!(report.ratio <= 0.05, "ratio {:.5} above 0.05", report.ratio);
    ensure!(
        report.agg_rmse < persist_rmse,
        "rmse {:.4} does not beat persistence {persist_rmse:.4}",
        report.agg_rmse
    );
    Ok(format!(
        "ratio {:.5} (persistence {:.5}), rmse {:.4} vs {:.4}",
        report.ratio, persist_ratio, report.agg_rmse, persist_rmse
    ))
}

fn progressive_suite() -> Outcome {
    let td = TrainDefaults { epochs: 1, batch_size: 16 };
    let stream = ClusterStream {
        batches: 3,
        samples_per_batch: 200,
        train_per_batch: 160,
        ..ClusterStream::default()
    }
    .generate::<f64>(4)
    .map_err(|e| e.to_string())?;

    // freeze soundness across one trained cycle
    let base = Network::<f64>::build(&mlp("m", 2, &[8, 8], 4, Activation::Linear, td), &mut ChaCha8Rng::seed_from_u64(1))
        .map_err(|e| e.to_string())?;
    let mut net = progress(&base, 1, 9).map_err(|e| e.to_string())?;
    freeze_priors(&mut net, 1);
    let frozen: Vec<_> = net.positions[..2].iter().map(|p| p[0].clone()).collect();
    let tc = TrainConfig {
        epochs: 5,
        batch_size: 16,
        seed: 3,
        loss: Loss::CrossEntropy,
        shuffle: true,
    };
    Trainer::new(tc, AdamConfig::progressive())
        .and_then(|mut t| t.train(&mut net, &stream[0].0, None))
        .map_err(|e| e.to_string())?;
    for (p, before) in frozen.iter().enumerate() {
        ensure!(&net.positions[p][0] == before, "frozen block at position {p} changed");
    }

    // exact prune counts and strict mask growth
    let mut wide = Network::<f64>::build(&mlp("w", 100, &[], 1, Activation::Linear, td), &mut ChaCha8Rng::seed_from_u64(2))
        .map_err(|e| e.to_string())?;
    let first = prune_step(&mut wide, 0.1).map_err(|e| e.to_string())?;
    let second = prune_step(&mut wide, 0.1).map_err(|e| e.to_string())?;
    ensure!((first, second) == (10, 9), "prune counts {first}, {second}");
    let mut last = wide.masked_count();
    for _ in 0..10 {
        prune_step(&mut wide, 0.1).map_err(|e| e.to_string())?;
        ensure!(wide.masked_count() > last, "masked count did not grow");
        last = wide.masked_count();
    }

    // restore on degradation is bit-identical
    let xs: Vec<f64> = (0..20).map(|i| i as f64 / 10.0 - 1.0).collect();
    let line = Dataset::new(
        xs.iter().map(|&x| Tensor::new(vec![1, 1], vec![x]).unwrap()).collect(),
        xs.iter().map(|&x| Tensor::vector(vec![2.0 * x])).collect(),
    )
    .map_err(|e| e.to_string())?;
    let mut unit = Network::<f64>::build(&mlp("u", 1, &[], 1, Activation::Linear, td), &mut ChaCha8Rng::seed_from_u64(4))
        .map_err(|e| e.to_string())?;
    let adam = AdamConfig {
        lr: 0.05,
        ..AdamConfig::default()
    };
    let mut trainer = Trainer::new(
        TrainConfig {
            epochs: 300,
            batch_size: 4,
            seed: 1,
            loss: Loss::Mse,
            shuffle: true,
        },
        adam,
    )
    .map_err(|e| e.to_string())?;
    trainer.train(&mut unit, &line, None).map_err(|e| e.to_string())?;
    let baseline = evaluate(&unit, &line, Metric::NegRmse).map_err(|e| e.to_string())?;
    let before = (unit.clone(), trainer.clone());
    let cfg = CycleConfig {
        prune_q: 0.5,
        post_prune_epochs: 2,
        adam,
        loss: Loss::Mse,
        metric: Metric::NegRmse,
        ..CycleConfig::default()
    };
    let out = prune_loop(&mut unit, &mut trainer, std::slice::from_ref(&line), &line, &line, &cfg, baseline)
        .map_err(|e| e.to_string())?;
    ensure!(out.iterations == 1 && out.restored, "prune loop: {} iterations, restored {}", out.iterations, out.restored);
    ensure!(unit == before.0, "restored network differs from the snapshot");
    ensure!(trainer.state == before.1.state, "restored optimizer moments differ from the snapshot");
    ensure!(
        evaluate(&unit, &line, Metric::NegRmse).map_err(|e| e.to_string())? == baseline,
        "restored metric differs"
    );

    // wiring law after three progressions on a three-layer MLP
    let mut grown = Network::<f64>::build(&mlp("m", 3, &[8, 6], 2, Activation::Linear, td), &mut ChaCha8Rng::seed_from_u64(5))
        .map_err(|e| e.to_string())?;
    for c in 1..=3 {
        grown = progress(&grown, c, 7).map_err(|e| e.to_string())?;
        for p in 1..grown.positions.len() {
            for b in &grown.positions[p] {
                let c_added = b.spec.cycle_added;
                let width: usize = grown.positions[p - 1]
                    .iter()
                    .filter(|q| q.spec.cycle_added <= c_added)
                    .map(|q| q.output_shape().iter().product::<usize>())
                    .sum();
                let is_output = p == grown.positions.len() - 1;
                let want = if is_output {
                    grown.positions[p - 1].iter().map(|q| q.output_shape().iter().product::<usize>()).sum()
                } else {
                    width
                };
                ensure!(
                    b.input_shape.iter().product::<usize>() == want,
                    "block {} at position {p} reads {:?}, expected width {want}",
                    b.spec.name,
                    b.input_shape
                );
            }
        }
    }

    // bookkeeping recomputed from the raw epoch log
    let small = CycleConfig {
        epochs_per_cycle: 4,
        batch_size: 16,
        post_prune_epochs: 2,
        max_prune_iterations: 5,
        ..CycleConfig::default()
    };
    let log = run_cycles(&mlp("m", 2, &[8], 4, Activation::Linear, td), &stream, &small, CycleMode::Free, 6)
        .map_err(|e| e.to_string())?;
    let json: Value = serde_json::to_value(&log).map_err(|e| e.to_string())?;
    let mut bests = Vec::new();
    let mut max_val = f64::NEG_INFINITY;
    for c in json["cycles"].as_array().ok_or("no cycles in log")? {
        let vals: Vec<f64> = c["epochs"].as_array().ok_or("no epochs")?.iter().map(|e| e["val"].as_f64().unwrap()).collect();
        let best = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        max_val = max_val.max(best);
        bests.push(best);
    }
    let bapc = bests.iter().sum::<f64>() / bests.len() as f64;
    ensure!(bapc == log.bapc, "BAPC {bapc} vs logged {}", log.bapc);
    ensure!(max_val == log.max_val, "max {max_val} vs logged {}", log.max_val);
    Ok(format!(
        "freeze exact, prune 10 then 9, restore exact, wiring holds, BAPC {:.4} recomputed",
        log.bapc
    ))
}

fn bapc_pair(seed: u64) -> Result<(f64, f64), String> {
    let stream = ClusterStream::default();
    let batches = stream.generate::<f64>(derive_seed(seed, 0xDA7A)).map_err(|e| e.to_string())?;
    let g = mlp("MLP_16_16", 2, &[16, 16], stream.classes, Activation::Linear, TrainDefaults { epochs: 10, batch_size: 32 });
    let cfg = CycleConfig {
        epochs_per_cycle: 10,
        ..CycleConfig::default()
    };
    let logs: Vec<CycleLog> =
        run_modes(&g, &batches, &cfg, &[CycleMode::Static, CycleMode::Free], seed, true).map_err(|e| e.to_string())?;
    Ok((logs[0].bapc, logs[1].bapc))
}

fn directional_check() -> Outcome {
    let (s, f) = bapc_pair(1)?;
    if f >= s - 0.01 {
        return Ok(format!("seed 1: free BAPC {f:.4} vs static {s:.4}"));
    }
    let mut held = 0;
    let mut notes = vec![format!("seed 1 failed (free {f:.4}, static {s:.4})")];
    for seed in [2, 3, 4] {
        let (s, f) = bapc_pair(seed)?;
        if f >= s - 0.01 {
            held += 1;
        }
        notes.push(format!("seed {seed}: free {f:.4}, static {s:.4}"));
    }
    ensure!(held >= 2, "{}; only {held} of 3 alternates hold", notes.join("; "));
    Ok(format!("{}; {held} of 3 alternates hold", notes.join("; ")))
}

fn strip_timing(v: &mut Value) {
    match v {
        Value::Object(m) => {
            m.remove("wall_seconds");
            m.values_mut().for_each(strip_timing);
        }
        Value::Array(a) => a.iter_mut().for_each(strip_timing),
        _ => {}
    }
}

fn cli_json(args: &[&str]) -> Result<Value, String> {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = run_with(args.iter().copied(), &mut out, &mut err);
    ensure!(code == 0, "{:?} exited {code}: {}", args, String::from_utf8_lossy(&err));
    let mut v: Value = serde_json::from_slice(&out).map_err(|e| e.to_string())?;
    strip_timing(&mut v);
    Ok(v)
}

fn determinism_gate() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let csv = dir.path().join("sine.csv");
    let csv = csv.to_str().ok_or("temp path is not UTF-8")?;
    let code = run_with(["granite", "synth", "--kind", "sine", "--n", "600", "--seed", "3", "--out", csv], &mut Vec::new(), &mut Vec::new());
    ensure!(code == 0, "synth exited {code}");
    let first_csv = std::fs::read(csv).map_err(|e| e.to_string())?;
    run_with(["granite", "synth", "--kind", "sine", "--n", "600", "--seed", "3", "--out", csv], &mut Vec::new(), &mut Vec::new());
    ensure!(std::fs::read(csv).map_err(|e| e.to_string())? == first_csv, "synth output differs between runs");

    let commands: Vec<Vec<&str>> = vec![
        vec!["granite", "audit", "--format", "json"],
        vec!["granite", "trace", "--model", "CNN_MULTH_10"],
        vec!["granite", "train", "--model", "CNN_UNIV_5", "--data", csv, "--seed", "7", "--epochs", "3"],
        vec!["granite", "walkforward", "--model", "CNN_UNIV_5", "--data", csv, "--rounds", "2", "--seed", "7", "--epochs", "3"],
        vec!["granite", "progressive", "--seed", "7", "--epochs", "2", "--batches", "2"],
        vec!["granite", "progressive", "--data", csv, "--seed", "7", "--epochs", "2", "--batches", "3", "--mode", "free"],
    ];
    for args in &commands {
        let a = cli_json(args)?;
        let b = cli_json(args)?;
        ensure!(a == b, "{} differs between runs", args[1]);
    }
    Ok(format!("{} commands byte-identical modulo timing", commands.len() + 1))
}

fn main() -> ExitCode {
    let secs = Duration::from_secs;
    let results = [
        criterion(1, "parameter audit", secs(1), audit_oracle),
        criterion(2, "shape traces", secs(1), trace_oracle),
        criterion(3, "gradient suite", secs(120), gradient_suite),
        criterion(4, "walk-forward protocol", secs(60), walkforward_suite),
        criterion(5, "learnability gate", secs(180), learnability_gate),
        criterion(6, "progressive mechanics", secs(120), progressive_suite),
        criterion(7, "progressive directional check", secs(300), directional_check),
        criterion(8, "determinism", secs(60), determinism_gate),
    ];
    let passed = results.iter().filter(|&&ok| ok).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed == results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
