//! Progressive growth, prior freezing and iterative magnitude pruning over
//! block-structured networks.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{BlockSource, BlockSpec, BlockState, ModelGraph, Network};
use crate::layers::LayerSpec;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::training::{derive_seed, evaluate, AdamConfig, Dataset, Loss, Metric, TrainConfig, Trainer};

/// One difficulty-scored slice of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct SubBatch<T> {
    pub data: Dataset<T>,
    pub difficulty: f64,
}

/// Sub-batches ordered from easiest to hardest.
#[derive(Debug, Clone, PartialEq)]
pub struct Curriculum<T> {
    pub batches: Vec<SubBatch<T>>,
}

fn class_of<T: Scalar>(y: &Tensor<T>) -> usize {
    let d = y.data();
    (0..d.len()).fold(0, |best, i| if d[i] > d[best] { i } else { best })
}

/// Mean squared residual of a least-squares affine fit from inputs to targets.
pub fn linear_fit_loss<T: Scalar>(data: &Dataset<T>) -> f64 {
    let n = data.len();
    if n == 0 {
        return 0.0;
    }
    let dx = data.inputs[0].len();
    let dy = data.targets[0].len();
    let x = DMatrix::from_fn(n, dx + 1, |i, j| {
        if j == dx {
            1.0
        } else {
            data.inputs[i].data()[j].as_f64()
        }
    });
    let y = DMatrix::from_fn(n, dy, |i, j| data.targets[i].data()[j].as_f64());
    let beta = x
        .clone()
        .svd(true, true)
        .solve(&y, 1e-12)
        .unwrap_or_else(|_| DMatrix::zeros(dx + 1, dy));
    let r = &x * beta - &y;
    r.norm_squared() / (n * dy) as f64
}

/// Splits `batch` into `n` stratified sub-batches sorted by linear-fit loss.
///
/// With `categorical` targets every sub-batch receives members of every
/// class, assigned round-robin within each class.
pub fn make_curricula<T: Scalar>(batch: &Dataset<T>, n: usize, categorical: bool) -> Result<Curriculum<T>> {
    if n == 0 || batch.len() < n {
        return Err(Error::InsufficientData(format!(
            "cannot split {} samples into {n} curricula",
            batch.len()
        )));
    }
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); n];
    if categorical {
        let classes = batch.targets.first().map_or(0, |t| t.len());
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); classes];
        for (i, y) in batch.targets.iter().enumerate() {
            members[class_of(y)].push(i);
        }
        for (k, m) in members.iter().enumerate() {
            if !m.is_empty() && m.len() < n {
                return Err(Error::InsufficientData(format!(
                    "class {k} has {} samples, fewer than the {n} curricula that must each contain it",
                    m.len()
                )));
            }
            for (j, &i) in m.iter().enumerate() {
                groups[j % n].push(i);
            }
        }
        for g in &mut groups {
            g.sort_unstable();
        }
    } else {
        for i in 0..batch.len() {
            groups[i % n].push(i);
        }
    }
    let mut batches: Vec<SubBatch<T>> = groups
        .into_iter()
        .map(|idx| {
            let data = Dataset {
                inputs: idx.iter().map(|&i| batch.inputs[i].clone()).collect(),
                targets: idx.iter().map(|&i| batch.targets[i].clone()).collect(),
            };
            let difficulty = linear_fit_loss(&data);
            SubBatch { data, difficulty }
        })
        .collect();
    batches.sort_by(|a, b| a.difficulty.total_cmp(&b.difficulty));
    Ok(Curriculum { batches })
}

/// Grows every non-output position by a half-width copy of each original
/// block and regenerates the output block.
///
/// New first-position blocks read the same input as the block they copy;
/// deeper new blocks read every block of the previous position. Existing
/// blocks keep their weights, masks and frozen flags.
pub fn progress<T: Scalar>(net: &Network<T>, cycle: usize, seed: u64) -> Result<Network<T>> {
    let out_pos = net.output_position();
    let mut graph = net.graph();
    for p in 0..out_pos {
        let originals: Vec<BlockSpec> = graph.positions[p]
            .iter()
            .filter(|b| b.cycle_added == 0)
            .cloned()
            .collect();
        let prior = if p > 0 { graph.positions[p - 1].len() } else { 0 };
        for b in originals {
            let source = match &b.source {
                BlockSource::Input { .. } if p == 0 => b.source.clone(),
                _ => BlockSource::Blocks((0..prior).collect()),
            };
            let layers = b.layers.iter().map(LayerSpec::halved).collect();
            let mut spec = BlockSpec::new(&format!("{}_c{cycle}", b.name), layers, source);
            spec.cycle_added = cycle;
            graph.positions[p].push(spec);
        }
    }
    let feeding = graph.positions[out_pos - 1].len();
    let out = &mut graph.positions[out_pos][0];
    out.source = BlockSource::Blocks((0..feeding).collect());
    out.cycle_added = cycle;
    out.frozen = false;

    let shapes = graph.block_shapes()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, cycle as u64));
    let mut positions = Vec::with_capacity(graph.positions.len());
    for (p, (specs, bs)) in graph.positions.iter().zip(&shapes).enumerate() {
        let mut blocks = Vec::with_capacity(specs.len());
        for (b, (spec, s)) in specs.iter().zip(bs).enumerate() {
            let keep = p != out_pos && b < net.positions[p].len();
            if keep {
                blocks.push(net.positions[p][b].clone());
            } else {
                blocks.push(BlockState::build(spec, &s.input, &mut rng)?);
            }
        }
        positions.push(blocks);
    }
    Ok(Network {
        name: net.name.clone(),
        input_shape: net.input_shape.clone(),
        output_len: net.output_len,
        train: net.train,
        positions,
    })
}

/// Freezes every non-output block added before `cycle`.
pub fn freeze_priors<T: Scalar>(net: &mut Network<T>, cycle: usize) {
    let out_pos = net.output_position();
    for blocks in &mut net.positions[..out_pos] {
        for b in blocks {
            if b.spec.cycle_added < cycle {
                b.set_frozen(true);
            }
        }
    }
}

/// Masks `ceil(q * n)` of the `n` smallest-magnitude prunable weights.
///
/// Only unmasked weights of unfrozen layers rank; biases never do. Ties
/// break on tensor order, then flat index. Returns the number newly masked.
pub fn prune_step<T: Scalar>(net: &mut Network<T>, q: f64) -> Result<usize> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::config(format!("prune fraction {q} is outside (0, 1)")));
    }
    let mut cands: Vec<(T, usize, usize)> = Vec::new();
    let ids: Vec<_> = net.params().into_iter().map(|(id, p, frozen)| (id, p.prunable && !frozen)).collect();
    for (t, (_, p, _)) in net.params().into_iter().enumerate() {
        if !ids[t].1 {
            continue;
        }
        for (i, &w) in p.value.data().iter().enumerate() {
            if !p.is_masked(i) {
                cands.push((w.abs(), t, i));
            }
        }
    }
    if cands.is_empty() {
        return Err(Error::NothingPrunable(
            "no unmasked weights remain in unfrozen layers".into(),
        ));
    }
    let k = (q * cands.len() as f64).ceil() as usize;
    let cmp = |a: &(T, usize, usize), b: &(T, usize, usize)| {
        a.0.partial_cmp(&b.0)
            .unwrap_or(Ordering::Equal)
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    };
    if k < cands.len() {
        cands.select_nth_unstable_by(k, cmp);
        cands.truncate(k);
    }
    for &(_, t, i) in &cands {
        net.param_mut(ids[t].0).mask_position(i);
    }
    Ok(k)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CycleMode {
    /// Fresh model every cycle, no pruning.
    Static,
    /// Progressive growth with earlier blocks frozen.
    Frozen,
    /// Progressive growth with everything trainable and prunable.
    Free,
}

impl CycleMode {
    pub const ALL: [CycleMode; 3] = [CycleMode::Static, CycleMode::Frozen, CycleMode::Free];
}

impl fmt::Display for CycleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CycleMode::Static => "static",
            CycleMode::Frozen => "frozen",
            CycleMode::Free => "free",
        })
    }
}

impl FromStr for CycleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "static" => Ok(CycleMode::Static),
            "frozen" => Ok(CycleMode::Frozen),
            "free" => Ok(CycleMode::Free),
            _ => Err(Error::config(format!(
                "unknown mode `{s}`; expected static, frozen or free"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CycleConfig {
    pub epochs_per_cycle: usize,
    pub batch_size: usize,
    pub prune_q: f64,
    pub post_prune_epochs: usize,
    pub post_prune_lr_scale: f64,
    pub max_prune_iterations: usize,
    /// Sub-batches per training batch; 1 trains on the shuffled batch.
    pub curricula: usize,
    pub adam: AdamConfig,
    pub loss: Loss,
    pub metric: Metric,
}

impl Default for CycleConfig {
    fn default() -> Self {
        Self {
            epochs_per_cycle: 20,
            batch_size: 32,
            prune_q: 0.10,
            post_prune_epochs: 10,
            post_prune_lr_scale: 0.1,
            max_prune_iterations: 50,
            curricula: 1,
            adam: AdamConfig::progressive(),
            loss: Loss::CrossEntropy,
            metric: Metric::Accuracy,
        }
    }
}

impl CycleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.prune_q > 0.0 && self.prune_q < 1.0) {
            return Err(Error::config(format!("prune fraction {} is outside (0, 1)", self.prune_q)));
        }
        if self.epochs_per_cycle == 0 || self.batch_size == 0 || self.curricula == 0 {
            return Err(Error::config("epochs, batch size and curricula must be at least 1"));
        }
        if self.post_prune_lr_scale <= 0.0 {
            return Err(Error::config("post-prune learning-rate scale must be positive"));
        }
        self.adam.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "phase")]
pub enum Phase {
    Main,
    PostPrune { iteration: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    #[serde(flatten)]
    pub phase: Phase,
    pub train_loss: f64,
    pub train: f64,
    pub val: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneOutcome {
    /// Prune iterations performed, including one that was rolled back.
    pub iterations: usize,
    pub restored: bool,
    pub capped: bool,
    pub epochs: Vec<EpochRecord>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn run_epoch<T: Scalar>(
    trainer: &mut Trainer<T>,
    net: &mut Network<T>,
    train: &[Dataset<T>],
    whole: &Dataset<T>,
    val: &Dataset<T>,
    metric: Metric,
    phase: Phase,
) -> Result<EpochRecord> {
    let mut loss = 0.0;
    for part in train {
        loss += trainer.epoch(net, part)? * part.len() as f64;
    }
    Ok(EpochRecord {
        phase,
        train_loss: loss / whole.len() as f64,
        train: evaluate(net, whole, metric)?,
        val: evaluate(net, val, metric)?,
    })
}

/// Prunes and retrains until the mean validation metric of a retraining
/// window falls below the previous one, then rolls back that last step.
///
/// `trainer` continues from the main training run; its learning rate is
/// scaled for the retraining epochs. `baseline` is the comparison value for
/// the first iteration.
#[allow(clippy::too_many_arguments)]
pub fn prune_loop<T: Scalar>(
    net: &mut Network<T>,
    trainer: &mut Trainer<T>,
    train: &[Dataset<T>],
    whole: &Dataset<T>,
    val: &Dataset<T>,
    cfg: &CycleConfig,
    baseline: f64,
) -> Result<PruneOutcome> {
    trainer.adam.lr = cfg.adam.lr * cfg.post_prune_lr_scale;
    let mut outcome = PruneOutcome {
        iterations: 0,
        restored: false,
        capped: false,
        epochs: Vec::new(),
    };
    let mut prev = baseline;
    loop {
        if outcome.iterations == cfg.max_prune_iterations {
            log::warn!(
                "prune loop stopped at the cap of {} iterations without degrading",
                cfg.max_prune_iterations
            );
            outcome.capped = true;
            break;
        }
        let snapshot = (net.clone(), trainer.clone());
        match prune_step(net, cfg.prune_q) {
            Ok(_) => {}
            Err(Error::NothingPrunable(_)) => break,
            Err(e) => return Err(e),
        }
        outcome.iterations += 1;
        let phase = Phase::PostPrune {
            iteration: outcome.iterations,
        };
        let mut vals = Vec::with_capacity(cfg.post_prune_epochs);
        for _ in 0..cfg.post_prune_epochs {
            let rec = run_epoch(trainer, net, train, whole, val, cfg.metric, phase)?;
            vals.push(rec.val);
            outcome.epochs.push(rec);
        }
        let m = if vals.is_empty() {
            evaluate(net, val, cfg.metric)?
        } else {
            mean(&vals)
        };
        if m < prev {
            *net = snapshot.0;
            *trainer = snapshot.1;
            outcome.restored = true;
            break;
        }
        prev = m;
    }
    Ok(outcome)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleRecord {
    pub cycle: usize,
    pub epochs: Vec<EpochRecord>,
    pub prune_iterations: usize,
    pub restored: bool,
    pub best: f64,
    pub params: usize,
    pub masked: usize,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleLog {
    pub mode: CycleMode,
    pub cycles: Vec<CycleRecord>,
    pub max_val: f64,
    pub bapc: f64,
}

impl CycleLog {
    pub fn from_cycles(mode: CycleMode, cycles: Vec<CycleRecord>) -> Self {
        let max_val = cycles
            .iter()
            .flat_map(|c| c.epochs.iter().map(|e| e.val))
            .fold(f64::NEG_INFINITY, f64::max);
        let bapc = if cycles.is_empty() {
            f64::NAN
        } else {
            cycles.iter().map(|c| c.best).sum::<f64>() / cycles.len() as f64
        };
        Self {
            mode,
            cycles,
            max_val,
            bapc,
        }
    }

    /// Per-epoch rows with a marker on the first epoch of each cycle.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,cycle,phase,iteration,train_loss,train,val,cycle_start\n");
        let mut idx = 0;
        for c in &self.cycles {
            for (k, e) in c.epochs.iter().enumerate() {
                let (phase, it) = match e.phase {
                    Phase::Main => ("main", 0),
                    Phase::PostPrune { iteration } => ("post_prune", iteration),
                };
                out += &format!(
                    "{idx},{},{phase},{it},{},{},{},{}\n",
                    c.cycle,
                    e.train_loss,
                    e.train,
                    e.val,
                    u8::from(k == 0)
                );
                idx += 1;
            }
        }
        out
    }
}

/// Trains one cycle per batch in the given mode.
///
/// Each batch is a `(train, validation)` pair. Progressive modes grow the
/// network before every cycle after the first and prune after training.
pub fn run_cycles<T: Scalar>(
    initial: &ModelGraph,
    batches: &[(Dataset<T>, Dataset<T>)],
    cfg: &CycleConfig,
    mode: CycleMode,
    seed: u64,
) -> Result<CycleLog> {
    cfg.validate()?;
    if batches.is_empty() {
        return Err(Error::InsufficientData("no batches to train on".into()));
    }
    let build = |s: u64| Network::<T>::build(initial, &mut ChaCha8Rng::seed_from_u64(s));
    let mut net = build(seed)?;
    let mut cycles = Vec::with_capacity(batches.len());
    for (c, (train, val)) in batches.iter().enumerate() {
        let start = Instant::now();
        if c > 0 {
            match mode {
                CycleMode::Static => net = build(derive_seed(seed, c as u64))?,
                CycleMode::Frozen => {
                    net = progress(&net, c, seed)?;
                    freeze_priors(&mut net, c);
                }
                CycleMode::Free => net = progress(&net, c, seed)?,
            }
        }
        let parts: Vec<Dataset<T>> = if cfg.curricula > 1 {
            let categorical = cfg.loss == Loss::CrossEntropy;
            make_curricula(train, cfg.curricula, categorical)?
                .batches
                .into_iter()
                .map(|b| b.data)
                .collect()
        } else {
            vec![train.clone()]
        };
        let tc = TrainConfig {
            epochs: cfg.epochs_per_cycle,
            batch_size: cfg.batch_size,
            seed: derive_seed(seed ^ 0x5EED, c as u64),
            loss: cfg.loss,
            shuffle: true,
        };
        let mut trainer = Trainer::new(tc, cfg.adam)?;
        let mut epochs = Vec::new();
        for _ in 0..cfg.epochs_per_cycle {
            epochs.push(run_epoch(&mut trainer, &mut net, &parts, train, val, cfg.metric, Phase::Main)?);
        }
        let (mut prune_iterations, mut restored) = (0, false);
        if mode != CycleMode::Static {
            let window = cfg.post_prune_epochs.clamp(1, epochs.len());
            let tail: Vec<f64> = epochs[epochs.len() - window..].iter().map(|e| e.val).collect();
            let outcome = prune_loop(&mut net, &mut trainer, &parts, train, val, cfg, mean(&tail))?;
            prune_iterations = outcome.iterations;
            restored = outcome.restored;
            epochs.extend(outcome.epochs);
        }
        let best = epochs.iter().map(|e| e.val).fold(f64::NEG_INFINITY, f64::max);
        cycles.push(CycleRecord {
            cycle: c,
            epochs,
            prune_iterations,
            restored,
            best,
            params: net.num_scalars(),
            masked: net.masked_count(),
            wall_seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(CycleLog::from_cycles(mode, cycles))
}

/// Runs several modes on the same batches, optionally in parallel.
pub fn run_modes<T: Scalar>(
    initial: &ModelGraph,
    batches: &[(Dataset<T>, Dataset<T>)],
    cfg: &CycleConfig,
    modes: &[CycleMode],
    seed: u64,
    parallel: bool,
) -> Result<Vec<CycleLog>> {
    let run = |&m: &CycleMode| run_cycles(initial, batches, cfg, m, seed);
    if parallel {
        modes.par_iter().map(run).collect()
    } else {
        modes.iter().map(run).collect()
    }
}

/// What a targeted prune removes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selector {
    /// Every parameter of one block.
    Block { position: usize, block: usize },
    /// Every weight reading one channel of the raw input.
    Feature(usize),
}

fn mask_block<T: Scalar>(block: &mut BlockState<T>) -> usize {
    let mut n = 0;
    for layer in &mut block.layers {
        for p in &mut layer.params {
            for i in 0..p.value.len() {
                if !p.is_masked(i) {
                    p.mask_position(i);
                    n += 1;
                }
            }
        }
    }
    n
}

/// Masks the weights of one input block that read `channels`; the whole
/// block when they are its only input. Returns the number newly masked.
fn mask_feature<T: Scalar>(block: &mut BlockState<T>, channels: &[usize]) -> Result<usize> {
    let mut feats = channels.to_vec();
    for l in 0..block.layers.len() {
        let layer = &block.layers[l];
        match layer.spec {
            LayerSpec::MaxPool1d | LayerSpec::Dropout { .. } | LayerSpec::Concatenate | LayerSpec::RepeatVector { .. } => {}
            LayerSpec::Flatten => {
                if layer.input_shape.len() == 2 {
                    let (steps, c) = (layer.input_shape[0], layer.input_shape[1]);
                    feats = (0..steps).flat_map(|t| feats.iter().map(move |&k| t * c + k)).collect();
                }
            }
            _ => {
                let only_input = feats.len() == *layer.input_shape.last().expect("shape");
                if only_input {
                    return Ok(mask_block(block));
                }
                let mut n = 0;
                for (pi, positions) in layer.weights_reading(&feats)? {
                    let p = &mut block.layers[l].params[pi];
                    for i in positions {
                        if !p.is_masked(i) {
                            p.mask_position(i);
                            n += 1;
                        }
                    }
                }
                return Ok(n);
            }
        }
    }
    Ok(0)
}

/// Explicitly prunes a block or an input feature and reopens the blocks
/// downstream of it for training.
pub fn targeted_prune<T: Scalar>(net: &mut Network<T>, selector: &Selector) -> Result<usize> {
    let (first_downstream, masked) = match *selector {
        Selector::Block { position, block } => {
            let b = net
                .positions
                .get_mut(position)
                .and_then(|bs| bs.get_mut(block))
                .ok_or_else(|| {
                    Error::EmptySelection(format!("no block at position {position}, index {block}"))
                })?;
            if b.num_scalars() == 0 {
                return Err(Error::EmptySelection(format!("block `{}` has no parameters", b.spec.name)));
            }
            (position + 1, mask_block(b))
        }
        Selector::Feature(ch) => {
            let width = net.input_shape[1];
            if ch >= width {
                return Err(Error::EmptySelection(format!(
                    "feature {ch} is outside the {width} input channels"
                )));
            }
            let mut n = 0;
            let mut matched = false;
            for b in &mut net.positions[0] {
                let local = match &b.spec.source {
                    BlockSource::Input { channels: None } => Some(ch),
                    BlockSource::Input { channels: Some(list) } => list.iter().position(|&c| c == ch),
                    BlockSource::Blocks(_) => None,
                };
                if let Some(k) = local {
                    matched = true;
                    n += mask_feature(b, &[k])?;
                }
            }
            if !matched {
                return Err(Error::EmptySelection(format!("no input block reads feature {ch}")));
            }
            (1, n)
        }
    };
    for blocks in net.positions.iter_mut().skip(first_downstream) {
        for b in blocks {
            b.set_frozen(false);
        }
    }
    Ok(masked)
}

/// Stream of 2-D Gaussian clusters whose centres rotate from batch to batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterStream {
    pub batches: usize,
    pub samples_per_batch: usize,
    pub train_per_batch: usize,
    pub classes: usize,
    pub radius: f64,
    pub spread: f64,
    /// Rotation of every centre per batch, in radians.
    pub drift: f64,
}

impl Default for ClusterStream {
    fn default() -> Self {
        Self {
            batches: 10,
            samples_per_batch: 600,
            train_per_batch: 500,
            classes: 4,
            radius: 2.0,
            spread: 0.9,
            drift: 0.15,
        }
    }
}

impl ClusterStream {
    /// `(train, validation)` pairs with `[1, 2]` inputs and one-hot targets.
    pub fn generate<T: Scalar>(&self, seed: u64) -> Result<Vec<(Dataset<T>, Dataset<T>)>> {
        if self.classes < 2 || self.train_per_batch == 0 || self.train_per_batch >= self.samples_per_batch {
            return Err(Error::config("cluster stream needs ≥2 classes and a non-empty train/validation split"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(self.batches);
        for b in 0..self.batches {
            let mut inputs = Vec::with_capacity(self.samples_per_batch);
            let mut targets = Vec::with_capacity(self.samples_per_batch);
            for _ in 0..self.samples_per_batch {
                let k = rng.random_range(0..self.classes);
                let angle = std::f64::consts::TAU * k as f64 / self.classes as f64 + self.drift * b as f64;
                let zx: f64 = rng.sample(StandardNormal);
                let zy: f64 = rng.sample(StandardNormal);
                let x = self.radius * angle.cos() + self.spread * zx;
                let y = self.radius * angle.sin() + self.spread * zy;
                inputs.push(Tensor::new(vec![1, 2], vec![T::of(x), T::of(y)])?);
                let mut onehot = vec![T::zero(); self.classes];
                onehot[k] = T::one();
                targets.push(Tensor::vector(onehot));
            }
            let val = Dataset {
                inputs: inputs.split_off(self.train_per_batch),
                targets: targets.split_off(self.train_per_batch),
            };
            out.push((Dataset { inputs, targets }, val));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::TrainDefaults;
    use crate::tensor::Activation;
    use crate::zoo::mlp;

    #[test]
    fn mode_parse() {
        for m in CycleMode::ALL {
            assert_eq!(m.to_string().parse::<CycleMode>().unwrap(), m);
        }
        assert!("sometimes".parse::<CycleMode>().is_err());
    }

    #[test]
    fn bapc_from_bests() {
        let rec = |best: f64| CycleRecord {
            cycle: 0,
            epochs: vec![EpochRecord {
                phase: Phase::Main,
                train_loss: 0.0,
                train: best,
                val: best,
            }],
            prune_iterations: 0,
            restored: false,
            best,
            params: 0,
            masked: 0,
            wall_seconds: 0.0,
        };
        let log = CycleLog::from_cycles(CycleMode::Free, vec![rec(0.8), rec(0.6), rec(0.7)]);
        assert!((log.bapc - 0.7).abs() < 1e-12);
        assert_eq!(log.max_val, 0.8);
    }

    #[test]
    fn progress_mlp_widths() {
        let g = mlp("m", 2, &[8], 3, Activation::Linear, TrainDefaults { epochs: 1, batch_size: 1 });
        let net = Network::<f64>::build(&g, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let grown = progress(&net, 1, 9).unwrap();
        assert_eq!(grown.positions[0].len(), 2);
        assert_eq!(grown.positions[0][1].output_shape(), &[4]);
        assert_eq!(grown.positions[1][0].input_shape, vec![12]);
        assert_eq!(grown.positions[0][0], net.positions[0][0]);
    }
}
