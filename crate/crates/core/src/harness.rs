//! Experiment driver.
//!
//! A run trains one method under one selection strategy over every batch of
//! a stream. Batch 1 starts from a warm-start model pretrained on the
//! drift-free cohort-0 split. For each batch the starting snapshot is chosen
//! by the strategy, trained for a few epochs with the epoch of lowest dev WER
//! kept, and recorded; the strategy then picks the snapshot that is both
//! reported for this batch and continued from in the next one.
//!
//! A grid enumerates methods × strategies × seeds (and optionally learning
//! rates and strengths) and writes a results table, a JSON dump, and plot
//! data.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::{bootstrap_ci, corpus_wer, score_utterance, CiReport, UtteranceScore};
use crate::nncore::{Activation, Matrix, MlpConfig, Network};
use crate::regularizers::{regularized_step, FisherConfig, FisherMode, Method, RegState};
use crate::seed;
use crate::selection::{Provenance, SnapshotStore, Strategy};
use crate::stream::{build_stream, frames_of, import_stream, CorpusStream, GenConfig, ScheduleSource, Utterance};

/// Environment variable naming the directory that relative output paths resolve against.
pub const OUTPUT_ROOT_ENV: &str = "DRIFTLEARN_OUTPUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: vec![32],
            activation: Activation::Tanh,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs_per_batch: usize,
    /// Utterances per optimizer step; their frames are concatenated.
    pub minibatch_utterances: usize,
    pub learning_rate: f64,
    /// λ for EWC, α for SI. Ignored by `none`.
    pub reg_strength: f64,
    pub xi: f64,
    pub pretrain_epochs: usize,
    pub pretrain_learning_rate: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs_per_batch: 3,
            minibatch_utterances: 16,
            learning_rate: 0.2,
            reg_strength: 0.1,
            xi: 1e-3,
            pretrain_epochs: 30,
            pretrain_learning_rate: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FisherSettings {
    pub mode: FisherMode,
    pub n_samples: usize,
}

impl Default for FisherSettings {
    fn default() -> Self {
        let d = FisherConfig::default();
        FisherSettings {
            mode: d.mode,
            n_samples: d.n_samples,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub bootstrap_resamples: usize,
    pub ci_level: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            bootstrap_resamples: crate::eval::DEFAULT_RESAMPLES,
            ci_level: 0.95,
        }
    }
}

/// Extra grid axes. Empty lists fall back to the single training values.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridAxes {
    pub learning_rates: Vec<f64>,
    pub reg_strengths: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StreamConfig {
    /// Directory holding an exported stream. When set, generation settings are ignored.
    pub manifest: Option<PathBuf>,
    /// Fixed generation seed. When unset each run seed generates its own stream.
    pub seed: Option<u64>,
    pub schedule: ScheduleSource,
    pub gen: GenConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    /// Used by single runs.
    pub method: Method,
    pub strategy: Strategy,
    /// Used by grids.
    pub methods: Vec<Method>,
    pub strategies: Vec<Strategy>,
    /// Worker threads for grids; 0 picks the machine's parallelism.
    pub jobs: usize,
    pub model: ModelConfig,
    pub training: TrainConfig,
    pub fisher: FisherSettings,
    pub eval: EvalConfig,
    pub grid: GridAxes,
    pub stream: StreamConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            output_dir: PathBuf::from("driftlearn-out"),
            seeds: vec![0],
            method: Method::Ewc,
            strategy: Strategy::Ns,
            methods: Method::ALL.to_vec(),
            strategies: Strategy::ALL.to_vec(),
            jobs: 0,
            model: ModelConfig::default(),
            training: TrainConfig::default(),
            fisher: FisherSettings::default(),
            eval: EvalConfig::default(),
            grid: GridAxes::default(),
            stream: StreamConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.training;
        if t.epochs_per_batch == 0 {
            return Err(Error::Config("epochs_per_batch must be at least 1".into()));
        }
        if t.minibatch_utterances == 0 {
            return Err(Error::Config("minibatch_utterances must be at least 1".into()));
        }
        for (name, v) in [
            ("learning_rate", t.learning_rate),
            ("pretrain_learning_rate", t.pretrain_learning_rate),
            ("xi", t.xi),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(t.reg_strength >= 0.0 && t.reg_strength.is_finite()) {
            return Err(Error::Config(format!("reg_strength must be >= 0, got {}", t.reg_strength)));
        }
        if let Some(bad) = self.grid.learning_rates.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
            return Err(Error::Config(format!("grid learning rate {bad} must be positive")));
        }
        if !self.grid.learning_rates.is_empty() {
            let lo = self.grid.learning_rates.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = self.grid.learning_rates.iter().copied().fold(0.0, f64::max);
            if t.learning_rate < lo || t.learning_rate > hi {
                return Err(Error::Config(format!(
                    "learning_rate {} lies outside the grid bounds [{lo}, {hi}]",
                    t.learning_rate
                )));
            }
        }
        if let Some(bad) = self.grid.reg_strengths.iter().find(|v| !(**v >= 0.0 && v.is_finite())) {
            return Err(Error::Config(format!("grid strength {bad} must be >= 0")));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.methods.is_empty() || self.strategies.is_empty() {
            return Err(Error::Config("grid needs at least one method and one strategy".into()));
        }
        if self.fisher.n_samples == 0 {
            return Err(Error::Config("fisher.n_samples must be positive".into()));
        }
        if self.eval.bootstrap_resamples < 100 {
            return Err(Error::Config("eval.bootstrap_resamples must be at least 100".into()));
        }
        if !(self.eval.ci_level > 0.0 && self.eval.ci_level < 1.0) {
            return Err(Error::Config("eval.ci_level must lie in (0, 1)".into()));
        }
        if self.model.hidden.contains(&0) {
            return Err(Error::Config("hidden layer sizes must be positive".into()));
        }
        Ok(())
    }

    /// Output directory, resolved against the output-root variable when relative.
    pub fn resolved_output_dir(&self) -> PathBuf {
        resolve_output(&self.output_dir)
    }

    /// Stable hash of everything that affects results (not where they go or how many threads).
    pub fn hash(&self) -> String {
        let mut canon = self.clone();
        canon.output_dir = PathBuf::new();
        canon.jobs = 0;
        let json = serde_json::to_vec(&canon).expect("config is always serializable");
        hex::encode(Sha256::digest(json))
    }
}

pub fn resolve_output(path: &Path) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if !root.is_empty() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}

/// Load or generate the stream a run with `seed` trains on.
pub fn resolve_stream(cfg: &StreamConfig, seed: u64) -> Result<CorpusStream> {
    if let Some(dir) = &cfg.manifest {
        return import_stream(dir);
    }
    let schedule = cfg.schedule.resolve()?;
    build_stream(&schedule.spec, &cfg.gen, cfg.seed.unwrap_or(seed))
}

/// Identifies one run inside a grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunKey {
    pub method: Method,
    pub strategy: Strategy,
    pub seed: u64,
    pub learning_rate: f64,
    pub reg_strength: f64,
}

impl RunKey {
    pub fn dir_name(&self) -> String {
        format!(
            "{}-{}-lr{}-reg{}-seed{}",
            self.method.as_str(),
            self.strategy.as_str(),
            self.learning_rate,
            self.reg_strength,
            self.seed
        )
    }

    fn sort_key(&self) -> (Method, Strategy, u64, u64, u64) {
        (
            self.method,
            self.strategy,
            self.learning_rate.to_bits(),
            self.reg_strength.to_bits(),
            self.seed,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchResult {
    pub batch_index: usize,
    pub dev_wer: f64,
    pub test_wer: f64,
    pub test_ci: CiReport,
    /// WER on held-out speakers of the first cohort, when the stream has them.
    pub probe_wer: Option<f64>,
    /// Snapshot this batch's training started from (0 is the warm start).
    pub selected_from_batch: usize,
    /// Snapshot reported for this batch and continued from in the next one.
    pub reported_batch: usize,
    pub epoch_chosen: usize,
    pub epoch_dev_wers: Vec<f64>,
    pub mean_train_loss: f64,
    pub wall_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarmStartResult {
    pub dev_wer: f64,
    pub test_wer: f64,
    pub probe_wer: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub key: RunKey,
    pub config_hash: String,
    pub warm_start: WarmStartResult,
    pub batches: Vec<BatchResult>,
    /// True when a batch failed and `batches` holds only the ones before it.
    pub partial: bool,
}

impl RunResult {
    pub fn final_batch(&self) -> Option<&BatchResult> {
        self.batches.last()
    }

    /// Probe WER after the last batch minus probe WER after the first.
    pub fn probe_degradation(&self) -> Option<f64> {
        let first = self.batches.first()?.probe_wer?;
        let last = self.batches.last()?.probe_wer?;
        Some(last - first)
    }

    /// Every number except timings; two runs of one config agree on this exactly.
    pub fn without_timing(&self) -> RunResult {
        let mut r = self.clone();
        for b in &mut r.batches {
            b.wall_time = 0.0;
        }
        r
    }
}

/// Per-utterance scores of `net`'s argmax transcripts.
pub fn score_set(net: &Network, utts: &[Utterance]) -> Result<Vec<UtteranceScore>> {
    if utts.is_empty() {
        return Err(Error::Domain("cannot score an empty evaluation set".into()));
    }
    let dim = net.config().input_dim();
    let all = Matrix::vstack(dim, utts.iter().map(|u| &u.frames))?;
    let hyp = net.predict_tokens(&all)?;
    let mut start = 0;
    utts.iter()
        .map(|u| {
            let n = u.reference.len();
            let s = score_utterance(u.id, &u.reference, &hyp[start..start + n]);
            start += n;
            s
        })
        .collect()
}

pub fn wer_on(net: &Network, utts: &[Utterance]) -> Result<f64> {
    corpus_wer(&score_set(net, utts)?)
}

/// One pass of minibatch SGD over `utts` in a seeded order.
///
/// With an SI state, every step's task-loss gradient and parameter change
/// are accumulated. Returns the mean total loss over minibatches.
fn train_epoch(
    net: &mut Network,
    reg: &mut RegState,
    utts: &[Utterance],
    minibatch: usize,
    lr: f64,
    shuffle_seed: u64,
) -> Result<f64> {
    let dim = net.config().input_dim();
    let mut order: Vec<usize> = (0..utts.len()).collect();
    order.shuffle(&mut seed::rng(shuffle_seed));
    let mut total = 0.0;
    let mut steps = 0usize;
    for chunk in order.chunks(minibatch) {
        let batch = frames_of(dim, chunk.iter().map(|&i| &utts[i]))?;
        let step = regularized_step(net, &batch, reg)?;
        let delta = net.apply_sgd(&step.grad, lr)?;
        if let RegState::Si(si) = reg {
            si.accumulate(&step.task_grad, &delta)?;
        }
        total += step.loss.total;
        steps += 1;
    }
    Ok(total / steps as f64)
}

/// Initial model: Glorot init, then plain SGD on the cohort-0 split.
pub fn warm_start(stream: &CorpusStream, cfg: &RunConfig, seed: u64) -> Result<Network> {
    let mut sizes = vec![stream.input_dim()];
    sizes.extend(&cfg.model.hidden);
    sizes.push(stream.vocab_size());
    let mut net = Network::init(MlpConfig {
        layer_sizes: sizes,
        activation: cfg.model.activation,
        seed: seed::derive(seed, "init", 0),
    })?;
    if !stream.pretrain.is_empty() {
        let mut none = RegState::None;
        for epoch in 0..cfg.training.pretrain_epochs {
            train_epoch(
                &mut net,
                &mut none,
                &stream.pretrain,
                cfg.training.minibatch_utterances,
                cfg.training.pretrain_learning_rate,
                seed::derive(seed, "pretrain", epoch as u64),
            )
            .map_err(|e| e.with_context(&format!("warm start epoch {}", epoch + 1)))?;
        }
    }
    Ok(net)
}

/// Settings `train_one_batch` needs beyond the data.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchTraining {
    pub epochs: usize,
    pub minibatch_utterances: usize,
    pub learning_rate: f64,
    pub fisher: FisherSettings,
    pub batch_index: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchOutcome {
    pub net: Network,
    pub reg_state: RegState,
    /// 1-based.
    pub epoch_chosen: usize,
    pub dev_wer: f64,
    pub epoch_dev_wers: Vec<f64>,
    pub mean_train_loss: f64,
}

/// Train on one batch and keep the epoch with the lowest dev WER.
///
/// SI accumulates over every step of every epoch and consolidates on the
/// kept parameters. EWC recomputes its anchor and Fisher from the kept model
/// and this batch's frames.
pub fn train_one_batch(
    net: &Network,
    reg_state: &RegState,
    batch: &[Utterance],
    dev: &[Utterance],
    t: &BatchTraining,
) -> Result<BatchOutcome> {
    if batch.is_empty() {
        return Err(Error::Domain(format!("batch {} has no utterances", t.batch_index)));
    }
    if t.epochs == 0 {
        return Err(Error::Config("epochs_per_batch must be at least 1".into()));
    }
    let mut current = net.clone();
    let mut reg = reg_state.clone();
    if let RegState::Si(si) = &mut reg {
        si.begin_task(current.params())?;
    }
    let mut best: Option<(Network, f64, usize)> = None;
    let mut epoch_dev_wers = Vec::with_capacity(t.epochs);
    let mut loss_sum = 0.0;
    for epoch in 1..=t.epochs {
        let ctx = format!("batch {} epoch {epoch}", t.batch_index);
        let shuffle = seed::derive(t.seed, "shuffle", (t.batch_index as u64) << 16 | epoch as u64);
        loss_sum += train_epoch(&mut current, &mut reg, batch, t.minibatch_utterances, t.learning_rate, shuffle)
            .map_err(|e| e.with_context(&ctx))?;
        let wer = wer_on(&current, dev).map_err(|e| e.with_context(&ctx))?;
        epoch_dev_wers.push(wer);
        if best.as_ref().is_none_or(|(_, w, _)| wer < *w) {
            best = Some((current.clone(), wer, epoch));
        }
    }
    let (best_net, dev_wer, epoch_chosen) = best.expect("at least one epoch ran");
    let ctx = format!("batch {} consolidation", t.batch_index);
    match &mut reg {
        RegState::None => {}
        RegState::Si(si) => si.consolidate(best_net.params()).map_err(|e| e.with_context(&ctx))?,
        RegState::Ewc(ewc) => {
            let data = frames_of(best_net.config().input_dim(), batch)?;
            let cfg = FisherConfig {
                mode: t.fisher.mode,
                n_samples: t.fisher.n_samples,
                seed: seed::derive(t.seed, "fisher", t.batch_index as u64),
            };
            ewc.consolidate(&best_net, &data, &cfg).map_err(|e| e.with_context(&ctx))?;
        }
    }
    Ok(BatchOutcome {
        net: best_net,
        reg_state: reg,
        epoch_chosen,
        dev_wer,
        epoch_dev_wers,
        mean_train_loss: loss_sum / t.epochs as f64,
    })
}

pub const RUN_RESULT_FILE: &str = "run.json";

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Format(format!("encoding {}: {e}", path.display())))?;
    fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
}

/// Run every batch of `stream` for one key, persisting snapshots under `run_dir`.
///
/// `run.json` is rewritten after each batch, so a failure leaves the
/// finished batches on disk.
pub fn run_sequence(cfg: &RunConfig, key: RunKey, stream: &CorpusStream, run_dir: &Path) -> Result<RunResult> {
    let snap_dir = run_dir.join(crate::selection::SNAPSHOT_DIR);
    if snap_dir.exists() {
        fs::remove_dir_all(&snap_dir).map_err(|e| Error::io(&snap_dir, e))?;
    }
    fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let config_hash = cfg.hash();
    let mut store = SnapshotStore::create(
        run_dir,
        key.strategy.capacity(),
        Provenance {
            seed: key.seed,
            config_hash: config_hash.clone(),
        },
    )?;

    let warm = warm_start(stream, cfg, key.seed)?;
    let probe = (!stream.probe.is_empty()).then_some(stream.probe.as_slice());
    let warm_result = WarmStartResult {
        dev_wer: wer_on(&warm, &stream.dev)?,
        test_wer: wer_on(&warm, &stream.test)?,
        probe_wer: probe.map(|p| wer_on(&warm, p)).transpose()?,
    };
    let mut result = RunResult {
        key,
        config_hash,
        warm_start: warm_result,
        batches: Vec::with_capacity(stream.batches.len()),
        partial: false,
    };
    let result_path = run_dir.join(RUN_RESULT_FILE);

    let mut net = warm;
    let mut reg = RegState::fresh(key.method, net.params(), key.reg_strength, cfg.training.xi)?;
    let mut started_from = 0usize;
    for b in &stream.batches {
        let i = b.roster.batch_index;
        let clock = Instant::now();
        let step = (|| -> Result<BatchResult> {
            let outcome = train_one_batch(
                &net,
                &reg,
                &b.utterances,
                &stream.dev,
                &BatchTraining {
                    epochs: cfg.training.epochs_per_batch,
                    minibatch_utterances: cfg.training.minibatch_utterances,
                    learning_rate: key.learning_rate,
                    fisher: cfg.fisher.clone(),
                    batch_index: i,
                    seed: key.seed,
                },
            )?;
            store.record_snapshot(&outcome.net, &outcome.reg_state, i, outcome.dev_wer)?;
            let chosen = store.select(key.strategy)?.clone();
            let (sel_net, sel_reg) = store.continue_from(&chosen)?;
            let ctx = format!("batch {i} evaluation");
            let test_scores = score_set(&sel_net, &stream.test).map_err(|e| e.with_context(&ctx))?;
            let test_ci = bootstrap_ci(
                &test_scores,
                cfg.eval.bootstrap_resamples,
                cfg.eval.ci_level,
                seed::derive(key.seed, "bootstrap", i as u64),
            )?;
            let probe_wer = probe.map(|p| wer_on(&sel_net, p)).transpose()?;
            let res = BatchResult {
                batch_index: i,
                dev_wer: chosen.dev_wer,
                test_wer: test_ci.point_wer,
                test_ci,
                probe_wer,
                selected_from_batch: started_from,
                reported_batch: chosen.batch_index,
                epoch_chosen: outcome.epoch_chosen,
                epoch_dev_wers: outcome.epoch_dev_wers,
                mean_train_loss: outcome.mean_train_loss,
                wall_time: clock.elapsed().as_secs_f64(),
            };
            net = sel_net;
            reg = sel_reg;
            started_from = chosen.batch_index;
            Ok(res)
        })();
        match step {
            Ok(res) => {
                log::info!(
                    "{} batch {i}: dev {:.2}% test {:.2}% (from {}, epoch {})",
                    key.dir_name(),
                    100.0 * res.dev_wer,
                    100.0 * res.test_wer,
                    res.selected_from_batch,
                    res.epoch_chosen
                );
                result.batches.push(res);
                write_json(&result_path, &result)?;
            }
            Err(e) => {
                result.partial = true;
                write_json(&result_path, &result)?;
                return Err(e.with_context(&format!("run {}", key.dir_name())));
            }
        }
    }
    Ok(result)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub key: RunKey,
    pub error: String,
    pub exit_code: i32,
}

/// Mean trajectories of one method × strategy cell across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub method: Method,
    pub strategy: Strategy,
    /// Chosen by the lowest mean final-batch dev WER when the grid has several.
    pub learning_rate: f64,
    pub reg_strength: f64,
    pub seeds: Vec<u64>,
    pub dev_wer: Vec<f64>,
    pub test_wer: Vec<f64>,
    pub test_ci_lo: Vec<f64>,
    pub test_ci_hi: Vec<f64>,
    pub probe_wer: Option<Vec<f64>>,
}

/// Relative final test WER reduction against No CL under one strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reduction {
    pub strategy: Strategy,
    pub method: Method,
    pub baseline_wer: f64,
    pub method_wer: f64,
    pub relative_reduction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub config_hash: String,
    pub runs: Vec<RunResult>,
    pub failures: Vec<RunFailure>,
    pub cells: Vec<CellSummary>,
    pub reductions: Vec<Reduction>,
}

/// Every key a grid enumerates, in a fixed order.
pub fn grid_keys(cfg: &RunConfig) -> Vec<RunKey> {
    let lrs = if cfg.grid.learning_rates.is_empty() {
        vec![cfg.training.learning_rate]
    } else {
        cfg.grid.learning_rates.clone()
    };
    let strengths = if cfg.grid.reg_strengths.is_empty() {
        vec![cfg.training.reg_strength]
    } else {
        cfg.grid.reg_strengths.clone()
    };
    let mut keys = Vec::new();
    for &method in &cfg.methods {
        let regs = if method == Method::None { vec![0.0] } else { strengths.clone() };
        for &strategy in &cfg.strategies {
            for &learning_rate in &lrs {
                for &reg_strength in &regs {
                    for &seed in &cfg.seeds {
                        keys.push(RunKey {
                            method,
                            strategy,
                            seed,
                            learning_rate,
                            reg_strength,
                        });
                    }
                }
            }
        }
    }
    keys
}

fn worker_count(cfg: &RunConfig, jobs: usize) -> usize {
    let auto = std::thread::available_parallelism().map_or(1, |n| n.get());
    let n = if cfg.jobs == 0 { auto } else { cfg.jobs };
    n.clamp(1, jobs.max(1))
}

/// Run every grid key under `out_dir/runs/`. Failed runs are recorded and the grid continues.
pub fn run_grid(cfg: &RunConfig, out_dir: &Path) -> Result<GridResult> {
    cfg.validate()?;
    let keys = grid_keys(cfg);
    let runs_dir = out_dir.join("runs");
    fs::create_dir_all(&runs_dir).map_err(|e| Error::io(&runs_dir, e))?;

    // Streams depend only on the seed; build each once and share it.
    let mut streams: BTreeMap<u64, CorpusStream> = BTreeMap::new();
    for &s in &cfg.seeds {
        if let std::collections::btree_map::Entry::Vacant(e) = streams.entry(s) {
            e.insert(resolve_stream(&cfg.stream, s)?);
        }
    }

    let next = Mutex::new(0usize);
    let outcomes: Mutex<Vec<(usize, std::result::Result<RunResult, RunFailure>)>> = Mutex::new(Vec::new());
    std::thread::scope(|scope| {
        for _ in 0..worker_count(cfg, keys.len()) {
            scope.spawn(|| loop {
                let idx = {
                    let mut n = next.lock().expect("grid counter");
                    let i = *n;
                    *n += 1;
                    i
                };
                let Some(key) = keys.get(idx).copied() else { break };
                let dir = runs_dir.join(key.dir_name());
                let outcome = run_sequence(cfg, key, &streams[&key.seed], &dir).map_err(|e| {
                    log::error!("{}: {e}", key.dir_name());
                    RunFailure {
                        key,
                        error: e.to_string(),
                        exit_code: e.exit_code(),
                    }
                });
                outcomes.lock().expect("grid results").push((idx, outcome));
            });
        }
    });
    let mut outcomes = outcomes.into_inner().expect("grid results");
    outcomes.sort_by_key(|(i, _)| *i);
    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for (_, o) in outcomes {
        match o {
            Ok(r) => runs.push(r),
            Err(f) => failures.push(f),
        }
    }
    Ok(summarize(cfg.hash(), runs, failures))
}

fn mean_columns(rows: &[Vec<f64>]) -> Vec<f64> {
    let width = rows.iter().map(Vec::len).min().unwrap_or(0);
    (0..width)
        .map(|c| rows.iter().map(|r| r[c]).sum::<f64>() / rows.len() as f64)
        .collect()
}

/// Aggregate completed runs into per-cell mean trajectories and reductions.
pub fn summarize(config_hash: String, mut runs: Vec<RunResult>, failures: Vec<RunFailure>) -> GridResult {
    runs.sort_by_key(|r| r.key.sort_key());
    // (method, strategy) -> (lr, reg) -> runs
    type Setting = (u64, u64);
    let mut by_cell: BTreeMap<(Method, Strategy), BTreeMap<Setting, Vec<&RunResult>>> = BTreeMap::new();
    for r in runs.iter().filter(|r| !r.partial && !r.batches.is_empty()) {
        by_cell
            .entry((r.key.method, r.key.strategy))
            .or_default()
            .entry((r.key.learning_rate.to_bits(), r.key.reg_strength.to_bits()))
            .or_default()
            .push(r);
    }
    let mut cells = Vec::new();
    for ((method, strategy), settings) in by_cell {
        let final_dev = |rs: &Vec<&RunResult>| {
            rs.iter().map(|r| r.batches.last().expect("nonempty").dev_wer).sum::<f64>() / rs.len() as f64
        };
        let mut best: Option<(&Setting, &Vec<&RunResult>, f64)> = None;
        for (setting, rs) in &settings {
            let d = final_dev(rs);
            if best.as_ref().is_none_or(|(_, _, bd)| d < *bd) {
                best = Some((setting, rs, d));
            }
        }
        let (setting, rs, _) = best.expect("cell has at least one setting");
        let collect = |f: &dyn Fn(&BatchResult) -> f64| -> Vec<f64> {
            mean_columns(&rs.iter().map(|r| r.batches.iter().map(f).collect()).collect::<Vec<_>>())
        };
        let probe_wer = rs
            .iter()
            .all(|r| r.batches.iter().all(|b| b.probe_wer.is_some()))
            .then(|| collect(&|b| b.probe_wer.expect("checked")));
        cells.push(CellSummary {
            method,
            strategy,
            learning_rate: f64::from_bits(setting.0),
            reg_strength: f64::from_bits(setting.1),
            seeds: rs.iter().map(|r| r.key.seed).collect(),
            dev_wer: collect(&|b| b.dev_wer),
            test_wer: collect(&|b| b.test_wer),
            test_ci_lo: collect(&|b| b.test_ci.lo),
            test_ci_hi: collect(&|b| b.test_ci.hi),
            probe_wer,
        });
    }
    let mut reductions = Vec::new();
    for base in cells.iter().filter(|c| c.method == Method::None) {
        for other in cells.iter().filter(|c| c.strategy == base.strategy && c.method != Method::None) {
            if let (Some(&b), Some(&m)) = (base.test_wer.last(), other.test_wer.last()) {
                reductions.push(Reduction {
                    strategy: base.strategy,
                    method: other.method,
                    baseline_wer: b,
                    method_wer: m,
                    relative_reduction: if b > 0.0 { (b - m) / b } else { 0.0 },
                });
            }
        }
    }
    GridResult {
        config_hash,
        runs,
        failures,
        cells,
        reductions,
    }
}

pub const TABLE_FILE: &str = "results_table.csv";
pub const RESULTS_FILE: &str = "results.json";
pub const PLOT_FILE: &str = "plot_data.csv";

/// Table with one dev row and one test row per cell, mean WER in percent per batch.
pub fn results_table(grid: &GridResult) -> String {
    let batches = grid.cells.iter().map(|c| c.test_wer.len()).max().unwrap_or(0);
    let mut out = String::from("method,strategy,set");
    for b in 1..=batches {
        out.push_str(&format!(",B{b}"));
    }
    out.push('\n');
    for c in &grid.cells {
        for (set, values) in [("dev", &c.dev_wer), ("test", &c.test_wer)] {
            out.push_str(&format!("{},{},{set}", c.method.display_name(), c.strategy.as_str()));
            for v in values {
                out.push_str(&format!(",{:.2}", 100.0 * v));
            }
            out.push('\n');
        }
    }
    out
}

/// One row per strategy × method × batch: mean test WER and mean CI bounds.
pub fn plot_data(grid: &GridResult) -> String {
    let mut out = String::from("strategy,method,batch,mean_test_wer,ci_lo,ci_hi\n");
    let mut cells: Vec<&CellSummary> = grid.cells.iter().collect();
    cells.sort_by_key(|c| (c.strategy, c.method));
    for c in cells {
        for (i, w) in c.test_wer.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{:.6},{:.6},{:.6}\n",
                c.strategy.as_str(),
                c.method.display_name(),
                i + 1,
                w,
                c.test_ci_lo[i],
                c.test_ci_hi[i]
            ));
        }
    }
    out
}

/// Write the table, JSON results and plot data into `out_dir`.
pub fn emit_reports(grid: &GridResult, out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let table = out_dir.join(TABLE_FILE);
    fs::write(&table, results_table(grid)).map_err(|e| Error::io(&table, e))?;
    let json = out_dir.join(RESULTS_FILE);
    write_json(&json, grid)?;
    let plot = out_dir.join(PLOT_FILE);
    fs::write(&plot, plot_data(grid)).map_err(|e| Error::io(&plot, e))?;
    Ok(vec![table, json, plot])
}

/// Rebuild a grid summary from the `run.json` files under `out_dir/runs`.
pub fn collect_runs(out_dir: &Path) -> Result<GridResult> {
    let runs_dir = out_dir.join("runs");
    let mut entries: Vec<PathBuf> = fs::read_dir(&runs_dir)
        .map_err(|e| Error::io(&runs_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path().join(RUN_RESULT_FILE)))
        .filter(|p| p.exists())
        .collect();
    entries.sort();
    let mut runs = Vec::new();
    let mut hashes = Vec::new();
    for p in entries {
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let r: RunResult =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", p.display())))?;
        hashes.push(r.config_hash.clone());
        runs.push(r);
    }
    if runs.is_empty() {
        return Err(Error::State(format!("no run results under {}", runs_dir.display())));
    }
    hashes.sort();
    hashes.dedup();
    let hash = if hashes.len() == 1 { hashes.remove(0) } else { "mixed".into() };
    Ok(summarize(hash, runs, Vec::new()))
}
