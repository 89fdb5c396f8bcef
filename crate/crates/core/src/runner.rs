//! The `train`, `eval`, `synth` and `export-pool` commands.
//!
//! A training run writes into its output directory:
//!
//! - `config.toml`: the resolved configuration,
//! - `metrics.csv`: one row per evaluation, appended as training goes,
//! - `checkpoint.bin`: the latest state, rewritten at every evaluation,
//! - `pool.csv`: the final factor pool.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::centering::AverageTracker;
use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::config::{ConfigLoadError, RunConfig};
use crate::data::{
    forward_returns, load_panel, synth_panel, Panel, Splits, SynthSpec, TargetMatrix,
};
use crate::env::{FactorEnv, PoolReward, RewardSource};
use crate::error::{DataError, PolicyError, RunError, TrainError};
use crate::eval::Evaluator;
use crate::expr::{parse_rpn, tokenize, Grammar};
use crate::metrics::{mean_ic, mean_rank_ic};
use crate::par::Exec;
use crate::policy::PolicyModel;
use crate::pool::{write_pool, FactorPool, FitConfig, PoolRecord};
use crate::shaping::{DemoIndex, DemoVectors, Shaper, ShapingKind};
use crate::train::Trainer;
use crate::vocab::Vocabulary;

pub const METRICS_HEADER: &str = "step,train_ic,valid_ic,valid_rank_ic,mean_episode_length,r_bar";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const POOL_FILE: &str = "pool.csv";
pub const CONFIG_FILE: &str = "config.toml";
pub const EVAL_FILE: &str = "eval.json";

impl From<ConfigLoadError> for RunError {
    fn from(e: ConfigLoadError) -> Self {
        match e {
            ConfigLoadError::Io(m) => RunError::Io(m),
            ConfigLoadError::Invalid(m) => RunError::Config(m),
        }
    }
}

/// Everything a run needs besides learner state: the token set, the panel,
/// its targets and the day splits.
pub struct Workspace {
    pub vocab: Arc<Vocabulary>,
    pub grammar: Arc<Grammar>,
    pub panel: Arc<Panel>,
    /// Targets with every value whose horizon crosses the end of its own
    /// split set to NaN.
    pub targets: Arc<TargetMatrix>,
    pub splits: Splits,
    pub exec: Exec,
}

impl Workspace {
    pub fn prepare(cfg: &RunConfig, seed: u64) -> Result<Workspace, RunError> {
        let vocab = Arc::new(load_vocab(cfg)?);
        let (panel, targets) = load_data(cfg, seed, &vocab)?;
        for name in vocab.feature_names() {
            if panel.feature(name).is_none() {
                return Err(RunError::Config(format!("panel has no `{name}` column")));
            }
        }
        let splits = match &cfg.data.split {
            Some(s) => Splits::new(
                panel.day_range(s.train[0], s.train[1]),
                panel.day_range(s.valid[0], s.valid[1]),
                panel.day_range(s.test[0], s.test[1]),
            )?,
            None => Splits::by_fraction(panel.n_days(), cfg.data.warmup, 0.6, 0.2)?,
        };
        let targets = mask_split_tails(targets, &splits);
        Ok(Workspace {
            grammar: Arc::new(Grammar::new(vocab.clone(), cfg.vocab.max_len)),
            vocab,
            panel: Arc::new(panel),
            targets: Arc::new(targets),
            splits,
            exec: if cfg.train.parallel {
                Exec::Parallel
            } else {
                Exec::Sequential
            },
        })
    }

    pub fn evaluator(&self, cfg: &RunConfig) -> Evaluator {
        Evaluator::default()
            .with_exec(self.exec)
            .with_nan_tolerance(cfg.pool.nan_tolerance)
    }

    pub fn empty_pool(&self, cfg: &RunConfig) -> FactorPool {
        FactorPool::new(
            cfg.pool.capacity,
            fit_config(cfg),
            self.splits.train.clone(),
            self.evaluator(cfg),
        )
    }

    pub fn restore_pool(
        &self,
        cfg: &RunConfig,
        records: &[PoolRecord],
    ) -> Result<FactorPool, RunError> {
        FactorPool::restore(
            records,
            cfg.pool.capacity,
            fit_config(cfg),
            self.splits.train.clone(),
            self.evaluator(cfg),
            &self.vocab,
            &self.panel,
            &self.targets,
        )
        .map_err(|e| RunError::Config(format!("cannot rebuild pool on this data: {e}")))
    }

    /// Mean daily IC and Rank IC of the pool's combination over `days`, or
    /// `None` when the pool is empty or no day has a defined IC.
    pub fn split_ic(&self, pool: &FactorPool, days: Range<usize>) -> Option<(f64, f64)> {
        let z = pool
            .combination_on(&self.vocab, &self.panel, days.clone())
            .ok()?;
        let ic = mean_ic(&z, &self.targets, days.clone()).ok()?;
        let rank = mean_rank_ic(&z, &self.targets, days).ok()?;
        Some((ic.mean, rank.mean))
    }
}

fn fit_config(cfg: &RunConfig) -> FitConfig {
    FitConfig {
        lr: cfg.pool.lr,
        steps: cfg.pool.steps,
    }
}

fn read_text(path: &Path) -> Result<String, RunError> {
    fs::read_to_string(path).map_err(|e| RunError::Io(format!("{}: {e}", path.display())))
}

fn load_vocab(cfg: &RunConfig) -> Result<Vocabulary, RunError> {
    match &cfg.vocab.table {
        Some(p) => {
            Vocabulary::from_table(&read_text(p)?).map_err(|e| RunError::Config(e.to_string()))
        }
        None => Ok(Vocabulary::default()),
    }
}

fn load_data(
    cfg: &RunConfig,
    seed: u64,
    vocab: &Vocabulary,
) -> Result<(Panel, TargetMatrix), RunError> {
    let Some(path) = &cfg.data.path else {
        return synthesize(cfg, seed, vocab);
    };
    let panel = load_panel(path, cfg.data.missing).map_err(|e| match e {
        DataError::Io(io) => RunError::Io(format!("{}: {io}", path.display())),
        other => other.into(),
    })?;
    let targets = match &cfg.data.targets_path {
        Some(tp) => {
            let file =
                File::open(tp).map_err(|e| RunError::Io(format!("{}: {e}", tp.display())))?;
            TargetMatrix::read_csv(&panel, file)?
        }
        None => forward_returns(&panel, cfg.data.horizon)?,
    };
    Ok((panel, targets))
}

fn synthesize(
    cfg: &RunConfig,
    seed: u64,
    vocab: &Vocabulary,
) -> Result<(Panel, TargetMatrix), RunError> {
    let s = &cfg.data.synth;
    let planted = match &s.planted {
        Some(text) => Some(
            tokenize(text, vocab)
                .and_then(|seq| parse_rpn(&seq, vocab))
                .map_err(|e| RunError::Config(format!("data.synth.planted: {e}")))?,
        ),
        None => None,
    };
    let spec = SynthSpec {
        seed: s.seed.unwrap_or(seed),
        n_assets: s.n_assets,
        n_days: s.n_days,
        planted,
        noise_std: s.noise_std,
    };
    Ok(synth_panel(&spec, vocab)?)
}

/// Hides forward-looking targets that would reach into the next split.
pub fn mask_split_tails(mut targets: TargetMatrix, splits: &Splits) -> TargetMatrix {
    let Some(h) = targets.horizon else {
        return targets;
    };
    for r in [&splits.train, &splits.valid, &splits.test] {
        for d in r.start.max(r.end.saturating_sub(h))..r.end {
            targets.values.row_mut(d).fill(f64::NAN);
        }
    }
    targets
}

pub fn build_shaper(cfg: &RunConfig, vocab: &Vocabulary) -> Result<Shaper, RunError> {
    if cfg.shaping.kind == ShapingKind::None {
        return Ok(Shaper::None);
    }
    let path = cfg
        .shaping
        .demos_path
        .as_ref()
        .ok_or_else(|| RunError::Config("shaping.demos_path is required".into()))?;
    let index = DemoIndex::from_text(&read_text(path)?, vocab)
        .map_err(|e| RunError::Config(format!("{}: {e}", path.display())))?;
    let vectors = || {
        DemoVectors::new(
            index.demos(),
            vocab.len(),
            cfg.vocab.max_len,
            cfg.shaping.encoding,
        )
        .map(Arc::new)
        .map_err(|e| RunError::Config(e.to_string()))
    };
    Ok(match cfg.shaping.kind {
        ShapingKind::None => Shaper::None,
        ShapingKind::Tlrs => Shaper::Tlrs(Arc::new(index)),
        ShapingKind::Pbrs => Shaper::Pbrs {
            vectors: vectors()?,
            gamma: cfg.ppo.gamma,
        },
        ShapingKind::Dpba => Shaper::Dpba {
            vectors: vectors()?,
            gamma: cfg.ppo.gamma,
        },
    })
}

/// One line of `metrics.csv`. Undefined ICs (empty pool) are left blank.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub train_ic: Option<f64>,
    pub valid_ic: Option<f64>,
    pub valid_rank_ic: Option<f64>,
    pub mean_episode_length: f64,
    pub r_bar: f64,
}

impl MetricsRow {
    pub fn to_csv_line(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        format!(
            "{},{},{},{},{:.4},{:.6}",
            self.step,
            opt(self.train_ic),
            opt(self.valid_ic),
            opt(self.valid_rank_ic),
            self.mean_episode_length,
            self.r_bar
        )
    }

    pub fn parse_csv_line(line: &str) -> Option<MetricsRow> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 6 {
            return None;
        }
        let opt = |s: &str| -> Option<Option<f64>> {
            if s.is_empty() {
                Some(None)
            } else {
                s.parse().ok().map(Some)
            }
        };
        Some(MetricsRow {
            step: f[0].parse().ok()?,
            train_ic: opt(f[1])?,
            valid_ic: opt(f[2])?,
            valid_rank_ic: opt(f[3])?,
            mean_episode_length: f[4].parse().ok()?,
            r_bar: f[5].parse().ok()?,
        })
    }
}

/// Reads every data row of a metrics file.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>, RunError> {
    let text = read_text(path)?;
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            MetricsRow::parse_csv_line(l)
                .ok_or_else(|| RunError::Io(format!("bad metrics line `{l}`")))
        })
        .collect()
}

struct MetricsLog {
    file: File,
}

impl MetricsLog {
    fn open(path: &Path) -> Result<MetricsLog, RunError> {
        let mut file = OpenOptions::new().create(true).append(true).open(path)?;
        if file.metadata()?.len() == 0 {
            writeln!(file, "{METRICS_HEADER}")?;
        }
        Ok(MetricsLog { file })
    }

    fn append(&mut self, row: &MetricsRow) -> Result<(), RunError> {
        writeln!(self.file, "{}", row.to_csv_line())?;
        self.file.flush()?;
        Ok(())
    }
}

/// Outcome of one training run.
#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub env_steps: u64,
    pub last_row: Option<MetricsRow>,
    pub pool: Vec<PoolRecord>,
}

/// Runs `train` for the configured seeds. A `seed` argument replaces the
/// seed list; `resume` continues from a checkpoint in `out`.
pub fn cmd_train(
    cfg: &RunConfig,
    out: &Path,
    seed: Option<u64>,
    resume: Option<&Path>,
) -> Result<Vec<TrainSummary>, RunError> {
    if let Some(path) = resume {
        let ck = Checkpoint::load(path)?;
        if seed.is_some_and(|s| s != ck.meta.seed) {
            return Err(RunError::Config(format!(
                "--seed {} conflicts with the checkpoint's seed {}",
                seed.unwrap_or_default(),
                ck.meta.seed
            )));
        }
        let run_seed = ck.meta.seed;
        return Ok(vec![train_run(cfg, run_seed, out, Some(ck), &mut |_| {
            true
        })?]);
    }
    match seed {
        Some(s) => Ok(vec![train_run(cfg, s, out, None, &mut |_| true)?]),
        None if cfg.train.seeds.is_empty() => {
            Ok(vec![train_run(cfg, cfg.seed, out, None, &mut |_| true)?])
        }
        None => cfg
            .train
            .seeds
            .iter()
            .map(|&s| train_run(cfg, s, &out.join(format!("seed-{s}")), None, &mut |_| true))
            .collect(),
    }
}

/// One training run. `on_eval` sees every metrics row and may stop the run
/// early by returning false.
pub fn train_run(
    cfg: &RunConfig,
    seed: u64,
    out: &Path,
    resume: Option<Checkpoint>,
    on_eval: &mut dyn FnMut(&MetricsRow) -> bool,
) -> Result<TrainSummary, RunError> {
    cfg.validate().map_err(RunError::Config)?;
    fs::create_dir_all(out)?;
    let mut echo = cfg.clone();
    echo.seed = seed;
    echo.train.seeds.clear();
    fs::write(out.join(CONFIG_FILE), echo.to_toml())?;

    let ws = Workspace::prepare(cfg, seed)?;
    let shaper = build_shaper(cfg, &ws.vocab)?;
    let mut trainer = match resume {
        Some(ck) => resume_trainer(cfg, &ws, shaper, ck)?,
        None => fresh_trainer(cfg, &ws, shaper, seed, |r| r),
    };

    let mut metrics = MetricsLog::open(&out.join(METRICS_FILE))?;
    let interval = cfg.train.eval_interval;
    let mut next_eval = (trainer.env_steps / interval + 1) * interval;
    let (mut episodes, mut steps) = (0usize, 0u64);
    let mut last_row = None;
    let started = Instant::now();
    log::info!(
        "seed {seed}: training to {} steps from step {}, {} shaping",
        cfg.train.total_steps,
        trainer.env_steps,
        format!("{:?}", cfg.shaping.kind).to_lowercase()
    );
    while trainer.env_steps < cfg.train.total_steps {
        let before = trainer.env_steps;
        let it = match trainer.iterate() {
            Ok(it) => it,
            Err(e) => {
                if matches!(e, TrainError::Policy(PolicyError::NonFiniteGradient)) {
                    save_checkpoint(cfg, seed, &trainer, &ws, out)?;
                }
                return Err(e.into());
            }
        };
        episodes += it.episodes;
        steps += trainer.env_steps - before;
        log::debug!(
            "step {} len {:.2} reward {:.4} entropy {:.3} kl {:.4} pool {} ({:.1?})",
            it.env_steps,
            it.mean_length,
            it.mean_terminal_reward,
            it.update.entropy,
            it.update.approx_kl,
            trainer.env.reward_source().pool.len(),
            started.elapsed()
        );
        if trainer.env_steps >= next_eval || trainer.env_steps >= cfg.train.total_steps {
            let pool = &trainer.env.reward_source().pool;
            let valid = ws.split_ic(pool, ws.splits.valid.clone());
            let row = MetricsRow {
                step: trainer.env_steps,
                train_ic: (!pool.is_empty()).then(|| pool.ic()),
                valid_ic: valid.map(|v| v.0),
                valid_rank_ic: valid.map(|v| v.1),
                mean_episode_length: steps as f64 / episodes.max(1) as f64,
                r_bar: trainer.tracker.mean,
            };
            metrics.append(&row)?;
            save_checkpoint(cfg, seed, &trainer, &ws, out)?;
            log::info!(
                "step {} train IC {} valid IC {} ({:.1?})",
                row.step,
                row.train_ic.map_or("-".into(), |v| format!("{v:.4}")),
                row.valid_ic.map_or("-".into(), |v| format!("{v:.4}")),
                started.elapsed()
            );
            episodes = 0;
            steps = 0;
            while next_eval <= trainer.env_steps {
                next_eval += interval;
            }
            last_row = Some(row);
            if !on_eval(&row) {
                break;
            }
        }
    }
    let records = trainer.env.reward_source().pool.records(&ws.vocab);
    write_pool(&records, BufWriter::new(File::create(out.join(POOL_FILE))?))?;
    Ok(TrainSummary {
        seed,
        out_dir: out.to_path_buf(),
        env_steps: trainer.env_steps,
        last_row,
        pool: records,
    })
}

/// A new trainer for `seed` whose pool reward is passed through `wrap`,
/// so callers can observe every scored formula.
pub fn fresh_trainer<R: RewardSource>(
    cfg: &RunConfig,
    ws: &Workspace,
    shaper: Shaper,
    seed: u64,
    wrap: impl FnOnce(PoolReward) -> R,
) -> Trainer<R> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = PolicyModel::new(cfg.policy.clone(), ws.vocab.len(), &mut rng);
    let reward = PoolReward {
        vocab: ws.vocab.clone(),
        panel: ws.panel.clone(),
        target: ws.targets.clone(),
        pool: ws.empty_pool(cfg),
    };
    Trainer::new(
        model,
        FactorEnv::new(ws.grammar.clone(), wrap(reward)),
        shaper,
        AverageTracker::new(cfg.centering.beta),
        cfg.centering.enabled,
        cfg.ppo.clone(),
        rng,
        ws.exec,
    )
}

fn resume_trainer(
    cfg: &RunConfig,
    ws: &Workspace,
    shaper: Shaper,
    ck: Checkpoint,
) -> Result<Trainer<PoolReward>, RunError> {
    let n_actions = ws.vocab.len();
    if ck.meta.n_actions != n_actions {
        return Err(RunError::Config(format!(
            "checkpoint has {} actions, the token set has {n_actions}",
            ck.meta.n_actions
        )));
    }
    let adam = ck.adam();
    let model = PolicyModel::from_params(cfg.policy.clone(), n_actions, ck.params)
        .map_err(|e| RunError::Config(format!("checkpoint does not fit the policy config: {e}")))?;
    let reward = PoolReward {
        vocab: ws.vocab.clone(),
        panel: ws.panel.clone(),
        target: ws.targets.clone(),
        pool: ws.restore_pool(cfg, &ck.meta.pool)?,
    };
    let mut trainer = Trainer::new(
        model,
        FactorEnv::new(ws.grammar.clone(), reward),
        shaper,
        ck.meta.tracker,
        cfg.centering.enabled,
        cfg.ppo.clone(),
        ck.meta.rng,
        ws.exec,
    );
    trainer.adam = adam;
    trainer.env_steps = ck.meta.env_steps;
    Ok(trainer)
}

fn save_checkpoint(
    cfg: &RunConfig,
    seed: u64,
    trainer: &Trainer<PoolReward>,
    ws: &Workspace,
    out: &Path,
) -> Result<(), RunError> {
    let ck = Checkpoint {
        meta: CheckpointMeta {
            config: cfg.clone(),
            seed,
            n_actions: trainer.model.n_actions(),
            env_steps: trainer.env_steps,
            tracker: trainer.tracker,
            adam: Checkpoint::adam_scalars(&trainer.adam),
            rng: trainer.rng.clone(),
            pool: trainer.env.reward_source().pool.records(&ws.vocab),
        },
        params: trainer.model.params.clone(),
        adam_m: trainer.adam.m.clone(),
        adam_v: trainer.adam.v.clone(),
    };
    ck.save(&out.join(CHECKPOINT_FILE))?;
    Ok(())
}

/// Test-split report of a checkpoint's pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub env_steps: u64,
    pub pool_size: usize,
    /// First and one-past-last test day.
    pub test_days: [usize; 2],
    pub test_ic: Option<f64>,
    pub test_rank_ic: Option<f64>,
    /// `ok`, `empty-pool` or `no-valid-days`.
    pub status: String,
}

/// Scores a checkpoint's pool on the test split. `cfg` replaces the config
/// stored in the checkpoint, e.g. to point at a different data file.
pub fn cmd_eval(
    checkpoint: &Path,
    cfg: Option<&RunConfig>,
    out: Option<&Path>,
) -> Result<EvalReport, RunError> {
    let ck = Checkpoint::load(checkpoint)?;
    let cfg = cfg.cloned().unwrap_or_else(|| ck.meta.config.clone());
    let ws = Workspace::prepare(&cfg, ck.meta.seed)?;
    let pool = ws.restore_pool(&cfg, &ck.meta.pool)?;
    let test = ws.splits.test.clone();
    let ics = ws.split_ic(&pool, test.clone());
    let status = match (pool.is_empty(), ics) {
        (true, _) => "empty-pool",
        (false, None) => "no-valid-days",
        (false, Some(_)) => "ok",
    };
    let report = EvalReport {
        env_steps: ck.meta.env_steps,
        pool_size: pool.len(),
        test_days: [test.start, test.end],
        test_ic: ics.map(|v| v.0),
        test_rank_ic: ics.map(|v| v.1),
        status: status.into(),
    };
    let dir = match out {
        Some(d) => d.to_path_buf(),
        None => checkpoint.parent().unwrap_or(Path::new(".")).to_path_buf(),
    };
    fs::create_dir_all(&dir)?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| RunError::Io(e.to_string()))?;
    fs::write(dir.join(EVAL_FILE), json + "\n")?;
    Ok(report)
}

/// Writes a synthetic `panel.csv` and its `targets.csv` into `out`.
pub fn cmd_synth(cfg: &RunConfig, seed: u64, out: &Path) -> Result<(PathBuf, PathBuf), RunError> {
    let vocab = load_vocab(cfg)?;
    let (panel, targets) = synthesize(cfg, seed, &vocab)?;
    fs::create_dir_all(out)?;
    let panel_path = out.join("panel.csv");
    let target_path = out.join("targets.csv");
    panel.write_csv(BufWriter::new(File::create(&panel_path)?))?;
    targets.write_csv(&panel, BufWriter::new(File::create(&target_path)?))?;
    Ok((panel_path, target_path))
}

/// Writes a checkpoint's pool as CSV to `out`, or to `writer` when `out` is
/// `None`.
pub fn cmd_export_pool<W: Write>(
    checkpoint: &Path,
    out: Option<&Path>,
    writer: W,
) -> Result<usize, RunError> {
    let ck = Checkpoint::load(checkpoint)?;
    let records = &ck.meta.pool;
    match out {
        Some(path) => {
            let path = if path.is_dir() {
                path.join(POOL_FILE)
            } else {
                path.to_path_buf()
            };
            write_pool(records, BufWriter::new(File::create(path)?))?;
        }
        None => write_pool(records, writer)?,
    }
    Ok(records.len())
}
