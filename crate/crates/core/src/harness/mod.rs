//! Run configuration, training loops, evaluation and run artifacts.
//!
//! A run is fully determined by its [`RunConfig`]: episode seeds come from
//! a ChaCha stream keyed by `seed`, evaluation uses a fixed disjoint seed
//! range, and everything executes on one thread.

mod bench;
mod gradsuite;

pub use bench::{bench_reads, BenchConfig, BenchReport};
pub use gradsuite::{gradcheck_suite, OpCheck, CASES as GRADCHECK_CASES, TOLERANCE as GRADCHECK_TOLERANCE};

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::ama::{AmaError, EpsilonSchedule, QSample, QSelector, TaskDescriptor, TaskEmbeddings};
use crate::embed::{EmbedError, EmbeddingConfig, ObservationSymbol, SpatialMode};
use crate::envs::{generate, EnvConfig, EnvError, Episode, TaskKind};
use crate::memory::{EpisodicMemory, EvictionStrategy, Layout, MemoryConfig, MemoryError, VisitMetric};
use crate::model::{AttentionTrace, ModelError, ReadMode, SatConfig, SatModel, Vocab};
use crate::tensor::{
    clip_gradients, load_checkpoint, save_checkpoint, AdamConfig, AdamState, CheckpointError, Graph, ParamStore,
    Scalar, TensorError,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Ama(#[from] AmaError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Held-out evaluation seeds start here; training seeds stay below.
pub const EVAL_SEED_BASE: u64 = 1 << 40;

/// Capacity-like settings that may depend on the task.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Limit {
    None,
    /// Task default: half the episode for strategy tasks, eight rooms for ABA.
    Auto,
    Fixed(usize),
}

impl Limit {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "none" => Some(Limit::None),
            "auto" => Some(Limit::Auto),
            _ => s.parse().ok().map(Limit::Fixed),
        }
    }

    fn text(self) -> String {
        match self {
            Limit::None => "none".into(),
            Limit::Auto => "auto".into(),
            Limit::Fixed(n) => n.to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemorySettings {
    pub layout: Layout,
    pub capacity: Limit,
    pub place_cap: Limit,
    pub strategy: EvictionStrategy,
    pub visit_metric: VisitMetric,
}

impl Default for MemorySettings {
    fn default() -> Self {
        Self {
            layout: Layout::Flat,
            capacity: Limit::Auto,
            place_cap: Limit::Auto,
            strategy: EvictionStrategy::Fifo,
            visit_metric: VisitMetric::Entries,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AmaSettings {
    pub enabled: bool,
    pub schedule: EpsilonSchedule,
    pub lr: f64,
    /// Task-embedding file; empty selects one-hot task descriptors.
    pub embeddings: Option<PathBuf>,
    /// Held-out descriptions per task when training from embeddings.
    pub heldout: usize,
    pub split_seed: u64,
}

impl Default for AmaSettings {
    fn default() -> Self {
        Self {
            enabled: false,
            schedule: EpsilonSchedule::default(),
            lr: 2e-4,
            embeddings: None,
            heldout: 4,
            split_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub tasks: Vec<TaskKind>,
    pub seed: u64,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub clip: f64,
    /// Evaluate every this many steps (0: only at the end).
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub log_every: usize,
    pub model: SatConfig,
    /// `None` picks the read per strategy: place-centric for MVFO/LVFO,
    /// time-centric for FIFO/LIFO.
    pub read_mode: Option<ReadMode>,
    pub spatial: SpatialMode,
    pub embed_base: f64,
    pub query_context: bool,
    pub env: EnvConfig,
    pub memory: MemorySettings,
    pub ama: AmaSettings,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            tasks: vec![TaskKind::NextBallet],
            seed: 0,
            steps: 1000,
            batch: 32,
            lr: 2e-4,
            clip: 5.0,
            eval_every: 0,
            eval_episodes: 512,
            log_every: 50,
            model: SatConfig {
                num_layers: 2,
                dim: 32,
                heads: 2,
                head_dim: 16,
                mlp_hidden: 64,
                chunk_size: 8,
                top_k: 4,
                read_mode: ReadMode::Flat,
                num_classes: 8,
                tie_relevance: false,
            },
            read_mode: Some(ReadMode::Flat),
            spatial: SpatialMode::Sinusoidal1d,
            embed_base: 10_000.0,
            query_context: false,
            env: EnvConfig::default(),
            memory: MemorySettings::default(),
            ama: AmaSettings::default(),
            out: None,
        }
    }
}

fn parse_bool(s: &str) -> Option<bool> {
    match s {
        "true" | "1" | "yes" => Some(true),
        "false" | "0" | "no" => Some(false),
        _ => None,
    }
}

impl RunConfig {
    /// Applies `key = value` lines on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| HarnessError::Config(format!("line {}: expected key = value", i + 1)))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| HarnessError::Config(format!("line {}: {e}", i + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path).map_err(io_err(path))?)
    }

    /// Sets one dotted key; unknown keys and malformed values are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn num<T: std::str::FromStr>(v: &str) -> Result<T, String> {
            v.parse().map_err(|_| format!("cannot parse `{v}`"))
        }
        let bad = |what: &str| format!("invalid {what} `{value}`");
        match key {
            "task" | "tasks" => {
                self.tasks = value
                    .split(',')
                    .map(|t| t.trim().parse::<TaskKind>().map_err(|e| e.to_string()))
                    .collect::<Result<_, _>>()?
            }
            "seed" => self.seed = num(value)?,
            "steps" => self.steps = num(value)?,
            "batch" => self.batch = num(value)?,
            "lr" => self.lr = num(value)?,
            "clip" => self.clip = num(value)?,
            "eval_every" => self.eval_every = num(value)?,
            "eval_episodes" => self.eval_episodes = num(value)?,
            "log_every" => self.log_every = num(value)?,
            "out" => self.out = (!value.is_empty()).then(|| PathBuf::from(value)),
            "model.layers" => self.model.num_layers = num(value)?,
            "model.dim" => self.model.dim = num(value)?,
            "model.heads" => self.model.heads = num(value)?,
            "model.head_dim" => self.model.head_dim = num(value)?,
            "model.mlp_hidden" => self.model.mlp_hidden = num(value)?,
            "model.chunk_size" => self.model.chunk_size = num(value)?,
            "model.top_k" => self.model.top_k = num(value)?,
            "model.read_mode" => {
                self.read_mode = if value == "auto" {
                    None
                } else {
                    Some(ReadMode::parse(value).ok_or_else(|| bad("read mode"))?)
                }
            }
            "model.tie_relevance" => self.model.tie_relevance = parse_bool(value).ok_or_else(|| bad("bool"))?,
            "embed.spatial" => self.spatial = SpatialMode::parse(value).ok_or_else(|| bad("spatial mode"))?,
            "embed.base" => self.embed_base = num(value)?,
            "embed.query_context" => self.query_context = parse_bool(value).ok_or_else(|| bad("bool"))?,
            "env.width" => self.env.width = num(value)?,
            "env.height" => self.env.height = num(value)?,
            "env.dancers" => self.env.n_dancers = num(value)?,
            "env.dances" => self.env.n_dances = num(value)?,
            "env.dance_len" => self.env.dance_len = num(value)?,
            "env.visits" => self.env.visits = num(value)?,
            "env.short_stay_steps" => self.env.short_stay_steps = num(value)?,
            "env.stays" => self.env.stays = num(value)?,
            "env.aba_stays" => self.env.aba_stays = num(value)?,
            "env.opposite_max_visits" => self.env.opposite_max_visits = num(value)?,
            "memory.layout" => {
                self.memory.layout = match value {
                    "flat" => Layout::Flat,
                    "place" => Layout::Place,
                    _ => return Err(bad("layout")),
                }
            }
            "memory.capacity" => self.memory.capacity = Limit::parse(value).ok_or_else(|| bad("capacity"))?,
            "memory.place_cap" => self.memory.place_cap = Limit::parse(value).ok_or_else(|| bad("place cap"))?,
            "memory.strategy" => self.memory.strategy = EvictionStrategy::parse(value).ok_or_else(|| bad("strategy"))?,
            "memory.visit_metric" => {
                self.memory.visit_metric = match value {
                    "entries" => VisitMetric::Entries,
                    "occupancy" => VisitMetric::Occupancy,
                    _ => return Err(bad("visit metric")),
                }
            }
            "ama.enabled" => self.ama.enabled = parse_bool(value).ok_or_else(|| bad("bool"))?,
            "ama.eps_start" => self.ama.schedule.start = num(value)?,
            "ama.eps_end" => self.ama.schedule.end = num(value)?,
            "ama.eps_horizon" => self.ama.schedule.horizon = num(value)?,
            "ama.lr" => self.ama.lr = num(value)?,
            "ama.embeddings" => self.ama.embeddings = (!value.is_empty()).then(|| PathBuf::from(value)),
            "ama.heldout" => self.ama.heldout = num(value)?,
            "ama.split_seed" => self.ama.split_seed = num(value)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let tasks: Vec<&str> = self.tasks.iter().map(|t| t.name()).collect();
        let m = &self.model;
        let e = &self.env;
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("task", tasks.join(","));
        kv("seed", self.seed.to_string());
        kv("steps", self.steps.to_string());
        kv("batch", self.batch.to_string());
        kv("lr", self.lr.to_string());
        kv("clip", self.clip.to_string());
        kv("eval_every", self.eval_every.to_string());
        kv("eval_episodes", self.eval_episodes.to_string());
        kv("log_every", self.log_every.to_string());
        kv("out", path(&self.out));
        kv("model.layers", m.num_layers.to_string());
        kv("model.dim", m.dim.to_string());
        kv("model.heads", m.heads.to_string());
        kv("model.head_dim", m.head_dim.to_string());
        kv("model.mlp_hidden", m.mlp_hidden.to_string());
        kv("model.chunk_size", m.chunk_size.to_string());
        kv("model.top_k", m.top_k.to_string());
        kv("model.read_mode", self.read_mode.map_or("auto", ReadMode::name).to_string());
        kv("model.tie_relevance", m.tie_relevance.to_string());
        kv("embed.spatial", self.spatial.name().to_string());
        kv("embed.base", self.embed_base.to_string());
        kv("embed.query_context", self.query_context.to_string());
        kv("env.width", e.width.to_string());
        kv("env.height", e.height.to_string());
        kv("env.dancers", e.n_dancers.to_string());
        kv("env.dances", e.n_dances.to_string());
        kv("env.dance_len", e.dance_len.to_string());
        kv("env.visits", e.visits.to_string());
        kv("env.short_stay_steps", e.short_stay_steps.to_string());
        kv("env.stays", e.stays.to_string());
        kv("env.aba_stays", e.aba_stays.to_string());
        kv("env.opposite_max_visits", e.opposite_max_visits.to_string());
        let layout = match self.memory.layout {
            Layout::Flat => "flat",
            Layout::Place => "place",
        };
        kv("memory.layout", layout.to_string());
        kv("memory.capacity", self.memory.capacity.text());
        kv("memory.place_cap", self.memory.place_cap.text());
        kv("memory.strategy", self.memory.strategy.name().to_string());
        let metric = match self.memory.visit_metric {
            VisitMetric::Entries => "entries",
            VisitMetric::Occupancy => "occupancy",
        };
        kv("memory.visit_metric", metric.to_string());
        kv("ama.enabled", self.ama.enabled.to_string());
        kv("ama.eps_start", self.ama.schedule.start.to_string());
        kv("ama.eps_end", self.ama.schedule.end.to_string());
        kv("ama.eps_horizon", self.ama.schedule.horizon.to_string());
        kv("ama.lr", self.ama.lr.to_string());
        kv("ama.embeddings", path(&self.ama.embeddings));
        kv("ama.heldout", self.ama.heldout.to_string());
        kv("ama.split_seed", self.ama.split_seed.to_string());
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.tasks.is_empty() {
            return bad("at least one task is required".into());
        }
        if self.batch == 0 {
            return bad("batch must be positive".into());
        }
        if !(self.lr > 0.0) || !(self.clip > 0.0) {
            return bad("lr and clip must be positive".into());
        }
        if self.ama.enabled && self.tasks.iter().any(|t| t.matched_strategy().is_none()) {
            return bad("AMA runs need strategy tasks".into());
        }
        for &t in &self.tasks {
            self.env.validate(t)?;
        }
        self.sat_config().validate()?;
        self.embedding_config().validate()?;
        Ok(())
    }

    pub fn sat_config(&self) -> SatConfig {
        SatConfig {
            num_classes: self.env.n_dances,
            read_mode: self.read_mode.unwrap_or(ReadMode::PlaceHier),
            ..self.model.clone()
        }
    }

    pub fn embedding_config(&self) -> EmbeddingConfig {
        EmbeddingConfig {
            dim: self.model.dim,
            spatial: self.spatial,
            x_range: self.env.width,
            y_range: self.env.height,
            base: self.embed_base,
            query_context: self.query_context,
        }
    }

    pub fn vocab(&self) -> Vocab {
        Vocab {
            dancers: self.env.n_dancers,
            dances: self.env.n_dances,
            dance_len: self.env.dance_len,
        }
    }

    /// Memory configuration for episodes of `task`.
    pub fn memory_config(&self, task: TaskKind) -> MemoryConfig {
        let auto_capacity = match task {
            TaskKind::BalletFifo | TaskKind::BalletLifo | TaskKind::BalletMvfo | TaskKind::BalletLvfo => {
                Some(self.env.strategy_capacity())
            }
            TaskKind::BalletAba => Some(self.env.aba_capacity()),
            _ => None,
        };
        let capacity = match self.memory.capacity {
            Limit::None => None,
            Limit::Auto => auto_capacity,
            Limit::Fixed(n) => Some(n),
        };
        let place_cap = match self.memory.place_cap {
            Limit::None => None,
            Limit::Auto => (task == TaskKind::BalletAba && self.memory.layout == Layout::Place).then_some(self.env.dance_len),
            Limit::Fixed(n) => Some(n),
        };
        MemoryConfig {
            layout: self.memory.layout,
            capacity,
            place_cap,
            chunk_size: self.model.chunk_size,
            visit_metric: self.memory.visit_metric,
        }
    }

    /// Read path used with `strategy`.
    pub fn read_mode_for(&self, strategy: EvictionStrategy) -> ReadMode {
        self.read_mode.unwrap_or(match strategy {
            EvictionStrategy::Mvfo | EvictionStrategy::Lvfo => ReadMode::PlaceHier,
            EvictionStrategy::Fifo | EvictionStrategy::Lifo => ReadMode::TimeHier,
        })
    }
}

/// One line of `metrics.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub task: TaskKind,
    pub strategy: EvictionStrategy,
    pub train_loss: Option<f64>,
    pub eval_accuracy: Option<f64>,
    pub epsilon: Option<f64>,
}

pub const METRICS_HEADER: &str = "step,task,strategy,train_loss,eval_accuracy,epsilon";

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.step,
            r.task,
            r.strategy,
            opt(r.train_loss),
            opt(r.eval_accuracy),
            opt(r.epsilon)
        );
    }
    out
}

/// Builds the model and its freshly initialised parameters.
pub fn build_model<T: Scalar>(cfg: &RunConfig) -> Result<(SatModel<T>, ParamStore<T>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new();
    let model = SatModel::new(&mut store, cfg.sat_config(), cfg.embedding_config(), cfg.vocab(), &mut rng)?;
    Ok((model, store))
}

/// Episode plus the memory it leaves under `strategy`.
pub fn episode_memory(cfg: &RunConfig, ep: &Episode, strategy: EvictionStrategy) -> Result<EpisodicMemory> {
    Ok(ep.replay(cfg.memory_config(ep.kind), strategy)?)
}

fn logits_for<T: Scalar>(
    model: &SatModel<T>,
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    ep: &Episode,
    mem: &EpisodicMemory,
    mode: ReadMode,
    trace: Option<&mut AttentionTrace>,
) -> Result<crate::tensor::Var> {
    let query = [ObservationSymbol::query(ep.query_dancer)];
    Ok(model.episode_logits(g, store, mem, &query, ep.query_time(), mode, trace)?)
}

/// Exact-match accuracy on `episodes` held-out seeds of `task` under `strategy`.
pub fn evaluate<T: Scalar>(
    cfg: &RunConfig,
    model: &SatModel<T>,
    store: &ParamStore<T>,
    task: TaskKind,
    strategy: EvictionStrategy,
    episodes: usize,
) -> Result<f64> {
    let mode = cfg.read_mode_for(strategy);
    let mut correct = 0usize;
    for i in 0..episodes {
        let ep = generate(task, EVAL_SEED_BASE + i as u64, &cfg.env)?;
        let mem = episode_memory(cfg, &ep, strategy)?;
        let mut g = Graph::new();
        let logits = logits_for(model, &mut g, store, &ep, &mem, mode, None)?;
        let row: Vec<f64> = g.value(logits).to_f64_vec();
        if crate::ama::argmax(&row) == ep.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / episodes.max(1) as f64)
}

/// Attention trace of one held-out episode.
pub fn attention_trace<T: Scalar>(
    cfg: &RunConfig,
    model: &SatModel<T>,
    store: &ParamStore<T>,
    task: TaskKind,
    strategy: EvictionStrategy,
    index: usize,
) -> Result<(Episode, AttentionTrace)> {
    let ep = generate(task, EVAL_SEED_BASE + index as u64, &cfg.env)?;
    let mem = episode_memory(cfg, &ep, strategy)?;
    let mut g = Graph::new();
    let mut trace = AttentionTrace::default();
    logits_for(model, &mut g, store, &ep, &mem, cfg.read_mode_for(strategy), Some(&mut trace))?;
    Ok((ep, trace))
}

/// How the selector sees each task.
#[derive(Clone, Debug)]
pub struct DescriptorPool {
    /// Per task: training descriptors and held-out descriptors.
    pub train: BTreeMap<TaskKind, Vec<TaskDescriptor>>,
    pub heldout: BTreeMap<TaskKind, Vec<TaskDescriptor>>,
    pub dim: usize,
}

impl DescriptorPool {
    pub fn one_hot(tasks: &[TaskKind]) -> Self {
        let train = tasks
            .iter()
            .enumerate()
            .map(|(i, &t)| (t, vec![TaskDescriptor::one_hot(i, tasks.len(), t.name())]))
            .collect();
        Self {
            train,
            heldout: BTreeMap::new(),
            dim: tasks.len(),
        }
    }

    /// Splits each task's descriptions (label = task name) into train and
    /// `heldout` held-out entries with a seeded shuffle.
    pub fn from_embeddings(tasks: &[TaskKind], emb: &TaskEmbeddings, heldout: usize, split_seed: u64) -> Result<Self> {
        let dim = emb
            .dim()
            .ok_or_else(|| HarnessError::Config("task-embedding file is empty".into()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(split_seed);
        let mut train = BTreeMap::new();
        let mut held = BTreeMap::new();
        for &t in tasks {
            let mut ids: Vec<&String> = emb.entries.iter().filter(|(_, e)| e.label == t.name()).map(|(id, _)| id).collect();
            if ids.len() <= heldout {
                return Err(HarnessError::Config(format!(
                    "task {t} has {} descriptions, need more than {heldout}",
                    ids.len()
                )));
            }
            ids.shuffle(&mut rng);
            let descs = ids.iter().map(|id| emb.descriptor(id)).collect::<Result<Vec<_>, _>>()?;
            let split = descs.len() - heldout;
            train.insert(t, descs[..split].to_vec());
            held.insert(t, descs[split..].to_vec());
        }
        Ok(Self {
            train,
            heldout: held,
            dim,
        })
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T: Scalar = f32> {
    pub model: SatModel<T>,
    pub store: ParamStore<T>,
    pub selector: Option<QSelector>,
    pub descriptors: Option<DescriptorPool>,
    pub metrics: Vec<MetricsRow>,
    /// Final held-out accuracy per task (under the greedy strategy for AMA).
    pub accuracy: BTreeMap<TaskKind, f64>,
    /// Strategy used per task at the end of training.
    pub strategy: BTreeMap<TaskKind, EvictionStrategy>,
    pub wall_ms: Vec<(usize, u128)>,
}

impl<T: Scalar> TrainOutcome<T> {
    /// Fraction of a task's descriptors (train or held-out) whose greedy
    /// strategy matches the task.
    pub fn selection_accuracy(&self, task: TaskKind, heldout: bool) -> Result<f64> {
        let (Some(sel), Some(pool)) = (&self.selector, &self.descriptors) else {
            return Err(HarnessError::Config("not an AMA run".into()));
        };
        let descs = if heldout { &pool.heldout } else { &pool.train };
        let descs = descs.get(&task).ok_or_else(|| HarnessError::Config(format!("no descriptors for {task}")))?;
        let want = task.matched_strategy();
        let hits = descs
            .iter()
            .map(|d| sel.greedy(&d.features()).map(|a| Some(sel.strategies[a]) == want))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(hits.iter().filter(|&&h| h).count() as f64 / hits.len().max(1) as f64)
    }
}

/// Descriptors for the configured tasks: one-hot, or split from the
/// task-embedding file when one is configured.
pub fn descriptor_pool(cfg: &RunConfig) -> Result<DescriptorPool> {
    match &cfg.ama.embeddings {
        Some(path) => {
            let emb = crate::ama::load_task_embeddings(path)?;
            DescriptorPool::from_embeddings(&cfg.tasks, &emb, cfg.ama.heldout, cfg.ama.split_seed)
        }
        None => Ok(DescriptorPool::one_hot(&cfg.tasks)),
    }
}

fn new_selector(cfg: &RunConfig, pool: &DescriptorPool) -> Result<QSelector> {
    Ok(QSelector::new(
        pool.dim,
        EvictionStrategy::ALL.to_vec(),
        cfg.ama.schedule,
        AdamConfig {
            lr: cfg.ama.lr,
            ..AdamConfig::default()
        },
        cfg.seed ^ 0x5eed,
    )?)
}

/// Restores a trained selector saved by [`write_run`].
pub fn load_selector(cfg: &RunConfig, checkpoint: &Path) -> Result<(QSelector, DescriptorPool)> {
    let pool = descriptor_pool(cfg)?;
    let mut sel = new_selector(cfg, &pool)?;
    sel.store.load_values_from(&load_checkpoint(checkpoint)?)?;
    Ok((sel, pool))
}

/// Strategy a run uses for `task`: the selector's greedy pick, or the
/// configured fixed strategy.
pub fn strategy_for(
    cfg: &RunConfig,
    selector: Option<(&QSelector, &DescriptorPool)>,
    task: TaskKind,
) -> Result<EvictionStrategy> {
    match selector {
        Some((sel, pool)) => greedy_strategy(sel, pool, task),
        None => Ok(cfg.memory.strategy),
    }
}

/// Greedy strategy for a task: majority vote over its training descriptors.
fn greedy_strategy(sel: &QSelector, pool: &DescriptorPool, task: TaskKind) -> Result<EvictionStrategy> {
    let mut votes = vec![0usize; sel.strategies.len()];
    let descs = pool
        .train
        .get(&task)
        .ok_or_else(|| HarnessError::Config(format!("no descriptors for {task}")))?;
    for d in descs {
        votes[sel.greedy(&d.features())?] += 1;
    }
    let best = crate::ama::argmax(&votes.iter().map(|&v| v as f64).collect::<Vec<_>>());
    Ok(sel.strategies[best])
}

/// Trains a model with a fixed strategy, or jointly with the selector when
/// `ama.enabled`.
pub fn train<T: Scalar>(cfg: &RunConfig) -> Result<TrainOutcome<T>> {
    train_from(cfg, None)
}

/// Like [`train`], optionally starting from existing model parameters.
pub fn train_from<T: Scalar>(cfg: &RunConfig, init: Option<&ParamStore<T>>) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let (model, mut store) = build_model(cfg)?;
    if let Some(init) = init {
        store.load_values_from(init)?;
    }
    let mut adam = AdamState::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });

    let (mut selector, pool) = if cfg.ama.enabled {
        let pool = descriptor_pool(cfg)?;
        (Some(new_selector(cfg, &pool)?), Some(pool))
    } else {
        (None, None)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(7);
    let mut metrics = Vec::new();
    let mut wall_ms = Vec::new();
    let started = Instant::now();
    let mut window: BTreeMap<TaskKind, (f64, usize)> = BTreeMap::new();

    let current_strategy = |sel: &Option<QSelector>, task: TaskKind| -> Result<EvictionStrategy> {
        match (sel, &pool) {
            (Some(s), Some(p)) => greedy_strategy(s, p, task),
            _ => Ok(cfg.memory.strategy),
        }
    };

    for step in 1..=cfg.steps {
        let mut g = Graph::new();
        let mut logits = Vec::with_capacity(cfg.batch);
        let mut labels = Vec::with_capacity(cfg.batch);
        let mut chosen = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let task = cfg.tasks[rng.random_range(0..cfg.tasks.len())];
            let seed = rng.random_range(0..EVAL_SEED_BASE);
            let ep = generate(task, seed, &cfg.env)?;
            let (strategy, sample) = match (&selector, &pool) {
                (Some(sel), Some(pool)) => {
                    let descs = &pool.train[&task];
                    let d = &descs[rng.random_range(0..descs.len())];
                    let f = d.features();
                    let a = sel.select(&f, step as u64 - 1, &mut rng)?;
                    (sel.strategies[a], Some((f, a)))
                }
                _ => (cfg.memory.strategy, None),
            };
            let mem = episode_memory(cfg, &ep, strategy)?;
            logits.push(logits_for(&model, &mut g, &store, &ep, &mem, cfg.read_mode_for(strategy), None)?);
            labels.push(ep.label);
            chosen.push((task, sample));
        }
        let all = if logits.len() == 1 { logits[0] } else { g.concat(&logits, 0)? };
        let (loss, per_example) = g.cross_entropy(all, &labels)?;
        g.backward(loss);
        store.zero_grad();
        g.accumulate_param_grads(&mut store);
        clip_gradients(&mut store, -cfg.clip, cfg.clip);
        adam.step(&mut store)?;

        let mut q_batch = Vec::new();
        for ((task, sample), &l) in chosen.into_iter().zip(&per_example) {
            let w = window.entry(task).or_insert((0.0, 0));
            w.0 += l.as_f64();
            w.1 += 1;
            if let Some((features, action)) = sample {
                q_batch.push(QSample {
                    features,
                    action,
                    loss: l.as_f64(),
                });
            }
        }
        if let Some(sel) = selector.as_mut() {
            sel.q_update(&q_batch)?;
        }

        let last = step == cfg.steps;
        let do_eval = last || (cfg.eval_every > 0 && step % cfg.eval_every == 0);
        if do_eval || (cfg.log_every > 0 && step % cfg.log_every == 0) {
            for &task in &cfg.tasks {
                let strategy = current_strategy(&selector, task)?;
                let train_loss = window.remove(&task).map(|(s, n)| s / n as f64);
                let eval_accuracy = if do_eval {
                    Some(evaluate(cfg, &model, &store, task, strategy, cfg.eval_episodes)?)
                } else {
                    None
                };
                metrics.push(MetricsRow {
                    step,
                    task,
                    strategy,
                    train_loss,
                    eval_accuracy,
                    epsilon: selector.as_ref().map(|s| s.epsilon(step as u64 - 1)),
                });
            }
            wall_ms.push((step, started.elapsed().as_millis()));
        }
    }

    let mut accuracy = BTreeMap::new();
    let mut strategy = BTreeMap::new();
    for &task in &cfg.tasks {
        let s = current_strategy(&selector, task)?;
        strategy.insert(task, s);
        let acc = metrics
            .iter()
            .rev()
            .find(|r| r.task == task && r.step == cfg.steps)
            .and_then(|r| r.eval_accuracy);
        let acc = match acc {
            Some(a) => a,
            None => evaluate(cfg, &model, &store, task, s, cfg.eval_episodes)?,
        };
        accuracy.insert(task, acc);
    }
    Ok(TrainOutcome {
        model,
        store,
        selector,
        descriptors: pool,
        metrics,
        accuracy,
        strategy,
        wall_ms,
    })
}

pub const MODEL_CHECKPOINT: &str = "model.satm";
pub const SELECTOR_CHECKPOINT: &str = "ama.satm";

/// Writes config, metrics, timings and checkpoints into `dir`.
pub fn write_run<T: Scalar>(dir: &Path, cfg: &RunConfig, outcome: &TrainOutcome<T>) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let write = |name: &str, text: String| -> Result<()> {
        let p = dir.join(name);
        std::fs::write(&p, text).map_err(io_err(&p))
    };
    write("config.txt", cfg.to_text())?;
    write("metrics.csv", metrics_csv(&outcome.metrics))?;
    let mut timing = String::from("step,wall_ms\n");
    for (s, ms) in &outcome.wall_ms {
        let _ = writeln!(timing, "{s},{ms}");
    }
    write("timing.csv", timing)?;
    save_checkpoint(&dir.join(MODEL_CHECKPOINT), &outcome.store)?;
    if let Some(sel) = &outcome.selector {
        save_checkpoint(&dir.join(SELECTOR_CHECKPOINT), &sel.store)?;
        let mut table = String::from("task,strategy\n");
        for (t, s) in &outcome.strategy {
            let _ = writeln!(table, "{t},{s}");
        }
        write("ama_strategies.csv", table)?;
    }
    Ok(())
}

/// Rebuilds a trained model from a config and a checkpoint file.
pub fn load_model<T: Scalar>(cfg: &RunConfig, checkpoint: &Path) -> Result<(SatModel<T>, ParamStore<T>)> {
    let (model, mut store) = build_model(cfg)?;
    let saved = load_checkpoint(checkpoint)?.cast::<T>();
    store.load_values_from(&saved)?;
    Ok((model, store))
}

/// Accuracy table for the strategy tasks: one fixed-strategy model per
/// (task, strategy) cell plus an AMA column.
#[derive(Clone, Debug, PartialEq)]
pub struct StrategyMatrix {
    pub tasks: Vec<TaskKind>,
    pub strategies: Vec<EvictionStrategy>,
    /// `cells[task][strategy]`.
    pub cells: Vec<Vec<f64>>,
    pub ama: Option<Vec<f64>>,
    pub ama_strategy: Option<Vec<EvictionStrategy>>,
}

impl StrategyMatrix {
    pub fn cell(&self, task: TaskKind, strategy: EvictionStrategy) -> f64 {
        let t = self.tasks.iter().position(|&x| x == task).expect("task in matrix");
        let s = self.strategies.iter().position(|&x| x == strategy).expect("strategy in matrix");
        self.cells[t][s]
    }

    pub fn diagonal(&self, task: TaskKind) -> Option<f64> {
        task.matched_strategy().map(|s| self.cell(task, s))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("task");
        for s in &self.strategies {
            let _ = write!(out, ",{s}");
        }
        if self.ama.is_some() {
            out.push_str(",ama,ama_strategy");
        }
        out.push('\n');
        for (i, t) in self.tasks.iter().enumerate() {
            let _ = write!(out, "{t}");
            for v in &self.cells[i] {
                let _ = write!(out, ",{v:.4}");
            }
            if let (Some(a), Some(s)) = (&self.ama, &self.ama_strategy) {
                let _ = write!(out, ",{:.4},{}", a[i], s[i]);
            }
            out.push('\n');
        }
        out
    }
}

/// Runs every fixed-strategy cell (and AMA when `with_ama`) from `base`.
pub fn eval_matrix(base: &RunConfig, with_ama: bool) -> Result<(StrategyMatrix, Option<TrainOutcome<f32>>)> {
    let tasks = TaskKind::STRATEGY_TASKS.to_vec();
    let strategies = EvictionStrategy::ALL.to_vec();
    let mut cells = Vec::new();
    for &task in &tasks {
        let mut row = Vec::new();
        for &s in &strategies {
            let mut cfg = base.clone();
            cfg.tasks = vec![task];
            cfg.memory.strategy = s;
            cfg.ama.enabled = false;
            let out = train::<f32>(&cfg)?;
            if let Some(dir) = &base.out {
                write_run(&dir.join(format!("{task}-{s}")), &cfg, &out)?;
            }
            row.push(out.accuracy[&task]);
        }
        cells.push(row);
    }
    let (ama, ama_strategy, outcome) = if with_ama {
        let mut cfg = base.clone();
        cfg.tasks = tasks.clone();
        cfg.ama.enabled = true;
        let out = train::<f32>(&cfg)?;
        if let Some(dir) = &base.out {
            write_run(&dir.join("ama"), &cfg, &out)?;
        }
        let acc = tasks.iter().map(|t| out.accuracy[t]).collect();
        let strat = tasks.iter().map(|t| out.strategy[t]).collect();
        (Some(acc), Some(strat), Some(out))
    } else {
        (None, None, None)
    };
    let m = StrategyMatrix {
        tasks,
        strategies,
        cells,
        ama,
        ama_strategy,
    };
    if let Some(dir) = &base.out {
        let p = dir.join("matrix.csv");
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        std::fs::write(&p, m.to_csv()).map_err(io_err(&p))?;
    }
    Ok((m, outcome))
}
