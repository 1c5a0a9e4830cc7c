//! Adaptive memory allocation: a one-step Q selector that maps a task
//! descriptor to an eviction strategy.
//!
//! The selector is trained so that `Q(τ, σ)` approaches the negated
//! downstream loss of running the task with strategy `σ`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::memory::EvictionStrategy;
use crate::model::Linear;
use crate::tensor::{AdamConfig, AdamState, Graph, ParamStore, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum AmaError {
    #[error("downstream loss is not finite: {0}")]
    NonFiniteLoss(f64),
    #[error("descriptor has dimension {got}, selector expects {expected}")]
    DescriptorDim { expected: usize, got: usize },
    #[error("strategy index {index} out of range for {count} strategies")]
    StrategyIndex { index: usize, count: usize },
    #[error("selector needs at least two strategies")]
    TooFewStrategies,
    #[error("task embeddings line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unknown task description `{0}`")]
    UnknownDescription(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
}

pub type Result<T, E = AmaError> = std::result::Result<T, E>;

/// Task identity fed to the selector.
#[derive(Clone, Debug, PartialEq)]
pub enum TaskDescriptor {
    OneHot { id: usize, count: usize, label: String },
    Embedding { vector: Vec<f32>, label: String },
}

impl TaskDescriptor {
    pub fn one_hot(id: usize, count: usize, label: impl Into<String>) -> Self {
        TaskDescriptor::OneHot {
            id,
            count,
            label: label.into(),
        }
    }

    pub fn features(&self) -> Vec<f32> {
        match self {
            TaskDescriptor::OneHot { id, count, .. } => {
                let mut v = vec![0.0; *count];
                v[*id] = 1.0;
                v
            }
            TaskDescriptor::Embedding { vector, .. } => vector.clone(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            TaskDescriptor::OneHot { count, .. } => *count,
            TaskDescriptor::Embedding { vector, .. } => vector.len(),
        }
    }

    pub fn label(&self) -> &str {
        match self {
            TaskDescriptor::OneHot { label, .. } | TaskDescriptor::Embedding { label, .. } => label,
        }
    }
}

/// Linear anneal from `start` to `end` over `horizon` steps, then flat.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpsilonSchedule {
    pub start: f64,
    pub end: f64,
    pub horizon: u64,
}

impl Default for EpsilonSchedule {
    fn default() -> Self {
        Self {
            start: 1.0,
            end: 0.2,
            horizon: 200_000,
        }
    }
}

impl EpsilonSchedule {
    pub fn value(&self, step: u64) -> f64 {
        if self.horizon == 0 {
            return self.end;
        }
        let frac = (step as f64 / self.horizon as f64).min(1.0);
        self.start + (self.end - self.start) * frac
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// One recorded outcome for the Q update.
#[derive(Clone, Debug, PartialEq)]
pub struct QSample {
    pub features: Vec<f32>,
    pub action: usize,
    pub loss: f64,
}

/// `Q(τ, ·)`: one hidden ReLU layer, one output per strategy.
#[derive(Clone, Debug)]
pub struct QSelector {
    pub store: ParamStore<f32>,
    pub hidden: Linear,
    pub out: Linear,
    pub strategies: Vec<EvictionStrategy>,
    pub schedule: EpsilonSchedule,
    pub input_dim: usize,
    adam: AdamState<f32>,
}

impl QSelector {
    pub const HIDDEN: usize = 64;

    pub fn new(
        input_dim: usize,
        strategies: Vec<EvictionStrategy>,
        schedule: EpsilonSchedule,
        adam: AdamConfig,
        seed: u64,
    ) -> Result<Self> {
        if strategies.len() < 2 {
            return Err(AmaError::TooFewStrategies);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let hidden = Linear::new(&mut store, "ama.hidden", input_dim, Self::HIDDEN, &mut rng)?;
        let out = Linear::new(&mut store, "ama.out", Self::HIDDEN, strategies.len(), &mut rng)?;
        Ok(Self {
            store,
            hidden,
            out,
            strategies,
            schedule,
            input_dim,
            adam: AdamState::new(adam),
        })
    }

    fn check(&self, features: &[f32]) -> Result<()> {
        if features.len() != self.input_dim {
            return Err(AmaError::DescriptorDim {
                expected: self.input_dim,
                got: features.len(),
            });
        }
        Ok(())
    }

    fn forward(&self, g: &mut Graph<f32>, rows: &[&[f32]]) -> Result<crate::tensor::Var> {
        let data: Vec<f32> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        let x = g.constant(Tensor::new(&[rows.len(), self.input_dim], data)?);
        let h = self.hidden.apply(g, &self.store, x)?;
        let h = g.relu(h);
        Ok(self.out.apply(g, &self.store, h)?)
    }

    pub fn q_values(&self, features: &[f32]) -> Result<Vec<f64>> {
        self.check(features)?;
        let mut g = Graph::new();
        let q = self.forward(&mut g, &[features])?;
        Ok(g.value(q).to_f64_vec())
    }

    pub fn greedy(&self, features: &[f32]) -> Result<usize> {
        Ok(argmax(&self.q_values(features)?))
    }

    pub fn epsilon(&self, step: u64) -> f64 {
        self.schedule.value(step)
    }

    /// ε-greedy choice of a strategy index.
    pub fn select<R: Rng + ?Sized>(&self, features: &[f32], step: u64, rng: &mut R) -> Result<usize> {
        self.select_with_epsilon(features, self.epsilon(step), rng)
    }

    pub fn select_with_epsilon<R: Rng + ?Sized>(&self, features: &[f32], eps: f64, rng: &mut R) -> Result<usize> {
        self.check(features)?;
        if rng.random::<f64>() < eps {
            Ok(rng.random_range(0..self.strategies.len()))
        } else {
            self.greedy(features)
        }
    }

    /// One Adam step on the mean of `(Q(τ, σ) + L)²`; returns that mean.
    /// Losses are constants here, so nothing flows back into the task model.
    pub fn q_update(&mut self, batch: &[QSample]) -> Result<f64> {
        if batch.is_empty() {
            return Ok(0.0);
        }
        let a = self.strategies.len();
        let mut mask = vec![0.0f32; batch.len() * a];
        let mut target = vec![0.0f32; batch.len() * a];
        for (i, s) in batch.iter().enumerate() {
            self.check(&s.features)?;
            if !s.loss.is_finite() {
                return Err(AmaError::NonFiniteLoss(s.loss));
            }
            if s.action >= a {
                return Err(AmaError::StrategyIndex {
                    index: s.action,
                    count: a,
                });
            }
            mask[i * a + s.action] = 1.0;
            target[i * a + s.action] = s.loss as f32;
        }
        let mut g = Graph::new();
        let rows: Vec<&[f32]> = batch.iter().map(|s| s.features.as_slice()).collect();
        let q = self.forward(&mut g, &rows)?;
        let m = g.constant(Tensor::new(&[batch.len(), a], mask)?);
        let t = g.constant(Tensor::new(&[batch.len(), a], target)?);
        let chosen = g.mul(q, m)?;
        let d = g.add(chosen, t)?;
        let sq = g.mul(d, d)?;
        let total = g.sum_all(sq);
        let loss = g.scale(total, 1.0 / batch.len() as f32);
        g.backward(loss);
        self.store.zero_grad();
        g.accumulate_param_grads(&mut self.store);
        self.adam.step(&mut self.store)?;
        Ok(g.value(loss).data()[0] as f64)
    }
}

/// One line of a task-embedding file.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskEmbedding {
    pub label: String,
    pub vector: Vec<f32>,
}

/// Parsed task-embedding file, keyed by description id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TaskEmbeddings {
    pub entries: BTreeMap<String, TaskEmbedding>,
}

impl TaskEmbeddings {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &str) -> Result<&TaskEmbedding> {
        self.entries
            .get(id)
            .ok_or_else(|| AmaError::UnknownDescription(id.to_string()))
    }

    pub fn descriptor(&self, id: &str) -> Result<TaskDescriptor> {
        let e = self.get(id)?;
        Ok(TaskDescriptor::Embedding {
            vector: e.vector.clone(),
            label: e.label.clone(),
        })
    }

    pub fn dim(&self) -> Option<usize> {
        self.entries.values().next().map(|e| e.vector.len())
    }

    /// `id label f1,f2,...` per line; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut out = TaskEmbeddings::default();
        let mut dim = None;
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let err = |message: String| AmaError::Parse { line: line_no, message };
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let [id, label, values] = fields[..] else {
                return Err(err(format!("expected 3 fields, got {}", fields.len())));
            };
            let vector = values
                .split(',')
                .map(|v| v.parse::<f32>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| err(e.to_string()))?;
            match dim {
                Some(d) if d != vector.len() => {
                    return Err(err(format!("dimension {} differs from {d}", vector.len())))
                }
                None => dim = Some(vector.len()),
                _ => {}
            }
            let entry = TaskEmbedding {
                label: label.to_string(),
                vector,
            };
            if out.entries.insert(id.to_string(), entry).is_some() {
                return Err(err(format!("duplicate id `{id}`")));
            }
        }
        Ok(out)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (id, e) in &self.entries {
            let values: Vec<String> = e.vector.iter().map(|v| format!("{v:.6}")).collect();
            let _ = writeln!(out, "{id} {} {}", e.label, values.join(","));
        }
        out
    }
}

pub fn load_task_embeddings(path: &Path) -> Result<TaskEmbeddings> {
    TaskEmbeddings::parse(&std::fs::read_to_string(path)?)
}

/// Stand-in for text-embedding descriptions: one random unit-norm center per
/// label plus Gaussian noise of standard deviation `noise` per coordinate.
/// Ids are `<label>-<k>`.
pub fn synthetic_task_embeddings(labels: &[&str], per_label: usize, dim: usize, noise: f64, seed: u64) -> TaskEmbeddings {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    let mut out = TaskEmbeddings::default();
    for label in labels {
        let center: Vec<f64> = (0..dim).map(|_| normal.sample(&mut rng)).collect();
        let norm = center.iter().map(|c| c * c).sum::<f64>().sqrt().max(1e-12);
        for k in 0..per_label {
            let vector = center
                .iter()
                .map(|c| (c / norm + noise * normal.sample(&mut rng)) as f32)
                .collect();
            out.entries.insert(
                format!("{label}-{k:02}"),
                TaskEmbedding {
                    label: label.to_string(),
                    vector,
                },
            );
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn selector(input_dim: usize, seed: u64) -> QSelector {
        QSelector::new(
            input_dim,
            EvictionStrategy::ALL.to_vec(),
            EpsilonSchedule::default(),
            AdamConfig::default(),
            seed,
        )
        .unwrap()
    }

    #[test]
    fn epsilon_schedule() {
        let s = EpsilonSchedule::default();
        assert_eq!(s.value(0), 1.0);
        assert!((s.value(100_000) - 0.6).abs() < 1e-12);
        assert!((s.value(200_000) - 0.2).abs() < 1e-12);
        assert!((s.value(10_000_000) - 0.2).abs() < 1e-12);
    }

    #[test]
    fn argmax_picks_lowest_tie() {
        assert_eq!(argmax(&[0.1, 0.9, 0.2, 0.3]), 1);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
    }

    #[test]
    fn greedy_selection_follows_q() {
        let mut sel = selector(4, 0);
        // zero the output weights and set the bias to a known Q vector
        let w = sel.out.weight;
        sel.store.value_mut(w).data_mut().iter_mut().for_each(|v| *v = 0.0);
        let b = sel.out.bias.expect("output layer has a bias");
        sel.store.value_mut(b).data_mut().copy_from_slice(&[0.1, 0.9, 0.2, 0.3]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = TaskDescriptor::one_hot(2, 4, "t").features();
        assert_eq!(sel.select_with_epsilon(&f, 0.0, &mut rng).unwrap(), 1);
    }

    #[test]
    fn full_exploration_is_uniform() {
        let sel = selector(4, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = TaskDescriptor::one_hot(0, 4, "t").features();
        let mut counts = [0usize; 4];
        let n = 10_000;
        for _ in 0..n {
            counts[sel.select_with_epsilon(&f, 1.0, &mut rng).unwrap()] += 1;
        }
        let sd = (n as f64 * 0.25 * 0.75).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 / 4.0).abs() < 3.0 * sd, "{counts:?}");
        }
    }

    #[test]
    fn q_converges_to_negative_loss() {
        let mut sel = selector(4, 3);
        let f = TaskDescriptor::one_hot(1, 4, "t").features();
        let sample = QSample {
            features: f.clone(),
            action: 2,
            loss: 0.5,
        };
        for _ in 0..2000 {
            sel.q_update(std::slice::from_ref(&sample)).unwrap();
        }
        let q = sel.q_values(&f).unwrap()[2];
        assert!((q + 0.5).abs() < 0.01, "q = {q}");
    }

    #[test]
    fn zero_loss_fixed_point() {
        let mut sel = selector(2, 4);
        let f = vec![1.0, 0.0];
        for _ in 0..3000 {
            sel.q_update(&[QSample {
                features: f.clone(),
                action: 0,
                loss: 0.0,
            }])
            .unwrap();
        }
        assert!(sel.q_values(&f).unwrap()[0].abs() < 0.01);
    }

    #[test]
    fn rejects_bad_updates() {
        let mut sel = selector(2, 5);
        let bad = QSample {
            features: vec![1.0, 0.0],
            action: 0,
            loss: f64::NAN,
        };
        assert!(matches!(sel.q_update(&[bad]), Err(AmaError::NonFiniteLoss(_))));
        assert!(sel.q_values(&[1.0]).is_err());
    }

    #[test]
    fn embedding_file_parsing() {
        let e = TaskEmbeddings::parse("").unwrap();
        assert!(e.is_empty());
        assert!(e.get("x").is_err());
        let e = TaskEmbeddings::parse("# c\na fifo 1,2\nb lifo 3,4.5\n").unwrap();
        assert_eq!(e.get("b").unwrap().vector, vec![3.0, 4.5]);
        assert!(TaskEmbeddings::parse("a fifo 1,2\na lifo 1,2").is_err());
        assert!(TaskEmbeddings::parse("a fifo 1,2\nb lifo 1").is_err());
        assert!(TaskEmbeddings::parse("a fifo 1,x").is_err());
    }

    #[test]
    fn synthetic_embeddings_round_trip() {
        let e = synthetic_task_embeddings(&["fifo", "lifo", "mvfo", "lvfo"], 20, 16, 0.05, 9);
        assert_eq!(e.len(), 80);
        let back = TaskEmbeddings::parse(&e.to_text()).unwrap();
        assert_eq!(back.len(), 80);
        for (id, v) in &e.entries {
            let w = back.get(id).unwrap();
            assert_eq!(w.label, v.label);
            for (a, b) in v.vector.iter().zip(&w.vector) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }
}
