//! Reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use satmem::ama::{EpsilonSchedule, QSample, QSelector, TaskDescriptor};
use satmem::memory::{EpisodicMemory, EvictionStrategy, ExperienceFrame, FrameMeta, Layout, MemoryConfig, VisitMetric};
use satmem::model::{ChunkSpec, MemoryInput, MemoryLayer, ReadMode, SatConfig};
use satmem::tensor::{AdamConfig, Graph, ParamStore, Tensor};

/// Retained time indices after writing `trace` (time, place) into a store
/// of `capacity` frames, recomputed from scratch by scanning lists.
pub fn reference_retained(
    trace: &[(usize, usize)],
    capacity: usize,
    strategy: EvictionStrategy,
    metric: VisitMetric,
) -> BTreeSet<usize> {
    let mut stored: Vec<(usize, usize)> = Vec::new();
    let mut entries: BTreeMap<usize, usize> = BTreeMap::new();
    let mut occupancy: BTreeMap<usize, usize> = BTreeMap::new();
    let mut previous = None;
    for &(t, p) in trace {
        if previous != Some(p) {
            *entries.entry(p).or_default() += 1;
        }
        *occupancy.entry(p).or_default() += 1;
        previous = Some(p);
        if stored.len() >= capacity {
            let victim = match strategy {
                EvictionStrategy::Fifo => (0..stored.len()).min_by_key(|&i| stored[i].0).unwrap(),
                EvictionStrategy::Lifo => (0..stored.len()).max_by_key(|&i| stored[i].0).unwrap(),
                EvictionStrategy::Mvfo | EvictionStrategy::Lvfo => {
                    let visits = |q: usize| match metric {
                        VisitMetric::Entries => entries[&q],
                        VisitMetric::Occupancy => occupancy[&q],
                    };
                    let count = |q: usize| stored.iter().filter(|s| s.1 == q).count();
                    let mut places: Vec<usize> = stored.iter().map(|s| s.1).collect();
                    places.sort_unstable();
                    places.dedup();
                    let mut best = places[0];
                    for &q in &places[1..] {
                        let (vq, vb) = (visits(q), visits(best));
                        let better_visits = if strategy == EvictionStrategy::Mvfo { vq > vb } else { vq < vb };
                        if better_visits || (vq == vb && count(q) > count(best)) {
                            best = q;
                        }
                    }
                    (0..stored.len())
                        .filter(|&i| stored[i].1 == best)
                        .min_by_key(|&i| stored[i].0)
                        .unwrap()
                }
            };
            stored.remove(victim);
        }
        stored.push((t, p));
    }
    stored.into_iter().map(|s| s.0).collect()
}

/// Random trace with at most `max_len` writes over at most `max_places`
/// places. Time indices are unique but not always increasing.
pub fn random_trace(rng: &mut ChaCha8Rng, max_len: usize, max_places: usize) -> Vec<(usize, usize)> {
    let n = rng.random_range(1..=max_len);
    let places = rng.random_range(1..=max_places);
    let mut times: Vec<usize> = (0..n).map(|i| i * 3 + rng.random_range(0..3)).collect();
    if rng.random_bool(0.25) {
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            times.swap(i, j);
        }
    }
    let mut place = rng.random_range(0..places);
    times
        .into_iter()
        .map(|t| {
            if rng.random_bool(0.4) {
                place = rng.random_range(0..places);
            }
            (t, place)
        })
        .collect()
}

pub fn replay(
    trace: &[(usize, usize)],
    layout: Layout,
    capacity: usize,
    strategy: EvictionStrategy,
    metric: VisitMetric,
) -> EpisodicMemory {
    let config = MemoryConfig {
        layout,
        capacity: Some(capacity),
        visit_metric: metric,
        ..MemoryConfig::default()
    };
    let mut mem = EpisodicMemory::new(config, strategy).unwrap();
    for &(t, p) in trace {
        mem.write(ExperienceFrame::bare(t, p, FrameMeta::default())).unwrap();
    }
    mem
}

/// Runs the oracle comparison over `traces` random traces and every
/// strategy, layout and visit metric; returns the number of mismatches.
pub fn eviction_mismatches(traces: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = 0;
    for _ in 0..traces {
        let trace = random_trace(&mut rng, 64, 8);
        let capacity = rng.random_range(1..=trace.len());
        let metric = if rng.random_bool(0.5) { VisitMetric::Entries } else { VisitMetric::Occupancy };
        for strategy in EvictionStrategy::ALL {
            let want = reference_retained(&trace, capacity, strategy, metric);
            for layout in [Layout::Flat, Layout::Place] {
                let got: BTreeSet<usize> = replay(&trace, layout, capacity, strategy, metric)
                    .time_indices()
                    .into_iter()
                    .collect();
                if got != want {
                    mismatches += 1;
                }
            }
        }
    }
    mismatches
}

/// Largest absolute gap between a hierarchical read over one-frame chunks
/// with every chunk selected and the flat read, over random instances.
/// Relevance shares the read's projections and there is one head, so both
/// paths weight frame `j` by the same softmax.
pub fn degenerate_max_diff(instances: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let dim = rng.random_range(2..10);
        let n = rng.random_range(1..24);
        let cfg = SatConfig {
            dim,
            heads: 1,
            head_dim: dim,
            mlp_hidden: dim,
            chunk_size: 1,
            top_k: n,
            read_mode: ReadMode::PlaceHier,
            tie_relevance: true,
            ..SatConfig::default()
        };
        let mut store = ParamStore::<f64>::new();
        let layer = MemoryLayer::new(&mut store, "l", &cfg, &mut rng).unwrap();
        let mut g = Graph::new();
        let mut random = |rows: usize| {
            let data = (0..rows * dim).map(|_| rng.random_range(-2.0..2.0)).collect();
            g.constant(Tensor::new(&[rows, dim], data).unwrap())
        };
        let q = random(1);
        let x = random(n);
        let places: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let chunks = (0..n)
            .map(|i| ChunkSpec {
                rows: vec![i],
                place_id: Some(places[i]),
            })
            .collect();
        let mem = MemoryInput::new(&mut g, x, places, chunks, None).unwrap();
        let h = layer.hcam_read(&mut g, &store, q, &mem, n, None).unwrap();
        let f = layer.flat_read(&mut g, &store, q, &mem, None).unwrap();
        for (a, b) in g.value(h).data().iter().zip(g.value(f).data()) {
            worst = worst.max((a - b).abs());
        }
    }
    worst
}

/// A 4 task × 4 strategy loss table whose row minima are unique and sit
/// on the diagonal after a seeded shuffle of the columns.
pub fn loss_table(seed: u64) -> [[f64; 4]; 4] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cols = [0usize, 1, 2, 3];
    for i in (1..4).rev() {
        cols.swap(i, rng.random_range(0..=i));
    }
    let mut table = [[0.0; 4]; 4];
    for (t, row) in table.iter_mut().enumerate() {
        for (s, cell) in row.iter_mut().enumerate() {
            *cell = if s == cols[t] {
                rng.random_range(0.05..0.3)
            } else {
                rng.random_range(0.6..2.0)
            };
        }
    }
    table
}

pub struct BanditResult {
    pub greedy: Vec<usize>,
    pub argmin: Vec<usize>,
    /// Largest `|Q + L|` over pairs taken at least `min_visits` times.
    pub max_q_err: f64,
    pub converged_pairs: usize,
}

/// ε-greedy play of `updates` rounds, each a batch of one pull per task.
pub fn run_bandit(table: &[[f64; 4]; 4], updates: u64, seed: u64) -> BanditResult {
    let schedule = EpsilonSchedule {
        start: 1.0,
        end: 0.2,
        horizon: updates / 2,
    };
    let mut sel = QSelector::new(4, EvictionStrategy::ALL.to_vec(), schedule, AdamConfig::default(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xba4d17);
    let features: Vec<Vec<f32>> = (0..4).map(|t| TaskDescriptor::one_hot(t, 4, "t").features()).collect();
    let mut visits = [[0u64; 4]; 4];
    for step in 0..updates {
        let batch: Vec<QSample> = (0..4)
            .map(|t| {
                let action = sel.select(&features[t], step, &mut rng).unwrap();
                visits[t][action] += 1;
                QSample {
                    features: features[t].clone(),
                    action,
                    loss: table[t][action],
                }
            })
            .collect();
        sel.q_update(&batch).unwrap();
    }
    let min_visits = updates / 100;
    let mut max_q_err = 0.0f64;
    let mut converged_pairs = 0;
    let mut greedy = Vec::new();
    let mut argmin = Vec::new();
    for t in 0..4 {
        let q = sel.q_values(&features[t]).unwrap();
        greedy.push(satmem::ama::argmax(&q));
        let row = &table[t];
        argmin.push((0..4).min_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap());
        for s in 0..4 {
            if visits[t][s] >= min_visits {
                converged_pairs += 1;
                max_q_err = max_q_err.max((q[s] + row[s]).abs());
            }
        }
    }
    BanditResult {
        greedy,
        argmin,
        max_q_err,
        converged_pairs,
    }
}
