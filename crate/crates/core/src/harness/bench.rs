//! Flat versus hierarchical read latency on synthetic place-pure memories.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::{ChunkSpec, LayerTrace, MemoryInput, MemoryLayer, ModelError, ReadMode, SatConfig};
use crate::tensor::{Graph, ParamStore, Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub memory: usize,
    pub chunk_size: usize,
    pub top_k: usize,
    pub dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            memory: 1024,
            chunk_size: 32,
            top_k: 4,
            dim: 128,
            heads: 2,
            head_dim: 64,
            repeats: 50,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub memory: usize,
    pub chunks: usize,
    /// Keys scored per query token.
    pub flat_keys: usize,
    pub hier_keys: usize,
    pub flat_median_us: f64,
    pub hier_median_us: f64,
}

impl BenchReport {
    pub const CSV_HEADER: &'static str = "memory,chunks,flat_keys,hier_keys,flat_median_us,hier_median_us";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{:.1},{:.1}",
            self.memory, self.chunks, self.flat_keys, self.hier_keys, self.flat_median_us, self.hier_median_us
        )
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn random<T: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<T> {
    let data = (0..rows * cols).map(|_| T::of(rng.random_range(-1.0..1.0))).collect();
    Tensor::new(&[rows, cols], data).expect("shape matches data")
}

/// Times one forward read per path. Every chunk holds one place, so the
/// memory looks like a place-centric store with `memory / chunk_size` rooms.
pub fn bench_reads<T: Scalar>(cfg: &BenchConfig) -> Result<BenchReport, ModelError> {
    let sat = SatConfig {
        num_layers: 1,
        dim: cfg.dim,
        heads: cfg.heads,
        head_dim: cfg.head_dim,
        mlp_hidden: cfg.dim,
        chunk_size: cfg.chunk_size,
        top_k: cfg.top_k,
        read_mode: ReadMode::PlaceHier,
        num_classes: 2,
        tie_relevance: false,
    };
    sat.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::<T>::new();
    let layer = MemoryLayer::new(&mut store, "bench", &sat, &mut rng)?;
    let frames = random::<T>(&mut rng, cfg.memory, cfg.dim);
    let query = random::<T>(&mut rng, 1, cfg.dim);
    let chunks: Vec<ChunkSpec> = (0..cfg.memory)
        .step_by(cfg.chunk_size.max(1))
        .enumerate()
        .map(|(j, start)| ChunkSpec {
            rows: (start..(start + cfg.chunk_size).min(cfg.memory)).collect(),
            place_id: Some(j),
        })
        .collect();
    let places: Vec<usize> = (0..cfg.memory).map(|i| i / cfg.chunk_size.max(1)).collect();
    let place_embeds = random::<T>(&mut rng, chunks.len(), cfg.dim);

    let flat = |trace: Option<&mut LayerTrace>| -> Result<(), ModelError> {
        let mut g = Graph::new();
        let x = g.constant(frames.clone());
        let q = g.constant(query.clone());
        let mem = MemoryInput::new(&mut g, x, places.clone(), Vec::new(), None)?;
        layer.flat_read(&mut g, &store, q, &mem, trace)?;
        Ok(())
    };
    let hier = |trace: Option<&mut LayerTrace>| -> Result<(), ModelError> {
        let mut g = Graph::new();
        let x = g.constant(frames.clone());
        let q = g.constant(query.clone());
        let pe = g.constant(place_embeds.clone());
        let mem = MemoryInput::new(&mut g, x, places.clone(), chunks.clone(), Some(pe))?;
        layer.hcam_read(&mut g, &store, q, &mem, cfg.top_k, trace)?;
        Ok(())
    };

    let mut ft = LayerTrace::default();
    flat(Some(&mut ft))?;
    let mut ht = LayerTrace::default();
    hier(Some(&mut ht))?;

    let time = |f: &dyn Fn(Option<&mut LayerTrace>) -> Result<(), ModelError>| -> Result<f64, ModelError> {
        let mut samples = Vec::with_capacity(cfg.repeats);
        for _ in 0..cfg.repeats.max(1) {
            let start = Instant::now();
            f(None)?;
            samples.push(start.elapsed().as_secs_f64() * 1e6);
        }
        Ok(median(samples))
    };
    // Interleave so drift in machine load hits both paths alike.
    let mut flat_us = Vec::new();
    let mut hier_us = Vec::new();
    for _ in 0..3 {
        flat_us.push(time(&flat)?);
        hier_us.push(time(&hier)?);
    }
    Ok(BenchReport {
        memory: cfg.memory,
        chunks: chunks.len(),
        flat_keys: ft.attended_keys.first().copied().unwrap_or(0),
        hier_keys: ht.attended_keys.first().copied().unwrap_or(0),
        flat_median_us: median(flat_us),
        hier_median_us: median(hier_us),
    })
}
