//! Finite-difference checks over every differentiable op and the tiny model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::embed::{EmbeddingConfig, ObservationSymbol, SpatialMode};
use crate::memory::{EpisodicMemory, EvictionStrategy, ExperienceFrame, FrameMeta, MemoryConfig};
use crate::model::{ChunkSpec, MemoryInput, MemoryLayer, Mha, ReadMode, SatConfig, SatModel, Vocab};
use crate::tensor::{check_params, GradCheckReport, Graph, ParamStore, Tensor, TensorError, Var};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

/// Worst case of one op across seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct OpCheck {
    pub name: &'static str,
    pub seeds: usize,
    pub max_rel_err: f64,
    pub checked: usize,
    pub excluded: usize,
}

impl OpCheck {
    pub fn passes(&self) -> bool {
        self.checked > 0 && self.max_rel_err < TOLERANCE
    }
}

type Case = fn(u64) -> crate::tensor::Result<GradCheckReport>;

fn m<T, E: std::fmt::Display>(r: Result<T, E>) -> crate::tensor::Result<T> {
    r.map_err(|e| TensorError::Invalid(e.to_string()))
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape matches data")
}

/// Store holding the op inputs as parameters, plus the fixed loss weights.
struct Setup {
    store: ParamStore<f64>,
    rng: ChaCha8Rng,
}

impl Setup {
    fn new(seed: u64) -> Self {
        Self {
            store: ParamStore::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn input(&mut self, shape: &[usize]) -> crate::tensor::ParamId {
        let t = rand_tensor(&mut self.rng, shape);
        let name = format!("in{}", self.store.len());
        self.store.add(name, t).expect("fresh name")
    }
}

/// `Σ out ⊙ w` for a fixed random `w`, so every output entry matters.
fn weighted_sum(g: &mut Graph<f64>, out: Var, seed: u64) -> crate::tensor::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa5a5);
    let w = g.constant(rand_tensor(&mut rng, g.shape(out)));
    let p = g.mul(out, w)?;
    Ok(g.sum_all(p))
}

macro_rules! op_case {
    ($seed:ident, [$($shape:expr),*], |$g:ident, $xs:ident| $body:expr) => {{
        let mut s = Setup::new($seed);
        let ids = vec![$(s.input(&$shape)),*];
        check_params(
            &s.store,
            |$g, store| {
                let $xs: Vec<Var> = ids.iter().map(|&id| $g.param(store, id)).collect();
                let out = $body?;
                weighted_sum($g, out, $seed)
            },
            STEP,
            1,
        )
    }};
}

fn matmul(seed: u64) -> crate::tensor::Result<GradCheckReport> {
    op_case!(seed, [[3, 4], [4, 5]], |g, x| g.matmul(x[0], x[1]))
}

fn matmul_nt(seed: u64) -> crate::tensor::Result<GradCheckReport> {
    op_case!(seed, [[3, 4], [5, 4]], |g, x| g.matmul_nt(x[0], x[1]))
}

fn add(seed: u64) -> crate::tensor::Result<GradCheckReport> {
    op_case!(seed, [[3, 4], [3, 4], [4]], |g, x| {
        let a = g.add(x[0], x[1])?;
        g.add(a, x[2])
    })
}

fn sub(seed: u64) -> crate::tensor::Result<GradCheckReport> {
    op_case!(seed, [[3, 4], [3, 4], [4]], |g, x| {
        let a = g.sub(x[0], x[1])?;
        g.sub(a, x[2])
    })
}

fn mul(seed: u64) -> crate::tensor::Result<GradCheckReport> {
    op_case!(seed, [[3, 4], [3, 4], [4]], |g, x| {
        let a = g.mul(x[0], x[1])?;
        g.mul(a, x[2])
    })
}

fn scale(seed: u64) -> crate::tensor::Result<GradCheckReport> {
    op_case!(seed, [[3, 4]], |g, x| Ok::<_, TensorError>(g.scale(x[0], -1.7)))
}

fn scale_by(seed: u64) -> crate::tensor::Result<GradCheckReport> {
    op_case!(seed, [[2, 3], [2, 4]], |g, x| g.scale_by(x[0], x[1], (seed % 8) as usize))
}

fn relu(seed: u64) -> crate::tensor::Result<GradCheckReport> {
    op_case!(seed, [[4, 5]], |g, x| Ok::<_, TensorError>(g.relu(x[0])))
}

fn softmax_rows(seed: u64) -> crate::tensor::Result<GradCheckReport> {
    op_case!(seed, [[3, 5]], |g, x| g.softmax(x[0], 1))
}

fn softmax_cols(seed: u64) -> crate::tensor::Result<GradCheckReport> {
    op_case!(seed, [[4, 3]], |g, x| g.softmax(x[0], 0))
}

fn layer_norm(seed: u64) -> crate::tensor::Result<GradCheckReport> {
    op_case!(seed, [[3, 6], [6], [6]], |g, x| g.layer_norm(x[0], x[1], x[2]))
}

fn concat(seed: u64) -> crate::tensor::Result<GradCheckReport> {
    op_case!(seed, [[2, 3], [4, 3], [6, 2]], |g, x| {
        let rows = g.concat(&[x[0], x[1]], 0)?;
        g.concat(&[rows, x[2]], 1)
    })
}

fn mean(seed: u64) -> crate::tensor::Result<GradCheckReport> {
    op_case!(seed, [[4, 3]], |g, x| {
        let a = g.mean(x[0], 0)?;
        let b = g.mean(x[0], 1)?;
        g.scale_by(a, b, 1)
    })
}

fn embedding_lookup(seed: u64) -> crate::tensor::Result<GradCheckReport> {
    op_case!(seed, [[6, 4]], |g, x| g.embedding_lookup(x[0], &[1, 4, 1, 0]))
}

fn gather_sum(seed: u64) -> crate::tensor::Result<GradCheckReport> {
    op_case!(seed, [[6, 4]], |g, x| g.gather_sum(x[0], vec![vec![0, 3], vec![5], vec![2, 2, 4]]))
}

fn gather_rows(seed: u64) -> crate::tensor::Result<GradCheckReport> {
    op_case!(seed, [[5, 3]], |g, x| g.gather_rows(x[0], &[4, 0, 4, 2]))
}

fn select_cols(seed: u64) -> crate::tensor::Result<GradCheckReport> {
    op_case!(seed, [[3, 5]], |g, x| g.select_cols(x[0], &[3, 0, 3]))
}

fn slice_cols(seed: u64) -> crate::tensor::Result<GradCheckReport> {
    op_case!(seed, [[3, 6]], |g, x| g.slice_cols(x[0], 2, 3))
}

fn sum_all(seed: u64) -> crate::tensor::Result<GradCheckReport> {
    op_case!(seed, [[3, 4]], |g, x| {
        let s = g.sum_all(x[0]);
        g.mul(s, s)
    })
}

fn cross_entropy(seed: u64) -> crate::tensor::Result<GradCheckReport> {
    let labels = [(seed % 5) as usize, 0, 4, 2];
    let mut s = Setup::new(seed);
    let id = s.input(&[4, 5]);
    check_params(
        &s.store,
        |g, store| {
            let x = g.param(store, id);
            Ok(g.cross_entropy(x, &labels)?.0)
        },
        STEP,
        1,
    )
}

fn mha(seed: u64) -> crate::tensor::Result<GradCheckReport> {
    let mut s = Setup::new(seed);
    let mha = m(Mha::new(&mut s.store, "mha", 6, 2, 3, &mut s.rng))?;
    let q = s.input(&[2, 6]);
    let kv = s.input(&[5, 6]);
    check_params(
        &s.store,
        |g, store| {
            let q = g.param(store, q);
            let kv = g.param(store, kv);
            let out = m(mha.forward(g, store, q, kv, kv))?;
            weighted_sum(g, out, seed)
        },
        STEP,
        1,
    )
}

fn layer_setup(seed: u64, tie: bool) -> crate::tensor::Result<(Setup, MemoryLayer, SatConfig)> {
    let mut s = Setup::new(seed);
    let cfg = SatConfig {
        num_layers: 1,
        dim: 6,
        heads: if tie { 1 } else { 2 },
        head_dim: if tie { 6 } else { 3 },
        mlp_hidden: 8,
        chunk_size: 2,
        top_k: 2,
        read_mode: ReadMode::PlaceHier,
        num_classes: 3,
        tie_relevance: tie,
    };
    let layer = m(MemoryLayer::new(&mut s.store, "layer", &cfg, &mut s.rng))?;
    Ok((s, layer, cfg))
}

fn bind_memory(g: &mut Graph<f64>, frames: Var, places: Option<Var>) -> crate::tensor::Result<MemoryInput> {
    let chunks = vec![
        ChunkSpec { rows: vec![0, 1], place_id: Some(0) },
        ChunkSpec { rows: vec![2], place_id: Some(1) },
        ChunkSpec { rows: vec![3, 4, 5], place_id: Some(2) },
    ];
    m(MemoryInput::new(g, frames, vec![0, 0, 1, 2, 2, 2], chunks, places))
}

fn chunk_relevance(seed: u64) -> crate::tensor::Result<GradCheckReport> {
    let (mut s, layer, _) = layer_setup(seed, seed % 2 == 1)?;
    let q = s.input(&[2, 6]);
    let frames = s.input(&[6, 6]);
    let places = s.input(&[3, 6]);
    check_params(
        &s.store,
        |g, store| {
            let q = g.param(store, q);
            let x = g.param(store, frames);
            let p = g.param(store, places);
            let mem = bind_memory(g, x, Some(p))?;
            let r = m(layer.chunk_relevance(g, store, q, &mem))?;
            weighted_sum(g, r, seed)
        },
        STEP,
        1,
    )
}

fn hcam_read(seed: u64) -> crate::tensor::Result<GradCheckReport> {
    let (mut s, layer, _) = layer_setup(seed, false)?;
    let q = s.input(&[2, 6]);
    let frames = s.input(&[6, 6]);
    let places = s.input(&[3, 6]);
    check_params(
        &s.store,
        |g, store| {
            let q = g.param(store, q);
            let x = g.param(store, frames);
            let p = g.param(store, places);
            let mem = bind_memory(g, x, Some(p))?;
            let out = m(layer.hcam_read(g, store, q, &mem, 2, None))?;
            weighted_sum(g, out, seed)
        },
        STEP,
        1,
    )
}

fn flat_read(seed: u64) -> crate::tensor::Result<GradCheckReport> {
    let (mut s, layer, _) = layer_setup(seed, false)?;
    let q = s.input(&[2, 6]);
    let frames = s.input(&[6, 6]);
    check_params(
        &s.store,
        |g, store| {
            let q = g.param(store, q);
            let x = g.param(store, frames);
            let mem = m(MemoryInput::new(g, x, vec![0; 6], Vec::new(), None))?;
            let out = m(layer.flat_read(g, store, q, &mem, None))?;
            weighted_sum(g, out, seed)
        },
        STEP,
        1,
    )
}

fn memory_layer(seed: u64) -> crate::tensor::Result<GradCheckReport> {
    let (mut s, layer, cfg) = layer_setup(seed, false)?;
    let q = s.input(&[2, 6]);
    let frames = s.input(&[6, 6]);
    check_params(
        &s.store,
        |g, store| {
            let q = g.param(store, q);
            let x = g.param(store, frames);
            let mem = bind_memory(g, x, None)?;
            let out = m(layer.forward(g, store, q, &mem, &cfg, None))?;
            weighted_sum(g, out, seed)
        },
        STEP,
        1,
    )
}

/// The 2-layer tiny model end to end: dim 8, one head, six stored frames.
/// Seeds rotate through the read modes and spatial embeddings.
fn tiny_model(seed: u64) -> crate::tensor::Result<GradCheckReport> {
    let mode = [ReadMode::PlaceHier, ReadMode::TimeHier, ReadMode::Flat][(seed % 3) as usize];
    let spatial = [SpatialMode::Sinusoidal1d, SpatialMode::Learnable2d][(seed / 3 % 2) as usize];
    let cfg = SatConfig {
        num_layers: 2,
        dim: 8,
        heads: 1,
        head_dim: 8,
        mlp_hidden: 8,
        chunk_size: 2,
        top_k: 2,
        read_mode: mode,
        num_classes: 4,
        tie_relevance: false,
    };
    let embed = EmbeddingConfig {
        dim: 8,
        spatial,
        ..EmbeddingConfig::default()
    };
    let vocab = Vocab {
        dancers: 5,
        dances: 4,
        dance_len: 3,
    };
    let mut s = Setup::new(seed);
    let model = m(SatModel::new(&mut s.store, cfg, embed, vocab, &mut s.rng))?;
    let mut memory = m(EpisodicMemory::new(MemoryConfig::default(), EvictionStrategy::Fifo))?;
    let mut place = s.rng.random_range(0..9);
    for t in 0..6 {
        if t % 2 == 0 {
            place = s.rng.random_range(0..9);
        }
        let meta = FrameMeta {
            dancer: s.rng.random_range(0..5),
            dance: s.rng.random_range(0..4),
            phase: t % 3,
        };
        m(memory.write(ExperienceFrame::bare(t, place, meta)))?;
    }
    let query = [ObservationSymbol::query(s.rng.random_range(0..5))];
    let label = [s.rng.random_range(0..4)];
    // Keep the learnable place table away from zero so the check is not vacuous.
    let ids: Vec<_> = s.store.iter().map(|(id, _)| id).collect();
    for id in ids {
        if s.store.value(id).data().iter().all(|&v| v == 0.0) {
            let shape = s.store.value(id).shape().to_vec();
            *s.store.value_mut(id) = rand_tensor(&mut s.rng, &shape);
        }
    }
    check_params(
        &s.store,
        |g, store| {
            let logits = m(model.episode_logits(g, store, &memory, &query, 6, mode, None))?;
            Ok(g.cross_entropy(logits, &label)?.0)
        },
        STEP,
        1,
    )
}

pub const CASES: &[(&str, Case)] = &[
    ("matmul", matmul),
    ("matmul_nt", matmul_nt),
    ("add", add),
    ("sub", sub),
    ("mul", mul),
    ("scale", scale),
    ("scale_by", scale_by),
    ("relu", relu),
    ("softmax_rows", softmax_rows),
    ("softmax_cols", softmax_cols),
    ("layer_norm", layer_norm),
    ("concat", concat),
    ("mean", mean),
    ("embedding_lookup", embedding_lookup),
    ("gather_sum", gather_sum),
    ("gather_rows", gather_rows),
    ("select_cols", select_cols),
    ("slice_cols", slice_cols),
    ("sum_all", sum_all),
    ("cross_entropy", cross_entropy),
    ("mha", mha),
    ("chunk_relevance", chunk_relevance),
    ("hcam_read", hcam_read),
    ("flat_read", flat_read),
    ("memory_layer", memory_layer),
    ("tiny_model", tiny_model),
];

/// Runs every case over seeds `0..seeds`.
pub fn gradcheck_suite(seeds: usize) -> crate::tensor::Result<Vec<OpCheck>> {
    CASES
        .iter()
        .map(|&(name, case)| {
            let mut out = OpCheck {
                name,
                seeds,
                max_rel_err: 0.0,
                checked: 0,
                excluded: 0,
            };
            for seed in 0..seeds as u64 {
                let r = case(seed)?;
                out.max_rel_err = out.max_rel_err.max(r.max_rel_err);
                out.checked += r.checked;
                out.excluded += r.excluded;
            }
            Ok(out)
        })
        .collect()
}
