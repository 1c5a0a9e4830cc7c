//! Memory layers and the full model.
//!
//! Each layer runs three pre-normalised residual blocks: self-attention over
//! the query tokens, a read from the episodic memory, and an MLP. The memory
//! read is either flat attention over every frame or a two-stage
//! hierarchical read (chunk relevance, then attention inside the top-k
//! chunks, mixed by relevance).

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::Rng;
use thiserror::Error;

use crate::embed::{EmbedError, EmbeddingConfig, FrameEmbedder, ObservationSymbol};
use crate::memory::{Chunk, EpisodicMemory, ExperienceFrame};
use crate::tensor::{Graph, ParamId, ParamStore, Scalar, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("memory is empty, nothing to read")]
    EmptyMemory,
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReadMode {
    /// Attention over every stored frame.
    Flat,
    /// Hierarchical read over consecutive time windows.
    TimeHier,
    /// Hierarchical read over per-place chunks with place-aware keys.
    PlaceHier,
}

impl ReadMode {
    pub fn name(self) -> &'static str {
        match self {
            ReadMode::Flat => "flat",
            ReadMode::TimeHier => "time-hier",
            ReadMode::PlaceHier => "place-hier",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "flat" => ReadMode::Flat,
            "time-hier" => ReadMode::TimeHier,
            "place-hier" => ReadMode::PlaceHier,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SatConfig {
    pub num_layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub mlp_hidden: usize,
    pub chunk_size: usize,
    pub top_k: usize,
    pub read_mode: ReadMode,
    pub num_classes: usize,
    /// Reuse the read's query/key projections for chunk relevance instead
    /// of a separate pair. Needs `heads * head_dim == dim`.
    pub tie_relevance: bool,
}

impl Default for SatConfig {
    fn default() -> Self {
        Self {
            num_layers: 4,
            dim: 128,
            heads: 2,
            head_dim: 64,
            mlp_hidden: 128,
            chunk_size: 32,
            top_k: 4,
            read_mode: ReadMode::PlaceHier,
            num_classes: 8,
            tie_relevance: false,
        }
    }
}

impl SatConfig {
    pub fn inner(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.num_layers == 0 || self.dim == 0 || self.heads == 0 || self.head_dim == 0 || self.mlp_hidden == 0 {
            return bad("layer, width and head counts must be positive");
        }
        if self.top_k == 0 || self.chunk_size == 0 {
            return bad("top_k and chunk_size must be at least 1");
        }
        if self.num_classes == 0 {
            return bad("num_classes must be positive");
        }
        if self.tie_relevance && self.inner() != self.dim {
            return bad("tied relevance projections need heads * head_dim == dim");
        }
        Ok(())
    }
}

/// `y = x W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let std = 1.0 / (fan_in as f64).sqrt();
        Ok(Self {
            weight: store.add_normal(format!("{name}.weight"), &[fan_in, fan_out], std, rng)?,
            bias: Some(store.add_zeros(format!("{name}.bias"), &[fan_out])?),
        })
    }

    /// Key projections: a bias there only shifts every score in a softmax
    /// row by the same amount, so it would never receive gradient.
    pub fn unbiased<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let std = 1.0 / (fan_in as f64).sqrt();
        Ok(Self {
            weight: store.add_normal(format!("{name}.weight"), &[fan_in, fan_out], std, rng)?,
            bias: None,
        })
    }

    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(store, b);
                Ok(g.add(y, b)?)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: store.add_ones(format!("{name}.gain"), &[dim])?,
            bias: store.add_zeros(format!("{name}.bias"), &[dim])?,
        })
    }

    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        Ok(g.layer_norm(x, gain, bias)?)
    }
}

/// Multi-head attention with input and output projections.
#[derive(Clone, Debug)]
pub struct Mha {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub head_dim: usize,
}

impl Mha {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        head_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let inner = heads * head_dim;
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), dim, inner, rng)?,
            k: Linear::unbiased(store, &format!("{name}.k"), dim, inner, rng)?,
            v: Linear::new(store, &format!("{name}.v"), dim, inner, rng)?,
            o: Linear::new(store, &format!("{name}.o"), inner, dim, rng)?,
            heads,
            head_dim,
        })
    }

    /// Attention from already projected queries to projected keys/values.
    /// Head-averaged weights per query row are pushed into `weights`.
    pub fn attend<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        qp: Var,
        kp: Var,
        vp: Var,
        weights: Option<&mut Vec<Vec<f64>>>,
    ) -> Result<Var> {
        let scale = T::of(1.0 / (self.head_dim as f64).sqrt());
        let mut outs = Vec::with_capacity(self.heads);
        let mut avg: Vec<f64> = Vec::new();
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (qp, kp, vp)
            } else {
                let start = h * self.head_dim;
                (
                    g.slice_cols(qp, start, self.head_dim)?,
                    g.slice_cols(kp, start, self.head_dim)?,
                    g.slice_cols(vp, start, self.head_dim)?,
                )
            };
            let s = g.matmul_nt(qh, kh)?;
            let s = g.scale(s, scale);
            let a = g.softmax(s, 1)?;
            if weights.is_some() {
                let av = g.value(a).to_f64_vec();
                if avg.is_empty() {
                    avg = vec![0.0; av.len()];
                }
                for (x, y) in avg.iter_mut().zip(av) {
                    *x += y / self.heads as f64;
                }
            }
            outs.push(g.matmul(a, vh)?);
        }
        if let Some(w) = weights {
            let nk = g.shape(kp)[0];
            w.extend(avg.chunks(nk.max(1)).map(<[f64]>::to_vec));
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat(&outs, 1)? };
        self.o.apply(g, store, cat)
    }

    /// `MHA(q, k, v)` on raw inputs.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, q: Var, k: Var, v: Var) -> Result<Var> {
        let qp = self.q.apply(g, store, q)?;
        let kp = self.k.apply(g, store, k)?;
        let vp = self.v.apply(g, store, v)?;
        self.attend(g, store, qp, kp, vp, None)
    }
}

/// Row indices (into the frame matrix) of one chunk.
#[derive(Clone, Debug, PartialEq)]
pub struct ChunkSpec {
    pub rows: Vec<usize>,
    pub place_id: Option<usize>,
}

/// A memory bound into a graph: the frame matrix, its chunking, and the
/// chunk keys `mean(C_j) + e_place_j`. Without chunks reads are flat.
#[derive(Clone, Debug)]
pub struct MemoryInput {
    pub frames: Option<Var>,
    pub frame_places: Vec<usize>,
    pub chunks: Vec<ChunkSpec>,
    pub chunk_keys: Option<Var>,
}

impl MemoryInput {
    pub fn empty() -> Self {
        Self {
            frames: None,
            frame_places: Vec::new(),
            chunks: Vec::new(),
            chunk_keys: None,
        }
    }

    /// `frames` is `[n × dim]`; `place_embeds`, when given, is one row per chunk.
    pub fn new<T: Scalar>(
        g: &mut Graph<T>,
        frames: Var,
        frame_places: Vec<usize>,
        chunks: Vec<ChunkSpec>,
        place_embeds: Option<Var>,
    ) -> Result<Self> {
        let n = g.shape(frames)[0];
        if frame_places.len() != n {
            return Err(ModelError::Config(format!(
                "{} frame places for {n} frames",
                frame_places.len()
            )));
        }
        let chunk_keys = if chunks.is_empty() {
            None
        } else {
            let mut avg = vec![T::zero(); chunks.len() * n];
            for (j, c) in chunks.iter().enumerate() {
                if c.rows.is_empty() {
                    return Err(ModelError::Config(format!("chunk {j} is empty")));
                }
                let w = T::of(1.0 / c.rows.len() as f64);
                for &r in &c.rows {
                    if r >= n {
                        return Err(TensorError::IndexOutOfRange {
                            op: "chunk rows",
                            index: r,
                            extent: n,
                        }
                        .into());
                    }
                    avg[j * n + r] = avg[j * n + r] + w;
                }
            }
            let a = g.constant(Tensor::new(&[chunks.len(), n], avg)?);
            let reps = g.matmul(a, frames)?;
            Some(match place_embeds {
                Some(p) => g.add(reps, p)?,
                None => reps,
            })
        };
        Ok(Self {
            frames: Some(frames),
            frame_places,
            chunks,
            chunk_keys,
        })
    }

    pub fn len(&self) -> usize {
        self.frame_places.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frame_places.is_empty()
    }
}

/// Attention bookkeeping for one layer's memory read.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerTrace {
    pub layer: usize,
    /// Per chunk (or per frame for flat reads).
    pub chunk_places: Vec<Option<usize>>,
    pub chunk_sizes: Vec<usize>,
    /// Per query token, a distribution over chunks.
    pub relevance: Vec<Vec<f64>>,
    /// Per query token, selected chunk indices.
    pub selected: Vec<Vec<usize>>,
    /// Per query token and selected chunk, head-averaged weights over its frames.
    pub within: Vec<Vec<Vec<f64>>>,
    /// Keys scored per query token (chunk keys plus frames).
    pub attended_keys: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AttentionTrace {
    pub layers: Vec<LayerTrace>,
}

impl AttentionTrace {
    pub const CSV_HEADER: &'static str = "layer,query,chunk,place_id,relevance";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for l in &self.layers {
            for (q, row) in l.relevance.iter().enumerate() {
                for (c, r) in row.iter().enumerate() {
                    let place = l.chunk_places[c].map(|p| p.to_string()).unwrap_or_default();
                    let _ = writeln!(out, "{},{},{},{},{}", l.layer, q, c, place, r);
                }
            }
        }
        out
    }

    /// Relevance mass on chunks of `place`, averaged over layers and query tokens.
    pub fn place_mass(&self, place: usize) -> f64 {
        let mut total = 0.0;
        let mut rows = 0usize;
        for l in &self.layers {
            for row in &l.relevance {
                total += row
                    .iter()
                    .zip(&l.chunk_places)
                    .filter(|(_, p)| **p == Some(place))
                    .map(|(r, _)| r)
                    .sum::<f64>();
                rows += 1;
            }
        }
        if rows == 0 {
            0.0
        } else {
            total / rows as f64
        }
    }
}

/// Indices of the `k` largest entries; ties go to the lower index.
pub fn top_k_indices(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.truncate(k.min(row.len()));
    idx.sort_unstable();
    idx
}

#[derive(Clone, Debug)]
pub struct MemoryLayer {
    pub la_norm: Norm,
    pub la: Mha,
    pub read_norm: Norm,
    /// `None` when tied to the read's own query/key projections.
    pub relevance: Option<(Linear, Linear)>,
    pub read: Mha,
    pub mlp_norm: Norm,
    pub mlp_in: Linear,
    pub mlp_out: Linear,
}

impl MemoryLayer {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &SatConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let relevance = if cfg.tie_relevance {
            None
        } else {
            Some((
                Linear::new(store, &format!("{name}.rel.q"), cfg.dim, cfg.dim, rng)?,
                Linear::unbiased(store, &format!("{name}.rel.k"), cfg.dim, cfg.dim, rng)?,
            ))
        };
        Ok(Self {
            la_norm: Norm::new(store, &format!("{name}.la.norm"), cfg.dim)?,
            la: Mha::new(store, &format!("{name}.la"), cfg.dim, cfg.heads, cfg.head_dim, rng)?,
            read_norm: Norm::new(store, &format!("{name}.read.norm"), cfg.dim)?,
            relevance,
            read: Mha::new(store, &format!("{name}.read"), cfg.dim, cfg.heads, cfg.head_dim, rng)?,
            mlp_norm: Norm::new(store, &format!("{name}.mlp.norm"), cfg.dim)?,
            mlp_in: Linear::new(store, &format!("{name}.mlp.in"), cfg.dim, cfg.mlp_hidden, rng)?,
            mlp_out: Linear::new(store, &format!("{name}.mlp.out"), cfg.mlp_hidden, cfg.dim, rng)?,
        })
    }

    /// `R = softmax(Linear(q) · Linear(K)ᵀ / √dim)` over every chunk, `[nq × nc]`.
    pub fn chunk_relevance<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        q: Var,
        mem: &MemoryInput,
    ) -> Result<Var> {
        let keys = mem.chunk_keys.ok_or(ModelError::EmptyMemory)?;
        let (lq, lk) = match &self.relevance {
            Some((a, b)) => (a, b),
            None => (&self.read.q, &self.read.k),
        };
        let rq = lq.apply(g, store, q)?;
        let rk = lk.apply(g, store, keys)?;
        let width = g.shape(rq)[1];
        let s = g.matmul_nt(rq, rk)?;
        let s = g.scale(s, T::of(1.0 / (width as f64).sqrt()));
        Ok(g.softmax(s, 1)?)
    }

    /// `q* = Σ_{top-k} R_j · MHA(q, C_j, C_j)` per query token.
    pub fn hcam_read<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        q: Var,
        mem: &MemoryInput,
        top_k: usize,
        mut trace: Option<&mut LayerTrace>,
    ) -> Result<Var> {
        let frames = mem.frames.ok_or(ModelError::EmptyMemory)?;
        let r = self.chunk_relevance(g, store, q, mem)?;
        let nq = g.shape(q)[0];
        let nc = mem.chunks.len();
        let rv = g.value(r).to_f64_vec();
        let selections: Vec<Vec<usize>> = rv.chunks(nc).map(|row| top_k_indices(row, top_k)).collect();
        for sel in &selections {
            for &j in sel {
                g.mark_branch(j as u64);
            }
        }

        // Projecting everything once is cheaper when most frames get read anyway.
        let mut selected_rows: Vec<bool> = vec![false; mem.len()];
        for sel in &selections {
            for &j in sel {
                for &row in &mem.chunks[j].rows {
                    selected_rows[row] = true;
                }
            }
        }
        let touched = selected_rows.iter().filter(|&&b| b).count();
        let projected_all = if 2 * touched >= mem.len() {
            Some((
                self.read.k.apply(g, store, frames)?,
                self.read.v.apply(g, store, frames)?,
            ))
        } else {
            None
        };

        let qp_all = self.read.q.apply(g, store, q)?;
        let mut kv_cache: HashMap<usize, (Var, Var)> = HashMap::new();
        let mut rows_out = Vec::with_capacity(nq);
        for (t, sel) in selections.iter().enumerate() {
            let qp = if nq == 1 { qp_all } else { g.gather_rows(qp_all, &[t])? };
            let mut within = Vec::with_capacity(sel.len());
            let mut acc: Option<Var> = None;
            for &j in sel {
                let (kp, vp) = match kv_cache.get(&j) {
                    Some(&kv) => kv,
                    None => {
                        let rows = &mem.chunks[j].rows;
                        let kv = match projected_all {
                            Some((ka, va)) => (g.gather_rows(ka, rows)?, g.gather_rows(va, rows)?),
                            None => {
                                let c = g.gather_rows(frames, rows)?;
                                (self.read.k.apply(g, store, c)?, self.read.v.apply(g, store, c)?)
                            }
                        };
                        kv_cache.insert(j, kv);
                        kv
                    }
                };
                let mut w = Vec::new();
                let o = self.read.attend(g, store, qp, kp, vp, trace.is_some().then_some(&mut w))?;
                within.extend(w);
                let weighted = g.scale_by(o, r, t * nc + j)?;
                acc = Some(match acc {
                    Some(a) => g.add(a, weighted)?,
                    None => weighted,
                });
            }
            rows_out.push(acc.expect("top_k >= 1 and at least one chunk"));
            if let Some(tr) = trace.as_deref_mut() {
                tr.within.push(within);
                tr.attended_keys
                    .push(nc + sel.iter().map(|&j| mem.chunks[j].rows.len()).sum::<usize>());
            }
        }
        if let Some(tr) = trace {
            tr.chunk_places = mem.chunks.iter().map(|c| c.place_id).collect();
            tr.chunk_sizes = mem.chunks.iter().map(|c| c.rows.len()).collect();
            tr.relevance = rv.chunks(nc).map(<[f64]>::to_vec).collect();
            tr.selected = selections;
        }
        if rows_out.len() == 1 {
            Ok(rows_out[0])
        } else {
            Ok(g.concat(&rows_out, 0)?)
        }
    }

    /// Plain multi-head attention over every stored frame.
    pub fn flat_read<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        q: Var,
        mem: &MemoryInput,
        trace: Option<&mut LayerTrace>,
    ) -> Result<Var> {
        let frames = mem.frames.ok_or(ModelError::EmptyMemory)?;
        let qp = self.read.q.apply(g, store, q)?;
        let kp = self.read.k.apply(g, store, frames)?;
        let vp = self.read.v.apply(g, store, frames)?;
        let mut w = Vec::new();
        let out = self.read.attend(g, store, qp, kp, vp, trace.is_some().then_some(&mut w))?;
        if let Some(tr) = trace {
            let n = mem.len();
            tr.chunk_places = mem.frame_places.iter().map(|&p| Some(p)).collect();
            tr.chunk_sizes = vec![1; n];
            tr.selected = w.iter().map(|_| (0..n).collect()).collect();
            tr.attended_keys = vec![n; w.len()];
            tr.within = w.iter().map(|row| vec![row.clone()]).collect();
            tr.relevance = w;
        }
        Ok(out)
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        mem: &MemoryInput,
        cfg: &SatConfig,
        trace: Option<&mut LayerTrace>,
    ) -> Result<Var> {
        let h = self.la_norm.apply(g, store, x)?;
        let la = self.la.forward(g, store, h, h, h)?;
        let mut x = g.add(x, la)?;

        if !mem.is_empty() {
            let h = self.read_norm.apply(g, store, x)?;
            let read = if mem.chunks.is_empty() {
                self.flat_read(g, store, h, mem, trace)?
            } else {
                self.hcam_read(g, store, h, mem, cfg.top_k, trace)?
            };
            x = g.add(x, read)?;
        }

        let h = self.mlp_norm.apply(g, store, x)?;
        let h = self.mlp_in.apply(g, store, h)?;
        let h = g.relu(h);
        let h = self.mlp_out.apply(g, store, h)?;
        Ok(g.add(x, h)?)
    }
}

/// Vocabulary sizes of the symbolic observations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Vocab {
    pub dancers: usize,
    pub dances: usize,
    pub dance_len: usize,
}

#[derive(Clone, Debug)]
pub struct SatModel<T> {
    pub config: SatConfig,
    pub embedder: FrameEmbedder<T>,
    pub layers: Vec<MemoryLayer>,
    pub final_norm: Norm,
    pub head: Linear,
}

impl<T: Scalar> SatModel<T> {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        config: SatConfig,
        embed: EmbeddingConfig,
        vocab: Vocab,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        if embed.dim != config.dim {
            return Err(ModelError::Config(format!(
                "embedding dim {} differs from model dim {}",
                embed.dim, config.dim
            )));
        }
        let embedder = FrameEmbedder::new(store, embed, vocab.dancers, vocab.dances, vocab.dance_len, rng)?;
        let layers = (0..config.num_layers)
            .map(|i| MemoryLayer::new(store, &format!("layer{i}"), &config, rng))
            .collect::<Result<Vec<_>>>()?;
        let final_norm = Norm::new(store, "final.norm", config.dim)?;
        let head = Linear::new(store, "head", config.dim, config.num_classes, rng)?;
        Ok(Self {
            config,
            embedder,
            layers,
            final_norm,
            head,
        })
    }

    /// The same model over another scalar type; parameter ids carry over
    /// to a cast of the store.
    pub fn recast<U: Scalar>(&self) -> SatModel<U> {
        SatModel {
            config: self.config.clone(),
            embedder: self.embedder.recast(),
            layers: self.layers.clone(),
            final_norm: self.final_norm.clone(),
            head: self.head.clone(),
        }
    }

    /// Logits `[1 × classes]` read off the first query token.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        queries: Var,
        mem: &MemoryInput,
        mut trace: Option<&mut AttentionTrace>,
    ) -> Result<Var> {
        let mut x = queries;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut lt = LayerTrace {
                layer: i,
                ..LayerTrace::default()
            };
            x = layer.forward(g, store, x, mem, &self.config, trace.is_some().then_some(&mut lt))?;
            if let Some(tr) = trace.as_deref_mut() {
                tr.layers.push(lt);
            }
        }
        let h = self.final_norm.apply(g, store, x)?;
        let first = if g.shape(h)[0] == 1 { h } else { g.gather_rows(h, &[0])? };
        self.head.apply(g, store, first)
    }

    /// Embeds the stored frames and chunks them per the configured read mode.
    pub fn memory_input(&self, g: &mut Graph<T>, store: &ParamStore<T>, memory: &EpisodicMemory) -> Result<MemoryInput> {
        self.memory_input_with(g, store, memory, self.config.read_mode)
    }

    pub fn memory_input_with(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        memory: &EpisodicMemory,
        mode: ReadMode,
    ) -> Result<MemoryInput> {
        let frames = memory.frames();
        if frames.is_empty() {
            return Ok(MemoryInput::empty());
        }
        let symbols: Vec<ObservationSymbol> = frames
            .iter()
            .map(|f| ObservationSymbol::frame(f.meta.dancer, f.meta.dance, f.meta.phase))
            .collect();
        let times: Vec<usize> = frames.iter().map(|f| f.time_index).collect();
        let places: Vec<usize> = frames.iter().map(|f| f.place_id).collect();
        let x = self.embedder.frames(g, store, &symbols, &times, &places)?;

        let cs = self.config.chunk_size;
        let (chunks, place_embeds) = match mode {
            ReadMode::Flat => (Vec::new(), None),
            ReadMode::TimeHier => (chunk_specs(&memory.flat_chunk_view(cs), &times), None),
            ReadMode::PlaceHier => {
                let specs = chunk_specs(&memory.place_chunk_view(cs), &times);
                let chunk_places: Vec<usize> = specs.iter().map(|c| c.place_id.expect("place chunks are pure")).collect();
                let pe = self.embedder.place_embeddings(g, store, &chunk_places)?;
                (specs, pe)
            }
        };
        MemoryInput::new(g, x, places, chunks, place_embeds)
    }

    /// Logits for one episode: stored memory plus query symbols.
    pub fn episode_logits(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        memory: &EpisodicMemory,
        query: &[ObservationSymbol],
        query_time: usize,
        mode: ReadMode,
        trace: Option<&mut AttentionTrace>,
    ) -> Result<Var> {
        let mem = self.memory_input_with(g, store, memory, mode)?;
        let q = self.embedder.queries(g, store, query, query_time)?;
        self.forward(g, store, q, &mem, trace)
    }
}

fn chunk_specs(chunks: &[Chunk<'_>], times: &[usize]) -> Vec<ChunkSpec> {
    chunks
        .iter()
        .map(|c| ChunkSpec {
            rows: c
                .frames
                .iter()
                .map(|f: &&ExperienceFrame| times.binary_search(&f.time_index).expect("chunk frames are stored"))
                .collect(),
            place_id: c.place_id,
        })
        .collect()
}

/// Keys scored per query token by each read mode, given chunk sizes.
pub fn attended_key_count(mode: ReadMode, chunk_sizes: &[usize], top_k: usize) -> usize {
    let n: usize = chunk_sizes.iter().sum();
    match mode {
        ReadMode::Flat => n,
        ReadMode::TimeHier | ReadMode::PlaceHier => {
            let mut sizes = chunk_sizes.to_vec();
            sizes.sort_unstable_by(|a, b| b.cmp(a));
            chunk_sizes.len() + sizes.iter().take(top_k).sum::<usize>()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(g: &mut Graph<f64>, rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Var {
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        g.constant(Tensor::new(&[rows, cols], data).unwrap())
    }

    #[test]
    fn single_key_attention_returns_projected_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let mha = Mha::new(&mut store, "m", 4, 2, 2, &mut rng).unwrap();
        let mut g = Graph::new();
        let kv = random_matrix(&mut g, &mut rng, 1, 4);
        let q1 = random_matrix(&mut g, &mut rng, 1, 4);
        let q2 = random_matrix(&mut g, &mut rng, 1, 4);
        let a = mha.forward(&mut g, &store, q1, kv, kv).unwrap();
        let b = mha.forward(&mut g, &store, q2, kv, kv).unwrap();
        let vp = mha.v.apply(&mut g, &store, kv).unwrap();
        let expected = mha.o.apply(&mut g, &store, vp).unwrap();
        for ((x, y), z) in g.value(a).data().iter().zip(g.value(b).data()).zip(g.value(expected).data()) {
            assert!((x - y).abs() < 1e-12 && (x - z).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_keys_give_uniform_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let mha = Mha::new(&mut store, "m", 4, 1, 4, &mut rng).unwrap();
        let mut g = Graph::new();
        let row = random_matrix(&mut g, &mut rng, 1, 4);
        let k = g.concat(&[row, row, row], 0).unwrap();
        let q = random_matrix(&mut g, &mut rng, 1, 4);
        let qp = mha.q.apply(&mut g, &store, q).unwrap();
        let kp = mha.k.apply(&mut g, &store, k).unwrap();
        let vp = mha.v.apply(&mut g, &store, k).unwrap();
        let mut w = Vec::new();
        mha.attend(&mut g, &store, qp, kp, vp, Some(&mut w)).unwrap();
        for x in &w[0] {
            assert!((x - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    fn layer_and_store(cfg: &SatConfig, seed: u64) -> (MemoryLayer, ParamStore<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::<f64>::new();
        let layer = MemoryLayer::new(&mut store, "l", cfg, &mut rng).unwrap();
        (layer, store)
    }

    #[test]
    fn relevance_cases() {
        let cfg = SatConfig {
            dim: 4,
            heads: 1,
            head_dim: 4,
            ..SatConfig::default()
        };
        let (layer, store) = layer_and_store(&cfg, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut g = Graph::new();
        let q = random_matrix(&mut g, &mut rng, 1, 4);

        let x = random_matrix(&mut g, &mut rng, 3, 4);
        let one = MemoryInput::new(&mut g, x, vec![0; 3], vec![ChunkSpec { rows: vec![0, 1, 2], place_id: Some(0) }], None).unwrap();
        let r = layer.chunk_relevance(&mut g, &store, q, &one).unwrap();
        assert_eq!(g.value(r).data(), &[1.0]);

        let row = random_matrix(&mut g, &mut rng, 1, 4);
        let x = g.concat(&[row, row], 0).unwrap();
        let chunks = vec![
            ChunkSpec { rows: vec![0], place_id: Some(0) },
            ChunkSpec { rows: vec![1], place_id: Some(1) },
        ];
        let two = MemoryInput::new(&mut g, x, vec![0, 1], chunks, None).unwrap();
        let r = layer.chunk_relevance(&mut g, &store, q, &two).unwrap();
        for v in g.value(r).data() {
            assert!((v - 0.5).abs() < 1e-12);
        }

        assert_eq!(
            layer.chunk_relevance(&mut g, &store, q, &MemoryInput::empty()).unwrap_err(),
            ModelError::EmptyMemory
        );
    }

    #[test]
    fn single_chunk_read_is_plain_attention() {
        let cfg = SatConfig {
            dim: 4,
            heads: 2,
            head_dim: 2,
            top_k: 1,
            ..SatConfig::default()
        };
        let (layer, store) = layer_and_store(&cfg, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut g = Graph::new();
        let q = random_matrix(&mut g, &mut rng, 1, 4);
        let x = random_matrix(&mut g, &mut rng, 5, 4);
        let mem = MemoryInput::new(&mut g, x, vec![0; 5], vec![ChunkSpec { rows: (0..5).collect(), place_id: Some(0) }], None).unwrap();
        let mut tr = LayerTrace::default();
        let h = layer.hcam_read(&mut g, &store, q, &mem, 1, Some(&mut tr)).unwrap();
        let f = layer.flat_read(&mut g, &store, q, &mem, None).unwrap();
        for (a, b) in g.value(h).data().iter().zip(g.value(f).data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(tr.attended_keys, vec![6]);
        let s: f64 = tr.within[0][0].iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn top_k_breaks_ties_low() {
        assert_eq!(top_k_indices(&[0.2, 0.4, 0.4, 0.1], 2), vec![1, 2]);
        assert_eq!(top_k_indices(&[0.25; 4], 3), vec![0, 1, 2]);
        assert_eq!(top_k_indices(&[0.5, 0.5], 5), vec![0, 1]);
    }

    #[test]
    fn key_counts() {
        let sizes = vec![32; 32];
        assert_eq!(attended_key_count(ReadMode::Flat, &sizes, 4), 1024);
        assert_eq!(attended_key_count(ReadMode::PlaceHier, &sizes, 4), 32 + 128);
    }

    #[test]
    fn tied_relevance_needs_square_inner_width() {
        let cfg = SatConfig {
            dim: 8,
            heads: 2,
            head_dim: 2,
            tie_relevance: true,
            ..SatConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
