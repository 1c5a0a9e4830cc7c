//! Time, place and observation embeddings, and their fusion into
//! experience frames.

use std::borrow::Cow;

use rand::Rng;
use thiserror::Error;

use crate::tensor::{Graph, ParamId, ParamStore, Scalar, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmbedError {
    #[error("embedding dimension must be even, got {0}")]
    OddDim(usize),
    #[error("{axis} coordinate {value} outside [0, {range})")]
    OutOfRange {
        axis: &'static str,
        value: usize,
        range: usize,
    },
    #[error("2-D spatial embeddings need positive ranges, got {x}×{y}")]
    EmptyRange { x: usize, y: usize },
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("{field} id {value} outside vocabulary of {size}")]
    Vocabulary {
        field: &'static str,
        value: usize,
        size: usize,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = EmbedError> = std::result::Result<T, E>;

/// How place/location information enters an experience frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpatialMode {
    /// No spatial embedding at all (a purely temporal transformer).
    None,
    /// Sinusoid of the row-major place index.
    Sinusoidal1d,
    /// Sum of sinusoids at `x` and `x_range + y` (disjoint index sets).
    Sinusoidal2d,
    /// Sum of rows from two learnable tables, one per axis.
    Learnable2d,
}

impl SpatialMode {
    pub fn name(self) -> &'static str {
        match self {
            SpatialMode::None => "none",
            SpatialMode::Sinusoidal1d => "sinusoidal-1d",
            SpatialMode::Sinusoidal2d => "sinusoidal-2d",
            SpatialMode::Learnable2d => "learnable-2d",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "none" => SpatialMode::None,
            "sinusoidal-1d" => SpatialMode::Sinusoidal1d,
            "sinusoidal-2d" => SpatialMode::Sinusoidal2d,
            "learnable-2d" => SpatialMode::Learnable2d,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingConfig {
    pub dim: usize,
    pub spatial: SpatialMode,
    /// Grid width; also the x range of the 2-D modes.
    pub x_range: usize,
    /// Grid height; also the y range of the 2-D modes.
    pub y_range: usize,
    pub base: f64,
    /// Give query tokens a time embedding (the step after the episode).
    pub query_context: bool,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            dim: 128,
            spatial: SpatialMode::Sinusoidal1d,
            x_range: 3,
            y_range: 3,
            base: 10_000.0,
            query_context: false,
        }
    }
}

impl EmbeddingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim % 2 != 0 || self.dim == 0 {
            return Err(EmbedError::OddDim(self.dim));
        }
        if matches!(self.spatial, SpatialMode::Sinusoidal2d | SpatialMode::Learnable2d)
            && (self.x_range == 0 || self.y_range == 0)
        {
            return Err(EmbedError::EmptyRange {
                x: self.x_range,
                y: self.y_range,
            });
        }
        Ok(())
    }

    /// Row-major place index of grid cell `(x, y)`.
    pub fn place_index(&self, x: usize, y: usize) -> usize {
        y * self.x_range + x
    }

    /// Grid cell `(x, y)` of a row-major place index.
    pub fn place_coords(&self, place: usize) -> (usize, usize) {
        (place % self.x_range, place / self.x_range)
    }
}

/// `v[2i] = sin(index / base^(2i/dim))`, `v[2i+1] = cos(...)`.
pub fn sinusoidal_embed_with_base<T: Scalar>(index: usize, dim: usize, base: f64) -> Result<Vec<T>> {
    if dim % 2 != 0 {
        return Err(EmbedError::OddDim(dim));
    }
    let mut v = Vec::with_capacity(dim);
    for i in 0..dim / 2 {
        let angle = index as f64 / base.powf(2.0 * i as f64 / dim as f64);
        v.push(T::of(angle.sin()));
        v.push(T::of(angle.cos()));
    }
    Ok(v)
}

pub fn sinusoidal_embed<T: Scalar>(index: usize, dim: usize) -> Result<Vec<T>> {
    sinusoidal_embed_with_base(index, dim, 10_000.0)
}

/// Disjoint 2-D sinusoid: `sinusoidal(x) + sinusoidal(x_range + y)`.
pub fn spatial_embed_2d<T: Scalar>(x: usize, y: usize, cfg: &EmbeddingConfig) -> Result<Vec<T>> {
    if cfg.x_range == 0 || cfg.y_range == 0 {
        return Err(EmbedError::EmptyRange {
            x: cfg.x_range,
            y: cfg.y_range,
        });
    }
    if x >= cfg.x_range {
        return Err(EmbedError::OutOfRange {
            axis: "x",
            value: x,
            range: cfg.x_range,
        });
    }
    if y >= cfg.y_range {
        return Err(EmbedError::OutOfRange {
            axis: "y",
            value: y,
            range: cfg.y_range,
        });
    }
    let ex = sinusoidal_embed_with_base::<T>(x, cfg.dim, cfg.base)?;
    let ey = sinusoidal_embed_with_base::<T>(cfg.x_range + y, cfg.dim, cfg.base)?;
    Ok(ex.iter().zip(&ey).map(|(&a, &b)| a + b).collect())
}

/// Elementwise sum of location, time and observation embeddings.
pub fn sum_embed<T: Scalar>(e_loc: &[T], e_time: &[T], e_obs: &[T]) -> Result<Vec<T>> {
    if e_loc.len() != e_time.len() {
        return Err(EmbedError::DimMismatch(e_loc.len(), e_time.len()));
    }
    if e_loc.len() != e_obs.len() {
        return Err(EmbedError::DimMismatch(e_loc.len(), e_obs.len()));
    }
    Ok(e_loc
        .iter()
        .zip(e_time)
        .zip(e_obs)
        .map(|((&a, &b), &c)| a + b + c)
        .collect())
}

/// Learnable per-axis tables: `table_x[x] + table_y[y]`.
#[derive(Clone, Debug)]
pub struct LearnableSpatial2d {
    pub table_x: ParamId,
    pub table_y: ParamId,
    x_range: usize,
    y_range: usize,
}

impl LearnableSpatial2d {
    pub const INIT_STD: f64 = 0.02;

    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: &EmbeddingConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let table_x = store.add_normal(format!("{prefix}.x"), &[cfg.x_range, cfg.dim], Self::INIT_STD, rng)?;
        let table_y = store.add_normal(format!("{prefix}.y"), &[cfg.y_range, cfg.dim], Self::INIT_STD, rng)?;
        Ok(Self {
            table_x,
            table_y,
            x_range: cfg.x_range,
            y_range: cfg.y_range,
        })
    }

    pub fn embed<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, coords: &[(usize, usize)]) -> Result<Var> {
        for &(x, y) in coords {
            if x >= self.x_range {
                return Err(EmbedError::OutOfRange {
                    axis: "x",
                    value: x,
                    range: self.x_range,
                });
            }
            if y >= self.y_range {
                return Err(EmbedError::OutOfRange {
                    axis: "y",
                    value: y,
                    range: self.y_range,
                });
            }
        }
        let tx = g.param(store, self.table_x);
        let ty = g.param(store, self.table_y);
        let xs: Vec<usize> = coords.iter().map(|c| c.0).collect();
        let ys: Vec<usize> = coords.iter().map(|c| c.1).collect();
        let ex = g.embedding_lookup(tx, &xs)?;
        let ey = g.embedding_lookup(ty, &ys)?;
        Ok(g.add(ex, ey)?)
    }
}

/// A symbolic observation: who is dancing, which dance, which frame of it.
/// Query symbols carry only the dancer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ObservationSymbol {
    pub dancer: usize,
    pub dance: Option<usize>,
    pub phase: Option<usize>,
}

impl ObservationSymbol {
    pub fn frame(dancer: usize, dance: usize, phase: usize) -> Self {
        Self {
            dancer,
            dance: Some(dance),
            phase: Some(phase),
        }
    }

    pub fn query(dancer: usize) -> Self {
        Self {
            dancer,
            dance: None,
            phase: None,
        }
    }
}

/// One-hot (dancer ‖ dance ‖ phase) followed by a learnable linear layer.
#[derive(Clone, Debug)]
pub struct ObservationEncoder {
    pub n_dancers: usize,
    pub n_dances: usize,
    pub dance_len: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ObservationEncoder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        n_dancers: usize,
        n_dances: usize,
        dance_len: usize,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let vocab = n_dancers + n_dances + dance_len;
        let weight = store.add_normal(format!("{prefix}.weight"), &[vocab, dim], 1.0, rng)?;
        let bias = store.add_zeros(format!("{prefix}.bias"), &[dim])?;
        Ok(Self {
            n_dancers,
            n_dances,
            dance_len,
            weight,
            bias,
        })
    }

    pub fn vocab(&self) -> usize {
        self.n_dancers + self.n_dances + self.dance_len
    }

    /// Positions of the hot entries in the concatenated one-hot vector.
    pub fn one_hot_indices(&self, s: &ObservationSymbol) -> Result<Vec<usize>> {
        if s.dancer >= self.n_dancers {
            return Err(EmbedError::Vocabulary {
                field: "dancer",
                value: s.dancer,
                size: self.n_dancers,
            });
        }
        let mut hot = vec![s.dancer];
        if let Some(d) = s.dance {
            if d >= self.n_dances {
                return Err(EmbedError::Vocabulary {
                    field: "dance",
                    value: d,
                    size: self.n_dances,
                });
            }
            hot.push(self.n_dancers + d);
        }
        if let Some(p) = s.phase {
            if p >= self.dance_len {
                return Err(EmbedError::Vocabulary {
                    field: "phase",
                    value: p,
                    size: self.dance_len,
                });
            }
            hot.push(self.n_dancers + self.n_dances + p);
        }
        Ok(hot)
    }

    /// Encodes a batch of symbols into a `[n × dim]` matrix.
    pub fn encode<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, symbols: &[ObservationSymbol]) -> Result<Var> {
        let lists = symbols
            .iter()
            .map(|s| self.one_hot_indices(s))
            .collect::<Result<Vec<_>>>()?;
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let proj = g.gather_sum(w, lists)?;
        Ok(g.add(proj, b)?)
    }
}

/// Precomputed sinusoid rows; indices past the table are computed on demand.
#[derive(Clone, Debug)]
pub struct SinusoidTable<T> {
    dim: usize,
    base: f64,
    rows: Vec<T>,
}

impl<T: Scalar> SinusoidTable<T> {
    pub const PRECOMPUTED: usize = 2048;

    pub fn new(dim: usize, base: f64) -> Result<Self> {
        if dim % 2 != 0 {
            return Err(EmbedError::OddDim(dim));
        }
        let mut rows = Vec::with_capacity(Self::PRECOMPUTED * dim);
        for i in 0..Self::PRECOMPUTED {
            rows.extend(sinusoidal_embed_with_base::<T>(i, dim, base)?);
        }
        Ok(Self { dim, base, rows })
    }

    pub fn get(&self, index: usize) -> Cow<'_, [T]> {
        if index < Self::PRECOMPUTED {
            Cow::Borrowed(&self.rows[index * self.dim..(index + 1) * self.dim])
        } else {
            Cow::Owned(sinusoidal_embed_with_base(index, self.dim, self.base).expect("dim checked"))
        }
    }
}

/// Everything needed to turn raw (observation, time, place) streams into
/// experience-frame matrices inside a graph.
#[derive(Clone, Debug)]
pub struct FrameEmbedder<T> {
    pub config: EmbeddingConfig,
    pub encoder: ObservationEncoder,
    pub learnable: Option<LearnableSpatial2d>,
    table: SinusoidTable<T>,
}

impl<T: Scalar> FrameEmbedder<T> {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        config: EmbeddingConfig,
        n_dancers: usize,
        n_dances: usize,
        dance_len: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let encoder = ObservationEncoder::new(store, "obs", n_dancers, n_dances, dance_len, config.dim, rng)?;
        let learnable = match config.spatial {
            SpatialMode::Learnable2d => Some(LearnableSpatial2d::new(store, "place", &config, rng)?),
            _ => None,
        };
        let table = SinusoidTable::new(config.dim, config.base)?;
        Ok(Self {
            config,
            encoder,
            learnable,
            table,
        })
    }

    /// The same embedder over another scalar type (parameter ids are shared).
    pub fn recast<U: Scalar>(&self) -> FrameEmbedder<U> {
        FrameEmbedder {
            config: self.config.clone(),
            encoder: self.encoder.clone(),
            learnable: self.learnable.clone(),
            table: SinusoidTable::new(self.config.dim, self.config.base).expect("validated at construction"),
        }
    }

    fn fixed_place_row(&self, place: usize) -> Result<Vec<T>> {
        let cfg = &self.config;
        match cfg.spatial {
            SpatialMode::Sinusoidal1d => Ok(self.table.get(place).to_vec()),
            SpatialMode::Sinusoidal2d => {
                let (x, y) = cfg.place_coords(place);
                if y >= cfg.y_range {
                    return Err(EmbedError::OutOfRange {
                        axis: "y",
                        value: y,
                        range: cfg.y_range,
                    });
                }
                let ex = self.table.get(x).to_vec();
                let ey = self.table.get(cfg.x_range + y);
                Ok(ex.iter().zip(ey.iter()).map(|(&a, &b)| a + b).collect())
            }
            SpatialMode::None | SpatialMode::Learnable2d => Ok(vec![T::zero(); cfg.dim]),
        }
    }

    /// Place embeddings for a list of place ids, `[n × dim]`, or `None`
    /// when the configuration carries no spatial information.
    pub fn place_embeddings(&self, g: &mut Graph<T>, store: &ParamStore<T>, places: &[usize]) -> Result<Option<Var>> {
        match self.config.spatial {
            SpatialMode::None => Ok(None),
            SpatialMode::Learnable2d => {
                let coords: Vec<_> = places.iter().map(|&p| self.config.place_coords(p)).collect();
                let l = self.learnable.as_ref().expect("learnable tables exist in learnable mode");
                Ok(Some(l.embed(g, store, &coords)?))
            }
            _ => {
                let mut data = Vec::with_capacity(places.len() * self.config.dim);
                for &p in places {
                    data.extend(self.fixed_place_row(p)?);
                }
                Ok(Some(g.constant(Tensor::new(&[places.len(), self.config.dim], data)?)))
            }
        }
    }

    /// Experience frames `x_t = e_place + e_time + e_obs` as a `[n × dim]` matrix.
    pub fn frames(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        symbols: &[ObservationSymbol],
        times: &[usize],
        places: &[usize],
    ) -> Result<Var> {
        if symbols.len() != times.len() || symbols.len() != places.len() {
            return Err(EmbedError::DimMismatch(symbols.len(), times.len().min(places.len())));
        }
        let dim = self.config.dim;
        let obs = self.encoder.encode(g, store, symbols)?;
        let learnable_place = matches!(self.config.spatial, SpatialMode::Learnable2d);
        let mut fixed = Vec::with_capacity(symbols.len() * dim);
        for (&t, &p) in times.iter().zip(places) {
            let time_row = self.table.get(t).to_vec();
            let place_row = self.fixed_place_row(p)?;
            fixed.extend(time_row.iter().zip(&place_row).map(|(&a, &b)| a + b));
        }
        let fixed = g.constant(Tensor::new(&[symbols.len(), dim], fixed)?);
        let mut x = g.add(obs, fixed)?;
        if learnable_place {
            if let Some(pe) = self.place_embeddings(g, store, places)? {
                x = g.add(x, pe)?;
            }
        }
        Ok(x)
    }

    /// Query token embeddings (observation only unless `query_context`).
    pub fn queries(&self, g: &mut Graph<T>, store: &ParamStore<T>, symbols: &[ObservationSymbol], time: usize) -> Result<Var> {
        let obs = self.encoder.encode(g, store, symbols)?;
        if !self.config.query_context {
            return Ok(obs);
        }
        let row = self.table.get(time).to_vec();
        let data: Vec<T> = (0..symbols.len()).flat_map(|_| row.iter().copied()).collect();
        let t = g.constant(Tensor::new(&[symbols.len(), self.config.dim], data)?);
        Ok(g.add(obs, t)?)
    }
}
