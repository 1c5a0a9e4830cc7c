//! Capacity-bounded episodic store.
//!
//! Frames can be kept in one flat time-ordered list or grouped per place.
//! Either way the store is chunked for hierarchical reads: per-place chunks
//! are pure (one place each) while flat chunks are consecutive time windows
//! and may mix places.

use std::collections::{BTreeMap, VecDeque};
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MemoryError {
    #[error("evict called on an empty memory")]
    Empty,
    #[error("time index {0} is already stored")]
    DuplicateTime(usize),
    #[error("frame embedding has dimension {got}, memory holds {expected}")]
    EmbeddingDim { expected: usize, got: usize },
    #[error("invalid memory configuration: {0}")]
    Config(String),
    #[error("trace line {line}: {message}")]
    Trace { line: usize, message: String },
    #[error("clustering: {0}")]
    Cluster(String),
}

pub type Result<T, E = MemoryError> = std::result::Result<T, E>;

/// Which frame leaves when the store is full.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EvictionStrategy {
    /// Globally oldest frame.
    Fifo,
    /// Globally newest frame.
    Lifo,
    /// Oldest frame of the most visited place.
    Mvfo,
    /// Oldest frame of the least visited place.
    Lvfo,
}

impl EvictionStrategy {
    pub const ALL: [EvictionStrategy; 4] = [
        EvictionStrategy::Fifo,
        EvictionStrategy::Lifo,
        EvictionStrategy::Mvfo,
        EvictionStrategy::Lvfo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EvictionStrategy::Fifo => "fifo",
            EvictionStrategy::Lifo => "lifo",
            EvictionStrategy::Mvfo => "mvfo",
            EvictionStrategy::Lvfo => "lvfo",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|st| st.name() == s.to_ascii_lowercase())
    }
}

impl std::str::FromStr for EvictionStrategy {
    type Err = MemoryError;

    fn from_str(s: &str) -> Result<Self> {
        Self::parse(s).ok_or_else(|| MemoryError::Config(format!("unknown strategy `{s}`")))
    }
}

impl std::fmt::Display for EvictionStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    Flat,
    Place,
}

/// What "most frequently visited" counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VisitMetric {
    /// Number of entry events (place changes between consecutive writes).
    Entries,
    /// Number of frames ever written at the place.
    Occupancy,
}

/// Ground-truth content of a frame, used by label oracles and assertions.
/// Never part of any embedding.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct FrameMeta {
    pub dancer: usize,
    pub dance: usize,
    pub phase: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperienceFrame {
    /// May be empty when the caller embeds frames elsewhere.
    pub embedding: Vec<f32>,
    pub time_index: usize,
    pub place_id: usize,
    pub meta: FrameMeta,
}

impl ExperienceFrame {
    pub fn bare(time_index: usize, place_id: usize, meta: FrameMeta) -> Self {
        Self {
            embedding: Vec::new(),
            time_index,
            place_id,
            meta,
        }
    }
}

/// A read-only chunk: frames in increasing time order and their mean.
#[derive(Clone, Debug, PartialEq)]
pub struct Chunk<'a> {
    /// `Some` when every frame shares one place.
    pub place_id: Option<usize>,
    pub frames: Vec<&'a ExperienceFrame>,
    pub representative: Vec<f32>,
}

impl<'a> Chunk<'a> {
    fn from_frames(frames: Vec<&'a ExperienceFrame>) -> Self {
        let first = frames[0].place_id;
        let place_id = frames.iter().all(|f| f.place_id == first).then_some(first);
        let dim = frames[0].embedding.len();
        let mut representative = vec![0.0f32; dim];
        for f in &frames {
            for (r, &e) in representative.iter_mut().zip(&f.embedding) {
                *r += e;
            }
        }
        let n = frames.len() as f32;
        representative.iter_mut().for_each(|r| *r /= n);
        Self {
            place_id,
            frames,
            representative,
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn time_indices(&self) -> Vec<usize> {
        self.frames.iter().map(|f| f.time_index).collect()
    }
}

/// Per-place sub-memory.
#[derive(Clone, Debug, PartialEq)]
pub struct PlaceMemory {
    pub place_id: usize,
    frames: VecDeque<ExperienceFrame>,
}

impl PlaceMemory {
    fn new(place_id: usize) -> Self {
        Self {
            place_id,
            frames: VecDeque::new(),
        }
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    pub fn frames(&self) -> impl Iterator<Item = &ExperienceFrame> {
        self.frames.iter()
    }

    /// Consecutive windows of `chunk_size` from the oldest frame, so only
    /// the newest chunk can be partially filled.
    pub fn chunks(&self, chunk_size: usize) -> Vec<Chunk<'_>> {
        let all: Vec<&ExperienceFrame> = self.frames.iter().collect();
        all.chunks(chunk_size.max(1))
            .map(|c| Chunk::from_frames(c.to_vec()))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct VisitStats {
    pub entries: usize,
    pub occupancy: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryConfig {
    pub layout: Layout,
    /// Total frame capacity `L`; `None` is unbounded.
    pub capacity: Option<usize>,
    /// Per-place cap `L_p` (place layout only); `None` leaves it unenforced.
    pub place_cap: Option<usize>,
    pub chunk_size: usize,
    pub visit_metric: VisitMetric,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        Self {
            layout: Layout::Flat,
            capacity: None,
            place_cap: None,
            chunk_size: 32,
            visit_metric: VisitMetric::Entries,
        }
    }
}

impl MemoryConfig {
    /// `L / K`, the default per-place share of the capacity.
    pub fn default_place_cap(capacity: usize, places: usize) -> usize {
        (capacity / places.max(1)).max(1)
    }

    fn validate(&self) -> Result<()> {
        if self.chunk_size == 0 {
            return Err(MemoryError::Config("chunk_size must be at least 1".into()));
        }
        if self.capacity == Some(0) || self.place_cap == Some(0) {
            return Err(MemoryError::Config("capacities must be at least 1".into()));
        }
        Ok(())
    }
}

/// The episodic store `M_t`.
#[derive(Clone, Debug)]
pub struct EpisodicMemory {
    config: MemoryConfig,
    strategy: EvictionStrategy,
    flat: VecDeque<ExperienceFrame>,
    places: BTreeMap<usize, PlaceMemory>,
    stored: BTreeMap<usize, usize>,
    stats: BTreeMap<usize, VisitStats>,
    last_place: Option<usize>,
    dim: Option<usize>,
    len: usize,
}

impl EpisodicMemory {
    pub fn new(config: MemoryConfig, strategy: EvictionStrategy) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            strategy,
            flat: VecDeque::new(),
            places: BTreeMap::new(),
            stored: BTreeMap::new(),
            stats: BTreeMap::new(),
            last_place: None,
            dim: None,
            len: 0,
        })
    }

    pub fn config(&self) -> &MemoryConfig {
        &self.config
    }

    pub fn strategy(&self) -> EvictionStrategy {
        self.strategy
    }

    pub fn set_strategy(&mut self, strategy: EvictionStrategy) {
        self.strategy = strategy;
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn visit_stats(&self, place: usize) -> VisitStats {
        self.stats.get(&place).copied().unwrap_or_default()
    }

    /// Frames currently stored at `place`.
    pub fn place_frame_count(&self, place: usize) -> usize {
        self.stored.get(&place).copied().unwrap_or(0)
    }

    pub fn place_memories(&self) -> impl Iterator<Item = &PlaceMemory> {
        self.places.values()
    }

    /// All stored frames in increasing time order.
    pub fn frames(&self) -> Vec<&ExperienceFrame> {
        match self.config.layout {
            Layout::Flat => self.flat.iter().collect(),
            Layout::Place => {
                let mut all: Vec<&ExperienceFrame> = self.places.values().flat_map(|p| p.frames.iter()).collect();
                all.sort_by_key(|f| f.time_index);
                all
            }
        }
    }

    pub fn time_indices(&self) -> Vec<usize> {
        self.frames().iter().map(|f| f.time_index).collect()
    }

    fn contains_time(&self, t: usize) -> bool {
        match self.config.layout {
            Layout::Flat => self.flat.binary_search_by_key(&t, |f| f.time_index).is_ok(),
            Layout::Place => self
                .places
                .values()
                .any(|p| p.frames.binary_search_by_key(&t, |f| f.time_index).is_ok()),
        }
    }

    /// `M_{t+1} = Write(M_t, x_t)` under the current strategy.
    pub fn write(&mut self, frame: ExperienceFrame) -> Result<()> {
        match self.dim {
            Some(d) if d != frame.embedding.len() => {
                return Err(MemoryError::EmbeddingDim {
                    expected: d,
                    got: frame.embedding.len(),
                })
            }
            None => self.dim = Some(frame.embedding.len()),
            _ => {}
        }
        if self.contains_time(frame.time_index) {
            return Err(MemoryError::DuplicateTime(frame.time_index));
        }
        let place = frame.place_id;
        let stats = self.stats.entry(place).or_default();
        if self.last_place != Some(place) {
            stats.entries += 1;
        }
        stats.occupancy += 1;
        self.last_place = Some(place);

        if self.config.layout == Layout::Place {
            if let Some(cap) = self.config.place_cap {
                if self.place_frame_count(place) >= cap {
                    self.remove_oldest_of(place);
                }
            }
        }
        if let Some(cap) = self.config.capacity {
            if self.len >= cap {
                self.evict(self.strategy)?;
            }
        }
        self.insert(frame);
        Ok(())
    }

    fn insert(&mut self, frame: ExperienceFrame) {
        *self.stored.entry(frame.place_id).or_default() += 1;
        self.len += 1;
        let deque = match self.config.layout {
            Layout::Flat => &mut self.flat,
            Layout::Place => {
                &mut self
                    .places
                    .entry(frame.place_id)
                    .or_insert_with(|| PlaceMemory::new(frame.place_id))
                    .frames
            }
        };
        let pos = deque.partition_point(|f| f.time_index < frame.time_index);
        deque.insert(pos, frame);
    }

    fn note_removed(&mut self, frame: &ExperienceFrame) {
        self.len -= 1;
        if let Some(c) = self.stored.get_mut(&frame.place_id) {
            *c -= 1;
            if *c == 0 {
                self.stored.remove(&frame.place_id);
            }
        }
        if let Some(p) = self.places.get(&frame.place_id) {
            if p.frames.is_empty() {
                self.places.remove(&frame.place_id);
            }
        }
    }

    fn remove_oldest_of(&mut self, place: usize) -> Option<ExperienceFrame> {
        let removed = match self.config.layout {
            Layout::Flat => {
                let idx = self.flat.iter().position(|f| f.place_id == place)?;
                self.flat.remove(idx)
            }
            Layout::Place => self.places.get_mut(&place)?.frames.pop_front(),
        }?;
        self.note_removed(&removed);
        Some(removed)
    }

    fn remove_by_time(&mut self, newest: bool) -> Option<ExperienceFrame> {
        let removed = match self.config.layout {
            Layout::Flat => {
                if newest {
                    self.flat.pop_back()
                } else {
                    self.flat.pop_front()
                }
            }
            Layout::Place => {
                let ends = self.places.values().filter_map(|p| {
                    let f = if newest { p.frames.back() } else { p.frames.front() };
                    f.map(|f| (f.time_index, p.place_id))
                });
                let (_, place) = if newest { ends.max() } else { ends.min() }?;
                let pm = self.places.get_mut(&place)?;
                if newest {
                    pm.frames.pop_back()
                } else {
                    pm.frames.pop_front()
                }
            }
        }?;
        self.note_removed(&removed);
        Some(removed)
    }

    fn visit_key(&self, place: usize) -> usize {
        let s = self.visit_stats(place);
        match self.config.visit_metric {
            VisitMetric::Entries => s.entries,
            VisitMetric::Occupancy => s.occupancy,
        }
    }

    /// The place MVFO (`most = true`) or LVFO evicts from. Ties prefer the
    /// place holding more frames, then the lower place id.
    pub fn frequency_victim(&self, most: bool) -> Option<usize> {
        self.stored
            .iter()
            .map(|(&place, &count)| (place, self.visit_key(place), count))
            .min_by(|a, b| {
                let visits = if most { b.1.cmp(&a.1) } else { a.1.cmp(&b.1) };
                visits.then(b.2.cmp(&a.2)).then(a.0.cmp(&b.0))
            })
            .map(|(place, _, _)| place)
    }

    /// `M_{t+1} = Remove(M_t, σ)`; returns the removed frame.
    pub fn evict(&mut self, strategy: EvictionStrategy) -> Result<ExperienceFrame> {
        if self.len == 0 {
            return Err(MemoryError::Empty);
        }
        let removed = match strategy {
            EvictionStrategy::Fifo => self.remove_by_time(false),
            EvictionStrategy::Lifo => self.remove_by_time(true),
            EvictionStrategy::Mvfo | EvictionStrategy::Lvfo => {
                let place = self
                    .frequency_victim(strategy == EvictionStrategy::Mvfo)
                    .ok_or(MemoryError::Empty)?;
                self.remove_oldest_of(place)
            }
        };
        removed.ok_or(MemoryError::Empty)
    }

    /// Chunks in creation order: pure per-place chunks for the place
    /// layout, time windows for the flat layout.
    pub fn chunk_view(&self) -> Vec<Chunk<'_>> {
        match self.config.layout {
            Layout::Flat => self.flat_chunk_view(self.config.chunk_size),
            Layout::Place => self.place_chunk_view(self.config.chunk_size),
        }
    }

    /// Per-place windows of `chunk_size` counted from each place's oldest
    /// frame, ordered by their first frame. Works for either layout.
    pub fn place_chunk_view(&self, chunk_size: usize) -> Vec<Chunk<'_>> {
        let mut by_place: BTreeMap<usize, Vec<&ExperienceFrame>> = BTreeMap::new();
        for f in self.frames() {
            by_place.entry(f.place_id).or_default().push(f);
        }
        let mut chunks: Vec<Chunk<'_>> = by_place
            .values()
            .flat_map(|frames| frames.chunks(chunk_size.max(1)).map(|c| Chunk::from_frames(c.to_vec())))
            .collect();
        chunks.sort_by_key(|c| c.frames[0].time_index);
        chunks
    }

    /// Consecutive time windows of `chunk_size` over all stored frames.
    pub fn flat_chunk_view(&self, chunk_size: usize) -> Vec<Chunk<'_>> {
        self.frames()
            .chunks(chunk_size.max(1))
            .map(|c| Chunk::from_frames(c.to_vec()))
            .collect()
    }
}

/// One line of a trace dump: `time place dancer dance phase`.
pub fn write_trace<'a>(frames: impl IntoIterator<Item = &'a ExperienceFrame>) -> String {
    let mut out = String::new();
    for f in frames {
        let _ = writeln!(
            out,
            "{} {} {} {} {}",
            f.time_index, f.place_id, f.meta.dancer, f.meta.dance, f.meta.phase
        );
    }
    out
}

/// Parses a trace dump into bare frames; `#` comments and blank lines are skipped.
pub fn parse_trace(text: &str) -> Result<Vec<ExperienceFrame>> {
    let mut frames = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<usize> = line
            .split_whitespace()
            .map(|f| f.parse::<usize>())
            .collect::<Result<_, _>>()
            .map_err(|e| MemoryError::Trace {
                line: i + 1,
                message: e.to_string(),
            })?;
        let [t, p, dancer, dance, phase] = fields[..] else {
            return Err(MemoryError::Trace {
                line: i + 1,
                message: format!("expected 5 fields, got {}", fields.len()),
            });
        };
        frames.push(ExperienceFrame::bare(t, p, FrameMeta { dancer, dance, phase }));
    }
    Ok(frames)
}

/// Approximate places for raw 2-D locations.
#[derive(Clone, Debug, PartialEq)]
pub struct Clustering {
    pub assignment: Vec<usize>,
    pub centroids: Vec<(f64, f64)>,
}

fn dist2(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)
}

fn nearest(p: (f64, f64), centroids: &[(f64, f64)]) -> usize {
    let mut best = 0;
    for (k, &c) in centroids.iter().enumerate() {
        if dist2(p, c) < dist2(p, centroids[best]) {
            best = k;
        }
    }
    best
}

/// Lloyd's k-means with seeded k-means++ initialisation.
pub fn cluster_places(points: &[(f64, f64)], k: usize, seed: u64) -> Result<Clustering> {
    if k == 0 {
        return Err(MemoryError::Cluster("K must be positive".into()));
    }
    if k > points.len() {
        return Err(MemoryError::Cluster(format!("K = {k} exceeds {} points", points.len())));
    }
    let mut distinct: Vec<(f64, f64)> = Vec::new();
    for &p in points {
        if !distinct.contains(&p) {
            distinct.push(p);
        }
    }
    if distinct.len() < k {
        return Err(MemoryError::Cluster(format!(
            "K = {k} exceeds {} distinct points",
            distinct.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = vec![distinct[rng.random_range(0..distinct.len())]];
    while centroids.len() < k {
        let weights: Vec<f64> = distinct
            .iter()
            .map(|&p| centroids.iter().map(|&c| dist2(p, c)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = weights.iter().sum();
        let mut target = rng.random::<f64>() * total;
        let mut pick = weights.iter().rposition(|&w| w > 0.0).expect("fewer centroids than distinct points");
        for (i, &w) in weights.iter().enumerate() {
            if w > 0.0 && target < w {
                pick = i;
                break;
            }
            target -= w;
        }
        centroids.push(distinct[pick]);
    }

    let mut assignment: Vec<usize> = points.iter().map(|&p| nearest(p, &centroids)).collect();
    for _ in 0..100 {
        let mut sums = vec![(0.0, 0.0, 0usize); k];
        for (&p, &a) in points.iter().zip(&assignment) {
            sums[a].0 += p.0;
            sums[a].1 += p.1;
            sums[a].2 += 1;
        }
        for (c, s) in centroids.iter_mut().zip(&sums) {
            if s.2 > 0 {
                *c = (s.0 / s.2 as f64, s.1 / s.2 as f64);
            }
        }
        let next: Vec<usize> = points.iter().map(|&p| nearest(p, &centroids)).collect();
        if next == assignment {
            break;
        }
        assignment = next;
    }
    Ok(Clustering { assignment, centroids })
}
