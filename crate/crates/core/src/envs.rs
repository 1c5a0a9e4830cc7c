//! Procedural Room Ballet episodes.
//!
//! Rooms sit on a row-major grid. Each room hosts a dancer performing a
//! dance of `dance_len` frames; the agent walks between rooms and records
//! one frame per step. After the walk a dancer is queried and the model
//! must name a dance determined by the task.

use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::memory::{EpisodicMemory, EvictionStrategy, ExperienceFrame, FrameMeta, Layout, MemoryConfig, MemoryError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("invalid environment configuration: {0}")]
    Config(String),
    #[error("no valid episode after {0} attempts")]
    Exhausted(usize),
    #[error("episode dump line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Memory(#[from] MemoryError),
}

pub type Result<T, E = EnvError> = std::result::Result<T, E>;

const MAX_ATTEMPTS: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TaskKind {
    NextBallet,
    ShortStay,
    BalletFifo,
    BalletLifo,
    BalletMvfo,
    BalletLvfo,
    BalletAba,
    OppositeBallet,
}

impl TaskKind {
    pub const ALL: [TaskKind; 8] = [
        TaskKind::NextBallet,
        TaskKind::ShortStay,
        TaskKind::BalletFifo,
        TaskKind::BalletLifo,
        TaskKind::BalletMvfo,
        TaskKind::BalletLvfo,
        TaskKind::BalletAba,
        TaskKind::OppositeBallet,
    ];

    pub const STRATEGY_TASKS: [TaskKind; 4] = [
        TaskKind::BalletFifo,
        TaskKind::BalletLifo,
        TaskKind::BalletMvfo,
        TaskKind::BalletLvfo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::NextBallet => "next-ballet",
            TaskKind::ShortStay => "short-stay",
            TaskKind::BalletFifo => "ballet-fifo",
            TaskKind::BalletLifo => "ballet-lifo",
            TaskKind::BalletMvfo => "ballet-mvfo",
            TaskKind::BalletLvfo => "ballet-lvfo",
            TaskKind::BalletAba => "ballet-aba",
            TaskKind::OppositeBallet => "opposite-ballet",
        }
    }

    /// The eviction strategy a strategy task is built around.
    pub fn matched_strategy(self) -> Option<EvictionStrategy> {
        match self {
            TaskKind::BalletFifo => Some(EvictionStrategy::Fifo),
            TaskKind::BalletLifo => Some(EvictionStrategy::Lifo),
            TaskKind::BalletMvfo => Some(EvictionStrategy::Mvfo),
            TaskKind::BalletLvfo => Some(EvictionStrategy::Lvfo),
            _ => None,
        }
    }
}

impl FromStr for TaskKind {
    type Err = EnvError;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| EnvError::Config(format!("unknown task `{s}`")))
    }
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvConfig {
    pub width: usize,
    pub height: usize,
    pub n_dancers: usize,
    pub n_dances: usize,
    pub dance_len: usize,
    /// Room visits in Next Ballet.
    pub visits: usize,
    /// Steps in Short Stay: 1280 at 32-frame dances, scaled to `dance_len`.
    pub short_stay_steps: usize,
    /// Stays in the strategy tasks.
    pub stays: usize,
    /// Stays in Ballet-ABA (7 distinct rooms, then the rest in an eighth).
    pub aba_stays: usize,
    /// Upper bound on visits while covering the ring in Opposite Ballet.
    pub opposite_max_visits: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            width: 3,
            height: 3,
            n_dancers: 16,
            n_dances: 8,
            dance_len: 8,
            visits: 18,
            short_stay_steps: 320,
            stays: 16,
            aba_stays: 18,
            opposite_max_visits: 64,
        }
    }
}

impl EnvConfig {
    pub fn rooms(&self) -> usize {
        self.width * self.height
    }

    /// Accuracy of a uniform guess.
    pub fn chance(&self) -> f64 {
        1.0 / self.n_dances as f64
    }

    /// Memory capacity of the strategy tasks: half of the episode's frames.
    pub fn strategy_capacity(&self) -> usize {
        self.stays * self.dance_len / 2
    }

    /// Ballet-ABA capacity: eight rooms' worth of frames.
    pub fn aba_capacity(&self) -> usize {
        8 * self.dance_len
    }

    pub fn validate(&self, kind: TaskKind) -> Result<()> {
        let bad = |m: String| Err(EnvError::Config(m));
        if self.width == 0 || self.height == 0 || self.n_dances == 0 || self.dance_len == 0 {
            return bad("grid, dance vocabulary and dance length must be positive".into());
        }
        let ring_task = matches!(kind, TaskKind::NextBallet | TaskKind::OppositeBallet | TaskKind::BalletAba);
        if ring_task && (self.width != 3 || self.height != 3) {
            return bad(format!("{kind} needs a 3x3 grid"));
        }
        let needed = match kind {
            TaskKind::BalletFifo | TaskKind::BalletLifo | TaskKind::BalletMvfo | TaskKind::BalletLvfo => self.stays,
            _ => self.rooms(),
        };
        if self.n_dancers < needed {
            return bad(format!("{kind} needs at least {needed} dancers, have {}", self.n_dancers));
        }
        match kind {
            TaskKind::NextBallet if self.visits < 2 => bad("Next Ballet needs at least 2 visits".into()),
            TaskKind::ShortStay if self.short_stay_steps == 0 => bad("Short Stay needs steps".into()),
            TaskKind::BalletFifo | TaskKind::BalletLifo | TaskKind::BalletMvfo | TaskKind::BalletLvfo
                if self.stays < 4 || self.stays % 2 != 0 =>
            {
                bad("strategy tasks need an even number of at least 4 stays".into())
            }
            TaskKind::BalletAba if self.aba_stays < 8 => bad("Ballet-ABA needs at least 8 stays".into()),
            _ => Ok(()),
        }
    }
}

/// The clockwise perimeter of a 3x3 grid, starting top-left.
pub const RING: [usize; 8] = [0, 1, 2, 5, 8, 7, 6, 3];
pub const CENTER: usize = 4;

/// Clockwise successor of a perimeter room; `None` for the center.
pub fn ring_next(room: usize) -> Option<usize> {
    let i = RING.iter().position(|&r| r == room)?;
    Some(RING[(i + 1) % RING.len()])
}

/// Point reflection through the center of a 3x3 grid.
pub fn opposite_room(room: usize) -> usize {
    8 - room
}

/// Row-major neighbour of `room` in direction `dir` (up, down, left, right),
/// or `room` itself when a wall blocks the move.
pub fn step_room(room: usize, dir: usize, width: usize, height: usize) -> usize {
    let (x, y) = (room % width, room / width);
    match dir {
        0 if y > 0 => room - width,
        1 if y + 1 < height => room + width,
        2 if x > 0 => room - 1,
        3 if x + 1 < width => room + 1,
        _ => room,
    }
}

pub fn neighbours(room: usize, width: usize, height: usize) -> Vec<usize> {
    (0..4)
        .map(|d| step_room(room, d, width, height))
        .filter(|&r| r != room)
        .collect()
}

/// Per-room dancers (unique) and dances (independent uniform).
#[derive(Clone, Debug, PartialEq)]
pub struct BalletWorld {
    pub dancers: Vec<usize>,
    pub dances: Vec<usize>,
}

impl BalletWorld {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, rooms: usize, cfg: &EnvConfig) -> Self {
        let mut pool: Vec<usize> = (0..cfg.n_dancers).collect();
        pool.shuffle(rng);
        pool.truncate(rooms);
        let dances = (0..rooms).map(|_| rng.random_range(0..cfg.n_dances)).collect();
        Self { dancers: pool, dances }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub kind: TaskKind,
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    /// Observation stream, one frame per step with `time_index == step`.
    pub frames: Vec<ExperienceFrame>,
    pub query_dancer: usize,
    pub label: usize,
    /// Time indices of the frames that carry the answer.
    pub answer_times: Vec<usize>,
}

impl Episode {
    /// Time index assigned to the query token.
    pub fn query_time(&self) -> usize {
        self.frames.len()
    }

    /// Line-oriented dump: header, one `t place dancer dance phase` line per
    /// frame, then `query`, `label` and `answer` footers.
    pub fn dump(&self) -> String {
        let mut out = format!(
            "# kind={} seed={} width={} height={}\n",
            self.kind, self.seed, self.width, self.height
        );
        out.push_str(&crate::memory::write_trace(&self.frames));
        let _ = writeln!(out, "query {}", self.query_dancer);
        let _ = writeln!(out, "label {}", self.label);
        let answer: Vec<String> = self.answer_times.iter().map(usize::to_string).collect();
        let _ = writeln!(out, "answer {}", answer.join(" "));
        out
    }

    pub fn load(text: &str) -> Result<Self> {
        let err = |line: usize, message: String| EnvError::Parse { line, message };
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| err(1, "empty dump".into()))?;
        let header = header
            .strip_prefix("# ")
            .ok_or_else(|| err(1, "missing `#` header".into()))?;
        let (mut kind, mut seed, mut width, mut height) = (None, None, None, None);
        for field in header.split_whitespace() {
            let (k, v) = field
                .split_once('=')
                .ok_or_else(|| err(1, format!("bad header field `{field}`")))?;
            let num = || v.parse::<u64>().map_err(|e| err(1, format!("{k}: {e}")));
            match k {
                "kind" => kind = Some(v.parse::<TaskKind>().map_err(|e| err(1, e.to_string()))?),
                "seed" => seed = Some(num()?),
                "width" => width = Some(num()? as usize),
                "height" => height = Some(num()? as usize),
                _ => return Err(err(1, format!("unknown header field `{k}`"))),
            }
        }
        let mut trace = String::new();
        let (mut query, mut label, mut answer) = (None, None, Vec::new());
        for (i, line) in lines {
            let n = i + 1;
            let parse = |v: &str| v.parse::<usize>().map_err(|e| err(n, e.to_string()));
            if let Some(v) = line.strip_prefix("query ") {
                query = Some(parse(v.trim())?);
            } else if let Some(v) = line.strip_prefix("label ") {
                label = Some(parse(v.trim())?);
            } else if let Some(v) = line.strip_prefix("answer") {
                answer = v.split_whitespace().map(parse).collect::<Result<_>>()?;
            } else {
                trace.push_str(line);
                trace.push('\n');
            }
        }
        let frames = crate::memory::parse_trace(&trace)?;
        let missing = |what: &str| err(0, format!("missing {what}"));
        Ok(Self {
            kind: kind.ok_or_else(|| missing("kind"))?,
            seed: seed.ok_or_else(|| missing("seed"))?,
            width: width.ok_or_else(|| missing("width"))?,
            height: height.ok_or_else(|| missing("height"))?,
            frames,
            query_dancer: query.ok_or_else(|| missing("query"))?,
            label: label.ok_or_else(|| missing("label"))?,
            answer_times: answer,
        })
    }

    /// Places visited, one entry per stay (consecutive duplicates collapsed).
    pub fn place_sequence(&self) -> Vec<usize> {
        let mut seq: Vec<usize> = Vec::new();
        for f in &self.frames {
            if seq.last() != Some(&f.place_id) {
                seq.push(f.place_id);
            }
        }
        seq
    }

    /// Memory built by writing every frame under `strategy`.
    pub fn replay(&self, config: MemoryConfig, strategy: EvictionStrategy) -> Result<EpisodicMemory> {
        let mut mem = EpisodicMemory::new(config, strategy)?;
        for f in &self.frames {
            mem.write(f.clone())?;
        }
        Ok(mem)
    }

    /// Number of answer frames still present in `mem`.
    pub fn retained_answer_frames(&self, mem: &EpisodicMemory) -> usize {
        let stored = mem.time_indices();
        self.answer_times
            .iter()
            .filter(|t| stored.binary_search(t).is_ok())
            .count()
    }
}

/// One stay of `dance_len` frames in `place`.
fn push_stay(frames: &mut Vec<ExperienceFrame>, place: usize, dancer: usize, dance: usize, len: usize) -> Vec<usize> {
    let start = frames.len();
    for phase in 0..len {
        let t = frames.len();
        frames.push(ExperienceFrame::bare(t, place, FrameMeta { dancer, dance, phase }));
    }
    (start..frames.len()).collect()
}

fn episode_rng(kind: TaskKind, seed: u64) -> ChaCha8Rng {
    // Distinct streams per task so equal seeds do not share walks.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(kind as u64 + 1);
    rng
}

pub fn generate(kind: TaskKind, seed: u64, cfg: &EnvConfig) -> Result<Episode> {
    cfg.validate(kind)?;
    let mut rng = episode_rng(kind, seed);
    for _ in 0..MAX_ATTEMPTS {
        let attempt = match kind {
            TaskKind::NextBallet => next_ballet(&mut rng, cfg),
            TaskKind::ShortStay => Some(short_stay(&mut rng, cfg)),
            TaskKind::BalletFifo | TaskKind::BalletLifo | TaskKind::BalletMvfo | TaskKind::BalletLvfo => {
                strategy_task(kind, &mut rng, cfg)?
            }
            TaskKind::BalletAba => ballet_aba(&mut rng, cfg),
            TaskKind::OppositeBallet => opposite_ballet(&mut rng, cfg),
        };
        if let Some(mut ep) = attempt {
            ep.kind = kind;
            ep.seed = seed;
            ep.width = cfg.width;
            ep.height = cfg.height;
            return Ok(ep);
        }
    }
    Err(EnvError::Exhausted(MAX_ATTEMPTS))
}

fn partial(frames: Vec<ExperienceFrame>, query_dancer: usize, label: usize, answer_times: Vec<usize>) -> Episode {
    Episode {
        kind: TaskKind::NextBallet,
        seed: 0,
        width: 0,
        height: 0,
        frames,
        query_dancer,
        label,
        answer_times,
    }
}

fn next_ballet(rng: &mut ChaCha8Rng, cfg: &EnvConfig) -> Option<Episode> {
    let world = BalletWorld::sample(rng, cfg.rooms(), cfg);
    let mut room = rng.random_range(0..cfg.rooms());
    let mut frames = Vec::new();
    let mut visited = vec![false; cfg.rooms()];
    for v in 0..cfg.visits {
        if v > 0 {
            room = step_room(room, rng.random_range(0..4), cfg.width, cfg.height);
        }
        visited[room] = true;
        push_stay(&mut frames, room, world.dancers[room], world.dances[room], cfg.dance_len);
    }
    let candidates: Vec<usize> = RING
        .iter()
        .copied()
        .filter(|&r| visited[r] && visited[ring_next(r).expect("ring room")])
        .collect();
    let &q = candidates.choose(rng)?;
    let target = ring_next(q).expect("ring room");
    let answer = frames.iter().filter(|f| f.place_id == target).map(|f| f.time_index).collect();
    Some(partial(frames, world.dancers[q], world.dances[target], answer))
}

fn short_stay(rng: &mut ChaCha8Rng, cfg: &EnvConfig) -> Episode {
    let world = BalletWorld::sample(rng, cfg.rooms(), cfg);
    let mut room = rng.random_range(0..cfg.rooms());
    let mut frames = Vec::with_capacity(cfg.short_stay_steps);
    let mut visited = vec![false; cfg.rooms()];
    for t in 0..cfg.short_stay_steps {
        if t > 0 {
            room = step_room(room, rng.random_range(0..4), cfg.width, cfg.height);
        }
        visited[room] = true;
        let meta = FrameMeta {
            dancer: world.dancers[room],
            dance: world.dances[room],
            phase: t % cfg.dance_len,
        };
        frames.push(ExperienceFrame::bare(t, room, meta));
    }
    let rooms: Vec<usize> = (0..cfg.rooms()).filter(|&r| visited[r]).collect();
    let q = *rooms.choose(rng).expect("start room is visited");
    let answer = frames.iter().filter(|f| f.place_id == q).map(|f| f.time_index).collect();
    partial(frames, world.dancers[q], world.dances[q], answer)
}

/// A stay counts as retained when more than half of its frames survive.
pub fn stay_retained(stay: &[usize], mem: &EpisodicMemory) -> bool {
    let stored = mem.time_indices();
    2 * stay.iter().filter(|t| stored.binary_search(t).is_ok()).count() > stay.len()
}

/// Memory setup the strategy tasks are replayed against.
pub fn strategy_memory(cfg: &EnvConfig) -> MemoryConfig {
    MemoryConfig {
        layout: Layout::Place,
        capacity: Some(cfg.strategy_capacity()),
        ..MemoryConfig::default()
    }
}

fn strategy_task(kind: TaskKind, rng: &mut ChaCha8Rng, cfg: &EnvConfig) -> Result<Option<Episode>> {
    let mut dancers: Vec<usize> = (0..cfg.n_dancers).collect();
    dancers.shuffle(rng);
    let mut room = rng.random_range(0..cfg.rooms());
    let mut frames = Vec::new();
    let mut stays: Vec<(usize, usize, usize, Vec<usize>)> = Vec::with_capacity(cfg.stays);
    for s in 0..cfg.stays {
        if s > 0 {
            room = *neighbours(room, cfg.width, cfg.height).choose(rng).expect("grid has neighbours");
        }
        let dance = rng.random_range(0..cfg.n_dances);
        let times = push_stay(&mut frames, room, dancers[s], dance, cfg.dance_len);
        stays.push((room, dancers[s], dance, times));
    }

    let half = cfg.stays / 2;
    let candidates: Vec<usize> = match kind {
        TaskKind::BalletFifo => (half..cfg.stays).collect(),
        TaskKind::BalletLifo => (0..half).collect(),
        TaskKind::BalletMvfo | TaskKind::BalletLvfo => {
            let strategy = kind.matched_strategy().expect("strategy task");
            let ep = partial(frames.clone(), 0, 0, Vec::new());
            let mem = ep.replay(strategy_memory(cfg), strategy)?;
            if kind == TaskKind::BalletMvfo {
                // each room's most recent stay
                (0..cfg.stays)
                    .filter(|&s| stays[s + 1..].iter().all(|st| st.0 != stays[s].0))
                    .filter(|&s| stay_retained(&stays[s].3, &mem))
                    .collect()
            } else {
                let mut entries = vec![0usize; cfg.rooms()];
                for st in &stays {
                    entries[st.0] += 1;
                }
                let top = *entries.iter().max().expect("rooms");
                if entries.iter().filter(|&&e| e == top).count() != 1 {
                    return Ok(None);
                }
                (0..cfg.stays)
                    .filter(|&s| entries[stays[s].0] == top && stay_retained(&stays[s].3, &mem))
                    .collect()
            }
        }
        _ => unreachable!("not a strategy task"),
    };
    let Some(&q) = candidates.choose(rng) else {
        return Ok(None);
    };
    let (_, dancer, dance, times) = stays[q].clone();
    Ok(Some(partial(frames, dancer, dance, times)))
}

/// Memory setup for Ballet-ABA under either layout.
pub fn aba_memory(cfg: &EnvConfig, layout: Layout) -> MemoryConfig {
    MemoryConfig {
        layout,
        capacity: Some(cfg.aba_capacity()),
        place_cap: (layout == Layout::Place).then_some(cfg.dance_len),
        ..MemoryConfig::default()
    }
}

fn ballet_aba(rng: &mut ChaCha8Rng, cfg: &EnvConfig) -> Option<Episode> {
    let world = BalletWorld::sample(rng, cfg.rooms(), cfg);
    let mut route = vec![rng.random_range(0..cfg.rooms())];
    while route.len() < 8 {
        let last = *route.last().expect("non-empty");
        let fresh: Vec<usize> = neighbours(last, cfg.width, cfg.height)
            .into_iter()
            .filter(|r| !route.contains(r))
            .collect();
        route.push(*fresh.choose(rng)?);
    }
    let mut frames = Vec::new();
    let mut early: Vec<(usize, Vec<usize>)> = Vec::new();
    for s in 0..cfg.aba_stays {
        let room = route[s.min(7)];
        let times = push_stay(&mut frames, room, world.dancers[room], world.dances[room], cfg.dance_len);
        if s < 7 {
            early.push((room, times));
        }
    }
    let (room, times) = early.choose(rng)?.clone();
    Some(partial(frames, world.dancers[room], world.dances[room], times))
}

fn opposite_ballet(rng: &mut ChaCha8Rng, cfg: &EnvConfig) -> Option<Episode> {
    let world = BalletWorld::sample(rng, cfg.rooms(), cfg);
    let mut pos = rng.random_range(0..RING.len());
    let mut clockwise = rng.random_bool(0.5);
    let mut seen = [false; 8];
    let mut frames = Vec::new();
    for v in 0..cfg.opposite_max_visits {
        if v > 0 {
            // persistent direction, occasionally reversed
            if rng.random_bool(0.25) {
                clockwise = !clockwise;
            }
            pos = if clockwise { (pos + 1) % 8 } else { (pos + 7) % 8 };
        }
        let room = RING[pos];
        seen[pos] = true;
        push_stay(&mut frames, room, world.dancers[room], world.dances[room], cfg.dance_len);
        if seen.iter().all(|&s| s) {
            let q = *RING.choose(rng).expect("ring");
            let target = opposite_room(q);
            let answer = frames.iter().filter(|f| f.place_id == target).map(|f| f.time_index).collect();
            return Some(partial(frames, world.dancers[q], world.dances[target], answer));
        }
    }
    None
}
