//! Set-associative software cache for embedding rows.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CacheError {
    #[error("trace is empty; hit rate undefined")]
    EmptyTrace,
    #[error("invalid cache config: {0}")]
    InvalidConfig(String),
    #[error("trace line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Policy {
    Lru,
    /// Least frequently used; ties go to the least recently used line.
    Lfu,
}

impl Policy {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lru" => Some(Policy::Lru),
            "lfu" => Some(Policy::Lfu),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Policy::Lru => "lru",
            Policy::Lfu => "lfu",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CacheConfig {
    pub num_sets: usize,
    pub ways: usize,
    pub policy: Policy,
}

impl CacheConfig {
    pub const DEFAULT_WAYS: usize = 32;

    pub fn new(num_sets: usize, ways: usize, policy: Policy) -> Result<Self, CacheError> {
        if num_sets == 0 || ways == 0 {
            return Err(CacheError::InvalidConfig(format!(
                "need num_sets >= 1 and ways >= 1, got {num_sets} x {ways}"
            )));
        }
        Ok(Self { num_sets, ways, policy })
    }

    /// Capacity in rows.
    pub fn capacity(&self) -> usize {
        self.num_sets * self.ways
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Access {
    Hit,
    Miss { evicted: Option<u64> },
}

#[derive(Debug, Clone, Copy)]
struct Line {
    row: u64,
    last_use: u64,
    uses: u64,
}

#[derive(Debug, Clone)]
pub struct CacheState {
    config: CacheConfig,
    sets: Vec<Vec<Line>>,
    clock: u64,
    hits: u64,
    misses: u64,
    evictions: u64,
}

impl CacheState {
    pub fn new(config: CacheConfig) -> Self {
        Self {
            sets: vec![Vec::with_capacity(config.ways); config.num_sets],
            config,
            clock: 0,
            hits: 0,
            misses: 0,
            evictions: 0,
        }
    }

    pub fn config(&self) -> CacheConfig {
        self.config
    }

    pub fn set_of(&self, row: u64) -> usize {
        (row % self.config.num_sets as u64) as usize
    }

    /// Rows resident in `set`, by line index.
    pub fn resident(&self, set: usize) -> Vec<u64> {
        self.sets[set].iter().map(|l| l.row).collect()
    }

    pub fn hits(&self) -> u64 {
        self.hits
    }

    pub fn misses(&self) -> u64 {
        self.misses
    }

    pub fn evictions(&self) -> u64 {
        self.evictions
    }

    pub fn access(&mut self, row: u64) -> Access {
        self.clock += 1;
        let now = self.clock;
        let set_idx = self.set_of(row);
        let (ways, policy) = (self.config.ways, self.config.policy);
        let set = &mut self.sets[set_idx];
        if let Some(line) = set.iter_mut().find(|l| l.row == row) {
            line.last_use = now;
            line.uses += 1;
            self.hits += 1;
            return Access::Hit;
        }
        self.misses += 1;
        let fresh = Line { row, last_use: now, uses: 1 };
        if set.len() < ways {
            set.push(fresh);
            return Access::Miss { evicted: None };
        }
        let victim = (0..set.len())
            .min_by_key(|&i| match policy {
                Policy::Lru => (0, set[i].last_use, i),
                Policy::Lfu => (set[i].uses, set[i].last_use, i),
            })
            .expect("full set has lines");
        let old = std::mem::replace(&mut set[victim], fresh);
        self.evictions += 1;
        Access::Miss { evicted: Some(old.row) }
    }
}

pub fn access(state: &mut CacheState, row: u64) -> Access {
    state.access(row)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceStats {
    pub accesses: u64,
    pub hits: u64,
    pub misses: u64,
    pub evictions: u64,
    pub hit_rate: f64,
}

pub fn simulate_trace(config: CacheConfig, trace: &[u64]) -> Result<TraceStats, CacheError> {
    if trace.is_empty() {
        return Err(CacheError::EmptyTrace);
    }
    let mut state = CacheState::new(config);
    for &r in trace {
        state.access(r);
    }
    Ok(TraceStats {
        accesses: trace.len() as u64,
        hits: state.hits,
        misses: state.misses,
        evictions: state.evictions,
        hit_rate: state.hits as f64 / trace.len() as f64,
    })
}

/// Row bandwidth when hits are served from HBM and misses from the backing
/// tier: `1 / (h / hbm_bw + (1 - h) / backing_bw)`.
pub fn effective_row_bandwidth(hit_rate: f64, hbm_bw: f64, backing_bw: f64) -> f64 {
    assert!((0.0..=1.0).contains(&hit_rate), "hit rate {hit_rate} outside [0, 1]");
    assert!(hbm_bw > 0.0 && backing_bw > 0.0, "bandwidths must be positive");
    if hit_rate == 1.0 {
        return hbm_bw;
    }
    if hit_rate == 0.0 {
        return backing_bw;
    }
    1.0 / (hit_rate / hbm_bw + (1.0 - hit_rate) / backing_bw)
}

/// One decimal row id per line; blank lines and `#` comments are skipped.
pub fn parse_trace(text: &str) -> Result<Vec<u64>, CacheError> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let id = line
            .parse()
            .map_err(|e: std::num::ParseIntError| CacheError::Parse { line: n + 1, reason: e.to_string() })?;
        out.push(id);
    }
    Ok(out)
}

/// A hot set revisited every round, with a one-off scan of fresh rows
/// between rounds. The scan is larger than the cache.
pub fn scan_hot_trace(seed: u64, rounds: usize, hot: usize, scan: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hot_ids: Vec<u64> = (0..hot as u64).collect();
    let mut next_cold = 1_000_000u64;
    let mut out = Vec::with_capacity(rounds * (2 * hot + scan));
    for _ in 0..rounds {
        for _ in 0..2 {
            hot_ids.shuffle(&mut rng);
            out.extend_from_slice(&hot_ids);
        }
        for _ in 0..scan {
            next_cold += rng.random_range(1..4);
            out.push(next_cold);
        }
    }
    out
}
