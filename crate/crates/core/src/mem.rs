//! Timing and energy model of a stacked RRAM main memory.
//!
//! Accesses are row-wide: requests cover whole rows and there is no column
//! addressing. Every bank owns a read row buffer and a separate write buffer
//! row with a dirty bit; a write that misses the write buffer evicts the
//! previous dirty row to the array on the write path. Reads and writes use
//! separate interconnect timelines per channel, so writes never delay reads.
//!
//! Ranks power down when the time since their last read exceeds
//! `alpha * EWMA(previous idle intervals)`. Waking costs `wakeup_ps`.
//!
//! All times are integer picoseconds; all energies are integer femtojoules
//! (a power of 1 mW is 1 fJ/ps).

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MemError {
    #[error("invalid memory config: {0}")]
    Config(String),
    #[error("request [{address}, +{bytes}) is outside the {capacity}-byte address space")]
    OutOfRange { address: u64, bytes: u64, capacity: u64 },
    #[error("request at {address} (+{bytes}) is not aligned to {row_bytes}-byte rows")]
    Unaligned { address: u64, bytes: u64, row_bytes: u64 },
    #[error("request issued at {issue} ps precedes the previous request at {last} ps")]
    NonMonotonic { issue: u64, last: u64 },
}

/// Per-event energies (fJ) and static power (mW, i.e. fJ/ps) per rank.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MemEnergy {
    pub row_read_fj: u64,
    pub row_write_fj: u64,
    pub beat_fj: u64,
    pub standby_mw: u64,
    pub powered_down_mw: u64,
}

impl Default for MemEnergy {
    fn default() -> Self {
        MemEnergy { row_read_fj: 120_000, row_write_fj: 360_000, beat_fj: 1_500, standby_mw: 40, powered_down_mw: 4 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MemoryConfig {
    pub capacity_bytes: u64,
    pub channels: u32,
    pub ranks_per_channel: u32,
    pub banks_per_rank: u32,
    pub row_bytes: u64,
    /// Bytes moved per bus beat.
    pub beat_bytes: u64,
    pub bus_clock_hz: f64,
    /// Duration of one beat.
    pub t_burst_ps: u64,
    pub rram_read_ps: u64,
    pub rram_write_ps: u64,
    pub wakeup_ps: u64,
    /// Weight of the newest idle interval in the EWMA.
    pub ewma_weight: f64,
    /// Power-down threshold multiplier; `inf` (`null` in JSON) keeps ranks
    /// always on.
    #[serde(with = "alpha_json")]
    pub alpha: f64,
    /// EWMA value before any idle interval has been observed.
    pub initial_idle_ps: u64,
    pub energy: MemEnergy,
}

mod alpha_json {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

impl Default for MemoryConfig {
    fn default() -> Self {
        MemoryConfig {
            capacity_bytes: 8 << 30,
            channels: 2,
            ranks_per_channel: 2,
            banks_per_rank: 16,
            row_bytes: 1024,
            beat_bytes: 32,
            bus_clock_hz: 2.0e9,
            t_burst_ps: 500,
            rram_read_ps: 5_000,
            rram_write_ps: 10_000,
            wakeup_ps: 100_000,
            ewma_weight: 0.25,
            alpha: 1.0,
            initial_idle_ps: 100_000,
            energy: MemEnergy::default(),
        }
    }
}

impl MemoryConfig {
    pub fn validate(&self) -> Result<(), MemError> {
        let bad = |m: &str| Err(MemError::Config(m.to_string()));
        if self.channels == 0 || self.ranks_per_channel == 0 || self.banks_per_rank == 0 {
            return bad("channels, ranks and banks must be positive");
        }
        if self.row_bytes == 0 || self.beat_bytes == 0 || self.row_bytes % self.beat_bytes != 0 {
            return bad("row_bytes must be a positive multiple of beat_bytes");
        }
        if self.t_burst_ps == 0 || !(self.bus_clock_hz > 0.0) {
            return bad("t_burst_ps and bus_clock_hz must be positive");
        }
        if self.rram_read_ps == 0 || self.rram_write_ps == 0 {
            return bad("array latencies must be positive");
        }
        if !(self.ewma_weight > 0.0 && self.ewma_weight <= 1.0) {
            return bad("ewma_weight must be in (0, 1]");
        }
        if !(self.alpha > 0.0) {
            return bad("alpha must be positive");
        }
        let rows_per_bank = self.capacity_bytes
            / (self.row_bytes * (self.channels * self.ranks_per_channel * self.banks_per_rank) as u64);
        if rows_per_bank == 0 {
            return bad("capacity is smaller than one row in every bank");
        }
        Ok(())
    }

    /// Time to move one full row over a channel bus.
    pub fn row_transfer_ps(&self) -> u64 {
        self.row_bytes / self.beat_bytes * self.t_burst_ps
    }

    /// Peak read bandwidth over all channels, bytes per second.
    pub fn peak_read_bandwidth(&self) -> f64 {
        self.channels as f64 * self.row_bytes as f64 / (self.row_transfer_ps() as f64 * 1e-12)
    }

    pub fn total_ranks(&self) -> usize {
        (self.channels * self.ranks_per_channel) as usize
    }

    /// Global row `g` maps to channel `g % C`, then bank, then rank, then row.
    pub fn map(&self, address: u64) -> RowAddress {
        let g = address / self.row_bytes;
        let c = self.channels as u64;
        let b = self.banks_per_rank as u64;
        let r = self.ranks_per_channel as u64;
        RowAddress {
            channel: (g % c) as u32,
            bank: ((g / c) % b) as u32,
            rank: ((g / c / b) % r) as u32,
            row: g / c / b / r,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RowAddress {
    pub channel: u32,
    pub rank: u32,
    pub bank: u32,
    pub row: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccessKind {
    Read,
    Write,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemRequest {
    pub kind: AccessKind,
    pub address: u64,
    pub bytes: u64,
    pub issue_ps: u64,
}

impl MemRequest {
    pub fn read(address: u64, bytes: u64, issue_ps: u64) -> Self {
        MemRequest { kind: AccessKind::Read, address, bytes, issue_ps }
    }

    pub fn write(address: u64, bytes: u64, issue_ps: u64) -> Self {
        MemRequest { kind: AccessKind::Write, address, bytes, issue_ps }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankState {
    Active,
    PoweredDown,
}

/// One line of the optional trace log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub issue: u64,
    pub kind: AccessKind,
    pub address: u64,
    pub bytes: u64,
    pub completion: u64,
    /// Every row of the request hit its buffer.
    pub hit: bool,
    /// State of the first row's rank at issue.
    pub rank_state: RankState,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemStats {
    pub reads: u64,
    pub writes: u64,
    pub read_row_hits: u64,
    pub read_row_misses: u64,
    pub write_row_hits: u64,
    pub write_row_misses: u64,
    pub array_reads: u64,
    /// Dirty rows written back, by eviction or final flush.
    pub array_writes: u64,
    pub flushes: u64,
    pub beats: u64,
    pub wakeups: u64,
    pub power_downs: u64,
    /// Always zero: the array needs no refresh.
    pub refreshes: u64,
    pub read_bytes: u64,
    pub write_bytes: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemEnergyReport {
    pub array_read_fj: u64,
    pub array_write_fj: u64,
    pub transfer_fj: u64,
    pub standby_fj: u64,
    pub powered_down_fj: u64,
    pub total_fj: u64,
}

#[derive(Debug, Clone, Copy, Default)]
struct Bank {
    read_row: Option<u64>,
    read_free: u64,
    write_row: Option<u64>,
    dirty: bool,
    write_free: u64,
}

#[derive(Debug, Clone, Copy)]
struct Rank {
    /// End of the latest read served by this rank.
    read_done: u64,
    ewma: f64,
    down_ps: u64,
}

#[derive(Debug, Clone, Copy, Default)]
struct Channel {
    read_bus: u64,
    write_bus: u64,
}

/// A memory system instance; feed requests in issue order.
#[derive(Debug, Clone)]
pub struct MemorySystem {
    cfg: MemoryConfig,
    banks: Vec<Bank>,
    ranks: Vec<Rank>,
    channels: Vec<Channel>,
    stats: MemStats,
    last_issue: u64,
    horizon: u64,
    log: Option<Vec<TraceEntry>>,
}

impl MemorySystem {
    pub fn new(cfg: MemoryConfig) -> Result<Self, MemError> {
        cfg.validate()?;
        let nranks = cfg.total_ranks();
        Ok(MemorySystem {
            cfg,
            banks: vec![Bank::default(); nranks * cfg.banks_per_rank as usize],
            ranks: vec![Rank { read_done: 0, ewma: cfg.initial_idle_ps as f64, down_ps: 0 }; nranks],
            channels: vec![Channel::default(); cfg.channels as usize],
            stats: MemStats::default(),
            last_issue: 0,
            horizon: 0,
            log: None,
        })
    }

    /// Records a [`TraceEntry`] per request from now on.
    pub fn with_log(mut self) -> Self {
        self.log = Some(Vec::new());
        self
    }

    pub fn config(&self) -> &MemoryConfig {
        &self.cfg
    }

    pub fn stats(&self) -> &MemStats {
        &self.stats
    }

    pub fn log(&self) -> &[TraceEntry] {
        self.log.as_deref().unwrap_or(&[])
    }

    /// Latest completion seen so far.
    pub fn horizon(&self) -> u64 {
        self.horizon
    }

    fn rank_index(&self, a: &RowAddress) -> usize {
        (a.channel * self.cfg.ranks_per_channel + a.rank) as usize
    }

    fn bank_index(&self, a: &RowAddress) -> usize {
        self.rank_index(a) * self.cfg.banks_per_rank as usize + a.bank as usize
    }

    fn threshold(&self, rank: &Rank) -> f64 {
        self.cfg.alpha * rank.ewma
    }

    /// Power-down instant of an idle rank, if its threshold is finite.
    fn down_at(&self, rank: &Rank) -> Option<u64> {
        let th = self.threshold(rank);
        if th.is_finite() {
            Some(rank.read_done.saturating_add(th.ceil() as u64))
        } else {
            None
        }
    }

    /// Rank state at `t` as implied by read activity so far.
    pub fn rank_state(&self, channel: u32, rank: u32, t: u64) -> RankState {
        let r = &self.ranks[(channel * self.cfg.ranks_per_channel + rank) as usize];
        match self.down_at(r) {
            Some(d) if t > d => RankState::PoweredDown,
            _ => RankState::Active,
        }
    }

    fn check(&self, req: &MemRequest) -> Result<(), MemError> {
        let rb = self.cfg.row_bytes;
        if req.bytes == 0 || req.address % rb != 0 || req.bytes % rb != 0 {
            return Err(MemError::Unaligned { address: req.address, bytes: req.bytes, row_bytes: rb });
        }
        if req.address.checked_add(req.bytes).is_none_or(|end| end > self.cfg.capacity_bytes) {
            return Err(MemError::OutOfRange { address: req.address, bytes: req.bytes, capacity: self.cfg.capacity_bytes });
        }
        if req.issue_ps < self.last_issue {
            return Err(MemError::NonMonotonic { issue: req.issue_ps, last: self.last_issue });
        }
        Ok(())
    }

    /// Serves one request (all its rows, in address order) and returns its
    /// completion time.
    pub fn access(&mut self, req: &MemRequest) -> Result<u64, MemError> {
        self.check(req)?;
        self.last_issue = req.issue_ps;
        let first = self.cfg.map(req.address);
        let state0 = self.rank_state(first.channel, first.rank, req.issue_ps);
        let rows = req.bytes / self.cfg.row_bytes;
        let mut done = req.issue_ps;
        let mut all_hit = true;
        for i in 0..rows {
            let a = self.cfg.map(req.address + i * self.cfg.row_bytes);
            let (t, hit) = match req.kind {
                AccessKind::Read => self.read_row(&a, req.issue_ps),
                AccessKind::Write => self.write_row(&a, req.issue_ps),
            };
            done = done.max(t);
            all_hit &= hit;
        }
        match req.kind {
            AccessKind::Read => {
                self.stats.reads += 1;
                self.stats.read_bytes += req.bytes;
            }
            AccessKind::Write => {
                self.stats.writes += 1;
                self.stats.write_bytes += req.bytes;
            }
        }
        self.horizon = self.horizon.max(done);
        if let Some(log) = &mut self.log {
            log.push(TraceEntry {
                issue: req.issue_ps,
                kind: req.kind,
                address: req.address,
                bytes: req.bytes,
                completion: done,
                hit: all_hit,
                rank_state: state0,
            });
        }
        Ok(done)
    }

    /// Wakes the rank if needed and folds the idle interval into the EWMA.
    /// Returns the earliest time the rank can start serving.
    fn touch_rank_for_read(&mut self, ri: usize, t: u64) -> u64 {
        let rank = self.ranks[ri];
        let mut ready = t;
        if t > rank.read_done {
            let idle = t - rank.read_done;
            if let Some(d) = self.down_at(&rank) {
                if t > d {
                    self.ranks[ri].down_ps += t - d;
                    self.stats.power_downs += 1;
                    self.stats.wakeups += 1;
                    ready = t + self.cfg.wakeup_ps;
                }
            }
            let w = self.cfg.ewma_weight;
            self.ranks[ri].ewma = w * idle as f64 + (1.0 - w) * rank.ewma;
        }
        ready
    }

    fn read_row(&mut self, a: &RowAddress, t: u64) -> (u64, bool) {
        let ri = self.rank_index(a);
        let bi = self.bank_index(a);
        let ready = self.touch_rank_for_read(ri, t);
        let xfer = self.cfg.row_transfer_ps();
        let bank = self.banks[bi];
        let hit = bank.read_row == Some(a.row);
        let data_ready = if hit {
            ready.max(bank.read_free)
        } else {
            let start = ready.max(bank.read_free);
            self.stats.array_reads += 1;
            start + self.cfg.rram_read_ps
        };
        let ch = &mut self.channels[a.channel as usize];
        let bus_start = data_ready.max(ch.read_bus);
        let done = bus_start + xfer;
        ch.read_bus = done;
        let bank = &mut self.banks[bi];
        bank.read_row = Some(a.row);
        bank.read_free = data_ready;
        let rank = &mut self.ranks[ri];
        rank.read_done = rank.read_done.max(done);
        self.stats.beats += self.cfg.row_bytes / self.cfg.beat_bytes;
        if hit {
            self.stats.read_row_hits += 1;
        } else {
            self.stats.read_row_misses += 1;
        }
        (done, hit)
    }

    fn write_row(&mut self, a: &RowAddress, t: u64) -> (u64, bool) {
        let bi = self.bank_index(a);
        let xfer = self.cfg.row_transfer_ps();
        let bank = self.banks[bi];
        let hit = bank.write_row == Some(a.row);
        let mut ready = t;
        if !hit && bank.dirty {
            // Evict the previous dirty row to the array first.
            let mut start = t.max(bank.write_free);
            if self.rank_state(a.channel, a.rank, start) == RankState::PoweredDown {
                start += self.cfg.wakeup_ps;
            }
            let end = start + self.cfg.rram_write_ps;
            self.banks[bi].write_free = end;
            self.stats.array_writes += 1;
            ready = end;
        }
        let ch = &mut self.channels[a.channel as usize];
        let bus_start = ready.max(ch.write_bus);
        let done = bus_start + xfer;
        ch.write_bus = done;
        let bank = &mut self.banks[bi];
        bank.write_row = Some(a.row);
        bank.dirty = true;
        self.stats.beats += self.cfg.row_bytes / self.cfg.beat_bytes;
        if hit {
            self.stats.write_row_hits += 1;
        } else {
            self.stats.write_row_misses += 1;
        }
        (done, hit)
    }

    /// Advances power accounting to `now`; ranks idle past their threshold
    /// are counted as powered down up to `now`. Returns the number of ranks
    /// currently powered down.
    pub fn tick_power_policy(&mut self, now: u64) -> usize {
        (0..self.ranks.len())
            .filter(|&ri| matches!(self.down_at(&self.ranks[ri]), Some(d) if now > d))
            .count()
    }

    /// Writes back every dirty write buffer and closes the energy books at
    /// `end` (at least the latest completion).
    pub fn finish(mut self, end: u64) -> MemReport {
        let mut t_end = end.max(self.horizon);
        for bi in 0..self.banks.len() {
            if self.banks[bi].dirty {
                let done = self.banks[bi].write_free + self.cfg.rram_write_ps;
                self.banks[bi].write_free = done;
                self.banks[bi].dirty = false;
                self.stats.array_writes += 1;
                self.stats.flushes += 1;
                t_end = t_end.max(done);
            }
        }
        let mut down = 0u64;
        let mut trailing_downs = 0u64;
        for r in &self.ranks {
            down += r.down_ps;
            if let Some(d) = self.down_at(r) {
                if t_end > d {
                    down += t_end - d;
                    trailing_downs += 1;
                }
            }
        }
        self.stats.power_downs += trailing_downs;
        let e = self.cfg.energy;
        let rank_time = t_end * self.ranks.len() as u64;
        let energy = MemEnergyReport {
            array_read_fj: self.stats.array_reads * e.row_read_fj,
            array_write_fj: self.stats.array_writes * e.row_write_fj,
            transfer_fj: self.stats.beats * e.beat_fj,
            standby_fj: (rank_time - down) * e.standby_mw,
            powered_down_fj: down * e.powered_down_mw,
            total_fj: 0,
        };
        let total = energy.array_read_fj + energy.array_write_fj + energy.transfer_fj + energy.standby_fj + energy.powered_down_fj;
        MemReport {
            end_ps: t_end,
            powered_down_ps: down,
            stats: self.stats,
            energy: MemEnergyReport { total_fj: total, ..energy },
            log: self.log.unwrap_or_default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemReport {
    pub end_ps: u64,
    /// Summed over ranks.
    pub powered_down_ps: u64,
    pub stats: MemStats,
    pub energy: MemEnergyReport,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub log: Vec<TraceEntry>,
}

/// Runs `reqs` in order on a fresh system and returns per-request
/// completion times plus the closing report.
pub fn run_trace(cfg: MemoryConfig, reqs: &[MemRequest], log: bool) -> Result<(Vec<u64>, MemReport), MemError> {
    let mut sys = MemorySystem::new(cfg)?;
    if log {
        sys = sys.with_log();
    }
    let done = reqs.iter().map(|r| sys.access(r)).collect::<Result<Vec<_>, _>>()?;
    let end = sys.horizon();
    Ok((done, sys.finish(end)))
}

/// Achieved throughput per path and channel, bytes per second.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bandwidth {
    pub read: Vec<f64>,
    pub write: Vec<f64>,
    pub total_read: f64,
    pub total_write: f64,
}

/// Bytes of each path divided by the span from its first issue to its last
/// completion.
pub fn bandwidth(cfg: &MemoryConfig, reqs: &[MemRequest], completions: &[u64]) -> Bandwidth {
    let nch = cfg.channels as usize;
    let rate = |kind: AccessKind, ch: Option<usize>| -> f64 {
        let mut bytes = 0u64;
        let mut first = u64::MAX;
        let mut last = 0u64;
        for (r, &done) in reqs.iter().zip(completions) {
            if r.kind != kind {
                continue;
            }
            let rows = r.bytes / cfg.row_bytes;
            let mut counted = false;
            for i in 0..rows {
                let a = cfg.map(r.address + i * cfg.row_bytes);
                if ch.is_none_or(|c| c == a.channel as usize) {
                    bytes += cfg.row_bytes;
                    counted = true;
                }
            }
            if counted {
                first = first.min(r.issue_ps);
                last = last.max(done);
            }
        }
        if bytes == 0 || last <= first {
            0.0
        } else {
            bytes as f64 / ((last - first) as f64 * 1e-12)
        }
    };
    Bandwidth {
        read: (0..nch).map(|c| rate(AccessKind::Read, Some(c))).collect(),
        write: (0..nch).map(|c| rate(AccessKind::Write, Some(c))).collect(),
        total_read: rate(AccessKind::Read, None),
        total_write: rate(AccessKind::Write, None),
    }
}
