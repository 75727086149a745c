//! Pipelined temporal blocking.
//!
//! `teams · team_size` threads form one pipeline. Thread `i` applies time
//! levels `i·T + 1 ..= (i + 1)·T` to every block in turn, so a block leaves
//! the pipeline `U = teams · team_size · T` levels further on after a single
//! pass over memory (one node sweep). Threads stay a bounded number of blocks
//! apart, either by a global barrier after every block step or by spinning on
//! each other's progress counters.

mod counters;
mod schedule;

use std::fmt::Write as _;
use std::sync::atomic::AtomicBool;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::grid::{Grid, GridError, SharedGrid, StorageKind, SweepPlan};
use crate::kernel::{apply_region, BlockSize};

pub use counters::{may_proceed, Gate, ThreadCounters};
pub use schedule::{BlockSchedule, DomainSpec};

use counters::{lockstep_offsets, uses_barrier, SpinBarrier, Stop, Waiter};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error("invalid pipeline configuration: {0}")]
    InvalidConfig(String),
    #[error("schedule: {0}")]
    Schedule(String),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("thread {thread} made no progress at sweep {sweep}, block {block}; counters {counters:?}")]
    Deadlock {
        thread: usize,
        sweep: usize,
        block: usize,
        counters: Vec<usize>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SyncMode {
    /// Global barrier after every block step.
    Barrier,
    /// Neighbouring threads watch each other's progress counters.
    Relaxed,
}

impl std::fmt::Display for SyncMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SyncMode::Barrier => "barrier",
            SyncMode::Relaxed => "relaxed",
        })
    }
}

impl std::str::FromStr for SyncMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "barrier" => Ok(SyncMode::Barrier),
            "relaxed" => Ok(SyncMode::Relaxed),
            _ => Err(format!("unknown sync mode {s:?} (barrier|relaxed)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PipelineConfig {
    pub teams: usize,
    pub team_size: usize,
    /// Consecutive time levels each thread applies to a block.
    pub updates_per_thread: usize,
    /// Minimum lead, in blocks, of a thread over its successor.
    pub min_distance: usize,
    /// Maximum lead, in blocks, of a thread over its successor.
    pub max_distance: usize,
    /// Extra distance between the last thread of a team and the first thread
    /// of the next, which do not share a cache.
    pub team_delay: usize,
    pub sync: SyncMode,
    /// Requested block extents; clamped to the domain at run time.
    pub block: BlockSize,
    pub storage: StorageKind,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            teams: 1,
            team_size: 1,
            updates_per_thread: 2,
            min_distance: 1,
            max_distance: 4,
            team_delay: 0,
            sync: SyncMode::Relaxed,
            block: BlockSize::new(120, 20, 20),
            storage: StorageKind::TwoGrid,
        }
    }
}

impl PipelineConfig {
    pub fn threads(&self) -> usize {
        self.teams * self.team_size
    }

    /// Time levels per node sweep.
    pub fn levels_per_sweep(&self) -> usize {
        self.threads() * self.updates_per_thread
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::InvalidConfig(m.into()));
        if self.teams == 0 || self.team_size == 0 || self.updates_per_thread == 0 {
            return bad("teams, team size and updates per thread must be at least 1");
        }
        if self.min_distance == 0 {
            return bad("minimum distance must be at least 1 block");
        }
        if self.max_distance < self.min_distance {
            return bad("maximum distance must not be below the minimum distance");
        }
        Ok(())
    }
}

/// Test and tuning hooks for a pipeline run.
#[derive(Clone, Copy, Default)]
pub struct RunOptions<'a> {
    /// Give up and report a deadlock when a thread waits this long.
    pub spin_timeout: Option<Duration>,
    /// Random short stalls before each block, to shake out ordering bugs.
    pub jitter_seed: Option<u64>,
    /// Record counter snapshots at every block start.
    pub trace: bool,
    /// Called on each worker thread before it starts, e.g. to pin it.
    pub worker_init: Option<&'a (dyn Fn(usize) + Sync)>,
}

/// Counter snapshot taken when a thread starts a block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TraceEvent {
    pub sweep: usize,
    pub thread: usize,
    /// Position of the block in processing order.
    pub block: usize,
    pub c_prev: Option<usize>,
    pub c_self: usize,
    pub c_next: Option<usize>,
    /// Whether the snapshot satisfies the thread's distance conditions.
    pub gate_ok: bool,
    /// Whether the predecessor had finished this block.
    pub data_ready: bool,
}

#[derive(Clone, Debug, Default)]
pub struct Trace {
    pub events: Vec<TraceEvent>,
}

impl Trace {
    pub fn violations(&self) -> impl Iterator<Item = &TraceEvent> {
        self.events.iter().filter(|e| !e.gate_ok || !e.data_ready)
    }

    /// `sweep,thread,block,c_prev,c_self,c_next`, with empty fields for
    /// missing neighbours.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("sweep,thread,block,c_prev,c_self,c_next\n");
        let opt = |v: Option<usize>| v.map(|v| v.to_string()).unwrap_or_default();
        for e in &self.events {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                e.sweep,
                e.thread,
                e.block,
                opt(e.c_prev),
                e.c_self,
                opt(e.c_next)
            );
        }
        s
    }
}

/// Runs `sweeps` node sweeps over the interior.
pub fn run_node_sweeps(grid: &mut Grid, cfg: &PipelineConfig, sweeps: usize) -> Result<(), PipelineError> {
    let domain = DomainSpec::physical(grid.dims().interior());
    run_sweeps(grid, cfg, &domain, 0, sweeps, &RunOptions::default()).map(|_| ())
}

/// Like [`run_node_sweeps`] but records every block start.
pub fn instrumented_run(grid: &mut Grid, cfg: &PipelineConfig, sweeps: usize) -> Result<Trace, PipelineError> {
    let opts = RunOptions {
        trace: true,
        ..RunOptions::default()
    };
    instrumented_run_with(grid, cfg, sweeps, &opts)
}

pub fn instrumented_run_with(grid: &mut Grid, cfg: &PipelineConfig, sweeps: usize, opts: &RunOptions<'_>) -> Result<Trace, PipelineError> {
    let domain = DomainSpec::physical(grid.dims().interior());
    let opts = RunOptions { trace: true, ..*opts };
    run_sweeps(grid, cfg, &domain, 0, sweeps, &opts).map(|t| t.unwrap_or_default())
}

/// General entry point: `sweeps` node sweeps over `domain`, the first one
/// starting at global level `level_offset + 1`.
pub fn run_sweeps(
    grid: &mut Grid,
    cfg: &PipelineConfig,
    domain: &DomainSpec,
    level_offset: usize,
    sweeps: usize,
    opts: &RunOptions<'_>,
) -> Result<Option<Trace>, PipelineError> {
    cfg.validate()?;
    if grid.storage_kind() != cfg.storage {
        return Err(PipelineError::InvalidConfig(format!(
            "grid uses {:?} storage but the configuration asks for {:?}",
            grid.storage_kind(),
            cfg.storage
        )));
    }
    let u = cfg.levels_per_sweep();
    let plans = grid.plan_sweeps(u, sweeps)?;
    // Level domains only shrink, so the last sweep's first level is the
    // smallest; every sweep shares the block grid that fits it.
    let smallest = domain.level_region(level_offset + sweeps.saturating_sub(1) * u + 1);
    let extent = std::array::from_fn(|d| (smallest.hi[d] - smallest.lo[d]).max(0) as usize);
    let block = cfg.block.clamped_to(extent);
    let counts = BlockSchedule::counts_for(smallest, block);
    let schedules = plans
        .iter()
        .enumerate()
        .map(|(s, plan)| BlockSchedule::build_with_counts(domain, block, Some(counts), u, level_offset + s * u, plan.traversal()))
        .collect::<Result<Vec<_>, _>>()?;
    if sweeps == 0 {
        return Ok(opts.trace.then(Trace::default));
    }
    let blocks = schedules[0].blocks();
    let threads = cfg.threads();
    let counters = ThreadCounters::new(threads, blocks);
    let barrier = SpinBarrier::new(threads);
    let abort = AtomicBool::new(false);
    let offsets = lockstep_offsets(cfg);
    let ctx = Ctx {
        cfg,
        plans: &plans,
        schedules: &schedules,
        counters: &counters,
        barrier: &barrier,
        abort: &abort,
        offsets: &offsets,
        opts,
        grid: grid.shared(),
    };
    let results: Vec<Result<Vec<TraceEvent>, Failure>> = if threads == 1 {
        vec![ctx.worker(0)]
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..threads)
                .map(|i| {
                    let ctx = &ctx;
                    s.spawn(move || ctx.worker(i))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|p| std::panic::resume_unwind(p)))
                .collect()
        })
    };
    let mut events = Vec::new();
    let mut deadlock = None;
    for r in results {
        match r {
            Ok(ev) => events.extend(ev),
            Err(Failure::Deadlock(e)) => deadlock = deadlock.or(Some(e)),
            Err(Failure::Aborted) => {}
        }
    }
    if let Some(e) = deadlock {
        return Err(e);
    }
    for plan in &plans {
        grid.commit(plan);
    }
    if !opts.trace {
        return Ok(None);
    }
    events.sort_by_key(|e| (e.sweep, e.block, e.thread));
    Ok(Some(Trace { events }))
}

enum Failure {
    Deadlock(PipelineError),
    Aborted,
}

struct Ctx<'a> {
    cfg: &'a PipelineConfig,
    plans: &'a [SweepPlan],
    schedules: &'a [BlockSchedule],
    counters: &'a ThreadCounters,
    barrier: &'a SpinBarrier,
    abort: &'a AtomicBool,
    offsets: &'a [usize],
    opts: &'a RunOptions<'a>,
    grid: SharedGrid<'a>,
}

// SAFETY: the shared grid view is only dereferenced under the pipeline's
// ordering protocol; everything else is shared immutable or atomic.
unsafe impl Sync for Ctx<'_> {}

impl Ctx<'_> {
    fn worker(&self, i: usize) -> Result<Vec<TraceEvent>, Failure> {
        if let Some(init) = self.opts.worker_init {
            init(i);
        }
        let waiter = Waiter {
            abort: self.abort,
            timeout: self.opts.spin_timeout,
        };
        let gate = Gate::for_thread(i, self.cfg);
        let mut rng = self.opts.jitter_seed.map(|s| ChaCha8Rng::seed_from_u64(s ^ (i as u64) << 32));
        let mut events = Vec::new();
        let blocks = self.counters.blocks();
        for sweep in 0..self.plans.len() {
            let stall = |block: usize| {
                let counters = self.counters.snapshot();
                move |stop: Stop| match stop {
                    Stop::TimedOut => Failure::Deadlock(PipelineError::Deadlock {
                        thread: i,
                        sweep,
                        block,
                        counters,
                    }),
                    Stop::Aborted => Failure::Aborted,
                }
            };
            if uses_barrier(self.cfg) {
                let steps = blocks + self.offsets.last().copied().unwrap_or(0);
                for step in 0..steps {
                    if let Some(p) = step.checked_sub(self.offsets[i]).filter(|&p| p < blocks) {
                        self.block(i, sweep, p, &gate, &mut rng, &mut events);
                    }
                    self.barrier.wait(&waiter).map_err(stall(step))?;
                }
            } else {
                for p in 0..blocks {
                    waiter.until(|| gate.open(self.counters, i)).map_err(stall(p))?;
                    self.block(i, sweep, p, &gate, &mut rng, &mut events);
                }
            }
            self.barrier.wait(&waiter).map_err(stall(blocks))?;
            self.counters.store(i, 0);
            self.barrier.wait(&waiter).map_err(stall(blocks))?;
        }
        Ok(events)
    }

    fn block(&self, i: usize, sweep: usize, p: usize, gate: &Gate, rng: &mut Option<ChaCha8Rng>, events: &mut Vec<TraceEvent>) {
        if let Some(rng) = rng {
            for _ in 0..rng.gen_range(0..200) {
                std::hint::spin_loop();
            }
            if rng.gen_bool(0.1) {
                std::thread::yield_now();
            }
        }
        if self.opts.trace {
            let c_prev = gate.prev.map(|(j, _)| self.counters.get(j));
            let c_self = self.counters.get(i);
            let c_next = gate.next.map(|(j, _)| self.counters.get(j));
            let blocks = self.counters.blocks();
            let gate_ok = uses_barrier(self.cfg) || gate.allows(c_prev, c_self, c_next, blocks);
            events.push(TraceEvent {
                sweep,
                thread: i,
                block: p,
                c_prev,
                c_self,
                c_next,
                gate_ok,
                data_ready: c_self == p && c_prev.is_none_or(|c| c > p),
            });
        }
        let plan = &self.plans[sweep];
        let schedule = &self.schedules[sweep];
        let t = self.cfg.updates_per_thread;
        let carries = plan.carries_ghosts();
        for tau in i * t + 1..=(i + 1) * t {
            let (region, carry) = schedule.region(p, tau);
            let carry = if carries { carry } else { Default::default() };
            // SAFETY: regions come from a validated schedule inside the
            // allocation; the gate (or barrier) guarantees every level this
            // block reads is complete and no cell it writes is still needed.
            unsafe { apply_region(self.grid, plan.level(tau), plan.traversal(), region, carry) };
        }
        self.counters.advance(i);
    }
}
