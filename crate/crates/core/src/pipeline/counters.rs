use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::time::{Duration, Instant};

use super::{PipelineConfig, SyncMode};

/// Iterations of busy polling before a waiting thread starts yielding.
const SPIN_BUDGET: u32 = 64;

#[repr(align(128))]
#[derive(Default)]
struct Slot(AtomicUsize);

/// Per-thread progress counters, one per cache-line pair so that a writer
/// never invalidates a neighbour's line.
///
/// Each counter has a single writer. Increments are release stores and reads
/// are acquire loads, so a reader that observes `c[i] > b` also observes all
/// grid writes thread `i` made for block `b`.
pub struct ThreadCounters {
    slots: Vec<Slot>,
    blocks: usize,
}

impl ThreadCounters {
    /// `blocks` is the number of blocks in one sweep, the value a counter
    /// holds once its thread is done.
    pub fn new(threads: usize, blocks: usize) -> Self {
        Self {
            slots: (0..threads).map(|_| Slot::default()).collect(),
            blocks,
        }
    }

    pub fn from_values(values: &[usize], blocks: usize) -> Self {
        let c = Self::new(values.len(), blocks);
        for (i, &v) in values.iter().enumerate() {
            c.store(i, v);
        }
        c
    }

    pub fn threads(&self) -> usize {
        self.slots.len()
    }

    pub fn blocks(&self) -> usize {
        self.blocks
    }

    #[inline]
    pub fn get(&self, i: usize) -> usize {
        self.slots[i].0.load(Ordering::Acquire)
    }

    /// Only thread `i` may call this.
    #[inline]
    pub fn advance(&self, i: usize) {
        let slot = &self.slots[i].0;
        slot.store(slot.load(Ordering::Relaxed) + 1, Ordering::Release);
    }

    pub fn store(&self, i: usize, v: usize) {
        self.slots[i].0.store(v, Ordering::Release);
    }

    pub fn snapshot(&self) -> Vec<usize> {
        (0..self.threads()).map(|i| self.get(i)).collect()
    }
}

/// The distance conditions one thread checks before starting a block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Gate {
    /// Predecessor index and the minimum lead it must have.
    pub prev: Option<(usize, usize)>,
    /// Successor index and the maximum lead this thread may have over it.
    pub next: Option<(usize, usize)>,
}

impl Gate {
    pub fn for_thread(i: usize, cfg: &PipelineConfig) -> Self {
        let threads = cfg.threads();
        let t = cfg.team_size;
        let prev = (i > 0).then(|| {
            let extra = if i.is_multiple_of(t) { cfg.team_delay } else { 0 };
            (i - 1, cfg.min_distance + extra)
        });
        let next = (i + 1 < threads).then(|| {
            let extra = if i % t == t - 1 { cfg.team_delay } else { 0 };
            (i + 1, cfg.max_distance + extra)
        });
        Self { prev, next }
    }

    /// Evaluates both conditions on counter values. A predecessor that has
    /// finished the sweep always satisfies the first one, otherwise the tail
    /// of the pipeline could never drain.
    pub fn allows(&self, c_prev: Option<usize>, c_self: usize, c_next: Option<usize>, blocks: usize) -> bool {
        let lead_ok = match (self.prev, c_prev) {
            (Some((_, min)), Some(p)) => p == blocks || p >= c_self + min,
            _ => true,
        };
        let lag_ok = match (self.next, c_next) {
            (Some((_, max)), Some(n)) => c_self <= n + max,
            _ => true,
        };
        lead_ok && lag_ok
    }

    pub fn open(&self, c: &ThreadCounters, i: usize) -> bool {
        self.allows(
            self.prev.map(|(p, _)| c.get(p)),
            c.get(i),
            self.next.map(|(n, _)| c.get(n)),
            c.blocks(),
        )
    }
}

/// Whether thread `i` may start its next block under the relaxed protocol.
pub fn may_proceed(counters: &ThreadCounters, i: usize, cfg: &PipelineConfig) -> bool {
    Gate::for_thread(i, cfg).open(counters, i)
}

/// Why a wait ended without its condition becoming true.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Stop {
    TimedOut,
    Aborted,
}

/// Spin-then-yield waiting with a shared abort flag and an optional deadline.
pub(crate) struct Waiter<'a> {
    pub abort: &'a AtomicBool,
    pub timeout: Option<Duration>,
}

impl Waiter<'_> {
    pub fn until(&self, mut ready: impl FnMut() -> bool) -> Result<(), Stop> {
        let mut spins = 0u32;
        let mut started: Option<Instant> = None;
        loop {
            if ready() {
                return Ok(());
            }
            if spins < SPIN_BUDGET {
                spins += 1;
                std::hint::spin_loop();
                continue;
            }
            if self.abort.load(Ordering::Relaxed) {
                return Err(Stop::Aborted);
            }
            if let Some(limit) = self.timeout {
                let t0 = *started.get_or_insert_with(Instant::now);
                if t0.elapsed() > limit {
                    self.abort.store(true, Ordering::Relaxed);
                    return Err(Stop::TimedOut);
                }
            }
            std::thread::yield_now();
        }
    }
}

/// A reusable barrier that can be abandoned when a peer fails.
pub(crate) struct SpinBarrier {
    arrived: AtomicUsize,
    generation: AtomicUsize,
    parties: usize,
}

impl SpinBarrier {
    pub fn new(parties: usize) -> Self {
        Self {
            arrived: AtomicUsize::new(0),
            generation: AtomicUsize::new(0),
            parties,
        }
    }

    pub fn wait(&self, waiter: &Waiter<'_>) -> Result<(), Stop> {
        let gen = self.generation.load(Ordering::Acquire);
        if self.arrived.fetch_add(1, Ordering::AcqRel) + 1 == self.parties {
            self.arrived.store(0, Ordering::Relaxed);
            self.generation.fetch_add(1, Ordering::Release);
            return Ok(());
        }
        waiter.until(|| self.generation.load(Ordering::Acquire) != gen)
    }
}

/// Block lag of each thread behind the global front thread under lockstep
/// (barrier) execution.
pub(crate) fn lockstep_offsets(cfg: &PipelineConfig) -> Vec<usize> {
    let mut off = Vec::with_capacity(cfg.threads());
    let mut acc = 0;
    for i in 0..cfg.threads() {
        if let Some((_, min)) = Gate::for_thread(i, cfg).prev {
            acc += min;
        }
        off.push(acc);
    }
    off
}

pub(crate) fn uses_barrier(cfg: &PipelineConfig) -> bool {
    cfg.sync == SyncMode::Barrier
}
