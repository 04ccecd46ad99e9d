//! Exact traffic and FLOP counters for simulated kernel executions.

use std::fmt;
use std::ops::AddAssign;

/// Kernel phase a counter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Phase {
    /// FSA online-softmax statistics kernel.
    Stats,
    /// FSA selected-attention kernel (KV-block-major).
    BlockPass,
    /// FSA reduction kernel.
    Reduce,
    /// NSA selected-attention kernel (query-major).
    QueryMajor,
    /// Backward preprocessing: `D = rowsum(dO ∘ O)`.
    GradPrep,
    /// FSA backward block kernel (dK/dV in-task, dQ partials to buffer).
    GradBlockPass,
    /// Backward reduction (FSA: dQ partials; NSA: dK/dV partials).
    GradReduce,
    /// NSA backward query-major kernel.
    GradQueryMajor,
}

impl Phase {
    pub const ALL: [Phase; 8] = [
        Phase::Stats,
        Phase::BlockPass,
        Phase::Reduce,
        Phase::QueryMajor,
        Phase::GradPrep,
        Phase::GradBlockPass,
        Phase::GradReduce,
        Phase::GradQueryMajor,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Phase::Stats => "stats",
            Phase::BlockPass => "block_pass",
            Phase::Reduce => "reduce",
            Phase::QueryMajor => "query_major",
            Phase::GradPrep => "grad_prep",
            Phase::GradBlockPass => "grad_block_pass",
            Phase::GradReduce => "grad_reduce",
            Phase::GradQueryMajor => "grad_query_major",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Counters for one phase. `bytes_loaded` includes the KV and query subtotals.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PhaseCounters {
    pub bytes_loaded: u64,
    pub bytes_stored: u64,
    pub flops: u64,
    pub task_count: u64,
    pub inner_iterations: u64,
    /// Subtotal of `bytes_loaded` spent on K/V rows.
    pub kv_bytes_loaded: u64,
    /// Subtotal of `bytes_loaded` spent on query rows (padding included).
    pub query_bytes_loaded: u64,
}

impl PhaseCounters {
    pub fn bytes(&self) -> u64 {
        self.bytes_loaded + self.bytes_stored
    }
}

impl AddAssign<&PhaseCounters> for PhaseCounters {
    fn add_assign(&mut self, o: &PhaseCounters) {
        self.bytes_loaded += o.bytes_loaded;
        self.bytes_stored += o.bytes_stored;
        self.flops += o.flops;
        self.task_count += o.task_count;
        self.inner_iterations += o.inner_iterations;
        self.kv_bytes_loaded += o.kv_bytes_loaded;
        self.query_bytes_loaded += o.query_bytes_loaded;
    }
}

/// Element-granular recorder used inside one task; converts to bytes on the fly.
#[derive(Debug, Clone, Copy)]
pub(crate) struct TaskMeter {
    pub counters: PhaseCounters,
    bytes_per_elem: u64,
}

impl TaskMeter {
    pub fn new(bytes_per_elem: usize) -> Self {
        Self {
            counters: PhaseCounters {
                task_count: 1,
                ..Default::default()
            },
            bytes_per_elem: bytes_per_elem as u64,
        }
    }

    pub fn load_kv(&mut self, elems: usize) {
        let b = elems as u64 * self.bytes_per_elem;
        self.counters.bytes_loaded += b;
        self.counters.kv_bytes_loaded += b;
    }

    pub fn load_query(&mut self, elems: usize) {
        let b = elems as u64 * self.bytes_per_elem;
        self.counters.bytes_loaded += b;
        self.counters.query_bytes_loaded += b;
    }

    pub fn load(&mut self, elems: usize) {
        self.counters.bytes_loaded += elems as u64 * self.bytes_per_elem;
    }

    pub fn store(&mut self, elems: usize) {
        self.counters.bytes_stored += elems as u64 * self.bytes_per_elem;
    }

    pub fn flops(&mut self, n: usize) {
        self.counters.flops += n as u64;
    }

    pub fn iteration(&mut self) {
        self.counters.inner_iterations += 1;
    }
}

/// Per-phase counters of one or more engine runs. Merging is associative and
/// commutative; counters depend only on (config, selection), never on data.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrafficMeter {
    phases: [PhaseCounters; 8],
    bytes_per_elem: usize,
    /// Largest partial-result buffer (elements) a run reserved. FSA records
    /// one query head's output buffer, without the speculative exp-sum column.
    pub peak_buffer_elems: u64,
}

impl TrafficMeter {
    pub fn new(bytes_per_elem: usize) -> Self {
        Self {
            phases: [PhaseCounters::default(); 8],
            bytes_per_elem,
            peak_buffer_elems: 0,
        }
    }

    pub fn bytes_per_elem(&self) -> usize {
        self.bytes_per_elem
    }

    pub fn phase(&self, phase: Phase) -> &PhaseCounters {
        &self.phases[phase.index()]
    }

    pub(crate) fn record(&mut self, phase: Phase, task: &TaskMeter) {
        self.phases[phase.index()] += &task.counters;
    }

    /// Counts a launched task that returned before touching memory.
    pub(crate) fn record_empty_task(&mut self, phase: Phase) {
        self.phases[phase.index()].task_count += 1;
    }

    pub(crate) fn note_buffer(&mut self, elems: usize) {
        self.peak_buffer_elems = self.peak_buffer_elems.max(elems as u64);
    }

    pub fn merge(&mut self, other: &TrafficMeter) {
        for (a, b) in self.phases.iter_mut().zip(&other.phases) {
            *a += b;
        }
        self.peak_buffer_elems = self.peak_buffer_elems.max(other.peak_buffer_elems);
    }

    pub fn merged(mut self, other: &TrafficMeter) -> Self {
        self.merge(other);
        self
    }

    pub fn total(&self) -> PhaseCounters {
        let mut t = PhaseCounters::default();
        for p in &self.phases {
            t += p;
        }
        t
    }

    /// Sum over a subset of phases.
    pub fn sum_of(&self, phases: &[Phase]) -> PhaseCounters {
        let mut t = PhaseCounters::default();
        for &p in phases {
            t += self.phase(p);
        }
        t
    }

    /// Phases with any recorded activity.
    pub fn active_phases(&self) -> impl Iterator<Item = (Phase, &PhaseCounters)> {
        Phase::ALL
            .into_iter()
            .map(|p| (p, self.phase(p)))
            .filter(|(_, c)| c.task_count > 0)
    }
}
