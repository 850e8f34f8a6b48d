//! Accounting of bytes held for the backward pass.

use serde::Serialize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum MemoryCategory {
    /// Activations recorded inside a stage (F-block internals, recompute buffers).
    InStageActivation,
    /// The two streams cached at the end of a reversible stage.
    StageOutput,
    /// Activations recorded by a downsampling layer.
    DownsamplerActivation,
    Parameter,
}

impl MemoryCategory {
    pub const ALL: [MemoryCategory; 4] = [
        MemoryCategory::InStageActivation,
        MemoryCategory::StageOutput,
        MemoryCategory::DownsamplerActivation,
        MemoryCategory::Parameter,
    ];

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct MemoryEvent {
    pub step: usize,
    pub category: MemoryCategory,
    pub delta: i64,
}

/// Running byte counts per category with peak tracking and a full event log.
///
/// `peak_bytes` covers all categories; `peak_activation_bytes` excludes
/// [`MemoryCategory::Parameter`], which is what depth sweeps compare.
#[derive(Clone, Debug, Default, Serialize)]
pub struct MemoryLedger {
    current: [i64; 4],
    peak_bytes: i64,
    peak_activation_bytes: i64,
    events: Vec<MemoryEvent>,
}

impl MemoryLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn alloc(&mut self, category: MemoryCategory, bytes: usize) {
        self.record(category, bytes as i64);
    }

    pub fn free(&mut self, category: MemoryCategory, bytes: usize) {
        self.record(category, -(bytes as i64));
    }

    fn record(&mut self, category: MemoryCategory, delta: i64) {
        if delta == 0 {
            return;
        }
        let slot = &mut self.current[category.index()];
        *slot += delta;
        debug_assert!(*slot >= 0, "{category:?} went negative");
        self.events.push(MemoryEvent { step: self.events.len(), category, delta });
        let total = self.total_bytes() as i64;
        let act = self.activation_bytes() as i64;
        self.peak_bytes = self.peak_bytes.max(total);
        self.peak_activation_bytes = self.peak_activation_bytes.max(act);
    }

    pub fn current(&self, category: MemoryCategory) -> usize {
        self.current[category.index()] as usize
    }

    pub fn total_bytes(&self) -> usize {
        self.current.iter().sum::<i64>() as usize
    }

    /// Current bytes excluding parameters.
    pub fn activation_bytes(&self) -> usize {
        (self.total_bytes() as i64 - self.current[MemoryCategory::Parameter.index()]) as usize
    }

    pub fn peak_bytes(&self) -> usize {
        self.peak_bytes as usize
    }

    pub fn peak_activation_bytes(&self) -> usize {
        self.peak_activation_bytes as usize
    }

    pub fn events(&self) -> &[MemoryEvent] {
        &self.events
    }

    /// Sum of all logged deltas; equals [`Self::total_bytes`] at every step.
    pub fn replayed_total(&self) -> i64 {
        self.events.iter().map(|e| e.delta).sum()
    }

    /// Snapshot of the per-category counts.
    pub fn summary(&self) -> LedgerSummary {
        LedgerSummary {
            in_stage_activation: self.current(MemoryCategory::InStageActivation),
            stage_output: self.current(MemoryCategory::StageOutput),
            downsampler_activation: self.current(MemoryCategory::DownsamplerActivation),
            parameter: self.current(MemoryCategory::Parameter),
            peak_bytes: self.peak_bytes(),
            peak_activation_bytes: self.peak_activation_bytes(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct LedgerSummary {
    pub in_stage_activation: usize,
    pub stage_output: usize,
    pub downsampler_activation: usize,
    pub parameter: usize,
    pub peak_bytes: usize,
    pub peak_activation_bytes: usize,
}
