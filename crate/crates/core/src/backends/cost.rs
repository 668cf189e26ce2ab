use std::ops::Sub;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::MllmRole;

/// Cumulative cost counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostSnapshot {
    /// Image-model executions (generate or edit calls).
    pub exec: u64,
    /// MLLM requests issued, retries included.
    pub calls: u64,
    pub tokens_in: u64,
    pub tokens_out: u64,
    pub image_inputs: u64,
}

impl Sub for CostSnapshot {
    type Output = CostSnapshot;

    fn sub(self, rhs: Self) -> Self {
        CostSnapshot {
            exec: self.exec - rhs.exec,
            calls: self.calls - rhs.calls,
            tokens_in: self.tokens_in - rhs.tokens_in,
            tokens_out: self.tokens_out - rhs.tokens_out,
            image_inputs: self.image_inputs - rhs.image_inputs,
        }
    }
}

impl std::ops::Add for CostSnapshot {
    type Output = CostSnapshot;

    fn add(self, rhs: Self) -> Self {
        CostSnapshot {
            exec: self.exec + rhs.exec,
            calls: self.calls + rhs.calls,
            tokens_in: self.tokens_in + rhs.tokens_in,
            tokens_out: self.tokens_out + rhs.tokens_out,
            image_inputs: self.image_inputs + rhs.image_inputs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallRecord {
    pub role: MllmRole,
    pub tokens_in: u64,
    pub tokens_out: u64,
    pub image_inputs: u64,
    pub ok: bool,
    /// Wall-clock latency; kept out of deterministic logs.
    #[serde(skip)]
    pub latency_us: u64,
}

/// Thread-safe usage accumulator for one prompt.
#[derive(Debug, Default)]
pub struct CostMeter {
    exec: AtomicU64,
    calls: AtomicU64,
    tokens_in: AtomicU64,
    tokens_out: AtomicU64,
    image_inputs: AtomicU64,
    log: Mutex<Vec<CallRecord>>,
}

impl CostMeter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record_exec(&self) {
        self.exec.fetch_add(1, Ordering::SeqCst);
    }

    pub fn record_call(&self, rec: CallRecord) {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.tokens_in.fetch_add(rec.tokens_in, Ordering::SeqCst);
        self.tokens_out.fetch_add(rec.tokens_out, Ordering::SeqCst);
        self.image_inputs.fetch_add(rec.image_inputs, Ordering::SeqCst);
        self.log.lock().expect("cost log poisoned").push(rec);
    }

    pub fn snapshot(&self) -> CostSnapshot {
        CostSnapshot {
            exec: self.exec.load(Ordering::SeqCst),
            calls: self.calls.load(Ordering::SeqCst),
            tokens_in: self.tokens_in.load(Ordering::SeqCst),
            tokens_out: self.tokens_out.load(Ordering::SeqCst),
            image_inputs: self.image_inputs.load(Ordering::SeqCst),
        }
    }

    pub fn calls(&self) -> Vec<CallRecord> {
        self.log.lock().expect("cost log poisoned").clone()
    }

    pub fn calls_for(&self, role: MllmRole) -> usize {
        self.log.lock().expect("cost log poisoned").iter().filter(|c| c.role == role).count()
    }
}
