//! Time sources.
//!
//! All latency accounting, heavy-tier windows, and revocation freshness
//! checks read time through the [`Clock`] trait so that tests and replays can
//! drive a scripted clock and produce byte-identical traces. Times are
//! monotonic milliseconds; wall-clock timestamps (receipt `signed_at`,
//! revocation windows) are carried separately as epoch milliseconds supplied
//! by the caller or derived from the scripted clock's epoch offset.

use std::sync::atomic::{AtomicU64, Ordering};

/// A monotonic millisecond clock.
pub trait Clock: Send + Sync {
    /// Milliseconds since an arbitrary fixed origin (monotonic).
    fn now_ms(&self) -> u64;

    /// Advance the clock by `ms`. Real clocks ignore this; scripted clocks
    /// move forward. Components call it to account simulated work.
    fn advance(&self, ms: u64);
}

/// Wall-backed clock for production paths.
pub struct SystemClock {
    origin: std::time::Instant,
}

impl SystemClock {
    pub fn new() -> Self {
        SystemClock {
            origin: std::time::Instant::now(),
        }
    }
}

impl Default for SystemClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        self.origin.elapsed().as_millis() as u64
    }

    fn advance(&self, _ms: u64) {}
}

/// Deterministic clock for tests and replay: starts at an epoch offset and
/// moves only when advanced.
pub struct ScriptedClock {
    now: AtomicU64,
}

impl ScriptedClock {
    pub fn starting_at(epoch_ms: u64) -> Self {
        ScriptedClock {
            now: AtomicU64::new(epoch_ms),
        }
    }

    pub fn set(&self, ms: u64) {
        self.now.store(ms, Ordering::SeqCst);
    }
}

impl Clock for ScriptedClock {
    fn now_ms(&self) -> u64 {
        self.now.load(Ordering::SeqCst)
    }

    fn advance(&self, ms: u64) {
        self.now.fetch_add(ms, Ordering::SeqCst);
    }
}
