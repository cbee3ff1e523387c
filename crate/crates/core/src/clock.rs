//! Time sources. Runs driven by scripted backends use [`LogicalClock`] so that
//! event timestamps are reproducible.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use chrono::{DateTime, SecondsFormat, Utc};

pub trait Clock: Send + Sync {
    /// Milliseconds since the Unix epoch.
    fn now_ms(&self) -> u64;

    fn now_rfc3339(&self) -> String {
        format_ms(self.now_ms())
    }
}

pub type SharedClock = Arc<dyn Clock>;

pub fn format_ms(ms: u64) -> String {
    let dt = DateTime::<Utc>::from_timestamp_millis(ms as i64).unwrap_or_default();
    dt.to_rfc3339_opts(SecondsFormat::Millis, true)
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0)
    }
}

/// Starts at a fixed instant and advances by `step_ms` on every read.
#[derive(Debug)]
pub struct LogicalClock {
    next: AtomicU64,
    step_ms: u64,
}

/// 2025-01-01T00:00:00Z
pub const LOGICAL_EPOCH_MS: u64 = 1_735_689_600_000;

impl LogicalClock {
    pub fn new(start_ms: u64, step_ms: u64) -> Self {
        Self {
            next: AtomicU64::new(start_ms),
            step_ms,
        }
    }

    /// Advance the clock without reading it, e.g. to skip past ticks consumed
    /// by a previous process.
    pub fn advance_to(&self, ms: u64) {
        self.next.fetch_max(ms, Ordering::SeqCst);
    }
}

impl Default for LogicalClock {
    fn default() -> Self {
        Self::new(LOGICAL_EPOCH_MS, 1_000)
    }
}

impl Clock for LogicalClock {
    fn now_ms(&self) -> u64 {
        self.next.fetch_add(self.step_ms, Ordering::SeqCst)
    }
}

/// Blocking waits, abstracted so retry and rate-limit delays can run on a fake clock.
pub trait Sleeper: Send + Sync {
    fn sleep_ms(&self, ms: u64);
}

pub type SharedSleeper = Arc<dyn Sleeper>;

#[derive(Debug, Default, Clone, Copy)]
pub struct ThreadSleeper;

impl Sleeper for ThreadSleeper {
    fn sleep_ms(&self, ms: u64) {
        std::thread::sleep(std::time::Duration::from_millis(ms));
    }
}

/// A clock that only moves when told to; sleeping on it advances it.
#[derive(Debug, Default)]
pub struct ManualClock {
    now: AtomicU64,
}

impl ManualClock {
    pub fn new(start_ms: u64) -> Self {
        Self {
            now: AtomicU64::new(start_ms),
        }
    }

    pub fn advance(&self, ms: u64) {
        self.now.fetch_add(ms, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now_ms(&self) -> u64 {
        self.now.load(Ordering::SeqCst)
    }
}

impl Sleeper for ManualClock {
    fn sleep_ms(&self, ms: u64) {
        self.advance(ms);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logical_clock_steps() {
        let c = LogicalClock::default();
        assert_eq!(c.now_rfc3339(), "2025-01-01T00:00:00.000Z");
        assert_eq!(c.now_rfc3339(), "2025-01-01T00:00:01.000Z");
        c.advance_to(LOGICAL_EPOCH_MS + 10_000);
        assert_eq!(c.now_ms(), LOGICAL_EPOCH_MS + 10_000);
    }

    #[test]
    fn manual_clock_moves_on_sleep() {
        let c = ManualClock::new(5);
        c.sleep_ms(10);
        assert_eq!(c.now_ms(), 15);
        assert_eq!(c.now_ms(), 15);
    }
}
