use chrono::{Duration, Utc};
use parking_lot::Mutex;

use crate::pipeline::Timestamp;

/// Time source for deadlines and event stamps.
pub trait Clock: Send + Sync {
    fn now(&self) -> Timestamp;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> Timestamp {
        Utc::now()
    }
}

/// Clock that only moves when told to. Used by simulations and tests.
#[derive(Debug)]
pub struct ManualClock {
    now: Mutex<Timestamp>,
}

impl ManualClock {
    pub fn new(start: Timestamp) -> Self {
        Self { now: Mutex::new(start) }
    }

    pub fn advance_secs(&self, secs: f64) {
        let ms = (secs * 1000.0).round() as i64;
        *self.now.lock() += Duration::milliseconds(ms);
    }

    pub fn set(&self, t: Timestamp) {
        *self.now.lock() = t;
    }
}

impl Clock for ManualClock {
    fn now(&self) -> Timestamp {
        *self.now.lock()
    }
}
