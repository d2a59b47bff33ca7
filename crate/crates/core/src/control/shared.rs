use std::sync::Arc;

use parking_lot::{Mutex, MutexGuard, RwLock, RwLockReadGuard, RwLockWriteGuard};

use super::{Machine, MachineSnapshot};

/// Shared owner of a [`Machine`].
///
/// Every mutation is serialized through the write lock; reads share the read
/// lock. Advancing simulated time additionally requires [`TimeControl`], so a
/// running procedure can hold the clock while the background ticker skips.
#[derive(Clone)]
pub struct SharedMachine {
    inner: Arc<RwLock<Machine>>,
    time: Arc<Mutex<()>>,
}

/// Exclusive right to advance simulated time.
pub struct TimeControl<'a> {
    _guard: MutexGuard<'a, ()>,
}

impl SharedMachine {
    pub fn new(machine: Machine) -> Self {
        SharedMachine {
            inner: Arc::new(RwLock::new(machine)),
            time: Arc::new(Mutex::new(())),
        }
    }

    pub fn read(&self) -> RwLockReadGuard<'_, Machine> {
        self.inner.read()
    }

    pub fn write(&self) -> RwLockWriteGuard<'_, Machine> {
        self.inner.write()
    }

    pub fn snapshot(&self) -> MachineSnapshot {
        self.inner.read().snapshot()
    }

    /// Blocks until no one else is driving the clock.
    pub fn time_control(&self) -> TimeControl<'_> {
        TimeControl {
            _guard: self.time.lock(),
        }
    }

    /// Ticks by `dt` seconds unless a procedure currently owns the clock.
    /// Returns whether the tick happened.
    pub fn tick_if_free(&self, dt: f64) -> bool {
        match self.time.try_lock() {
            Some(_guard) => self.inner.write().tick(dt).is_ok(),
            None => false,
        }
    }
}
