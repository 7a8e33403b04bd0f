use std::cell::{Cell, Ref, RefCell};
use std::rc::Rc;

use serde::Serialize;

use super::state::{CacheTunables, PageCache};
use crate::error::{Result, SimError};
use crate::sim::{Sim, SimTime};
use crate::storage::StorageDevice;

/// Receives the cache state after every change.
pub trait CacheObserver {
    fn memory_changed(&self, host: &str, now: SimTime, cache: &PageCache);
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct CacheStats {
    /// Bytes flushed on behalf of application reads and writes.
    pub foreground_flushed: u64,
    /// Bytes flushed by the periodic flush process.
    pub periodic_flushed: u64,
    pub evicted: u64,
    /// Bytes served from cache by reads.
    pub hit_bytes: u64,
    /// Bytes read from disk by reads.
    pub miss_bytes: u64,
    /// Bytes written into the cache by writes.
    pub written_to_cache: u64,
}

/// Page cache of one host, bound to the simulation clock, the host memory
/// device and the disk that backs cached files.
///
/// State changes are applied first; the device time they imply is awaited
/// afterwards, so concurrent processes always observe consistent state.
pub struct MemoryManager {
    host: String,
    sim: Sim,
    state: RefCell<PageCache>,
    memory: Rc<StorageDevice>,
    disk: Rc<StorageDevice>,
    observer: RefCell<Option<Rc<dyn CacheObserver>>>,
    stats: Cell<CacheStats>,
    full_checks: Cell<bool>,
}

impl MemoryManager {
    pub fn new(
        host: impl Into<String>,
        sim: &Sim,
        total_mem: u64,
        tunables: CacheTunables,
        memory: Rc<StorageDevice>,
        disk: Rc<StorageDevice>,
    ) -> Result<Rc<Self>> {
        let host = host.into();
        tunables
            .validate()
            .map_err(|e| SimError::Config(format!("host `{host}`: {e}")))?;
        if total_mem == 0 {
            return Err(SimError::Config(format!("host `{host}`: total memory must be > 0")));
        }
        Ok(Rc::new(MemoryManager {
            host,
            sim: sim.clone(),
            state: RefCell::new(PageCache::new(total_mem, tunables)),
            memory,
            disk,
            observer: RefCell::new(None),
            stats: Cell::new(CacheStats::default()),
            full_checks: Cell::new(false),
        }))
    }

    pub fn host(&self) -> &str {
        &self.host
    }

    pub fn sim(&self) -> &Sim {
        &self.sim
    }

    pub fn disk(&self) -> &Rc<StorageDevice> {
        &self.disk
    }

    pub fn memory(&self) -> &Rc<StorageDevice> {
        &self.memory
    }

    /// Read-only view of the cache state. Do not hold across an await.
    pub fn state(&self) -> Ref<'_, PageCache> {
        self.state.borrow()
    }

    pub fn stats(&self) -> CacheStats {
        self.stats.get()
    }

    pub fn set_observer(&self, observer: Rc<dyn CacheObserver>) {
        *self.observer.borrow_mut() = Some(observer);
        self.notify();
    }

    /// Enables the full structural audit after every change (slow).
    pub fn set_full_checks(&self, on: bool) {
        self.full_checks.set(on);
    }

    fn update_stats(&self, f: impl FnOnce(&mut CacheStats)) {
        let mut s = self.stats.get();
        f(&mut s);
        self.stats.set(s);
    }

    fn notify(&self) {
        let observer = self.observer.borrow().clone();
        if let Some(obs) = observer {
            obs.memory_changed(&self.host, self.sim.now(), &self.state.borrow());
        }
    }

    /// Applies a state change, checks invariants and notifies the observer.
    fn mutate<T>(&self, f: impl FnOnce(&mut PageCache) -> Result<T>) -> Result<T> {
        let out = f(&mut self.state.borrow_mut())?;
        self.check()?;
        self.notify();
        Ok(out)
    }

    fn check(&self) -> Result<()> {
        let state = self.state.borrow();
        let res = if self.full_checks.get() {
            state.check_invariants(self.sim.now())
        } else {
            state.check_accounting()
        };
        res.map_err(|detail| SimError::Invariant {
            host: self.host.clone(),
            time: self.sim.now().secs(),
            detail,
            dump: state.dump(),
        })
    }

    pub fn cached(&self, file: &str) -> u64 {
        self.state.borrow().cached(file)
    }

    pub fn free_mem(&self) -> u64 {
        self.state.borrow().free_mem()
    }

    /// Flushes up to `amount` dirty bytes (see [`PageCache::flush`]) and
    /// waits for the disk write. Returns the bytes flushed.
    pub async fn flush(&self, amount: i64, exclude: Option<&str>) -> Result<u64> {
        let flushed = self.mutate(|s| Ok(s.flush(amount, exclude)))?;
        if flushed > 0 {
            self.update_stats(|s| s.foreground_flushed += flushed);
            self.disk.write(flushed).await?;
        }
        Ok(flushed)
    }

    /// Evicts clean inactive data; returns bytes freed. Takes no simulated
    /// time.
    pub fn evict(&self, amount: i64, exclude: Option<&str>) -> Result<u64> {
        let evicted = self.mutate(|s| Ok(s.evict(amount, exclude)))?;
        self.update_stats(|s| s.evicted += evicted);
        Ok(evicted)
    }

    /// Caches clean data just read from disk. Takes no simulated time.
    pub fn add_to_cache(&self, file: &str, amount: u64) -> Result<()> {
        let now = self.sim.now();
        self.mutate(|s| s.add_to_cache(file, amount, now))
    }

    /// Caches dirty data and waits for the memory write.
    pub async fn write_to_cache(&self, file: &str, amount: u64) -> Result<f64> {
        let now = self.sim.now();
        self.mutate(|s| s.write_to_cache(file, amount, now))?;
        self.update_stats(|s| s.written_to_cache += amount);
        self.memory.write(amount).await
    }

    /// Updates the lists for a cache hit without consuming time.
    pub fn touch(&self, file: &str, amount: u64) -> Result<()> {
        let now = self.sim.now();
        self.mutate(|s| s.cache_read(file, amount, now))?;
        self.update_stats(|s| s.hit_bytes += amount);
        Ok(())
    }

    /// Cache hit: list update followed by the memory read.
    pub async fn cache_read(&self, file: &str, amount: u64) -> Result<f64> {
        self.touch(file, amount)?;
        self.memory.read(amount).await
    }

    pub(crate) fn record_miss(&self, amount: u64) {
        self.update_stats(|s| s.miss_bytes += amount);
    }

    pub fn use_anonymous_mem(&self, amount: u64) -> Result<()> {
        self.mutate(|s| s.use_anonymous_mem(amount))
    }

    pub fn release_anonymous_mem(&self, amount: u64) -> Result<()> {
        self.mutate(|s| s.release_anonymous_mem(amount))
    }

    /// Drops all cached data of a file that is about to be rewritten.
    pub fn drop_file(&self, file: &str) -> Result<u64> {
        self.mutate(|s| Ok(s.drop_file(file)))
    }

    /// Flushes dirty data in excess of the dirty limit, e.g. after anonymous
    /// memory growth shrank the available memory.
    pub async fn enforce_dirty_limit(&self) -> Result<u64> {
        let excess = {
            let s = self.state.borrow();
            s.dirty() as i64 - s.dirty_limit() as i64
        };
        self.flush(excess, None).await
    }

    /// Frees memory until at least `needed` bytes are free, escalating from
    /// eviction to flushing to deactivating active data. Fails with
    /// [`SimError::OutOfMemory`] when nothing more can be reclaimed.
    pub async fn reclaim(&self, needed: u64) -> Result<()> {
        loop {
            let (free, short) = {
                let s = self.state.borrow();
                (s.free_mem(), needed.saturating_sub(s.free_mem()))
            };
            if short == 0 {
                return Ok(());
            }
            if self.evict(short as i64, None)? > 0 {
                continue;
            }
            let has_dirty = self.state.borrow().dirty() > 0;
            if has_dirty {
                self.flush(short as i64, None).await?;
                continue;
            }
            let moved = self.mutate(|s| Ok(s.deactivate(short)))?;
            if moved > 0 {
                continue;
            }
            return Err(SimError::OutOfMemory {
                host: self.host.clone(),
                needed,
                free,
            });
        }
    }

    /// Background flush of expired dirty blocks; runs forever, one cycle per
    /// flush interval, the first at `t = flush_interval`.
    pub async fn periodic_flush(self: Rc<Self>) -> Result<()> {
        let interval = self.state.borrow().tunables().flush_interval;
        self.sim.sleep(interval).await;
        loop {
            let now = self.sim.now();
            let expired = self.mutate(|s| Ok(s.take_expired(now)))?;
            let total: u64 = expired.iter().sum();
            self.update_stats(|s| s.periodic_flushed += total);
            let mut flushing_time = 0.0;
            for size in expired {
                flushing_time += self.disk.write(size).await?;
            }
            if flushing_time < interval {
                self.sim.sleep(interval - flushing_time).await;
            }
        }
    }
}
