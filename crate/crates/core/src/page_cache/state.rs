use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::block::DataBlock;
use super::lru::{BlockKey, LruList};
use crate::error::{Result, SimError};
use crate::sim::SimTime;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum WritePolicy {
    #[default]
    Writeback,
    Writethrough,
}

impl std::str::FromStr for WritePolicy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "writeback" => Ok(WritePolicy::Writeback),
            "writethrough" => Ok(WritePolicy::Writethrough),
            other => Err(format!("unknown write policy `{other}`")),
        }
    }
}

/// Kernel-style cache tunables. Defaults are the usual Linux values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CacheTunables {
    #[serde(default = "default_dirty_ratio")]
    pub dirty_ratio: f64,
    /// Seconds a dirty block may stay in cache before the periodic flush
    /// writes it out.
    #[serde(default = "default_expire_time")]
    pub expire_time: f64,
    /// Seconds between periodic flush cycles.
    #[serde(default = "default_flush_interval")]
    pub flush_interval: f64,
}

fn default_dirty_ratio() -> f64 {
    0.2
}
fn default_expire_time() -> f64 {
    30.0
}
fn default_flush_interval() -> f64 {
    5.0
}

impl Default for CacheTunables {
    fn default() -> Self {
        CacheTunables {
            dirty_ratio: default_dirty_ratio(),
            expire_time: default_expire_time(),
            flush_interval: default_flush_interval(),
        }
    }
}

impl CacheTunables {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(self.dirty_ratio > 0.0 && self.dirty_ratio < 1.0) {
            return Err(format!("dirty_ratio must be in (0, 1), got {}", self.dirty_ratio));
        }
        if !(self.expire_time >= 0.0 && self.expire_time.is_finite()) {
            return Err(format!("expire_time must be >= 0, got {}", self.expire_time));
        }
        if !(self.flush_interval > 0.0 && self.flush_interval.is_finite()) {
            return Err(format!("flush_interval must be > 0, got {}", self.flush_interval));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ListKind {
    Inactive,
    Active,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct FileUsage {
    pub cached: u64,
    pub dirty: u64,
}

/// Page cache state of one host: the inactive and active LRU lists plus
/// memory accounting. Every method is instantaneous; the caller accounts
/// for device time (see `MemoryManager`).
///
/// After every public mutation: `free + anonymous + cached == total`, and
/// `active <= 2 * inactive` in bytes.
#[derive(Debug, Clone)]
pub struct PageCache {
    total_mem: u64,
    free_mem: u64,
    anonymous: u64,
    tunables: CacheTunables,
    inactive: LruList,
    active: LruList,
    stamp: u64,
    // Dirty blocks by entry time, for the periodic flush.
    expiry: BTreeSet<(SimTime, ListKind, BlockKey)>,
    files: HashMap<Arc<str>, FileUsage>,
}

impl PageCache {
    pub fn new(total_mem: u64, tunables: CacheTunables) -> Self {
        PageCache {
            total_mem,
            free_mem: total_mem,
            anonymous: 0,
            tunables,
            inactive: LruList::default(),
            active: LruList::default(),
            stamp: 0,
            expiry: BTreeSet::new(),
            files: HashMap::new(),
        }
    }

    /// Builds a cache whose lists hold exactly the given blocks, in order.
    /// Each list must already be sorted by last access.
    pub fn with_lists(
        total_mem: u64,
        tunables: CacheTunables,
        inactive: Vec<DataBlock>,
        active: Vec<DataBlock>,
    ) -> Result<Self> {
        let mut cache = PageCache::new(total_mem, tunables);
        for (kind, blocks) in [(ListKind::Inactive, inactive), (ListKind::Active, active)] {
            let mut prev = SimTime(f64::NEG_INFINITY);
            for block in blocks {
                if block.last_access < prev {
                    return Err(SimError::Contract(format!("{kind:?} list not sorted by last access")));
                }
                if block.size == 0 || block.entry_time > block.last_access {
                    return Err(SimError::Contract(format!("malformed block {block:?}")));
                }
                if block.size > cache.free_mem {
                    return Err(SimError::Contract("blocks exceed total memory".into()));
                }
                prev = block.last_access;
                cache.free_mem -= block.size;
                cache.attach(kind, block);
            }
        }
        Ok(cache)
    }

    pub fn tunables(&self) -> &CacheTunables {
        &self.tunables
    }

    pub fn total_mem(&self) -> u64 {
        self.total_mem
    }

    pub fn free_mem(&self) -> u64 {
        self.free_mem
    }

    pub fn anonymous(&self) -> u64 {
        self.anonymous
    }

    pub fn cached_total(&self) -> u64 {
        self.inactive.bytes() + self.active.bytes()
    }

    pub fn dirty(&self) -> u64 {
        self.inactive.dirty_bytes() + self.active.dirty_bytes()
    }

    /// Clean bytes in both lists.
    pub fn evictable(&self) -> u64 {
        self.cached_total() - self.dirty()
    }

    /// Memory not held by applications: free plus page cache.
    pub fn avail_mem(&self) -> u64 {
        self.free_mem + self.cached_total()
    }

    /// Largest amount of dirty data allowed by the dirty ratio.
    pub fn dirty_limit(&self) -> u64 {
        (self.tunables.dirty_ratio * self.avail_mem() as f64).floor() as u64
    }

    pub fn inactive_bytes(&self) -> u64 {
        self.inactive.bytes()
    }

    pub fn active_bytes(&self) -> u64 {
        self.active.bytes()
    }

    pub fn list(&self, kind: ListKind) -> &LruList {
        match kind {
            ListKind::Inactive => &self.inactive,
            ListKind::Active => &self.active,
        }
    }

    fn list_mut(&mut self, kind: ListKind) -> &mut LruList {
        match kind {
            ListKind::Inactive => &mut self.inactive,
            ListKind::Active => &mut self.active,
        }
    }

    /// Blocks of one list in LRU order.
    pub fn blocks(&self, kind: ListKind) -> Vec<DataBlock> {
        self.list(kind).iter().map(|(_, b)| b.clone()).collect()
    }

    /// Bytes of `file` held in either list.
    pub fn cached(&self, file: &str) -> u64 {
        self.files.get(file).map_or(0, |u| u.cached)
    }

    pub fn file_usage(&self, file: &str) -> FileUsage {
        self.files.get(file).copied().unwrap_or_default()
    }

    /// Per-file cached and dirty bytes, sorted by file name.
    pub fn usage_by_file(&self) -> BTreeMap<String, FileUsage> {
        self.files
            .iter()
            .map(|(f, u)| (f.to_string(), *u))
            .collect()
    }

    // All list membership changes go through attach/detach so the expiry
    // index and per-file totals stay in sync.

    fn attach(&mut self, kind: ListKind, block: DataBlock) -> BlockKey {
        self.stamp += 1;
        let key = BlockKey {
            last_access: block.last_access,
            stamp: self.stamp,
        };
        self.attach_at(kind, key, block);
        key
    }

    fn attach_at(&mut self, kind: ListKind, key: BlockKey, block: DataBlock) {
        let usage = self.files.entry(block.file.clone()).or_default();
        usage.cached += block.size;
        if block.dirty {
            usage.dirty += block.size;
            self.expiry.insert((block.entry_time, kind, key));
        }
        self.list_mut(kind).insert(key, block);
    }

    fn set_clean(&mut self, kind: ListKind, key: BlockKey) {
        let block = self.list(kind).get(&key).expect("block present");
        if !block.dirty {
            return;
        }
        let (file, size, entry) = (block.file.clone(), block.size, block.entry_time);
        self.expiry.remove(&(entry, kind, key));
        self.files.get_mut(&file).expect("file usage present").dirty -= size;
        self.list_mut(kind).set_clean(&key);
    }

    fn shrink(&mut self, kind: ListKind, key: BlockKey, by: u64) {
        let list = match kind {
            ListKind::Inactive => &self.inactive,
            ListKind::Active => &self.active,
        };
        let block = list.get(&key).expect("block present");
        let usage = self.files.get_mut(&block.file).expect("file usage present");
        usage.cached -= by;
        if block.dirty {
            usage.dirty -= by;
        }
        self.list_mut(kind).shrink(&key, by);
    }

    fn detach(&mut self, kind: ListKind, key: BlockKey) -> DataBlock {
        let block = self
            .list_mut(kind)
            .remove(&key)
            .expect("detaching a block that is not in the list");
        if block.dirty {
            self.expiry.remove(&(block.entry_time, kind, key));
        }
        let usage = self.files.get_mut(&block.file).expect("file usage present");
        usage.cached -= block.size;
        if block.dirty {
            usage.dirty -= block.size;
        }
        if usage.cached == 0 {
            self.files.remove(&block.file);
        }
        block
    }

    fn insert_new(&mut self, file: &str, amount: u64, dirty: bool, now: SimTime) -> Result<()> {
        if amount == 0 {
            return Ok(());
        }
        if amount > self.free_mem {
            return Err(SimError::Contract(format!(
                "caching {amount} bytes of `{file}` with only {} bytes free",
                self.free_mem
            )));
        }
        self.free_mem -= amount;
        self.attach(ListKind::Inactive, DataBlock::new(file, amount, dirty, now));
        Ok(())
    }

    /// Appends a clean block for data just read from disk.
    pub fn add_to_cache(&mut self, file: &str, amount: u64, now: SimTime) -> Result<()> {
        self.insert_new(file, amount, false, now)
    }

    /// Appends a dirty block for data written by an application.
    pub fn write_to_cache(&mut self, file: &str, amount: u64, now: SimTime) -> Result<()> {
        self.insert_new(file, amount, true, now)
    }

    /// Marks up to `amount` bytes of dirty data clean, least recently used
    /// first, inactive list before active list, skipping blocks of `exclude`.
    /// Returns the number of bytes that must now be written to disk.
    pub fn flush(&mut self, amount: i64, exclude: Option<&str>) -> u64 {
        if amount <= 0 {
            return 0;
        }
        let mut left = amount as u64;
        for kind in [ListKind::Inactive, ListKind::Active] {
            while left > 0 {
                let Some(key) = self.list(kind).first_dirty(exclude) else {
                    break;
                };
                let size = self.list(kind).get(&key).expect("block present").size;
                if size > left {
                    // Flushed head keeps the position; the dirty rest is re-queued.
                    let rest = DataBlock {
                        size: size - left,
                        ..self.list(kind).get(&key).expect("block present").clone()
                    };
                    self.shrink(kind, key, size - left);
                    self.attach(kind, rest);
                }
                left -= size.min(left);
                self.set_clean(kind, key);
            }
        }
        amount as u64 - left
    }

    /// Drops up to `amount` bytes of clean data from the inactive list, least
    /// recently used first, skipping blocks of `exclude`. Returns the bytes
    /// freed.
    pub fn evict(&mut self, amount: i64, exclude: Option<&str>) -> u64 {
        if amount <= 0 {
            return 0;
        }
        let mut left = amount as u64;
        while left > 0 {
            let Some(key) = self.inactive.first_clean(exclude) else {
                break;
            };
            let size = self.inactive.get(&key).expect("block present").size;
            let freed = if size > left {
                self.shrink(ListKind::Inactive, key, left);
                left
            } else {
                self.detach(ListKind::Inactive, key);
                size
            };
            left -= freed;
            self.free_mem += freed;
        }
        self.balance_lists();
        amount as u64 - left
    }

    /// Serves `amount` cached bytes of `file`: inactive blocks first, then
    /// active ones, each in LRU order. Touched clean data is merged into one
    /// fresh block; touched dirty blocks keep their entry time and move
    /// individually. Both go to the tail of the active list.
    pub fn cache_read(&mut self, file: &str, amount: u64, now: SimTime) -> Result<()> {
        if amount == 0 {
            return Ok(());
        }
        let cached = self.cached(file);
        if amount > cached {
            return Err(SimError::Contract(format!(
                "cache read of {amount} bytes of `{file}` but only {cached} cached"
            )));
        }
        let mut left = amount;
        let mut clean = 0u64;
        let mut dirty = Vec::new();
        for kind in [ListKind::Inactive, ListKind::Active] {
            while left > 0 {
                let Some(key) = self.list(kind).first_of_file(file) else {
                    break;
                };
                let mut block = self.detach(kind, key);
                if block.size > left {
                    let rest = block.split(left);
                    self.attach_at(kind, key, rest);
                }
                left -= block.size;
                if block.dirty {
                    dirty.push(block);
                } else {
                    clean += block.size;
                }
            }
        }
        debug_assert_eq!(left, 0);
        for mut block in dirty {
            block.last_access = now;
            self.attach(ListKind::Active, block);
        }
        if clean > 0 {
            self.attach(ListKind::Active, DataBlock::new(file, clean, false, now));
        }
        self.balance_lists();
        Ok(())
    }

    /// Moves least recently used active data to the inactive list until
    /// `active <= 2 * inactive`.
    pub fn balance_lists(&mut self) {
        while self.active.bytes() > 2 * self.inactive.bytes() {
            let excess = self.active.bytes() - 2 * self.inactive.bytes();
            // Moving x bytes shrinks the excess by 3x.
            let needed = excess.div_ceil(3);
            self.demote_head(needed);
        }
    }

    /// Moves up to `amount` bytes from the head of the active list to the
    /// inactive list; returns bytes moved.
    fn demote_head(&mut self, amount: u64) -> u64 {
        let Some(key) = self.active.first_key() else {
            return 0;
        };
        let mut block = self.detach(ListKind::Active, key);
        if block.size > amount {
            let rest = block.split(amount);
            self.attach_at(ListKind::Active, key, rest);
        }
        let moved = block.size;
        self.attach(ListKind::Inactive, block);
        moved
    }

    /// Moves `amount` bytes of active data to the inactive list regardless of
    /// list balance. Only used when normal reclaim cannot free enough memory.
    pub fn deactivate(&mut self, amount: u64) -> u64 {
        let mut moved = 0;
        while moved < amount && !self.active.is_empty() {
            moved += self.demote_head(amount - moved);
        }
        moved
    }

    /// Removes every block of `file` (used when a file is truncated and
    /// rewritten). Dirty data is discarded. Returns bytes freed.
    pub fn drop_file(&mut self, file: &str) -> u64 {
        let mut freed = 0;
        for kind in [ListKind::Inactive, ListKind::Active] {
            while let Some(key) = self.list(kind).first_of_file(file) {
                freed += self.detach(kind, key).size;
            }
        }
        self.free_mem += freed;
        self.balance_lists();
        freed
    }

    /// Dirty blocks whose age exceeds the expiration time, inactive list
    /// first, each list in LRU order. They are marked clean; the returned
    /// sizes are what the caller must write to disk.
    pub fn take_expired(&mut self, now: SimTime) -> Vec<u64> {
        let expire = self.tunables.expire_time;
        let mut expired: Vec<(ListKind, BlockKey)> = self
            .expiry
            .iter()
            .take_while(|(entry, _, _)| now - *entry > expire)
            .map(|(_, kind, key)| (*kind, *key))
            .collect();
        expired.sort();
        expired
            .into_iter()
            .map(|(kind, key)| {
                let mut block = self.detach(kind, key);
                block.dirty = false;
                let size = block.size;
                self.attach_at(kind, key, block);
                size
            })
            .collect()
    }

    pub fn use_anonymous_mem(&mut self, amount: u64) -> Result<()> {
        if amount > self.free_mem {
            return Err(SimError::Contract(format!(
                "allocating {amount} bytes of anonymous memory with only {} free",
                self.free_mem
            )));
        }
        self.free_mem -= amount;
        self.anonymous += amount;
        Ok(())
    }

    pub fn release_anonymous_mem(&mut self, amount: u64) -> Result<()> {
        if amount > self.anonymous {
            return Err(SimError::Contract(format!(
                "releasing {amount} bytes of anonymous memory, only {} in use",
                self.anonymous
            )));
        }
        self.anonymous -= amount;
        self.free_mem += amount;
        Ok(())
    }

    /// Constant-time accounting checks, cheap enough to run after every
    /// operation.
    pub fn check_accounting(&self) -> std::result::Result<(), String> {
        let cached = self.cached_total();
        if self.free_mem + self.anonymous + cached != self.total_mem {
            return Err(format!(
                "free {} + anonymous {} + cached {cached} != total {}",
                self.free_mem, self.anonymous, self.total_mem
            ));
        }
        if self.active.bytes() > 2 * self.inactive.bytes() {
            return Err(format!(
                "active {} > 2 x inactive {}",
                self.active.bytes(),
                self.inactive.bytes()
            ));
        }
        let dirty_blocks = self.inactive.dirty_len() + self.active.dirty_len();
        if self.expiry.len() != dirty_blocks {
            return Err(format!(
                "expiry index has {} entries for {dirty_blocks} dirty blocks",
                self.expiry.len()
            ));
        }
        Ok(())
    }

    /// Full structural audit: accounting, list indices, LRU order, timestamp
    /// sanity and per-file totals.
    pub fn check_invariants(&self, now: SimTime) -> std::result::Result<(), String> {
        self.check_accounting()?;
        let mut per_file: HashMap<Arc<str>, FileUsage> = HashMap::new();
        for kind in [ListKind::Inactive, ListKind::Active] {
            let list = self.list(kind);
            list.audit()?;
            let mut prev = SimTime(f64::NEG_INFINITY);
            for (_, block) in list.iter() {
                if block.last_access < prev {
                    return Err(format!("{kind:?} list out of LRU order at {block:?}"));
                }
                prev = block.last_access;
                if block.entry_time > block.last_access || block.last_access > now {
                    return Err(format!("timestamps out of order for {block:?} at {now}"));
                }
                let u = per_file.entry(block.file.clone()).or_default();
                u.cached += block.size;
                if block.dirty {
                    u.dirty += block.size;
                }
            }
        }
        if per_file != self.files {
            return Err("per-file usage out of sync with lists".into());
        }
        Ok(())
    }

    /// Human-readable dump for diagnostics.
    pub fn dump(&self) -> String {
        let mut out = format!(
            "total={} free={} anonymous={} cached={} dirty={} inactive={} active={}\n",
            self.total_mem,
            self.free_mem,
            self.anonymous,
            self.cached_total(),
            self.dirty(),
            self.inactive.bytes(),
            self.active.bytes()
        );
        for kind in [ListKind::Inactive, ListKind::Active] {
            let list = self.list(kind);
            let _ = writeln!(out, "{kind:?} ({} blocks):", list.len());
            for (_, b) in list.iter().take(50) {
                let _ = writeln!(
                    out,
                    "  {} size={} dirty={} last_access={} entry={}",
                    b.file, b.size, b.dirty as u8, b.last_access, b.entry_time
                );
            }
            if list.len() > 50 {
                let _ = writeln!(out, "  ... {} more", list.len() - 50);
            }
        }
        out
    }
}
