use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use super::block::DataBlock;
use crate::sim::SimTime;

/// Position of a block in an LRU list: last access time, then the order in
/// which blocks were placed in the list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct BlockKey {
    pub last_access: SimTime,
    pub stamp: u64,
}

/// Blocks ordered by last access (earliest first), with secondary indices
/// for dirty blocks, clean blocks and per-file blocks so that flushing,
/// eviction and cache reads do not have to walk the whole list.
#[derive(Debug, Default, Clone)]
pub struct LruList {
    blocks: BTreeMap<BlockKey, DataBlock>,
    dirty: BTreeSet<BlockKey>,
    clean: BTreeSet<BlockKey>,
    by_file: HashMap<Arc<str>, BTreeSet<BlockKey>>,
    bytes: u64,
    dirty_bytes: u64,
}

impl LruList {
    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn bytes(&self) -> u64 {
        self.bytes
    }

    pub fn dirty_bytes(&self) -> u64 {
        self.dirty_bytes
    }

    pub fn clean_bytes(&self) -> u64 {
        self.bytes - self.dirty_bytes
    }

    pub fn iter(&self) -> impl Iterator<Item = (&BlockKey, &DataBlock)> {
        self.blocks.iter()
    }

    pub fn get(&self, key: &BlockKey) -> Option<&DataBlock> {
        self.blocks.get(key)
    }

    pub fn first_key(&self) -> Option<BlockKey> {
        self.blocks.keys().next().copied()
    }

    /// First dirty block, in LRU order, whose file is not `exclude`.
    pub fn first_dirty(&self, exclude: Option<&str>) -> Option<BlockKey> {
        self.first_matching(&self.dirty, exclude)
    }

    /// First clean block, in LRU order, whose file is not `exclude`.
    pub fn first_clean(&self, exclude: Option<&str>) -> Option<BlockKey> {
        self.first_matching(&self.clean, exclude)
    }

    fn first_matching(&self, set: &BTreeSet<BlockKey>, exclude: Option<&str>) -> Option<BlockKey> {
        match exclude {
            None => set.iter().next().copied(),
            Some(name) => set
                .iter()
                .find(|k| &*self.blocks[*k].file != name)
                .copied(),
        }
    }

    pub fn first_of_file(&self, file: &str) -> Option<BlockKey> {
        self.by_file.get(file)?.iter().next().copied()
    }

    pub fn dirty_keys(&self) -> impl Iterator<Item = &BlockKey> {
        self.dirty.iter()
    }

    pub fn dirty_len(&self) -> usize {
        self.dirty.len()
    }

    pub(super) fn insert(&mut self, key: BlockKey, block: DataBlock) {
        debug_assert_eq!(key.last_access, block.last_access);
        debug_assert!(block.size > 0, "empty block");
        self.bytes += block.size;
        if block.dirty {
            self.dirty_bytes += block.size;
            self.dirty.insert(key);
        } else {
            self.clean.insert(key);
        }
        self.by_file
            .entry(block.file.clone())
            .or_default()
            .insert(key);
        let prev = self.blocks.insert(key, block);
        debug_assert!(prev.is_none(), "duplicate block key");
    }

    /// Clears the dirty flag of a block in place.
    pub(super) fn set_clean(&mut self, key: &BlockKey) {
        let block = self.blocks.get_mut(key).expect("block present");
        if block.dirty {
            block.dirty = false;
            self.dirty_bytes -= block.size;
            self.dirty.remove(key);
            self.clean.insert(*key);
        }
    }

    /// Removes `by` bytes from a block in place; the block keeps its key.
    pub(super) fn shrink(&mut self, key: &BlockKey, by: u64) {
        let block = self.blocks.get_mut(key).expect("block present");
        assert!(by < block.size, "shrinking a block of {} bytes by {by}", block.size);
        block.size -= by;
        self.bytes -= by;
        if block.dirty {
            self.dirty_bytes -= by;
        }
    }

    pub(super) fn remove(&mut self, key: &BlockKey) -> Option<DataBlock> {
        let block = self.blocks.remove(key)?;
        self.bytes -= block.size;
        if block.dirty {
            self.dirty_bytes -= block.size;
            self.dirty.remove(key);
        } else {
            self.clean.remove(key);
        }
        if let Some(keys) = self.by_file.get_mut(&block.file) {
            keys.remove(key);
            if keys.is_empty() {
                self.by_file.remove(&block.file);
            }
        }
        Some(block)
    }

    /// Number of blocks of each file; used by invariant checks.
    pub fn file_block_counts(&self) -> HashMap<Arc<str>, usize> {
        self.by_file
            .iter()
            .map(|(f, keys)| (f.clone(), keys.len()))
            .collect()
    }

    /// Recomputes the cached totals from the blocks; returns a description of
    /// the first mismatch.
    pub fn audit(&self) -> Result<(), String> {
        let mut bytes = 0;
        let mut dirty = 0;
        for (key, block) in &self.blocks {
            if key.last_access != block.last_access {
                return Err(format!("block key {key:?} out of sync with {block:?}"));
            }
            if block.size == 0 {
                return Err(format!("empty block {block:?}"));
            }
            bytes += block.size;
            if block.dirty {
                dirty += block.size;
                if !self.dirty.contains(key) {
                    return Err(format!("dirty block {key:?} missing from dirty index"));
                }
            } else if !self.clean.contains(key) {
                return Err(format!("clean block {key:?} missing from clean index"));
            }
        }
        if bytes != self.bytes || dirty != self.dirty_bytes {
            return Err(format!(
                "list totals drifted: counted {bytes}/{dirty}, stored {}/{}",
                self.bytes, self.dirty_bytes
            ));
        }
        if self.dirty.len() + self.clean.len() != self.blocks.len() {
            return Err("dirty/clean indices out of sync".into());
        }
        Ok(())
    }
}
