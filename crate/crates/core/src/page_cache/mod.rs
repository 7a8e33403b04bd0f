//! Page cache model: variable-size data blocks kept in an inactive and an
//! active LRU list, with dirty-data accounting, flushing and eviction.

mod block;
mod lru;
mod manager;
mod state;

pub use block::DataBlock;
pub use lru::{BlockKey, LruList};
pub use manager::{CacheObserver, CacheStats, MemoryManager};
pub use state::{CacheTunables, FileUsage, ListKind, PageCache, WritePolicy};
