use std::sync::Arc;

use serde::Serialize;

use crate::sim::SimTime;

/// A run of cached pages of one file that were accessed by the same I/O
/// operation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DataBlock {
    pub file: Arc<str>,
    pub size: u64,
    pub dirty: bool,
    pub last_access: SimTime,
    pub entry_time: SimTime,
}

impl DataBlock {
    pub fn new(file: impl Into<Arc<str>>, size: u64, dirty: bool, now: SimTime) -> Self {
        DataBlock {
            file: file.into(),
            size,
            dirty,
            last_access: now,
            entry_time: now,
        }
    }

    /// Keeps the first `head` bytes in `self` and returns the rest as a new
    /// block with identical file, flag and timestamps.
    ///
    /// Panics unless `0 < head < self.size`.
    pub fn split(&mut self, head: u64) -> DataBlock {
        assert!(
            head > 0 && head < self.size,
            "split point {head} outside block of {} bytes",
            self.size
        );
        let tail = DataBlock {
            size: self.size - head,
            ..self.clone()
        };
        self.size = head;
        tail
    }
}
