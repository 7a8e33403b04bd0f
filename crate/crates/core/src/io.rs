//! Chunked application I/O on top of the page cache.

use std::rc::Rc;

use crate::error::{Result, SimError};
use crate::page_cache::{MemoryManager, WritePolicy};
use crate::storage::{NetworkLink, StorageDevice};

/// A file accessed chunk by chunk.
#[derive(Debug, Clone, PartialEq)]
pub struct FileHandle {
    pub name: String,
    pub size: u64,
    pub chunk_size: u64,
}

impl FileHandle {
    pub fn new(name: impl Into<String>, size: u64, chunk_size: u64) -> Result<Self> {
        let name = name.into();
        if size == 0 || chunk_size == 0 {
            return Err(SimError::Config(format!(
                "file `{name}`: size and chunk size must be > 0"
            )));
        }
        if chunk_size > size {
            return Err(SimError::Config(format!(
                "file `{name}`: chunk size {chunk_size} exceeds file size {size}"
            )));
        }
        Ok(FileHandle {
            name,
            size,
            chunk_size,
        })
    }

    /// Chunk sizes in access order; the last one may be short.
    pub fn chunks(&self) -> impl Iterator<Item = u64> + '_ {
        let cs = self.chunk_size;
        (0..self.size.div_ceil(cs)).map(move |i| cs.min(self.size - i * cs))
    }
}

/// Where application I/O goes.
#[derive(Clone)]
pub enum Backend {
    /// Local disk through the host page cache.
    Cached,
    /// Local disk, no page cache.
    Direct,
    /// NFS mount: the server's writethrough page cache and disk, reached
    /// over a network link. No client-side caching.
    Remote {
        link: Rc<NetworkLink>,
        server: Rc<MemoryManager>,
    },
    /// NFS mount with the server page cache disabled.
    RemoteDirect {
        link: Rc<NetworkLink>,
        server: Rc<MemoryManager>,
    },
}

/// Entry point for the I/O of one application instance on one host.
#[derive(Clone)]
pub struct IoController {
    mm: Rc<MemoryManager>,
    backend: Backend,
    policy: WritePolicy,
}

const MAX_PLAN_ROUNDS: usize = 64;

impl IoController {
    pub fn new(mm: Rc<MemoryManager>, backend: Backend, policy: WritePolicy) -> Self {
        IoController {
            mm,
            backend,
            policy,
        }
    }

    /// The host whose memory holds application buffers.
    pub fn host(&self) -> &Rc<MemoryManager> {
        &self.mm
    }

    pub fn backend(&self) -> &Backend {
        &self.backend
    }

    /// Device that stores the files.
    pub fn device(&self) -> &Rc<StorageDevice> {
        match &self.backend {
            Backend::Remote { server, .. } | Backend::RemoteDirect { server, .. } => server.disk(),
            _ => self.mm.disk(),
        }
    }

    /// Page cache that holds the files' data, if any.
    pub fn file_cache(&self) -> Option<&Rc<MemoryManager>> {
        match &self.backend {
            Backend::Cached => Some(&self.mm),
            Backend::Direct | Backend::RemoteDirect { .. } => None,
            Backend::Remote { server, .. } => Some(server),
        }
    }

    pub async fn read_chunk(&self, file: &str, file_size: u64, cs: u64) -> Result<f64> {
        let start = self.mm.sim().now();
        match &self.backend {
            Backend::Cached => {
                cached_read_chunk(&self.mm, file, file_size, cs, true).await?;
            }
            Backend::Direct => {
                alloc_anonymous(&self.mm, cs).await?;
                self.mm.disk().read(cs).await?;
            }
            Backend::Remote { link, server } => {
                cached_read_chunk(server, file, file_size, cs, false).await?;
                alloc_anonymous(&self.mm, cs).await?;
                link.transfer(cs).await?;
            }
            Backend::RemoteDirect { link, server } => {
                alloc_anonymous(&self.mm, cs).await?;
                server.disk().read(cs).await?;
                link.transfer(cs).await?;
            }
        }
        Ok(self.mm.sim().now() - start)
    }

    pub async fn write_chunk(&self, file: &str, cs: u64) -> Result<f64> {
        let start = self.mm.sim().now();
        match (&self.backend, self.policy) {
            (Backend::Cached, WritePolicy::Writeback) => {
                writeback_chunk(&self.mm, file, cs).await?;
            }
            (Backend::Cached, WritePolicy::Writethrough) => {
                writethrough_chunk(&self.mm, file, cs).await?;
            }
            (Backend::Direct, _) => {
                self.mm.disk().write(cs).await?;
            }
            (Backend::Remote { link, server }, _) => {
                link.transfer(cs).await?;
                writethrough_chunk(server, file, cs).await?;
            }
            (Backend::RemoteDirect { link, server }, _) => {
                link.transfer(cs).await?;
                server.disk().write(cs).await?;
            }
        }
        Ok(self.mm.sim().now() - start)
    }

    /// Reads a whole file chunk by chunk; returns the elapsed time.
    pub async fn read_file(&self, fh: &FileHandle) -> Result<f64> {
        let start = self.mm.sim().now();
        let on_device = self.device().file_size(&fh.name).is_some();
        let in_cache = self.file_cache().is_some_and(|c| c.cached(&fh.name) > 0);
        if !on_device && !in_cache {
            return Err(SimError::FileNotFound(fh.name.clone()));
        }
        for cs in fh.chunks() {
            self.read_chunk(&fh.name, fh.size, cs).await?;
        }
        Ok(self.mm.sim().now() - start)
    }

    /// Writes a whole file chunk by chunk, replacing any previous content;
    /// returns the elapsed time.
    pub async fn write_file(&self, fh: &FileHandle) -> Result<f64> {
        let start = self.mm.sim().now();
        if let Some(cache) = self.file_cache() {
            cache.drop_file(&fh.name)?;
        }
        let device = self.device().clone();
        device.create_file(&fh.name, 0)?;
        for cs in fh.chunks() {
            self.write_chunk(&fh.name, cs).await?;
            device.append(&fh.name, cs)?;
        }
        Ok(self.mm.sim().now() - start)
    }
}

/// Makes room for and allocates `amount` bytes of application memory.
async fn alloc_anonymous(mm: &MemoryManager, amount: u64) -> Result<()> {
    if mm.free_mem() < amount {
        mm.reclaim(amount).await?;
    }
    mm.use_anonymous_mem(amount)?;
    mm.enforce_dirty_limit().await?;
    Ok(())
}

struct ReadPlan {
    disk_read: u64,
    cache_read: u64,
    required: u64,
}

fn plan_read(mm: &MemoryManager, file: &str, file_size: u64, cs: u64, anon: bool) -> ReadPlan {
    let cached = mm.cached(file);
    let disk_read = cs.min(file_size.saturating_sub(cached));
    ReadPlan {
        disk_read,
        cache_read: cs - disk_read,
        required: disk_read + if anon { cs } else { 0 },
    }
}

/// Chunk read through the page cache. Uncached data is read from disk
/// first, then cached data is served from memory. With `anon`, the chunk
/// buffer is allocated as anonymous memory on the same host.
pub async fn cached_read_chunk(
    mm: &MemoryManager,
    file: &str,
    file_size: u64,
    cs: u64,
    anon: bool,
) -> Result<f64> {
    let start = mm.sim().now();
    if cs == 0 {
        return Ok(0.0);
    }
    let plan = plan_read(mm, file, file_size, cs, anon);
    let (free, evictable) = {
        let s = mm.state();
        (s.free_mem() as i64, s.evictable() as i64)
    };
    let required = plan.required as i64;
    mm.flush(required - free - evictable, Some(file)).await?;
    mm.evict(required - mm.free_mem() as i64, Some(file))?;

    // The flush above may have let other processes run; re-plan until the
    // whole chunk fits, reclaiming without exclusion as a last resort.
    let mut plan = plan_read(mm, file, file_size, cs, anon);
    let mut rounds = 0;
    while mm.free_mem() < plan.required {
        rounds += 1;
        if rounds > MAX_PLAN_ROUNDS {
            return Err(SimError::OutOfMemory {
                host: mm.host().to_string(),
                needed: plan.required,
                free: mm.free_mem(),
            });
        }
        mm.reclaim(plan.required).await?;
        plan = plan_read(mm, file, file_size, cs, anon);
    }

    if plan.cache_read > 0 {
        mm.touch(file, plan.cache_read)?;
    }
    if plan.disk_read > 0 {
        mm.add_to_cache(file, plan.disk_read)?;
        mm.record_miss(plan.disk_read);
    }
    if anon {
        mm.use_anonymous_mem(cs)?;
        mm.enforce_dirty_limit().await?;
    }
    if plan.disk_read > 0 {
        mm.disk().read(plan.disk_read).await?;
    }
    if plan.cache_read > 0 {
        mm.memory().read(plan.cache_read).await?;
    }
    Ok(mm.sim().now() - start)
}

/// Writeback chunk write: data goes to the cache as dirty blocks while the
/// dirty limit allows, otherwise the writer flushes and evicts first.
pub async fn writeback_chunk(mm: &MemoryManager, file: &str, cs: u64) -> Result<f64> {
    let start = mm.sim().now();
    if cs == 0 {
        return Ok(0.0);
    }
    let headroom = |mm: &MemoryManager| {
        let s = mm.state();
        s.dirty_limit() as i64 - s.dirty() as i64
    };
    let remain_dirty = headroom(mm);
    let mut mem_amt = 0;
    if remain_dirty > 0 {
        let want = cs.min(remain_dirty as u64);
        mm.evict(want as i64 - mm.free_mem() as i64, None)?;
        mem_amt = want.min(mm.free_mem());
    }
    mm.write_to_cache(file, mem_amt).await?;

    let mut remaining = cs - mem_amt;
    let over = (cs - mem_amt) as i64;
    let mut idle = 0;
    while remaining > 0 {
        let flushed = mm.flush(over, None).await?;
        let evicted = mm.evict(over - mm.free_mem() as i64, None)?;
        let room = headroom(mm).max(0) as u64;
        let to_cache = remaining.min(mm.free_mem()).min(room);
        if to_cache == 0 {
            // Other writers may take the room this round freed; only give up
            // when nothing at all could be freed twice in a row.
            if flushed == 0 && evicted == 0 {
                idle += 1;
                if idle >= 2 {
                    return Err(SimError::Stuck {
                        file: file.to_string(),
                        remaining,
                    });
                }
            } else {
                idle = 0;
            }
            if mm.free_mem() == 0 && room > 0 {
                mm.reclaim(remaining.min(room)).await?;
            }
            continue;
        }
        idle = 0;
        mm.write_to_cache(file, to_cache).await?;
        remaining -= to_cache;
    }
    Ok(mm.sim().now() - start)
}

/// Writethrough chunk write: disk write, then the data is cached clean.
pub async fn writethrough_chunk(mm: &MemoryManager, file: &str, cs: u64) -> Result<f64> {
    let start = mm.sim().now();
    if cs == 0 {
        return Ok(0.0);
    }
    mm.disk().write(cs).await?;
    mm.evict(cs as i64 - mm.free_mem() as i64, Some(file))?;
    if mm.free_mem() < cs {
        mm.reclaim(cs).await?;
    }
    mm.add_to_cache(file, cs)?;
    Ok(mm.sim().now() - start)
}
