//! Memory profiles, per-operation records and cache snapshots, plus their
//! CSV/JSON export.
//!
//! Files written by [`export`]:
//!
//! | file | columns |
//! |------|---------|
//! | `memory_profile.csv` | `time,host,total_used,cached,dirty,anonymous,free` |
//! | `ops.csv` | `instance,task,op,file,start,end,duration` |
//! | `cache_snapshots.csv` | `time,host,file,cached_bytes,dirty_bytes` |
//! | `summary.json` | run summary |
//!
//! Times are seconds with 6 decimals, byte counts are integers.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;
use std::rc::Rc;

use serde::Serialize;

use crate::error::Result;
use crate::page_cache::{CacheObserver, FileUsage, MemoryManager, PageCache};
use crate::sim::{Sim, SimTime};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MemorySample {
    pub time: SimTime,
    pub host: String,
    pub total_used: u64,
    pub cached: u64,
    pub dirty: u64,
    pub anonymous: u64,
    pub free: u64,
}

impl MemorySample {
    pub fn of(host: &str, now: SimTime, cache: &PageCache) -> Self {
        let cached = cache.cached_total();
        MemorySample {
            time: now,
            host: host.to_string(),
            total_used: cached + cache.anonymous(),
            cached,
            dirty: cache.dirty(),
            anonymous: cache.anonymous(),
            free: cache.free_mem(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum OpKind {
    Read,
    Compute,
    Write,
}

impl OpKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OpKind::Read => "read",
            OpKind::Compute => "compute",
            OpKind::Write => "write",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OpRecord {
    pub instance: usize,
    pub task: String,
    pub op: OpKind,
    /// Files touched by the phase, separated by `;`.
    pub file: String,
    pub start: SimTime,
    pub end: SimTime,
}

impl OpRecord {
    pub fn duration(&self) -> f64 {
        self.end - self.start
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CacheSnapshot {
    pub time: SimTime,
    pub host: String,
    pub files: BTreeMap<String, FileUsage>,
}

impl CacheSnapshot {
    pub fn of(host: &str, now: SimTime, cache: &PageCache) -> Self {
        CacheSnapshot {
            time: now,
            host: host.to_string(),
            files: cache.usage_by_file(),
        }
    }

    pub fn cached(&self, file: &str) -> u64 {
        self.files.get(file).map_or(0, |u| u.cached)
    }
}

/// Everything recorded during a run.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Metrics {
    pub samples: Vec<MemorySample>,
    pub ops: Vec<OpRecord>,
    pub snapshots: Vec<CacheSnapshot>,
}

impl Metrics {
    pub fn samples_for<'a>(&'a self, host: &'a str) -> impl Iterator<Item = &'a MemorySample> + 'a {
        self.samples.iter().filter(move |s| s.host == host)
    }
}

/// Collects metrics while the simulation runs. Samples taken at the same
/// instant on the same host are coalesced into the last one.
#[derive(Debug, Default)]
pub struct Recorder {
    event_sampling: bool,
    data: RefCell<Metrics>,
    last_sample: RefCell<HashMap<String, usize>>,
}

impl Recorder {
    pub fn new(event_sampling: bool) -> Rc<Self> {
        Rc::new(Recorder {
            event_sampling,
            ..Recorder::default()
        })
    }

    pub fn sample_memory(&self, host: &str, now: SimTime, cache: &PageCache) {
        let sample = MemorySample::of(host, now, cache);
        let mut data = self.data.borrow_mut();
        let mut last = self.last_sample.borrow_mut();
        if let Some(&i) = last.get(host) {
            if data.samples[i].time == now {
                data.samples[i] = sample;
                return;
            }
        }
        last.insert(host.to_string(), data.samples.len());
        data.samples.push(sample);
    }

    pub fn snapshot_cache(&self, host: &str, now: SimTime, cache: &PageCache) {
        self.data
            .borrow_mut()
            .snapshots
            .push(CacheSnapshot::of(host, now, cache));
    }

    pub fn record_op(&self, op: OpRecord) {
        debug_assert!(op.end >= op.start);
        self.data.borrow_mut().ops.push(op);
    }

    /// Periodic sampler over all hosts; meant to run as a daemon.
    pub async fn sample_every(self: Rc<Self>, sim: Sim, hosts: Vec<Rc<MemoryManager>>, cadence: f64) -> Result<()> {
        loop {
            for mm in &hosts {
                self.sample_memory(mm.host(), sim.now(), &mm.state());
            }
            sim.sleep(cadence).await;
        }
    }

    pub fn take(&self) -> Metrics {
        self.last_sample.borrow_mut().clear();
        std::mem::take(&mut *self.data.borrow_mut())
    }
}

impl CacheObserver for Recorder {
    fn memory_changed(&self, host: &str, now: SimTime, cache: &PageCache) {
        if self.event_sampling {
            self.sample_memory(host, now, cache);
        }
    }
}

fn t6(t: SimTime) -> String {
    format!("{:.6}", t.secs())
}

fn csv_err(e: csv::Error) -> std::io::Error {
    std::io::Error::other(e)
}

pub fn write_memory_profile(path: &Path, samples: &[MemorySample]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["time", "host", "total_used", "cached", "dirty", "anonymous", "free"])
        .map_err(csv_err)?;
    for s in samples {
        w.write_record([
            t6(s.time),
            s.host.clone(),
            s.total_used.to_string(),
            s.cached.to_string(),
            s.dirty.to_string(),
            s.anonymous.to_string(),
            s.free.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_ops(path: &Path, ops: &[OpRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["instance", "task", "op", "file", "start", "end", "duration"])
        .map_err(csv_err)?;
    for op in ops {
        w.write_record([
            op.instance.to_string(),
            op.task.clone(),
            op.op.as_str().to_string(),
            op.file.clone(),
            t6(op.start),
            t6(op.end),
            format!("{:.6}", op.duration()),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_snapshots(path: &Path, snapshots: &[CacheSnapshot]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["time", "host", "file", "cached_bytes", "dirty_bytes"])
        .map_err(csv_err)?;
    for snap in snapshots {
        for (file, usage) in &snap.files {
            w.write_record([
                t6(snap.time),
                snap.host.clone(),
                file.clone(),
                usage.cached.to_string(),
                usage.dirty.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes the CSV files and `summary.json` into `dir`, creating it if needed.
/// The wall-clock time of the run goes to a separate `wall_clock.json` so
/// that the other files are identical across repeated runs.
pub fn export(dir: &Path, metrics: &Metrics, summary: &impl Serialize, wall_clock: Option<f64>) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_memory_profile(&dir.join("memory_profile.csv"), &metrics.samples)?;
    write_ops(&dir.join("ops.csv"), &metrics.ops)?;
    write_snapshots(&dir.join("cache_snapshots.csv"), &metrics.snapshots)?;
    let json = serde_json::to_string_pretty(summary).map_err(std::io::Error::other)?;
    fs::write(dir.join("summary.json"), json + "\n")?;
    if let Some(secs) = wall_clock {
        let json = serde_json::json!({ "wall_clock_seconds": secs });
        fs::write(dir.join("wall_clock.json"), format!("{json:#}\n"))?;
    }
    Ok(())
}
