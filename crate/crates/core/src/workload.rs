//! Platform construction and execution of application pipelines.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::rc::Rc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::io::{Backend, FileHandle, IoController};
use crate::metrics::{MemorySample, Metrics, OpKind, OpRecord, Recorder};
use crate::page_cache::{CacheStats, CacheTunables, MemoryManager, WritePolicy};
use crate::sim::{EngineStats, Sim, SimTime, Simulation, TraceEvent};
use crate::storage::{DeviceSpec, LinkSpec, NetworkLink, StorageDevice, MB};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileSpec {
    pub name: String,
    pub size: u64,
}

impl FileSpec {
    pub fn new(name: impl Into<String>, size: u64) -> Self {
        FileSpec {
            name: name.into(),
            size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub name: String,
    #[serde(default)]
    pub inputs: Vec<FileSpec>,
    #[serde(default)]
    pub outputs: Vec<FileSpec>,
    /// Seconds of computation between the read and write phases.
    #[serde(default)]
    pub cpu_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineSpec {
    pub tasks: Vec<TaskSpec>,
    #[serde(default = "yes")]
    pub release_anon_after_task: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HostSpec {
    pub name: String,
    pub total_mem: u64,
    #[serde(default = "default_memory_bw")]
    pub memory_bw: f64,
    /// Disk holding the host's files; it backs the host page cache.
    pub disk: DeviceSpec,
    #[serde(default)]
    pub cache: CacheTunables,
}

fn default_memory_bw() -> f64 {
    4812.0 * MB
}

/// NFS export of `server`'s disk mounted on `client` over `link`. The server
/// cache is always writethrough.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MountSpec {
    pub name: String,
    pub client: String,
    pub server: String,
    pub link: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlatformSpec {
    pub hosts: Vec<HostSpec>,
    #[serde(default)]
    pub links: Vec<LinkSpec>,
    #[serde(default)]
    pub mounts: Vec<MountSpec>,
}

impl PlatformSpec {
    pub fn host(&self, name: &str) -> Option<&HostSpec> {
        self.hosts.iter().find(|h| h.name == name)
    }

    pub fn mount(&self, name: &str) -> Option<&MountSpec> {
        self.mounts.iter().find(|m| m.name == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    /// Host running the application instances.
    pub host: String,
    /// NFS mount holding the files; local disk when absent.
    #[serde(default)]
    pub mount: Option<String>,
    #[serde(default = "default_chunk_size")]
    pub chunk_size: u64,
    #[serde(default = "one")]
    pub instances: usize,
    pub pipeline: PipelineSpec,
}

fn default_chunk_size() -> u64 {
    1_000_000
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    pub page_cache: bool,
    pub write_policy: WritePolicy,
    /// Fixed sampling period in seconds, in addition to event sampling.
    pub cadence: Option<f64>,
    /// Sample memory after every cache state change.
    pub event_sampling: bool,
    /// Snapshot cache contents after every application file operation.
    pub snapshots: bool,
    /// Full structural audit of the cache after every change (slow).
    pub check_invariants: bool,
    pub trace: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            page_cache: true,
            write_policy: WritePolicy::Writeback,
            cadence: None,
            event_sampling: true,
            snapshots: true,
            check_invariants: false,
            trace: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskTiming {
    pub instance: usize,
    pub task: String,
    pub start: SimTime,
    pub read: f64,
    pub compute: f64,
    pub write: f64,
    pub end: SimTime,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HostReport {
    pub name: String,
    pub total_mem: u64,
    pub cache: CacheStats,
    pub disk_bytes_read: u64,
    pub disk_bytes_written: u64,
    pub final_memory: MemorySample,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub makespan: SimTime,
    pub page_cache: bool,
    pub write_policy: WritePolicy,
    pub instances: usize,
    pub tasks: Vec<TaskTiming>,
    pub hosts: Vec<HostReport>,
    pub engine: EngineStats,
    #[serde(skip)]
    pub metrics: Metrics,
    #[serde(skip)]
    pub trace: Vec<TraceEvent>,
    /// Real time spent running the simulation, in seconds.
    #[serde(skip)]
    pub wall_clock: f64,
}

impl RunReport {
    pub fn timings_of(&self, instance: usize) -> impl Iterator<Item = &TaskTiming> {
        self.tasks.iter().filter(move |t| t.instance == instance)
    }

    pub fn host(&self, name: &str) -> Option<&HostReport> {
        self.hosts.iter().find(|h| h.name == name)
    }
}

/// File name used by instance `k` when `n` instances run concurrently.
pub fn instance_file(name: &str, k: usize, n: usize) -> String {
    if n > 1 {
        format!("{name}_{k}")
    } else {
        name.to_string()
    }
}

/// Simulated hosts, links and the engine they run on.
pub struct Platform {
    pub sim: Simulation,
    pub hosts: BTreeMap<String, Rc<MemoryManager>>,
    pub links: BTreeMap<String, Rc<NetworkLink>>,
}

impl Platform {
    pub fn build(spec: &PlatformSpec, opts: &RunOptions, recorder: Option<Rc<Recorder>>) -> Result<Platform> {
        let sim = if opts.trace {
            Simulation::with_trace()
        } else {
            Simulation::new()
        };
        let h = sim.handle();
        let mut hosts = BTreeMap::new();
        for hs in &spec.hosts {
            let mem = StorageDevice::attach(
                &h,
                DeviceSpec::symmetric(format!("{}:memory", hs.name), hs.total_mem, hs.memory_bw),
            )?;
            let disk = StorageDevice::attach(&h, hs.disk.clone())?;
            let mm = MemoryManager::new(&hs.name, &h, hs.total_mem, hs.cache.clone(), mem, disk)?;
            mm.set_full_checks(opts.check_invariants);
            if let Some(rec) = &recorder {
                mm.set_observer(rec.clone());
            }
            if opts.page_cache {
                h.spawn_daemon(format!("{}:periodic-flush", hs.name), mm.clone().periodic_flush());
            }
            if hosts.insert(hs.name.clone(), mm).is_some() {
                return Err(SimError::Config(format!("duplicate host `{}`", hs.name)));
            }
        }
        let mut links = BTreeMap::new();
        for ls in &spec.links {
            let link = NetworkLink::attach(&h, ls.clone())?;
            if links.insert(ls.name.clone(), link).is_some() {
                return Err(SimError::Config(format!("duplicate link `{}`", ls.name)));
            }
        }
        Ok(Platform { sim, hosts, links })
    }

    pub fn handle(&self) -> Sim {
        self.sim.handle()
    }

    pub fn host(&self, name: &str) -> Result<&Rc<MemoryManager>> {
        self.hosts
            .get(name)
            .ok_or_else(|| SimError::Config(format!("unknown host `{name}`")))
    }

    /// I/O controller for an application on `host`, optionally going to an
    /// NFS mount.
    pub fn controller(
        &self,
        spec: &PlatformSpec,
        host: &str,
        mount: Option<&str>,
        opts: &RunOptions,
    ) -> Result<IoController> {
        let mm = self.host(host)?.clone();
        let backend = match mount {
            None if opts.page_cache => Backend::Cached,
            None => Backend::Direct,
            Some(name) => {
                let m = spec
                    .mount(name)
                    .ok_or_else(|| SimError::Config(format!("unknown mount `{name}`")))?;
                if m.client != host {
                    return Err(SimError::Config(format!(
                        "mount `{name}` belongs to host `{}`, not `{host}`",
                        m.client
                    )));
                }
                let link = self
                    .links
                    .get(&m.link)
                    .ok_or_else(|| SimError::Config(format!("unknown link `{}`", m.link)))?
                    .clone();
                let server = self.host(&m.server)?.clone();
                if opts.page_cache {
                    Backend::Remote { link, server }
                } else {
                    Backend::RemoteDirect { link, server }
                }
            }
        };
        Ok(IoController::new(mm, backend, opts.write_policy))
    }
}

/// Context shared by the tasks of one application instance.
pub struct TaskContext {
    pub io: IoController,
    pub instance: usize,
    pub chunk_size: u64,
    pub recorder: Rc<Recorder>,
    pub snapshots: bool,
}

impl TaskContext {
    fn snapshot(&self) {
        if !self.snapshots {
            return;
        }
        if let Some(cache) = self.io.file_cache() {
            let sim = cache.sim();
            self.recorder.snapshot_cache(cache.host(), sim.now(), &cache.state());
        }
    }

    fn handle(&self, f: &FileSpec) -> Result<FileHandle> {
        FileHandle::new(&f.name, f.size, self.chunk_size.min(f.size))
    }

    fn record(&self, task: &TaskSpec, op: OpKind, files: &[FileSpec], start: SimTime, end: SimTime) {
        let file = files.iter().map(|f| f.name.as_str()).collect::<Vec<_>>().join(";");
        self.recorder.record_op(OpRecord {
            instance: self.instance,
            task: task.name.clone(),
            op,
            file,
            start,
            end,
        });
    }
}

/// Reads every input, computes for `cpu_time`, writes every output, then
/// releases the task's anonymous memory if asked to.
pub async fn run_task(ctx: &TaskContext, task: &TaskSpec, release_anon: bool) -> Result<TaskTiming> {
    let sim = ctx.io.host().sim().clone();
    let start = sim.now();
    for f in &task.inputs {
        ctx.io.read_file(&ctx.handle(f)?).await?;
        ctx.snapshot();
    }
    let read_end = sim.now();
    ctx.record(task, OpKind::Read, &task.inputs, start, read_end);

    sim.sleep(task.cpu_time).await;
    let compute_end = sim.now();
    ctx.record(task, OpKind::Compute, &[], read_end, compute_end);

    for f in &task.outputs {
        ctx.io.write_file(&ctx.handle(f)?).await?;
        ctx.snapshot();
    }
    let end = sim.now();
    ctx.record(task, OpKind::Write, &task.outputs, compute_end, end);

    if release_anon {
        let anon: u64 = task.inputs.iter().map(|f| f.size).sum();
        ctx.io.host().release_anonymous_mem(anon)?;
    }
    Ok(TaskTiming {
        instance: ctx.instance,
        task: task.name.clone(),
        start,
        read: read_end - start,
        compute: compute_end - read_end,
        write: end - compute_end,
        end,
    })
}

/// Runs the tasks of a pipeline one after the other.
pub async fn run_pipeline(ctx: &TaskContext, pipeline: &PipelineSpec) -> Result<Vec<TaskTiming>> {
    let mut out = Vec::with_capacity(pipeline.tasks.len());
    for task in &pipeline.tasks {
        out.push(run_task(ctx, task, pipeline.release_anon_after_task).await?);
    }
    Ok(out)
}

/// The pipeline as seen by instance `k` of `n`: file names made unique.
pub fn instance_pipeline(p: &PipelineSpec, k: usize, n: usize) -> PipelineSpec {
    let rename = |fs: &[FileSpec]| {
        fs.iter()
            .map(|f| FileSpec::new(instance_file(&f.name, k, n), f.size))
            .collect()
    };
    PipelineSpec {
        tasks: p
            .tasks
            .iter()
            .map(|t| TaskSpec {
                name: t.name.clone(),
                inputs: rename(&t.inputs),
                outputs: rename(&t.outputs),
                cpu_time: t.cpu_time,
            })
            .collect(),
        release_anon_after_task: p.release_anon_after_task,
    }
}

/// Inputs that no earlier task of the pipeline produces.
pub fn external_inputs(p: &PipelineSpec) -> Vec<FileSpec> {
    let mut produced = BTreeSet::new();
    let mut out = Vec::new();
    for t in &p.tasks {
        for f in &t.inputs {
            if !produced.contains(&f.name) && !out.iter().any(|o: &FileSpec| o.name == f.name) {
                out.push(f.clone());
            }
        }
        for f in &t.outputs {
            produced.insert(f.name.clone());
        }
    }
    out
}

/// Runs `workload.instances` copies of the pipeline concurrently, all
/// starting at t = 0, and collects timings and metrics.
pub fn run(platform: &PlatformSpec, workload: &WorkloadSpec, opts: &RunOptions) -> Result<RunReport> {
    if workload.instances == 0 {
        return Err(SimError::Config("instances must be >= 1".into()));
    }
    if workload.chunk_size == 0 {
        return Err(SimError::Config("chunk_size must be > 0".into()));
    }
    let recorder = Recorder::new(opts.event_sampling);
    let mut plat = Platform::build(platform, opts, Some(recorder.clone()))?;
    let sim = plat.handle();
    let n = workload.instances;
    let results = Rc::new(RefCell::new(Vec::new()));

    for k in 0..n {
        let io = plat.controller(platform, &workload.host, workload.mount.as_deref(), opts)?;
        let pipeline = instance_pipeline(&workload.pipeline, k, n);
        for f in external_inputs(&pipeline) {
            let device = io.device();
            if device.file_size(&f.name).is_none() {
                device.create_file(&f.name, f.size)?;
            }
        }
        let ctx = TaskContext {
            io,
            instance: k,
            chunk_size: workload.chunk_size,
            recorder: recorder.clone(),
            snapshots: opts.snapshots,
        };
        let results = results.clone();
        sim.spawn(format!("instance-{k}"), async move {
            let timings = run_pipeline(&ctx, &pipeline).await?;
            results.borrow_mut().extend(timings);
            Ok(())
        });
    }
    if let Some(cadence) = opts.cadence {
        if !(cadence > 0.0) {
            return Err(SimError::Config(format!("cadence must be > 0, got {cadence}")));
        }
        let hosts: Vec<_> = plat.hosts.values().cloned().collect();
        sim.spawn_daemon("sampler", recorder.clone().sample_every(sim.clone(), hosts, cadence));
    }

    let wall = Instant::now();
    let makespan = plat.sim.run_until_idle()?;
    let wall_clock = wall.elapsed().as_secs_f64();

    let mut tasks = results.take();
    tasks.sort_by(|a, b| (a.instance, a.start).cmp(&(b.instance, b.start)));
    let hosts = plat
        .hosts
        .values()
        .map(|mm| HostReport {
            name: mm.host().to_string(),
            total_mem: mm.state().total_mem(),
            cache: mm.stats(),
            disk_bytes_read: mm.disk().bytes_read(),
            disk_bytes_written: mm.disk().bytes_written(),
            final_memory: MemorySample::of(mm.host(), makespan, &mm.state()),
        })
        .collect();
    let mut metrics = recorder.take();
    metrics.ops.sort_by(|a, b| (a.instance, a.start).cmp(&(b.instance, b.start)));
    Ok(RunReport {
        makespan,
        page_cache: opts.page_cache,
        write_policy: opts.write_policy,
        instances: n,
        tasks,
        hosts,
        engine: plat.sim.handle().stats(),
        trace: plat.sim.trace(),
        metrics,
        wall_clock,
    })
}
