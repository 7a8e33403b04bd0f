//! Single-threaded discrete-event kernel.
//!
//! Logical processes are plain futures polled by a deterministic run loop.
//! They block on two kinds of activities: timers ([`Sim::sleep`]) and flows
//! on shared resources ([`Sim::transfer`]). A resource splits its capacity
//! equally between its active flows; rates are recomputed only when a flow
//! starts or finishes.
//!
//! Fair sharing is tracked with a per-resource virtual clock: `service` is the
//! number of bytes every active flow has received since the resource last went
//! idle, so a flow started at service `s` with `n` bytes finishes when service
//! reaches `s + n`. This keeps each arrival or departure at `O(log flows)`.

use std::cell::{Cell, RefCell};
use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};
use std::fmt;
use std::future::Future;
use std::ops::{Add, Sub};
use std::pin::Pin;
use std::rc::Rc;
use std::task::{Context, Poll, Waker};

use serde::{Serialize, Serializer};

use crate::error::{Result, SimError};

/// A point on the virtual clock, in seconds.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SimTime(pub f64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0.0);

    pub fn secs(self) -> f64 {
        self.0
    }
}

impl Eq for SimTime {}

impl PartialOrd for SimTime {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for SimTime {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

impl Add<f64> for SimTime {
    type Output = SimTime;
    fn add(self, rhs: f64) -> SimTime {
        SimTime(self.0 + rhs)
    }
}

impl Sub for SimTime {
    type Output = f64;
    fn sub(self, rhs: SimTime) -> f64 {
        self.0 - rhs.0
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.6}s", self.0)
    }
}

impl Serialize for SimTime {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_f64(self.0)
    }
}

pub type Pid = usize;

type ProcessFuture = Pin<Box<dyn Future<Output = Result<()>>>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ResourceId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProcessState {
    Runnable,
    /// Waiting for a flow on a resource to complete.
    Blocked,
    Sleeping,
    Terminated,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TraceEvent {
    Resume { time: SimTime, pid: Pid },
    FlowStart { time: SimTime, pid: Pid, resource: ResourceId, amount: f64 },
    FlowEnd { time: SimTime, pid: Pid, resource: ResourceId },
    Exit { time: SimTime, pid: Pid },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct EngineStats {
    pub transfers: u64,
    pub rate_updates: u64,
    pub timers_fired: u64,
    pub polls: u64,
}

/// Finish tag on a resource's virtual service clock; ordered by `total_cmp`.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Tag(f64);

impl Eq for Tag {}

impl PartialOrd for Tag {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Tag {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

struct Flow {
    pid: Pid,
    done: Rc<Cell<bool>>,
}

struct Resource {
    name: String,
    capacity: f64,
    flows: BTreeMap<(Tag, u64), Flow>,
    service: f64,
    last_update: SimTime,
    generation: u64,
    served: f64,
    busy_time: f64,
}

impl Resource {
    fn advance(&mut self, now: SimTime) {
        let dt = now - self.last_update;
        if dt > 0.0 && !self.flows.is_empty() {
            let n = self.flows.len() as f64;
            self.service += self.capacity / n * dt;
            self.served += self.capacity * dt;
            self.busy_time += dt;
        }
        self.last_update = now;
    }

    fn next_completion(&self) -> Option<SimTime> {
        let ((tag, _), _) = self.flows.first_key_value()?;
        let n = self.flows.len() as f64;
        let left = (tag.0 - self.service).max(0.0);
        Some(self.last_update + left * n / self.capacity)
    }
}

enum TimerKind {
    Wake { done: Rc<Cell<bool>> },
    Resource { id: ResourceId, generation: u64 },
}

struct Timer {
    time: SimTime,
    pid: Pid,
    seq: u64,
    kind: TimerKind,
}

impl Timer {
    fn key(&self) -> (SimTime, Pid, u64) {
        (self.time, self.pid, self.seq)
    }
}

impl PartialEq for Timer {
    fn eq(&self, other: &Self) -> bool {
        self.key() == other.key()
    }
}

impl Eq for Timer {}

impl PartialOrd for Timer {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Timer {
    // BinaryHeap is a max-heap; reverse so the earliest timer pops first.
    fn cmp(&self, other: &Self) -> Ordering {
        other.key().cmp(&self.key())
    }
}

struct ProcessInfo {
    name: String,
    daemon: bool,
    state: ProcessState,
}

struct Kernel {
    now: SimTime,
    seq: u64,
    timers: BinaryHeap<Timer>,
    ready: VecDeque<Pid>,
    processes: Vec<ProcessInfo>,
    spawned: Vec<(Pid, ProcessFuture)>,
    current: Option<Pid>,
    resources: Vec<Resource>,
    foreground_live: usize,
    trace: Option<Vec<TraceEvent>>,
    stats: EngineStats,
    next_flow: u64,
}

impl Kernel {
    fn new(trace: bool) -> Self {
        Kernel {
            now: SimTime::ZERO,
            seq: 0,
            timers: BinaryHeap::new(),
            ready: VecDeque::new(),
            processes: Vec::new(),
            spawned: Vec::new(),
            current: None,
            resources: Vec::new(),
            foreground_live: 0,
            trace: trace.then(Vec::new),
            stats: EngineStats::default(),
            next_flow: 0,
        }
    }

    fn record(&mut self, event: TraceEvent) {
        if let Some(trace) = self.trace.as_mut() {
            trace.push(event);
        }
    }

    fn push_timer(&mut self, time: SimTime, pid: Pid, kind: TimerKind) {
        self.seq += 1;
        self.timers.push(Timer {
            time,
            pid,
            seq: self.seq,
            kind,
        });
    }

    fn current_pid(&self) -> Pid {
        self.current
            .expect("blocking simulation call made outside of a logical process")
    }

    fn spawn(&mut self, name: String, daemon: bool, fut: ProcessFuture) -> Pid {
        let pid = self.processes.len();
        self.processes.push(ProcessInfo {
            name,
            daemon,
            state: ProcessState::Runnable,
        });
        if !daemon {
            self.foreground_live += 1;
        }
        self.spawned.push((pid, fut));
        self.ready.push_back(pid);
        pid
    }

    fn reschedule(&mut self, id: ResourceId) {
        self.stats.rate_updates += 1;
        let res = &mut self.resources[id.0];
        res.generation += 1;
        let generation = res.generation;
        if let Some(at) = res.next_completion() {
            self.push_timer(at, Pid::MAX, TimerKind::Resource { id, generation });
        }
    }

    fn start_flow(&mut self, id: ResourceId, amount: f64) -> Rc<Cell<bool>> {
        let pid = self.current_pid();
        let now = self.now;
        let done = Rc::new(Cell::new(false));
        self.next_flow += 1;
        let flow_id = self.next_flow;
        let res = &mut self.resources[id.0];
        res.advance(now);
        let tag = Tag(res.service + amount);
        res.flows.insert(
            (tag, flow_id),
            Flow {
                pid,
                done: done.clone(),
            },
        );
        self.processes[pid].state = ProcessState::Blocked;
        self.stats.transfers += 1;
        self.record(TraceEvent::FlowStart {
            time: now,
            pid,
            resource: id,
            amount,
        });
        self.reschedule(id);
        done
    }

    fn complete_flows(&mut self, id: ResourceId, generation: u64) {
        let now = self.now;
        let res = &mut self.resources[id.0];
        if res.generation != generation {
            return;
        }
        res.advance(now);
        let mut finished = Vec::new();
        // The head flow is the one this event was scheduled for.
        if let Some((_, flow)) = res.flows.pop_first() {
            finished.push(flow);
        }
        while let Some(((tag, _), _)) = res.flows.first_key_value() {
            let tolerance = 1e-6 + 1e-12 * tag.0.abs();
            if tag.0 - res.service > tolerance {
                break;
            }
            let (_, flow) = res.flows.pop_first().expect("peeked");
            finished.push(flow);
        }
        if res.flows.is_empty() {
            res.service = 0.0;
        }
        finished.sort_by_key(|f| f.pid);
        for flow in finished {
            flow.done.set(true);
            self.processes[flow.pid].state = ProcessState::Runnable;
            self.ready.push_back(flow.pid);
            self.record(TraceEvent::FlowEnd {
                time: now,
                pid: flow.pid,
                resource: id,
            });
        }
        self.reschedule(id);
    }

    fn fire(&mut self, timer: Timer) {
        debug_assert!(timer.time >= self.now, "time went backwards");
        self.now = timer.time;
        self.stats.timers_fired += 1;
        match timer.kind {
            TimerKind::Wake { done } => {
                done.set(true);
                self.processes[timer.pid].state = ProcessState::Runnable;
                self.ready.push_back(timer.pid);
            }
            TimerKind::Resource { id, generation } => self.complete_flows(id, generation),
        }
    }

    fn describe_processes(&self) -> String {
        self.processes
            .iter()
            .enumerate()
            .filter(|(_, p)| p.state != ProcessState::Terminated)
            .map(|(pid, p)| format!("#{pid} {} ({:?})", p.name, p.state))
            .collect::<Vec<_>>()
            .join(", ")
    }
}

/// Completes once the kernel flips the shared flag.
struct Signalled(Rc<Cell<bool>>);

impl Future for Signalled {
    type Output = ();

    fn poll(self: Pin<&mut Self>, _cx: &mut Context<'_>) -> Poll<()> {
        if self.0.get() {
            Poll::Ready(())
        } else {
            Poll::Pending
        }
    }
}

/// Cloneable handle to the kernel, used by processes to query the clock and
/// to block on activities.
#[derive(Clone)]
pub struct Sim {
    kernel: Rc<RefCell<Kernel>>,
}

impl Sim {
    pub fn now(&self) -> SimTime {
        self.kernel.borrow().now
    }

    pub fn add_resource(&self, name: impl Into<String>, capacity: f64) -> Result<ResourceId> {
        let name = name.into();
        if !(capacity > 0.0 && capacity.is_finite()) {
            return Err(SimError::Config(format!(
                "resource `{name}` needs a positive finite capacity, got {capacity}"
            )));
        }
        let mut k = self.kernel.borrow_mut();
        let now = k.now;
        k.resources.push(Resource {
            name,
            capacity,
            flows: BTreeMap::new(),
            service: 0.0,
            last_update: now,
            generation: 0,
            served: 0.0,
            busy_time: 0.0,
        });
        Ok(ResourceId(k.resources.len() - 1))
    }

    pub fn spawn<F>(&self, name: impl Into<String>, fut: F) -> Pid
    where
        F: Future<Output = Result<()>> + 'static,
    {
        self.kernel
            .borrow_mut()
            .spawn(name.into(), false, Box::pin(fut))
    }

    /// Spawns a background process. The run ends when every non-daemon
    /// process has terminated; daemons still pending at that point are dropped.
    pub fn spawn_daemon<F>(&self, name: impl Into<String>, fut: F) -> Pid
    where
        F: Future<Output = Result<()>> + 'static,
    {
        self.kernel
            .borrow_mut()
            .spawn(name.into(), true, Box::pin(fut))
    }

    /// Suspends the calling process for `duration` seconds. Non-positive (and
    /// NaN) durations return immediately.
    pub async fn sleep(&self, duration: f64) {
        if !(duration > 0.0) {
            return;
        }
        let done = {
            let mut k = self.kernel.borrow_mut();
            let pid = k.current_pid();
            let at = k.now + duration;
            let done = Rc::new(Cell::new(false));
            k.push_timer(at, pid, TimerKind::Wake { done: done.clone() });
            k.processes[pid].state = ProcessState::Sleeping;
            done
        };
        Signalled(done).await
    }

    /// Serves `amount` bytes on `resource`, blocking the caller until done.
    /// Returns the completion time.
    pub async fn transfer(&self, resource: ResourceId, amount: u64) -> Result<SimTime> {
        self.transfer_work(resource, amount as f64).await
    }

    /// Like [`Sim::transfer`] but with a fractional amount of work, used for
    /// devices whose write bandwidth differs from the resource capacity.
    pub(crate) async fn transfer_work(&self, resource: ResourceId, amount: f64) -> Result<SimTime> {
        if !(amount >= 0.0 && amount.is_finite()) {
            return Err(SimError::Contract(format!(
                "transfer amount must be a finite non-negative number, got {amount}"
            )));
        }
        if amount == 0.0 {
            return Ok(self.now());
        }
        let done = {
            let mut k = self.kernel.borrow_mut();
            if resource.0 >= k.resources.len() {
                return Err(SimError::Contract(format!("unknown resource {resource:?}")));
            }
            k.start_flow(resource, amount)
        };
        Signalled(done).await;
        Ok(self.now())
    }

    pub fn resource_name(&self, id: ResourceId) -> String {
        self.kernel.borrow().resources[id.0].name.clone()
    }

    pub fn resource_capacity(&self, id: ResourceId) -> f64 {
        self.kernel.borrow().resources[id.0].capacity
    }

    /// Total work served by the resource so far (bytes).
    pub fn resource_served(&self, id: ResourceId) -> f64 {
        let mut k = self.kernel.borrow_mut();
        let now = k.now;
        let res = &mut k.resources[id.0];
        res.advance(now);
        res.served
    }

    /// Total time the resource has had at least one active flow.
    pub fn resource_busy_time(&self, id: ResourceId) -> f64 {
        let mut k = self.kernel.borrow_mut();
        let now = k.now;
        let res = &mut k.resources[id.0];
        res.advance(now);
        res.busy_time
    }

    pub fn active_flows(&self, id: ResourceId) -> usize {
        self.kernel.borrow().resources[id.0].flows.len()
    }

    pub fn process_state(&self, pid: Pid) -> Option<ProcessState> {
        self.kernel.borrow().processes.get(pid).map(|p| p.state)
    }

    pub fn stats(&self) -> EngineStats {
        self.kernel.borrow().stats
    }
}

/// Owns the process futures and drives the event loop.
pub struct Simulation {
    sim: Sim,
    futures: Vec<Option<ProcessFuture>>,
}

impl Default for Simulation {
    fn default() -> Self {
        Self::new()
    }
}

impl Simulation {
    pub fn new() -> Self {
        Self::build(false)
    }

    /// A simulation that records every resume, flow start/end and exit.
    pub fn with_trace() -> Self {
        Self::build(true)
    }

    fn build(trace: bool) -> Self {
        Simulation {
            sim: Sim {
                kernel: Rc::new(RefCell::new(Kernel::new(trace))),
            },
            futures: Vec::new(),
        }
    }

    pub fn handle(&self) -> Sim {
        self.sim.clone()
    }

    pub fn now(&self) -> SimTime {
        self.sim.now()
    }

    pub fn trace(&self) -> Vec<TraceEvent> {
        self.sim.kernel.borrow().trace.clone().unwrap_or_default()
    }

    fn adopt_spawned(&mut self) {
        let spawned = std::mem::take(&mut self.sim.kernel.borrow_mut().spawned);
        for (pid, fut) in spawned {
            if self.futures.len() <= pid {
                self.futures.resize_with(pid + 1, || None);
            }
            self.futures[pid] = Some(fut);
        }
    }

    fn poll_process(&mut self, pid: Pid) -> Result<()> {
        let Some(mut fut) = self.futures.get_mut(pid).and_then(Option::take) else {
            return Ok(());
        };
        {
            let mut k = self.sim.kernel.borrow_mut();
            k.current = Some(pid);
            k.processes[pid].state = ProcessState::Runnable;
            k.stats.polls += 1;
            let now = k.now;
            k.record(TraceEvent::Resume { time: now, pid });
        }
        let mut cx = Context::from_waker(Waker::noop());
        let poll = fut.as_mut().poll(&mut cx);
        let mut k = self.sim.kernel.borrow_mut();
        k.current = None;
        match poll {
            Poll::Pending => {
                self.futures[pid] = Some(fut);
                Ok(())
            }
            Poll::Ready(outcome) => {
                let now = k.now;
                let info = &mut k.processes[pid];
                info.state = ProcessState::Terminated;
                let daemon = info.daemon;
                let name = info.name.clone();
                if !daemon {
                    k.foreground_live -= 1;
                }
                k.record(TraceEvent::Exit { time: now, pid });
                outcome.map_err(|e| SimError::Process {
                    name,
                    source: Box::new(e),
                })
            }
        }
    }

    /// Runs until every non-daemon process has terminated and returns the
    /// virtual time at that point.
    pub fn run_until_idle(&mut self) -> Result<SimTime> {
        loop {
            self.adopt_spawned();
            let next = {
                let mut k = self.sim.kernel.borrow_mut();
                if k.foreground_live == 0 {
                    return Ok(k.now);
                }
                match k.ready.pop_front() {
                    Some(pid) => Some(pid),
                    None => match k.timers.pop() {
                        Some(timer) => {
                            k.fire(timer);
                            None
                        }
                        None => {
                            return Err(SimError::Deadlock {
                                time: k.now.0,
                                processes: k.describe_processes(),
                            })
                        }
                    },
                }
            };
            if let Some(pid) = next {
                self.poll_process(pid)?;
            }
        }
    }
}
