//! Random inputs and property checks shared by the property suite and the
//! acceptance report.

use std::collections::BTreeMap;

use pagesim_core::page_cache::{CacheTunables, DataBlock, ListKind, PageCache, WritePolicy};
use pagesim_core::sim::SimTime;
use pagesim_core::storage::DeviceSpec;
use pagesim_core::workload::{
    run, FileSpec, HostSpec, PipelineSpec, PlatformSpec, RunOptions, RunReport, TaskSpec, WorkloadSpec,
};
use proptest::prelude::*;

use super::{Case, B};

fn cache_of(case: &Case) -> PageCache {
    let blocks = |l: &[B]| {
        l.iter()
            .map(|b| DataBlock {
                file: b.file.as_str().into(),
                size: b.size,
                dirty: b.dirty,
                last_access: SimTime(b.last),
                entry_time: SimTime(b.entry),
            })
            .collect()
    };
    let total: u64 = case.inactive.iter().chain(&case.active).map(|b| b.size).sum::<u64>() + case.free;
    let mut c =
        PageCache::with_lists(total, CacheTunables::default(), blocks(&case.inactive), blocks(&case.active)).unwrap();
    c.balance_lists();
    c
}

fn per_file(c: &PageCache) -> BTreeMap<String, (u64, u64)> {
    c.usage_by_file()
        .into_iter()
        .map(|(f, u)| (f.to_string(), (u.cached, u.dirty)))
        .collect()
}

fn lru_ordered(c: &PageCache) -> bool {
    [ListKind::Inactive, ListKind::Active].into_iter().all(|k| {
        c.blocks(k)
            .windows(2)
            .all(|w| w[0].last_access <= w[1].last_access)
    })
}

#[derive(Debug, Clone)]
pub struct ListInput {
    pub case: Case,
    pub amount: i64,
    pub frac: f64,
    pub exclude: Option<String>,
}

pub fn list_inputs() -> impl Strategy<Value = ListInput> {
    (super::case_strategy(), 0i64..5000, 0.0f64..=1.0, prop::option::of("[abc]"))
        .prop_map(|(case, amount, frac, exclude)| ListInput { case, amount, frac, exclude })
}

pub fn flush_is_idempotent_once_drained(input: &ListInput) -> Result<(), TestCaseError> {
    let (case, exclude) = (&input.case, &input.exclude);
    let mut c = cache_of(&case);
    let dirty_before = c.dirty();
    let all = i64::MAX;
    let first = c.flush(all, exclude.as_deref());
    prop_assert!(c.dirty() <= dirty_before);
    prop_assert_eq!(c.flush(all, exclude.as_deref()), 0);
    if exclude.is_none() {
        prop_assert_eq!(first, dirty_before);
        prop_assert_eq!(c.dirty(), 0);
    }
    Ok(())
}

pub fn partial_flush_never_increases_dirty(input: &ListInput) -> Result<(), TestCaseError> {
    let (case, amount) = (&input.case, input.amount);
    let mut c = cache_of(&case);
    let before = c.dirty();
    let got = c.flush(amount, None);
    prop_assert_eq!(c.dirty(), before - got);
    prop_assert!(got <= amount as u64);
    Ok(())
}

pub fn evict_only_removes_clean_data(input: &ListInput) -> Result<(), TestCaseError> {
    let (case, amount) = (&input.case, input.amount);
    let mut c = cache_of(&case);
    let before = per_file(&c);
    let dirty = c.dirty();
    let free = c.free_mem();
    let got = c.evict(amount, None);
    prop_assert_eq!(c.dirty(), dirty);
    prop_assert_eq!(c.free_mem(), free + got);
    for (f, (cached, d)) in &before {
        let (nc, nd) = per_file(&c).get(f).copied().unwrap_or((0, 0));
        prop_assert_eq!(nd, *d);
        prop_assert!(nc <= *cached);
    }
    Ok(())
}

pub fn splits_conserve_bytes(input: &ListInput) -> Result<(), TestCaseError> {
    let (case, amount, frac) = (&input.case, input.amount, input.frac);
    let mut c = cache_of(&case);
    let before = per_file(&c);
    let free = c.free_mem();
    c.flush(amount, None);
    let after_flush = per_file(&c);
    for (f, (cached, _)) in &before {
        prop_assert_eq!(after_flush[f].0, *cached);
    }
    if let Some((file, &(cached, dirty))) = before.iter().next() {
        let amount = (cached as f64 * frac).round() as u64;
        let now = SimTime(1e6);
        c.cache_read(file, amount, now).unwrap();
        let after = per_file(&c);
        prop_assert_eq!(after[file].0, cached);
        prop_assert_eq!(after[file].1, after_flush[file].1);
        prop_assert!(after_flush[file].1 <= dirty);
    }
    prop_assert_eq!(c.free_mem(), free);
    prop_assert!(c.check_invariants(SimTime(1e6)).is_ok());
    Ok(())
}

pub fn lists_stay_balanced_and_ordered(input: &ListInput) -> Result<(), TestCaseError> {
    let (case, amount, frac) = (&input.case, input.amount, input.frac);
    let mut c = cache_of(&case);
    c.evict(amount, None);
    prop_assert!(c.active_bytes() <= 2 * c.inactive_bytes());
    prop_assert!(lru_ordered(&c));
    let files: Vec<String> = per_file(&c).keys().cloned().collect();
    for f in files {
        let amount = (c.cached(&f) as f64 * frac).round() as u64;
        c.cache_read(&f, amount, SimTime(1e6)).unwrap();
        prop_assert!(c.active_bytes() <= 2 * c.inactive_bytes());
        prop_assert!(lru_ordered(&c));
    }
    Ok(())
}

const MB: u64 = 1_000_000;

#[derive(Debug, Clone)]
pub struct Small {
    pub total_mem: u64,
    pub tunables: CacheTunables,
    pub sizes: Vec<u64>,
    pub cpu: Vec<f64>,
    pub chunk: u64,
    pub instances: usize,
    pub policy: WritePolicy,
    pub page_cache: bool,
}

pub fn small_scenarios() -> impl Strategy<Value = Small> {
    (
        1usize..=3,
        1usize..=3,
        (2_000u64..8_000).prop_map(|m| m * MB),
        0.05f64..0.6,
        0.0f64..8.0,
        0.5f64..6.0,
        (10u64..600).prop_map(|c| c * MB),
        prop_oneof![Just(WritePolicy::Writeback), Just(WritePolicy::Writethrough)],
        prop::bool::weighted(0.85),
    )
        .prop_flat_map(|(tasks, instances, total_mem, ratio, expire, interval, chunk, policy, page_cache)| {
            // Each instance needs room for its input buffer plus cached data.
            let max_size = total_mem / (4 * instances as u64);
            (
                prop::collection::vec(50 * MB..=max_size.max(51 * MB), tasks + 1),
                prop::collection::vec(prop_oneof![Just(0.0), 0.0f64..10.0], tasks),
            )
                .prop_map(move |(sizes, cpu)| Small {
                    total_mem,
                    tunables: CacheTunables {
                        dirty_ratio: ratio,
                        expire_time: expire,
                        flush_interval: interval,
                    },
                    sizes,
                    cpu,
                    chunk,
                    instances,
                    policy,
                    page_cache,
                })
        })
}

pub fn specs(s: &Small) -> (PlatformSpec, WorkloadSpec) {
    let host = HostSpec {
        name: "node".into(),
        total_mem: s.total_mem,
        memory_bw: 4812e6,
        disk: DeviceSpec::symmetric("disk", 1_000_000 * MB, 465e6),
        cache: s.tunables.clone(),
    };
    let file = |i: usize| FileSpec::new(format!("file{}", i + 1), s.sizes[i]);
    let tasks = s
        .cpu
        .iter()
        .enumerate()
        .map(|(i, &cpu)| TaskSpec {
            name: format!("task{}", i + 1),
            inputs: vec![file(i)],
            outputs: vec![file(i + 1)],
            cpu_time: cpu,
        })
        .collect();
    (
        PlatformSpec {
            hosts: vec![host],
            links: vec![],
            mounts: vec![],
        },
        WorkloadSpec {
            host: "node".into(),
            mount: None,
            chunk_size: s.chunk,
            instances: s.instances,
            pipeline: PipelineSpec {
                tasks,
                release_anon_after_task: true,
            },
        },
    )
}

pub fn opts(s: &Small) -> RunOptions {
    RunOptions {
        page_cache: s.page_cache,
        write_policy: s.policy,
        check_invariants: true,
        trace: true,
        ..RunOptions::default()
    }
}

pub fn check_samples(s: &Small, r: &RunReport) -> Result<(), TestCaseError> {
    for m in &r.metrics.samples {
        prop_assert_eq!(m.total_used, m.anonymous + m.cached, "{:?}", m);
        prop_assert_eq!(m.total_used + m.free, s.total_mem, "{:?}", m);
        prop_assert!(m.dirty <= m.cached, "{:?}", m);
        let limit = (s.tunables.dirty_ratio * (m.free + m.cached) as f64).floor() as u64;
        prop_assert!(m.dirty <= limit, "dirty bound broken: {:?} limit {}", m, limit);
    }
    let sizes: BTreeMap<String, u64> = (0..s.instances)
        .flat_map(|k| {
            s.sizes.iter().enumerate().map(move |(i, &sz)| {
                let base = format!("file{}", i + 1);
                let name = if s.instances > 1 { format!("{base}_{k}") } else { base };
                (name, sz)
            })
        })
        .collect();
    for snap in &r.metrics.snapshots {
        for (f, u) in &snap.files {
            prop_assert!(u.dirty <= u.cached);
            prop_assert!(u.cached <= sizes[f], "{} cached {} > size {}", f, u.cached, sizes[f]);
        }
    }
    for op in &r.metrics.ops {
        prop_assert!(op.end >= op.start);
    }
    Ok(())
}

pub fn random_scenario_keeps_invariants(s: &Small) -> Result<(), TestCaseError> {
    let (platform, workload) = specs(s);
    let r = run(&platform, &workload, &opts(s)).map_err(|e| TestCaseError::fail(e.to_string()))?;
    check_samples(s, &r)?;
    prop_assert_eq!(r.tasks.len(), s.cpu.len() * s.instances);

    let host = &r.hosts[0];
    let written: u64 = s.sizes[1..].iter().sum::<u64>() * s.instances as u64;
    let read: u64 = s.sizes[..s.sizes.len() - 1].iter().sum::<u64>() * s.instances as u64;
    let fin = &host.final_memory;
    if !s.page_cache {
        prop_assert_eq!(host.disk_bytes_written, written);
        prop_assert_eq!(host.disk_bytes_read, read);
    } else if s.policy == WritePolicy::Writethrough {
        prop_assert_eq!(host.disk_bytes_written, written);
        prop_assert_eq!(fin.dirty, 0);
    } else {
        // Every written byte is either still dirty or was flushed exactly once.
        let st = host.cache;
        prop_assert_eq!(st.written_to_cache, written);
        prop_assert_eq!(st.foreground_flushed + st.periodic_flushed + fin.dirty, written);
        prop_assert!(host.disk_bytes_written <= written);
    }
    prop_assert!(host.disk_bytes_read <= read);
    // Anonymous memory is released at the end of every task.
    prop_assert_eq!(fin.anonymous, 0);
    Ok(())
}

pub fn random_scenario_is_deterministic(s: &Small) -> Result<(), TestCaseError> {
    let (platform, workload) = specs(s);
    let o = opts(s);
    let a = run(&platform, &workload, &o).map_err(|e| TestCaseError::fail(e.to_string()))?;
    let b = run(&platform, &workload, &o).map_err(|e| TestCaseError::fail(e.to_string()))?;
    prop_assert_eq!(&a.trace, &b.trace);
    prop_assert_eq!(&a.metrics, &b.metrics);
    prop_assert_eq!(&a.tasks, &b.tasks);
    Ok(())
}

