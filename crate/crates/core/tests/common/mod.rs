//! Brute-force model of the two LRU lists, written as plain vector walks,
//! used as an oracle for the cache implementation.
#![allow(dead_code)]

pub mod random;

use pagesim_core::page_cache::{CacheTunables, DataBlock, ListKind, PageCache};
use pagesim_core::sim::SimTime;
use proptest::prelude::*;

#[derive(Debug, Clone, PartialEq)]
pub struct B {
    pub file: String,
    pub size: u64,
    pub dirty: bool,
    pub last: f64,
    pub entry: f64,
}

#[derive(Debug, Clone)]
pub struct Lists {
    pub inactive: Vec<B>,
    pub active: Vec<B>,
    pub free: u64,
}

fn bytes(l: &[B]) -> u64 {
    l.iter().map(|b| b.size).sum()
}

/// Inserts `b` after every block accessed no later than it.
fn requeue(list: &mut Vec<B>, b: B) {
    let pos = list.iter().rposition(|x| x.last <= b.last).map_or(0, |p| p + 1);
    list.insert(pos, b);
}

impl Lists {
    pub fn balance(&mut self) {
        while bytes(&self.active) > 2 * bytes(&self.inactive) {
            let excess = bytes(&self.active) - 2 * bytes(&self.inactive);
            let x = excess.div_ceil(3);
            if self.active[0].size <= x {
                let b = self.active.remove(0);
                requeue(&mut self.inactive, b);
            } else {
                let mut moved = self.active[0].clone();
                moved.size = x;
                self.active[0].size -= x;
                requeue(&mut self.inactive, moved);
            }
        }
    }

    pub fn flush(&mut self, amount: i64, exclude: Option<&str>) -> u64 {
        if amount <= 0 {
            return 0;
        }
        let mut left = amount as u64;
        for list in [&mut self.inactive, &mut self.active] {
            let mut i = 0;
            while left > 0 && i < list.len() {
                if list[i].dirty && Some(list[i].file.as_str()) != exclude {
                    if list[i].size > left {
                        let mut tail = list[i].clone();
                        tail.size -= left;
                        list[i].size = left;
                        list[i].dirty = false;
                        left = 0;
                        requeue(list, tail);
                    } else {
                        list[i].dirty = false;
                        left -= list[i].size;
                    }
                }
                i += 1;
            }
        }
        amount as u64 - left
    }

    pub fn evict(&mut self, amount: i64, exclude: Option<&str>) -> u64 {
        if amount <= 0 {
            return 0;
        }
        let mut left = amount as u64;
        let mut i = 0;
        while left > 0 && i < self.inactive.len() {
            let b = &mut self.inactive[i];
            if !b.dirty && Some(b.file.as_str()) != exclude {
                if b.size > left {
                    b.size -= left;
                    left = 0;
                } else {
                    left -= b.size;
                    self.inactive.remove(i);
                    continue;
                }
            }
            i += 1;
        }
        let evicted = amount as u64 - left;
        self.free += evicted;
        self.balance();
        evicted
    }

    pub fn cache_read(&mut self, file: &str, amount: u64, now: f64) {
        let mut left = amount;
        let mut dirty = Vec::new();
        let mut clean = 0;
        for list in [&mut self.inactive, &mut self.active] {
            let mut i = 0;
            while left > 0 && i < list.len() {
                if list[i].file != file {
                    i += 1;
                    continue;
                }
                let take = left.min(list[i].size);
                let piece = if take < list[i].size {
                    let mut p = list[i].clone();
                    p.size = take;
                    list[i].size -= take;
                    i += 1;
                    p
                } else {
                    list.remove(i)
                };
                left -= take;
                if piece.dirty {
                    dirty.push(B { last: now, ..piece });
                } else {
                    clean += take;
                }
            }
        }
        assert_eq!(left, 0, "oracle asked to read more than cached");
        self.active.extend(dirty);
        if clean > 0 {
            self.active.push(B {
                file: file.to_string(),
                size: clean,
                dirty: false,
                last: now,
                entry: now,
            });
        }
        self.balance();
    }

    pub fn take_expired(&mut self, now: f64, expire: f64) -> Vec<u64> {
        // Oldest entry first; equal entries inactive list first, then LRU.
        let mut found = Vec::new();
        for (li, list) in [&mut self.inactive, &mut self.active].into_iter().enumerate() {
            for (pos, b) in list.iter_mut().enumerate() {
                if b.dirty && now - b.entry > expire {
                    b.dirty = false;
                    found.push((li, pos, b.size));
                }
            }
        }
        found.sort_by_key(|&(li, pos, _)| (li, pos));
        found.into_iter().map(|f| f.2).collect()
    }

    pub fn cached(&self, file: &str) -> u64 {
        self.inactive
            .iter()
            .chain(&self.active)
            .filter(|b| b.file == file)
            .map(|b| b.size)
            .sum()
    }
}

#[derive(Debug, Clone)]
pub enum Op {
    Flush { amount: i64, exclude: Option<String> },
    Evict { amount: i64, exclude: Option<String> },
    CacheRead { file: String, frac: f64, later: bool },
    Expire { age: f64, expire: f64 },
}

#[derive(Debug, Clone)]
pub struct Case {
    pub inactive: Vec<B>,
    pub active: Vec<B>,
    pub free: u64,
    pub op: Op,
}

const FILES: [&str; 3] = ["a", "b", "c"];

fn list_strategy() -> impl Strategy<Value = Vec<B>> {
    prop::collection::vec((0usize..3, 1u64..1000, any::<bool>(), 0u8..3, 0u8..6), 0..=10).prop_map(
        |raw| {
            let mut t = 0.0;
            raw.into_iter()
                .map(|(f, size, dirty, step, back)| {
                    t += step as f64;
                    B {
                        file: FILES[f].to_string(),
                        size,
                        dirty,
                        last: t,
                        entry: (t - back as f64).max(0.0),
                    }
                })
                .collect()
        },
    )
}

fn exclude_strategy() -> impl Strategy<Value = Option<String>> {
    prop_oneof![Just(None), (0usize..3).prop_map(|f| Some(FILES[f].to_string()))]
}

fn op_strategy() -> impl Strategy<Value = Op> {
    prop_oneof![
        (-50i64..4000, exclude_strategy()).prop_map(|(amount, exclude)| Op::Flush { amount, exclude }),
        (-50i64..4000, exclude_strategy()).prop_map(|(amount, exclude)| Op::Evict { amount, exclude }),
        (0usize..3, 0.0f64..=1.0, any::<bool>()).prop_map(|(f, frac, later)| Op::CacheRead {
            file: FILES[f].to_string(),
            frac,
            later
        }),
        (0.0f64..20.0, 0.0f64..10.0).prop_map(|(age, expire)| Op::Expire {
            age: age.floor(),
            expire: expire.floor()
        }),
    ]
}

pub fn case_strategy() -> impl Strategy<Value = Case> {
    (list_strategy(), list_strategy(), 0u64..2000, op_strategy()).prop_map(|(inactive, active, free, op)| Case {
        inactive,
        active,
        free,
        op,
    })
}

fn to_block(b: &B) -> DataBlock {
    DataBlock {
        file: b.file.as_str().into(),
        size: b.size,
        dirty: b.dirty,
        last_access: SimTime(b.last),
        entry_time: SimTime(b.entry),
    }
}

fn from_block(b: &DataBlock) -> B {
    B {
        file: b.file.to_string(),
        size: b.size,
        dirty: b.dirty,
        last: b.last_access.secs(),
        entry: b.entry_time.secs(),
    }
}

/// Applies the case to the real cache and to the oracle; returns a
/// description of the first difference.
pub fn check_case(case: &Case) -> Result<(), String> {
    let total = bytes(&case.inactive) + bytes(&case.active) + case.free;
    let expire = match case.op {
        Op::Expire { expire, .. } => expire,
        _ => 30.0,
    };
    let tunables = CacheTunables {
        expire_time: expire,
        ..CacheTunables::default()
    };
    let mut real = PageCache::with_lists(
        total,
        tunables,
        case.inactive.iter().map(to_block).collect(),
        case.active.iter().map(to_block).collect(),
    )
    .map_err(|e| e.to_string())?;
    let mut model = Lists {
        inactive: case.inactive.clone(),
        active: case.active.clone(),
        free: case.free,
    };
    let max_last = case
        .inactive
        .iter()
        .chain(&case.active)
        .map(|b| b.last)
        .fold(0.0, f64::max);

    let (got, want): (Vec<u64>, Vec<u64>) = match &case.op {
        Op::Flush { amount, exclude } => (
            vec![real.flush(*amount, exclude.as_deref())],
            vec![model.flush(*amount, exclude.as_deref())],
        ),
        Op::Evict { amount, exclude } => (
            vec![real.evict(*amount, exclude.as_deref())],
            vec![model.evict(*amount, exclude.as_deref())],
        ),
        Op::CacheRead { file, frac, later } => {
            let cached = model.cached(file);
            let amount = ((cached as f64) * frac).round() as u64;
            let now = if *later { max_last + 1.0 } else { max_last };
            real.cache_read(file, amount, SimTime(now)).map_err(|e| e.to_string())?;
            if amount > 0 {
                model.cache_read(file, amount, now);
            }
            (vec![], vec![])
        }
        Op::Expire { age, expire } => {
            let now = max_last + age;
            (real.take_expired(SimTime(now)), model.take_expired(now, *expire))
        }
    };
    if got != want {
        return Err(format!("return values differ: got {got:?}, oracle {want:?}"));
    }
    for (kind, expected) in [(ListKind::Inactive, &model.inactive), (ListKind::Active, &model.active)] {
        let actual: Vec<B> = real.blocks(kind).iter().map(from_block).collect();
        if &actual != expected {
            return Err(format!("{kind:?} list differs:\n  got    {actual:?}\n  oracle {expected:?}"));
        }
    }
    if real.free_mem() != model.free {
        return Err(format!("free memory differs: {} vs {}", real.free_mem(), model.free));
    }
    Ok(())
}

/// Runs `cases` random oracle comparisons with a fixed seed; returns the
/// number of agreements and the first disagreement.
pub fn run_oracle_cases(cases: u32) -> (u32, Option<String>) {
    use proptest::strategy::ValueTree;
    use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};
    let rng = TestRng::from_seed(RngAlgorithm::ChaCha, &[7; 32]);
    let mut runner = TestRunner::new_with_rng(Config::default(), rng);
    let strategy = case_strategy();
    let mut agree = 0;
    let mut first_failure = None;
    for _ in 0..cases {
        let case = strategy.new_tree(&mut runner).expect("case").current();
        match check_case(&case) {
            Ok(()) => agree += 1,
            Err(e) if first_failure.is_none() => first_failure = Some(format!("{e}\ncase: {case:?}")),
            Err(_) => {}
        }
    }
    (agree, first_failure)
}
