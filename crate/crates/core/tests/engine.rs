use std::cell::RefCell;
use std::rc::Rc;

use pagesim_core::sim::{SimTime, Simulation, TraceEvent};
use proptest::prelude::*;

const GB: u64 = 1_000_000_000;

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1e-12)
}

/// Processor sharing by brute force: advance to the next arrival or
/// departure, giving every active flow capacity / n in between.
fn ps_oracle(capacity: f64, flows: &[(f64, f64)]) -> Vec<f64> {
    let mut remaining: Vec<f64> = flows.iter().map(|f| f.1).collect();
    let mut done = vec![f64::NAN; flows.len()];
    let mut now = 0.0f64;
    loop {
        let active: Vec<usize> = (0..flows.len())
            .filter(|&i| done[i].is_nan() && flows[i].0 <= now)
            .collect();
        let next_arrival = flows
            .iter()
            .filter(|f| f.0 > now)
            .map(|f| f.0)
            .fold(f64::INFINITY, f64::min);
        if active.is_empty() {
            if next_arrival.is_infinite() {
                return done;
            }
            now = next_arrival;
            continue;
        }
        let rate = capacity / active.len() as f64;
        let min_rem = active.iter().map(|&i| remaining[i]).fold(f64::INFINITY, f64::min);
        let dt = (min_rem / rate).min(next_arrival - now);
        for &i in &active {
            remaining[i] -= rate * dt;
        }
        now += dt;
        for &i in &active {
            if remaining[i] <= 1e-9 * flows[i].1.max(1.0) {
                done[i] = now;
            }
        }
    }
}

/// Runs one process per flow that sleeps until its start time and then
/// transfers its amount on a shared resource. Returns completion times.
fn simulate(capacity: f64, flows: &[(f64, u64)], trace: bool) -> (Vec<f64>, Vec<TraceEvent>, pagesim_core::sim::EngineStats, f64, f64) {
    let mut sim = if trace {
        Simulation::with_trace()
    } else {
        Simulation::new()
    };
    let h = sim.handle();
    let res = h.add_resource("r", capacity).unwrap();
    let ends = Rc::new(RefCell::new(vec![0.0; flows.len()]));
    for (i, &(start, amount)) in flows.iter().enumerate() {
        let (h2, ends) = (h.clone(), ends.clone());
        h.spawn(format!("f{i}"), async move {
            h2.sleep(start).await;
            let t = h2.transfer(res, amount).await?;
            ends.borrow_mut()[i] = t.secs();
            Ok(())
        });
    }
    sim.run_until_idle().unwrap();
    let out = ends.borrow().clone();
    (out, sim.trace(), h.stats(), h.resource_served(res), h.resource_busy_time(res))
}

#[test]
fn clock_examples() {
    let mut sim = Simulation::new();
    assert_eq!(sim.now(), SimTime::ZERO);
    let h = sim.handle();
    let disk = h.add_resource("disk", 465e6).unwrap();
    let seen = Rc::new(RefCell::new(Vec::new()));
    let (h2, s) = (h.clone(), seen.clone());
    h.spawn("p", async move {
        h2.transfer(disk, GB).await?;
        s.borrow_mut().push(h2.now().secs());
        h2.transfer(disk, GB).await?;
        s.borrow_mut().push(h2.now().secs());
        Ok(())
    });
    sim.run_until_idle().unwrap();
    let seen = seen.borrow();
    assert!(rel_close(seen[0], 2.1505, 1e-4));
    assert!(rel_close(seen[1], 4.3011, 1e-4));
}

#[test]
fn transfer_examples() {
    let (t, ..) = simulate(465e6, &[(0.0, GB)], false);
    assert!(rel_close(t[0], 2.1505, 1e-4));
    let (t, ..) = simulate(465e6, &[(0.0, GB), (0.0, GB)], false);
    assert!(rel_close(t[0], 4.3011, 1e-4) && rel_close(t[1], 4.3011, 1e-4));
    let (t, ..) = simulate(465e6, &[(1.0, 0)], false);
    assert_eq!(t[0], 1.0);
}

#[test]
fn run_until_idle_examples() {
    assert_eq!(Simulation::new().run_until_idle().unwrap(), SimTime::ZERO);

    let mut sim = Simulation::new();
    let h = sim.handle();
    let a = h.add_resource("a", 465e6).unwrap();
    let b = h.add_resource("b", 465e6).unwrap();
    for r in [a, b] {
        let h2 = h.clone();
        h.spawn("p", async move {
            h2.transfer(r, GB).await?;
            Ok(())
        });
    }
    let end = sim.run_until_idle().unwrap();
    assert!(rel_close(end.secs(), 2.1505, 1e-4));
}

fn flow_sets() -> impl Strategy<Value = (f64, Vec<(f64, u64)>)> {
    (
        prop_oneof![Just(465e6), Just(4812e6), 1.0f64..1e4],
        prop::collection::vec(
            (prop_oneof![Just(0.0), 0.0f64..20.0], 0u64..5_000_000_000),
            1..12,
        ),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn matches_processor_sharing_oracle((cap, flows) in flow_sets()) {
        let (got, ..) = simulate(cap, &flows, false);
        let as_f: Vec<(f64, f64)> = flows.iter().map(|&(s, a)| (s, a as f64)).collect();
        let want = ps_oracle(cap, &as_f);
        for (i, (&g, &w)) in got.iter().zip(&want).enumerate() {
            let w = if flows[i].1 == 0 { flows[i].0 } else { w };
            prop_assert!(rel_close(g, w, 1e-6), "flow {}: got {} want {}", i, g, w);
        }
    }

    #[test]
    fn deterministic_traces((cap, flows) in flow_sets()) {
        let a = simulate(cap, &flows, true);
        let b = simulate(cap, &flows, true);
        prop_assert_eq!(a.0, b.0);
        prop_assert_eq!(a.1, b.1);
    }

    #[test]
    fn conservation_and_event_counts((cap, flows) in flow_sets()) {
        let (_, _, stats, served, busy) = simulate(cap, &flows, false);
        let total: f64 = flows.iter().map(|f| f.1 as f64).sum();
        prop_assert!(rel_close(served, total, 1e-9) || total == 0.0);
        // Whenever a flow is active the resource serves at full capacity.
        prop_assert!(rel_close(served, cap * busy, 1e-9) || total == 0.0);
        prop_assert!(stats.rate_updates <= 2 * stats.transfers);
    }

    #[test]
    fn solo_transfer_time_is_homogeneous(amount in 1u64..10_000_000_000, k in 1u64..8) {
        let (t1, ..) = simulate(465e6, &[(0.0, amount)], false);
        let (tk, ..) = simulate(465e6, &[(0.0, amount * k)], false);
        prop_assert!(rel_close(t1[0], amount as f64 / 465e6, 1e-12));
        prop_assert!(rel_close(tk[0], k as f64 * t1[0], 1e-12));
    }
}
