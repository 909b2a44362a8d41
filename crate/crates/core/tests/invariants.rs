use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use owndsm::heap::HeapPartition;
use owndsm::transport::loopback::ClusterSpec;
use owndsm::verifier::explore::{self, Bounds, Mode, Status};
use owndsm::verifier::generate::{generate_programs, GenConfig};
use owndsm::verifier::{oracle, schedule, suite};

const UNIT: u64 = 1 << 20;

fn small() -> GenConfig {
    GenConfig { max_nodes: 2, max_tasks: 2, max_ops: 5, swmr: true }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Any single random interleaving of a generated program agrees with
    /// the sequential oracle, leaves no leaks, and replays exactly.
    #[test]
    fn random_schedules_match_oracle(seed in any::<u64>(), pick in any::<u64>()) {
        let prog = generate_programs(seed, 1, GenConfig::default()).remove(0);
        let want = oracle::sequential_oracle(&prog).unwrap();
        prop_assume!(want.conforming());
        let spec = ClusterSpec::new(prog.nodes, UNIT);
        let mut c = explore::cluster_for(&prog, spec).unwrap();
        c.record_trace = true;
        let mut rng = ChaCha8Rng::seed_from_u64(pick);
        c.set_chooser(Box::new(move |cs| rng.gen_range(0..cs.len())));
        c.run(100_000).unwrap();
        prop_assert!(c.log.violations.is_empty(), "{:?}", c.log.violations);
        prop_assert!(explore::leak_check(&c).is_empty());
        c.audit().unwrap();
        for (k, v) in &want.reads {
            prop_assert_eq!(c.log.reads.get(k), Some(v), "read {:?}", k);
        }

        let text = schedule::to_text(&c.trace, &["prop".to_string()]);
        let trace = schedule::parse(&text).unwrap();
        prop_assert_eq!(&trace, &c.trace);
        let mut again = explore::cluster_for(&prog, spec).unwrap();
        again.replay(&trace).unwrap();
        prop_assert_eq!(again.fingerprint(), c.fingerprint());
    }

    /// Memoized path counting gives the same schedule count as plain
    /// enumeration.
    #[test]
    fn memoized_counts_every_schedule(seed in any::<u64>()) {
        let prog = generate_programs(seed, 1, small()).remove(0);
        let spec = ClusterSpec::new(prog.nodes, UNIT);
        let b = Bounds { state_cap: 200_000, ..Bounds::default() };
        let m = explore::enumerate(&prog, spec, &b, Mode::Memoized).unwrap();
        let f = explore::enumerate(&prog, spec, &b, Mode::Full).unwrap();
        prop_assert!(m.passed(), "{:?}", m.failures);
        prop_assume!(f.status == Status::Complete);
        prop_assert!(f.passed(), "{:?}", f.failures);
        prop_assert_eq!(m.schedules, f.schedules);
        prop_assert_eq!(m.mismatched_schedules, 0);
    }

    #[test]
    fn generation_is_deterministic(seed in any::<u64>()) {
        let a = generate_programs(seed, 3, GenConfig::default());
        let b = generate_programs(seed, 3, GenConfig::default());
        prop_assert_eq!(format!("{a:?}"), format!("{b:?}"));
        for p in &a {
            prop_assert!(p.nodes <= 3 && p.routines.len() <= 3 && p.max_ops_per_routine() <= 8);
        }
    }

    /// Random alloc/free sequences keep the partition consistent.
    #[test]
    fn heap_accounting(ops in proptest::collection::vec((any::<bool>(), 1u64..5000), 1..60)) {
        let mut h = HeapPartition::new(0, 0..UNIT);
        let mut live: Vec<(u64, u64)> = Vec::new();
        for (alloc, n) in ops {
            if alloc || live.is_empty() {
                if let Ok(base) = h.alloc_tagged(n, None, None) {
                    prop_assert!(live.iter().all(|(b, s)| base >= b + s || base + n <= *b));
                    live.push((base, n));
                }
            } else {
                let (base, _) = live.remove(n as usize % live.len());
                h.free_raw(base, 0).unwrap();
            }
            h.audit().unwrap();
            prop_assert_eq!(h.live_count(), live.len());
        }
    }
}

#[test]
fn standard_scenarios_agree_across_modes() {
    for s in suite::standard() {
        let m = suite::run_scenario(&s, Default::default(), Mode::Memoized).unwrap();
        assert!(m.passed(), "{}: {:?} {:?}", s.name(), m.report.failures.keys().collect::<Vec<_>>(), m.expectation_failures);
        let f = suite::run_scenario(&s, Default::default(), Mode::Full).unwrap();
        if f.report.status == Status::Complete {
            assert_eq!(f.report.schedules, m.report.schedules, "{}", s.name());
        }
    }
}
