use std::collections::BTreeMap;
use std::sync::Arc;

use chrono::{Duration, TimeZone, Utc};
use proptest::prelude::*;

use crowdlab_core::engine::{Engine, RunOptions};
use crowdlab_core::platform::sim::{PopulationProfile, SimPlatform};
use crowdlab_core::platform::AdapterRegistry;
use crowdlab_core::simulation::workloads;
use crowdlab_core::store::Store;
use crowdlab_core::worker::{
    Action, BalancedAssigner, CrossoverRule, Design, EligibilityRequest, QuotaState, Reason, Recurrence, Toggles,
    TrustConfig,
};
use crowdlab_core::ManualClock;

fn engine_with_run(recurrence: Recurrence, crossover: CrossoverRule) -> Engine {
    let t0 = Utc.with_ymd_and_hms(2024, 1, 1, 12, 0, 0).unwrap();
    let registry = AdapterRegistry::new();
    registry.register(Arc::new(SimPlatform::new(
        PopulationProfile::calibrated(),
        t0,
        Duration::hours(1),
    )));
    let engine = Engine::new(Arc::new(Store::ephemeral()), registry, Arc::new(ManualClock::new(t0))).unwrap();
    let mut def = workloads::condition_study(3);
    def.policy.recurrence = recurrence;
    def.policy.crossover = crossover;
    if crossover == CrossoverRule::Allow {
        def.policy.design = Design::WithinSubjects;
    }
    let opts = RunOptions {
        run_id: Some("r".into()),
        seed: 1,
        toggles: Toggles::all_on(),
        adapter: Some("sim".into()),
    };
    engine.start_run(&def, &workloads::study_units(), opts).unwrap();
    engine.run_until_idle("r").unwrap();
    engine
}

fn request(worker: usize, block: usize) -> EligibilityRequest {
    let blocks: Vec<String> = workloads::condition_study(3).blocks.iter().map(|b| b.id.clone()).collect();
    EligibilityRequest {
        platform_worker_id: format!("p{worker}"),
        fingerprint: format!("fp{worker}"),
        country: "US".into(),
        block_id: Some(blocks[block % blocks.len()].clone()),
        request_id: None,
    }
}

fn policy_strategy() -> impl Strategy<Value = (Recurrence, CrossoverRule)> {
    prop_oneof![
        Just((Recurrence::BlockAllRepeats, CrossoverRule::Block)),
        Just((Recurrence::AllowSameCondition, CrossoverRule::Block)),
        Just((Recurrence::AllowAll, CrossoverRule::Allow)),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn block_decisions_never_claim_a_new_assignment(
        (recurrence, crossover) in policy_strategy(),
        visits in proptest::collection::vec((0usize..8, 0usize..18), 1..60),
    ) {
        let engine = engine_with_run(recurrence, crossover);
        let mut proceeds: BTreeMap<usize, u32> = BTreeMap::new();
        for (w, b) in visits {
            let d = engine.workers().decide_eligibility("r", &request(w, b)).unwrap();
            if d.action == Action::Block {
                prop_assert_ne!(d.reason, Reason::NewAssignment);
            } else {
                *proceeds.entry(w).or_default() += 1;
            }
        }
        if recurrence == Recurrence::BlockAllRepeats {
            prop_assert!(proceeds.values().all(|n| *n <= 1));
        }
    }

    #[test]
    fn identities_are_stable_and_fingerprint_dominant(pids in proptest::collection::vec("[a-z]{1,6}", 1..6), fp in "[a-f0-9]{8}") {
        let engine = engine_with_run(Recurrence::BlockAllRepeats, CrossoverRule::Block);
        let first = engine.workers().resolve_identity(&pids[0], &fp).unwrap();
        prop_assert_eq!(engine.workers().resolve_identity(&pids[0], &fp).unwrap(), first.clone());
        for pid in &pids {
            prop_assert_eq!(engine.workers().resolve_identity(pid, &fp).unwrap(), first.clone());
        }
    }

    #[test]
    fn trust_matches_its_definition(correct in 0u32..20, extra in 0u32..20, warmup in 0u32..6, threshold in 0.0f64..1.0) {
        let total = correct + extra;
        let t = TrustConfig { warmup, threshold };
        let expected = total < warmup || (total > 0 && correct as f64 / total as f64 >= threshold);
        prop_assert_eq!(t.is_trusted(correct, total), expected);
    }

    #[test]
    fn hard_quota_share_stays_within_one_grant(
        countries in proptest::collection::vec(prop_oneof![
            6 => Just("VE"), 3 => Just("EG"), 2 => Just("UA"), 1 => Just("US"), 1 => Just("BR"), 1 => Just("IN"),
        ], 1..400),
        max_share in 0.05f64..0.6,
    ) {
        let config = workloads::top_country_quota(max_share);
        let mut q = QuotaState::new(config.clone(), &["a".to_string()]);
        let mut admitted: BTreeMap<String, u64> = BTreeMap::new();
        let mut total = 0u64;
        for c in countries {
            if q.admit(c, true) {
                total += 1;
                if let Some(b) = config.bucket_of(c) {
                    *admitted.entry(b.to_string()).or_default() += 1;
                }
            }
        }
        prop_assume!(total > 0);
        for n in admitted.values() {
            prop_assert!(*n as f64 / total as f64 <= max_share + 1.0 / total as f64);
        }
    }

    #[test]
    fn balanced_assignment_holds_on_every_prefix(groups in 2usize..9, seed in any::<u64>(), len in 1usize..500) {
        let names: Vec<String> = (0..groups).map(|i| format!("g{i}")).collect();
        let mut a = BalancedAssigner::new(names.clone(), seed);
        let mut counts: BTreeMap<String, i64> = names.iter().map(|g| (g.clone(), 0)).collect();
        for _ in 0..len {
            *counts.get_mut(&a.next_group().unwrap()).unwrap() += 1;
            let max = counts.values().max().unwrap();
            let min = counts.values().min().unwrap();
            prop_assert!(max - min <= 1);
        }
    }
}
