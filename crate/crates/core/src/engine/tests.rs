use std::sync::Arc;

use chrono::{Duration, TimeZone, Utc};

use super::*;
use crate::clock::ManualClock;
use crate::platform::sim::{PopulationProfile, SimPlatform};
use crate::simulation::workloads;
use crate::store::{FaultKind, FaultPlan, MemoryDisk};
use crate::transform::TransformSpec;
use crate::workflow::{BlockDef, DataUnit, Edge};

fn t0() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2024, 3, 4, 5, 0, 0).unwrap()
}

fn engine_on(store: Arc<Store>, clock: Arc<ManualClock>) -> Engine {
    Engine::new(store, AdapterRegistry::new(), clock).unwrap()
}

fn units() -> Vec<DataUnit> {
    (0..30)
        .map(|i| {
            let mut u = DataUnit::new(format!("u{i:02}"));
            u.payload.insert("kind".into(), serde_json::json!(if i % 3 == 0 { "a" } else { "b" }));
            u.payload.insert("text".into(), serde_json::json!(format!("doc {i}")));
            u
        })
        .collect()
}

/// sample -> keep-a -> rename, all Lambda blocks.
fn chain() -> WorkflowDef {
    let mut def = workloads::condition_study(1);
    def.blocks = vec![
        BlockDef::new_lambda("sample", TransformSpec::new("sample").param("n", 20).param("seed", 3)),
        BlockDef::new_lambda("keep-a", TransformSpec::new("filter").param("field", "kind").param("equals", "a")),
        BlockDef::new_lambda("rename", TransformSpec::new("map-field").param("from", "text").param("to", "body")),
    ];
    def.groups.clear();
    def.edges = vec![Edge::new("sample", "keep-a"), Edge::new("keep-a", "rename")];
    def
}

fn opts(run: &str) -> RunOptions {
    RunOptions {
        run_id: Some(run.into()),
        ..RunOptions::default()
    }
}

#[test]
fn invalid_definition_creates_no_run() {
    let engine = engine_on(Arc::new(Store::ephemeral()), Arc::new(ManualClock::new(t0())));
    let mut def = chain();
    def.edges.push(Edge::new("rename", "missing"));
    let err = engine.start_run(&def, &units(), opts("r1")).unwrap_err();
    assert!(matches!(err, EngineError::Invalid(_)));
    assert_eq!(engine.store().read(|s| s.runs().count()).unwrap(), 0);
}

#[test]
fn lambda_chain_completes_and_caches_every_block() {
    let engine = engine_on(Arc::new(Store::ephemeral()), Arc::new(ManualClock::new(t0())));
    engine.start_run(&chain(), &units(), opts("r1")).unwrap();
    assert_eq!(engine.run_until_idle("r1").unwrap(), StepOutcome::RunComplete);
    let run = engine.run_state("r1").unwrap();
    assert_eq!(run.status, RunStatus::Completed);
    let cached = engine.store().read(|s| s.cache_entries("r1").count()).unwrap();
    assert_eq!(cached, 3);
    let out = engine
        .store()
        .read(|s| s.cache("r1", "rename").map(|e| e.output.records(None)))
        .unwrap()
        .unwrap();
    assert!(!out.is_empty());
    assert!(out.iter().all(|u| u.payload.contains_key("body") && !u.payload.contains_key("text")));
}

#[test]
fn lambda_outputs_are_reproducible() {
    let digests = |run: &str| {
        let engine = engine_on(Arc::new(Store::ephemeral()), Arc::new(ManualClock::new(t0())));
        engine.start_run(&chain(), &units(), opts(run)).unwrap();
        engine.run_until_idle(run).unwrap();
        engine
            .store()
            .read(|s| s.cache_entries(run).map(|e| (e.block_id.clone(), e.digest.clone())).collect::<Vec<_>>())
            .unwrap()
    };
    assert_eq!(digests("a"), digests("b"));
}

#[test]
fn closed_window_blocks_the_run() {
    let clock = Arc::new(ManualClock::new(t0()));
    let store = Arc::new(Store::ephemeral());
    let registry = AdapterRegistry::new();
    registry.register(Arc::new(SimPlatform::new(
        PopulationProfile::calibrated(),
        t0(),
        Duration::hours(24),
    )));
    let engine = Engine::new(store, registry, clock.clone()).unwrap();
    let run = RunOptions {
        adapter: Some("sim".into()),
        ..opts("w")
    };
    engine.start_run(&workloads::windowed_study(false), &workloads::study_units(), run).unwrap();
    // 05:00 UTC is outside both windows.
    assert_eq!(engine.tick("w").unwrap(), vec![Command::PauseRun]);
    assert_eq!(engine.run_until_idle("w").unwrap(), StepOutcome::BlockedBySchedule);
    clock.set(t0() + Duration::hours(5));
    assert_eq!(engine.tick("w").unwrap(), vec![Command::ResumeRun]);
    assert!(matches!(engine.run_until_idle("w").unwrap(), StepOutcome::WaitingOnPlatform));
}

#[test]
fn resuming_a_completed_run_changes_nothing() {
    let engine = engine_on(Arc::new(Store::ephemeral()), Arc::new(ManualClock::new(t0())));
    engine.start_run(&chain(), &units(), opts("r1")).unwrap();
    engine.run_until_idle("r1").unwrap();
    let seq = engine.store().read(|s| s.seq()).unwrap();
    let run = engine.resume_run("r1").unwrap();
    assert_eq!(run.status, RunStatus::Completed);
    assert_eq!(engine.run_until_idle("r1").unwrap(), StepOutcome::RunComplete);
    assert_eq!(engine.store().read(|s| s.seq()).unwrap(), seq);
}

#[test]
fn restart_runs_only_the_remaining_blocks() {
    let reference = engine_on(Arc::new(Store::ephemeral()), Arc::new(ManualClock::new(t0())));
    reference.start_run(&chain(), &units(), opts("r1")).unwrap();
    reference.run_until_idle("r1").unwrap();
    let expected = reference
        .store()
        .read(|s| s.cache_entries("r1").map(|e| e.digest.clone()).collect::<Vec<_>>())
        .unwrap();

    for kind in [FaultKind::BeforeWrite, FaultKind::AfterWrite, FaultKind::TornWrite] {
        let disk = MemoryDisk::new();
        let clock = Arc::new(ManualClock::new(t0()));
        let store = Arc::new(Store::open_memory(disk.clone()).unwrap());
        let engine = engine_on(store.clone(), clock.clone());
        engine.start_run(&chain(), &units(), opts("r1")).unwrap();
        // Crash on the commit of the second block.
        engine.execute_next("r1").unwrap();
        store.set_fault_counting(true);
        store.arm_fault(Some(FaultPlan { at: 1, kind }));
        assert!(engine.run_until_idle("r1").unwrap_err().is_crash());

        clock.set(t0() + Duration::hours(1));
        let engine = engine_on(Arc::new(Store::open_memory(disk).unwrap()), clock);
        engine.resume_run("r1").unwrap();
        assert_eq!(engine.run_until_idle("r1").unwrap(), StepOutcome::RunComplete);
        let entries = engine
            .store()
            .read(|s| s.cache_entries("r1").cloned().collect::<Vec<_>>())
            .unwrap();
        let digests: Vec<_> = entries.iter().map(|e| e.digest.clone()).collect();
        assert_eq!(digests, expected, "{kind:?}");
        let first = entries.iter().find(|e| e.block_id == "sample").unwrap();
        assert_eq!(first.produced_at, t0(), "{kind:?}");
        let second = entries.iter().find(|e| e.block_id == "keep-a").unwrap();
        let redone = kind != FaultKind::AfterWrite;
        assert_eq!(second.produced_at == t0() + Duration::hours(1), redone, "{kind:?}");
    }
}
