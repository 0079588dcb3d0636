//! Canonical workflows, unit sets and populations used by the acceptance
//! suite, the CLI samples and the tests.

use std::collections::BTreeMap;

use crate::platform::sim::{CountryProfile, PopulationProfile, SIM_ADAPTER_ID};
use crate::scheduler::{CheckpointEvery, Schedule, Window};
use crate::transform::TransformSpec;
use crate::worker::{CountryBucket, EligibilityPolicy, QuotaConfig};
use crate::workflow::{
    expand_factorial, BlockDef, DataUnit, DoBlock, Edge, ExperimentGroup, Factor, FactorialDesign, Paging,
    TaskTemplate, UiElement, WorkflowDef, SCHEMA_VERSION,
};

pub const CONDITIONS: [&str; 6] = ["base", "hl-0", "hl-33", "hl-66", "hl-100", "hl-aggr"];
pub const SIZES: [&str; 3] = ["short", "medium", "long"];
pub const DATASETS: [&str; 3] = ["d1", "d2", "d3"];
pub const ANSWERS: [&str; 2] = ["include", "exclude"];

pub fn screening_paging() -> Paging {
    Paging {
        units_per_page: 4,
        gold_per_page: 1,
        first_page_all_gold: true,
        max_pages: 6,
    }
}

pub fn screening_template(paging: Paging) -> TaskTemplate {
    TaskTemplate {
        title: "Does the abstract meet the inclusion criteria?".into(),
        instructions: "Read the title and abstract, then choose include or exclude.".into(),
        elements: vec![
            UiElement::text("title"),
            UiElement::text("abstract"),
            UiElement::single_choice(&ANSWERS),
        ],
        paging,
    }
}

pub fn screening_task(votes: u32) -> DoBlock {
    DoBlock {
        template: screening_template(screening_paging()),
        platform: SIM_ADAPTER_ID.into(),
        reward_per_assignment: 10,
        votes_per_unit: votes,
        group: None,
    }
}

/// `regular` documents followed by `gold` documents with known answers.
/// Every unit carries a `domain` field cycling through `domains`.
pub fn screening_units(regular: usize, gold: usize, domains: &[&str]) -> Vec<DataUnit> {
    let domain = |i: usize| domains.get(i % domains.len().max(1)).copied().unwrap_or("all");
    let mut out = Vec::with_capacity(regular + gold);
    for i in 0..regular {
        out.push(
            DataUnit::new(format!("u{i:04}"))
                .with("title", format!("Document {i}"))
                .with("abstract", format!("Abstract of document {i}."))
                .with("domain", domain(i)),
        );
    }
    for i in 0..gold {
        out.push(
            DataUnit::new(format!("g{i:03}"))
                .with("title", format!("Gold document {i}"))
                .with("abstract", format!("Abstract of gold document {i}."))
                .with("domain", domain(i))
                .with_gold(ANSWERS[i % 2]),
        );
    }
    out
}

fn base_def(name: &str) -> WorkflowDef {
    WorkflowDef {
        schema_version: SCHEMA_VERSION,
        id: None,
        version: 1,
        name: name.into(),
        blocks: Vec::new(),
        edges: Vec::new(),
        groups: Vec::new(),
        policy: EligibilityPolicy::default(),
        schedule: None,
        quotas: None,
        display: None,
    }
}

/// One independent Do block per cell of the design.
pub fn factorial_workflow(name: &str, factors: Vec<Factor>, votes: u32) -> WorkflowDef {
    let design = FactorialDesign { factors };
    let expansion = expand_factorial(&design, &screening_task(votes), None).expect("static design");
    let mut def = base_def(name);
    def.blocks = expansion.blocks;
    def.groups = expansion.groups;
    def
}

/// Document size (3) x highlighting condition (6): 18 Do blocks.
pub fn condition_study(votes: u32) -> WorkflowDef {
    factorial_workflow(
        "highlighting-study",
        vec![Factor::new("size", &SIZES), Factor::new("condition", &CONDITIONS)],
        votes,
    )
}

/// Dataset (3) x document size (3) x highlighting condition (6): 54 Do blocks.
pub fn full_design(votes: u32) -> WorkflowDef {
    factorial_workflow(
        "highlighting-study-full",
        vec![
            Factor::new("dataset", &DATASETS),
            Factor::new("size", &SIZES),
            Factor::new("condition", &CONDITIONS),
        ],
        votes,
    )
}

/// 120 documents and 12 gold documents.
pub fn study_units() -> Vec<DataUnit> {
    screening_units(120, 12, &["all"])
}

fn group(id: &str) -> ExperimentGroup {
    ExperimentGroup {
        id: id.into(),
        label: id.into(),
        color_hint: None,
        levels: BTreeMap::new(),
    }
}

pub const CRASH_DOMAINS: [&str; 4] = ["a", "b", "c", "d"];

/// Ten blocks: a partition by domain feeding four Do blocks, a majority
/// vote per Do block and a final concatenation.
pub fn crash_workflow() -> WorkflowDef {
    let mut def = base_def("crash-harness");
    def.blocks.push(BlockDef::new_lambda(
        "split",
        TransformSpec::new("partition").param("key", "domain"),
    ));
    let mut merge_edges = Vec::new();
    for d in CRASH_DOMAINS {
        let g = format!("g-{d}");
        let mut task = screening_task(2);
        task.group = Some(g.clone());
        def.groups.push(group(&g));
        def.blocks.push(BlockDef::new_do(format!("do-{d}"), task));
        def.blocks.push(BlockDef::new_lambda(
            format!("vote-{d}"),
            TransformSpec::new("aggregate-majority").param("answerField", "answer"),
        ));
        def.edges.push(Edge::new("split", format!("do-{d}")).with_partition(d));
        def.edges.push(Edge::new(format!("do-{d}"), format!("vote-{d}")));
        merge_edges.push(Edge::new(format!("vote-{d}"), "merge"));
    }
    def.blocks
        .push(BlockDef::new_lambda("merge", TransformSpec::new("concat")));
    def.edges.extend(merge_edges);
    def
}

/// 48 documents and 16 gold documents spread over the four crash domains.
pub fn crash_units() -> Vec<DataUnit> {
    screening_units(48, 16, &CRASH_DOMAINS)
}

/// Five blocks: a sample feeding three conditions whose judgments are
/// concatenated.
pub fn between_subjects_workflow() -> WorkflowDef {
    let mut def = base_def("between-subjects");
    def.blocks.push(BlockDef::new_lambda(
        "sample",
        TransformSpec::new("sample").param("n", 40).param("seed", 7),
    ));
    for c in ["base", "hl-33", "hl-100"] {
        let mut task = screening_task(3);
        task.group = Some(c.to_string());
        def.groups.push(group(c));
        def.blocks.push(BlockDef::new_do(format!("do-{c}"), task));
        def.edges.push(Edge::new("sample", format!("do-{c}")));
        def.edges.push(Edge::new(format!("do-{c}"), "collect"));
    }
    def.blocks
        .push(BlockDef::new_lambda("collect", TransformSpec::new("concat")));
    def
}

/// Hard cap on the three largest contributing countries.
pub fn top_country_quota(max_share: f64) -> QuotaConfig {
    QuotaConfig::hard(
        vec![
            CountryBucket::single("VE"),
            CountryBucket::single("EG"),
            CountryBucket::single("UA"),
        ],
        max_share,
    )
}

/// Two countries twelve hours apart, each active only during its local
/// daytime, with unequal weights.
pub fn two_country_profile() -> PopulationProfile {
    let mut p = PopulationProfile::calibrated();
    let day: Vec<f64> = (0..24).map(|h| if (8..20).contains(&h) { 1.0 } else { 0.05 }).collect();
    p.countries = BTreeMap::from([
        (
            "AA".to_string(),
            CountryProfile {
                weight: 0.7,
                utc_offset: 0,
                diurnal: Some(day.clone()),
            },
        ),
        (
            "BB".to_string(),
            CountryProfile {
                weight: 0.3,
                utc_offset: 12,
                diurnal: Some(day),
            },
        ),
    ]);
    p.arrival_rate_per_hour = 30.0;
    p
}

/// Two 4-hour windows twelve hours apart, one inside each country's
/// daytime.
pub fn opposite_windows(balance: bool) -> Schedule {
    Schedule {
        windows: vec![Window::daily(10, 14), Window::daily(22, 2)],
        checkpoint_every: Some(CheckpointEvery {
            judgments: Some(200),
            minutes: None,
        }),
        spread_over_days: None,
        balance_across_groups: balance,
        balance_slack: 100,
    }
}

/// Two conditions collected within opposite windows.
pub fn windowed_study(balance: bool) -> WorkflowDef {
    let mut def = base_def("windowed");
    for c in ["base", "hl-100"] {
        let mut task = screening_task(50);
        task.group = Some(c.to_string());
        def.groups.push(group(c));
        def.blocks.push(BlockDef::new_do(format!("do-{c}"), task));
    }
    def.schedule = Some(opposite_windows(balance));
    def
}
