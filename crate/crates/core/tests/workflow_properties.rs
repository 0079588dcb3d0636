use std::collections::BTreeSet;

use proptest::prelude::*;

use crowdlab_core::simulation::workloads;
use crowdlab_core::transform::TransformSpec;
use crowdlab_core::workflow::{
    expand_factorial, topological_order, validate_workflow, Edge, Factor, FactorialDesign, ViolationCode,
};
use crowdlab_core::{BlockDef, WorkflowDef};

fn lambda_dag(n: usize, edges: &BTreeSet<(usize, usize)>) -> WorkflowDef {
    let mut def = workloads::condition_study(1);
    def.groups.clear();
    def.blocks = (0..n)
        .map(|i| BlockDef::new_lambda(format!("b{i}"), TransformSpec::new("concat")))
        .collect();
    def.edges = edges
        .iter()
        .map(|(a, b)| Edge::new(format!("b{a}"), format!("b{b}")))
        .collect();
    def
}

/// Depth-first cycle check, independent of the crate's Kahn ordering.
fn has_cycle(n: usize, edges: &BTreeSet<(usize, usize)>) -> bool {
    fn visit(v: usize, n: usize, edges: &BTreeSet<(usize, usize)>, color: &mut [u8]) -> bool {
        color[v] = 1;
        for w in (0..n).filter(|w| edges.contains(&(v, *w))) {
            if color[w] == 1 || (color[w] == 0 && visit(w, n, edges, color)) {
                return true;
            }
        }
        color[v] = 2;
        false
    }
    let mut color = vec![0u8; n];
    (0..n).any(|v| color[v] == 0 && visit(v, n, edges, &mut color))
}

fn dag_strategy() -> impl Strategy<Value = (usize, BTreeSet<(usize, usize)>)> {
    (1usize..9).prop_flat_map(|n| {
        let edges = proptest::collection::btree_set((0..n, 0..n), 0..(n * 2)).prop_map(|s| {
            s.into_iter().filter(|(a, b)| a != b).collect::<BTreeSet<_>>()
        });
        (Just(n), edges)
    })
}

proptest! {
    #[test]
    fn validation_accepts_exactly_the_acyclic_graphs((n, edges) in dag_strategy()) {
        let def = lambda_dag(n, &edges);
        let violations = validate_workflow(&def, &BTreeSet::new());
        let cyclic = has_cycle(n, &edges);
        prop_assert_eq!(violations.is_empty(), !cyclic, "{:?}", violations);
        prop_assert_eq!(violations.iter().any(|v| v.code == ViolationCode::Cycle), cyclic);
        prop_assert_eq!(topological_order(&def).is_ok(), !cyclic);
    }

    #[test]
    fn topological_order_respects_every_edge((n, edges) in dag_strategy()) {
        prop_assume!(!has_cycle(n, &edges));
        let order = topological_order(&lambda_dag(n, &edges)).unwrap();
        prop_assert_eq!(order.len(), n);
        let pos = |i: usize| order.iter().position(|b| *b == format!("b{i}")).unwrap();
        for (a, b) in &edges {
            prop_assert!(pos(*a) < pos(*b));
        }
    }

    #[test]
    fn factorial_size_is_the_product_of_levels(levels in proptest::collection::vec(1usize..5, 1..4)) {
        let factors: Vec<Factor> = levels
            .iter()
            .enumerate()
            .map(|(i, k)| {
                let names: Vec<String> = (0..*k).map(|l| format!("l{l}")).collect();
                let refs: Vec<&str> = names.iter().map(String::as_str).collect();
                Factor::new(&format!("f{i}"), &refs)
            })
            .collect();
        let design = FactorialDesign { factors };
        let exp = expand_factorial(&design, &workloads::screening_task(1), None).unwrap();
        let product: usize = levels.iter().product();
        prop_assert_eq!(exp.blocks.len(), product);
        let ids: BTreeSet<_> = exp.groups.iter().map(|g| g.id.clone()).collect();
        prop_assert_eq!(ids.len(), product);
    }

    #[test]
    fn valid_definitions_round_trip(sizes in proptest::collection::vec(1usize..4, 1..3), votes in 1u32..6) {
        let factors: Vec<Factor> = sizes
            .iter()
            .enumerate()
            .map(|(i, k)| {
                let names: Vec<String> = (0..*k).map(|l| format!("v{l}")).collect();
                let refs: Vec<&str> = names.iter().map(String::as_str).collect();
                Factor::new(&format!("x{i}"), &refs)
            })
            .collect();
        let def = workloads::factorial_workflow("rt", factors, votes);
        let parsed = WorkflowDef::from_json(&def.to_json_pretty()).unwrap();
        prop_assert_eq!(parsed, def);
    }
}

#[test]
fn unknown_fields_are_rejected() {
    let mut v: serde_json::Value = serde_json::from_str(&workloads::crash_workflow().to_json_pretty()).unwrap();
    v["blokcs"] = serde_json::json!([]);
    assert!(WorkflowDef::from_json(&v.to_string()).is_err());
}

#[test]
fn bundled_workflows_validate() {
    let units = workloads::study_units();
    let schema: BTreeSet<String> = units.iter().flat_map(|u| u.payload.keys().cloned()).collect();
    for def in [
        workloads::condition_study(5),
        workloads::full_design(3),
        workloads::between_subjects_workflow(),
        workloads::windowed_study(true),
    ] {
        assert!(validate_workflow(&def, &schema).is_empty(), "{}", def.name);
    }
}
