use std::collections::BTreeSet;

use serde_json::Value;

use crowdlab::api::ROUTES;

fn description() -> Value {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../api/openapi.json");
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn description_lists_exactly_the_served_routes() {
    let doc = description();
    let mut described = BTreeSet::new();
    for (path, item) in doc["paths"].as_object().unwrap() {
        for method in item.as_object().unwrap().keys() {
            described.insert((method.to_uppercase(), path.clone()));
        }
    }
    let served: BTreeSet<_> = ROUTES.iter().map(|r| (r.method.to_string(), r.path.to_string())).collect();
    assert_eq!(described, served);
}

#[test]
fn every_operation_is_named_and_references_resolve() {
    let doc = description();
    let schemas = doc["components"]["schemas"].as_object().unwrap();
    let mut ids = BTreeSet::new();
    for item in doc["paths"].as_object().unwrap().values() {
        for op in item.as_object().unwrap().values() {
            assert!(ids.insert(op["operationId"].as_str().unwrap().to_string()));
            assert!(!op["responses"].as_object().unwrap().is_empty());
        }
    }
    let text = doc.to_string();
    for part in text.split("\"#/components/schemas/").skip(1) {
        let name = &part[..part.find('"').unwrap()];
        assert!(schemas.contains_key(name), "dangling reference {name}");
    }
}

#[test]
fn request_bodies_are_closed() {
    let doc = description();
    let schemas = &doc["components"]["schemas"];
    for name in ["WorkflowDef", "CreateRunRequest", "EligibilityRequest", "QuotaEdit", "ValidateRequest"] {
        assert_eq!(schemas[name]["additionalProperties"], false, "{name}");
    }
}
