mod common;

use common::{bundled, scenario_dir};
use sdedge::authn::AccessMode;
use sdedge::scenario::{Scenario, ScenarioError};
use sdedge::sim::metrics::{parse_csv, MetricsReport};
use sdedge::sim::Simulation;

#[test]
fn fig6_fixture_contents() {
    let s = bundled("fig6");
    assert_eq!((s.aps.len(), s.switches.len(), s.controllers.len()), (3, 1, 1));
    assert_eq!(s.md_names(), vec!["M1".to_string()]);
    assert_eq!(s.groups.len(), 1);
    assert_eq!(s.groups[0].members, vec!["AP1", "AP2", "AP3"]);
    assert!(s
        .links
        .iter()
        .filter(|l| l.a.starts_with("AP") || l.b.starts_with("AP"))
        .all(|l| l.rate == Some(11.0)));
    assert_eq!(s.params.mode, AccessMode::LocationAuth);
    assert_eq!(s.params.duration, 40.0);
}

#[test]
fn fig5_fixture_contents() {
    let s = bundled("fig5");
    assert_eq!(s.aps.len(), 8);
    assert_eq!(s.controllers.len(), 2);
    assert_eq!(s.md_names().len(), 300);
}

#[test]
fn bundled_scenarios_round_trip() {
    for entry in std::fs::read_dir(scenario_dir()).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().and_then(|e| e.to_str()) != Some("scenario") {
            continue;
        }
        let a = Scenario::from_path(&path).unwrap();
        let b = Scenario::from_text(&a.to_text()).unwrap();
        assert_eq!(a, b, "{}", path.display());
    }
}

#[test]
fn undeclared_ap_is_named() {
    let mut text = std::fs::read_to_string(scenario_dir().join("fig6.scenario")).unwrap();
    text = text.replace("group G1 AP1 AP2 AP3", "group G1 AP1 AP9");
    match Scenario::from_text(&text) {
        Err(ScenarioError::Invalid(issues)) => {
            assert_eq!(issues.len(), 1);
            assert!(issues[0].message.contains("AP9"));
            assert_eq!(
                issues[0].line,
                text.lines().position(|l| l.starts_with("group G1")).unwrap() + 1
            );
        }
        other => panic!("expected a validation error, got {other:?}"),
    }
}

#[test]
fn fig6_csv_cadence_and_json_agree() {
    let r = Simulation::new(&bundled("fig6")).unwrap().run().unwrap();
    let csv = r.to_csv();
    let rows = parse_csv(&csv).unwrap();
    // 0.1 s cadence over [0, 40], one stream
    assert_eq!(rows.len(), 401);
    assert_eq!(rows.first().unwrap().0, 0.0);
    assert_eq!(rows.last().unwrap().0, 40.0);
    let json: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
    let samples = json["series"][0]["samples"].as_array().unwrap();
    assert_eq!(samples.len(), rows.len());
    for (row, s) in rows.iter().zip(samples) {
        assert_eq!(row.0, s["t"].as_f64().unwrap());
        assert_eq!(row.2, s["mbps"].as_f64().unwrap());
    }
}

#[test]
fn empty_report_is_header_only() {
    let mut s = bundled("fig2");
    s.flows.clear();
    let r: MetricsReport = Simulation::new(&s).unwrap().run().unwrap();
    let csv = r.to_csv();
    assert_eq!(csv.lines().count(), 2, "{csv}");
    assert!(parse_csv(&csv).unwrap().is_empty());
}

#[test]
fn restricting_controllers_keeps_scenario_valid() {
    let s = bundled("fig5c");
    for k in 1..=4 {
        let mut t = s.clone();
        t.apply_overrides(&[format!("controllers={k}")]).unwrap();
        t.restrict_controllers(k);
        assert_eq!(t.controllers.len(), k);
        t.validate().unwrap();
    }
}
