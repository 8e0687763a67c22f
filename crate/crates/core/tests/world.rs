use std::path::Path;
use std::sync::Arc;

use byztwin_core::harness::{build_report, Outcome, Scenario, World, WorldOptions};
use byztwin_core::sim::SimTime;
use byztwin_core::store::{Body, Broker, Topic};
use byztwin_core::twin::TwinResult;

fn load(name: &str) -> Scenario {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios");
    Scenario::load(&dir.join(format!("{name}.toml"))).unwrap()
}

#[test]
fn shipped_scenarios_validate() {
    for name in ["basic", "false_suspicion", "state_lie"] {
        load(name).validate().unwrap_or_else(|e| panic!("{name}: {e}"));
    }
}

#[test]
fn basic_run_is_safe_and_live() {
    let mut w = World::new(load("basic"), WorldOptions::default()).unwrap();
    let r = w.run().unwrap();
    assert_eq!(r.outcome, Outcome::SafeLive, "{:?}", r.metrics);
    assert!(r.metrics.decisions > 20);
    assert!(w
        .broker()
        .records(Topic::TwinResults)
        .iter()
        .any(|r| matches!(&r.body, Body::TwinResult(TwinResult::WhatIf(_)))));
}

#[test]
fn same_seed_same_report() {
    let a = World::new(load("basic"), WorldOptions::default()).unwrap().run().unwrap();
    let b = World::new(load("basic"), WorldOptions::default()).unwrap().run().unwrap();
    assert_eq!(a.hash(), b.hash());
}

#[test]
fn slicing_does_not_change_the_run() {
    let whole = World::new(load("false_suspicion"), WorldOptions::default()).unwrap().run().unwrap();
    let mut w = World::new(load("false_suspicion"), WorldOptions::default()).unwrap();
    let mut t = SimTime::ZERO;
    while !w.is_done() {
        t = t + SimTime::from_micros(7_333);
        w.run_until(t).unwrap();
    }
    assert_eq!(w.finish().unwrap().hash(), whole.hash());
}

#[test]
fn persisted_store_reopens_verbatim() {
    let dir = tempfile::tempdir().unwrap();
    let report = {
        let opts = WorldOptions {
            broker: Some(Arc::new(Broker::open_dir(dir.path()).unwrap())),
            ..Default::default()
        };
        let mut w = World::new(load("false_suspicion"), opts).unwrap();
        w.run().unwrap()
    };
    let reopened = Broker::open_dir(dir.path()).unwrap();
    assert_eq!(reopened.heads(), report.heads);
    let again = build_report(&reopened, SimTime::ZERO, report.to).unwrap();
    assert_eq!(again.hash(), report.hash());
}
