//! Runs a scenario file without a gateway and prints the assertion results
//! and the snapshot stream hash. Defaults to the bundled handover scenario.
//!
//!     cargo run --example scenario_headless -- crates/core/scenarios/pick_place_mug.json

use std::path::PathBuf;

use kitchenbot::session::{run_scenario, Scenario, Session};

fn main() {
    let path = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("scenarios/handover_mug.json"));
    let scenario = match Scenario::load(&path) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("{e}");
            std::process::exit(1);
        }
    };
    let mut session = Session::new(scenario.config.clone()).expect("scenario config loads");
    let report = run_scenario(&mut session, &scenario);
    println!("{}", scenario.name);
    for a in &report.assertions {
        println!("  {:6.2} s  {}  {}", a.at_s, if a.passed { "PASS" } else { "FAIL" }, a.detail);
    }
    println!("{} ticks, {} snapshots, hash {}", report.ticks, report.snapshots, report.stream_hash);
    for line in session.snapshot().events {
        println!("  {line}");
    }
    std::process::exit(if report.passed { 0 } else { 1 });
}
