//! Records a plate pick at the dishwasher by scripted teleoperation, then
//! shows the recording re-targeted to a displaced plate and replayed.
//!
//! With `--write` the recording replaces the bundled demo.

use std::path::PathBuf;

use kitchenbot::orchestrator::{FsmState, SubFsm};
use kitchenbot::session::{run_scenario, Scenario, Session, SessionParts};
use kitchenbot::skills::{from_object_frame, Motion, ObjectCentricDemo};
use kitchenbot::spatial::{Pose, Quaternion};
use nalgebra::Vector3;

fn main() {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let mut scenario = Scenario::load(&root.join("scenarios/record_dishwasher_plate.json")).unwrap();
    let write = std::env::args().any(|a| a == "--write");
    if !write {
        scenario.config.record_dir = std::env::temp_dir().join("kitchenbot-demos");
    }
    let mut session = Session::new(scenario.config.clone()).unwrap();
    let report = run_scenario(&mut session, &scenario);
    assert!(report.passed, "{:#?}", report.assertions);
    let path = scenario.config.record_dir.join("pick_dishwasher_plate.jsonl");
    let demo = ObjectCentricDemo::load(&path).unwrap();
    println!("recorded {} samples over {:.2} s to {}", demo.samples.len(), demo.duration(), path.display());

    // the same trajectory for a plate 5 cm to the side and turned 0.3 rad
    let seen = demo.header.object_pose;
    let moved = Pose::new(seen.translation + Vector3::new(0.0, 0.05, 0.0), Quaternion::from_yaw(0.3).mul(&seen.rotation));
    for (name, pose) in [("as recorded", seen), ("displaced", moved)] {
        let d = from_object_frame(&demo, &pose);
        let (a, b) = (d.samples[0].pose.translation, d.samples.last().unwrap().pose.translation);
        println!("{name:>12}: hand from [{:.3}, {:.3}, {:.3}] to [{:.3}, {:.3}, {:.3}] (base frame)", a.x, a.y, a.z, b.x, b.y, b.z);
    }

    // replay against a displaced plate in simulation
    let config = scenario.config.clone();
    let mut parts = SessionParts::load(&config).unwrap();
    let i = parts.scene.object_index("plate").unwrap();
    let p = parts.scene.objects[i].pose;
    parts.scene.objects[i].pose = Pose::new(p.translation + Vector3::new(0.04, -0.03, 0.0), Quaternion::from_yaw(0.25).mul(&p.rotation));
    let task = demo.header.task.clone();
    let (side, tag_id) = (demo.header.side, demo.header.tag_id);
    parts.library.insert(&task, Motion::Demo { file: path.display().to_string(), demo }).unwrap();
    let mut replay = Session::from_parts(config, parts).unwrap();
    replay
        .start_fsm(SubFsm::sequence(
            "replay",
            vec![
                ("search_plate".into(), FsmState::SearchTag { tag_id, rotation_rate: 0.5, timeout: 15.0 }),
                (task.clone(), FsmState::DemoPlayback { label: task, side, tag_id }),
            ],
        ))
        .unwrap();
    while !replay.executor().unwrap().is_finished() && replay.time() < 60.0 {
        replay.step();
    }
    let held = replay.world().attachment(side).map(|a| a.object.clone());
    println!("replay: {:?}, holding {held:?}", replay.executor().unwrap().report().outcome);
}
