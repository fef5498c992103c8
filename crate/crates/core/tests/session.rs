use std::path::PathBuf;

use kitchenbot::orchestrator::Outcome;
use kitchenbot::session::{
    run_scenario, Ack, ArmMode, Command, Frame, Macro, Predicate, Scenario, Session, SessionConfig, StateSnapshot,
};
use kitchenbot::types::{GripperCommand, Side};
use kitchenbot::wbc::Mode;

fn session() -> Session {
    Session::new(SessionConfig::default()).unwrap()
}

fn scratch_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("kitchenbot-{name}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    dir
}

fn step_n(s: &mut Session, n: usize) -> Option<StateSnapshot> {
    let mut last = None;
    for _ in 0..n {
        if let Some(snap) = s.step() {
            last = Some(snap);
        }
    }
    last
}

fn set_mode(s: &mut Session, client: u64, mode: Mode) -> Ack {
    s.handle(client, 0, Command::Macro(Macro::Mode { mode }))
}

#[test]
fn frames_round_trip_with_version() {
    let commands = vec![
        Command::TeleopArm {
            side: Side::Left,
            mode: ArmMode::PoseDelta,
            value: [0.0, 0.0, 0.01, 0.0, 0.0, 0.0],
        },
        Command::BaseTwist {
            vx: 0.1,
            vy: 0.0,
            omega: 0.2,
        },
        Command::Gripper {
            side: Side::Right,
            command: GripperCommand::Close,
        },
        Command::Macro(Macro::Homing),
        Command::Macro(Macro::StartRecord {
            task: "pick_table_mug".into(),
            side: Side::Left,
        }),
        Command::Macro(Macro::StopRecord),
        Command::Macro(Macro::Mode { mode: Mode::Teleop }),
        Command::Instruct { text: "hi".into() },
        Command::Preempt,
        Command::Release,
    ];
    for (id, command) in commands.into_iter().enumerate() {
        let f = Frame::Command { id: id as u64, command };
        let text = f.to_json();
        assert!(text.starts_with(r#"{"v":1,"#), "{text}");
        assert_eq!(Frame::parse(&text).unwrap(), f);
    }
    let f = Frame::Ack(Ack::rejected(3, "mode"));
    assert_eq!(Frame::parse(&f.to_json()).unwrap(), f);
    let snap = Frame::Snapshot(Box::new(session().snapshot()));
    assert_eq!(Frame::parse(&snap.to_json()).unwrap(), snap);

    let macro_text = r#"{"v":1,"kind":"command","id":7,"command":{"type":"macro","name":"mode","mode":"teleop"}}"#;
    assert_eq!(
        Frame::parse(macro_text).unwrap(),
        Frame::Command {
            id: 7,
            command: Command::Macro(Macro::Mode { mode: Mode::Teleop })
        }
    );
}

#[test]
fn malformed_frames_are_rejected() {
    assert!(Frame::parse(r#"{"kind":"command","id":1,"command":{"type":"preempt"}}"#)
        .unwrap_err()
        .contains("version"));
    assert!(Frame::parse(r#"{"v":2,"kind":"command","id":1,"command":{"type":"preempt"}}"#)
        .unwrap_err()
        .contains("version"));
    assert!(Frame::parse(r#"{"v":1,"kind":"command","id":1,"command":{"type":"jump"}}"#).is_err());
    assert!(Frame::parse("[1]").is_err());
    assert!(Frame::parse("{").is_err());
}

#[test]
fn teleop_commands_need_teleop_mode() {
    let mut s = session();
    assert_eq!(s.controller().mode, Mode::Idle);
    let arm = Command::TeleopArm {
        side: Side::Left,
        mode: ArmMode::Twist,
        value: [0.1, 0.0, 0.0, 0.0, 0.0, 0.0],
    };
    let base = Command::BaseTwist {
        vx: 0.1,
        vy: 0.0,
        omega: 0.0,
    };
    let grip = Command::Gripper {
        side: Side::Left,
        command: GripperCommand::Close,
    };
    for c in [arm.clone(), base.clone(), grip.clone(), Command::Macro(Macro::Homing)] {
        let ack = s.handle(1, 1, c);
        assert!(!ack.is_accepted());
        assert!(ack.reason.unwrap().starts_with("mode"));
    }
    assert!(set_mode(&mut s, 1, Mode::Teleop).is_accepted());
    for c in [arm, base, grip] {
        assert!(s.handle(1, 2, c).is_accepted());
    }
    let ack = s.handle(1, 3, Command::Instruct {
        text: "pick the mug from the table and place it in the cabinet".into(),
    });
    assert!(!ack.is_accepted());
    let nan = Command::BaseTwist {
        vx: f64::NAN,
        vy: 0.0,
        omega: 0.0,
    };
    assert_eq!(s.handle(1, 4, nan).reason.as_deref(), Some("non-finite value"));
    assert!(!s.handle(1, 5, Command::Preempt).is_accepted());
}

#[test]
fn pose_delta_moves_the_target_by_one_centimeter() {
    let mut s = session();
    set_mode(&mut s, 1, Mode::Teleop);
    let before = s.step().map(|_| ()).map_or_else(|| s.snapshot(), |_| s.snapshot());
    let ack = s.handle(1, 1, Command::TeleopArm {
        side: Side::Left,
        mode: ArmMode::PoseDelta,
        value: [0.0, 0.0, 0.01, 0.0, 0.0, 0.0],
    });
    assert!(ack.is_accepted());
    s.step();
    let after = s.snapshot();
    let d = after.ee_targets.left.translation - before.ee_targets.left.translation;
    assert!((d.z - 0.01).abs() < 1e-9 && d.xy().norm() < 1e-9, "{d:?}");
    let r = after.ee_targets.right.translation - before.ee_targets.right.translation;
    assert!(r.norm() < 1e-9);
    // the arm follows
    step_n(&mut s, 500);
    let snap = s.snapshot();
    let err = (snap.ee.left.translation - snap.ee_targets.left.translation).norm();
    assert!(err < 1e-3, "tracking error {err}");
}

#[test]
fn twists_stop_without_refresh() {
    let mut s = session();
    set_mode(&mut s, 1, Mode::Teleop);
    s.handle(1, 1, Command::BaseTwist {
        vx: 0.2,
        vy: 0.0,
        omega: 0.0,
    });
    step_n(&mut s, 250);
    let x1 = s.snapshot().base.x;
    step_n(&mut s, 250);
    let x2 = s.snapshot().base.x;
    assert!(x1 > 0.04, "moved {x1}");
    assert!((x2 - x1).abs() < 1e-3, "kept moving: {x1} -> {x2}");
}

#[test]
fn base_twist_is_capped() {
    let mut s = session();
    set_mode(&mut s, 1, Mode::Teleop);
    let x0 = s.snapshot().base.x;
    for i in 0..50 {
        s.handle(1, i, Command::BaseTwist {
            vx: 5.0,
            vy: 0.0,
            omega: 0.0,
        });
        s.step();
    }
    let dx = s.snapshot().base.x - x0;
    let limit = s.config().teleop.base_linear * 50.0 * s.dt();
    assert!(dx <= limit + 1e-9, "{dx} > {limit}");
}

#[test]
fn instruction_starts_a_plan_visible_in_snapshots() {
    let mut s = session();
    let ack = s.handle(1, 1, Command::Instruct {
        text: "pick the mug from the table and place it in the cabinet".into(),
    });
    assert!(ack.is_accepted(), "{ack:?}");
    assert_eq!(ack.reason.as_deref(), Some("pick_from_table(mug), place_at_cabinet"));
    assert_eq!(s.controller().mode, Mode::Autonomous);
    let busy = s.handle(1, 2, Command::Instruct {
        text: "pick the mug from the table and place it in the cabinet".into(),
    });
    assert!(busy.reason.unwrap().starts_with("busy"));

    let mut seen = Vec::new();
    let mut last = None;
    while s.time() < 120.0 {
        if let Some(snap) = s.step() {
            let fsm = snap.fsm.as_ref().unwrap();
            if let Some(state) = &fsm.state {
                if seen.last() != Some(state) {
                    seen.push(state.clone());
                }
            }
            let done = fsm.report.outcome.is_some();
            last = Some(snap);
            if done {
                break;
            }
        }
    }
    let last = last.unwrap();
    assert_eq!(last.fsm.as_ref().unwrap().report.outcome, Some(Outcome::Succeeded));
    assert_eq!(seen.first().map(String::as_str), Some("navigate_table"));
    assert_eq!(seen.last().map(String::as_str), Some("retract_cabinet"));
    assert!(seen.contains(&"close_left".to_string()));
    assert!(last.plan.is_some());
    assert!(last.events.iter().any(|e| e.contains("plan finished")));
}

#[test]
fn unparseable_instruction_is_rejected() {
    let mut s = session();
    let ack = s.handle(1, 1, Command::Instruct {
        text: "sing a song".into(),
    });
    assert!(ack.reason.unwrap().starts_with("no plan"));
    assert_eq!(s.controller().mode, Mode::Idle);
}

#[test]
fn preempt_switches_to_teleop() {
    let mut s = session();
    s.handle(1, 1, Command::Instruct {
        text: "pick the mug from the table and place it in the cabinet".into(),
    });
    step_n(&mut s, 500);
    assert!(s.handle(1, 2, Command::Preempt).is_accepted());
    step_n(&mut s, 2);
    assert_eq!(s.executor().unwrap().report().outcome, Some(Outcome::Preempted));
    assert_eq!(s.controller().mode, Mode::Teleop);
    let base = s.snapshot().base;
    step_n(&mut s, 250);
    let still = s.snapshot().base;
    assert!((still.x - base.x).abs() < 1e-2 && (still.y - base.y).abs() < 1e-2);
}

#[test]
fn only_one_client_holds_command_rights() {
    let mut s = session();
    assert!(set_mode(&mut s, 1, Mode::Teleop).is_accepted());
    assert_eq!(s.snapshot().rights, Some(1));
    let grip = Command::Gripper {
        side: Side::Left,
        command: GripperCommand::Open,
    };
    let ack = s.handle(2, 1, grip.clone());
    assert!(ack.reason.unwrap().starts_with("rights"));
    assert!(!s.handle(2, 2, Command::Release).is_accepted());
    assert!(s.handle(1, 3, Command::Release).is_accepted());
    assert!(s.handle(2, 4, grip.clone()).is_accepted());
    assert!(set_mode(&mut s, 2, Mode::Teleop).is_accepted());
    assert_eq!(s.snapshot().rights, Some(2));
    s.disconnect(2);
    assert_eq!(s.snapshot().rights, None);
    assert!(s.handle(1, 5, grip).is_accepted());
}

#[test]
fn homing_returns_the_arms() {
    let mut s = session();
    set_mode(&mut s, 1, Mode::Teleop);
    let home = s.snapshot().ee.left;
    for i in 0..3 {
        s.handle(1, i, Command::TeleopArm {
            side: Side::Left,
            mode: ArmMode::PoseDelta,
            value: [0.03, 0.0, -0.03, 0.0, 0.0, 0.0],
        });
        step_n(&mut s, 100);
    }
    let moved = (s.snapshot().ee.left.translation - home.translation).norm();
    assert!(moved > 0.05, "moved {moved}");
    assert!(s.handle(1, 9, Command::Macro(Macro::Homing)).is_accepted());
    step_n(&mut s, 1000);
    let back = (s.snapshot().ee.left.translation - home.translation).norm();
    assert!(back < 5e-3, "{back}");
    assert!(s.snapshot().events.iter().any(|e| e.contains("homing finished")));
}

#[test]
fn recording_writes_an_object_centric_demo() {
    let dir = scratch_dir("record");
    let mut s = Session::new(SessionConfig {
        record_dir: dir.clone(),
        ..SessionConfig::default()
    })
    .unwrap();
    set_mode(&mut s, 1, Mode::Teleop);
    let bad = s.handle(1, 1, Command::Macro(Macro::StartRecord {
        task: "pick_table_spoon".into(),
        side: Side::Left,
    }));
    assert!(!bad.is_accepted());
    let ack = s.handle(1, 2, Command::Macro(Macro::StartRecord {
        task: "pick_table_mug".into(),
        side: Side::Left,
    }));
    assert!(ack.is_accepted(), "{ack:?}");
    assert_eq!(s.snapshot().recording.as_deref(), Some("pick_table_mug"));
    for i in 0..10 {
        s.handle(1, 10 + i, Command::TeleopArm {
            side: Side::Left,
            mode: ArmMode::Twist,
            value: [0.05, 0.0, 0.0, 0.0, 0.0, 0.0],
        });
        step_n(&mut s, 25);
    }
    s.handle(1, 30, Command::Gripper {
        side: Side::Left,
        command: GripperCommand::Close,
    });
    step_n(&mut s, 10);
    let ack = s.handle(1, 31, Command::Macro(Macro::StopRecord));
    assert!(ack.is_accepted(), "{ack:?}");
    let path = dir.join("pick_table_mug.jsonl");
    assert_eq!(ack.reason.as_deref(), Some(path.display().to_string().as_str()));
    let demo = kitchenbot::skills::ObjectCentricDemo::load(&path).unwrap();
    assert_eq!(&demo, s.last_demo().unwrap());
    assert_eq!(demo.header.tag_id, 11);
    assert_eq!(demo.header.rate_hz, 50.0);
    let n = demo.samples.len();
    assert!((50..=53).contains(&n), "{n} samples");
    let travel = (demo.samples[n - 1].pose.translation - demo.samples[0].pose.translation).norm();
    assert!((travel - 0.05).abs() < 0.01, "travel {travel}");
    assert!(!s.handle(1, 32, Command::Macro(Macro::StopRecord)).is_accepted());
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn config_errors_name_the_line() {
    let dir = scratch_dir("config");
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("session.json");
    std::fs::write(&path, "{\n  \"loop_rate_hz\": 250,\n  \"snapshot_hz\": 30\n}\n").unwrap();
    let err = SessionConfig::load(&path).unwrap_err().to_string();
    assert!(err.contains("snapshot_hz") && err.contains("line 3"), "{err}");
    std::fs::write(&path, "{\"loop_rate_hz\": -1}").unwrap();
    assert!(SessionConfig::load(&path).unwrap_err().to_string().contains("loop_rate_hz"));
    std::fs::write(&path, "{\"scene\": \"missing.json\", \"seed\": 3}").unwrap();
    let cfg = SessionConfig::load(&path).unwrap();
    assert_eq!(cfg.scene.as_deref(), Some(dir.join("missing.json").as_path()));
    assert!(Session::new(cfg).is_err());
    let _ = std::fs::remove_dir_all(&dir);
}

fn bundled(name: &str) -> Scenario {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(name);
    Scenario::load(&path).unwrap()
}

#[test]
fn bundled_pick_place_scenario_passes_and_hashes_reproducibly() {
    let sc = bundled("pick_place_mug.json");
    let mut a = Session::new(sc.config.clone()).unwrap();
    let ra = run_scenario(&mut a, &sc);
    assert!(ra.passed, "{:#?}", ra.assertions);
    assert_eq!(ra.assertions.len(), 4);
    assert_eq!(ra.snapshots, ra.ticks / 8);
    let mut b = Session::new(sc.config.clone()).unwrap();
    let rb = run_scenario(&mut b, &sc);
    assert_eq!(ra.stream_hash, rb.stream_hash);

    let mut other = sc.clone();
    other.config.seed = Some(8);
    let mut c = Session::new(other.config.clone()).unwrap();
    let rc = run_scenario(&mut c, &other);
    assert_ne!(ra.stream_hash, rc.stream_hash);
}

#[test]
fn bundled_handover_scenario_passes() {
    let sc = bundled("handover_mug.json");
    let mut s = Session::new(sc.config.clone()).unwrap();
    let r = run_scenario(&mut s, &sc);
    assert!(r.passed, "{:#?}", r.assertions);
    assert_eq!(s.snapshot().selected_human.as_deref(), Some("alice"));
}

#[test]
fn scenario_failures_are_reported() {
    let sc = Scenario::from_json(
        r#"{"steps": [
            {"at_s": 0.5, "command": {"type": "preempt"}},
            {"assert": {"at_s": 1.0, "predicate": {"type": "mode_is", "mode": "teleop"}}},
            {"assert": {"at_s": 1.0, "predicate": {"type": "fsm_outcome", "outcome": null}}}
        ]}"#,
    )
    .unwrap();
    let mut s = session();
    let r = run_scenario(&mut s, &sc);
    assert!(!r.passed);
    assert!(!r.acks[0].1.is_accepted());
    assert!(!r.assertions[0].passed);
    assert_eq!(r.assertions[0].detail, "mode is idle");
    assert!(r.assertions[1].passed);
    assert!(matches!(r.assertions[1].predicate, Predicate::FsmOutcome { .. }));
    assert!((r.end_time - 1.0).abs() < 1e-9);

    for bad in [
        r#"{"steps": [{"command": {"type": "preempt"}}]}"#,
        r#"{"steps": [{"at_s": 1, "assert": {"at_s": 1, "predicate": {"type": "mode_is", "mode": "idle"}}}]}"#,
        r#"{"steps": [{"at_s": 1}]}"#,
        r#"{"steps": [], "extra": 1}"#,
    ] {
        assert!(Scenario::from_json(bad).is_err(), "{bad}");
    }
}
