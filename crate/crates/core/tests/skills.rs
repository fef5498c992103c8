use kitchenbot::model::KinematicModel;
use kitchenbot::skills::{
    check_label, from_object_frame, to_object_frame, DemoHeader, DemoRecorder, DemoSample, Demonstration, FrameRef,
    GripperAction, Motion, MotionLibrary, MotionStatus, ObjectCentricDemo, Playback, PlaybackOptions, SkillError,
    Waypoint, WaypointOptions, WaypointRun, WaypointSpec,
};
use kitchenbot::spatial::{PlanarPose, Pose, Quaternion};
use kitchenbot::types::{GripperCommand, Side};
use kitchenbot::wbc::{ControllerConfig, ControllerState, Mode, TaskId};
use nalgebra::Vector3;
use std::collections::BTreeMap;

fn header(object_pose: Pose) -> DemoHeader {
    DemoHeader {
        task: "pick_table".into(),
        side: Side::Left,
        tag_id: 11,
        rate_hz: 50.0,
        object_pose,
    }
}

fn sample_demo() -> Demonstration {
    let obj = Pose::new(Vector3::new(0.6, 0.1, 0.8), Quaternion::from_yaw(0.3));
    let samples = (0..40)
        .map(|k| {
            let t = k as f64 * 0.02;
            DemoSample {
                t,
                pose: Pose::new(
                    Vector3::new(0.4 + 0.2 * t, 0.2 - 0.1 * t, 1.0 - 0.2 * t),
                    Quaternion::from_rpy(0.1 * t, -0.2 * t, 0.3),
                ),
                gripper: match k {
                    0 => GripperAction::Open,
                    30 => GripperAction::Close,
                    _ => GripperAction::Hold,
                },
            }
        })
        .collect();
    Demonstration::new(header(obj), samples).unwrap()
}

fn close(a: &Pose, b: &Pose, tol: f64) -> bool {
    (a.translation - b.translation).norm() <= tol && a.rotation.mul(&b.rotation.inverse()).angle() <= tol
}

#[test]
fn recorder_samples_at_its_rate() {
    let mut rec = DemoRecorder::new("pick_table", Side::Left, 11, 50.0);
    let tag = Pose::from_translation(0.6, 0.0, 0.8);
    for k in 0..1250 {
        let t = k as f64 / 250.0;
        let ee = Pose::from_translation(0.5 + 0.01 * t, 0.2, 1.0);
        rec.feed(t, &ee, GripperAction::Hold, (k == 40).then_some(&tag));
    }
    let demo = rec.finish().unwrap();
    assert!((249..=251).contains(&demo.samples.len()), "{}", demo.samples.len());
    assert!(demo.samples.windows(2).all(|w| w[1].t > w[0].t));
    assert_eq!(demo.header.object_pose, tag);
}

#[test]
fn stationary_recording_has_equal_poses() {
    let mut rec = DemoRecorder::new("x", Side::Right, 3, 50.0);
    let ee = Pose::new(Vector3::new(0.5, -0.2, 1.1), Quaternion::from_yaw(0.2));
    let tag = Pose::identity();
    for k in 0..100 {
        rec.feed(k as f64 * 0.004, &ee, GripperAction::Hold, Some(&tag));
    }
    let demo = rec.finish().unwrap();
    assert!(demo.samples.iter().all(|s| close(&s.pose, &ee, 1e-9)));
}

#[test]
fn recording_without_the_tag_is_rejected() {
    let mut rec = DemoRecorder::new("x", Side::Left, 3, 50.0);
    for k in 0..100 {
        rec.feed(k as f64 * 0.004, &Pose::identity(), GripperAction::Hold, None);
    }
    assert!(matches!(rec.finish(), Err(SkillError::TagNeverObserved)));
}

#[test]
fn object_frame_conversion() {
    let mut d = sample_demo();
    d.header.object_pose = Pose::identity();
    assert_eq!(to_object_frame(&d).samples, d.samples);

    let d = sample_demo();
    let oc = to_object_frame(&d);
    let back = from_object_frame(&oc, &d.header.object_pose);
    for (a, b) in back.samples.iter().zip(&d.samples) {
        assert!(close(&a.pose, &b.pose, 1e-9));
        assert_eq!((a.t, a.gripper), (b.t, b.gripper));
    }

    let d = Demonstration::new(
        header(Pose::from_translation(1.0, 0.0, 0.0)),
        vec![
            DemoSample {
                t: 0.0,
                pose: Pose::from_translation(1.2, 0.0, 0.5),
                gripper: GripperAction::Hold,
            },
            DemoSample {
                t: 0.1,
                pose: Pose::from_translation(1.2, 0.0, 0.5),
                gripper: GripperAction::Hold,
            },
        ],
    )
    .unwrap();
    let t = to_object_frame(&d).samples[0].pose.translation;
    assert!((t - Vector3::new(0.2, 0.0, 0.5)).norm() < 1e-15);
}

#[test]
fn demo_files_round_trip_byte_for_byte() {
    let oc = to_object_frame(&sample_demo());
    let text = oc.to_jsonl();
    let again = ObjectCentricDemo::from_jsonl(&text).unwrap();
    assert_eq!(again.to_jsonl(), text);
    assert_eq!(text.lines().count(), 41);
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    for key in ["task", "side", "tag_id", "rate_hz", "object_pose"] {
        assert!(first.get(key).is_some(), "{key}");
    }
}

#[test]
fn malformed_demos_are_rejected() {
    let oc = to_object_frame(&sample_demo());
    let mut lines: Vec<String> = oc.to_jsonl().lines().map(String::from).collect();
    lines.swap(3, 4);
    assert!(matches!(ObjectCentricDemo::from_jsonl(&lines.join("\n")), Err(SkillError::InvalidDemo(_))));
    let text = oc.to_jsonl();
    let two: Vec<&str> = text.lines().take(2).collect();
    assert!(ObjectCentricDemo::from_jsonl(&two.join("\n")).is_err());
    let err = ObjectCentricDemo::from_jsonl("{\"task\":1}\n").unwrap_err().to_string();
    assert!(err.contains("line 1"), "{err}");
}

#[test]
fn replay_at_recorded_pose_reproduces_the_recording() {
    let d = sample_demo();
    let oc = to_object_frame(&d);
    let ee = d.samples[0].pose;
    let pb = Playback::new(oc, d.header.object_pose, 0.0, 0.5, &ee, PlaybackOptions::default()).unwrap();
    for ((t, p), s) in pb.schedule().iter().zip(&d.samples) {
        assert!((t - s.t).abs() < 1e-12);
        assert!(close(p, &s.pose, 1e-9));
    }
}

#[test]
fn replay_is_equivariant_under_object_displacement() {
    let d = sample_demo();
    let oc = to_object_frame(&d);
    let p = d.header.object_pose;
    let disp = Pose::new(Vector3::new(0.3, -0.2, 0.0), Quaternion::from_yaw(std::f64::consts::PI));
    let dp = disp.compose(&p);
    let ee = Pose::identity();
    let opts = PlaybackOptions::default();
    let base = Playback::new(oc.clone(), p, 0.0, 0.0, &ee, opts.clone()).unwrap();
    let moved = Playback::new(oc.clone(), dp, 0.0, 0.0, &ee, opts).unwrap();
    for (k, ((_, a), (_, b))) in base.schedule().iter().zip(moved.schedule()).enumerate() {
        assert_eq!(b, dp.compose(&oc.samples[k].pose));
        assert!(close(&b, &disp.compose(a), 1e-12));
    }
}

#[test]
fn speed_scale_halves_timestamps() {
    let d = sample_demo();
    let oc = to_object_frame(&d);
    let ee = Pose::identity();
    let p = d.header.object_pose;
    let one = Playback::new(oc.clone(), p, 0.0, 0.0, &ee, PlaybackOptions::default()).unwrap();
    let two = Playback::new(
        oc,
        p,
        0.0,
        0.0,
        &ee,
        PlaybackOptions {
            speed_scale: 2.0,
            ..PlaybackOptions::default()
        },
    )
    .unwrap();
    for ((ta, pa), (tb, pb)) in one.schedule().iter().zip(two.schedule()) {
        assert_eq!(*pa, pb);
        assert_eq!(ta / 2.0, tb);
    }
    let (g1, g2) = (one.gripper_schedule(), two.gripper_schedule());
    assert_eq!(g1.len(), 2);
    for ((ta, ca), (tb, cb)) in g1.iter().zip(&g2) {
        assert_eq!(ca, cb);
        assert_eq!(ta / 2.0, *tb);
    }
}

#[test]
fn stale_object_pose_is_rejected() {
    let d = sample_demo();
    let r = Playback::new(to_object_frame(&d), d.header.object_pose, 0.0, 1.5, &Pose::identity(), PlaybackOptions::default());
    assert!(matches!(r, Err(SkillError::StaleObjectPose { .. })));
}

#[test]
fn streamed_playback_fires_gripper_events_and_succeeds() {
    let d = sample_demo();
    let oc = to_object_frame(&d);
    let mut ee = d.samples[0].pose;
    let mut pb = Playback::new(oc, d.header.object_pose, 0.0, 0.0, &ee, PlaybackOptions::default()).unwrap();
    let mut events = Vec::new();
    let mut t = 0.0;
    loop {
        let step = pb.poll(t, &ee);
        events.extend(step.gripper.iter().map(|g| (t, *g)));
        ee = step.reference;
        match step.status {
            MotionStatus::Running => {}
            MotionStatus::Succeeded => break,
            MotionStatus::Failed(e) => panic!("{e}"),
        }
        t += 0.004;
        assert!(t < 5.0);
    }
    assert_eq!(events.iter().map(|e| e.1).collect::<Vec<_>>(), vec![GripperCommand::Open, GripperCommand::Close]);
    assert!((events[1].0 - 0.6).abs() < 0.005, "{events:?}");
}

#[test]
fn playback_aborts_on_tracking_error() {
    let d = sample_demo();
    let ee = d.samples[0].pose;
    let mut pb = Playback::new(to_object_frame(&d), d.header.object_pose, 0.0, 0.0, &ee, PlaybackOptions::default()).unwrap();
    let far = Pose::new(ee.translation + Vector3::new(0.0, 0.0, 0.3), ee.rotation);
    assert!(matches!(pb.poll(0.1, &far).status, MotionStatus::Failed(_)));
}

fn spec(frame: FrameRef, offsets: &[[f64; 3]]) -> WaypointSpec {
    WaypointSpec {
        side: Side::Left,
        frame,
        waypoints: offsets
            .iter()
            .map(|o| Waypoint {
                offset: Pose::from_translation(o[0], o[1], o[2]),
                duration: 2.0,
            })
            .collect(),
        gripper: BTreeMap::from([(offsets.len() - 1, GripperCommand::Close)]),
    }
}

#[test]
fn waypoint_at_current_pose_succeeds_immediately() {
    let ee = Pose::new(Vector3::new(0.5, 0.2, 1.0), Quaternion::from_yaw(0.1));
    let mut run = WaypointRun::new(spec(FrameRef::Tag(5), &[[0.0, 0.0, 0.0]]), WaypointOptions::default());
    let step = run.poll(0.0, &ee, &|_| Some(ee));
    assert_eq!(step.status, MotionStatus::Succeeded);
    assert_eq!(step.reference, ee);
    assert_eq!(step.gripper, vec![GripperCommand::Close]);
}

#[test]
fn missing_frame_fails_with_diagnostic() {
    let mut run = WaypointRun::new(spec(FrameRef::Human, &[[0.0, 0.0, 0.1]]), WaypointOptions::default());
    match run.poll(0.0, &Pose::identity(), &|_| None).status {
        MotionStatus::Failed(msg) => assert!(msg.contains("human"), "{msg}"),
        s => panic!("{s:?}"),
    }
}

#[test]
fn waypoint_offset_from_tag_is_reached_by_the_controller() {
    let model = KinematicModel::default_model();
    let q0 = model.home_configuration(PlanarPose::default());
    let mut ctrl = ControllerState::init(&model, ControllerConfig::default(), q0).unwrap();
    ctrl.mode = Mode::Autonomous;
    let tag = Pose::new(Vector3::new(0.5, 0.25, 0.95), Quaternion::from_yaw(0.2));
    let mut run = WaypointRun::new(
        spec(FrameRef::Tag(7), &[[-0.1, 0.0, 0.15], [0.0, 0.0, 0.1]]),
        WaypointOptions::default(),
    );
    let mut t = 0.0;
    let mut closed = false;
    let outcome = loop {
        let ee = model.forward_kinematics(&ctrl.configuration, "ee_left").unwrap();
        let step = run.poll(t, &ee, &|f| (*f == FrameRef::Tag(7)).then_some(tag));
        closed |= step.gripper.contains(&GripperCommand::Close);
        if step.status.is_done() {
            break (step.status, ee);
        }
        ctrl.set_task_reference(TaskId::Left, step.reference, step.feedforward).unwrap();
        ctrl.control_step(&model, &[]).unwrap();
        t += ctrl.dt();
        assert!(t < 10.0);
    };
    assert_eq!(outcome.0, MotionStatus::Succeeded);
    assert!(closed);
    let goal = tag.compose(&Pose::from_translation(0.0, 0.0, 0.1));
    assert!(close(&outcome.1, &goal, 0.05));
    assert!((outcome.1.translation - goal.translation).norm() <= 0.01);
}

#[test]
fn bundled_library_loads_and_follows_the_label_pattern() {
    let lib = MotionLibrary::default_library();
    for l in lib.labels() {
        check_label(l).unwrap();
    }
    assert_eq!(lib.lookup("pick", "dishwasher", Some("plate")).unwrap(), "pick_dishwasher_plate");
    assert!(matches!(lib.get("pick_dishwasher_plate"), Some(Motion::Demo { .. })));
    assert_eq!(lib.lookup("pick", "table", Some("mug")).unwrap(), "pick_table");
    assert!(lib.lookup("pick", "sofa", None).is_err());
    let again = MotionLibrary::from_json(&lib.to_json(), &|f| {
        assert_eq!(f, "demos/pick_dishwasher_plate.jsonl");
        Ok(include_str!("../data/demos/pick_dishwasher_plate.jsonl").to_string())
    })
    .unwrap();
    assert_eq!(again, lib);
}

#[test]
fn library_validation() {
    let none = |_: &str| -> Result<String, SkillError> { Err(SkillError::FrameUnavailable("no files".into())) };
    let wp = r#"{"side":"left","frame":"object","waypoints":[{"offset":{"t":[0,0,0],"q":[1,0,0,0]},"duration":1}]}"#;
    let dup = format!(r#"{{"motions":[{{"label":"pick_table","waypoints":{wp}}},{{"label":"pick_table","waypoints":{wp}}}]}}"#);
    assert!(MotionLibrary::from_json(&dup, &none).unwrap_err().to_string().contains("duplicate label"));
    let bad = format!(r#"{{"motions":[{{"label":"Pick-Table","waypoints":{wp}}}]}}"#);
    assert!(MotionLibrary::from_json(&bad, &none).is_err());
    let missing = r#"{"motions":[{"label":"pick_table_mug","demo":"nope.jsonl"}]}"#;
    assert!(MotionLibrary::from_json(missing, &none).is_err());
    let both = format!(r#"{{"motions":[{{"label":"pick_table","waypoints":{wp},"demo":"x"}}]}}"#);
    assert!(MotionLibrary::from_json(&both, &none).is_err());
    let shared = r#"{"motions":[{"label":"pick_table_mug","demo":"a.jsonl"},{"label":"pick_table_cup","demo":"a.jsonl"}]}"#;
    let demo = include_str!("../data/demos/pick_dishwasher_plate.jsonl").to_string();
    let err = MotionLibrary::from_json(shared, &|_| Ok(demo.clone())).unwrap_err().to_string();
    assert!(err.contains("already used"), "{err}");
}
