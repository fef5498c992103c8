use kitchenbot::model::KinematicModel;
use kitchenbot::sim::{is_attentive, HumanAgent, Obstacle, Scene, WorldState};
use kitchenbot::spatial::{PlanarPose, Pose, Quaternion};
use kitchenbot::types::{GripperCommand, Side};
use kitchenbot::wbc::{ControllerConfig, ControllerState, Mode, TaskId};
use nalgebra::{DVector, Vector3};

fn setup() -> (KinematicModel, Scene, WorldState) {
    let model = KinematicModel::default_model();
    let scene = Scene::default_scene();
    let world = WorldState::new(&scene, model.home_configuration(scene.start));
    (model, scene, world)
}

fn quiet(mut scene: Scene) -> Scene {
    scene.noise.position_sigma = 0.0;
    scene.noise.rotation_sigma_deg = 0.0;
    scene
}

fn pose_close(a: &Pose, b: &Pose, tol: f64) -> bool {
    (a.translation - b.translation).norm() <= tol && a.rotation.mul(&b.rotation.inverse()).angle() <= tol
}

#[test]
fn bundled_scene_is_valid_and_round_trips() {
    let scene = Scene::default_scene();
    assert_eq!(scene.locations.len(), 3);
    let again = Scene::from_json(&scene.to_json()).unwrap();
    assert_eq!(again.to_json(), scene.to_json());
}

#[test]
fn scene_validation_reports_every_problem() {
    let mut scene = Scene::default_scene();
    scene.objects[1].tag_id = scene.objects[0].tag_id;
    scene.objects[2].graspable_radius = 0.0;
    let mut v: serde_json::Value = serde_json::from_str(&scene.to_json()).unwrap();
    v["locations"].as_object_mut().unwrap().remove("cabinet");
    let err = Scene::from_json(&v.to_string()).unwrap_err().to_string();
    assert!(err.contains("duplicate tag id"), "{err}");
    assert!(err.contains("graspable_radius"), "{err}");
    assert!(err.contains("missing location 'cabinet'"), "{err}");
}

#[test]
fn zero_velocity_only_advances_time() {
    let (model, scene, mut world) = setup();
    let before = world.clone();
    world.step(&scene, &model, &DVector::zeros(model.nv()), 0.004);
    assert_eq!(world.config, before.config);
    assert_eq!(world.objects, before.objects);
    assert_eq!(world.time, 0.004);
}

#[test]
fn attached_object_rides_the_gripper() {
    let (model, mut scene, mut world) = setup();
    let ee = model.forward_kinematics(&world.config, "ee_left").unwrap();
    let mug = scene.object_index("mug").unwrap();
    scene.objects[mug].pose = ee.compose(&Pose::from_translation(0.01, 0.0, -0.02));
    world = WorldState::new(&scene, world.config.clone());
    assert_eq!(world.set_gripper(&scene, &model, Side::Left, GripperCommand::Close).as_deref(), Some("mug"));
    let start = world.objects[mug];

    // 0.1 m of base motion along x
    let mut v = DVector::zeros(model.nv());
    v[0] = 0.25;
    for _ in 0..100 {
        world.step(&scene, &model, &v, 0.004);
    }
    let moved = world.objects[mug].translation - start.translation;
    assert!((moved - Vector3::new(0.1, 0.0, 0.0)).norm() < 1e-12, "{moved}");

    let att = world.attachment(Side::Left).unwrap().clone();
    let ee = model.forward_kinematics(&world.config, "ee_left").unwrap();
    let rel = ee.inverse().compose(&world.objects[mug]);
    assert!(pose_close(&rel, &att.grasp, 1e-12));
}

#[test]
fn ground_truth_matches_the_controller_model() {
    let (model, scene, mut world) = setup();
    let mut ctrl = ControllerState::init(&model, ControllerConfig::default(), world.config.clone()).unwrap();
    ctrl.mode = Mode::Autonomous;
    let left = ctrl.task(TaskId::Left).reference;
    let target = Pose::new(left.translation + Vector3::new(0.1, -0.05, -0.1), left.rotation);
    ctrl.set_task_reference(TaskId::Left, target, Default::default()).unwrap();
    let base = PlanarPose::new(0.5, 0.3, 0.4).to_pose();
    ctrl.set_task_reference(TaskId::Base, base, Default::default()).unwrap();
    for _ in 0..1000 {
        let sol = ctrl.control_step(&model, &[]).unwrap();
        world.step(&scene, &model, &sol.velocity, ctrl.dt());
    }
    assert!((&world.config.q - &ctrl.configuration.q).amax() <= 1e-12);
    assert!((world.config.base.x - ctrl.configuration.base.x).abs() <= 1e-12);
    assert!((world.config.base.theta - ctrl.configuration.base.theta).abs() <= 1e-12);
}

#[test]
fn first_order_lag_delays_motion() {
    let (model, mut scene, world0) = setup();
    scene.actuation_lag_s = Some(0.1);
    let mut world = WorldState::new(&scene, world0.config.clone());
    let mut v = DVector::zeros(model.nv());
    v[0] = 0.2;
    world.step(&scene, &model, &v, 0.01);
    assert!(world.config.base.x > 0.0 && world.config.base.x < 0.2 * 0.01);
}

#[test]
fn tag_on_optical_axis_is_observed_exactly() {
    let (model, scene, world) = setup();
    let mut scene = quiet(scene);
    let cam = model.forward_kinematics(&world.config, "torso_cam").unwrap();
    let tag_in_cam = Pose::new(Vector3::new(2.0, 0.0, 0.0), Quaternion::from_rpy(0.1, -0.2, 0.3));
    scene.objects[0].pose = cam.compose(&tag_in_cam);
    let mut world = WorldState::new(&scene, world.config.clone());
    let obs = world.observe_tags(&scene, &model, "torso_cam").unwrap();
    let o = obs.iter().find(|o| o.tag_id == scene.objects[0].tag_id).expect("tag observed");
    assert!(pose_close(&o.pose, &tag_in_cam, 1e-12));

    // frame-composition round trip for everything seen
    let tags = world.tag_poses(&scene);
    for o in &obs {
        let world_pose = cam.compose(&o.pose);
        let truth = tags.iter().find(|(id, _)| *id == o.tag_id).unwrap().1;
        assert!(pose_close(&world_pose, &truth, 1e-9));
        // and through the base frame
        let base = world.config.base.to_pose();
        let in_base = base.inverse().compose(&cam).compose(&o.pose);
        assert!(pose_close(&base.compose(&in_base), &truth, 1e-9));
    }
}

#[test]
fn tag_behind_the_camera_is_not_observed() {
    let (model, scene, world) = setup();
    let mut scene = quiet(scene);
    let cam = model.forward_kinematics(&world.config, "torso_cam").unwrap();
    scene.objects[0].pose = cam.compose(&Pose::from_translation(-2.0, 0.0, 0.0));
    let mut world = WorldState::new(&scene, world.config.clone());
    let obs = world.observe_tags(&scene, &model, "torso_cam").unwrap();
    assert!(obs.iter().all(|o| o.tag_id != scene.objects[0].tag_id));
    assert!(world.observe_tags(&scene, &model, "nose_cam").is_err());
}

#[test]
fn observations_respect_visibility_and_seed() {
    let (model, scene, world) = setup();
    let cams: Vec<String> = model.cameras.iter().map(|c| c.name.clone()).collect();
    let stream = |seed: u64| {
        let mut s = scene.clone();
        s.seed = seed;
        let mut w = WorldState::new(&s, world.config.clone());
        let mut out = Vec::new();
        let mut v = DVector::zeros(model.nv());
        v[2] = 0.8;
        for _ in 0..400 {
            w.step(&s, &model, &v, 0.02);
            for c in &cams {
                for o in w.observe_tags(&s, &model, c).unwrap() {
                    let spec = model.camera(c).unwrap();
                    let range = o.pose.translation.norm();
                    // noise is mm-scale; the truth passed the predicate
                    assert!(range >= spec.min_range_m - 0.02 && range <= spec.max_range_m + 0.02);
                    out.push(o);
                }
            }
        }
        out
    };
    let a = stream(3);
    assert!(!a.is_empty());
    assert_eq!(a, stream(3));
    assert_ne!(a, stream(4));
}

fn human(id: &str, x: f64, y: f64, yaw: f64) -> HumanAgent {
    HumanAgent {
        id: id.into(),
        position: [x, y],
        head_yaw: yaw,
        height: 1.7,
    }
}

#[test]
fn handover_target_selection() {
    let (model, mut scene, world) = setup();
    let pi = std::f64::consts::PI;

    scene.humans = vec![human("a", 2.0, 0.0, pi)];
    assert_eq!(world.select_handover_target(&scene, &model).unwrap().id, "a");

    scene.humans = vec![human("near", 1.5, 0.2, 0.0), human("far", 3.0, -0.3, pi)];
    assert_eq!(world.select_handover_target(&scene, &model).unwrap().id, "far");

    scene.humans = vec![human("three", 3.0, 0.0, pi), human("two", 2.0, 0.3, pi)];
    let t = world.select_handover_target(&scene, &model).unwrap();
    assert_eq!(t.id, "two");
    assert!((t.distance - 2.0f64.hypot(0.3)).abs() < 1e-12);

    scene.humans = vec![human("away", 2.0, 0.0, 0.0)];
    assert!(world.select_handover_target(&scene, &model).is_none());
    scene.humans.clear();
    assert!(world.select_handover_target(&scene, &model).is_none());
}

#[test]
fn lowering_the_attention_threshold_never_adds_targets() {
    let base = PlanarPose::default();
    for k in 0..72 {
        let yaw = k as f64 * 5f64.to_radians();
        let h = human("h", 2.0 * yaw.cos(), 2.0 * yaw.sin(), yaw + 3.0);
        let mut prev = true;
        for deg in [90.0, 60.0, 30.0, 10.0, 1.0] {
            let now = is_attentive(&h, &base, f64::to_radians(deg));
            assert!(prev || !now);
            prev = now;
        }
    }
}

#[test]
fn obstacle_corridor() {
    let (_, mut scene, world) = setup();
    let fwd = Vector3::new(0.3, 0.0, 0.0);
    assert!(!world.obstacle_ahead(&scene, &fwd));
    scene.obstacles = vec![Obstacle {
        center: [0.3, 0.0],
        radius: 0.1,
    }];
    assert!(world.obstacle_ahead(&scene, &fwd));
    assert!(!world.obstacle_ahead(&scene, &Vector3::new(0.0, 0.0, 0.5)));
    scene.obstacles[0].center = [-0.6, 0.0];
    assert!(!world.obstacle_ahead(&scene, &fwd));
    assert!(world.obstacle_ahead(&scene, &-fwd));
    scene.obstacles[0].center = [0.5, 1.5];
    assert!(!world.obstacle_ahead(&scene, &fwd));
}

#[test]
fn gripper_attach_and_release() {
    let (model, mut scene, world0) = setup();
    let ee = model.forward_kinematics(&world0.config, "ee_right").unwrap();
    let mug = scene.object_index("mug").unwrap();
    scene.objects[mug].pose = ee.compose(&Pose::new(Vector3::new(0.02, 0.01, 0.0), Quaternion::from_yaw(0.3)));
    let mut world = WorldState::new(&scene, world0.config.clone());

    assert!(world.set_gripper(&scene, &model, Side::Left, GripperCommand::Close).is_none());
    assert_eq!(world.set_gripper(&scene, &model, Side::Right, GripperCommand::Close).as_deref(), Some("mug"));
    let grasp = world.attachment(Side::Right).unwrap().grasp;
    assert_eq!(grasp, ee.inverse().compose(&scene.objects[mug].pose));

    let mut v = DVector::zeros(model.nv());
    v[1] = 0.5;
    world.step(&scene, &model, &v, 0.1);
    let release = world.objects[mug];
    world.set_gripper(&scene, &model, Side::Right, GripperCommand::Open);
    assert!(world.attachment(Side::Right).is_none());
    world.step(&scene, &model, &v, 0.1);
    assert_eq!(world.objects[mug], release);
}
