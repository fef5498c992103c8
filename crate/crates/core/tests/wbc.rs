use kitchenbot::model::{Configuration, KinematicModel, BASE_DOF};
use kitchenbot::spatial::{pose_error, PlanarPose, Pose, Quaternion, Twist};
use kitchenbot::wbc::{
    build_primary_qp, postural_cost, postural_subset, primary_jacobian, solve_hierarchy, solve_primary,
    ControlCommand, ControllerConfig, ControllerState, Mode, TaskId, WbcStatus,
};
use nalgebra::{DMatrix, DVector, Vector3};

fn home_state() -> (KinematicModel, ControllerState) {
    let model = KinematicModel::default_model();
    let q0 = model.home_configuration(PlanarPose::new(0.3, -0.2, 0.4));
    let mut state = ControllerState::init(&model, ControllerConfig::default(), q0).unwrap();
    state.mode = Mode::Autonomous;
    (model, state)
}

fn shifted(p: &Pose, dx: f64, dy: f64, dz: f64, rot: Vector3<f64>) -> Pose {
    Pose::new(
        p.translation + Vector3::new(dx, dy, dz),
        Quaternion::from_rotation_vector(&rot).mul(&p.rotation),
    )
}

#[test]
fn zero_error_is_a_fixed_point() {
    let (model, mut state) = home_state();
    let sol = state.control_step(&model, &[]).unwrap();
    assert_eq!(sol.status, WbcStatus::Solved);
    assert!(sol.velocity.norm() <= 1e-9, "{}", sol.velocity.norm());
}

#[test]
fn init_references_match_forward_kinematics() {
    let model = KinematicModel::default_model();
    let q0 = model.home_configuration(PlanarPose::default());
    let state = ControllerState::init(&model, ControllerConfig::default(), q0.clone()).unwrap();
    for (id, frame) in [(TaskId::Left, "ee_left"), (TaskId::Right, "ee_right"), (TaskId::Base, "base_link")] {
        let fk = model.forward_kinematics(&q0, frame).unwrap();
        assert_eq!(state.task(id).reference, fk);
    }
    assert_eq!(state.postural.q_d.len(), 15);
    assert_eq!(state.mode, Mode::Idle);
}

#[test]
fn init_rejects_out_of_limit_configuration() {
    let model = KinematicModel::default_model();
    let mut q0 = model.home_configuration(PlanarPose::default());
    q0.q[0] = 1.0;
    assert!(ControllerState::init(&model, ControllerConfig::default(), q0).is_err());
}

#[test]
fn zero_error_problem_has_zero_gradient() {
    let (model, state) = home_state();
    let p = build_primary_qp(&state, &model);
    assert_eq!(p.gradient.amax(), 0.0);
    let (_, sol) = solve_primary(&state, &model);
    assert_eq!(sol.x.amax(), 0.0);
}

const ONE_JOINT: &str = r#"{
  "joints": [{"name": "j", "kind": "revolute", "parent": "base_link", "axis": [0,0,1],
              "origin": {"t": [0.2,0,0.5], "q": [1,0,0,0]}, "limits": {"lo": -2, "hi": 2, "vel": 1}}],
  "frames": [{"name": "tip", "parent": "j", "origin": {"t": [0.5,0,0], "q": [1,0,0,0]}}],
  "postural": ["j"]
}"#;

#[test]
fn one_joint_problem_matches_hand_computation() {
    let model = KinematicModel::from_json(ONE_JOINT).unwrap();
    let cfg = ControllerConfig {
        frame_left: "tip".into(),
        frame_right: "tip".into(),
        ..ControllerConfig::default()
    };
    let q0 = Configuration::new(PlanarPose::default(), DVector::from_element(1, 0.3));
    let mut state = ControllerState::init(&model, cfg.clone(), q0).unwrap();
    let target = Pose::from_translation(0.2 + 0.5 * 0.3f64.cos(), 0.5 * 0.3f64.sin() + 0.01, 0.5);
    let r0 = state.task(TaskId::Left).reference;
    state
        .set_task_reference(TaskId::Left, Pose::new(target.translation, r0.rotation), Twist::zero())
        .unwrap();

    // tip at (0.2 + 0.5c, 0.5s, 0.5); joint axis z through (0.2, 0, 0.5)
    let (s, c) = 0.3f64.sin_cos();
    let (px, py) = (0.2 + 0.5 * c, 0.5 * s);
    let j_tip = DMatrix::from_row_slice(
        6,
        4,
        &[
            1.0, 0.0, -py, -0.5 * s, //
            0.0, 1.0, px, 0.5 * c, //
            0.0, 0.0, 0.0, 0.0, //
            0.0, 0.0, 0.0, 0.0, //
            0.0, 0.0, 0.0, 0.0, //
            0.0, 0.0, 1.0, 1.0,
        ],
    );
    let j_base = DMatrix::from_row_slice(3, 4, &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
    let xdot_left = DVector::from_row_slice(&[0.0, 0.02, 0.0, 0.0, 0.0, 0.0]);
    let h = j_tip.transpose() * &j_tip * (cfg.weight_left + cfg.weight_right)
        + j_base.transpose() * &j_base * cfg.weight_base
        + DMatrix::identity(4, 4) * cfg.regularization;
    let g = -(j_tip.transpose() * xdot_left) * cfg.weight_left;

    let p = build_primary_qp(&state, &model);
    assert!((&p.hessian - &h).amax() < 1e-12, "{}", p.hessian);
    assert!((&p.gradient - &g).amax() < 1e-12, "{}", p.gradient);
}

#[test]
fn joint_at_upper_limit_closes_its_damper() {
    let model = KinematicModel::default_model();
    let mut q0 = model.home_configuration(PlanarPose::default());
    let k = model.joint_index("arm_left_4_joint").unwrap();
    q0.q[k] = model.joints[k].limits.hi;
    let state = ControllerState::init(&model, ControllerConfig::default(), q0).unwrap();
    let p = build_primary_qp(&state, &model);
    assert_eq!(p.upper[BASE_DOF + k], 0.0);
    assert!(p.lower[BASE_DOF + k] < 0.0);
}

#[test]
fn postural_task_does_not_disturb_primary_velocities() {
    let (model, mut state) = home_state();
    let left = state.task(TaskId::Left).reference;
    state
        .set_task_reference(TaskId::Left, shifted(&left, 0.04, -0.02, 0.03, Vector3::new(0.05, 0.0, -0.1)), Twist::zero())
        .unwrap();
    let mut q_d = state.postural.q_d.clone();
    for (i, v) in q_d.iter_mut().enumerate() {
        *v += 0.2 * if i % 2 == 0 { 1.0 } else { -1.0 };
    }
    let torso = &model.joints[model.postural[0]].limits;
    q_d[0] = q_d[0].clamp(torso.lo, torso.hi);
    state.set_posture(q_d).unwrap();

    let (_, l1) = solve_primary(&state, &model);
    let l2 = solve_hierarchy(&state, &model);
    assert_eq!(l2.status, WbcStatus::Solved);
    assert!(!l2.level2_failed);
    let jac = primary_jacobian(&state, &model);
    let diff = (&jac * &l1.x - &jac * &l2.velocity).amax();
    assert!(diff <= 1e-6, "primary velocity changed by {diff}");
    let (c1, c2) = (postural_cost(&state, &model, &l1.x), postural_cost(&state, &model, &l2.velocity));
    assert!(c2 < c1, "postural cost {c2} not below {c1}");
}

#[test]
fn no_redundancy_means_level_two_is_level_one() {
    let model = KinematicModel::from_json(ONE_JOINT).unwrap();
    let cfg = ControllerConfig {
        frame_left: "tip".into(),
        frame_right: "tip".into(),
        ..ControllerConfig::default()
    };
    let q0 = Configuration::new(PlanarPose::default(), DVector::from_element(1, 0.3));
    let mut state = ControllerState::init(&model, cfg, q0).unwrap();
    state.set_posture(DVector::from_element(1, -0.5)).unwrap();
    let r = state.task(TaskId::Left).reference;
    state
        .set_task_reference(TaskId::Left, shifted(&r, 0.01, 0.02, 0.0, Vector3::new(0.0, 0.0, 0.05)), Twist::zero())
        .unwrap();
    let (_, l1) = solve_primary(&state, &model);
    let l2 = solve_hierarchy(&state, &model);
    assert!((&l1.x - &l2.velocity).amax() <= 1e-7);
}

#[test]
fn far_reference_saturates_at_velocity_limits() {
    let (model, mut state) = home_state();
    let left = state.task(TaskId::Left).reference;
    state
        .set_task_reference(TaskId::Left, shifted(&left, 0.0, 3.0, 0.0, Vector3::new(2.0, 0.0, 0.0)), Twist::zero())
        .unwrap();
    let p = build_primary_qp(&state, &model);
    let sol = state.control_step(&model, &[]).unwrap();
    let mut at_limit = 0;
    for i in 0..model.nv() {
        assert!(sol.velocity[i] <= p.upper[i] && sol.velocity[i] >= p.lower[i]);
        if sol.velocity[i] == p.upper[i] || sol.velocity[i] == p.lower[i] {
            at_limit += 1;
        }
    }
    assert!(at_limit > 0);
}

#[test]
fn idle_mode_outputs_zero() {
    let (model, mut state) = home_state();
    let left = state.task(TaskId::Left).reference;
    let q_before = state.configuration.clone();
    let sol = state
        .control_step(
            &model,
            &[
                ControlCommand::SetMode(Mode::Idle),
                ControlCommand::SetReference {
                    task: TaskId::Left,
                    reference: shifted(&left, 0.2, 0.0, 0.0, Vector3::zeros()),
                    feedforward: Twist::zero(),
                },
            ],
        )
        .unwrap();
    assert_eq!(sol.status, WbcStatus::Idle);
    assert_eq!(sol.velocity.amax(), 0.0);
    assert_eq!(state.configuration, q_before);
}

#[test]
fn references_read_back_and_bad_commands_are_rejected_atomically() {
    let (model, mut state) = home_state();
    let p = Pose::from_translation(0.6, 0.1, 0.9);
    let ff = Twist::from_planar(0.1, 0.0, 0.0);
    state.set_task_reference(TaskId::Right, p, ff).unwrap();
    assert_eq!(state.task(TaskId::Right).reference, p);
    assert_eq!(state.task(TaskId::Right).feedforward, ff);

    let before = state.clone();
    let err = state.control_step(
        &model,
        &[
            ControlCommand::SetMode(Mode::Idle),
            ControlCommand::SetPosture(DVector::zeros(3)),
        ],
    );
    assert!(err.is_err());
    assert_eq!(state, before);
    assert!(TaskId::parse("head").is_err());
}

#[test]
fn base_reference_ahead_gives_unit_base_error() {
    let (model, mut state) = home_state();
    let base = state.configuration.base;
    let ahead = PlanarPose::new(base.x + base.theta.cos(), base.y + base.theta.sin(), base.theta);
    state.set_task_reference(TaskId::Base, ahead.to_pose(), Twist::zero()).unwrap();
    let cur = model.forward_kinematics(&state.configuration, "base_link").unwrap();
    let e = pose_error(&cur, &state.task(TaskId::Base).reference);
    assert!((e.fixed_rows::<3>(0).norm() - 1.0).abs() < 1e-12);
}

#[test]
fn posture_at_current_configuration_has_no_postural_pull() {
    let (model, mut state) = home_state();
    state.set_posture(postural_subset(&model, &state.configuration.q)).unwrap();
    let zero = DVector::zeros(model.nv());
    assert!(postural_cost(&state, &model, &zero) <= 1e-18);
    let sol = solve_hierarchy(&state, &model);
    assert!(sol.velocity.norm() <= 1e-9);
}

#[test]
fn reachable_pose_converges_within_ten_seconds() {
    let (model, mut state) = home_state();
    let left = state.task(TaskId::Left).reference;
    let target = shifted(&left, 0.08, 0.05, -0.06, Vector3::new(0.1, -0.15, 0.2));
    state.set_task_reference(TaskId::Left, target, Twist::zero()).unwrap();
    for _ in 0..2500 {
        let sol = state.control_step(&model, &[]).unwrap();
        assert_eq!(sol.status, WbcStatus::Solved);
    }
    let cur = model.forward_kinematics(&state.configuration, "ee_left").unwrap();
    let e = pose_error(&cur, &target);
    assert!(e.fixed_rows::<3>(0).norm() <= 1e-3, "{e}");
    assert!(e.fixed_rows::<3>(3).norm() <= 1e-2, "{e}");
}

#[test]
fn identical_runs_are_bitwise_identical() {
    let run = || {
        let (model, mut state) = home_state();
        let left = state.task(TaskId::Left).reference;
        state
            .set_task_reference(TaskId::Left, shifted(&left, 0.1, 0.0, 0.05, Vector3::new(0.0, 0.2, 0.0)), Twist::zero())
            .unwrap();
        (0..200)
            .map(|_| state.control_step(&model, &[]).unwrap().velocity)
            .collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn config_round_trips_and_validates() {
    let cfg = ControllerConfig::default();
    let text = serde_json::to_string(&cfg).unwrap();
    assert_eq!(ControllerConfig::from_json(&text).unwrap(), cfg);
    assert!(ControllerConfig::from_json(r#"{"rate_hz": 0}"#).is_err());
    assert!(ControllerConfig::from_json(r#"{"bogus": 1}"#).is_err());
    assert_eq!(ControllerConfig::from_json("{}").unwrap().dt(), 1.0 / 250.0);
}
