//! Whole-body reach: the left hand goal is 0.7 m ahead, out of arm range
//! from where the robot stands, and the base goal 0.6 m ahead. Prints the
//! tracking error as the controller converges.

use kitchenbot::model::KinematicModel;
use kitchenbot::spatial::{PlanarPose, Pose, Twist};
use kitchenbot::wbc::{ControlCommand, ControllerConfig, ControllerState, Mode, TaskId};
use nalgebra::Vector3;

fn main() {
    let model = KinematicModel::default_model();
    let mut ctrl = ControllerState::init(&model, ControllerConfig::default(), model.home_configuration(PlanarPose::default()))
        .expect("home configuration is valid");
    let left = ctrl.task(TaskId::Left).reference;
    let target = Pose::new(left.translation + Vector3::new(0.7, 0.05, -0.1), left.rotation);
    let base = ctrl.task(TaskId::Base).reference;
    let right = ctrl.task(TaskId::Right).reference;
    let commands = [
        ControlCommand::SetMode(Mode::Autonomous),
        ControlCommand::SetReference {
            task: TaskId::Left,
            reference: target,
            feedforward: Twist::zero(),
        },
        // the right hand rides along with the base
        ControlCommand::SetReference {
            task: TaskId::Right,
            reference: Pose::new(right.translation + Vector3::new(0.6, 0.0, 0.0), right.rotation),
            feedforward: Twist::zero(),
        },
        ControlCommand::SetReference {
            task: TaskId::Base,
            reference: Pose::new(base.translation + Vector3::new(0.6, 0.0, 0.0), base.rotation),
            feedforward: Twist::zero(),
        },
    ];
    let mut first = true;
    for tick in 0..=2500 {
        let cmds: &[ControlCommand] = if first { &commands } else { &[] };
        first = false;
        let sol = ctrl.control_step(&model, cmds).expect("valid commands");
        if tick % 250 == 0 {
            let fk = model.evaluate(&ctrl.configuration);
            let ee = fk.frame("ee_left").unwrap();
            let b = ctrl.configuration.base;
            println!(
                "t={:4.1} s  hand error {:.4} m  base x {:.3}  solve {:?} {:.0} µs  kkt {:.1e}",
                tick as f64 * ctrl.dt(),
                (ee.translation - target.translation).norm(),
                b.x,
                sol.status,
                sol.solve_time.as_secs_f64() * 1e6,
                sol.kkt
            );
        }
    }
}
