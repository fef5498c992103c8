//! Prints world poses of the named frames at the home posture, and checks one
//! Jacobian column against a finite difference.

use kitchenbot::model::{Configuration, KinematicModel};
use kitchenbot::spatial::PlanarPose;
use nalgebra::DVector;

fn main() {
    let model = KinematicModel::default_model();
    let config = model.home_configuration(PlanarPose::new(0.0, 0.0, 0.0));
    println!("{} joints, {} postural, {} velocity variables", model.dof(), model.postural.len(), model.nv());

    let fk = model.evaluate(&config);
    for name in ["base_link", "torso_cam", "wrist_cam_left", "ee_left", "ee_right"] {
        let p = fk.frame(name).unwrap();
        let rpy = p.rotation.as_unit().euler_angles();
        println!(
            "{name:>15}: t = [{:.3}, {:.3}, {:.3}]  rpy = [{:.3}, {:.3}, {:.3}]",
            p.translation.x, p.translation.y, p.translation.z, rpy.0, rpy.1, rpy.2
        );
    }

    // column of arm_left_2_joint vs central difference
    let k = model.joint_index("arm_left_2_joint").unwrap();
    let jac = model.jacobian(&config, "ee_left").unwrap();
    let h = 1e-6;
    let mut dv = DVector::zeros(model.nv());
    dv[3 + k] = 1.0;
    let plus: Configuration = config.retract(&dv, h);
    let minus: Configuration = config.retract(&dv, -h);
    let fd = (model.forward_kinematics(&plus, "ee_left").unwrap().translation
        - model.forward_kinematics(&minus, "ee_left").unwrap().translation)
        / (2.0 * h);
    println!("d ee_left / d arm_left_2: analytic {:.6?}  fd {:.6?}", jac.fixed_view::<3, 1>(0, 3 + k).transpose(), fd.transpose());
}
