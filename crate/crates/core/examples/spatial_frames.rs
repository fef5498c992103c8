//! Frame bookkeeping: composing and inverting poses, planar base motion,
//! interpolation and the 6-D pose error the controller regulates.

use std::f64::consts::FRAC_PI_2;

use kitchenbot::spatial::{integrate_planar, interpolate, pose_error, PlanarPose, Pose, Quaternion};
use nalgebra::Vector3;

fn show(name: &str, p: &Pose) {
    let (r, pi, y) = p.rotation.as_unit().euler_angles();
    println!(
        "{name:>22}: t = [{:+.3}, {:+.3}, {:+.3}]  rpy = [{:+.3}, {:+.3}, {:+.3}]",
        p.translation.x, p.translation.y, p.translation.z, r, pi, y
    );
}

fn main() {
    // cabinet tag in the world, and a point 6 cm above it
    let tag = Pose::new(Vector3::new(0.5, 2.2, 0.95), Quaternion::from_yaw(FRAC_PI_2));
    let place = tag.compose(&Pose::from_translation(0.0, 0.0, 0.06));
    show("tag in world", &tag);
    show("place in world", &place);

    // the robot base somewhere else; the same point seen from it
    let base = PlanarPose::new(0.3, 1.6, 1.2);
    let in_base = base.to_pose().inverse().compose(&place);
    show("place in base", &in_base);
    show("round trip", &base.to_pose().compose(&in_base));

    // drive 2 s at 0.2 m/s forward while turning
    let mut b = base;
    for _ in 0..500 {
        b = integrate_planar(&b, &Vector3::new(0.2, 0.0, 0.3), 0.004);
    }
    println!("{:>22}: x = {:+.3}, y = {:+.3}, θ = {:+.3}", "base after 2 s", b.x, b.y, b.theta);

    let a = Pose::identity();
    let goal = Pose::new(Vector3::new(0.2, 0.0, 0.1), Quaternion::from_rpy(0.0, 0.4, 0.8));
    for s in [0.0, 0.5, 1.0] {
        show(&format!("interpolate s={s}"), &interpolate(&a, &goal, s).unwrap());
    }
    let e = pose_error(&a, &goal);
    println!("{:>22}: {:+.3?}", "pose error", e.as_slice());
}
