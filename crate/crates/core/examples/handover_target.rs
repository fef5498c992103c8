//! Which person gets the object: attentive people in view of the torso
//! camera, nearest first. Turns the robot in place and reports the choice
//! at each heading, then turns one person away.

use kitchenbot::model::KinematicModel;
use kitchenbot::sim::{Scene, WorldState};
use kitchenbot::spatial::PlanarPose;

fn report(scene: &Scene, model: &KinematicModel, heading: f64) {
    let base = PlanarPose::new(0.5, 0.5, heading);
    let world = WorldState::new(scene, model.home_configuration(base));
    match world.select_handover_target(scene, model) {
        Some(t) => {
            let c = t.chest_frame();
            println!(
                "heading {heading:+.2}: {} at {:.2} m, chest [{:.2}, {:.2}, {:.2}]",
                t.id, t.distance, c.translation.x, c.translation.y, c.translation.z
            );
        }
        None => println!("heading {heading:+.2}: nobody"),
    }
}

fn main() {
    let model = KinematicModel::default_model();
    let mut scene = Scene::default_scene();
    for h in &scene.humans {
        println!("{} at ({:.2}, {:.2}) looking {:+.2} rad", h.id, h.position[0], h.position[1], h.head_yaw);
    }
    for heading in [-1.5, 0.0, 0.8, 1.6, 2.4, 3.1] {
        report(&scene, &model, heading);
    }
    println!("alice looks away");
    scene.humans[0].head_yaw += std::f64::consts::PI;
    for heading in [0.8, 2.4] {
        report(&scene, &model, heading);
    }
}
