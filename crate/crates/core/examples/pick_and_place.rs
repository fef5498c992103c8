//! Pick the mug from the table and place it in the cabinet: the plan, the
//! state machine it assembles into, and a closed-loop run in simulation.

use kitchenbot::orchestrator::{Assembler, Site};
use kitchenbot::plan::{rule_parse, Vocabulary};
use kitchenbot::session::{Command, Session, SessionConfig};
use kitchenbot::skills::MotionLibrary;
use kitchenbot::sim::Scene;
use kitchenbot::types::Location;

fn main() {
    let instruction = "pick the mug from the table and place it in the cabinet";
    let plan = rule_parse(instruction, &Vocabulary::default_vocabulary()).expect("instruction parses");
    println!("{}\n", plan.to_json());

    let scene = Scene::default_scene();
    let library = MotionLibrary::default_library();
    let site = Site::from_scene(&scene);
    let fsm = Assembler::new(&library, &site).assemble(&plan).expect("plan assembles");
    println!("{}", fsm.dump());

    let mut session = Session::new(SessionConfig::default()).expect("bundled config loads");
    let ack = session.handle(0, 1, Command::Instruct { text: instruction.into() });
    println!("ack: {ack:?}\n");
    let mut state = None;
    while session.time() < 120.0 {
        session.step();
        let exec = session.executor().expect("plan started");
        let now = exec.current_state().map(|s| s.name.clone());
        if now != state {
            if let Some(s) = &now {
                println!("{:6.2} s  {s}", session.time());
            }
            state = now;
        }
        if exec.is_finished() {
            break;
        }
    }
    let report = session.executor().unwrap().report();
    let mug = session.world().object_pose(session.scene(), "mug").unwrap();
    let goal = session.scene().location(Location::Cabinet).place_pose();
    println!(
        "\n{:?} at {:.2} s, mug {:.3} m from the cabinet place pose",
        report.outcome,
        session.time(),
        (mug.translation - goal.translation).norm()
    );
}
