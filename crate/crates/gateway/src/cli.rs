//! `kitchenbot` subcommands.

use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use kitchenbot::model::KinematicModel;
use kitchenbot::orchestrator::{FsmState, Outcome, SubFsm};
use kitchenbot::plan::{canonicalize, validate_plan_text, Vocabulary};
use kitchenbot::session::{run_scenario, Scenario, ScenarioReport, Session, SessionConfig, SessionParts};
use kitchenbot::skills::{Motion, ObjectCentricDemo};
use kitchenbot::spatial::{PlanarPose, Pose, Quaternion};
use kitchenbot::wbc::{self, ControllerConfig};
use nalgebra::Vector3;

use crate::server::Gateway;

#[derive(Parser, Debug)]
#[command(name = "kitchenbot", version, about = "Dual-arm mobile manipulator: simulation, control and teleoperation gateway")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Subcommand, Debug)]
pub enum Cmd {
    /// Serve the websocket gateway until interrupted.
    Run(RunArgs),
    /// Run a scenario headless; exit status 1 if an assertion fails.
    Scenario {
        file: PathBuf,
        /// Print the full report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Check or normalise plan documents.
    #[command(subcommand)]
    Plan(PlanCmd),
    /// Record demonstrations or replay them.
    #[command(subcommand)]
    Demo(DemoCmd),
    /// Benchmarks.
    #[command(subcommand)]
    Bench(BenchCmd),
    /// Robot model tools.
    #[command(subcommand)]
    Model(ModelCmd),
}

#[derive(Args, Debug)]
pub struct RunArgs {
    /// Session config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, env = "KITCHENBOT_BIND")]
    pub bind: Option<String>,
    #[arg(long, env = "KITCHENBOT_SEED")]
    pub seed: Option<u64>,
    /// Stop after this many seconds.
    #[arg(long)]
    pub duration: Option<f64>,
}

#[derive(Subcommand, Debug)]
pub enum PlanCmd {
    /// Check a plan against the grammar and vocabulary.
    Validate {
        /// File, or `-` for stdin.
        file: String,
    },
    /// Print the canonical form of a valid plan.
    Parse { file: String },
}

#[derive(Subcommand, Debug)]
pub enum DemoCmd {
    /// Run a recording scenario; demos land in its record directory.
    Record {
        scenario: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Replay a demo on the robot at the location's approach pose.
    Replay {
        file: PathBuf,
        /// Object displacement `dx,dy,dyaw` in meters and radians.
        #[arg(long, value_parser = parse_displacement, allow_hyphen_values = true)]
        displace: Option<[f64; 3]>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Subcommand, Debug)]
pub enum BenchCmd {
    /// Controller solve times over a moving-target run.
    Qp {
        #[arg(long, default_value_t = 10_000)]
        steps: usize,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Subcommand, Debug)]
pub enum ModelCmd {
    /// Load and check a model file.
    Check { file: PathBuf },
}

fn parse_displacement(s: &str) -> Result<[f64; 3], String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("'{p}': {e}")))
        .collect::<Result<_, _>>()?;
    match v.as_slice() {
        [x, y, yaw] if v.iter().all(|x| x.is_finite()) => Ok([*x, *y, *yaw]),
        _ => Err("expected dx,dy,dyaw".into()),
    }
}

fn read_input(file: &str) -> Result<String> {
    if file == "-" {
        let mut s = String::new();
        std::io::stdin().read_to_string(&mut s)?;
        Ok(s)
    } else {
        std::fs::read_to_string(file).with_context(|| format!("reading {file}"))
    }
}

pub fn main_with(cli: Cli) -> ExitCode {
    let result = match cli.command {
        Cmd::Run(args) => run(args),
        Cmd::Scenario { file, json } => scenario(&file, json),
        Cmd::Plan(cmd) => plan(cmd),
        Cmd::Demo(DemoCmd::Record { scenario, out_dir }) => demo_record(&scenario, out_dir),
        Cmd::Demo(DemoCmd::Replay { file, displace, seed }) => demo_replay(&file, displace.unwrap_or([0.0; 3]), seed),
        Cmd::Bench(BenchCmd::Qp { steps, json }) => bench_qp(steps, json),
        Cmd::Model(ModelCmd::Check { file }) => model_check(&file),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(args: RunArgs) -> Result<bool> {
    let mut config = match &args.config {
        Some(p) => SessionConfig::load(p)?,
        None => SessionConfig::default(),
    };
    if let Some(bind) = args.bind {
        config.bind = bind;
    }
    if args.seed.is_some() {
        config.seed = args.seed;
    }
    let bind = config.bind.clone();
    let session = Session::new(config)?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let gateway = Gateway::start(session, &bind, true).await?;
        println!("serving ws://{}/ws", gateway.addr());
        match args.duration {
            Some(s) => tokio::time::sleep(std::time::Duration::from_secs_f64(s)).await,
            None => tokio::signal::ctrl_c().await?,
        }
        let session = gateway.shutdown().await;
        println!("stopped at t={:.2} s after {} ticks", session.time(), session.tick());
        Ok(true)
    })
}

fn print_report(r: &ScenarioReport) {
    for (t, ack) in &r.acks {
        if !ack.is_accepted() {
            println!("t={t:7.2}  command {} rejected: {}", ack.id, ack.reason.as_deref().unwrap_or(""));
        }
    }
    for a in &r.assertions {
        println!("t={:7.2}  {}  {}", a.at_s, if a.passed { "PASS" } else { "FAIL" }, a.detail);
    }
    println!(
        "{}: {} ticks, {} snapshots, end t={:.2} s, stream {}",
        if r.passed { "passed" } else { "failed" },
        r.ticks,
        r.snapshots,
        r.end_time,
        r.stream_hash
    );
}

fn scenario(file: &Path, json: bool) -> Result<bool> {
    let sc = Scenario::load(file)?;
    let mut session = Session::new(sc.config.clone())?;
    let report = run_scenario(&mut session, &sc);
    if json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        print_report(&report);
    }
    Ok(report.passed)
}

fn plan(cmd: PlanCmd) -> Result<bool> {
    let vocab = Vocabulary::default_vocabulary();
    let (file, canonical) = match cmd {
        PlanCmd::Validate { file } => (file, false),
        PlanCmd::Parse { file } => (file, true),
    };
    let text = read_input(&file)?;
    let result = if canonical {
        canonicalize(&text, &vocab)
    } else {
        validate_plan_text(&text, &vocab).map(|_| "valid".to_string())
    };
    match result {
        Ok(out) => {
            println!("{out}");
            Ok(true)
        }
        Err(e) => {
            eprintln!("{file}: {e}");
            Ok(false)
        }
    }
}

fn demo_record(scenario: &Path, out_dir: Option<PathBuf>) -> Result<bool> {
    let mut sc = Scenario::load(scenario)?;
    if let Some(dir) = out_dir {
        sc.config.record_dir = dir;
    }
    let mut session = Session::new(sc.config.clone())?;
    let report = run_scenario(&mut session, &sc);
    print_report(&report);
    let saved: Vec<&str> = report
        .acks
        .iter()
        .filter(|(_, a)| a.is_accepted())
        .filter_map(|(_, a)| a.reason.as_deref())
        .filter(|r| r.ends_with(".jsonl"))
        .collect();
    if saved.is_empty() {
        eprintln!("no demo was saved");
        return Ok(false);
    }
    for path in saved {
        println!("saved {path}");
    }
    Ok(report.passed)
}

fn demo_replay(file: &Path, displace: [f64; 3], seed: Option<u64>) -> Result<bool> {
    let demo = ObjectCentricDemo::load(file)?;
    let h = demo.header.clone();
    let config = SessionConfig {
        seed,
        ..SessionConfig::default()
    };
    let mut parts = SessionParts::load(&config)?;
    let loc_name = h.task.split('_').nth(1).unwrap_or_default();
    let spec = loc_name
        .parse()
        .ok()
        .and_then(|l| parts.scene.locations.get(&l))
        .with_context(|| format!("demo task '{}' names no known location", h.task))?;
    parts.scene.start = spec.pose.compose(&spec.approach_offset).to_planar();
    let Some(obj) = parts.scene.object_by_tag(h.tag_id) else {
        bail!("demo is bound to tag {} which no object carries", h.tag_id);
    };
    let o = &mut parts.scene.objects[obj];
    let shift = Pose::new(Vector3::new(displace[0], displace[1], 0.0), Quaternion::from_yaw(displace[2]));
    o.pose = Pose::new(o.pose.translation + shift.translation, shift.rotation.mul(&o.pose.rotation));
    let label = o.label.clone();
    parts.library.insert(&h.task, Motion::Demo {
        file: file.display().to_string(),
        demo,
    }).map_err(anyhow::Error::msg)?;

    let fsm = SubFsm::sequence(
        &format!("replay_{}", h.task),
        vec![
            (
                format!("search_{label}"),
                FsmState::SearchTag {
                    tag_id: h.tag_id,
                    rotation_rate: 0.5,
                    timeout: 15.0,
                },
            ),
            (
                h.task.clone(),
                FsmState::DemoPlayback {
                    label: h.task.clone(),
                    side: h.side,
                    tag_id: h.tag_id,
                },
            ),
        ],
    );
    let mut session = Session::from_parts(config, parts)?;
    session.start_fsm(fsm).map_err(anyhow::Error::msg)?;
    let mut grasp_error = None;
    while session.time() < 60.0 {
        session.step();
        if grasp_error.is_none() {
            if let Some(a) = session.world().attachment(h.side) {
                grasp_error = Some(a.grasp.translation.norm());
            }
        }
        if session.executor().is_some_and(|e| e.is_finished()) {
            break;
        }
    }
    let report = session.executor().expect("started").report().clone();
    let held = session.world().attachment(h.side).map(|a| a.object.clone());
    println!("replayed {} with the {} arm, object shifted by {displace:?}", h.task, h.side);
    println!("outcome: {:?} at t={:.2} s", report.outcome, session.time());
    match grasp_error {
        Some(e) => println!("grasped {label}, hand {:.1} mm from the object origin", e * 1e3),
        None => println!("never grasped {label}"),
    }
    Ok(report.outcome == Some(Outcome::Succeeded) && held.as_deref() == Some(label.as_str()))
}

fn bench_qp(steps: usize, json: bool) -> Result<bool> {
    if steps == 0 {
        bail!("--steps must be positive");
    }
    let model = KinematicModel::default_model();
    let r = wbc::bench::run(&model, ControllerConfig::default(), steps)?;
    if json {
        println!("{}", serde_json::to_string_pretty(&r)?);
    } else {
        println!("steps      {}", r.steps);
        println!("median     {:.3} ms", r.median_ms);
        println!("p95        {:.3} ms", r.p95_ms);
        println!("max        {:.3} ms", r.max_ms);
        println!("budget     {:.3} ms", r.budget_ms);
        println!("max kkt    {:.2e}", r.max_kkt);
        println!("failures   {}", r.failures);
    }
    Ok(r.failures == 0)
}

fn model_check(file: &Path) -> Result<bool> {
    let text = std::fs::read_to_string(file).with_context(|| format!("reading {}", file.display()))?;
    let model = match KinematicModel::from_json(&text) {
        Ok(m) => m,
        Err(e) => {
            eprintln!("{}: {e}", file.display());
            return Ok(false);
        }
    };
    let home = model.home_configuration(PlanarPose::default());
    let clearance = model
        .sphere_pairs_clearance(&home)
        .iter()
        .map(|c| c.distance)
        .fold(f64::INFINITY, f64::min);
    println!(
        "{}: {} joints ({} postural), {} frames, {} collision spheres in {} pairs, {} cameras",
        file.display(),
        model.dof(),
        model.postural.len(),
        model.frame_names().count(),
        model.spheres.len(),
        model.pairs.len(),
        model.cameras.len()
    );
    if clearance.is_finite() {
        println!("home posture clearance {clearance:.3} m");
        if clearance < 0.0 {
            eprintln!("home posture is in collision");
            return Ok(false);
        }
    }
    Ok(true)
}
