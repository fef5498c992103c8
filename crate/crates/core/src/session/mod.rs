//! One robot session: controller, simulated world and orchestrator advanced
//! in a single fixed-step loop, driven by protocol commands.
//!
//! `Session` has no threads and no clock. Whoever owns it calls `handle`
//! between steps and `step` once per period; the gateway does this in real
//! time, scenarios as fast as possible.

mod protocol;
mod scenario;

use std::collections::{BTreeMap, VecDeque};
use std::path::{Path, PathBuf};
use std::sync::mpsc;

use nalgebra::{DVector, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::KinematicModel;
use crate::orchestrator::{AssemblyParams, Assembler, BaseMotion, ExecOptions, Executor, Site, SubFsm, TickInputs};
use crate::plan::{build_prompt, llm_request, rule_parse, LlmConfig, Plan, PromptBundle, Vocabulary};
use crate::sim::{Scene, TagObservation, WorldState};
use crate::skills::{
    check_label, to_object_frame, DemoRecorder, FrameRef, GripperAction, MotionLibrary, MotionStatus,
    ObjectCentricDemo, Waypoint, WaypointOptions, WaypointRun, WaypointSpec,
};
use crate::spatial::{PlanarPose, Pose, Quaternion, Twist};
use crate::types::{GripperCommand, Side};
use crate::wbc::{postural_subset, ControlCommand, ControllerConfig, ControllerState, Mode, TaskId};

pub use protocol::{
    Ack, AckStatus, ArmMode, Command, Frame, FsmStatus, Health, Macro, ObjectState, PerSide, StateSnapshot,
    StreamHasher, PROTOCOL_VERSION,
};
pub use scenario::{evaluate, run_scenario, Assertion, AssertionResult, Predicate, Scenario, ScenarioReport, ScenarioStep};

pub type ClientId = u64;

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("{path}: {message}")]
    Config { path: String, message: String },
    #[error("invalid session config: {0}")]
    Invalid(String),
}

fn config_error(path: &Path, message: impl ToString) -> SessionError {
    SessionError::Config {
        path: path.display().to_string(),
        message: message.to_string(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeleopLimits {
    pub arm_linear: f64,
    pub arm_angular: f64,
    pub base_linear: f64,
    pub base_angular: f64,
    /// Largest single pose delta, m and rad.
    pub max_step_m: f64,
    pub max_step_rad: f64,
    /// A twist stops if not refreshed within this time.
    pub hold_s: f64,
}

impl Default for TeleopLimits {
    fn default() -> Self {
        Self {
            arm_linear: 0.25,
            arm_angular: 1.0,
            base_linear: 0.3,
            base_angular: 0.5,
            max_step_m: 0.05,
            max_step_rad: 0.2,
            hold_s: 0.25,
        }
    }
}

/// File paths are relative to the config file; absent ones mean the
/// bundled defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionConfig {
    pub model: Option<PathBuf>,
    pub scene: Option<PathBuf>,
    pub controller: Option<PathBuf>,
    pub library: Option<PathBuf>,
    pub vocabulary: Option<PathBuf>,
    pub prompt: Option<PathBuf>,
    pub loop_rate_hz: f64,
    pub snapshot_rate_hz: f64,
    pub bind: String,
    /// Plans come from this endpoint when set, else from the rule parser.
    pub llm: Option<LlmConfig>,
    /// Overrides the scene's seed.
    pub seed: Option<u64>,
    /// Overrides the scene's base start pose.
    pub start: Option<PlanarPose>,
    pub record_dir: PathBuf,
    pub teleop: TeleopLimits,
    pub exec: ExecOptions,
    pub assembly: AssemblyParams,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            model: None,
            scene: None,
            controller: None,
            library: None,
            vocabulary: None,
            prompt: None,
            loop_rate_hz: 250.0,
            snapshot_rate_hz: 30.0,
            bind: "127.0.0.1:8765".into(),
            llm: None,
            seed: None,
            start: None,
            record_dir: PathBuf::from("demos"),
            teleop: TeleopLimits::default(),
            exec: ExecOptions::default(),
            assembly: AssemblyParams::default(),
        }
    }
}

impl SessionConfig {
    pub fn load(path: &Path) -> Result<SessionConfig, SessionError> {
        let text = std::fs::read_to_string(path).map_err(|e| config_error(path, e))?;
        let mut cfg: SessionConfig = serde_json::from_str(&text).map_err(|e| config_error(path, e))?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        cfg.validate().map_err(|e| config_error(path, e))?;
        Ok(cfg)
    }

    /// Makes relative paths relative to `dir`.
    pub fn resolve_paths(&mut self, dir: &Path) {
        for p in [
            &mut self.model,
            &mut self.scene,
            &mut self.controller,
            &mut self.library,
            &mut self.vocabulary,
            &mut self.prompt,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
        if self.record_dir.is_relative() {
            self.record_dir = dir.join(&self.record_dir);
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [("loop_rate_hz", self.loop_rate_hz), ("snapshot_rate_hz", self.snapshot_rate_hz)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(format!("{name} must be positive, got {v}"));
            }
        }
        if self.snapshot_rate_hz > self.loop_rate_hz {
            return Err("snapshot_rate_hz cannot exceed loop_rate_hz".into());
        }
        Ok(())
    }
}

/// Everything a session needs, already loaded.
pub struct SessionParts {
    pub model: KinematicModel,
    pub scene: Scene,
    pub controller: ControllerConfig,
    pub library: MotionLibrary,
    pub vocabulary: Vocabulary,
    pub prompt: PromptBundle,
}

impl SessionParts {
    pub fn load(config: &SessionConfig) -> Result<SessionParts, SessionError> {
        fn read(path: &Path) -> Result<String, SessionError> {
            std::fs::read_to_string(path).map_err(|e| config_error(path, e))
        }
        let model = match &config.model {
            Some(p) => KinematicModel::from_json(&read(p)?).map_err(|e| config_error(p, e))?,
            None => KinematicModel::default_model(),
        };
        let mut scene = match &config.scene {
            Some(p) => Scene::from_json(&read(p)?).map_err(|e| config_error(p, e))?,
            None => Scene::default_scene(),
        };
        if let Some(seed) = config.seed {
            scene.seed = seed;
        }
        if let Some(start) = config.start {
            scene.start = start;
        }
        let mut controller = match &config.controller {
            Some(p) => ControllerConfig::from_json(&read(p)?).map_err(|e| config_error(p, e))?,
            None => ControllerConfig::default(),
        };
        controller.rate_hz = config.loop_rate_hz;
        let library = match &config.library {
            Some(p) => MotionLibrary::load(p).map_err(|e| config_error(p, e))?,
            None => MotionLibrary::default_library(),
        };
        let vocabulary = match &config.vocabulary {
            Some(p) => Vocabulary::load(p).map_err(|e| SessionError::Invalid(e.to_string()))?,
            None => Vocabulary::default_vocabulary(),
        };
        let prompt = match &config.prompt {
            Some(p) => PromptBundle::from_json(&read(p)?, &vocabulary).map_err(|e| config_error(p, e))?,
            None => PromptBundle::default_bundle(),
        };
        Ok(SessionParts {
            model,
            scene,
            controller,
            library,
            vocabulary,
            prompt,
        })
    }
}

const EVENT_HISTORY: usize = 32;
const HOMING_DURATION_S: f64 = 3.0;

struct Recording {
    recorder: DemoRecorder,
    task: String,
}

#[derive(Default)]
struct Teleop {
    // (translation, rotation vector) per arm, base frame
    deltas: [Option<(Vector3<f64>, Vector3<f64>)>; 2],
    arm_twists: [Option<([f64; 6], f64)>; 2],
    base_twist: Option<(Vector3<f64>, f64)>,
    // world velocity commanded on the previous tick
    base_driving: Option<Vector3<f64>>,
    homing: Option<[WaypointRun; 2]>,
    gripper: Vec<(Side, GripperCommand)>,
}

pub struct Session {
    config: SessionConfig,
    model: KinematicModel,
    scene: Scene,
    library: MotionLibrary,
    vocabulary: Vocabulary,
    prompt: PromptBundle,
    site: Site,
    ctrl: ControllerState,
    world: WorldState,
    home: [Pose; 2],
    home_posture: DVector<f64>,
    exec: Option<Executor>,
    plan: Option<Plan>,
    planning: Option<mpsc::Receiver<Result<Plan, String>>>,
    teleop: Teleop,
    recording: Option<Recording>,
    last_demo: Option<ObjectCentricDemo>,
    rights: Option<ClientId>,
    latest_obs: BTreeMap<u32, TagObservation>,
    events: VecDeque<String>,
    health: Health,
    tick: u64,
    snapshot_every: u64,
}

impl Session {
    pub fn new(config: SessionConfig) -> Result<Session, SessionError> {
        config.validate().map_err(SessionError::Invalid)?;
        let parts = SessionParts::load(&config)?;
        Session::from_parts(config, parts)
    }

    pub fn from_parts(config: SessionConfig, parts: SessionParts) -> Result<Session, SessionError> {
        config.validate().map_err(SessionError::Invalid)?;
        let SessionParts {
            model,
            scene,
            controller,
            library,
            vocabulary,
            prompt,
        } = parts;
        let start = model.home_configuration(scene.start);
        let ctrl = ControllerState::init(&model, controller, start.clone()).map_err(|e| SessionError::Invalid(e.to_string()))?;
        let world = WorldState::new(&scene, start);
        let home_config = model.home_configuration(PlanarPose::default());
        let fk = model.evaluate(&home_config);
        let home = Side::BOTH.map(|s| fk.frame(s.ee_frame()).expect("model has end effectors"));
        let home_posture = postural_subset(&model, &home_config.q);
        let snapshot_every = (config.loop_rate_hz / config.snapshot_rate_hz).round().max(1.0) as u64;
        Ok(Session {
            site: Site::from_scene(&scene),
            config,
            model,
            scene,
            library,
            vocabulary,
            prompt,
            ctrl,
            world,
            home,
            home_posture,
            exec: None,
            plan: None,
            planning: None,
            teleop: Teleop::default(),
            recording: None,
            last_demo: None,
            rights: None,
            latest_obs: BTreeMap::new(),
            events: VecDeque::new(),
            health: Health {
                status: "idle".into(),
                kkt: 0.0,
                solve_ms: 0.0,
            },
            tick: 0,
            snapshot_every,
        })
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn model(&self) -> &KinematicModel {
        &self.model
    }

    pub fn scene(&self) -> &Scene {
        &self.scene
    }

    /// Mutable scene access, for scripted changes such as moving obstacles.
    pub fn scene_mut(&mut self) -> &mut Scene {
        &mut self.scene
    }

    pub fn world(&self) -> &WorldState {
        &self.world
    }

    pub fn controller(&self) -> &ControllerState {
        &self.ctrl
    }

    pub fn executor(&self) -> Option<&Executor> {
        self.exec.as_ref()
    }

    pub fn plan(&self) -> Option<&Plan> {
        self.plan.as_ref()
    }

    pub fn last_demo(&self) -> Option<&ObjectCentricDemo> {
        self.last_demo.as_ref()
    }

    pub fn time(&self) -> f64 {
        self.world.time
    }

    pub fn tick(&self) -> u64 {
        self.tick
    }

    pub fn dt(&self) -> f64 {
        self.ctrl.dt()
    }

    fn event(&mut self, text: impl Into<String>) {
        let text = text.into();
        log::info!("t={:.3} {text}", self.world.time);
        if self.events.len() == EVENT_HISTORY {
            self.events.pop_front();
        }
        self.events.push_back(format!("[{:.2}] {text}", self.world.time));
    }

    fn running(&self) -> bool {
        self.exec.as_ref().is_some_and(|e| !e.is_finished()) || self.planning.is_some()
    }

    /// Applies one command between steps and acknowledges it.
    pub fn handle(&mut self, client: ClientId, id: u64, command: Command) -> Ack {
        if let Some(holder) = self.rights {
            if holder != client {
                return Ack::rejected(id, format!("rights: client {holder} holds command rights"));
            }
        }
        if !command.is_finite() {
            return Ack::rejected(id, "non-finite value");
        }
        let mode = self.ctrl.mode;
        let teleop_only = |what: &str| Ack::rejected(id, format!("mode: {what} needs teleop mode, not {mode:?}").to_lowercase());
        match command {
            Command::TeleopArm { side, mode: arm_mode, value } => {
                if mode != Mode::Teleop {
                    return teleop_only("teleop_arm");
                }
                self.teleop.homing = None;
                let lim = &self.config.teleop;
                let lin = Vector3::new(value[0], value[1], value[2]);
                let ang = Vector3::new(value[3], value[4], value[5]);
                match arm_mode {
                    ArmMode::PoseDelta => {
                        let lin = clamp_norm(lin, lim.max_step_m);
                        let ang = clamp_norm(ang, lim.max_step_rad);
                        // last write wins within a tick
                        self.teleop.deltas[side.index()] = Some((lin, ang));
                    }
                    ArmMode::Twist => {
                        let lin = clamp_norm(lin, lim.arm_linear);
                        let ang = clamp_norm(ang, lim.arm_angular);
                        let v = [lin.x, lin.y, lin.z, ang.x, ang.y, ang.z];
                        self.teleop.arm_twists[side.index()] = Some((v, self.world.time + lim.hold_s));
                    }
                }
                Ack::accepted(id)
            }
            Command::BaseTwist { vx, vy, omega } => {
                if mode != Mode::Teleop {
                    return teleop_only("base_twist");
                }
                let lim = &self.config.teleop;
                let lin = clamp_norm(Vector3::new(vx, vy, 0.0), lim.base_linear);
                let w = omega.clamp(-lim.base_angular, lim.base_angular);
                self.teleop.base_twist = Some((Vector3::new(lin.x, lin.y, w), self.world.time + lim.hold_s));
                Ack::accepted(id)
            }
            Command::Gripper { side, command } => {
                if mode != Mode::Teleop {
                    return teleop_only("gripper");
                }
                self.teleop.gripper.push((side, command));
                Ack::accepted(id)
            }
            Command::Macro(m) => self.handle_macro(client, id, m),
            Command::Instruct { text } => self.instruct(id, &text),
            Command::Preempt => match &mut self.exec {
                Some(e) if !e.is_finished() => {
                    e.preempt("operator preempt");
                    Ack::accepted(id)
                }
                _ if self.planning.is_some() => {
                    self.planning = None;
                    self.event("planning cancelled");
                    Ack::accepted(id)
                }
                _ => Ack::rejected(id, "nothing to preempt"),
            },
            Command::Release => {
                if self.rights == Some(client) {
                    self.rights = None;
                    self.event(format!("client {client} released command rights"));
                    Ack::accepted(id)
                } else {
                    Ack::rejected(id, "rights: not held by this client")
                }
            }
        }
    }

    /// Drops a disconnected client's rights.
    pub fn disconnect(&mut self, client: ClientId) {
        if self.rights == Some(client) {
            self.rights = None;
            self.event(format!("client {client} disconnected, rights released"));
        }
    }

    fn handle_macro(&mut self, client: ClientId, id: u64, m: Macro) -> Ack {
        let mode = self.ctrl.mode;
        match m {
            Macro::Homing => {
                if mode != Mode::Teleop {
                    return Ack::rejected(id, format!("mode: homing needs teleop mode, not {mode:?}").to_lowercase());
                }
                let runs = Side::BOTH.map(|side| {
                    let base_inv = PlanarPose::default().to_pose();
                    WaypointRun::new(
                        WaypointSpec {
                            side,
                            frame: FrameRef::BaseLink,
                            waypoints: vec![Waypoint {
                                offset: base_inv.compose(&self.home[side.index()]),
                                duration: HOMING_DURATION_S,
                            }],
                            gripper: BTreeMap::new(),
                        },
                        WaypointOptions::default(),
                    )
                });
                self.teleop.homing = Some(runs);
                self.teleop.deltas = [None, None];
                self.teleop.arm_twists = [None, None];
                self.ctrl
                    .apply(&self.model, &ControlCommand::SetPosture(self.home_posture.clone()))
                    .expect("home posture has the postural dimension");
                self.event("homing");
                Ack::accepted(id)
            }
            Macro::StartRecord { task, side } => {
                if mode != Mode::Teleop {
                    return Ack::rejected(id, format!("mode: recording needs teleop mode, not {mode:?}").to_lowercase());
                }
                if self.recording.is_some() {
                    return Ack::rejected(id, "already recording");
                }
                let tag_id = match self.record_tag(&task) {
                    Ok(t) => t,
                    Err(e) => return Ack::rejected(id, e),
                };
                self.recording = Some(Recording {
                    recorder: DemoRecorder::new(&task, side, tag_id, DemoRecorder::DEFAULT_RATE_HZ),
                    task: task.clone(),
                });
                self.event(format!("recording {task} with the {side} arm, tag {tag_id}"));
                Ack::accepted(id)
            }
            Macro::StopRecord => {
                let Some(rec) = self.recording.take() else {
                    return Ack::rejected(id, "not recording");
                };
                let samples = rec.recorder.sample_count();
                let demo = match rec.recorder.finish() {
                    Ok(d) => to_object_frame(&d),
                    Err(e) => {
                        self.event(format!("recording {} discarded: {e}", rec.task));
                        return Ack::rejected(id, e.to_string());
                    }
                };
                let path = self.config.record_dir.join(format!("{}.jsonl", rec.task));
                let saved = std::fs::create_dir_all(&self.config.record_dir)
                    .map_err(|e| e.to_string())
                    .and_then(|_| demo.save(&path).map_err(|e| e.to_string()));
                self.last_demo = Some(demo);
                match saved {
                    Ok(()) => {
                        self.event(format!("saved {samples} samples to {}", path.display()));
                        Ack::accepted_with(id, path.display().to_string())
                    }
                    Err(e) => Ack::rejected(id, format!("recorded {samples} samples but saving failed: {e}")),
                }
            }
            Macro::Mode { mode: new } => {
                if new == Mode::Teleop {
                    if self.rights.is_none() {
                        self.rights = Some(client);
                    }
                    // start from rest at the current configuration
                    self.ctrl.reset_references(&self.model);
                    self.teleop = Teleop::default();
                }
                if new == Mode::Autonomous && mode != Mode::Autonomous {
                    self.ctrl.reset_references(&self.model);
                }
                self.ctrl.mode = new;
                self.event(format!("mode {new:?}").to_lowercase());
                Ack::accepted(id)
            }
        }
    }

    /// Tag a demo for `task` is bound to: its object's tag if the label
    /// names one, else its location's tag.
    fn record_tag(&self, task: &str) -> Result<u32, String> {
        check_label(task)?;
        let parts: Vec<&str> = task.split('_').collect();
        if let Some(object) = parts.get(2) {
            return self
                .site
                .objects
                .get(*object)
                .copied()
                .ok_or_else(|| format!("unknown object '{object}'"));
        }
        let loc = parts[1].parse().map_err(|_| format!("'{}' has no tag", parts[1]))?;
        self.site
            .locations
            .get(&loc)
            .map(|l| l.tag_id)
            .ok_or_else(|| format!("unknown location '{}'", parts[1]))
    }

    fn instruct(&mut self, id: u64, text: &str) -> Ack {
        let mode = self.ctrl.mode;
        if mode == Mode::Teleop {
            return Ack::rejected(id, "mode: instructions need idle or autonomous mode, not teleop");
        }
        if self.running() {
            return Ack::rejected(id, "busy: a plan is already running");
        }
        if text.trim().is_empty() {
            return Ack::rejected(id, "empty instruction");
        }
        self.event(format!("instruction: {text}"));
        match self.config.llm.clone() {
            None => match rule_parse(text, &self.vocabulary) {
                Some(plan) => match self.start_plan(plan) {
                    Ok(summary) => Ack::accepted_with(id, summary),
                    Err(e) => Ack::rejected(id, e),
                },
                None => {
                    self.event("no plan for the instruction");
                    Ack::rejected(id, "no plan: the instruction matches neither pick-and-place nor pick-and-deliver")
                }
            },
            Some(llm) => {
                let prompt = match build_prompt(&self.prompt, text) {
                    Ok(p) => p,
                    Err(e) => return Ack::rejected(id, e),
                };
                let vocab = self.vocabulary.clone();
                let (tx, rx) = mpsc::channel();
                std::thread::spawn(move || {
                    let _ = tx.send(llm_request(&llm, &prompt, &vocab).map_err(|e| e.to_string()));
                });
                self.planning = Some(rx);
                Ack::accepted_with(id, "planning")
            }
        }
    }

    fn start_plan(&mut self, plan: Plan) -> Result<String, String> {
        let assembler = Assembler {
            library: &self.library,
            site: &self.site,
            params: self.config.assembly.clone(),
        };
        let fsm = assembler.assemble(&plan).map_err(|e| {
            let msg = format!("cannot assemble plan: {e}");
            self.event(msg.clone());
            msg
        })?;
        let summary = plan.actions.iter().map(|a| a.to_string()).collect::<Vec<_>>().join(", ");
        self.event(format!("plan: {summary}"));
        self.start_fsm(fsm)?;
        self.plan = Some(plan);
        Ok(summary)
    }

    /// Runs `fsm` in autonomous mode, as an instruction would.
    pub fn start_fsm(&mut self, fsm: SubFsm) -> Result<(), String> {
        if self.running() {
            return Err("busy: a plan is already running".into());
        }
        fsm.validate(&self.library).map_err(|e| e.to_string())?;
        if self.ctrl.mode != Mode::Autonomous {
            self.ctrl.reset_references(&self.model);
            self.ctrl.mode = Mode::Autonomous;
        }
        self.exec = Some(Executor::new(fsm, self.config.exec.clone()));
        Ok(())
    }

    fn poll_planner(&mut self) {
        let Some(rx) = &self.planning else {
            return;
        };
        let result = match rx.try_recv() {
            Ok(r) => r,
            Err(mpsc::TryRecvError::Empty) => return,
            Err(mpsc::TryRecvError::Disconnected) => Err("planner thread exited".into()),
        };
        self.planning = None;
        let started = result.and_then(|plan| self.start_plan(plan));
        if let Err(e) = started {
            self.event(format!("planning failed: {e}"));
            self.ctrl.reset_references(&self.model);
            self.ctrl.mode = Mode::Teleop;
            self.event("switched to teleoperation");
        }
    }

    /// One control period. Returns a snapshot when one is due.
    pub fn step(&mut self) -> Option<StateSnapshot> {
        let dt = self.ctrl.dt();
        let now = self.world.time;
        let observations = self.world.observe_all(&self.scene, &self.model);
        for o in &observations {
            self.latest_obs.insert(o.tag_id, o.clone());
        }
        self.poll_planner();

        let mut commands = Vec::new();
        let mut gripper = std::mem::take(&mut self.teleop.gripper);
        let mut messages = Vec::new();
        if let Some(exec) = self.exec.as_mut().filter(|e| !e.is_finished()) {
            let out = exec.tick(&TickInputs {
                now,
                model: &self.model,
                scene: &self.scene,
                library: &self.library,
                controller: &self.ctrl,
                world: &self.world,
                observations: &observations,
            });
            commands = out.commands;
            gripper.extend(out.gripper);
            messages = out.messages;
            if let Some(outcome) = exec.report().outcome {
                messages.push(format!("plan finished: {outcome:?}").to_lowercase());
            }
        }
        for m in messages {
            self.event(m);
        }
        if self.ctrl.mode == Mode::Teleop && !commands.contains(&ControlCommand::Reset) {
            commands.extend(self.teleop_commands(now, dt));
        }

        if let Some(rec) = &mut self.recording {
            let side = rec.recorder.side();
            let fk = self.model.evaluate(&self.ctrl.configuration);
            let base_inv = self.ctrl.configuration.base.to_pose().inverse();
            let ee = base_inv.compose(&fk.frame(side.ee_frame()).expect("model has end effectors"));
            let action = match gripper.iter().rev().find(|(s, _)| *s == side) {
                Some((_, GripperCommand::Open)) => GripperAction::Open,
                Some((_, GripperCommand::Close)) => GripperAction::Close,
                None => GripperAction::Hold,
            };
            let tag = observations.iter().find(|o| o.tag_id == rec.recorder.tag_id()).and_then(|o| {
                let cam = self.model.camera(&o.camera)?;
                Some(base_inv.compose(&fk.frame(&cam.frame).ok()?).compose(&o.pose))
            });
            rec.recorder.feed(now, &ee, action, tag.as_ref());
        }

        for (side, cmd) in gripper {
            let attached = self.world.set_gripper(&self.scene, &self.model, side, cmd);
            let text = match attached {
                Some(o) => format!("{side} gripper {cmd}: holding {o}"),
                None => format!("{side} gripper {cmd}"),
            };
            self.event(text);
        }

        let solution = match self.ctrl.control_step(&self.model, &commands) {
            Ok(s) => s,
            Err(e) => {
                self.event(format!("controller rejected commands: {e}"));
                self.ctrl.control_step(&self.model, &[]).expect("empty command batch is valid")
            }
        };
        self.health = Health {
            status: serde_json::to_value(solution.status)
                .ok()
                .and_then(|v| v.as_str().map(str::to_string))
                .unwrap_or_default(),
            kkt: solution.kkt,
            solve_ms: solution.solve_time.as_secs_f64() * 1e3,
        };
        self.world.step(&self.scene, &self.model, &solution.velocity, dt);
        self.tick += 1;
        (self.tick % self.snapshot_every == 0).then(|| self.snapshot())
    }

    fn teleop_commands(&mut self, now: f64, dt: f64) -> Vec<ControlCommand> {
        let ctrl = &self.ctrl;
        let mut refs: [(Pose, Twist); 3] = TaskId::ALL.map(|t| (ctrl.task(t).reference, Twist::zero()));
        let base_yaw = refs[2].0.to_planar().theta;
        let to_world = Quaternion::from_yaw(base_yaw);

        if let Some((v, until)) = self.teleop.base_twist {
            if now <= until {
                let (s, c) = base_yaw.sin_cos();
                let world_v = Vector3::new(c * v.x - s * v.y, s * v.x + c * v.y, v.z);
                // continue from where last tick's reference was heading
                let mut motion = BaseMotion::capture(ctrl);
                if let Some(prev) = self.teleop.base_driving {
                    motion.advance(prev, dt);
                }
                self.teleop.base_driving = Some(world_v);
                for cmd in motion.drive(world_v, dt) {
                    if let ControlCommand::SetReference {
                        task,
                        reference,
                        feedforward,
                    } = cmd
                    {
                        refs[task_slot(task)] = (reference, feedforward);
                    }
                }
            } else {
                self.teleop.base_twist = None;
                self.teleop.base_driving = None;
            }
        }

        if let Some(runs) = &mut self.teleop.homing {
            let fk = self.model.evaluate(&ctrl.configuration);
            let base = ctrl.configuration.base.to_pose();
            let mut done = true;
            for side in Side::BOTH {
                let ee = fk.frame(side.ee_frame()).expect("model has end effectors");
                let step = runs[side.index()].poll(now, &ee, &|_| Some(base));
                refs[side.index()] = (step.reference, step.feedforward);
                done &= step.status.is_done();
                if let MotionStatus::Failed(e) = step.status {
                    log::warn!("homing {side}: {e}");
                }
            }
            if done {
                self.teleop.homing = None;
                self.event("homing finished");
            }
        }

        for side in Side::BOTH {
            let i = side.index();
            if let Some((dp, dr)) = self.teleop.deltas[i].take() {
                let (pose, ff) = &mut refs[i];
                pose.translation += to_world.rotate(&dp);
                pose.rotation = Quaternion::from_rotation_vector(&to_world.rotate(&dr)).mul(&pose.rotation);
                *ff = Twist::zero();
            }
            if let Some((v, until)) = self.teleop.arm_twists[i] {
                if now > until {
                    self.teleop.arm_twists[i] = None;
                    continue;
                }
                let lin = to_world.rotate(&Vector3::new(v[0], v[1], v[2]));
                let ang = to_world.rotate(&Vector3::new(v[3], v[4], v[5]));
                let (pose, ff) = &mut refs[i];
                pose.translation += lin * dt;
                pose.rotation = Quaternion::from_rotation_vector(&(ang * dt)).mul(&pose.rotation);
                *ff = Twist::new(ff.linear + lin, ff.angular + ang);
            }
        }

        TaskId::ALL
            .iter()
            .map(|&task| {
                let (reference, feedforward) = refs[task_slot(task)];
                ControlCommand::SetReference {
                    task,
                    reference,
                    feedforward,
                }
            })
            .collect()
    }

    pub fn snapshot(&self) -> StateSnapshot {
        let fk = self.model.evaluate(&self.world.config);
        let ee = |s: Side| fk.frame(s.ee_frame()).expect("model has end effectors");
        let attachment = |s: Side| self.world.attachment(s).map(|a| a.object.clone());
        StateSnapshot {
            tick: self.tick,
            time: self.world.time,
            mode: self.ctrl.mode,
            base: self.world.config.base,
            q: self.world.config.q.iter().copied().collect(),
            ee: PerSide {
                left: ee(Side::Left),
                right: ee(Side::Right),
            },
            ee_targets: PerSide {
                left: self.ctrl.task(TaskId::Left).reference,
                right: self.ctrl.task(TaskId::Right).reference,
            },
            grippers: PerSide {
                left: self.world.grippers[0],
                right: self.world.grippers[1],
            },
            attachments: PerSide {
                left: attachment(Side::Left),
                right: attachment(Side::Right),
            },
            objects: self
                .scene
                .objects
                .iter()
                .zip(&self.world.objects)
                .map(|(o, p)| ObjectState {
                    label: o.label.clone(),
                    pose: *p,
                })
                .collect(),
            fsm: self.exec.as_ref().map(|e| FsmStatus {
                name: e.fsm().name.clone(),
                state: e.current_state().map(|s| s.name.clone()),
                index: e.current_state().and_then(|s| e.fsm().states.iter().position(|n| std::ptr::eq(n, s))),
                report: e.report().clone(),
            }),
            plan: self.plan.clone(),
            observations: self.latest_obs.values().cloned().collect(),
            selected_human: self.exec.as_ref().and_then(|e| e.selected_human()).map(|h| h.id.clone()),
            health: self.health.clone(),
            recording: self.recording.as_ref().map(|r| r.task.clone()),
            events: self.events.iter().cloned().collect(),
            rights: self.rights,
        }
    }
}

fn task_slot(task: TaskId) -> usize {
    match task {
        TaskId::Left => 0,
        TaskId::Right => 1,
        TaskId::Base => 2,
    }
}

fn clamp_norm(v: Vector3<f64>, max: f64) -> Vector3<f64> {
    let n = v.norm();
    if n > max {
        v * (max / n)
    } else {
        v
    }
}
