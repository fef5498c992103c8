//! Tick-driven FSM execution with teleoperation fallback.

use std::collections::BTreeMap;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::{Bindings, Edge, FsmState, StateNode, SubFsm};
use crate::model::{FkCache, KinematicModel, BASE_LINK};
use crate::sim::{HandoverTarget, Scene, TagObservation, WorldState};
use crate::skills::{
    FrameRef, Motion, MotionLibrary, MotionStatus, MotionStep, Playback, PlaybackOptions, WaypointOptions,
    WaypointRun,
};
use crate::spatial::{wrap_angle, PlanarPose, Pose, Twist};
use crate::types::{GripperCommand, Side};
use crate::wbc::{ControlCommand, ControllerState, Mode, TaskId};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExecOptions {
    /// Time between a gripper command and checking its effect.
    pub gripper_wait_s: f64,
    /// Navigation speed caps, m/s and rad/s.
    pub nav_speed: f64,
    pub nav_yaw_rate: f64,
    /// Proportional gain of the navigation law, 1/s.
    pub nav_gain: f64,
    /// Extra attempts of a failed state before giving up.
    pub retries: u32,
    pub waypoints: WaypointOptions,
    pub playback: PlaybackOptions,
}

impl Default for ExecOptions {
    fn default() -> Self {
        Self {
            gripper_wait_s: 0.6,
            nav_speed: 0.3,
            nav_yaw_rate: 0.5,
            nav_gain: 1.0,
            retries: 0,
            waypoints: WaypointOptions::default(),
            playback: PlaybackOptions::default(),
        }
    }
}

/// World pose of a tag, from the latest observation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TagEstimate {
    pub pose: Pose,
    pub stamp: f64,
}

pub struct TickInputs<'a> {
    pub now: f64,
    pub model: &'a KinematicModel,
    pub scene: &'a Scene,
    pub library: &'a MotionLibrary,
    pub controller: &'a ControllerState,
    pub world: &'a WorldState,
    /// Observations taken this tick.
    pub observations: &'a [TagObservation],
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TickOutputs {
    pub commands: Vec<ControlCommand>,
    pub gripper: Vec<(Side, GripperCommand)>,
    pub messages: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Succeeded,
    Failed,
    Preempted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateRecord {
    pub index: usize,
    pub name: String,
    pub group: String,
    pub kind: String,
    /// None while running.
    pub outcome: Option<Outcome>,
    pub start: f64,
    pub end: Option<f64>,
    pub diagnostics: String,
}

/// A navigation pause caused by an obstacle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stall {
    pub state: String,
    pub start: f64,
    pub end: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExecutionReport {
    pub fsm: String,
    pub states: Vec<StateRecord>,
    /// None while running.
    pub outcome: Option<Outcome>,
    /// Set when execution stopped early and control went to the operator.
    pub fallback: bool,
    pub stalls: Vec<Stall>,
}

impl ExecutionReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Moves the base reference at a commanded velocity and carries the arm
/// references along with it.
#[derive(Clone, Debug)]
pub(crate) struct BaseMotion {
    base: PlanarPose,
    // arm references in the base reference frame
    arms: [Pose; 2],
}

impl BaseMotion {
    pub(crate) fn capture(ctrl: &ControllerState) -> Self {
        let base = ctrl.task(TaskId::Base).reference.to_planar();
        let inv = base.to_pose().inverse();
        let arms = Side::BOTH.map(|s| inv.compose(&ctrl.task(s.into()).reference));
        Self { base, arms }
    }

    /// References for this tick moving at world-frame `(vx, vy, ω)`, then
    /// advances the base reference by one period.
    pub(crate) fn drive(&mut self, v: Vector3<f64>, dt: f64) -> Vec<ControlCommand> {
        let bp = self.base.to_pose();
        let linear = Vector3::new(v.x, v.y, 0.0);
        let angular = Vector3::new(0.0, 0.0, v.z);
        let mut out = vec![ControlCommand::SetReference {
            task: TaskId::Base,
            reference: bp,
            feedforward: Twist::new(linear, angular),
        }];
        for side in Side::BOTH {
            let r = bp.compose(&self.arms[side.index()]);
            let lever = r.translation - bp.translation;
            out.push(ControlCommand::SetReference {
                task: side.into(),
                reference: r,
                feedforward: Twist::new(linear + angular.cross(&lever), angular),
            });
        }
        self.advance(v, dt);
        out
    }

    pub(crate) fn advance(&mut self, v: Vector3<f64>, dt: f64) {
        self.base = PlanarPose::new(self.base.x + v.x * dt, self.base.y + v.y * dt, self.base.theta + v.z * dt);
    }
}

#[derive(Clone, Debug)]
struct NavRun {
    motion: BaseMotion,
    anchor: Pose,
    target: Option<PlanarPose>,
    stall: Option<usize>,
}

enum Active {
    Waypoints(Box<WaypointRun>, Bindings),
    Playback(Box<Playback>),
    Gripper { side: Side, command: GripperCommand, at: f64 },
    Navigate(Box<NavRun>),
    Search(BaseMotion),
    Select(BaseMotion),
    Announce,
}

enum Poll {
    Running,
    Done(Result<String, String>),
}

/// Runs an FSM one control tick at a time.
///
/// Each tick takes this tick's observations and the controller state and
/// returns controller commands and gripper commands for the caller to
/// apply before the control step. The controller must be in autonomous
/// mode; leaving it counts as a preemption.
pub struct Executor {
    fsm: SubFsm,
    options: ExecOptions,
    current: Option<usize>,
    active: Option<Active>,
    entered: f64,
    attempts: u32,
    tags: BTreeMap<u32, TagEstimate>,
    human: Option<HandoverTarget>,
    report: ExecutionReport,
    preempt: Option<String>,
}

impl Executor {
    pub fn new(fsm: SubFsm, options: ExecOptions) -> Executor {
        let empty = fsm.states.is_empty();
        let report = ExecutionReport {
            fsm: fsm.name.clone(),
            states: Vec::new(),
            outcome: empty.then_some(Outcome::Succeeded),
            fallback: false,
            stalls: Vec::new(),
        };
        Executor {
            fsm,
            options,
            current: (!empty).then_some(0),
            active: None,
            entered: 0.0,
            attempts: 0,
            tags: BTreeMap::new(),
            human: None,
            report,
            preempt: None,
        }
    }

    pub fn fsm(&self) -> &SubFsm {
        &self.fsm
    }

    pub fn report(&self) -> &ExecutionReport {
        &self.report
    }

    pub fn is_finished(&self) -> bool {
        self.report.outcome.is_some()
    }

    pub fn current_state(&self) -> Option<&StateNode> {
        self.current.map(|i| &self.fsm.states[i])
    }

    pub fn tag_estimate(&self, tag_id: u32) -> Option<&TagEstimate> {
        self.tags.get(&tag_id)
    }

    pub fn selected_human(&self) -> Option<&HandoverTarget> {
        self.human.as_ref()
    }

    /// Stops execution at the next tick.
    pub fn preempt(&mut self, reason: &str) {
        if !self.is_finished() {
            self.preempt = Some(reason.to_string());
        }
    }

    pub fn tick(&mut self, inp: &TickInputs) -> TickOutputs {
        let mut out = TickOutputs::default();
        if self.is_finished() {
            return out;
        }
        let fk = inp.model.evaluate(&inp.controller.configuration);
        self.update_tags(inp, &fk);

        if inp.controller.mode != Mode::Autonomous && self.preempt.is_none() {
            self.preempt = Some(format!("controller switched to {:?} mode", inp.controller.mode).to_lowercase());
        }
        if let Some(reason) = self.preempt.take() {
            self.stop(inp.now, Outcome::Preempted, &reason, &mut out);
            return out;
        }

        let index = self.current.expect("running executor has a current state");
        if self.active.is_none() {
            let node = &self.fsm.states[index];
            self.entered = inp.now;
            self.report.states.push(StateRecord {
                index,
                name: node.name.clone(),
                group: node.group.clone(),
                kind: node.state.kind().to_string(),
                outcome: None,
                start: inp.now,
                end: None,
                diagnostics: String::new(),
            });
            out.messages.push(format!("{} started", node.name));
            log::info!("t={:.3} state {index} '{}' started", inp.now, node.name);
            match self.enter(inp, &fk) {
                Ok(a) => self.active = Some(a),
                Err(e) => {
                    self.finish_state(inp, Err(e), &mut out);
                    return out;
                }
            }
        }
        let poll = self.poll(inp, &fk, &mut out);
        if let Poll::Done(result) = poll {
            self.finish_state(inp, result, &mut out);
        }
        out
    }

    fn update_tags(&mut self, inp: &TickInputs, fk: &FkCache) {
        for obs in inp.observations {
            let Some(cam) = inp.model.camera(&obs.camera) else {
                continue;
            };
            let Ok(cam_pose) = fk.frame(&cam.frame) else {
                continue;
            };
            self.tags.insert(
                obs.tag_id,
                TagEstimate {
                    pose: cam_pose.compose(&obs.pose),
                    stamp: obs.stamp,
                },
            );
        }
    }

    fn enter(&self, inp: &TickInputs, fk: &FkCache) -> Result<Active, String> {
        let node = &self.fsm.states[self.current.expect("current state")];
        Ok(match &node.state {
            FsmState::Waypoints { label, bindings, .. } => match inp.library.get(label) {
                Some(Motion::Waypoints(spec)) => Active::Waypoints(
                    Box::new(WaypointRun::new(spec.clone(), self.options.waypoints.clone())),
                    bindings.clone(),
                ),
                _ => return Err(format!("no way-point motion '{label}' in the library")),
            },
            FsmState::DemoPlayback { label, side, tag_id } => {
                let Some(Motion::Demo { demo, .. }) = inp.library.get(label) else {
                    return Err(format!("no demo '{label}' in the library"));
                };
                let est = self
                    .tags
                    .get(tag_id)
                    .ok_or_else(|| format!("tag {tag_id} has not been observed"))?;
                let ee = fk.frame(side.ee_frame()).map_err(|e| e.to_string())?;
                let playback = Playback::new(
                    demo.clone(),
                    est.pose,
                    est.stamp,
                    inp.now,
                    &ee,
                    self.options.playback.clone(),
                )
                .map_err(|e| e.to_string())?;
                Active::Playback(Box::new(playback))
            }
            FsmState::Gripper { side, command } => Active::Gripper {
                side: *side,
                command: *command,
                at: inp.now,
            },
            FsmState::Navigate { .. } => Active::Navigate(Box::new(NavRun {
                motion: BaseMotion::capture(inp.controller),
                anchor: inp.controller.configuration.base.to_pose(),
                target: None,
                stall: None,
            })),
            FsmState::SearchTag { .. } => Active::Search(BaseMotion::capture(inp.controller)),
            FsmState::SelectHuman { .. } => Active::Select(BaseMotion::capture(inp.controller)),
            FsmState::Announce { .. } => Active::Announce,
        })
    }

    fn poll(&mut self, inp: &TickInputs, fk: &FkCache, out: &mut TickOutputs) -> Poll {
        let index = self.current.expect("current state");
        let state = self.fsm.states[index].state.clone();
        let elapsed = inp.now - self.entered;
        let dt = inp.controller.dt();
        let mut active = self.active.take().expect("state entered");
        let poll = match (&state, &mut active) {
            (FsmState::Waypoints { side, .. }, Active::Waypoints(run, bindings)) => {
                let ee = fk.frame(side.ee_frame()).expect("model has end effectors");
                let base = fk.frame(BASE_LINK).expect("model has a base");
                let resolve = |f: &FrameRef| -> Option<Pose> {
                    match f {
                        FrameRef::Object => bindings.object.and_then(|id| self.tags.get(&id)).map(|e| e.pose),
                        FrameRef::Location => bindings.location.and_then(|id| self.tags.get(&id)).map(|e| e.pose),
                        FrameRef::Tag(id) => self.tags.get(id).map(|e| e.pose),
                        FrameRef::Human => self.human.as_ref().map(HandoverTarget::chest_frame),
                        FrameRef::BaseLink => Some(base),
                    }
                };
                let step = run.poll(inp.now, &ee, &resolve);
                motion_step(*side, step, out)
            }
            (FsmState::DemoPlayback { side, .. }, Active::Playback(pb)) => {
                let ee = fk.frame(side.ee_frame()).expect("model has end effectors");
                let step = pb.poll(inp.now, &ee);
                motion_step(*side, step, out)
            }
            (FsmState::Gripper { .. }, Active::Gripper { side, command, at }) => {
                if *at == inp.now {
                    out.gripper.push((*side, *command));
                    Poll::Running
                } else if inp.now - *at < self.options.gripper_wait_s {
                    Poll::Running
                } else {
                    let held = inp.world.attachment(*side).map(|a| a.object.clone());
                    Poll::Done(match (command, held) {
                        (GripperCommand::Close, Some(o)) => Ok(format!("holding {o}")),
                        (GripperCommand::Close, None) => Err("gripper closed on nothing".into()),
                        (GripperCommand::Open, None) => Ok("released".into()),
                        (GripperCommand::Open, Some(o)) => Err(format!("still holding {o}")),
                    })
                }
            }
            (
                FsmState::Navigate {
                    frame,
                    offset,
                    pos_tol,
                    yaw_tol,
                    timeout,
                },
                Active::Navigate(nav),
            ) => {
                let frame_pose = match frame {
                    FrameRef::Tag(id) => self.tags.get(id).map(|e| e.pose),
                    FrameRef::Human => self.human.as_ref().map(|h| h.pose),
                    FrameRef::BaseLink => Some(nav.anchor),
                    FrameRef::Object | FrameRef::Location => None,
                };
                if let Some(p) = frame_pose {
                    nav.target = Some(p.compose(offset).to_planar());
                }
                let base = inp.controller.configuration.base;
                match nav.target {
                    None if matches!(frame, FrameRef::Tag(_)) => {
                        if elapsed > *timeout {
                            Poll::Done(Err(format!("frame '{frame}' not found within {timeout} s")))
                        } else {
                            // look for it
                            out.commands.extend(nav.motion.drive(Vector3::new(0.0, 0.0, self.options.nav_yaw_rate), dt));
                            Poll::Running
                        }
                    }
                    None => Poll::Done(Err(format!("frame '{frame}' is not available"))),
                    Some(target) => {
                        let dist = (target.x - base.x).hypot(target.y - base.y);
                        let dyaw = wrap_angle(target.theta - base.theta);
                        if dist <= *pos_tol && dyaw.abs() <= *yaw_tol {
                            self.end_stall(nav, inp.now);
                            Poll::Done(Ok(format!("reached within {dist:.3} m, {:.3} rad", dyaw.abs())))
                        } else if elapsed > *timeout {
                            self.end_stall(nav, inp.now);
                            Poll::Done(Err(format!("timed out {dist:.3} m, {:.3} rad from the goal", dyaw.abs())))
                        } else {
                            let v = self.nav_velocity(&nav.motion.base, &target);
                            let (s, c) = base.theta.sin_cos();
                            let body = Vector3::new(c * v.x + s * v.y, -s * v.x + c * v.y, v.z);
                            if inp.world.obstacle_ahead(inp.scene, &body) {
                                if nav.stall.is_none() {
                                    out.messages.push(format!("{}: obstacle ahead, waiting", self.fsm.states[index].name));
                                    nav.stall = Some(self.report.stalls.len());
                                    self.report.stalls.push(Stall {
                                        state: self.fsm.states[index].name.clone(),
                                        start: inp.now,
                                        end: None,
                                    });
                                }
                                out.commands.extend(nav.motion.drive(Vector3::zeros(), dt));
                            } else {
                                self.end_stall(nav, inp.now);
                                out.commands.extend(nav.motion.drive(v, dt));
                            }
                            Poll::Running
                        }
                    }
                }
            }
            (
                FsmState::SearchTag {
                    tag_id,
                    rotation_rate,
                    timeout,
                },
                Active::Search(motion),
            ) => {
                if let Some(obs) = inp.observations.iter().find(|o| o.tag_id == *tag_id) {
                    Poll::Done(Ok(format!("tag {tag_id} seen by {} after {elapsed:.2} s", obs.camera)))
                } else if elapsed > *timeout {
                    Poll::Done(Err(format!("tag {tag_id} not seen within {timeout} s")))
                } else {
                    out.commands.extend(motion.drive(Vector3::new(0.0, 0.0, *rotation_rate), dt));
                    Poll::Running
                }
            }
            (FsmState::SelectHuman { rotation_rate, timeout }, Active::Select(motion)) => {
                if let Some(t) = inp.world.select_handover_target(inp.scene, inp.model) {
                    let msg = format!("selected {} at {:.2} m", t.id, t.distance);
                    self.human = Some(t);
                    Poll::Done(Ok(msg))
                } else if elapsed > *timeout {
                    Poll::Done(Err(format!("no attentive person found within {timeout} s")))
                } else {
                    out.commands.extend(motion.drive(Vector3::new(0.0, 0.0, *rotation_rate), dt));
                    Poll::Running
                }
            }
            (FsmState::Announce { text }, Active::Announce) => {
                out.messages.push(text.clone());
                Poll::Done(Ok(String::new()))
            }
            _ => unreachable!("active state matches its definition"),
        };
        self.active = Some(active);
        poll
    }

    fn nav_velocity(&self, from: &PlanarPose, to: &PlanarPose) -> Vector3<f64> {
        let o = &self.options;
        let (dx, dy) = (to.x - from.x, to.y - from.y);
        let dist = dx.hypot(dy);
        let speed = (o.nav_gain * dist).min(o.nav_speed);
        let (vx, vy) = if dist > 1e-12 {
            (dx / dist * speed, dy / dist * speed)
        } else {
            (0.0, 0.0)
        };
        let w = (o.nav_gain * wrap_angle(to.theta - from.theta)).clamp(-o.nav_yaw_rate, o.nav_yaw_rate);
        Vector3::new(vx, vy, w)
    }

    fn end_stall(&mut self, nav: &mut NavRun, now: f64) {
        if let Some(i) = nav.stall.take() {
            self.report.stalls[i].end = Some(now);
        }
    }

    fn finish_state(&mut self, inp: &TickInputs, result: Result<String, String>, out: &mut TickOutputs) {
        let index = self.current.expect("current state");
        let name = self.fsm.states[index].name.clone();
        self.active = None;
        let record = self.report.states.last_mut().expect("state recorded at entry");
        record.end = Some(inp.now);
        match result {
            Ok(diag) => {
                record.outcome = Some(Outcome::Succeeded);
                record.diagnostics = diag;
                log::info!("t={:.3} state '{name}' succeeded {}", inp.now, record.diagnostics);
                out.messages.push(format!("{name} succeeded"));
                self.attempts = 0;
                out.commands = freeze(inp.controller);
                match self.fsm.states[index].on_success {
                    Edge::State(j) => self.current = Some(j),
                    Edge::Succeed => self.complete(Outcome::Succeeded),
                    Edge::Fail => self.fall_back(out),
                }
            }
            Err(diag) => {
                record.outcome = Some(Outcome::Failed);
                record.diagnostics = diag.clone();
                log::warn!("t={:.3} state '{name}' failed: {diag}", inp.now);
                out.messages.push(format!("{name} failed: {diag}"));
                if self.attempts < self.options.retries {
                    self.attempts += 1;
                    out.commands = freeze(inp.controller);
                    return;
                }
                self.attempts = 0;
                match self.fsm.states[index].on_failure {
                    Edge::State(j) => {
                        out.commands = freeze(inp.controller);
                        self.current = Some(j);
                    }
                    Edge::Succeed => self.complete(Outcome::Succeeded),
                    Edge::Fail => {
                        self.complete(Outcome::Failed);
                        self.fall_back(out);
                    }
                }
            }
        }
    }

    fn stop(&mut self, now: f64, outcome: Outcome, reason: &str, out: &mut TickOutputs) {
        if let Some(Active::Navigate(nav)) = &mut self.active {
            if let Some(i) = nav.stall.take() {
                self.report.stalls[i].end = Some(now);
            }
        }
        if self.active.take().is_some() {
            let record = self.report.states.last_mut().expect("active state recorded");
            record.outcome = Some(outcome);
            record.end = Some(now);
            record.diagnostics = reason.to_string();
        }
        log::warn!("t={now:.3} execution stopped: {reason}");
        out.messages.push(format!("execution stopped: {reason}"));
        self.complete(outcome);
        self.fall_back(out);
    }

    fn complete(&mut self, outcome: Outcome) {
        self.report.outcome = Some(outcome);
        self.current = None;
    }

    fn fall_back(&mut self, out: &mut TickOutputs) {
        if self.report.outcome.is_none() {
            self.report.outcome = Some(Outcome::Failed);
        }
        self.current = None;
        self.report.fallback = true;
        out.commands = vec![ControlCommand::Reset, ControlCommand::SetMode(Mode::Teleop)];
        out.messages.push("switched to teleoperation".into());
    }
}

fn motion_step(side: Side, step: MotionStep, out: &mut TickOutputs) -> Poll {
    out.commands.push(ControlCommand::SetReference {
        task: side.into(),
        reference: step.reference,
        feedforward: step.feedforward,
    });
    out.gripper.extend(step.gripper.into_iter().map(|c| (side, c)));
    match step.status {
        MotionStatus::Running => Poll::Running,
        MotionStatus::Succeeded => Poll::Done(Ok(String::new())),
        MotionStatus::Failed(e) => Poll::Done(Err(e)),
    }
}

/// Holds every task at its current reference.
fn freeze(ctrl: &ControllerState) -> Vec<ControlCommand> {
    TaskId::ALL
        .iter()
        .map(|&task| ControlCommand::SetReference {
            task,
            reference: ctrl.task(task).reference,
            feedforward: Twist::zero(),
        })
        .collect()
}
