//! Plan execution: FSM state types, the sub-FSM builders that turn plan
//! actions into state sequences, and the tick-driven executor.

mod exec;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::plan::{Action, Plan};
use crate::sim::Scene;
use crate::skills::{FrameRef, Motion, MotionLibrary};
use crate::spatial::{PlanarPose, Pose};
use crate::types::{GripperCommand, Location, Side};

pub(crate) use exec::BaseMotion;
pub use exec::{
    ExecOptions, ExecutionReport, Executor, Outcome, Stall, StateRecord, TagEstimate, TickInputs, TickOutputs,
};

#[derive(Debug, Error, PartialEq)]
pub enum AssemblyError {
    #[error("unknown location '{0}'")]
    UnknownLocation(String),
    #[error("object '{0}' is not in the site registry")]
    UnknownObject(String),
    #[error("motion library has no label '{0}'")]
    MissingMotion(String),
    #[error("{label}: demo is bound to tag {demo_tag}, but '{object}' carries tag {object_tag}")]
    DemoTagMismatch {
        label: String,
        object: String,
        demo_tag: u32,
        object_tag: u32,
    },
    #[error("{label} uses the {got} arm but the object is held by the {expected} arm")]
    SideMismatch { label: String, expected: Side, got: Side },
    #[error("'{0}' needs a held object; no pick precedes it")]
    NothingHeld(String),
    #[error("motion '{label}' must be {expected}")]
    WrongMotionKind { label: String, expected: &'static str },
}

/// Tag ids that a way-point spec's symbolic frames are bound to.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bindings {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub location: Option<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum FsmState {
    Waypoints {
        label: String,
        side: Side,
        #[serde(default)]
        bindings: Bindings,
    },
    DemoPlayback {
        label: String,
        side: Side,
        tag_id: u32,
    },
    Gripper {
        side: Side,
        command: GripperCommand,
    },
    /// Drive the base to `frame ∘ offset`, projected to the ground.
    Navigate {
        frame: FrameRef,
        offset: Pose,
        pos_tol: f64,
        yaw_tol: f64,
        timeout: f64,
    },
    SearchTag {
        tag_id: u32,
        rotation_rate: f64,
        timeout: f64,
    },
    SelectHuman {
        rotation_rate: f64,
        timeout: f64,
    },
    Announce {
        text: String,
    },
}

impl FsmState {
    pub fn kind(&self) -> &'static str {
        match self {
            FsmState::Waypoints { .. } => "waypoints",
            FsmState::DemoPlayback { .. } => "demo_playback",
            FsmState::Gripper { .. } => "gripper",
            FsmState::Navigate { .. } => "navigate",
            FsmState::SearchTag { .. } => "search_tag",
            FsmState::SelectHuman { .. } => "select_human",
            FsmState::Announce { .. } => "announce",
        }
    }

    pub fn validate(&self, library: &MotionLibrary) -> Result<(), String> {
        let positive = |what: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(format!("{what} must be positive, got {v}"))
            }
        };
        match self {
            FsmState::Waypoints { label, .. } | FsmState::DemoPlayback { label, .. } => {
                library.require(label).map(|_| ()).map_err(|e| e.to_string())
            }
            FsmState::Navigate {
                pos_tol,
                yaw_tol,
                timeout,
                frame,
                ..
            } => {
                positive("pos_tol", *pos_tol)?;
                positive("yaw_tol", *yaw_tol)?;
                positive("timeout", *timeout)?;
                match frame {
                    FrameRef::Object | FrameRef::Location => {
                        Err(format!("navigation frame '{frame}' must be a tag, the human or base_link"))
                    }
                    _ => Ok(()),
                }
            }
            FsmState::SearchTag {
                rotation_rate, timeout, ..
            }
            | FsmState::SelectHuman { rotation_rate, timeout } => {
                positive("rotation_rate", *rotation_rate)?;
                positive("timeout", *timeout)
            }
            FsmState::Gripper { .. } | FsmState::Announce { .. } => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Edge {
    State(usize),
    Succeed,
    Fail,
}

impl fmt::Display for Edge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Edge::State(i) => write!(f, "{i}"),
            Edge::Succeed => f.write_str("SUCCEED"),
            Edge::Fail => f.write_str("FAIL"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateNode {
    pub name: String,
    /// The sub-FSM this state came from.
    pub group: String,
    pub state: FsmState,
    pub on_success: Edge,
    pub on_failure: Edge,
}

/// States run from index 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubFsm {
    pub name: String,
    pub states: Vec<StateNode>,
}

impl SubFsm {
    /// A linear chain: each state succeeds into the next, fails out.
    pub fn sequence(name: &str, states: Vec<(String, FsmState)>) -> SubFsm {
        let n = states.len();
        let states = states
            .into_iter()
            .enumerate()
            .map(|(i, (state_name, state))| StateNode {
                name: state_name,
                group: name.to_string(),
                state,
                on_success: if i + 1 < n { Edge::State(i + 1) } else { Edge::Succeed },
                on_failure: Edge::Fail,
            })
            .collect();
        SubFsm {
            name: name.to_string(),
            states,
        }
    }

    /// Runs `self`, then `next` on success.
    pub fn then(mut self, next: SubFsm) -> SubFsm {
        let offset = self.states.len();
        let entry = if next.states.is_empty() {
            Edge::Succeed
        } else {
            Edge::State(offset)
        };
        for s in &mut self.states {
            if s.on_success == Edge::Succeed {
                s.on_success = entry;
            }
            if s.on_failure == Edge::Succeed {
                s.on_failure = entry;
            }
        }
        let shift = |e: Edge| match e {
            Edge::State(i) => Edge::State(i + offset),
            other => other,
        };
        self.states.extend(next.states.into_iter().map(|mut s| {
            s.on_success = shift(s.on_success);
            s.on_failure = shift(s.on_failure);
            s
        }));
        self.name = if self.name.is_empty() {
            next.name
        } else {
            format!("{}, {}", self.name, next.name)
        };
        self
    }

    pub fn validate(&self, library: &MotionLibrary) -> Result<(), String> {
        let n = self.states.len();
        for (i, s) in self.states.iter().enumerate() {
            s.state.validate(library).map_err(|e| format!("state {i} ({}): {e}", s.name))?;
            for e in [s.on_success, s.on_failure] {
                if let Edge::State(j) = e {
                    if j >= n {
                        return Err(format!("state {i} ({}): edge to missing state {j}", s.name));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("fsm serializes")
    }

    /// One line per state: index, name, group, kind and edges.
    pub fn dump(&self) -> String {
        let mut out = format!("{}\n", self.name);
        for (i, s) in self.states.iter().enumerate() {
            out.push_str(&format!(
                "  {i:>2} {:<18} {:<8} [{}] ok -> {}, fail -> {}\n",
                s.name,
                s.state.kind(),
                s.group,
                s.on_success,
                s.on_failure
            ));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiteLocation {
    pub tag_id: u32,
    pub approach_offset: Pose,
}

/// What the robot knows about the site before it starts: which tag each
/// object and location carries, and where to stand at each location.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Site {
    pub objects: BTreeMap<String, u32>,
    pub locations: BTreeMap<Location, SiteLocation>,
}

impl Site {
    pub fn from_scene(scene: &Scene) -> Site {
        Site {
            objects: scene.objects.iter().map(|o| (o.label.clone(), o.tag_id)).collect(),
            locations: scene
                .locations
                .iter()
                .map(|(l, s)| {
                    (
                        *l,
                        SiteLocation {
                            tag_id: s.tag_id,
                            approach_offset: s.approach_offset,
                        },
                    )
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssemblyParams {
    pub pos_tol: f64,
    pub yaw_tol: f64,
    pub navigate_timeout_s: f64,
    pub search_rate: f64,
    pub search_timeout_s: f64,
    pub select_timeout_s: f64,
    /// Base pose relative to the handover target's ground frame.
    pub handover_offset: Pose,
}

impl Default for AssemblyParams {
    fn default() -> Self {
        Self {
            pos_tol: 0.05,
            yaw_tol: 0.1,
            navigate_timeout_s: 60.0,
            search_rate: 0.5,
            search_timeout_s: 15.0,
            select_timeout_s: 15.0,
            handover_offset: PlanarPose::new(0.75, 0.2, std::f64::consts::PI).to_pose(),
        }
    }
}

/// Builds sub-FSMs from the motion library and the site registry.
pub struct Assembler<'a> {
    pub library: &'a MotionLibrary,
    pub site: &'a Site,
    pub params: AssemblyParams,
}

impl<'a> Assembler<'a> {
    pub fn new(library: &'a MotionLibrary, site: &'a Site) -> Self {
        Self {
            library,
            site,
            params: AssemblyParams::default(),
        }
    }

    fn location(&self, loc: &str) -> Result<(Location, &SiteLocation), AssemblyError> {
        let l: Location = loc.parse().map_err(|_| AssemblyError::UnknownLocation(loc.to_string()))?;
        let spec = self
            .site
            .locations
            .get(&l)
            .ok_or_else(|| AssemblyError::UnknownLocation(loc.to_string()))?;
        Ok((l, spec))
    }

    fn motion(&self, label: &str) -> Result<&Motion, AssemblyError> {
        self.library
            .get(label)
            .ok_or_else(|| AssemblyError::MissingMotion(label.to_string()))
    }

    fn lookup(&self, action: &str, loc: &str, object: Option<&str>) -> Result<String, AssemblyError> {
        self.library
            .lookup(action, loc, object)
            .map_err(|_| AssemblyError::MissingMotion(format!("{action}_{loc}")))
    }

    fn waypoints(&self, label: &str, bindings: Bindings) -> Result<(String, FsmState), AssemblyError> {
        match self.motion(label)? {
            Motion::Waypoints(w) => Ok((
                label.to_string(),
                FsmState::Waypoints {
                    label: label.to_string(),
                    side: w.side,
                    bindings,
                },
            )),
            Motion::Demo { .. } => Err(AssemblyError::WrongMotionKind {
                label: label.to_string(),
                expected: "a way-point motion",
            }),
        }
    }

    fn navigate(&self, frame: FrameRef, offset: Pose) -> FsmState {
        FsmState::Navigate {
            frame,
            offset,
            pos_tol: self.params.pos_tol,
            yaw_tol: self.params.yaw_tol,
            timeout: self.params.navigate_timeout_s,
        }
    }

    fn search(&self, tag_id: u32) -> FsmState {
        FsmState::SearchTag {
            tag_id,
            rotation_rate: self.params.search_rate,
            timeout: self.params.search_timeout_s,
        }
    }

    /// Navigate, find the object, approach it (way-points or demo), close
    /// the gripper, retract.
    pub fn pick_from(&self, loc: &str, object: &str) -> Result<SubFsm, AssemblyError> {
        let (l, spec) = self.location(loc)?;
        let &object_tag = self
            .site
            .objects
            .get(object)
            .ok_or_else(|| AssemblyError::UnknownObject(object.to_string()))?;
        let label = self.lookup("pick", l.as_str(), Some(object))?;
        let approach = match self.motion(&label)? {
            Motion::Waypoints(_) => {
                self.waypoints(
                    &label,
                    Bindings {
                        object: Some(object_tag),
                        location: Some(spec.tag_id),
                    },
                )?
                .1
            }
            Motion::Demo { demo, .. } => {
                if demo.header.tag_id != object_tag {
                    return Err(AssemblyError::DemoTagMismatch {
                        label,
                        object: object.to_string(),
                        demo_tag: demo.header.tag_id,
                        object_tag,
                    });
                }
                FsmState::DemoPlayback {
                    label: label.clone(),
                    side: demo.header.side,
                    tag_id: object_tag,
                }
            }
        };
        let side = self.motion(&label)?.side();
        let retract = self.waypoints(
            &format!("retract_{l}"),
            Bindings {
                object: None,
                location: Some(spec.tag_id),
            },
        )?;
        Ok(SubFsm::sequence(
            &Action::Pick {
                object: object.to_string(),
                location: l,
            }
            .to_string(),
            vec![
                (format!("navigate_{l}"), self.navigate(FrameRef::Tag(spec.tag_id), spec.approach_offset)),
                (format!("search_{object}"), self.search(object_tag)),
                (label, approach),
                (format!("close_{side}"), FsmState::Gripper {
                    side,
                    command: GripperCommand::Close,
                }),
                retract,
            ],
        ))
    }

    /// Navigate, find the location tag, move to the place pose, open,
    /// retract.
    pub fn place_at(&self, loc: &str) -> Result<SubFsm, AssemblyError> {
        let (l, spec) = self.location(loc)?;
        let bindings = Bindings {
            object: None,
            location: Some(spec.tag_id),
        };
        let place = self.waypoints(&self.lookup("place", l.as_str(), None)?, bindings.clone())?;
        let side = side_of(&place.1);
        let retract = self.waypoints(&format!("retract_{l}"), bindings)?;
        Ok(SubFsm::sequence(
            &Action::Place { location: l }.to_string(),
            vec![
                (format!("navigate_{l}"), self.navigate(FrameRef::Tag(spec.tag_id), spec.approach_offset)),
                (format!("search_{l}"), self.search(spec.tag_id)),
                place,
                (format!("open_{side}"), FsmState::Gripper {
                    side,
                    command: GripperCommand::Open,
                }),
                retract,
            ],
        ))
    }

    pub fn go_to(&self, loc: &str) -> Result<SubFsm, AssemblyError> {
        let (l, spec) = self.location(loc)?;
        Ok(SubFsm::sequence(
            &format!("go_to_{l}"),
            vec![(format!("navigate_{l}"), self.navigate(FrameRef::Tag(spec.tag_id), spec.approach_offset))],
        ))
    }

    /// Pick the closest attentive person, stand in front of them, extend
    /// the arm, open, retract.
    pub fn handover(&self) -> Result<SubFsm, AssemblyError> {
        let extend = self.waypoints("extend_human", Bindings::default())?;
        let side = side_of(&extend.1);
        let retract = self.waypoints("retract_human", Bindings::default())?;
        Ok(SubFsm::sequence(
            "handover",
            vec![
                ("select_human".into(), FsmState::SelectHuman {
                    rotation_rate: self.params.search_rate,
                    timeout: self.params.select_timeout_s,
                }),
                ("navigate_human".into(), self.navigate(FrameRef::Human, self.params.handover_offset)),
                extend,
                (format!("open_{side}"), FsmState::Gripper {
                    side,
                    command: GripperCommand::Open,
                }),
                retract,
            ],
        ))
    }

    /// Concatenates one sub-FSM per action. The arm that picks must be the
    /// arm that places or hands over.
    pub fn assemble(&self, plan: &Plan) -> Result<SubFsm, AssemblyError> {
        let mut fsm = SubFsm {
            name: String::new(),
            states: Vec::new(),
        };
        let mut held: Option<Side> = None;
        for action in &plan.actions {
            let sub = match action {
                Action::Pick { object, location } => {
                    let sub = self.pick_from(location.as_str(), object)?;
                    held = sub.states.iter().find_map(|s| match &s.state {
                        FsmState::Gripper {
                            side,
                            command: GripperCommand::Close,
                        } => Some(*side),
                        _ => None,
                    });
                    sub
                }
                Action::Place { .. } | Action::Handover => {
                    let sub = match action {
                        Action::Place { location } => self.place_at(location.as_str())?,
                        _ => self.handover()?,
                    };
                    let expected = held.ok_or_else(|| AssemblyError::NothingHeld(action.to_string()))?;
                    for s in &sub.states {
                        if let FsmState::Waypoints { label, side, .. } = &s.state {
                            if *side != expected {
                                return Err(AssemblyError::SideMismatch {
                                    label: label.clone(),
                                    expected,
                                    got: *side,
                                });
                            }
                        }
                    }
                    held = None;
                    sub
                }
            };
            fsm = fsm.then(sub);
        }
        Ok(fsm)
    }
}

fn side_of(state: &FsmState) -> Side {
    match state {
        FsmState::Waypoints { side, .. } | FsmState::DemoPlayback { side, .. } | FsmState::Gripper { side, .. } => {
            *side
        }
        _ => Side::Left,
    }
}
