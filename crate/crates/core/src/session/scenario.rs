//! Scripted sessions: timed commands and assertions, run headless as fast
//! as the machine allows.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Ack, Command, Session, SessionConfig, SessionError, StreamHasher};
use crate::orchestrator::Outcome;
use crate::types::{Location, Side};
use crate::wbc::Mode;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Predicate {
    /// Object within `tol` of the location's place pose.
    ObjectAt { label: String, loc: Location, tol: f64 },
    /// Object within `tol` of the selected human, horizontally.
    ObjectNearHuman { label: String, tol: f64 },
    ModeIs { mode: Mode },
    /// `null` means the plan is still running.
    FsmOutcome { outcome: Option<Outcome> },
    Holding { side: Side, object: Option<String> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Assertion {
    pub at_s: f64,
    pub predicate: Predicate,
}

/// Either `command` at `at_s`, or `assert`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioStep {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub at_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub command: Option<Command>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub assert: Option<Assertion>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub config: SessionConfig,
    pub steps: Vec<ScenarioStep>,
    /// Defaults to the last step time.
    #[serde(default)]
    pub end_s: Option<f64>,
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Scenario, String> {
        let s: Scenario = serde_json::from_str(text).map_err(|e| e.to_string())?;
        s.validate()?;
        Ok(s)
    }

    /// Loads a scenario; config paths are relative to its file.
    pub fn load(path: &Path) -> Result<Scenario, SessionError> {
        let err = |m: String| SessionError::Config {
            path: path.display().to_string(),
            message: m,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let mut s = Scenario::from_json(&text).map_err(err)?;
        s.config.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), String> {
        for (i, step) in self.steps.iter().enumerate() {
            match (&step.command, &step.assert, step.at_s) {
                (Some(_), None, Some(t)) if t >= 0.0 && t.is_finite() => {}
                (Some(_), None, _) => return Err(format!("step {i}: command needs a non-negative at_s")),
                (None, Some(a), None) if a.at_s >= 0.0 && a.at_s.is_finite() => {}
                (None, Some(_), Some(_)) => return Err(format!("step {i}: put at_s inside assert")),
                (None, Some(_), None) => return Err(format!("step {i}: assert needs a non-negative at_s")),
                _ => return Err(format!("step {i}: needs exactly one of command and assert")),
            }
        }
        self.config.validate()
    }

    fn step_time(step: &ScenarioStep) -> f64 {
        step.at_s.or(step.assert.as_ref().map(|a| a.at_s)).unwrap_or(0.0)
    }

    pub fn end_time(&self) -> f64 {
        self.end_s
            .unwrap_or_else(|| self.steps.iter().map(Self::step_time).fold(0.0, f64::max))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssertionResult {
    pub at_s: f64,
    pub predicate: Predicate,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub name: String,
    pub acks: Vec<(f64, Ack)>,
    pub assertions: Vec<AssertionResult>,
    pub end_time: f64,
    pub ticks: u64,
    pub snapshots: u64,
    /// Hash of the snapshot stream; equal across runs of the same scenario.
    pub stream_hash: String,
    pub passed: bool,
}

pub fn evaluate(session: &Session, predicate: &Predicate) -> (bool, String) {
    let world = session.world();
    let scene = session.scene();
    match predicate {
        Predicate::ObjectAt { label, loc, tol } => match world.object_pose(scene, label) {
            Some(p) => {
                let target = scene.location(*loc).place_pose();
                let d = (p.translation - target.translation).norm();
                (d <= *tol, format!("{label} is {d:.3} m from {loc}"))
            }
            None => (false, format!("no object {label}")),
        },
        Predicate::ObjectNearHuman { label, tol } => {
            let human = session
                .executor()
                .and_then(|e| e.selected_human())
                .and_then(|h| scene.human(&h.id));
            match (world.object_pose(scene, label), human) {
                (Some(p), Some(h)) => {
                    let d = (p.translation.x - h.position[0]).hypot(p.translation.y - h.position[1]);
                    (d <= *tol, format!("{label} is {d:.3} m from {}", h.id))
                }
                (None, _) => (false, format!("no object {label}")),
                (_, None) => (false, "no human selected".into()),
            }
        }
        Predicate::ModeIs { mode } => {
            let m = session.controller().mode;
            (m == *mode, format!("mode is {m:?}").to_lowercase())
        }
        Predicate::FsmOutcome { outcome } => {
            let got = session.executor().and_then(|e| e.report().outcome);
            (got == *outcome, format!("outcome is {got:?}").to_lowercase())
        }
        Predicate::Holding { side, object } => {
            let got = world.attachment(*side).map(|a| a.object.clone());
            (got == *object, format!("{side} holds {got:?}"))
        }
    }
}

/// Runs a scenario on `session` and reports assertions and the stream hash.
pub fn run_scenario(session: &mut Session, scenario: &Scenario) -> ScenarioReport {
    let mut steps: Vec<&ScenarioStep> = scenario.steps.iter().collect();
    // stable: equal times keep file order
    steps.sort_by(|a, b| Scenario::step_time(a).total_cmp(&Scenario::step_time(b)));
    let end = scenario.end_time();
    let eps = 0.5 * session.dt();
    let mut next = 0;
    let mut acks = Vec::new();
    let mut assertions = Vec::new();
    let mut hasher = StreamHasher::new();
    let mut id = 0;
    loop {
        let now = session.time();
        while next < steps.len() && Scenario::step_time(steps[next]) <= now + eps {
            let step = steps[next];
            if let Some(cmd) = &step.command {
                id += 1;
                acks.push((now, session.handle(0, id, cmd.clone())));
            }
            if let Some(a) = &step.assert {
                let (passed, detail) = evaluate(session, &a.predicate);
                assertions.push(AssertionResult {
                    at_s: a.at_s,
                    predicate: a.predicate.clone(),
                    passed,
                    detail,
                });
            }
            next += 1;
        }
        if now >= end - eps {
            break;
        }
        if let Some(s) = session.step() {
            hasher.update(&s);
        }
    }
    ScenarioReport {
        name: scenario.name.clone(),
        passed: assertions.iter().all(|a| a.passed),
        acks,
        assertions,
        end_time: session.time(),
        ticks: session.tick(),
        snapshots: hasher.count(),
        stream_hash: hasher.hex(),
    }
}
