//! Wire protocol v1: JSON text frames `{"v":1,"kind":...}` carrying a
//! command, an acknowledgement or a state snapshot.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::orchestrator::ExecutionReport;
use crate::plan::Plan;
use crate::sim::TagObservation;
use crate::spatial::{PlanarPose, Pose};
use crate::types::{GripperCommand, Side};
use crate::wbc::Mode;

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArmMode {
    /// `value` is a one-shot offset applied to the reference.
    PoseDelta,
    /// `value` is a velocity held until replaced or expired.
    Twist,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum Macro {
    Homing,
    StartRecord { task: String, side: Side },
    StopRecord,
    Mode { mode: Mode },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Command {
    /// `value` = (x, y, z, rx, ry, rz) in the base frame: meters and a
    /// rotation vector for `pose_delta`, m/s and rad/s for `twist`.
    TeleopArm { side: Side, mode: ArmMode, value: [f64; 6] },
    /// Body-frame base velocity.
    BaseTwist { vx: f64, vy: f64, omega: f64 },
    Gripper { side: Side, command: GripperCommand },
    Macro(Macro),
    Instruct { text: String },
    Preempt,
    /// Gives up command rights.
    Release,
}

impl Command {
    pub fn is_finite(&self) -> bool {
        match self {
            Command::TeleopArm { value, .. } => value.iter().all(|v| v.is_finite()),
            Command::BaseTwist { vx, vy, omega } => vx.is_finite() && vy.is_finite() && omega.is_finite(),
            _ => true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AckStatus {
    Accepted,
    Rejected,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ack {
    pub id: u64,
    pub status: AckStatus,
    /// Why a command was rejected, or what an accepted one did.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

impl Ack {
    pub fn accepted(id: u64) -> Ack {
        Ack {
            id,
            status: AckStatus::Accepted,
            reason: None,
        }
    }

    pub fn accepted_with(id: u64, detail: impl Into<String>) -> Ack {
        Ack {
            id,
            status: AckStatus::Accepted,
            reason: Some(detail.into()),
        }
    }

    pub fn rejected(id: u64, reason: impl Into<String>) -> Ack {
        Ack {
            id,
            status: AckStatus::Rejected,
            reason: Some(reason.into()),
        }
    }

    pub fn is_accepted(&self) -> bool {
        self.status == AckStatus::Accepted
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerSide<T> {
    pub left: T,
    pub right: T,
}

impl<T> PerSide<T> {
    pub fn get(&self, side: Side) -> &T {
        match side {
            Side::Left => &self.left,
            Side::Right => &self.right,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectState {
    pub label: String,
    pub pose: Pose,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FsmStatus {
    pub name: String,
    /// Name of the running state, if any.
    pub state: Option<String>,
    pub index: Option<usize>,
    pub report: ExecutionReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub kkt: f64,
    /// Wall-clock solve time; excluded from replay hashes.
    pub solve_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateSnapshot {
    pub tick: u64,
    pub time: f64,
    pub mode: Mode,
    pub base: PlanarPose,
    pub q: Vec<f64>,
    pub ee: PerSide<Pose>,
    /// Current arm task references.
    pub ee_targets: PerSide<Pose>,
    pub grippers: PerSide<GripperCommand>,
    pub attachments: PerSide<Option<String>>,
    pub objects: Vec<ObjectState>,
    pub fsm: Option<FsmStatus>,
    pub plan: Option<Plan>,
    /// Latest observation of every tag seen so far.
    pub observations: Vec<TagObservation>,
    pub selected_human: Option<String>,
    pub health: Health,
    /// Task label of the demo being recorded.
    pub recording: Option<String>,
    /// Recent session events, oldest first.
    pub events: Vec<String>,
    /// Client currently holding command rights.
    pub rights: Option<u64>,
}

impl StateSnapshot {
    /// SHA-256 of the canonical JSON form with wall-clock fields zeroed.
    pub fn replay_digest(&self) -> [u8; 32] {
        Sha256::digest(self.replay_json().as_bytes()).into()
    }

    fn replay_json(&self) -> String {
        let mut s = self.clone();
        s.health.solve_ms = 0.0;
        serde_json::to_string(&s).expect("snapshot serializes")
    }
}

/// Running hash over a snapshot stream.
#[derive(Clone, Default)]
pub struct StreamHasher {
    hasher: Sha256,
    count: u64,
}

impl StreamHasher {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn update(&mut self, snapshot: &StateSnapshot) {
        self.hasher.update(snapshot.replay_json().as_bytes());
        self.hasher.update(b"\n");
        self.count += 1;
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn hex(&self) -> String {
        let digest = self.hasher.clone().finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// One websocket text frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Frame {
    Command { id: u64, command: Command },
    Ack(Ack),
    Snapshot(Box<StateSnapshot>),
}

#[derive(Serialize)]
struct Versioned<'a> {
    v: u32,
    #[serde(flatten)]
    frame: &'a Frame,
}

impl Frame {
    pub fn to_json(&self) -> String {
        serde_json::to_string(&Versioned {
            v: PROTOCOL_VERSION,
            frame: self,
        })
        .expect("frame serializes")
    }

    /// Parses a frame, checking the protocol version.
    pub fn parse(text: &str) -> Result<Frame, String> {
        let mut value: serde_json::Value = serde_json::from_str(text).map_err(|e| format!("invalid JSON: {e}"))?;
        let obj = value.as_object_mut().ok_or("frame must be a JSON object")?;
        match obj.remove("v") {
            Some(v) if v.as_u64() == Some(PROTOCOL_VERSION as u64) => {}
            Some(v) => return Err(format!("unsupported protocol version {v}")),
            None => return Err("missing protocol version \"v\"".into()),
        }
        serde_json::from_value(value).map_err(|e| format!("invalid frame: {e}"))
    }
}
