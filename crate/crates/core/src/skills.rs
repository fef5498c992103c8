//! Taught and scripted arm motions.
//!
//! Demonstrations are recorded in the base frame together with the pose of
//! the target object's tag, stored relative to that tag, and replayed by
//! composing with wherever the tag is now. Way-point motions are offsets
//! from a symbolic frame resolved at run time. Both are stepwise
//! generators polled once per control tick.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::spatial::{interpolate, pose_error, Pose, Twist};
use crate::types::{GripperCommand, Side};

const DEFAULT_LIBRARY: &str = include_str!("../data/library.json");
const BUNDLED_DEMOS: &[(&str, &str)] = &[(
    "demos/pick_dishwasher_plate.jsonl",
    include_str!("../data/demos/pick_dishwasher_plate.jsonl"),
)];

#[derive(Debug, Error)]
pub enum SkillError {
    #[error("demo line {line}: {source}")]
    DemoJson { line: usize, source: serde_json::Error },
    #[error("motion library is not valid JSON: {0}")]
    LibraryJson(#[from] serde_json::Error),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("invalid demo: {0}")]
    InvalidDemo(String),
    #[error("invalid motion library:\n  {}", .0.join("\n  "))]
    InvalidLibrary(Vec<String>),
    #[error("target tag was never observed during recording")]
    TagNeverObserved,
    #[error("object pose is {age:.2} s old (limit {limit:.2} s)")]
    StaleObjectPose { age: f64, limit: f64 },
    #[error("frame '{0}' cannot be resolved")]
    FrameUnavailable(String),
    #[error("unknown motion label '{0}'")]
    UnknownLabel(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GripperAction {
    Open,
    Close,
    Hold,
}

impl GripperAction {
    pub fn command(self) -> Option<GripperCommand> {
        match self {
            GripperAction::Open => Some(GripperCommand::Open),
            GripperAction::Close => Some(GripperCommand::Close),
            GripperAction::Hold => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemoHeader {
    pub task: String,
    pub side: Side,
    pub tag_id: u32,
    pub rate_hz: f64,
    /// Object tag pose in the base frame when recording started.
    pub object_pose: Pose,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemoSample {
    pub t: f64,
    pub pose: Pose,
    pub gripper: GripperAction,
}

/// Recorded trajectory, end-effector poses in the base frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Demonstration {
    pub header: DemoHeader,
    pub samples: Vec<DemoSample>,
}

/// The same trajectory with end-effector poses in the object tag frame.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectCentricDemo {
    pub header: DemoHeader,
    pub samples: Vec<DemoSample>,
}

fn check_samples(header: &DemoHeader, samples: &[DemoSample]) -> Result<(), SkillError> {
    if !(header.rate_hz > 0.0 && header.rate_hz.is_finite()) {
        return Err(SkillError::InvalidDemo(format!("rate_hz must be positive, got {}", header.rate_hz)));
    }
    if samples.len() < 2 {
        return Err(SkillError::InvalidDemo(format!("need at least 2 samples, got {}", samples.len())));
    }
    for (k, w) in samples.windows(2).enumerate() {
        if !(w[1].t > w[0].t) {
            return Err(SkillError::InvalidDemo(format!(
                "sample {} at t={} does not follow t={}",
                k + 1,
                w[1].t,
                w[0].t
            )));
        }
    }
    if samples.iter().any(|s| !s.t.is_finite() || !s.pose.is_finite()) {
        return Err(SkillError::InvalidDemo("non-finite sample".into()));
    }
    Ok(())
}

impl Demonstration {
    pub fn new(header: DemoHeader, samples: Vec<DemoSample>) -> Result<Self, SkillError> {
        check_samples(&header, &samples)?;
        Ok(Self { header, samples })
    }

    pub fn duration(&self) -> f64 {
        self.samples.last().unwrap().t - self.samples[0].t
    }
}

/// Re-expresses every sample in the object tag frame.
pub fn to_object_frame(demo: &Demonstration) -> ObjectCentricDemo {
    let inv = demo.header.object_pose.inverse();
    ObjectCentricDemo {
        header: demo.header.clone(),
        samples: demo
            .samples
            .iter()
            .map(|s| DemoSample {
                pose: inv.compose(&s.pose),
                ..*s
            })
            .collect(),
    }
}

/// Maps an object-centric demo back to the base frame for an object at
/// `object_pose`.
pub fn from_object_frame(demo: &ObjectCentricDemo, object_pose: &Pose) -> Demonstration {
    let mut header = demo.header.clone();
    header.object_pose = *object_pose;
    Demonstration {
        header,
        samples: demo
            .samples
            .iter()
            .map(|s| DemoSample {
                pose: object_pose.compose(&s.pose),
                ..*s
            })
            .collect(),
    }
}

impl ObjectCentricDemo {
    pub fn new(header: DemoHeader, samples: Vec<DemoSample>) -> Result<Self, SkillError> {
        check_samples(&header, &samples)?;
        Ok(Self { header, samples })
    }

    /// JSON-lines: one header line, then one line per sample.
    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&self.header).expect("header serializes");
        out.push('\n');
        for s in &self.samples {
            out.push_str(&serde_json::to_string(s).expect("sample serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, SkillError> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines
            .next()
            .ok_or_else(|| SkillError::InvalidDemo("empty demo file".into()))?;
        let header: DemoHeader =
            serde_json::from_str(first).map_err(|source| SkillError::DemoJson { line: 1, source })?;
        let samples = lines
            .map(|(i, l)| serde_json::from_str(l).map_err(|source| SkillError::DemoJson { line: i + 1, source }))
            .collect::<Result<Vec<DemoSample>, _>>()?;
        Self::new(header, samples)
    }

    pub fn load(path: &Path) -> Result<Self, SkillError> {
        let text = std::fs::read_to_string(path).map_err(|source| SkillError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_jsonl(&text)
    }

    pub fn save(&self, path: &Path) -> Result<(), SkillError> {
        std::fs::write(path, self.to_jsonl()).map_err(|source| SkillError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn duration(&self) -> f64 {
        self.samples.last().unwrap().t - self.samples[0].t
    }

    /// Object-frame pose at demo time `t` (clamped to the recording),
    /// interpolated between neighbouring samples.
    pub fn pose_at(&self, t: f64) -> Pose {
        let s = &self.samples;
        if t <= s[0].t {
            return s[0].pose;
        }
        let last = s.len() - 1;
        if t >= s[last].t {
            return s[last].pose;
        }
        let k = s.partition_point(|x| x.t <= t) - 1;
        let u = (t - s[k].t) / (s[k + 1].t - s[k].t);
        interpolate(&s[k].pose, &s[k + 1].pose, u.clamp(0.0, 1.0)).expect("u clamped")
    }
}

/// Samples a teleoperated session at a fixed rate.
#[derive(Clone, Debug)]
pub struct DemoRecorder {
    task: String,
    side: Side,
    tag_id: u32,
    rate_hz: f64,
    object_pose: Option<Pose>,
    samples: Vec<DemoSample>,
    next_t: Option<f64>,
}

impl DemoRecorder {
    pub const DEFAULT_RATE_HZ: f64 = 50.0;

    pub fn new(task: &str, side: Side, tag_id: u32, rate_hz: f64) -> Self {
        assert!(rate_hz > 0.0, "recording rate must be positive");
        Self {
            task: task.to_string(),
            side,
            tag_id,
            rate_hz,
            object_pose: None,
            samples: Vec::new(),
            next_t: None,
        }
    }

    pub fn tag_id(&self) -> u32 {
        self.tag_id
    }

    pub fn side(&self) -> Side {
        self.side
    }

    pub fn sample_count(&self) -> usize {
        self.samples.len()
    }

    /// Feeds one controller tick. `tag_in_base` is the target tag pose in
    /// the base frame if it was observed this tick; the first one seen
    /// becomes the reference object pose. Sample times are rebased to zero
    /// when the recording finishes.
    pub fn feed(&mut self, t: f64, ee_in_base: &Pose, gripper: GripperAction, tag_in_base: Option<&Pose>) {
        if self.object_pose.is_none() {
            self.object_pose = tag_in_base.copied();
        }
        let next = *self.next_t.get_or_insert(t);
        // half a tick of slack so a 250 Hz stream lands on every 5th tick
        if t + 1e-9 >= next {
            self.samples.push(DemoSample {
                t,
                pose: *ee_in_base,
                gripper,
            });
            let period = 1.0 / self.rate_hz;
            self.next_t = Some(next + period * ((t - next) / period + 1.0).floor().max(1.0));
        } else if gripper != GripperAction::Hold {
            // keep gripper events even between samples
            if let Some(last) = self.samples.last_mut() {
                last.gripper = gripper;
            }
        }
    }

    pub fn finish(self) -> Result<Demonstration, SkillError> {
        let object_pose = self.object_pose.ok_or(SkillError::TagNeverObserved)?;
        let t0 = self.samples.first().map_or(0.0, |s| s.t);
        let samples = self.samples.into_iter().map(|s| DemoSample { t: s.t - t0, ..s }).collect();
        Demonstration::new(
            DemoHeader {
                task: self.task,
                side: self.side,
                tag_id: self.tag_id,
                rate_hz: self.rate_hz,
                object_pose,
            },
            samples,
        )
    }
}

/// One tick of a motion generator.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionStep {
    pub reference: Pose,
    pub feedforward: Twist,
    pub gripper: Vec<GripperCommand>,
    pub status: MotionStatus,
}

#[derive(Clone, Debug, PartialEq)]
pub enum MotionStatus {
    Running,
    Succeeded,
    Failed(String),
}

impl MotionStatus {
    pub fn is_done(&self) -> bool {
        !matches!(self, MotionStatus::Running)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlaybackOptions {
    pub speed_scale: f64,
    pub staleness_s: f64,
    /// Abort when the end effector is further than this from the reference.
    pub abort_threshold_m: f64,
    pub success_tolerance_m: f64,
    pub settle_timeout_s: f64,
    /// Speed of the interpolated move to the first sample.
    pub lead_in_speed: f64,
}

impl Default for PlaybackOptions {
    fn default() -> Self {
        Self {
            speed_scale: 1.0,
            staleness_s: 1.0,
            abort_threshold_m: 0.1,
            success_tolerance_m: 0.01,
            settle_timeout_s: 3.0,
            lead_in_speed: 0.15,
        }
    }
}

/// Replays an object-centric demo for the object at `object_pose`.
///
/// References are `object_pose ∘ demo(t)`; whichever frame `object_pose`
/// is given in is the frame of the emitted references.
#[derive(Clone, Debug)]
pub struct Playback {
    demo: ObjectCentricDemo,
    object_pose: Pose,
    options: PlaybackOptions,
    start: f64,
    lead_in: Option<(Pose, f64)>,
    // demo time of the last dispatched tick
    last_demo_t: Option<f64>,
    finished_at: Option<f64>,
    fired: Option<GripperCommand>,
}

impl Playback {
    /// `object_stamp` is when the object pose was observed; `ee_now` the
    /// current end-effector pose in the same frame as `object_pose`.
    pub fn new(
        demo: ObjectCentricDemo,
        object_pose: Pose,
        object_stamp: f64,
        now: f64,
        ee_now: &Pose,
        options: PlaybackOptions,
    ) -> Result<Playback, SkillError> {
        let age = now - object_stamp;
        if !(age <= options.staleness_s) {
            return Err(SkillError::StaleObjectPose {
                age,
                limit: options.staleness_s,
            });
        }
        assert!(options.speed_scale > 0.0, "speed scale must be positive");
        let first = object_pose.compose(&demo.samples[0].pose);
        let gap = (first.translation - ee_now.translation).norm();
        let lead_in = (gap > options.success_tolerance_m).then(|| (*ee_now, (gap / options.lead_in_speed).max(0.5)));
        Ok(Playback {
            demo,
            object_pose,
            options,
            start: now,
            lead_in,
            last_demo_t: None,
            finished_at: None,
            fired: None,
        })
    }

    /// Reference at demo time `t`.
    pub fn reference_at(&self, t: f64) -> Pose {
        self.object_pose.compose(&self.demo.pose_at(t))
    }

    /// Dispatch time (relative to playback start, excluding the lead-in)
    /// and reference of every recorded sample.
    pub fn schedule(&self) -> Vec<(f64, Pose)> {
        let t0 = self.demo.samples[0].t;
        self.demo
            .samples
            .iter()
            .map(|s| ((s.t - t0) / self.options.speed_scale, self.object_pose.compose(&s.pose)))
            .collect()
    }

    /// Gripper events with their dispatch times, same clock as `schedule`.
    pub fn gripper_schedule(&self) -> Vec<(f64, GripperCommand)> {
        let t0 = self.demo.samples[0].t;
        let mut last = None;
        let mut out = Vec::new();
        for s in &self.demo.samples {
            if let Some(c) = s.gripper.command() {
                if last != Some(c) {
                    out.push(((s.t - t0) / self.options.speed_scale, c));
                    last = Some(c);
                }
            }
        }
        out
    }

    pub fn poll(&mut self, now: f64, ee_now: &Pose) -> MotionStep {
        let elapsed = now - self.start;
        if let Some((from, duration)) = self.lead_in {
            if elapsed < duration {
                let to = self.reference_at(self.demo.samples[0].t);
                let (reference, feedforward) = smooth_segment(&from, &to, elapsed, duration);
                return self.checked(reference, feedforward, Vec::new(), ee_now);
            }
        }
        let lead = self.lead_in.map_or(0.0, |(_, d)| d);
        let t0 = self.demo.samples[0].t;
        let t_end = self.demo.samples.last().unwrap().t;
        let demo_t = (t0 + (elapsed - lead) * self.options.speed_scale).min(t_end);

        let mut gripper = Vec::new();
        for s in &self.demo.samples {
            let due = s.t <= demo_t && self.last_demo_t.is_none_or(|p| s.t > p);
            if due {
                if let Some(c) = s.gripper.command() {
                    if self.fired != Some(c) {
                        gripper.push(c);
                        self.fired = Some(c);
                    }
                }
            }
        }
        self.last_demo_t = Some(demo_t);

        let reference = self.reference_at(demo_t);
        let feedforward = if demo_t < t_end {
            let h = 1e-3;
            let ahead = self.reference_at((demo_t + h).min(t_end));
            let dt = ((demo_t + h).min(t_end) - demo_t) / self.options.speed_scale;
            crate::spatial::twist_between(&reference, &ahead, dt)
        } else {
            Twist::zero()
        };

        let mut step = self.checked(reference, feedforward, gripper, ee_now);
        if step.status == MotionStatus::Running && demo_t >= t_end {
            let finished = *self.finished_at.get_or_insert(now);
            let err = (reference.translation - ee_now.translation).norm();
            if err <= self.options.success_tolerance_m {
                step.status = MotionStatus::Succeeded;
            } else if now - finished > self.options.settle_timeout_s {
                step.status = MotionStatus::Failed(format!("did not settle: {err:.3} m from the final sample"));
            }
        }
        step
    }

    fn checked(&self, reference: Pose, feedforward: Twist, gripper: Vec<GripperCommand>, ee_now: &Pose) -> MotionStep {
        let err = (reference.translation - ee_now.translation).norm();
        let status = if err > self.options.abort_threshold_m {
            MotionStatus::Failed(format!(
                "tracking error {err:.3} m exceeds {:.3} m",
                self.options.abort_threshold_m
            ))
        } else {
            MotionStatus::Running
        };
        MotionStep {
            reference,
            feedforward,
            gripper,
            status,
        }
    }
}

/// Smoothstep interpolation from `from` to `to` with its analytic
/// velocity.
fn smooth_segment(from: &Pose, to: &Pose, t: f64, duration: f64) -> (Pose, Twist) {
    let tau = (t / duration).clamp(0.0, 1.0);
    let s = tau * tau * (3.0 - 2.0 * tau);
    let ds = 6.0 * tau * (1.0 - tau) / duration;
    let pose = interpolate(from, to, s).expect("s in [0, 1]");
    let full = crate::spatial::twist_between(from, to, 1.0);
    let ff = Twist::new(full.linear * ds, full.angular * ds);
    (pose, ff)
}

/// Symbolic frame a way-point spec is expressed in.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum FrameRef {
    /// Tag of the object being manipulated.
    Object,
    /// Tag of the current location.
    Location,
    /// The selected handover target.
    Human,
    BaseLink,
    Tag(u32),
}

impl fmt::Display for FrameRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FrameRef::Object => f.write_str("object"),
            FrameRef::Location => f.write_str("location"),
            FrameRef::Human => f.write_str("human"),
            FrameRef::BaseLink => f.write_str("base_link"),
            FrameRef::Tag(id) => write!(f, "tag:{id}"),
        }
    }
}

impl std::str::FromStr for FrameRef {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "object" => FrameRef::Object,
            "location" => FrameRef::Location,
            "human" => FrameRef::Human,
            "base_link" => FrameRef::BaseLink,
            other => match other.strip_prefix("tag:").and_then(|n| n.parse().ok()) {
                Some(id) => FrameRef::Tag(id),
                None => return Err(format!("unknown frame reference '{other}'")),
            },
        })
    }
}

impl Serialize for FrameRef {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for FrameRef {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Waypoint {
    pub offset: Pose,
    pub duration: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WaypointSpec {
    pub side: Side,
    pub frame: FrameRef,
    pub waypoints: Vec<Waypoint>,
    /// Gripper commands fired when the indexed way-point completes.
    #[serde(default)]
    pub gripper: BTreeMap<usize, GripperCommand>,
}

impl WaypointSpec {
    pub fn validate(&self) -> Result<(), String> {
        if self.waypoints.is_empty() {
            return Err("no way-points".into());
        }
        for (i, w) in self.waypoints.iter().enumerate() {
            if !(w.duration > 0.0 && w.duration.is_finite()) {
                return Err(format!("way-point {i}: duration must be positive"));
            }
        }
        if let Some(&k) = self.gripper.keys().find(|&&k| k >= self.waypoints.len()) {
            return Err(format!("gripper action at way-point {k} which does not exist"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WaypointOptions {
    pub tolerance_m: f64,
    pub tolerance_rad: f64,
    pub settle_timeout_s: f64,
}

impl Default for WaypointOptions {
    fn default() -> Self {
        Self {
            tolerance_m: 0.01,
            tolerance_rad: 0.05,
            settle_timeout_s: 3.0,
        }
    }
}

/// Streams a way-point spec. The frame is resolved at the start of each
/// way-point.
#[derive(Clone, Debug)]
pub struct WaypointRun {
    spec: WaypointSpec,
    options: WaypointOptions,
    index: usize,
    segment: Option<Segment>,
    // end of the last completed segment
    last_target: Option<Pose>,
    settle_started: Option<f64>,
}

#[derive(Clone, Debug)]
struct Segment {
    from: Pose,
    to: Pose,
    start: f64,
    duration: f64,
}

impl WaypointRun {
    pub fn new(spec: WaypointSpec, options: WaypointOptions) -> Self {
        Self {
            spec,
            options,
            index: 0,
            segment: None,
            last_target: None,
            settle_started: None,
        }
    }

    pub fn spec(&self) -> &WaypointSpec {
        &self.spec
    }

    /// `resolve` gives the current pose of the spec's frame, in the same
    /// frame as `ee_now`.
    pub fn poll(&mut self, now: f64, ee_now: &Pose, resolve: &dyn Fn(&FrameRef) -> Option<Pose>) -> MotionStep {
        let mut gripper = Vec::new();
        while self.index < self.spec.waypoints.len() {
            if self.segment.is_none() {
                let Some(frame) = resolve(&self.spec.frame) else {
                    return MotionStep {
                        reference: self.last_target.unwrap_or(*ee_now),
                        feedforward: Twist::zero(),
                        gripper,
                        status: MotionStatus::Failed(format!("frame '{}' cannot be resolved", self.spec.frame)),
                    };
                };
                let wp = &self.spec.waypoints[self.index];
                let from = self.last_target.unwrap_or(*ee_now);
                let to = frame.compose(&wp.offset);
                // already there: skip the motion
                let duration = if self.close(&from, &to) { 0.0 } else { wp.duration };
                self.segment = Some(Segment {
                    from,
                    to,
                    start: now,
                    duration,
                });
            }
            let seg = self.segment.as_ref().expect("segment set above");
            let t = now - seg.start;
            if t < seg.duration {
                let (reference, feedforward) = smooth_segment(&seg.from, &seg.to, t, seg.duration);
                return MotionStep {
                    reference,
                    feedforward,
                    gripper,
                    status: MotionStatus::Running,
                };
            }
            if let Some(&c) = self.spec.gripper.get(&self.index) {
                gripper.push(c);
            }
            self.last_target = Some(seg.to);
            self.segment = None;
            self.index += 1;
        }
        self.settle(now, ee_now, gripper)
    }

    fn close(&self, a: &Pose, b: &Pose) -> bool {
        let e = pose_error(a, b);
        e.fixed_rows::<3>(0).norm() <= self.options.tolerance_m && e.fixed_rows::<3>(3).norm() <= self.options.tolerance_rad
    }

    fn settle(&mut self, now: f64, ee_now: &Pose, gripper: Vec<GripperCommand>) -> MotionStep {
        let target = self.last_target.unwrap_or(*ee_now);
        let started = *self.settle_started.get_or_insert(now);
        let status = if self.close(ee_now, &target) {
            MotionStatus::Succeeded
        } else if now - started > self.options.settle_timeout_s {
            let e = (target.translation - ee_now.translation).norm();
            MotionStatus::Failed(format!("did not settle: {e:.3} m from the last way-point"))
        } else {
            MotionStatus::Running
        };
        MotionStep {
            reference: target,
            feedforward: Twist::zero(),
            gripper,
            status,
        }
    }
}

/// Location tokens allowed in motion labels.
const LABEL_LOCATIONS: &[&str] = &["table", "dishwasher", "cabinet", "human"];

#[derive(Clone, Debug, PartialEq)]
pub enum Motion {
    Waypoints(WaypointSpec),
    Demo { file: String, demo: ObjectCentricDemo },
}

impl Motion {
    pub fn side(&self) -> Side {
        match self {
            Motion::Waypoints(w) => w.side,
            Motion::Demo { demo, .. } => demo.header.side,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MotionDoc {
    label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    waypoints: Option<WaypointSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    demo: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LibraryDoc {
    motions: Vec<MotionDoc>,
}

/// Labelled motions, `<action>_<loc>[_<object>]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionLibrary {
    motions: BTreeMap<String, Motion>,
}

/// Checks the `<action>_<loc>[_<object>]` label pattern.
pub fn check_label(label: &str) -> Result<(), String> {
    let parts: Vec<&str> = label.split('_').collect();
    let word = |p: &str| !p.is_empty() && p.chars().all(|c| c.is_ascii_lowercase());
    if !(2..=3).contains(&parts.len()) || !parts.iter().all(|p| word(p)) {
        return Err(format!("label '{label}' does not match <action>_<loc>[_<object>]"));
    }
    if !LABEL_LOCATIONS.contains(&parts[1]) {
        return Err(format!("label '{label}': unknown location '{}'", parts[1]));
    }
    Ok(())
}

impl MotionLibrary {
    /// The bundled library with its demo files.
    pub fn default_library() -> MotionLibrary {
        let load = |file: &str| {
            BUNDLED_DEMOS
                .iter()
                .find(|(name, _)| *name == file)
                .map(|(_, text)| text.to_string())
                .ok_or_else(|| SkillError::Io {
                    path: file.to_string(),
                    source: std::io::Error::new(std::io::ErrorKind::NotFound, "not bundled"),
                })
        };
        Self::from_json(DEFAULT_LIBRARY, &load).expect("bundled library is valid")
    }

    /// Loads a library file; demo paths are relative to its directory.
    pub fn load(path: &Path) -> Result<MotionLibrary, SkillError> {
        let text = std::fs::read_to_string(path).map_err(|source| SkillError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let load = move |file: &str| {
            let p = dir.join(file);
            std::fs::read_to_string(&p).map_err(|source| SkillError::Io {
                path: p.display().to_string(),
                source,
            })
        };
        Self::from_json(&text, &load)
    }

    /// Parses a library document. Every demo file is read through
    /// `read_demo` and validated now, not at first use.
    pub fn from_json(text: &str, read_demo: &dyn Fn(&str) -> Result<String, SkillError>) -> Result<MotionLibrary, SkillError> {
        let doc: LibraryDoc = serde_json::from_str(text)?;
        let mut errors = Vec::new();
        let mut motions = BTreeMap::new();
        let mut files = HashSet::new();
        for m in doc.motions {
            if let Err(e) = check_label(&m.label) {
                errors.push(e);
            }
            if motions.contains_key(&m.label) {
                errors.push(format!("duplicate label '{}'", m.label));
                continue;
            }
            let motion = match (m.waypoints, m.demo) {
                (Some(w), None) => match w.validate() {
                    Ok(()) => Motion::Waypoints(w),
                    Err(e) => {
                        errors.push(format!("{}: {e}", m.label));
                        continue;
                    }
                },
                (None, Some(file)) => {
                    if !files.insert(file.clone()) {
                        errors.push(format!("{}: demo file '{file}' already used by another label", m.label));
                        continue;
                    }
                    match read_demo(&file).and_then(|t| ObjectCentricDemo::from_jsonl(&t)) {
                        Ok(demo) => Motion::Demo { file, demo },
                        Err(e) => {
                            errors.push(format!("{}: {e}", m.label));
                            continue;
                        }
                    }
                }
                _ => {
                    errors.push(format!("{}: needs exactly one of 'waypoints' or 'demo'", m.label));
                    continue;
                }
            };
            motions.insert(m.label, motion);
        }
        if errors.is_empty() {
            Ok(MotionLibrary { motions })
        } else {
            Err(SkillError::InvalidLibrary(errors))
        }
    }

    pub fn to_json(&self) -> String {
        let doc = LibraryDoc {
            motions: self
                .motions
                .iter()
                .map(|(label, m)| match m {
                    Motion::Waypoints(w) => MotionDoc {
                        label: label.clone(),
                        waypoints: Some(w.clone()),
                        demo: None,
                    },
                    Motion::Demo { file, .. } => MotionDoc {
                        label: label.clone(),
                        waypoints: None,
                        demo: Some(file.clone()),
                    },
                })
                .collect(),
        };
        serde_json::to_string_pretty(&doc).expect("library serializes")
    }

    /// Adds a motion, replacing any with the same label.
    pub fn insert(&mut self, label: &str, motion: Motion) -> Result<(), String> {
        check_label(label)?;
        self.motions.insert(label.to_string(), motion);
        Ok(())
    }

    pub fn get(&self, label: &str) -> Option<&Motion> {
        self.motions.get(label)
    }

    pub fn require(&self, label: &str) -> Result<&Motion, SkillError> {
        self.get(label).ok_or_else(|| SkillError::UnknownLabel(label.to_string()))
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.motions.keys().map(String::as_str)
    }

    /// Most specific label present: `<action>_<loc>_<object>`, then
    /// `<action>_<loc>`.
    pub fn lookup(&self, action: &str, loc: &str, object: Option<&str>) -> Result<String, SkillError> {
        if let Some(o) = object {
            let specific = format!("{action}_{loc}_{o}");
            if self.motions.contains_key(&specific) {
                return Ok(specific);
            }
        }
        let general = format!("{action}_{loc}");
        if self.motions.contains_key(&general) {
            Ok(general)
        } else {
            Err(SkillError::UnknownLabel(general))
        }
    }
}
