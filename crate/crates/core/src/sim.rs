//! Kinematic world: ground-truth robot, tagged objects and furniture,
//! grasp attachment, camera tag observations, humans and obstacle discs.
//!
//! Nothing here is physical. Actuation is perfect unless a first-order lag
//! is configured, released objects stay where they were let go, and tag
//! observations are geometric (field-of-view cone plus range) with optional
//! Gaussian noise from a seeded generator.

use std::collections::{BTreeMap, HashSet};

use nalgebra::{DVector, Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{CameraSpec, Configuration, KinematicModel, ModelError};
use crate::spatial::{PlanarPose, Pose, Quaternion};
use crate::types::{GripperCommand, Location, Side};

const DEFAULT_SCENE: &str = include_str!("../data/scene.json");

/// Fraction of a human's height taken as the chest point for visibility.
const CHEST_RATIO: f64 = 0.75;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("scene document is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid scene:\n  {}", .0.join("\n  "))]
    Invalid(Vec<String>),
    #[error("unknown camera '{0}'")]
    UnknownCamera(String),
    #[error("unknown object '{0}'")]
    UnknownObject(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneObject {
    pub label: String,
    pub tag_id: u32,
    pub pose: Pose,
    pub graspable_radius: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocationSpec {
    pub tag_id: u32,
    pub pose: Pose,
    /// Where the base should stand, relative to the tag.
    pub approach_offset: Pose,
    /// Where placed objects should end up, relative to the tag.
    pub place_offset: Pose,
}

impl LocationSpec {
    pub fn place_pose(&self) -> Pose {
        self.pose.compose(&self.place_offset)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HumanAgent {
    pub id: String,
    pub position: [f64; 2],
    /// World-frame heading of the head.
    pub head_yaw: f64,
    pub height: f64,
}

impl HumanAgent {
    /// Ground-plane frame at the human, x along the head direction.
    pub fn pose(&self) -> Pose {
        PlanarPose::new(self.position[0], self.position[1], self.head_yaw).to_pose()
    }

    pub fn chest(&self) -> Vector3<f64> {
        Vector3::new(self.position[0], self.position[1], CHEST_RATIO * self.height)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Obstacle {
    pub center: [f64; 2],
    pub radius: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub position_sigma: f64,
    pub rotation_sigma_deg: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            position_sigma: 0.002,
            rotation_sigma_deg: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LidarConfig {
    pub base_radius: f64,
    pub margin: f64,
    pub lookahead_min: f64,
    /// Seconds of travel at the commanded speed added to the corridor.
    pub lookahead_time: f64,
}

impl Default for LidarConfig {
    fn default() -> Self {
        Self {
            base_radius: 0.3,
            margin: 0.1,
            lookahead_min: 0.2,
            lookahead_time: 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scene {
    pub objects: Vec<SceneObject>,
    pub locations: BTreeMap<Location, LocationSpec>,
    #[serde(default)]
    pub humans: Vec<HumanAgent>,
    #[serde(default)]
    pub obstacles: Vec<Obstacle>,
    #[serde(default)]
    pub noise: NoiseConfig,
    #[serde(default)]
    pub lidar: LidarConfig,
    #[serde(default = "default_attention")]
    pub attention_threshold_deg: f64,
    /// Time constant of the optional per-joint actuation lag.
    #[serde(default)]
    pub actuation_lag_s: Option<f64>,
    #[serde(default)]
    pub start: PlanarPose,
    #[serde(default)]
    pub seed: u64,
}

fn default_attention() -> f64 {
    30.0
}

impl Scene {
    pub fn default_scene() -> Scene {
        Self::from_json(DEFAULT_SCENE).expect("bundled scene is valid")
    }

    pub fn from_json(text: &str) -> Result<Scene, SimError> {
        let scene: Scene = serde_json::from_str(text)?;
        scene.validate()?;
        Ok(scene)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scene serializes")
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let mut errors = Vec::new();
        let mut tags = HashSet::new();
        let mut labels = HashSet::new();
        for o in &self.objects {
            if !tags.insert(o.tag_id) {
                errors.push(format!("duplicate tag id {}", o.tag_id));
            }
            if !labels.insert(o.label.as_str()) {
                errors.push(format!("duplicate object label '{}'", o.label));
            }
            if !(o.graspable_radius > 0.0) {
                errors.push(format!("object '{}': graspable_radius must be positive", o.label));
            }
        }
        for loc in Location::ALL {
            match self.locations.get(&loc) {
                Some(spec) => {
                    if !tags.insert(spec.tag_id) {
                        errors.push(format!("duplicate tag id {}", spec.tag_id));
                    }
                }
                None => errors.push(format!("missing location '{loc}'")),
            }
        }
        let mut ids = HashSet::new();
        for h in &self.humans {
            if !ids.insert(h.id.as_str()) {
                errors.push(format!("duplicate human id '{}'", h.id));
            }
            let finite = h.position.iter().all(|v| v.is_finite()) && h.head_yaw.is_finite() && h.height.is_finite();
            if !finite || h.height <= 0.0 {
                errors.push(format!("human '{}': fields must be finite with positive height", h.id));
            }
        }
        for (i, o) in self.obstacles.iter().enumerate() {
            if !(o.radius > 0.0) {
                errors.push(format!("obstacle {i}: radius must be positive"));
            }
        }
        if self.noise.position_sigma < 0.0 || self.noise.rotation_sigma_deg < 0.0 {
            errors.push("noise sigmas must be >= 0".into());
        }
        if !(self.attention_threshold_deg >= 0.0) {
            errors.push("attention_threshold_deg must be >= 0".into());
        }
        if let Some(tau) = self.actuation_lag_s {
            if !(tau > 0.0) {
                errors.push("actuation_lag_s must be positive".into());
            }
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(SimError::Invalid(errors))
        }
    }

    pub fn object_index(&self, label: &str) -> Option<usize> {
        self.objects.iter().position(|o| o.label == label)
    }

    pub fn object_by_tag(&self, tag_id: u32) -> Option<usize> {
        self.objects.iter().position(|o| o.tag_id == tag_id)
    }

    pub fn location(&self, loc: Location) -> &LocationSpec {
        &self.locations[&loc]
    }

    pub fn human(&self, id: &str) -> Option<&HumanAgent> {
        self.humans.iter().find(|h| h.id == id)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Attachment {
    pub object: String,
    /// Object pose in the gripper frame.
    pub grasp: Pose,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TagObservation {
    pub tag_id: u32,
    /// Tag pose in the camera frame.
    pub pose: Pose,
    pub camera: String,
    pub stamp: f64,
    pub sigma_pos: f64,
    pub sigma_rot: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HandoverTarget {
    pub id: String,
    pub pose: Pose,
    pub distance: f64,
    /// Height of the chest point above the ground.
    pub chest_height: f64,
}

impl HandoverTarget {
    /// The chest point, x along the head direction.
    pub fn chest_frame(&self) -> Pose {
        let mut p = self.pose;
        p.translation.z = self.chest_height;
        p
    }
}

#[derive(Clone, Debug)]
pub struct WorldState {
    pub config: Configuration,
    /// World poses, aligned with `Scene::objects`.
    pub objects: Vec<Pose>,
    pub attachments: [Option<Attachment>; 2],
    pub grippers: [GripperCommand; 2],
    pub time: f64,
    actual_velocity: DVector<f64>,
    rng: ChaCha8Rng,
}

impl WorldState {
    pub fn new(scene: &Scene, config: Configuration) -> WorldState {
        let nv = config.q.len() + crate::model::BASE_DOF;
        WorldState {
            config,
            objects: scene.objects.iter().map(|o| o.pose).collect(),
            attachments: [None, None],
            grippers: [GripperCommand::Open; 2],
            time: 0.0,
            actual_velocity: DVector::zeros(nv),
            rng: ChaCha8Rng::seed_from_u64(scene.seed),
        }
    }

    pub fn object_pose(&self, scene: &Scene, label: &str) -> Option<Pose> {
        scene.object_index(label).map(|i| self.objects[i])
    }

    pub fn attachment(&self, side: Side) -> Option<&Attachment> {
        self.attachments[side.index()].as_ref()
    }

    /// Advances the ground truth by one step of the commanded velocity.
    pub fn step(&mut self, scene: &Scene, model: &KinematicModel, velocity: &DVector<f64>, dt: f64) {
        assert!(dt > 0.0, "dt must be positive");
        let applied = match scene.actuation_lag_s {
            None => velocity.clone(),
            Some(tau) => {
                let a = (dt / tau).min(1.0);
                self.actual_velocity += (velocity - &self.actual_velocity) * a;
                self.actual_velocity.clone()
            }
        };
        self.config = self.config.integrate(model, &applied, dt);
        self.time += dt;
        self.update_attached(scene, model);
    }

    fn update_attached(&mut self, scene: &Scene, model: &KinematicModel) {
        if self.attachments.iter().all(Option::is_none) {
            return;
        }
        let fk = model.evaluate(&self.config);
        for side in Side::BOTH {
            if let Some(att) = &self.attachments[side.index()] {
                let ee = fk.frame(side.ee_frame()).expect("model has both end effectors");
                let i = scene.object_index(&att.object).expect("attached object exists");
                self.objects[i] = ee.compose(&att.grasp);
            }
        }
    }

    /// World poses of every tag: objects first, then locations.
    pub fn tag_poses(&self, scene: &Scene) -> Vec<(u32, Pose)> {
        let objects = scene.objects.iter().zip(&self.objects).map(|(o, p)| (o.tag_id, *p));
        let locations = scene.locations.values().map(|l| (l.tag_id, l.pose));
        objects.chain(locations).collect()
    }

    /// Tags inside the camera's field of view and range, as poses in the
    /// camera frame with the scene's noise applied.
    pub fn observe_tags(
        &mut self,
        scene: &Scene,
        model: &KinematicModel,
        camera: &str,
    ) -> Result<Vec<TagObservation>, SimError> {
        let spec = model
            .camera(camera)
            .ok_or_else(|| SimError::UnknownCamera(camera.to_string()))?;
        let cam_pose = model.forward_kinematics(&self.config, &spec.frame)?;
        let cam_inv = cam_pose.inverse();
        let sigma_pos = scene.noise.position_sigma;
        let sigma_rot = scene.noise.rotation_sigma_deg.to_radians();
        let mut out = Vec::new();
        for (tag_id, world) in self.tag_poses(scene) {
            if !in_view(spec, &cam_pose, &world.translation) {
                continue;
            }
            let mut pose = cam_inv.compose(&world);
            if sigma_pos > 0.0 {
                let n = Normal::new(0.0, sigma_pos).expect("finite sigma");
                pose.translation += Vector3::from_fn(|_, _| n.sample(&mut self.rng));
            }
            if sigma_rot > 0.0 {
                let n = Normal::new(0.0, sigma_rot).expect("finite sigma");
                let d = Vector3::from_fn(|_, _| n.sample(&mut self.rng));
                pose.rotation = Quaternion::from_rotation_vector(&d).mul(&pose.rotation);
            }
            out.push(TagObservation {
                tag_id,
                pose,
                camera: camera.to_string(),
                stamp: self.time,
                sigma_pos,
                sigma_rot,
            });
        }
        Ok(out)
    }

    /// Observations from every camera in the model, in model order.
    pub fn observe_all(&mut self, scene: &Scene, model: &KinematicModel) -> Vec<TagObservation> {
        let mut out = Vec::new();
        for cam in &model.cameras {
            out.extend(self.observe_tags(scene, model, &cam.name).expect("model cameras exist"));
        }
        out
    }

    /// Closes or opens a gripper. Closing attaches the nearest free object
    /// whose center lies within its graspable radius of the gripper frame;
    /// opening releases whatever is held where it is. Returns the label of
    /// a newly attached object.
    pub fn set_gripper(
        &mut self,
        scene: &Scene,
        model: &KinematicModel,
        side: Side,
        command: GripperCommand,
    ) -> Option<String> {
        self.grippers[side.index()] = command;
        match command {
            GripperCommand::Open => {
                self.attachments[side.index()] = None;
                None
            }
            GripperCommand::Close => {
                if self.attachments[side.index()].is_some() {
                    return None;
                }
                let ee = model
                    .forward_kinematics(&self.config, side.ee_frame())
                    .expect("model has both end effectors");
                let held: HashSet<&str> = self.attachments.iter().flatten().map(|a| a.object.as_str()).collect();
                let mut best: Option<(usize, f64)> = None;
                for (i, o) in scene.objects.iter().enumerate() {
                    if held.contains(o.label.as_str()) {
                        continue;
                    }
                    let d = (self.objects[i].translation - ee.translation).norm();
                    if d <= o.graspable_radius && best.is_none_or(|(_, bd)| d < bd) {
                        best = Some((i, d));
                    }
                }
                let (i, _) = best?;
                let label = scene.objects[i].label.clone();
                self.attachments[side.index()] = Some(Attachment {
                    object: label.clone(),
                    grasp: ee.inverse().compose(&self.objects[i]),
                });
                Some(label)
            }
        }
    }

    /// Closest attentive human visible to the torso camera, using the
    /// scene's attention threshold.
    pub fn select_handover_target(&self, scene: &Scene, model: &KinematicModel) -> Option<HandoverTarget> {
        select_handover_target(self, scene, model, scene.attention_threshold_deg.to_radians())
    }

    /// Whether an obstacle disc intersects the stopping corridor swept by
    /// the body-frame twist `(vx, vy, ω)`.
    pub fn obstacle_ahead(&self, scene: &Scene, twist: &Vector3<f64>) -> bool {
        obstacle_ahead(&self.config.base, scene, twist)
    }
}

/// Field-of-view cone about the camera's +x axis intersected with its range.
pub fn in_view(camera: &CameraSpec, camera_pose: &Pose, point: &Vector3<f64>) -> bool {
    let local = camera_pose.inverse().transform_point(point);
    let range = local.norm();
    if !(range >= camera.min_range_m && range <= camera.max_range_m) {
        return false;
    }
    let cos = local.x / range;
    cos >= (camera.fov_deg.to_radians() / 2.0).cos()
}

/// Whether the human is looking at the robot base within `threshold`.
pub fn is_attentive(human: &HumanAgent, base: &PlanarPose, threshold: f64) -> bool {
    let to_robot = Vector2::new(base.x - human.position[0], base.y - human.position[1]);
    let norm = to_robot.norm();
    if norm < 1e-12 {
        return true;
    }
    let gaze = Vector2::new(human.head_yaw.cos(), human.head_yaw.sin());
    let cos = (gaze.dot(&to_robot) / norm).clamp(-1.0, 1.0);
    cos.acos() <= threshold
}

/// Attentive humans visible to the torso camera, closest first by planar
/// distance to the base. Attention gates before distance.
pub fn select_handover_target(
    world: &WorldState,
    scene: &Scene,
    model: &KinematicModel,
    threshold: f64,
) -> Option<HandoverTarget> {
    let base = world.config.base;
    let cam = model.camera("torso_cam")?;
    let cam_pose = model.forward_kinematics(&world.config, &cam.frame).ok()?;
    let mut best: Option<HandoverTarget> = None;
    for h in &scene.humans {
        if !is_attentive(h, &base, threshold) || !in_view(cam, &cam_pose, &h.chest()) {
            continue;
        }
        let distance = (h.position[0] - base.x).hypot(h.position[1] - base.y);
        if best.as_ref().is_none_or(|b| distance < b.distance) {
            best = Some(HandoverTarget {
                id: h.id.clone(),
                pose: h.pose(),
                distance,
                chest_height: h.chest().z,
            });
        }
    }
    best
}

/// Corridor test used to pause navigation. The corridor starts at the base
/// center, runs along the commanded translation direction for
/// `base_radius + lookahead_min + speed·lookahead_time` and has half-width
/// `base_radius + margin`. Pure rotation never triggers it.
pub fn obstacle_ahead(base: &PlanarPose, scene: &Scene, twist: &Vector3<f64>) -> bool {
    let speed = twist.x.hypot(twist.y);
    if speed < 1e-9 {
        return false;
    }
    let (s, c) = base.theta.sin_cos();
    let dir = Vector2::new(c * twist.x - s * twist.y, s * twist.x + c * twist.y) / speed;
    let l = &scene.lidar;
    let length = l.base_radius + l.lookahead_min + speed * l.lookahead_time;
    let half_width = l.base_radius + l.margin;
    scene.obstacles.iter().any(|o| {
        let rel = Vector2::new(o.center[0] - base.x, o.center[1] - base.y);
        let along = rel.dot(&dir);
        let lateral = (rel.x * dir.y - rel.y * dir.x).abs();
        along >= 0.0 && along <= length + o.radius && lateral <= half_width + o.radius
    })
}
