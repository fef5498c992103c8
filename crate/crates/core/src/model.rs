//! Kinematic tree of the robot: a planar base carrying a joint tree, named
//! frames, collision spheres and cameras.
//!
//! Generalized velocities are ordered `[vx, vy, ω, q̇₀ … q̇ₙ₋₁]` where the
//! first three are the base twist expressed in the base frame. Jacobians
//! map that vector to the world-frame twist of a frame, with the linear
//! part taken at the frame origin.

use std::collections::{BTreeMap, HashMap, HashSet};

use nalgebra::{DMatrix, DVector, RowDVector, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::spatial::{integrate_planar, PlanarPose, Pose, Quaternion};

/// Number of base velocity variables.
pub const BASE_DOF: usize = 3;

pub const BASE_LINK: &str = "base_link";

const DEFAULT_MODEL: &str = include_str!("../data/model.json");

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model document is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid model:\n  {}", .0.join("\n  "))]
    Invalid(Vec<String>),
    #[error("unknown frame '{0}'")]
    UnknownFrame(String),
    #[error("configuration has {got} joints, model has {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("joint '{name}' at {value} outside [{lo}, {hi}]")]
    OutOfLimits {
        name: String,
        value: f64,
        lo: f64,
        hi: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JointKind {
    Revolute,
    Prismatic,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Limits {
    pub lo: f64,
    pub hi: f64,
    pub vel: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct JointSpec {
    pub name: String,
    pub kind: JointKind,
    pub parent: String,
    pub axis: Vector3<f64>,
    pub origin: Pose,
    pub limits: Limits,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameSpec {
    pub name: String,
    pub parent: String,
    pub origin: Pose,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollisionSphere {
    pub name: String,
    pub frame: String,
    pub offset: Pose,
    pub radius: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraSpec {
    pub name: String,
    pub frame: String,
    pub fov_deg: f64,
    pub min_range_m: f64,
    pub max_range_m: f64,
}

// Wire form of the model description. Joint kinds stay strings here so
// that validation can report every bad entry instead of the first.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct JointDoc {
    name: String,
    kind: String,
    parent: String,
    axis: [f64; 3],
    origin: Pose,
    limits: Limits,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
struct CollisionDoc {
    #[serde(default)]
    spheres: Vec<CollisionSphere>,
    #[serde(default)]
    pairs: Vec<[String; 2]>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelDoc {
    joints: Vec<JointDoc>,
    #[serde(default)]
    frames: Vec<FrameSpec>,
    #[serde(default)]
    postural: Vec<String>,
    #[serde(default)]
    collision: CollisionDoc,
    #[serde(default)]
    cameras: Vec<CameraSpec>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    home: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq)]
struct Node {
    name: String,
    parent: Option<usize>,
    origin: Pose,
    joint: Option<usize>,
}

/// Base pose plus joint positions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Configuration {
    pub base: PlanarPose,
    pub q: DVector<f64>,
}

impl Configuration {
    pub fn new(base: PlanarPose, q: DVector<f64>) -> Self {
        Self { base, q }
    }

    /// Steps along a generalized velocity without limit clamping. Used for
    /// finite differences.
    pub fn retract(&self, velocity: &DVector<f64>, dt: f64) -> Configuration {
        let base_twist = Vector3::new(velocity[0], velocity[1], velocity[2]);
        let q = &self.q + velocity.rows(BASE_DOF, self.q.len()) * dt;
        Configuration {
            base: integrate_planar(&self.base, &base_twist, dt),
            q,
        }
    }

    /// Open-loop integration step: planar exponential for the base, explicit
    /// Euler clamped to the position limits for the joints.
    pub fn integrate(&self, model: &KinematicModel, velocity: &DVector<f64>, dt: f64) -> Configuration {
        let mut next = self.retract(velocity, dt);
        for (qi, j) in next.q.iter_mut().zip(&model.joints) {
            *qi = qi.clamp(j.limits.lo, j.limits.hi);
        }
        next
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CollisionPair {
    pub a: usize,
    pub b: usize,
}

/// Result of [`KinematicModel::sphere_pairs_clearance`] for one pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Clearance {
    pub pair: (String, String),
    pub distance: f64,
    pub gradient: RowDVector<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KinematicModel {
    pub joints: Vec<JointSpec>,
    pub frames: Vec<FrameSpec>,
    pub spheres: Vec<CollisionSphere>,
    pub pairs: Vec<CollisionPair>,
    pub cameras: Vec<CameraSpec>,
    /// Indices into `joints`.
    pub postural: Vec<usize>,
    pub home: BTreeMap<String, f64>,
    nodes: Vec<Node>,
    node_index: HashMap<String, usize>,
    // actuated joints on the path root → node, for every node
    paths: Vec<Vec<usize>>,
    sphere_nodes: Vec<usize>,
}

/// World poses of every node for one configuration.
pub struct FkCache<'m> {
    model: &'m KinematicModel,
    base: PlanarPose,
    poses: Vec<Pose>,
}

impl KinematicModel {
    /// The bundled Tiago-like dual-arm model: 19 actuated joints, 15 of
    /// them postural.
    pub fn default_model() -> KinematicModel {
        Self::from_json(DEFAULT_MODEL).expect("bundled model is valid")
    }

    pub fn from_json(text: &str) -> Result<KinematicModel, ModelError> {
        let doc: ModelDoc = serde_json::from_str(text)?;
        Self::from_doc(doc)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_doc()).expect("model serializes")
    }

    fn to_doc(&self) -> ModelDoc {
        ModelDoc {
            joints: self
                .joints
                .iter()
                .map(|j| JointDoc {
                    name: j.name.clone(),
                    kind: match j.kind {
                        JointKind::Revolute => "revolute".into(),
                        JointKind::Prismatic => "prismatic".into(),
                    },
                    parent: j.parent.clone(),
                    axis: j.axis.into(),
                    origin: j.origin,
                    limits: j.limits,
                })
                .collect(),
            frames: self.frames.clone(),
            postural: self.postural.iter().map(|&i| self.joints[i].name.clone()).collect(),
            collision: CollisionDoc {
                spheres: self.spheres.clone(),
                pairs: self
                    .pairs
                    .iter()
                    .map(|p| [self.spheres[p.a].name.clone(), self.spheres[p.b].name.clone()])
                    .collect(),
            },
            cameras: self.cameras.clone(),
            home: self.home.clone(),
        }
    }

    fn from_doc(doc: ModelDoc) -> Result<KinematicModel, ModelError> {
        let mut errors = Vec::new();
        let mut seen = HashSet::new();
        seen.insert(BASE_LINK.to_string());

        let mut joints = Vec::with_capacity(doc.joints.len());
        for j in &doc.joints {
            if !seen.insert(j.name.clone()) {
                errors.push(format!("duplicate name '{}'", j.name));
            }
            let kind = match j.kind.as_str() {
                "revolute" => Some(JointKind::Revolute),
                "prismatic" => Some(JointKind::Prismatic),
                other => {
                    errors.push(format!("joint '{}': unknown kind '{other}'", j.name));
                    None
                }
            };
            let axis = Vector3::from(j.axis);
            if (axis.norm() - 1.0).abs() > 1e-9 {
                errors.push(format!("joint '{}': axis {:?} is not unit length", j.name, j.axis));
            }
            if !(j.limits.lo < j.limits.hi) {
                errors.push(format!(
                    "joint '{}': lower limit {} not below upper limit {}",
                    j.name, j.limits.lo, j.limits.hi
                ));
            }
            if !(j.limits.vel > 0.0) {
                errors.push(format!("joint '{}': velocity limit must be positive", j.name));
            }
            if let Some(kind) = kind {
                joints.push(JointSpec {
                    name: j.name.clone(),
                    kind,
                    parent: j.parent.clone(),
                    axis,
                    origin: j.origin,
                    limits: j.limits,
                });
            }
        }
        for f in &doc.frames {
            if !seen.insert(f.name.clone()) {
                errors.push(format!("duplicate name '{}'", f.name));
            }
        }

        // Topological ordering of joints and frames below base_link.
        let mut pending: Vec<(String, String, Pose, Option<usize>)> = joints
            .iter()
            .enumerate()
            .map(|(i, j)| (j.name.clone(), j.parent.clone(), j.origin, Some(i)))
            .chain(doc.frames.iter().map(|f| (f.name.clone(), f.parent.clone(), f.origin, None)))
            .collect();
        let mut nodes = vec![Node {
            name: BASE_LINK.into(),
            parent: None,
            origin: Pose::identity(),
            joint: None,
        }];
        let mut node_index: HashMap<String, usize> = HashMap::new();
        node_index.insert(BASE_LINK.into(), 0);
        loop {
            let before = pending.len();
            let mut rest = Vec::new();
            for (name, parent, origin, joint) in pending {
                match node_index.get(&parent) {
                    Some(&p) if !node_index.contains_key(&name) => {
                        node_index.insert(name.clone(), nodes.len());
                        nodes.push(Node {
                            name,
                            parent: Some(p),
                            origin,
                            joint,
                        });
                    }
                    Some(_) => {} // duplicate, already reported
                    None => rest.push((name, parent, origin, joint)),
                }
            }
            pending = rest;
            if pending.is_empty() || pending.len() == before {
                break;
            }
        }
        let all_names: HashSet<&str> = seen.iter().map(String::as_str).collect();
        for (name, parent, _, _) in &pending {
            if all_names.contains(parent.as_str()) {
                errors.push(format!("'{name}' is part of a parent cycle (parent '{parent}')"));
            } else {
                errors.push(format!("'{name}' has unknown parent '{parent}'"));
            }
        }

        let joint_index: HashMap<&str, usize> = joints
            .iter()
            .enumerate()
            .map(|(i, j)| (j.name.as_str(), i))
            .collect();
        let mut postural = Vec::new();
        for name in &doc.postural {
            match joint_index.get(name.as_str()) {
                Some(&i) => postural.push(i),
                None => errors.push(format!("postural joint '{name}' is not an actuated joint")),
            }
        }

        let mut sphere_nodes = Vec::new();
        let mut sphere_index = HashMap::new();
        for (i, s) in doc.collision.spheres.iter().enumerate() {
            if !(s.radius > 0.0) {
                errors.push(format!("sphere '{}': radius must be positive", s.name));
            }
            if sphere_index.insert(s.name.as_str(), i).is_some() {
                errors.push(format!("duplicate sphere '{}'", s.name));
            }
            match node_index.get(&s.frame) {
                Some(&n) => sphere_nodes.push(n),
                None => errors.push(format!("sphere '{}': unknown frame '{}'", s.name, s.frame)),
            }
        }
        let mut pairs = Vec::new();
        for [a, b] in &doc.collision.pairs {
            match (sphere_index.get(a.as_str()), sphere_index.get(b.as_str())) {
                (Some(&a), Some(&b)) => pairs.push(CollisionPair { a, b }),
                _ => errors.push(format!("collision pair [{a}, {b}] names an unknown sphere")),
            }
        }
        for c in &doc.cameras {
            if !node_index.contains_key(&c.frame) {
                errors.push(format!("camera '{}': unknown frame '{}'", c.name, c.frame));
            }
            if !(c.fov_deg > 0.0 && c.fov_deg < 180.0) {
                errors.push(format!("camera '{}': field of view must be in (0, 180)", c.name));
            }
            if !(0.0 <= c.min_range_m && c.min_range_m < c.max_range_m) {
                errors.push(format!("camera '{}': invalid range", c.name));
            }
        }
        for (name, value) in &doc.home {
            match joint_index.get(name.as_str()) {
                Some(&i) => {
                    let l = joints[i].limits;
                    if *value < l.lo || *value > l.hi {
                        errors.push(format!("home value for '{name}' outside limits"));
                    }
                }
                None => errors.push(format!("home names unknown joint '{name}'")),
            }
        }

        if !errors.is_empty() {
            return Err(ModelError::Invalid(errors));
        }

        let mut paths: Vec<Vec<usize>> = Vec::with_capacity(nodes.len());
        for node in &nodes {
            let mut path = match node.parent {
                Some(p) => paths[p].clone(),
                None => Vec::new(),
            };
            if let Some(j) = node.joint {
                path.push(j);
            }
            paths.push(path);
        }

        Ok(KinematicModel {
            joints,
            frames: doc.frames,
            spheres: doc.collision.spheres,
            pairs,
            cameras: doc.cameras,
            postural,
            home: doc.home,
            nodes,
            node_index,
            paths,
            sphere_nodes,
        })
    }

    /// Number of actuated joints.
    pub fn dof(&self) -> usize {
        self.joints.len()
    }

    /// Number of QP variables: base twist plus joint velocities.
    pub fn nv(&self) -> usize {
        BASE_DOF + self.joints.len()
    }

    pub fn joint_index(&self, name: &str) -> Option<usize> {
        self.joints.iter().position(|j| j.name == name)
    }

    pub fn frame_index(&self, name: &str) -> Result<usize, ModelError> {
        self.node_index
            .get(name)
            .copied()
            .ok_or_else(|| ModelError::UnknownFrame(name.to_string()))
    }

    pub fn frame_names(&self) -> impl Iterator<Item = &str> {
        self.nodes.iter().map(|n| n.name.as_str())
    }

    pub fn camera(&self, name: &str) -> Option<&CameraSpec> {
        self.cameras.iter().find(|c| c.name == name)
    }

    /// All joints at zero (clamped into limits), base at the origin.
    pub fn zero_configuration(&self) -> Configuration {
        let q = DVector::from_iterator(
            self.dof(),
            self.joints.iter().map(|j| 0.0f64.clamp(j.limits.lo, j.limits.hi)),
        );
        Configuration::new(PlanarPose::default(), q)
    }

    /// The home posture from the model document at the given base pose.
    pub fn home_configuration(&self, base: PlanarPose) -> Configuration {
        let mut c = self.zero_configuration();
        c.base = base;
        for (name, v) in &self.home {
            if let Some(i) = self.joint_index(name) {
                c.q[i] = *v;
            }
        }
        c
    }

    pub fn check_configuration(&self, config: &Configuration) -> Result<(), ModelError> {
        if config.q.len() != self.dof() {
            return Err(ModelError::Dimension {
                expected: self.dof(),
                got: config.q.len(),
            });
        }
        for (j, &value) in self.joints.iter().zip(config.q.iter()) {
            if !(value >= j.limits.lo && value <= j.limits.hi) {
                return Err(ModelError::OutOfLimits {
                    name: j.name.clone(),
                    value,
                    lo: j.limits.lo,
                    hi: j.limits.hi,
                });
            }
        }
        Ok(())
    }

    pub fn evaluate(&self, config: &Configuration) -> FkCache<'_> {
        assert_eq!(config.q.len(), self.dof(), "configuration dimension");
        let mut poses: Vec<Pose> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let pose = match node.parent {
                None => config.base.to_pose(),
                Some(p) => {
                    let mut local = node.origin;
                    if let Some(j) = node.joint {
                        let spec = &self.joints[j];
                        let motion = match spec.kind {
                            JointKind::Revolute => {
                                Pose::from_rotation(Quaternion::from_axis_angle(&spec.axis, config.q[j]))
                            }
                            JointKind::Prismatic => {
                                Pose::new(spec.axis * config.q[j], Quaternion::identity())
                            }
                        };
                        local = local.compose(&motion);
                    }
                    poses[p].compose(&local)
                }
            };
            poses.push(pose);
        }
        FkCache {
            model: self,
            base: config.base,
            poses,
        }
    }

    pub fn forward_kinematics(&self, config: &Configuration, frame: &str) -> Result<Pose, ModelError> {
        let idx = self.frame_index(frame)?;
        Ok(self.evaluate(config).pose(idx))
    }

    pub fn jacobian(&self, config: &Configuration, frame: &str) -> Result<DMatrix<f64>, ModelError> {
        let idx = self.frame_index(frame)?;
        Ok(self.evaluate(config).jacobian(idx))
    }

    /// Signed clearance of every declared sphere pair with its gradient with
    /// respect to the generalized velocity.
    pub fn sphere_pairs_clearance(&self, config: &Configuration) -> Vec<Clearance> {
        self.evaluate(config).clearances()
    }
}

impl FkCache<'_> {
    pub fn pose(&self, node: usize) -> Pose {
        self.poses[node]
    }

    pub fn frame(&self, name: &str) -> Result<Pose, ModelError> {
        Ok(self.poses[self.model.frame_index(name)?])
    }

    /// Geometric Jacobian of `node`, linear part at the frame origin.
    pub fn jacobian(&self, node: usize) -> DMatrix<f64> {
        self.point_jacobian(node, &self.poses[node].translation)
    }

    /// Jacobian of a point rigidly attached to `node` (given in world
    /// coordinates) stacked over the angular velocity of `node`.
    pub fn point_jacobian(&self, node: usize, point: &Vector3<f64>) -> DMatrix<f64> {
        let model = self.model;
        let mut jac = DMatrix::zeros(6, model.nv());
        let (s, c) = self.base.theta.sin_cos();
        jac[(0, 0)] = c;
        jac[(1, 0)] = s;
        jac[(0, 1)] = -s;
        jac[(1, 1)] = c;
        jac[(0, 2)] = -(point.y - self.base.y);
        jac[(1, 2)] = point.x - self.base.x;
        jac[(5, 2)] = 1.0;
        for &j in &model.paths[node] {
            let spec = &model.joints[j];
            let joint_node = model.node_index[&spec.name];
            let frame = &self.poses[joint_node];
            let axis = frame.rotation.rotate(&spec.axis);
            let col = BASE_DOF + j;
            match spec.kind {
                JointKind::Revolute => {
                    let lin = axis.cross(&(point - frame.translation));
                    jac.fixed_view_mut::<3, 1>(0, col).copy_from(&lin);
                    jac.fixed_view_mut::<3, 1>(3, col).copy_from(&axis);
                }
                JointKind::Prismatic => {
                    jac.fixed_view_mut::<3, 1>(0, col).copy_from(&axis);
                }
            }
        }
        jac
    }

    pub fn clearances(&self) -> Vec<Clearance> {
        let model = self.model;
        let centers: Vec<Vector3<f64>> = model
            .spheres
            .iter()
            .zip(&model.sphere_nodes)
            .map(|(s, &n)| self.poses[n].compose(&s.offset).translation)
            .collect();
        model
            .pairs
            .iter()
            .map(|pair| {
                let (sa, sb) = (&model.spheres[pair.a], &model.spheres[pair.b]);
                let diff = centers[pair.a] - centers[pair.b];
                let norm = diff.norm();
                let distance = norm - sa.radius - sb.radius;
                let gradient = if norm > 1e-12 {
                    let n = diff / norm;
                    let ja = self.point_jacobian(model.sphere_nodes[pair.a], &centers[pair.a]);
                    let jb = self.point_jacobian(model.sphere_nodes[pair.b], &centers[pair.b]);
                    let dj = ja.rows(0, 3) - jb.rows(0, 3);
                    n.transpose() * dj
                } else {
                    RowDVector::zeros(model.nv())
                };
                Clearance {
                    pair: (sa.name.clone(), sb.name.clone()),
                    distance,
                    gradient,
                }
            })
            .collect()
    }
}
