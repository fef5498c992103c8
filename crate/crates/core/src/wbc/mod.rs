//! Two-level velocity QP whole-body controller.
//!
//! Level 1 tracks the Cartesian tasks (both end effectors and the base) in a
//! weighted least-squares sense. Level 2 pulls the postural joints toward
//! `q_d` without changing any primary task velocity. The controller
//! integrates its own output (open loop) so its internal configuration is
//! the model that the next step linearizes about.

pub mod bench;
pub mod qp;

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Configuration, KinematicModel, ModelError, BASE_DOF, BASE_LINK};
use crate::spatial::{pose_error, Pose, Twist};
use crate::types::Side;
use qp::{QpProblem, QpSolution, QpStatus};

#[derive(Debug, Error)]
pub enum WbcError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("posture has {got} entries, the postural subset has {expected}")]
    PostureDimension { expected: usize, got: usize },
    #[error("unknown task '{0}'")]
    UnknownTask(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid controller config: {0}")]
    Config(String),
    #[error("controller config is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskId {
    Left,
    Right,
    Base,
}

impl TaskId {
    pub const ALL: [TaskId; 3] = [TaskId::Left, TaskId::Right, TaskId::Base];

    pub fn parse(s: &str) -> Result<TaskId, WbcError> {
        match s {
            "left" => Ok(TaskId::Left),
            "right" => Ok(TaskId::Right),
            "base" => Ok(TaskId::Base),
            other => Err(WbcError::UnknownTask(other.to_string())),
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl From<Side> for TaskId {
    fn from(side: Side) -> TaskId {
        match side {
            Side::Left => TaskId::Left,
            Side::Right => TaskId::Right,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Autonomous,
    Teleop,
    Idle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    pub rate_hz: f64,
    /// Diagonal of K_C, shared by all Cartesian tasks.
    pub cartesian_gain: [f64; 6],
    pub postural_gain: f64,
    pub postural_weight: f64,
    pub weight_left: f64,
    pub weight_right: f64,
    pub weight_base: f64,
    pub frame_left: String,
    pub frame_right: String,
    /// η of the joint position damper.
    pub position_damper: f64,
    /// ξ of the collision damper.
    pub collision_damper: f64,
    pub collision_min_distance: f64,
    pub regularization: f64,
    /// |vx|, |vy|, |ω| caps for the base.
    pub base_velocity_limit: [f64; 3],
    pub kkt_tolerance: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            rate_hz: 250.0,
            cartesian_gain: [2.0; 6],
            postural_gain: 1.0,
            postural_weight: 1.0,
            weight_left: 1.0,
            weight_right: 1.0,
            weight_base: 0.5,
            frame_left: "ee_left".into(),
            frame_right: "ee_right".into(),
            position_damper: 0.5,
            collision_damper: 0.5,
            collision_min_distance: 0.01,
            regularization: 1e-6,
            base_velocity_limit: [0.5, 0.5, 1.0],
            kkt_tolerance: 1e-6,
        }
    }
}

impl ControllerConfig {
    pub fn from_json(text: &str) -> Result<Self, WbcError> {
        let cfg: ControllerConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.rate_hz
    }

    pub fn validate(&self) -> Result<(), WbcError> {
        let positive = [
            ("rate_hz", self.rate_hz),
            ("postural_gain", self.postural_gain),
            ("postural_weight", self.postural_weight),
            ("weight_left", self.weight_left),
            ("weight_right", self.weight_right),
            ("weight_base", self.weight_base),
            ("position_damper", self.position_damper),
            ("collision_damper", self.collision_damper),
            ("regularization", self.regularization),
            ("kkt_tolerance", self.kkt_tolerance),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(WbcError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.cartesian_gain.iter().any(|&k| !(k > 0.0 && k.is_finite())) {
            return Err(WbcError::Config("cartesian_gain entries must be positive".into()));
        }
        if self.base_velocity_limit.iter().any(|&v| !(v > 0.0)) {
            return Err(WbcError::Config("base_velocity_limit entries must be positive".into()));
        }
        if self.position_damper > 1.0 || self.collision_damper > 1.0 {
            return Err(WbcError::Config("damper gains must not exceed 1".into()));
        }
        if !(self.collision_min_distance >= 0.0) {
            return Err(WbcError::Config("collision_min_distance must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CartesianTask {
    pub frame: String,
    pub reference: Pose,
    pub feedforward: Twist,
    /// Diagonal of K_C in 1/s.
    pub gain: [f64; 6],
    pub weight: f64,
    /// Active axes: x, y, z, rx, ry, rz.
    pub mask: [bool; 6],
}

impl CartesianTask {
    /// Commanded task velocity `ff + K_C·e` for the given current pose.
    pub fn desired_velocity(&self, current: &Pose) -> Vector6<f64> {
        let e = pose_error(current, &self.reference);
        let ff = self.feedforward.to_vector();
        Vector6::from_fn(|i, _| ff[i] + self.gain[i] * e[i])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosturalTask {
    pub q_d: DVector<f64>,
    pub gain: f64,
    pub weight: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WbcStatus {
    Solved,
    Idle,
    Infeasible,
    NotConvex,
    IterationLimit,
}

impl From<QpStatus> for WbcStatus {
    fn from(s: QpStatus) -> Self {
        match s {
            QpStatus::Solved => WbcStatus::Solved,
            QpStatus::Infeasible => WbcStatus::Infeasible,
            QpStatus::NotConvex => WbcStatus::NotConvex,
            QpStatus::IterationLimit => WbcStatus::IterationLimit,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WbcSolution {
    /// Base twist, planar components lifted to 6D.
    pub nu: Twist,
    pub qdot: DVector<f64>,
    /// The raw decision vector `[vx, vy, ω, q̇]`.
    pub velocity: DVector<f64>,
    pub status: WbcStatus,
    /// Largest KKT residual of the returned solve.
    pub kkt: f64,
    pub solve_time: Duration,
    /// Set when level 2 failed and the level-1 solution was returned.
    pub level2_failed: bool,
}

impl WbcSolution {
    pub fn zero(nv: usize, status: WbcStatus) -> Self {
        Self {
            nu: Twist::zero(),
            qdot: DVector::zeros(nv - BASE_DOF),
            velocity: DVector::zeros(nv),
            status,
            kkt: 0.0,
            solve_time: Duration::ZERO,
            level2_failed: false,
        }
    }

    fn from_velocity(velocity: DVector<f64>, status: WbcStatus, kkt: f64) -> Self {
        let n = velocity.len() - BASE_DOF;
        Self {
            nu: Twist::from_planar(velocity[0], velocity[1], velocity[2]),
            qdot: velocity.rows(BASE_DOF, n).into_owned(),
            velocity,
            status,
            kkt,
            solve_time: Duration::ZERO,
            level2_failed: false,
        }
    }

    pub fn is_ok(&self) -> bool {
        matches!(self.status, WbcStatus::Solved | WbcStatus::Idle)
    }
}

/// A mutation applied at the start of a control step.
#[derive(Clone, Debug, PartialEq)]
pub enum ControlCommand {
    SetReference {
        task: TaskId,
        reference: Pose,
        feedforward: Twist,
    },
    SetPosture(DVector<f64>),
    SetMode(Mode),
    /// Re-anchors every task at the current internal configuration.
    Reset,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ControllerState {
    pub config: ControllerConfig,
    pub configuration: Configuration,
    pub tasks: [CartesianTask; 3],
    pub postural: PosturalTask,
    pub mode: Mode,
    pub tick: u64,
}

impl ControllerState {
    /// Starts the controller at `measured` with zero task error.
    pub fn init(
        model: &KinematicModel,
        config: ControllerConfig,
        measured: Configuration,
    ) -> Result<ControllerState, WbcError> {
        config.validate()?;
        model.check_configuration(&measured)?;
        model.frame_index(&config.frame_left)?;
        model.frame_index(&config.frame_right)?;
        let fk = model.evaluate(&measured);
        let task = |frame: &str, weight: f64, mask: [bool; 6]| -> Result<CartesianTask, WbcError> {
            Ok(CartesianTask {
                frame: frame.to_string(),
                reference: fk.frame(frame)?,
                feedforward: Twist::zero(),
                gain: config.cartesian_gain,
                weight,
                mask,
            })
        };
        let tasks = [
            task(&config.frame_left, config.weight_left, [true; 6])?,
            task(&config.frame_right, config.weight_right, [true; 6])?,
            task(BASE_LINK, config.weight_base, [true, true, false, false, false, true])?,
        ];
        let postural = PosturalTask {
            q_d: postural_subset(model, &measured.q),
            gain: config.postural_gain,
            weight: config.postural_weight,
        };
        Ok(ControllerState {
            config,
            configuration: measured,
            tasks,
            postural,
            mode: Mode::Idle,
            tick: 0,
        })
    }

    pub fn dt(&self) -> f64 {
        self.config.dt()
    }

    pub fn task(&self, id: TaskId) -> &CartesianTask {
        &self.tasks[id.index()]
    }

    pub fn set_task_reference(&mut self, id: TaskId, reference: Pose, feedforward: Twist) -> Result<(), WbcError> {
        if !reference.is_finite() {
            return Err(WbcError::NonFinite("task reference"));
        }
        if !feedforward.is_finite() {
            return Err(WbcError::NonFinite("task feedforward"));
        }
        let t = &mut self.tasks[id.index()];
        t.reference = reference;
        t.feedforward = feedforward;
        Ok(())
    }

    pub fn set_posture(&mut self, q_d: DVector<f64>) -> Result<(), WbcError> {
        let expected = self.postural.q_d.len();
        if q_d.len() != expected {
            return Err(WbcError::PostureDimension { expected, got: q_d.len() });
        }
        if q_d.iter().any(|v| !v.is_finite()) {
            return Err(WbcError::NonFinite("posture"));
        }
        self.postural.q_d = q_d;
        Ok(())
    }

    /// Re-anchors all task references at the current configuration and
    /// clears the feedforwards.
    pub fn reset_references(&mut self, model: &KinematicModel) {
        let fk = model.evaluate(&self.configuration);
        for t in &mut self.tasks {
            t.reference = fk.frame(&t.frame).expect("task frames checked at init");
            t.feedforward = Twist::zero();
        }
    }

    pub fn apply(&mut self, model: &KinematicModel, command: &ControlCommand) -> Result<(), WbcError> {
        match command {
            ControlCommand::SetReference {
                task,
                reference,
                feedforward,
            } => self.set_task_reference(*task, *reference, *feedforward),
            ControlCommand::SetPosture(q) => self.set_posture(q.clone()),
            ControlCommand::SetMode(m) => {
                self.mode = *m;
                Ok(())
            }
            ControlCommand::Reset => {
                self.reset_references(model);
                Ok(())
            }
        }
    }

    /// Applies `commands`, solves the hierarchy and integrates the result
    /// into the internal configuration.
    ///
    /// Commands are validated before any is applied; on error the state is
    /// left untouched. A failed solve emits zero velocity with the solver
    /// status.
    pub fn control_step(
        &mut self,
        model: &KinematicModel,
        commands: &[ControlCommand],
    ) -> Result<WbcSolution, WbcError> {
        let mut staged = self.clone();
        for c in commands {
            staged.apply(model, c)?;
        }
        *self = staged;

        let dt = self.dt();
        let solution = if self.mode == Mode::Idle {
            WbcSolution::zero(model.nv(), WbcStatus::Idle)
        } else {
            let s = solve_hierarchy(self, model);
            if s.is_ok() {
                s
            } else {
                log::warn!("tick {}: controller solve failed ({:?})", self.tick, s.status);
                WbcSolution {
                    solve_time: s.solve_time,
                    ..WbcSolution::zero(model.nv(), s.status)
                }
            }
        };
        self.configuration = self.configuration.integrate(model, &solution.velocity, dt);
        self.tick += 1;
        Ok(solution)
    }
}

/// Entries of `q` belonging to the postural subset.
pub fn postural_subset(model: &KinematicModel, q: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(model.postural.len(), model.postural.iter().map(|&i| q[i]))
}

fn masked_rows(jac: &DMatrix<f64>, target: &Vector6<f64>, mask: &[bool; 6]) -> (DMatrix<f64>, DVector<f64>) {
    let rows: Vec<usize> = (0..6).filter(|&i| mask[i]).collect();
    let j = DMatrix::from_fn(rows.len(), jac.ncols(), |r, c| jac[(rows[r], c)]);
    let t = DVector::from_iterator(rows.len(), rows.iter().map(|&r| target[r]));
    (j, t)
}

/// Masked task Jacobians and target velocities, in task order.
fn primary_tasks(state: &ControllerState, model: &KinematicModel) -> Vec<(f64, DMatrix<f64>, DVector<f64>)> {
    let fk = model.evaluate(&state.configuration);
    state
        .tasks
        .iter()
        .map(|t| {
            let node = model.frame_index(&t.frame).expect("task frames checked at init");
            let target = t.desired_velocity(&fk.pose(node));
            let (j, v) = masked_rows(&fk.jacobian(node), &target, &t.mask);
            (t.weight, j, v)
        })
        .collect()
}

/// Variable bounds: velocity limits intersected with the position dampers,
/// plus the base caps.
fn velocity_bounds(state: &ControllerState, model: &KinematicModel) -> (DVector<f64>, DVector<f64>) {
    let nv = model.nv();
    let dt = state.dt();
    let eta = state.config.position_damper;
    let mut lo = DVector::zeros(nv);
    let mut hi = DVector::zeros(nv);
    for i in 0..BASE_DOF {
        lo[i] = -state.config.base_velocity_limit[i];
        hi[i] = state.config.base_velocity_limit[i];
    }
    for (k, j) in model.joints.iter().enumerate() {
        let q = state.configuration.q[k];
        let v = j.limits.vel;
        lo[BASE_DOF + k] = (-v).max(eta * (j.limits.lo - q) / dt).min(0.0);
        hi[BASE_DOF + k] = v.min(eta * (j.limits.hi - q) / dt).max(0.0);
    }
    (lo, hi)
}

/// Collision damper rows `J_d·x ≥ −ξ(d − d_min)/dt`.
fn collision_rows(state: &ControllerState, model: &KinematicModel) -> (DMatrix<f64>, DVector<f64>, DVector<f64>) {
    let clearances = model.sphere_pairs_clearance(&state.configuration);
    let nv = model.nv();
    let xi = state.config.collision_damper;
    let dt = state.dt();
    let d_min = state.config.collision_min_distance;
    let mut a = DMatrix::zeros(clearances.len(), nv);
    let mut lo = DVector::zeros(clearances.len());
    for (r, c) in clearances.iter().enumerate() {
        a.row_mut(r).copy_from(&c.gradient);
        lo[r] = -xi * (c.distance - d_min) / dt;
    }
    let hi = DVector::from_element(clearances.len(), f64::INFINITY);
    (a, lo, hi)
}

/// The level-1 problem: weighted Cartesian tracking plus λ regularization,
/// with the velocity bounds and collision rows.
pub fn build_primary_qp(state: &ControllerState, model: &KinematicModel) -> QpProblem {
    let nv = model.nv();
    let mut h = DMatrix::identity(nv, nv) * state.config.regularization;
    let mut g = DVector::zeros(nv);
    for (w, j, v) in primary_tasks(state, model) {
        h += j.transpose() * &j * w;
        g -= j.transpose() * v * w;
    }
    let (lo, hi) = velocity_bounds(state, model);
    let (a, alo, ahi) = collision_rows(state, model);
    QpProblem::unconstrained(h, g).with_bounds(lo, hi).with_rows(a, alo, ahi)
}

/// Postural cost `w‖q̇_post − K_p(q_d − q_post)‖²` of a decision vector.
pub fn postural_cost(state: &ControllerState, model: &KinematicModel, x: &DVector<f64>) -> f64 {
    let p = &state.postural;
    model
        .postural
        .iter()
        .enumerate()
        .map(|(k, &j)| {
            let target = p.gain * (p.q_d[k] - state.configuration.q[j]);
            (x[BASE_DOF + j] - target).powi(2)
        })
        .sum::<f64>()
        * p.weight
}

/// Stacked masked primary Jacobian, the matrix whose null space level 2
/// moves in.
pub fn primary_jacobian(state: &ControllerState, model: &KinematicModel) -> DMatrix<f64> {
    let tasks = primary_tasks(state, model);
    let rows: usize = tasks.iter().map(|(_, j, _)| j.nrows()).sum();
    let mut out = DMatrix::zeros(rows, model.nv());
    let mut r = 0;
    for (_, j, _) in &tasks {
        out.rows_mut(r, j.nrows()).copy_from(j);
        r += j.nrows();
    }
    out
}

/// Orthonormal basis of the null space of `a`, as columns.
fn null_space_basis(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.ncols();
    // pad to square so the SVD yields a full right basis
    let mut padded = DMatrix::zeros(a.nrows().max(n), n);
    padded.rows_mut(0, a.nrows()).copy_from(a);
    let svd = padded.svd(false, true);
    let v_t = svd.v_t.expect("requested right singular vectors");
    let smax = svd.singular_values.max();
    let tol = 1e-9 * smax.max(1.0);
    let cols: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&i| svd.singular_values[i] <= tol)
        .collect();
    let mut basis = DMatrix::zeros(n, cols.len());
    for (k, &i) in cols.iter().enumerate() {
        basis.column_mut(k).copy_from(&v_t.row(i).transpose());
    }
    basis
}

/// Level 2 around a level-1 optimum `x1`: minimizes the postural cost plus
/// λ‖x‖² over `x = x1 + N·z`, where `N` spans the null space of the primary
/// Jacobian, under the level-1 bounds and rows.
///
/// Parameterizing by `z` keeps every primary task velocity at its level-1
/// value by construction; it is the same problem as pinning `Jᵢx = Jᵢx₁`
/// with equality rows but stays well posed when those rows are dependent.
fn solve_level2(
    state: &ControllerState,
    model: &KinematicModel,
    primary: &QpProblem,
    x1: &DVector<f64>,
) -> Level2 {
    let nv = model.nv();
    let basis = null_space_basis(&primary_jacobian(state, model));
    let k = basis.ncols();
    if k == 0 {
        return Level2::NoRedundancy;
    }
    let lambda = state.config.regularization;
    let p = &state.postural;
    // objective in x: ½xᵀWx + cᵀx
    let mut w = DMatrix::identity(nv, nv) * lambda;
    let mut c = DVector::zeros(nv);
    for (i, &j) in model.postural.iter().enumerate() {
        let col = BASE_DOF + j;
        let target = p.gain * (p.q_d[i] - state.configuration.q[j]);
        w[(col, col)] += 2.0 * p.weight;
        c[col] -= 2.0 * p.weight * target;
    }
    let hz = basis.transpose() * &w * &basis;
    let gz = basis.transpose() * (&w * x1 + c);

    // x bounds and rows become rows on z
    let m = primary.rows.nrows();
    let mut rows = DMatrix::zeros(nv + m, k);
    let mut lo = DVector::zeros(nv + m);
    let mut hi = DVector::zeros(nv + m);
    rows.rows_mut(0, nv).copy_from(&basis);
    for i in 0..nv {
        lo[i] = primary.lower[i] - x1[i];
        hi[i] = primary.upper[i] - x1[i];
    }
    if m > 0 {
        let a = &primary.rows;
        rows.rows_mut(nv, m).copy_from(&(a * &basis));
        let ax1 = a * x1;
        for i in 0..m {
            lo[nv + i] = primary.row_lower[i] - ax1[i];
            hi[nv + i] = primary.row_upper[i] - ax1[i];
        }
    }
    // x1 is feasible up to solver tolerance, so z = 0 must be too
    for i in 0..nv + m {
        lo[i] = lo[i].min(0.0);
        hi[i] = hi[i].max(0.0);
    }
    let sol = qp::solve(&QpProblem::unconstrained(hz, gz).with_rows(rows, lo, hi));
    if sol.status != QpStatus::Solved {
        return Level2::Failed(sol.status);
    }
    Level2::Solved(QpSolution {
        x: x1 + &basis * &sol.x,
        ..sol
    })
}

enum Level2 {
    Solved(QpSolution),
    NoRedundancy,
    Failed(QpStatus),
}

/// Level-1 solve only.
pub fn solve_primary(state: &ControllerState, model: &KinematicModel) -> (QpProblem, QpSolution) {
    let problem = build_primary_qp(state, model);
    let sol = qp::solve(&problem);
    (problem, sol)
}

/// Both levels. Falls back to the level-1 solution (with
/// `level2_failed` set) if level 2 cannot be solved.
pub fn solve_hierarchy(state: &ControllerState, model: &KinematicModel) -> WbcSolution {
    let start = Instant::now();
    let (problem, l1) = solve_primary(state, model);
    if l1.status != QpStatus::Solved {
        let mut out = WbcSolution::zero(model.nv(), l1.status.into());
        out.solve_time = start.elapsed();
        return out;
    }
    debug_assert!(
        l1.kkt.max() <= state.config.kkt_tolerance * 1e3,
        "level-1 KKT residual {:?}",
        l1.kkt
    );
    let level1 = |failed: bool| {
        let mut out = WbcSolution::from_velocity(clamp_to_bounds(l1.x.clone(), &problem), WbcStatus::Solved, l1.kkt.max());
        out.level2_failed = failed;
        out
    };
    let mut out = match solve_level2(state, model, &problem, &l1.x) {
        Level2::Solved(l2) => {
            let x = clamp_to_bounds(l2.x, &problem);
            WbcSolution::from_velocity(x, WbcStatus::Solved, l1.kkt.max().max(l2.kkt.max()))
        }
        Level2::NoRedundancy => level1(false),
        Level2::Failed(status) => {
            log::debug!("level 2 failed ({status:?}), keeping level 1");
            level1(true)
        }
    };
    out.solve_time = start.elapsed();
    out
}

// Rounding can leave an active bound violated by a few ulps.
fn clamp_to_bounds(mut x: DVector<f64>, problem: &QpProblem) -> DVector<f64> {
    for i in 0..x.len() {
        x[i] = x[i].clamp(problem.lower[i], problem.upper[i]);
    }
    x
}

/// Twist of the base expressed as `(vx, vy, ω)` in the base frame.
pub fn base_twist(solution: &WbcSolution) -> Vector3<f64> {
    Vector3::new(solution.velocity[0], solution.velocity[1], solution.velocity[2])
}

/// Integrates a solution into `config` the same way the controller does.
pub fn integrate_solution(
    model: &KinematicModel,
    config: &Configuration,
    solution: &WbcSolution,
    dt: f64,
) -> Configuration {
    config.integrate(model, &solution.velocity, dt)
}
