//! Solve-time benchmark: both hands trace circles while the base drifts.

use nalgebra::Vector3;
use serde::Serialize;

use super::{ControlCommand, ControllerConfig, ControllerState, Mode, TaskId, WbcError};
use crate::model::KinematicModel;
use crate::spatial::{PlanarPose, Pose, Twist};
use crate::types::Side;

#[derive(Clone, Debug, Serialize)]
pub struct BenchReport {
    pub steps: usize,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub max_ms: f64,
    pub max_kkt: f64,
    pub failures: usize,
    /// Control period, for comparison.
    pub budget_ms: f64,
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let i = ((sorted.len() - 1) as f64 * p).round() as usize;
    sorted[i]
}

pub fn run(model: &KinematicModel, config: ControllerConfig, steps: usize) -> Result<BenchReport, WbcError> {
    let start = model.home_configuration(PlanarPose::default());
    let mut ctrl = ControllerState::init(model, config, start)?;
    ctrl.apply(model, &ControlCommand::SetMode(Mode::Autonomous))?;
    let dt = ctrl.dt();
    let anchors = Side::BOTH.map(|s| ctrl.task(s.into()).reference);
    let base0 = ctrl.task(TaskId::Base).reference;
    let (radius, rate, drift) = (0.08, 1.0, 0.05);
    let mut times = Vec::with_capacity(steps);
    let mut max_kkt: f64 = 0.0;
    let mut failures = 0;
    for i in 0..steps {
        let t = i as f64 * dt;
        let base_off = Vector3::new(drift * t.min(4.0), 0.0, 0.0);
        let base_v = Vector3::new(if t < 4.0 { drift } else { 0.0 }, 0.0, 0.0);
        let mut commands = vec![ControlCommand::SetReference {
            task: TaskId::Base,
            reference: Pose::new(base0.translation + base_off, base0.rotation),
            feedforward: Twist::new(base_v, Vector3::zeros()),
        }];
        for side in Side::BOTH {
            let sign = if side == Side::Left { 1.0 } else { -1.0 };
            let (s, c) = (rate * t).sin_cos();
            let a = &anchors[side.index()];
            let off = Vector3::new(0.0, sign * radius * s, radius * (c - 1.0));
            let vel = Vector3::new(0.0, sign * radius * rate * c, -radius * rate * s);
            commands.push(ControlCommand::SetReference {
                task: side.into(),
                reference: Pose::new(a.translation + base_off + off, a.rotation),
                feedforward: Twist::new(base_v + vel, Vector3::zeros()),
            });
        }
        let sol = ctrl.control_step(model, &commands)?;
        times.push(sol.solve_time.as_secs_f64() * 1e3);
        max_kkt = max_kkt.max(sol.kkt);
        if !sol.is_ok() {
            failures += 1;
        }
    }
    times.sort_by(f64::total_cmp);
    Ok(BenchReport {
        steps,
        median_ms: percentile(&times, 0.5),
        p95_ms: percentile(&times, 0.95),
        max_ms: times.last().copied().unwrap_or(0.0),
        max_kkt,
        failures,
        budget_ms: dt * 1e3,
    })
}
