//! Reference trajectories and the closed-loop experiment.
//!
//! Each step runs `X_k → MPC → u_p → residual → u_r → actuation error → u_a`
//! and advances the plant with `u_a`. Residual learners see, for every
//! vehicle, the MPC command and the speed the drivetrain was actually driven
//! towards, recovered from the observed acceleration response
//! `u_a ≈ v_k + (τ/dt)·a_{k+1}`.

use serde::{Deserialize, Serialize};

use crate::disturbance::{Actuator, DisturbanceKind, DisturbanceModel};
use crate::dynamics::{build_system_matrices, step_platoon, DynamicsParams, PlatoonState};
use crate::error::{Error, Result};
use crate::mpc::{build_reference_window, MpcConfig, MpcController, Relaxation};
use crate::qp::QpSettings;
use crate::residual_nn::{NnConfig, NnResidual};
use crate::residual_q::{QConfig, QResidual};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    /// Constant cruise speed.
    Uniform,
    /// Cruise, brake, accelerate, cruise.
    Variable,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 2] = [Self::Uniform, Self::Variable];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Uniform => "uniform",
            Self::Variable => "variable",
        }
    }
}

impl std::str::FromStr for ScenarioKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "variable" => Ok(Self::Variable),
            other => Err(format!("unknown scenario `{other}` (expected uniform or variable)")),
        }
    }
}

/// Constant-acceleration segment of the head reference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phase {
    pub duration: f64,
    pub accel: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeaderMode {
    /// Every vehicle, including the head, is stacked into the MPC.
    Controlled,
    /// The head follows its reference with a feedforward command; only the
    /// followers are stacked.
    OpenLoop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSpec {
    pub kind: ScenarioKind,
    /// Total duration (s).
    pub duration: f64,
    pub dt: f64,
    /// Drivetrain lag (s).
    pub tau: f64,
    pub n_vehicles: usize,
    pub initial_spacing: f64,
    pub cruise_speed: f64,
    pub phases: Vec<Phase>,
    pub leader_mode: LeaderMode,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            kind: ScenarioKind::Uniform,
            duration: 15.0,
            dt: 0.1,
            tau: 0.5,
            n_vehicles: 5,
            initial_spacing: 20.0,
            cruise_speed: 15.0,
            phases: default_phases(),
            leader_mode: LeaderMode::Controlled,
        }
    }
}

pub fn default_phases() -> Vec<Phase> {
    vec![
        Phase { duration: 2.0, accel: 0.0 },
        Phase { duration: 5.5, accel: -2.0 },
        Phase { duration: 5.5, accel: 2.0 },
        Phase { duration: 2.0, accel: 0.0 },
    ]
}

impl ScenarioSpec {
    pub fn new(kind: ScenarioKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn steps(&self) -> usize {
        (self.duration / self.dt).round() as usize
    }

    pub fn validate(&self, mpc: &MpcConfig) -> std::result::Result<(), (&'static str, String)> {
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(("dt", "must be > 0".into()));
        }
        if !(self.duration.is_finite() && self.duration > 0.0) {
            return Err(("duration", "must be > 0".into()));
        }
        let ratio = self.duration / self.dt;
        if (ratio - ratio.round()).abs() > 1e-9 * ratio.max(1.0) {
            return Err(("duration", format!("duration {} is not a multiple of dt {}", self.duration, self.dt)));
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(("tau", "must be > 0".into()));
        }
        let min_vehicles = if self.leader_mode == LeaderMode::OpenLoop { 2 } else { 1 };
        if self.n_vehicles < min_vehicles {
            return Err(("n_vehicles", format!("must be at least {min_vehicles}")));
        }
        if self.n_vehicles > 1 && !(self.initial_spacing >= mpc.d_min && self.initial_spacing <= mpc.d_max) {
            return Err((
                "initial_spacing",
                format!("{} outside [{}, {}]", self.initial_spacing, mpc.d_min, mpc.d_max),
            ));
        }
        if !self.cruise_speed.is_finite() {
            return Err(("cruise_speed", "must be finite".into()));
        }
        if self.phases.iter().any(|p| !(p.duration >= 0.0 && p.accel.is_finite())) {
            return Err(("phases", "phase durations must be >= 0 and accelerations finite".into()));
        }
        Ok(())
    }

    fn head_phases(&self) -> Vec<Phase> {
        match self.kind {
            ScenarioKind::Uniform => vec![Phase {
                duration: self.duration,
                accel: 0.0,
            }],
            ScenarioKind::Variable => self.phases.clone(),
        }
    }

    /// Head reference `(p, v, a)` at time `t`, integrated exactly over the
    /// constant-acceleration phases; beyond the last phase speed is held.
    pub fn head_reference(&self, t: f64) -> (f64, f64, f64) {
        let (mut p, mut v) = (0.0, self.cruise_speed);
        let mut start = 0.0;
        for phase in self.head_phases() {
            let end = start + phase.duration;
            if t < end - 1e-9 {
                let s = (t - start).max(0.0);
                return (p + v * s + 0.5 * phase.accel * s * s, v + phase.accel * s, phase.accel);
            }
            p += v * phase.duration + 0.5 * phase.accel * phase.duration * phase.duration;
            v += phase.accel * phase.duration;
            start = end;
        }
        let s = t - start;
        (p + v * s, v, 0.0)
    }
}

/// Per-step stacked reference, index 0 being the head.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceTrajectory {
    pub times: Vec<f64>,
    pub states: Vec<PlatoonState>,
}

impl ReferenceTrajectory {
    /// Sub-trajectory for vehicles `from..`.
    pub fn slice_vehicles(&self, from: usize) -> Vec<PlatoonState> {
        self.states
            .iter()
            .map(|s| PlatoonState {
                positions: s.positions[from..].to_vec(),
                velocities: s.velocities[from..].to_vec(),
                accelerations: s.accelerations[from..].to_vec(),
            })
            .collect()
    }
}

/// Reference at steps `0..=steps`. Followers copy the head's speed and
/// acceleration and sit `i·initial_spacing` behind it.
pub fn generate_reference(spec: &ScenarioSpec) -> Result<ReferenceTrajectory> {
    generate_reference_with_preview(spec, 0)
}

/// Like [`generate_reference`] with `extra` further steps past the end of the
/// run, continuing the final phase, so a receding horizon never runs out of
/// reference.
pub fn generate_reference_with_preview(spec: &ScenarioSpec, extra: usize) -> Result<ReferenceTrajectory> {
    spec.validate(&MpcConfig {
        d_min: f64::MIN,
        d_max: f64::MAX,
        ..MpcConfig::default()
    })
    .map_err(|(path, message)| Error::Config {
        path: format!("scenario.{path}"),
        message,
    })?;
    let n = spec.n_vehicles;
    let mut times = Vec::with_capacity(spec.steps() + extra + 1);
    let mut states = Vec::with_capacity(spec.steps() + extra + 1);
    for k in 0..=spec.steps() + extra {
        let t = k as f64 * spec.dt;
        let (p, v, a) = spec.head_reference(t);
        times.push(t);
        states.push(PlatoonState {
            positions: (0..n).map(|i| p - i as f64 * spec.initial_spacing).collect(),
            velocities: vec![v; n],
            accelerations: vec![a; n],
        });
    }
    Ok(ReferenceTrajectory { times, states })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    MpcOnly,
    MpcNn,
    MpcQ,
}

impl ControllerKind {
    pub const ALL: [ControllerKind; 3] = [Self::MpcOnly, Self::MpcNn, Self::MpcQ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::MpcOnly => "mpc_only",
            Self::MpcNn => "mpc_nn",
            Self::MpcQ => "mpc_q",
        }
    }

    /// Short label used in result tables.
    pub fn label(&self) -> &'static str {
        match self {
            Self::MpcOnly => "M",
            Self::MpcNn => "M+N",
            Self::MpcQ => "M+Q",
        }
    }
}

impl std::str::FromStr for ControllerKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "mpc_only" => Ok(Self::MpcOnly),
            "mpc_nn" => Ok(Self::MpcNn),
            "mpc_q" => Ok(Self::MpcQ),
            other => Err(format!("unknown controller `{other}` (expected mpc_only, mpc_nn or mpc_q)")),
        }
    }
}

/// Everything one closed-loop run depends on.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub scenario: ScenarioSpec,
    pub controller: ControllerKind,
    pub disturbance: DisturbanceModel,
    pub mpc: MpcConfig,
    pub qp: QpSettings,
    pub q_learning: QConfig,
    pub neural_net: NnConfig,
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn new(scenario: ScenarioKind, error: DisturbanceKind, controller: ControllerKind, seed: u64) -> Self {
        Self {
            scenario: ScenarioSpec::new(scenario),
            controller,
            disturbance: DisturbanceModel {
                kind: error,
                ..DisturbanceModel::default()
            },
            mpc: MpcConfig::default(),
            qp: QpSettings::default(),
            q_learning: QConfig::default(),
            neural_net: NnConfig::default(),
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub k: usize,
    pub time: f64,
    pub reference: PlatoonState,
    pub state: PlatoonState,
    pub u_p: Vec<f64>,
    pub u_r: Vec<f64>,
    pub u_a: Vec<f64>,
    pub infeasible: bool,
    pub relaxation: Relaxation,
    /// Some realized gap in this state lies outside `[d_min, d_max]`.
    pub spacing_violation: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryLog {
    pub scenario: ScenarioKind,
    pub error: DisturbanceKind,
    pub controller: ControllerKind,
    pub seed: u64,
    pub dt: f64,
    pub records: Vec<StepRecord>,
}

impl TrajectoryLog {
    pub fn n_vehicles(&self) -> usize {
        self.records.first().map_or(0, |r| r.state.len())
    }

    pub fn spacing_flags(&self) -> usize {
        self.records.iter().filter(|r| r.spacing_violation).count()
    }

    pub fn infeasible_steps(&self) -> usize {
        self.records.iter().filter(|r| r.infeasible).count()
    }

    /// Mean of `v − v*` over all vehicles for each step.
    pub fn mean_velocity_error(&self) -> Vec<f64> {
        self.records
            .iter()
            .map(|r| {
                let n = r.state.len() as f64;
                r.state
                    .velocities
                    .iter()
                    .zip(&r.reference.velocities)
                    .map(|(v, vr)| v - vr)
                    .sum::<f64>()
                    / n
            })
            .collect()
    }
}

enum Residual {
    Identity,
    Q(Box<QResidual>),
    Nn(Box<NnResidual>),
}

impl Residual {
    fn adjust(&mut self, k: usize, u_p: &[f64]) -> Vec<f64> {
        match self {
            Self::Identity => u_p.to_vec(),
            Self::Q(q) => q.adjust(k, u_p),
            Self::Nn(nn) => nn.adjust(u_p),
        }
    }

    fn observe(&mut self, k: usize, u_p: &[f64], u_r: &[f64], u_actual: &[f64]) -> Result<()> {
        match self {
            Self::Identity => Ok(()),
            Self::Q(q) => q.observe(k, u_p, u_actual),
            Self::Nn(nn) => nn.observe(k, u_p, u_r, u_actual),
        }
    }
}

fn config_error(section: &str) -> impl Fn((&'static str, String)) -> Error + '_ {
    move |(path, message)| Error::Config {
        path: format!("{section}.{path}"),
        message,
    }
}

pub fn validate_experiment(cfg: &ExperimentConfig) -> Result<()> {
    cfg.mpc.validate().map_err(config_error("mpc"))?;
    cfg.scenario.validate(&cfg.mpc).map_err(config_error("scenario"))?;
    cfg.q_learning.validate().map_err(config_error("q_learning"))?;
    cfg.neural_net.validate().map_err(config_error("neural_net"))?;
    cfg.disturbance.validate().map_err(|message| Error::Config {
        path: "disturbance.noise_sigma".into(),
        message,
    })?;
    Ok(())
}

const EXPLORATION_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<TrajectoryLog> {
    validate_experiment(cfg)?;
    let spec = &cfg.scenario;
    let reference = generate_reference_with_preview(spec, cfg.mpc.horizon)?;
    let n = spec.n_vehicles;
    let steps = spec.steps();
    let offset = match spec.leader_mode {
        LeaderMode::Controlled => 0,
        LeaderMode::OpenLoop => 1,
    };
    let n_ctl = n - offset;

    let params = DynamicsParams::new(spec.dt, spec.tau, n)?;
    let plant = build_system_matrices(&params)?;
    let ctl_mats = build_system_matrices(&DynamicsParams::new(spec.dt, spec.tau, n_ctl)?)?;
    let ctl_reference = reference.slice_vehicles(offset);

    let initial = reference.states[0].clone();
    let mut mpc = MpcController::new(
        &ctl_mats,
        cfg.mpc,
        cfg.qp,
        initial.velocities[offset..].to_vec(),
    )?;
    let mut actuator = Actuator::new(cfg.disturbance, cfg.seed);
    let mut residual = match cfg.controller {
        ControllerKind::MpcOnly => Residual::Identity,
        ControllerKind::MpcQ => Residual::Q(Box::new(QResidual::new(
            cfg.q_learning,
            n_ctl,
            (cfg.mpc.a_min, cfg.mpc.a_max),
            spec.dt,
            steps,
            cfg.seed ^ EXPLORATION_STREAM,
        )?)),
        ControllerKind::MpcNn => Residual::Nn(Box::new(NnResidual::pretrained(cfg.neural_net.clone(), cfg.seed)?)),
    };

    let lag = spec.tau / spec.dt;
    let mut x = initial;
    let mut records = Vec::with_capacity(steps);
    for k in 0..steps {
        let x_ctl = PlatoonState {
            positions: x.positions[offset..].to_vec(),
            velocities: x.velocities[offset..].to_vec(),
            accelerations: x.accelerations[offset..].to_vec(),
        };
        let window = build_reference_window(&ctl_reference, k, cfg.mpc.horizon)?;
        let (u_ctl, diag) = mpc.step(&x_ctl, &window)?;
        let u_r_ctl = residual.adjust(k, &u_ctl);

        let mut u_p = Vec::with_capacity(n);
        let mut u_r = Vec::with_capacity(n);
        if offset == 1 {
            // feedforward command that reproduces the head reference
            let next = &reference.states[k + 1];
            let ff = x.velocities[0] + lag * next.accelerations[0];
            u_p.push(ff);
            u_r.push(ff);
        }
        u_p.extend_from_slice(&u_ctl);
        u_r.extend_from_slice(&u_r_ctl);
        let u_a = actuator.apply_all(&u_r);
        let next = step_platoon(&x, &u_a, &plant)?;

        let observed: Vec<f64> = (offset..n)
            .map(|i| x.velocities[i] + lag * next.accelerations[i])
            .collect();
        residual.observe(k, &u_ctl, &u_r_ctl, &observed)?;

        let spacing_violation = x
            .spacings()
            .iter()
            .any(|&gap| gap < cfg.mpc.d_min - 1e-9 || gap > cfg.mpc.d_max + 1e-9);
        records.push(StepRecord {
            k,
            time: reference.times[k],
            reference: reference.states[k].clone(),
            state: x,
            u_p,
            u_r,
            u_a,
            infeasible: diag.infeasible,
            relaxation: diag.relaxation,
            spacing_violation,
        });
        x = next;
    }

    Ok(TrajectoryLog {
        scenario: spec.kind,
        error: cfg.disturbance.kind,
        controller: cfg.controller,
        seed: cfg.seed,
        dt: spec.dt,
        records,
    })
}
