//! Centralized MPC condensed into a dense QP over control increments.
//!
//! With horizon `N`, the predicted window `𝒳 = [X̂_{k+1}; …; X̂_{k+N}]` is
//! affine in the increment sequence `ΔÛ`:
//!
//! ```text
//! 𝒳 = Φ·X_k + λ·U_{k−1} + Γ·ΔÛ
//! ```
//!
//! Tracking cost over the window is `ΔÛᵀ(Ψ + ΓᵀΩΓ)ΔÛ + 2(Φ·X_k + λ·U_{k−1} − 𝒳*)ᵀΩΓ·ΔÛ`
//! (plus a constant), and the spacing, speed and acceleration bounds map to
//! `ḠΓ·ΔÛ ≤ −Ḡ(Φ·X_k + λ·U_{k−1}) − ḡ`. The first block of the optimal `ΔÛ`
//! is added to the previous command.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::{PlatoonState, SystemMatrices};
use crate::error::{ensure_dim, Error, Result};
use crate::qp::{self, QpProblem, QpSettings, QpStatus};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpcConfig {
    pub horizon: usize,
    /// Position error weight.
    pub q1: f64,
    /// Velocity error weight.
    pub q2: f64,
    /// Acceleration error weight.
    pub q3: f64,
    /// Control increment weight.
    pub q4: f64,
    pub d_min: f64,
    pub d_max: f64,
    pub v_min: f64,
    pub v_max: f64,
    pub a_min: f64,
    pub a_max: f64,
    /// Weight the last predicted state too (the default leaves it at zero).
    pub weight_terminal: bool,
    /// Penalty on spacing slack, relative to the largest `q` weight, used when
    /// the hard problem is infeasible.
    pub soft_penalty_scale: f64,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            horizon: 10,
            q1: 1.0,
            q2: 1.0,
            q3: 0.1,
            q4: 0.1,
            d_min: 15.0,
            d_max: 30.0,
            v_min: 0.0,
            v_max: 30.0,
            a_min: -4.0,
            a_max: 4.0,
            weight_terminal: false,
            soft_penalty_scale: 1e4,
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> std::result::Result<(), (&'static str, String)> {
        if self.horizon == 0 {
            return Err(("horizon", "must be at least 1".into()));
        }
        let weights = [self.q1, self.q2, self.q3, self.q4];
        for (name, w) in ["q1", "q2", "q3", "q4"].into_iter().zip(weights) {
            if !(w.is_finite() && w >= 0.0) {
                return Err((name, format!("weight must be finite and >= 0, got {w}")));
            }
        }
        if weights.iter().all(|&w| w == 0.0) {
            return Err(("q1", "at least one weight must be positive".into()));
        }
        let bounds = [
            ("d_min", self.d_min, self.d_max),
            ("v_min", self.v_min, self.v_max),
            ("a_min", self.a_min, self.a_max),
        ];
        for (name, lo, hi) in bounds {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err((name, format!("lower bound {lo} must be below upper bound {hi}")));
            }
        }
        if !(self.soft_penalty_scale.is_finite() && self.soft_penalty_scale > 0.0) {
            return Err(("soft_penalty_scale", "must be > 0".into()));
        }
        Ok(())
    }

    fn check(&self) -> Result<()> {
        self.validate().map_err(|(path, message)| Error::Config {
            path: format!("mpc.{path}"),
            message,
        })
    }

    fn max_weight(&self) -> f64 {
        self.q1.max(self.q2).max(self.q3).max(self.q4)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionMatrices {
    pub phi: DMatrix<f64>,
    pub lambda: DMatrix<f64>,
    pub gamma: DMatrix<f64>,
    pub n_vehicles: usize,
    pub horizon: usize,
}

impl PredictionMatrices {
    pub fn state_dim(&self) -> usize {
        3 * self.n_vehicles
    }

    /// Stacked prediction `Φx + λu + ΓΔU`.
    pub fn predict(&self, x: &DVector<f64>, u_prev: &DVector<f64>, du: &DVector<f64>) -> DVector<f64> {
        &self.phi * x + &self.lambda * u_prev + &self.gamma * du
    }
}

pub fn build_prediction_matrices(mats: &SystemMatrices, horizon: usize) -> Result<PredictionMatrices> {
    if horizon == 0 {
        return Err(Error::InvalidInput("horizon must be at least 1".into()));
    }
    let a = &mats.a_platoon;
    let b = &mats.b_platoon;
    let nx = a.nrows();
    let nu = b.ncols();

    // powers[n] = Aⁿ, sums[n] = (Σ_{j<n} Aʲ)·B
    let mut powers = Vec::with_capacity(horizon + 1);
    powers.push(DMatrix::<f64>::identity(nx, nx));
    for n in 1..=horizon {
        powers.push(a * &powers[n - 1]);
    }
    let mut sums = Vec::with_capacity(horizon + 1);
    sums.push(DMatrix::<f64>::zeros(nx, nu));
    for n in 1..=horizon {
        sums.push(&sums[n - 1] + &powers[n - 1] * b);
    }

    let mut phi = DMatrix::zeros(nx * horizon, nx);
    let mut lambda = DMatrix::zeros(nx * horizon, nu);
    let mut gamma = DMatrix::zeros(nx * horizon, nu * horizon);
    for n in 1..=horizon {
        let row = (n - 1) * nx;
        phi.view_mut((row, 0), (nx, nx)).copy_from(&powers[n]);
        lambda.view_mut((row, 0), (nx, nu)).copy_from(&sums[n]);
        for m in 1..=n {
            gamma
                .view_mut((row, (m - 1) * nu), (nx, nu))
                .copy_from(&sums[n - m + 1]);
        }
    }
    Ok(PredictionMatrices {
        phi,
        lambda,
        gamma,
        n_vehicles: nu,
        horizon,
    })
}

/// Stacked reference `[X*_{k+1}; …; X*_{k+N}]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceWindow {
    pub stacked: DVector<f64>,
    pub horizon: usize,
}

/// Window of `reference` starting after step `k`; steps past the end hold
/// the final reference state.
pub fn build_reference_window(reference: &[PlatoonState], k: usize, horizon: usize) -> Result<ReferenceWindow> {
    let last = reference
        .len()
        .checked_sub(1)
        .ok_or_else(|| Error::InvalidInput("empty reference trajectory".into()))?;
    let nx = 3 * reference[0].len();
    let mut stacked = DVector::zeros(nx * horizon);
    for n in 1..=horizon {
        let state = &reference[(k + n).min(last)];
        ensure_dim(nx, 3 * state.len(), "reference state")?;
        stacked.rows_mut((n - 1) * nx, nx).copy_from(&state.to_vector());
    }
    Ok(ReferenceWindow { stacked, horizon })
}

/// Stacked inequality data `Ḡ` and `ḡ` over the horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSet {
    /// `(I−1)×I`, −1 on the diagonal and +1 on the first superdiagonal.
    pub spacing: DMatrix<f64>,
    /// Per-step block `Ǧ`.
    pub g_check: DMatrix<f64>,
    /// Per-step vector `g`.
    pub g_small: DVector<f64>,
    pub g_bar: DMatrix<f64>,
    pub g_vec: DVector<f64>,
}

impl ConstraintSet {
    pub fn rows_per_step(&self) -> usize {
        self.g_check.nrows()
    }

    /// Row indices (within one step block) of the spacing constraints.
    pub fn spacing_rows(&self) -> std::ops::Range<usize> {
        0..2 * self.spacing.nrows()
    }
}

pub fn spacing_matrix(n: usize) -> DMatrix<f64> {
    let rows = n.saturating_sub(1);
    let mut t = DMatrix::zeros(rows, n);
    for i in 0..rows {
        t[(i, i)] = -1.0;
        t[(i, i + 1)] = 1.0;
    }
    t
}

/// Constraint rows encode `d_min ≤ p[i−1] − p[i] ≤ d_max`,
/// `v_min ≤ v ≤ v_max` and `a_min ≤ a ≤ a_max` as `Ǧx ≤ −g`.
pub fn build_constraints(cfg: &MpcConfig, n_vehicles: usize, horizon: usize) -> ConstraintSet {
    let n = n_vehicles;
    let gaps = n.saturating_sub(1);
    let spacing = spacing_matrix(n);
    let eye = DMatrix::<f64>::identity(n, n);
    let rows = 2 * gaps + 4 * n;

    let mut g_check = DMatrix::zeros(rows, 3 * n);
    let mut g_small = DVector::zeros(rows);
    // −(p[i−1] − p[i]) ≤ −d_min
    g_check.view_mut((0, 0), (gaps, n)).copy_from(&spacing);
    g_small.rows_mut(0, gaps).fill(cfg.d_min);
    // p[i−1] − p[i] ≤ d_max
    g_check.view_mut((gaps, 0), (gaps, n)).copy_from(&(-&spacing));
    g_small.rows_mut(gaps, gaps).fill(-cfg.d_max);
    let mut row = 2 * gaps;
    for (col, lo, hi) in [(n, cfg.v_min, cfg.v_max), (2 * n, cfg.a_min, cfg.a_max)] {
        g_check.view_mut((row, col), (n, n)).copy_from(&(-&eye));
        g_small.rows_mut(row, n).fill(lo);
        g_check.view_mut((row + n, col), (n, n)).copy_from(&eye);
        g_small.rows_mut(row + n, n).fill(-hi);
        row += 2 * n;
    }

    let mut g_bar = DMatrix::zeros(rows * horizon, 3 * n * horizon);
    let mut g_vec = DVector::zeros(rows * horizon);
    for step in 0..horizon {
        g_bar
            .view_mut((step * rows, step * 3 * n), (rows, 3 * n))
            .copy_from(&g_check);
        g_vec.rows_mut(step * rows, rows).copy_from(&g_small);
    }
    ConstraintSet {
        spacing,
        g_check,
        g_small,
        g_bar,
        g_vec,
    }
}

/// State weight `Ω` over the predicted window.
pub fn state_weights(cfg: &MpcConfig, n_vehicles: usize) -> DVector<f64> {
    let n = n_vehicles;
    let nx = 3 * n;
    let mut omega = DVector::zeros(nx * cfg.horizon);
    let weighted = if cfg.weight_terminal {
        cfg.horizon
    } else {
        cfg.horizon - 1
    };
    for step in 0..weighted {
        let base = step * nx;
        omega.rows_mut(base, n).fill(cfg.q1);
        omega.rows_mut(base + n, n).fill(cfg.q2);
        omega.rows_mut(base + 2 * n, n).fill(cfg.q3);
    }
    omega
}

/// State-independent parts of the condensed problem.
#[derive(Debug, Clone)]
pub struct QpTemplate {
    pub pred: PredictionMatrices,
    pub constraints: ConstraintSet,
    pub omega: DVector<f64>,
    /// `P = 2(Ψ + ΓᵀΩΓ)`
    pub p_mat: DMatrix<f64>,
    /// `2ΓᵀΩ`
    linear_map: DMatrix<f64>,
    /// `ḠΓ`
    g_gamma: DMatrix<f64>,
    /// `Ḡ`
    g_bar: DMatrix<f64>,
    g_vec: DVector<f64>,
}

impl QpTemplate {
    pub fn new(pred: &PredictionMatrices, cfg: &MpcConfig) -> Result<Self> {
        cfg.check()?;
        if cfg.horizon != pred.horizon {
            return Err(Error::DimensionMismatch {
                expected: pred.horizon,
                actual: cfg.horizon,
                context: "MPC horizon",
            });
        }
        let n = pred.n_vehicles;
        let omega = state_weights(cfg, n);
        let gamma = &pred.gamma;
        let omega_gamma = DMatrix::from_fn(gamma.nrows(), gamma.ncols(), |r, c| omega[r] * gamma[(r, c)]);
        let mut p_mat = gamma.transpose() * &omega_gamma;
        for i in 0..p_mat.nrows() {
            p_mat[(i, i)] += cfg.q4;
        }
        p_mat *= 2.0;
        let p_mat = 0.5 * (&p_mat + p_mat.transpose());
        let linear_map = 2.0 * omega_gamma.transpose();
        let constraints = build_constraints(cfg, n, cfg.horizon);
        let g_gamma = &constraints.g_bar * gamma;
        Ok(Self {
            pred: pred.clone(),
            omega,
            p_mat,
            linear_map,
            g_gamma,
            g_bar: constraints.g_bar.clone(),
            g_vec: constraints.g_vec.clone(),
            constraints,
        })
    }

    /// `Φx + λu`: the window predicted with the previous command held.
    pub fn free_response(&self, x: &PlatoonState, u_prev: &[f64]) -> Result<DVector<f64>> {
        let n = self.pred.n_vehicles;
        ensure_dim(n, x.len(), "MPC state")?;
        ensure_dim(n, u_prev.len(), "MPC previous control")?;
        Ok(&self.pred.phi * x.to_vector() + &self.pred.lambda * DVector::from_column_slice(u_prev))
    }

    pub fn instantiate(&self, x: &PlatoonState, u_prev: &[f64], window: &ReferenceWindow) -> Result<QpProblem> {
        let free = self.free_response(x, u_prev)?;
        ensure_dim(free.len(), window.stacked.len(), "reference window")?;
        let q_vec = &self.linear_map * (&free - &window.stacked);
        let h_vec = -(&self.g_bar * &free) - &self.g_vec;
        Ok(QpProblem {
            p_mat: self.p_mat.clone(),
            q_vec,
            g_mat: self.g_gamma.clone(),
            h_vec,
        })
    }
}

pub fn assemble_qp(
    x_k: &PlatoonState,
    u_prev: &[f64],
    window: &ReferenceWindow,
    pred: &PredictionMatrices,
    cfg: &MpcConfig,
) -> Result<QpProblem> {
    QpTemplate::new(pred, cfg)?.instantiate(x_k, u_prev, window)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relaxation {
    None,
    /// Spacing bounds moved into the cost.
    SoftSpacing,
    /// Every bound moved into the cost.
    SoftAll,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcDiagnostics {
    /// The hard-constrained problem had no feasible point.
    pub infeasible: bool,
    pub relaxation: Relaxation,
    pub qp_status: QpStatus,
    pub iterations: usize,
    pub kkt_max: f64,
    /// Optimal increment sequence of the problem that produced `u_p`.
    pub delta_u: DVector<f64>,
    pub active_set: Vec<usize>,
}

/// Append one nonnegative slack per listed row: `g·x − s ≤ h`, `−s ≤ 0`,
/// cost `weight·s²`.
fn soften(problem: &QpProblem, rows: &[usize], weight: f64) -> QpProblem {
    let n = problem.n_vars();
    let m = problem.n_constraints();
    let s = rows.len();
    let mut p_mat = DMatrix::zeros(n + s, n + s);
    p_mat.view_mut((0, 0), (n, n)).copy_from(&problem.p_mat);
    for j in 0..s {
        p_mat[(n + j, n + j)] = 2.0 * weight;
    }
    let mut q_vec = DVector::zeros(n + s);
    q_vec.rows_mut(0, n).copy_from(&problem.q_vec);
    let mut g_mat = DMatrix::zeros(m + s, n + s);
    g_mat.view_mut((0, 0), (m, n)).copy_from(&problem.g_mat);
    let mut h_vec = DVector::zeros(m + s);
    h_vec.rows_mut(0, m).copy_from(&problem.h_vec);
    for (j, &row) in rows.iter().enumerate() {
        g_mat[(row, n + j)] = -1.0;
        g_mat[(m + j, n + j)] = -1.0;
    }
    QpProblem {
        p_mat,
        q_vec,
        g_mat,
        h_vec,
    }
}

/// Solve one receding-horizon step with an already-built template.
pub fn solve_with_template(
    template: &QpTemplate,
    cfg: &MpcConfig,
    x_k: &PlatoonState,
    u_prev: &[f64],
    window: &ReferenceWindow,
    settings: &QpSettings,
    hint: &[usize],
) -> Result<(Vec<f64>, MpcDiagnostics)> {
    let n = template.pred.n_vehicles;
    let hard = template.instantiate(x_k, u_prev, window)?;
    let mut sol = qp::solve_warm(&hard, settings, hint)?;
    let infeasible = sol.status == QpStatus::Infeasible;
    let mut relaxation = Relaxation::None;

    if infeasible {
        let per_step = template.constraints.rows_per_step();
        let spacing: Vec<usize> = (0..cfg.horizon)
            .flat_map(|step| template.constraints.spacing_rows().map(move |r| step * per_step + r))
            .collect();
        let weight = cfg.soft_penalty_scale * cfg.max_weight();
        let soft = soften(&hard, &spacing, weight);
        sol = qp::solve(&soft, settings)?;
        relaxation = Relaxation::SoftSpacing;
        if sol.status == QpStatus::Infeasible {
            let all: Vec<usize> = (0..hard.n_constraints()).collect();
            sol = qp::solve(&soften(&hard, &all, weight), settings)?;
            relaxation = Relaxation::SoftAll;
        }
    }

    let delta_u = sol.x_star.rows(0, n * cfg.horizon).into_owned();
    let u_p = if sol.status == QpStatus::Infeasible {
        u_prev.to_vec()
    } else {
        u_prev.iter().zip(delta_u.iter()).map(|(u, du)| u + du).collect()
    };
    let active_set = if relaxation == Relaxation::None {
        sol.active_set.clone()
    } else {
        Vec::new()
    };
    Ok((
        u_p,
        MpcDiagnostics {
            infeasible,
            relaxation,
            qp_status: sol.status,
            iterations: sol.iterations,
            kkt_max: sol.kkt_residuals.max(),
            delta_u,
            active_set,
        },
    ))
}

pub fn solve_mpc_step(
    x_k: &PlatoonState,
    u_prev: &[f64],
    window: &ReferenceWindow,
    pred: &PredictionMatrices,
    cfg: &MpcConfig,
    settings: &QpSettings,
) -> Result<(Vec<f64>, MpcDiagnostics)> {
    let template = QpTemplate::new(pred, cfg)?;
    solve_with_template(&template, cfg, x_k, u_prev, window, settings, &[])
}

/// Receding-horizon controller holding the previous command between steps.
#[derive(Debug, Clone)]
pub struct MpcController {
    cfg: MpcConfig,
    template: QpTemplate,
    settings: QpSettings,
    u_prev: Vec<f64>,
    warm_start: bool,
    last_active: Vec<usize>,
}

impl MpcController {
    pub fn new(mats: &SystemMatrices, cfg: MpcConfig, settings: QpSettings, u_init: Vec<f64>) -> Result<Self> {
        cfg.check()?;
        ensure_dim(mats.n_vehicles(), u_init.len(), "initial control")?;
        let pred = build_prediction_matrices(mats, cfg.horizon)?;
        let template = QpTemplate::new(&pred, &cfg)?;
        Ok(Self {
            cfg,
            template,
            settings,
            u_prev: u_init,
            warm_start: true,
            last_active: Vec::new(),
        })
    }

    pub fn with_warm_start(mut self, enabled: bool) -> Self {
        self.warm_start = enabled;
        self
    }

    pub fn config(&self) -> &MpcConfig {
        &self.cfg
    }

    pub fn template(&self) -> &QpTemplate {
        &self.template
    }

    pub fn u_prev(&self) -> &[f64] {
        &self.u_prev
    }

    pub fn step(&mut self, x_k: &PlatoonState, window: &ReferenceWindow) -> Result<(Vec<f64>, MpcDiagnostics)> {
        let hint = if self.warm_start {
            self.last_active.clone()
        } else {
            Vec::new()
        };
        let (u_p, diag) = solve_with_template(
            &self.template,
            &self.cfg,
            x_k,
            &self.u_prev,
            window,
            &self.settings,
            &hint,
        )?;
        self.last_active = diag.active_set.clone();
        self.u_prev = u_p.clone();
        Ok((u_p, diag))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{build_system_matrices, DynamicsParams};
    use approx::assert_relative_eq;

    fn setup(n: usize, horizon: usize) -> (SystemMatrices, PredictionMatrices) {
        let mats = build_system_matrices(&DynamicsParams::new(0.1, 0.5, n).unwrap()).unwrap();
        let pred = build_prediction_matrices(&mats, horizon).unwrap();
        (mats, pred)
    }

    fn cruise(n: usize, speed: f64, k: usize) -> PlatoonState {
        let t = k as f64 * 0.1;
        PlatoonState::new(
            (0..n).map(|i| speed * t - 20.0 * i as f64).collect(),
            vec![speed; n],
            vec![0.0; n],
        )
        .unwrap()
    }

    #[test]
    fn horizon_one_matrices() {
        let (mats, pred) = setup(3, 1);
        assert_eq!(pred.phi, mats.a_platoon);
        assert_eq!(pred.lambda, mats.b_platoon);
        assert_eq!(pred.gamma, mats.b_platoon);
    }

    #[test]
    fn gamma_is_block_lower_triangular() {
        let (_, pred) = setup(2, 4);
        let nx = 6;
        let nu = 2;
        for n in 0..4 {
            for m in n + 1..4 {
                assert_eq!(pred.gamma.view((n * nx, m * nu), (nx, nu)).amax(), 0.0);
            }
        }
    }

    #[test]
    fn spacing_toeplitz() {
        let t = spacing_matrix(3);
        assert_eq!(t, DMatrix::from_row_slice(2, 3, &[-1.0, 1.0, 0.0, 0.0, -1.0, 1.0]));
        assert_eq!(spacing_matrix(1).nrows(), 0);
    }

    #[test]
    fn constraint_rows_match_bounds() {
        let cfg = MpcConfig::default();
        let c = build_constraints(&cfg, 3, 1);
        let check = |x: &PlatoonState| {
            let lhs = &c.g_check * x.to_vector() + &c.g_small;
            lhs.iter().all(|&v| v <= 1e-12)
        };
        let ok = PlatoonState::new(vec![40.0, 20.0, 0.0], vec![15.0; 3], vec![0.0; 3]).unwrap();
        assert!(check(&ok));
        // each bound broken in turn must violate at least one row
        let cases = [
            PlatoonState::new(vec![40.0, 30.0, 0.0], vec![15.0; 3], vec![0.0; 3]).unwrap(),
            PlatoonState::new(vec![40.0, 5.0, 0.0], vec![15.0; 3], vec![0.0; 3]).unwrap(),
            PlatoonState::new(vec![40.0, 20.0, 0.0], vec![15.0, -1.0, 15.0], vec![0.0; 3]).unwrap(),
            PlatoonState::new(vec![40.0, 20.0, 0.0], vec![15.0, 31.0, 15.0], vec![0.0; 3]).unwrap(),
            PlatoonState::new(vec![40.0, 20.0, 0.0], vec![15.0; 3], vec![0.0, 0.0, -4.5]).unwrap(),
            PlatoonState::new(vec![40.0, 20.0, 0.0], vec![15.0; 3], vec![4.5, 0.0, 0.0]).unwrap(),
        ];
        for x in &cases {
            assert!(!check(x), "{x:?}");
        }
        // row by row: spacing lower/upper, speed lower/upper, accel lower/upper
        let x = PlatoonState::new(vec![40.0, 22.0, 0.0], vec![10.0, 11.0, 12.0], vec![1.0, 2.0, 3.0]).unwrap();
        let lhs = &c.g_check * x.to_vector();
        let rhs = -&c.g_small;
        assert_relative_eq!(lhs[0], -(40.0 - 22.0));
        assert_relative_eq!(rhs[0], -15.0);
        assert_relative_eq!(lhs[2], 40.0 - 22.0);
        assert_relative_eq!(rhs[2], 30.0);
        assert_relative_eq!(lhs[4], -10.0);
        assert_relative_eq!(rhs[4], 0.0);
        assert_relative_eq!(lhs[7], 10.0);
        assert_relative_eq!(rhs[7], 30.0);
        assert_relative_eq!(lhs[10], -1.0);
        assert_relative_eq!(rhs[10], 4.0);
        assert_relative_eq!(lhs[13], 1.0);
        assert_relative_eq!(rhs[13], 4.0);
    }

    #[test]
    fn pure_increment_penalty() {
        let (_, pred) = setup(2, 3);
        let cfg = MpcConfig {
            horizon: 3,
            q1: 0.0,
            q2: 0.0,
            q3: 0.0,
            q4: 1.0,
            ..MpcConfig::default()
        };
        let x = cruise(2, 15.0, 0);
        let reference: Vec<_> = (0..5).map(|k| cruise(2, 14.0, k)).collect();
        let window = build_reference_window(&reference, 0, 3).unwrap();
        let problem = assemble_qp(&x, &[15.0, 15.0], &window, &pred, &cfg).unwrap();
        assert_relative_eq!(problem.p_mat, DMatrix::from_diagonal_element(6, 6, 2.0), epsilon = 1e-14);
        assert_eq!(problem.q_vec.amax(), 0.0);
        let unconstrained = QpProblem::unconstrained(problem.p_mat.clone(), problem.q_vec.clone()).unwrap();
        let sol = qp::solve(&unconstrained, &QpSettings::default()).unwrap();
        assert!(sol.x_star.amax() < 1e-12);
    }

    #[test]
    fn window_clamps_at_end() {
        let reference: Vec<_> = (0..4).map(|k| cruise(2, 15.0, k)).collect();
        let w = build_reference_window(&reference, 3, 3).unwrap();
        let last = reference[3].to_vector();
        for n in 0..3 {
            assert_eq!(w.stacked.rows(n * 6, 6), last.rows(0, 6));
        }
    }

    #[test]
    fn window_uniform_motion() {
        let reference: Vec<_> = (0..20).map(|k| cruise(1, 15.0, k)).collect();
        let w = build_reference_window(&reference, 2, 4).unwrap();
        for n in 0..4 {
            assert_relative_eq!(w.stacked[n * 3], 15.0 * 0.1 * (3 + n) as f64, epsilon = 1e-12);
            assert_eq!(w.stacked[n * 3 + 1], 15.0);
            assert_eq!(w.stacked[n * 3 + 2], 0.0);
        }
    }

    #[test]
    fn on_reference_is_stationary() {
        let (mats, _) = setup(5, 10);
        let cfg = MpcConfig::default();
        let reference: Vec<_> = (0..40).map(|k| cruise(5, 15.0, k)).collect();
        let mut ctl = MpcController::new(&mats, cfg, QpSettings::default(), vec![15.0; 5]).unwrap();
        let window = build_reference_window(&reference, 0, 10).unwrap();
        let (u, diag) = ctl.step(&reference[0], &window).unwrap();
        assert!(!diag.infeasible);
        assert_eq!(diag.qp_status, QpStatus::Optimal);
        for ui in u {
            assert!((ui - 15.0).abs() < 1e-3, "{ui}");
        }
    }

    #[test]
    fn deterministic_resolve() {
        let (_, pred) = setup(3, 5);
        let cfg = MpcConfig {
            horizon: 5,
            ..MpcConfig::default()
        };
        let x = PlatoonState::new(vec![1.0, -19.0, -41.0], vec![15.3, 14.8, 15.1], vec![0.1, -0.2, 0.0]).unwrap();
        let reference: Vec<_> = (0..10).map(|k| cruise(3, 15.0, k)).collect();
        let window = build_reference_window(&reference, 0, 5).unwrap();
        let settings = QpSettings::default();
        let a = solve_mpc_step(&x, &[15.0; 3], &window, &pred, &cfg, &settings).unwrap();
        let b = solve_mpc_step(&x, &[15.0; 3], &window, &pred, &cfg, &settings).unwrap();
        assert_eq!(a.0, b.0);
    }

    #[test]
    fn spacing_violation_is_relaxed_and_flagged() {
        let (_, pred) = setup(2, 3);
        let cfg = MpcConfig {
            horizon: 3,
            ..MpcConfig::default()
        };
        // 5 m gap closing at 5 m/s: the first predicted gap cannot be controlled
        let x = PlatoonState::new(vec![5.0, 0.0], vec![10.0, 15.0], vec![0.0, 0.0]).unwrap();
        let reference: Vec<_> = (0..10).map(|k| cruise(2, 15.0, k)).collect();
        let window = build_reference_window(&reference, 0, 3).unwrap();
        let problem = assemble_qp(&x, &[10.0, 15.0], &window, &pred, &cfg).unwrap();
        let zero_slack = -&problem.h_vec;
        // spacing lower bound row of the first predicted step is violated at ΔU = 0
        assert!(zero_slack[0] > 0.0);
        let (u, diag) = solve_mpc_step(&x, &[10.0, 15.0], &window, &pred, &cfg, &QpSettings::default()).unwrap();
        assert!(diag.infeasible);
        assert_eq!(diag.relaxation, Relaxation::SoftSpacing);
        assert!(u.iter().all(|v| v.is_finite()));
        // the follower brakes to reopen the gap
        assert!(u[1] < 15.0);
    }

    #[test]
    fn rejects_bad_config() {
        let (mats, _) = setup(2, 3);
        let bad = MpcConfig {
            d_min: 40.0,
            ..MpcConfig::default()
        };
        assert!(matches!(
            MpcController::new(&mats, bad, QpSettings::default(), vec![0.0; 2]),
            Err(Error::Config { .. })
        ));
        let zero = MpcConfig {
            q1: 0.0,
            q2: 0.0,
            q3: 0.0,
            q4: 0.0,
            ..MpcConfig::default()
        };
        assert!(zero.validate().is_err());
    }
}
