//! Tabular Q-learning residual stage.
//!
//! The state is the previous step's speed-command error squashed into
//! `[−σ, σ]` with a sigmoid and discretized by maximum membership over
//! triangular fuzzy sets. Actions are additive speed offsets on a grid of
//! spacing `Δ`; the grid is stored nearest-to-zero first so a row of equal
//! values selects the zero offset. The reward is `−|v_actual − v_commanded|`.
//! Experience is buffered and replayed through the table on a fixed cadence.
//!
//! By default every transition also updates the actions that were not taken,
//! assuming the actual speed would have moved one-for-one with the offset.
//! The table then learns every offset from each observation, so no random
//! exploration is needed and the default exploration rate is zero.

use std::io::{BufRead, Write};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::textio;

#[derive(Debug, Clone, PartialEq)]
pub struct FuzzyEncoder {
    sigma: f64,
    centers: Vec<f64>,
}

impl FuzzyEncoder {
    /// `n_states` triangular memberships evenly spaced on `[−σ, σ]`.
    pub fn uniform(sigma: f64, n_states: usize) -> Result<Self> {
        if n_states < 3 {
            return Err(Error::InvalidInput(format!("need at least 3 membership functions, got {n_states}")));
        }
        let step = 2.0 * sigma / (n_states - 1) as f64;
        let centers = (0..n_states).map(|i| -sigma + step * i as f64).collect();
        Self::with_centers(sigma, centers)
    }

    pub fn with_centers(sigma: f64, centers: Vec<f64>) -> Result<Self> {
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(Error::InvalidInput(format!("sigma must be > 0, got {sigma}")));
        }
        if centers.len() < 3 || centers.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidInput("centers must be strictly increasing, at least 3".into()));
        }
        let span_ok = (centers[0] + sigma).abs() < 1e-12 && (centers[centers.len() - 1] - sigma).abs() < 1e-12;
        if !span_ok {
            return Err(Error::InvalidInput("centers must span [-sigma, sigma]".into()));
        }
        Ok(Self { sigma, centers })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn n_states(&self) -> usize {
        self.centers.len()
    }

    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    /// `σ·(2/(1 + e^{−x}) − 1)`, written as `σ·tanh(x/2)`.
    pub fn squash(&self, x: f64) -> f64 {
        self.sigma * (0.5 * x).tanh()
    }

    /// Triangular membership of `y` in set `i`; the outer sets are
    /// shoulders that stay at 1 beyond their center.
    pub fn membership(&self, i: usize, y: f64) -> f64 {
        let c = self.centers[i];
        let last = self.centers.len() - 1;
        if (i == 0 && y <= c) || (i == last && y >= c) {
            return 1.0;
        }
        let width = if y < c {
            c - self.centers[i - 1]
        } else {
            self.centers[i + 1] - c
        };
        (1.0 - (y - c).abs() / width).max(0.0)
    }

    pub fn encode(&self, speed_error: f64) -> usize {
        let y = if speed_error.is_nan() {
            0.0
        } else {
            self.squash(speed_error)
        };
        let mut best = 0;
        let mut best_mu = f64::NEG_INFINITY;
        for i in 0..self.centers.len() {
            let mu = self.membership(i, y);
            if mu > best_mu {
                best_mu = mu;
                best = i;
            }
        }
        best
    }
}

pub fn encode_state(speed_error: f64, encoder: &FuzzyEncoder) -> usize {
    encoder.encode(speed_error)
}

/// Discrete speed offsets `{lo, lo+Δ, …, hi}` stored as `0, −Δ, +Δ, −2Δ, …`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionGrid {
    delta: f64,
    lo: f64,
    hi: f64,
    values: Vec<f64>,
}

impl ActionGrid {
    pub fn new(lo: f64, hi: f64, delta: f64) -> Result<Self> {
        if !(delta.is_finite() && delta > 0.0) {
            return Err(Error::InvalidInput(format!("delta must be > 0, got {delta}")));
        }
        if !(lo <= 0.0 && hi >= 0.0 && lo.is_finite() && hi.is_finite()) {
            return Err(Error::InvalidInput(format!("action range [{lo}, {hi}] must contain 0")));
        }
        let n_neg = (-lo / delta + 1e-9).floor() as usize;
        let n_pos = (hi / delta + 1e-9).floor() as usize;
        let mut values = vec![0.0];
        for j in 1..=n_neg.max(n_pos) {
            if j <= n_neg {
                values.push(-(j as f64) * delta);
            }
            if j <= n_pos {
                values.push(j as f64 * delta);
            }
        }
        Ok(Self {
            delta,
            lo: -(n_neg as f64) * delta,
            hi: n_pos as f64 * delta,
            values,
        })
    }

    /// Offsets bounded by what the acceleration limits allow over
    /// `scale` sampling intervals.
    pub fn from_accel_limits(a_min: f64, a_max: f64, dt: f64, scale: f64, delta: f64) -> Result<Self> {
        Self::new(a_min * dt * scale, a_max * dt * scale, delta)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn bounds(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }

    pub fn value(&self, index: usize) -> f64 {
        self.values[index]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QTable {
    values: DMatrix<f64>,
    pub alpha: f64,
    pub gamma_discount: f64,
    pub epsilon: f64,
}

impl QTable {
    pub fn new(n_states: usize, n_actions: usize, alpha: f64, gamma_discount: f64, epsilon: f64) -> Result<Self> {
        Self::filled(n_states, n_actions, 0.0, alpha, gamma_discount, epsilon)
    }

    pub fn filled(
        n_states: usize,
        n_actions: usize,
        initial: f64,
        alpha: f64,
        gamma_discount: f64,
        epsilon: f64,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(Error::InvalidInput("Q-table needs at least one state and action".into()));
        }
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::InvalidInput(format!("alpha must be in (0, 1], got {alpha}")));
        }
        if !(0.0..1.0).contains(&gamma_discount) {
            return Err(Error::InvalidInput(format!("discount must be in [0, 1), got {gamma_discount}")));
        }
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(Error::InvalidInput(format!("epsilon must be in [0, 1], got {epsilon}")));
        }
        if !initial.is_finite() {
            return Err(Error::InvalidInput("initial Q-value must be finite".into()));
        }
        Ok(Self {
            values: DMatrix::from_element(n_states, n_actions, initial),
            alpha,
            gamma_discount,
            epsilon,
        })
    }

    pub fn n_states(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_actions(&self) -> usize {
        self.values.ncols()
    }

    pub fn get(&self, state: usize, action: usize) -> f64 {
        self.values[(state, action)]
    }

    pub fn set(&mut self, state: usize, action: usize, value: f64) {
        self.values[(state, action)] = value;
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    /// First index attaining the row maximum.
    pub fn greedy(&self, state: usize) -> usize {
        let row = self.values.row(state);
        let mut best = 0;
        for a in 1..row.len() {
            if row[a] > row[best] {
                best = a;
            }
        }
        best
    }

    pub fn max_value(&self, state: usize) -> f64 {
        self.values.row(state).max()
    }

    /// Header `n_states n_actions sigma delta`, then one row per state.
    pub fn write_snapshot<W: Write>(&self, mut w: W, sigma: f64, delta: f64) -> Result<()> {
        writeln!(w, "{} {} {} {}", self.n_states(), self.n_actions(), sigma, delta)?;
        textio::write_matrix(&mut w, &self.values)
    }

    /// Reads a snapshot; returns the table (with the given learning
    /// parameters) plus the stored `sigma` and `delta`.
    pub fn read_snapshot<R: BufRead>(r: R, alpha: f64, gamma_discount: f64, epsilon: f64) -> Result<(Self, f64, f64)> {
        let mut rows = textio::RowReader::new(r);
        let header = rows.next_row()?;
        if header.len() != 4 {
            return Err(rows.error("expected header `n_states n_actions sigma delta`"));
        }
        let (ns, na) = (header[0] as usize, header[1] as usize);
        let values = rows.read_matrix(ns, na)?;
        let mut table = Self::new(ns, na, alpha, gamma_discount, epsilon)?;
        table.values = values;
        Ok((table, header[2], header[3]))
    }
}

/// ε-greedy choice; ties in the greedy branch go to the lowest index.
pub fn select_action<R: Rng + ?Sized>(table: &QTable, state: usize, rng: &mut R) -> usize {
    select_action_with(table, state, table.epsilon, rng)
}

pub fn select_action_with<R: Rng + ?Sized>(table: &QTable, state: usize, epsilon: f64, rng: &mut R) -> usize {
    if epsilon > 0.0 && rng.random::<f64>() < epsilon {
        rng.random_range(0..table.n_actions())
    } else {
        table.greedy(state)
    }
}

pub fn compute_reward(v_actual: f64, v_commanded: f64) -> f64 {
    -(v_actual - v_commanded).abs()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub state: usize,
    pub action: usize,
    pub reward: f64,
    pub next_state: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExperienceBuffer {
    items: Vec<Transition>,
}

impl ExperienceBuffer {
    pub fn push(&mut self, t: Transition) {
        self.items.push(t);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    fn drain(&mut self) -> std::vec::Drain<'_, Transition> {
        self.items.drain(..)
    }
}

/// Replay the buffer in collection order through the one-step Q-learning
/// rule, then empty it.
pub fn update_qtable(table: &mut QTable, buffer: &mut ExperienceBuffer) -> Result<()> {
    if buffer.is_empty() {
        return Err(Error::InvalidInput("experience buffer is empty".into()));
    }
    for t in buffer.drain() {
        if t.state >= table.n_states() || t.next_state >= table.n_states() || t.action >= table.n_actions() {
            return Err(Error::InvalidInput(format!("transition out of range: {t:?}")));
        }
        let target = t.reward + table.gamma_discount * table.max_value(t.next_state);
        let q = table.get(t.state, t.action);
        table.set(t.state, t.action, q + table.alpha * (target - q));
    }
    Ok(())
}

/// `u_r[i] = u_p[i] + offset(action chosen for vehicle i)`. Returns the
/// adjusted commands and the chosen action indices.
pub fn apply_residual<R: Rng + ?Sized>(
    u_p: &[f64],
    speed_errors: &[f64],
    table: &QTable,
    encoder: &FuzzyEncoder,
    grid: &ActionGrid,
    rng: &mut R,
) -> Result<(Vec<f64>, Vec<usize>)> {
    ensure_dim(u_p.len(), speed_errors.len(), "speed errors")?;
    ensure_dim(grid.len(), table.n_actions(), "action grid")?;
    let mut u_r = Vec::with_capacity(u_p.len());
    let mut actions = Vec::with_capacity(u_p.len());
    for (&u, &e) in u_p.iter().zip(speed_errors) {
        let a = select_action(table, encoder.encode(e), rng);
        u_r.push(u + grid.value(a));
        actions.push(a);
    }
    Ok((u_r, actions))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateError {
    /// `u_p − u_actual`: what the controller planned against what happened.
    Planned,
    /// `u_r − u_actual`: what the drivetrain was sent against what happened.
    Sent,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QConfig {
    /// Squash range of the speed-error state (m/s).
    pub sigma: f64,
    pub n_states: usize,
    /// Action grid spacing (m/s).
    pub delta: f64,
    /// Offsets span `[a_min, a_max]·dt·action_scale`.
    pub action_scale: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Initial value of every table entry.
    pub initial_value: f64,
    /// Command the observed speed is compared with to form the state.
    pub state_error: StateError,
    /// Also learn from every untaken action, assuming the actual speed would
    /// have shifted one-for-one with the offset.
    pub all_action_updates: bool,
    /// Steps between table updates.
    pub update_every: usize,
    /// One table for the whole platoon instead of one per vehicle.
    pub shared_table: bool,
    /// Add the command rate as a second state axis.
    pub rate_axis: bool,
    /// Squash range of the command rate (m/s²).
    pub rate_sigma: f64,
    pub rate_states: usize,
}

impl Default for QConfig {
    fn default() -> Self {
        Self {
            sigma: 1.0,
            n_states: 7,
            delta: 0.1,
            action_scale: 10.0,
            alpha: 0.2,
            gamma: 0.8,
            epsilon_start: 0.0,
            epsilon_end: 0.0,
            initial_value: 0.0,
            state_error: StateError::Planned,
            all_action_updates: true,
            update_every: 20,
            shared_table: true,
            rate_axis: false,
            rate_sigma: 2.0,
            rate_states: 5,
        }
    }
}

impl QConfig {
    pub fn validate(&self) -> std::result::Result<(), (&'static str, String)> {
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(("sigma", "must be > 0".into()));
        }
        if self.n_states < 3 {
            return Err(("n_states", "must be at least 3".into()));
        }
        if !(self.delta.is_finite() && self.delta > 0.0) {
            return Err(("delta", "must be > 0".into()));
        }
        if !(self.action_scale.is_finite() && self.action_scale > 0.0) {
            return Err(("action_scale", "must be > 0".into()));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(("alpha", "must be in (0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(("gamma", "must be in [0, 1)".into()));
        }
        for (name, eps) in [("epsilon_start", self.epsilon_start), ("epsilon_end", self.epsilon_end)] {
            if !(0.0..=1.0).contains(&eps) {
                return Err((name, "must be in [0, 1]".into()));
            }
        }
        if !self.initial_value.is_finite() || self.initial_value > 0.0 {
            return Err(("initial_value", "must be finite and <= 0".into()));
        }
        if self.update_every == 0 {
            return Err(("update_every", "must be at least 1".into()));
        }
        if self.rate_axis && (self.rate_states < 3 || !(self.rate_sigma > 0.0)) {
            return Err(("rate_states", "rate axis needs >= 3 states and rate_sigma > 0".into()));
        }
        Ok(())
    }
}

/// Closed-loop Q-learning residual for a whole platoon.
#[derive(Debug, Clone)]
pub struct QResidual {
    cfg: QConfig,
    encoder: FuzzyEncoder,
    rate_encoder: Option<FuzzyEncoder>,
    grid: ActionGrid,
    tables: Vec<QTable>,
    buffers: Vec<ExperienceBuffer>,
    rng: ChaCha8Rng,
    dt: f64,
    total_steps: usize,
    updates: usize,
    /// Per vehicle: last speed-command error, last MPC command.
    last_error: Vec<f64>,
    last_u_p: Vec<Option<f64>>,
    /// Per vehicle: (state, action) of the pending step.
    pending: Vec<Option<(usize, usize)>>,
}

impl QResidual {
    pub fn new(
        cfg: QConfig,
        n_vehicles: usize,
        a_limits: (f64, f64),
        dt: f64,
        total_steps: usize,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate().map_err(|(path, message)| Error::Config {
            path: format!("q_learning.{path}"),
            message,
        })?;
        let encoder = FuzzyEncoder::uniform(cfg.sigma, cfg.n_states)?;
        let rate_encoder = if cfg.rate_axis {
            Some(FuzzyEncoder::uniform(cfg.rate_sigma, cfg.rate_states)?)
        } else {
            None
        };
        let grid = ActionGrid::from_accel_limits(a_limits.0, a_limits.1, dt, cfg.action_scale, cfg.delta)?;
        let n_states = cfg.n_states * rate_encoder.as_ref().map_or(1, |e| e.n_states());
        let n_tables = if cfg.shared_table { 1 } else { n_vehicles };
        let table = QTable::filled(
            n_states,
            grid.len(),
            cfg.initial_value,
            cfg.alpha,
            cfg.gamma,
            cfg.epsilon_start,
        )?;
        Ok(Self {
            cfg,
            encoder,
            rate_encoder,
            grid,
            tables: vec![table; n_tables],
            buffers: vec![ExperienceBuffer::default(); n_tables],
            rng: ChaCha8Rng::seed_from_u64(seed),
            dt,
            total_steps: total_steps.max(1),
            updates: 0,
            last_error: vec![0.0; n_vehicles],
            last_u_p: vec![None; n_vehicles],
            pending: vec![None; n_vehicles],
        })
    }

    pub fn grid(&self) -> &ActionGrid {
        &self.grid
    }

    pub fn encoder(&self) -> &FuzzyEncoder {
        &self.encoder
    }

    pub fn tables(&self) -> &[QTable] {
        &self.tables
    }

    pub fn updates(&self) -> usize {
        self.updates
    }

    fn table_index(&self, vehicle: usize) -> usize {
        if self.cfg.shared_table {
            0
        } else {
            vehicle
        }
    }

    /// Exploration rate at step `k`, decaying linearly over the run.
    pub fn epsilon_at(&self, k: usize) -> f64 {
        let frac = (k as f64 / (self.total_steps - 1).max(1) as f64).min(1.0);
        self.cfg.epsilon_start + (self.cfg.epsilon_end - self.cfg.epsilon_start) * frac
    }

    fn state_of(&self, vehicle: usize, u_p: f64) -> usize {
        self.state_with_error(vehicle, u_p, self.last_error[vehicle])
    }

    fn state_with_error(&self, vehicle: usize, u_p: f64, error: f64) -> usize {
        let s = self.encoder.encode(error);
        match &self.rate_encoder {
            None => s,
            Some(rate) => {
                let eta = self.last_u_p[vehicle].map_or(0.0, |prev| (u_p - prev) / self.dt);
                s * rate.n_states() + rate.encode(eta)
            }
        }
    }

    /// Adjust the MPC commands for step `k`.
    pub fn adjust(&mut self, k: usize, u_p: &[f64]) -> Vec<f64> {
        // no exploration until the table has seen data
        let epsilon = if self.updates == 0 { 0.0 } else { self.epsilon_at(k) };
        let mut u_r = Vec::with_capacity(u_p.len());
        for (i, &u) in u_p.iter().enumerate() {
            let state = self.state_of(i, u);
            let table = &self.tables[self.table_index(i)];
            let action = select_action_with(table, state, epsilon, &mut self.rng);
            self.pending[i] = Some((state, action));
            u_r.push(u + self.grid.value(action));
        }
        u_r
    }

    /// Record the outcome of step `k`: `u_actual[i]` is the speed the
    /// drivetrain was observed to track.
    pub fn observe(&mut self, k: usize, u_p: &[f64], u_actual: &[f64]) -> Result<()> {
        ensure_dim(self.pending.len(), u_p.len(), "commands")?;
        ensure_dim(u_p.len(), u_actual.len(), "actual speeds")?;
        for i in 0..u_p.len() {
            let pending = self.pending[i].take();
            let offset = pending.map_or(0.0, |(_, a)| self.grid.value(a));
            let sent = u_p[i] + offset;
            self.last_error[i] = match self.cfg.state_error {
                StateError::Planned => u_p[i] - u_actual[i],
                StateError::Sent => sent - u_actual[i],
            };
            let next_state = self.state_of(i, u_p[i]);
            self.last_u_p[i] = Some(u_p[i]);
            if let Some((state, action)) = pending {
                let t = self.table_index(i);
                if self.cfg.all_action_updates {
                    for other in 0..self.grid.len() {
                        let shift = self.grid.value(other) - offset;
                        let actual = u_actual[i] + shift;
                        let error = match self.cfg.state_error {
                            StateError::Planned => u_p[i] - actual,
                            StateError::Sent => sent + shift - actual,
                        };
                        let next_state = self.state_with_error(i, u_p[i], error);
                        self.buffers[t].push(Transition {
                            state,
                            action: other,
                            reward: compute_reward(actual, u_p[i]),
                            next_state,
                        });
                    }
                } else {
                    self.buffers[t].push(Transition {
                        state,
                        action,
                        reward: compute_reward(u_actual[i], u_p[i]),
                        next_state,
                    });
                }
            }
        }
        if (k + 1).is_multiple_of(self.cfg.update_every) {
            for (table, buffer) in self.tables.iter_mut().zip(self.buffers.iter_mut()) {
                if !buffer.is_empty() {
                    update_qtable(table, buffer)?;
                }
            }
            self.updates += 1;
        }
        Ok(())
    }
}
