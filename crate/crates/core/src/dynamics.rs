//! Discrete-time longitudinal dynamics.
//!
//! Every vehicle is a third-order model driven by a commanded speed `u`:
//!
//! ```text
//! p' = p + v·dt + ½·a·dt²
//! v' = v + a·dt
//! a' = (dt/τ)·(u − v)
//! ```
//!
//! The acceleration row does not carry `a` forward; the next acceleration is
//! set entirely by the speed error seen through the drivetrain lag `τ`.
//!
//! A platoon of `I` identical vehicles is stacked in grouped order
//! `[p¹..pᴵ, v¹..vᴵ, a¹..aᴵ]`, so the lifted matrices are `A ⊗ E_I` and
//! `B ⊗ E_I`.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, ensure_finite, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    /// Position (m).
    pub p: f64,
    /// Speed (m/s).
    pub v: f64,
    /// Acceleration (m/s²).
    pub a: f64,
}

impl VehicleState {
    pub fn new(p: f64, v: f64, a: f64) -> Self {
        Self { p, v, a }
    }

    pub fn is_finite(&self) -> bool {
        self.p.is_finite() && self.v.is_finite() && self.a.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicsParams {
    /// Sampling interval (s).
    pub dt: f64,
    /// Drivetrain inertial delay (s).
    pub tau: f64,
    /// Number of stacked vehicles.
    pub n_vehicles: usize,
}

impl Default for DynamicsParams {
    fn default() -> Self {
        Self {
            dt: 0.1,
            tau: 0.5,
            n_vehicles: 5,
        }
    }
}

impl DynamicsParams {
    pub fn new(dt: f64, tau: f64, n_vehicles: usize) -> Result<Self> {
        let params = Self {
            dt,
            tau,
            n_vehicles,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::InvalidInput(format!("dt must be > 0, got {}", self.dt)));
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::InvalidInput(format!("tau must be > 0, got {}", self.tau)));
        }
        if self.n_vehicles == 0 {
            return Err(Error::InvalidInput("platoon needs at least one vehicle".into()));
        }
        Ok(())
    }

    /// Drivetrain gain `dt/τ`.
    pub fn gain(&self) -> f64 {
        self.dt / self.tau
    }
}

/// One step of the single-vehicle model.
pub fn step_vehicle(state: VehicleState, u: f64, params: &DynamicsParams) -> Result<VehicleState> {
    params.validate()?;
    if !state.is_finite() || !u.is_finite() {
        return Err(Error::InvalidInput("vehicle state and command must be finite".into()));
    }
    let dt = params.dt;
    let k = params.gain();
    Ok(VehicleState {
        p: state.p + state.v * dt + 0.5 * state.a * dt * dt,
        v: state.v + state.a * dt,
        a: -k * state.v + k * u,
    })
}

/// Stacked state of `I` vehicles. Index 0 is the platoon head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlatoonState {
    pub positions: Vec<f64>,
    pub velocities: Vec<f64>,
    pub accelerations: Vec<f64>,
}

impl PlatoonState {
    pub fn new(positions: Vec<f64>, velocities: Vec<f64>, accelerations: Vec<f64>) -> Result<Self> {
        let n = positions.len();
        ensure_dim(n, velocities.len(), "platoon velocities")?;
        ensure_dim(n, accelerations.len(), "platoon accelerations")?;
        let state = Self {
            positions,
            velocities,
            accelerations,
        };
        ensure_finite(state.to_vector().as_slice(), "platoon state")?;
        Ok(state)
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            positions: vec![0.0; n],
            velocities: vec![0.0; n],
            accelerations: vec![0.0; n],
        }
    }

    pub fn from_vehicles(vehicles: &[VehicleState]) -> Self {
        Self {
            positions: vehicles.iter().map(|s| s.p).collect(),
            velocities: vehicles.iter().map(|s| s.v).collect(),
            accelerations: vehicles.iter().map(|s| s.a).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn vehicle(&self, i: usize) -> VehicleState {
        VehicleState::new(self.positions[i], self.velocities[i], self.accelerations[i])
    }

    pub fn vehicles(&self) -> impl Iterator<Item = VehicleState> + '_ {
        (0..self.len()).map(|i| self.vehicle(i))
    }

    /// Serialize as `[p.., v.., a..]`.
    pub fn to_vector(&self) -> DVector<f64> {
        let n = self.len();
        DVector::from_iterator(
            3 * n,
            self.positions
                .iter()
                .chain(&self.velocities)
                .chain(&self.accelerations)
                .copied(),
        )
    }

    pub fn from_vector(x: &DVector<f64>) -> Result<Self> {
        if !x.len().is_multiple_of(3) {
            return Err(Error::InvalidInput(format!(
                "stacked state length {} is not a multiple of 3",
                x.len()
            )));
        }
        let n = x.len() / 3;
        Ok(Self {
            positions: x.rows(0, n).iter().copied().collect(),
            velocities: x.rows(n, n).iter().copied().collect(),
            accelerations: x.rows(2 * n, n).iter().copied().collect(),
        })
    }

    /// Gaps `p[i-1] − p[i]` between consecutive members.
    pub fn spacings(&self) -> Vec<f64> {
        self.positions.windows(2).map(|w| w[0] - w[1]).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SystemMatrices {
    pub a_single: Matrix3<f64>,
    pub b_single: Vector3<f64>,
    pub a_platoon: DMatrix<f64>,
    pub b_platoon: DMatrix<f64>,
}

impl SystemMatrices {
    pub fn n_vehicles(&self) -> usize {
        self.b_platoon.ncols()
    }
}

pub fn build_system_matrices(params: &DynamicsParams) -> Result<SystemMatrices> {
    params.validate()?;
    let dt = params.dt;
    let k = params.gain();
    #[rustfmt::skip]
    let a_single = Matrix3::new(
        1.0, dt,  0.5 * dt * dt,
        0.0, 1.0, dt,
        0.0, -k,  0.0,
    );
    let b_single = Vector3::new(0.0, 0.0, k);

    let eye = DMatrix::<f64>::identity(params.n_vehicles, params.n_vehicles);
    let a_dyn = DMatrix::from_column_slice(3, 3, a_single.as_slice());
    let b_dyn = DMatrix::from_column_slice(3, 1, b_single.as_slice());
    Ok(SystemMatrices {
        a_single,
        b_single,
        a_platoon: a_dyn.kronecker(&eye),
        b_platoon: b_dyn.kronecker(&eye),
    })
}

pub fn step_platoon(x: &PlatoonState, u: &[f64], mats: &SystemMatrices) -> Result<PlatoonState> {
    let n = mats.n_vehicles();
    ensure_dim(n, x.len(), "platoon state")?;
    ensure_dim(n, u.len(), "platoon control")?;
    let next = &mats.a_platoon * x.to_vector() + &mats.b_platoon * DVector::from_column_slice(u);
    PlatoonState::from_vector(&next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn params() -> DynamicsParams {
        DynamicsParams::new(0.1, 0.5, 5).unwrap()
    }

    #[test]
    fn vehicle_equilibrium() {
        let s = step_vehicle(VehicleState::new(0.0, 15.0, 0.0), 15.0, &params()).unwrap();
        assert_relative_eq!(s.p, 1.5, epsilon = 1e-12);
        assert_relative_eq!(s.v, 15.0, epsilon = 1e-12);
        assert_relative_eq!(s.a, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn vehicle_speed_step() {
        let s = step_vehicle(VehicleState::new(0.0, 15.0, 0.0), 16.0, &params()).unwrap();
        assert_relative_eq!(s.p, 1.5, epsilon = 1e-12);
        assert_relative_eq!(s.v, 15.0, epsilon = 1e-12);
        assert_relative_eq!(s.a, 0.2, epsilon = 1e-12);
    }

    #[test]
    fn vehicle_zero_fixed_point() {
        let s = step_vehicle(VehicleState::new(0.0, 0.0, 0.0), 0.0, &params()).unwrap();
        assert_eq!(s, VehicleState::new(0.0, 0.0, 0.0));
    }

    #[test]
    fn rejects_non_finite() {
        assert!(step_vehicle(VehicleState::new(f64::NAN, 0.0, 0.0), 0.0, &params()).is_err());
        assert!(step_vehicle(VehicleState::new(0.0, 0.0, 0.0), f64::INFINITY, &params()).is_err());
        assert!(DynamicsParams::new(0.0, 0.5, 1).is_err());
        assert!(DynamicsParams::new(0.1, -1.0, 1).is_err());
        assert!(DynamicsParams::new(0.1, 0.5, 0).is_err());
    }

    #[test]
    fn single_vehicle_matrices() {
        let m = build_system_matrices(&params()).unwrap();
        #[rustfmt::skip]
        let expected = Matrix3::new(
            1.0, 0.1, 0.005,
            0.0, 1.0, 0.1,
            0.0, -0.2, 0.0,
        );
        assert_relative_eq!(m.a_single, expected, epsilon = 1e-15);
        assert_relative_eq!(m.b_single, Vector3::new(0.0, 0.0, 0.2), epsilon = 1e-15);
        assert_eq!(m.a_platoon.shape(), (15, 15));
        assert_eq!(m.b_platoon.shape(), (15, 5));
    }

    #[test]
    fn one_vehicle_lift_is_the_single_model() {
        let m = build_system_matrices(&DynamicsParams::new(0.1, 0.5, 1).unwrap()).unwrap();
        for r in 0..3 {
            for c in 0..3 {
                assert_eq!(m.a_platoon[(r, c)], m.a_single[(r, c)]);
            }
            assert_eq!(m.b_platoon[(r, 0)], m.b_single[r]);
        }
    }

    #[test]
    fn platoon_equilibrium() {
        let p = params();
        let m = build_system_matrices(&p).unwrap();
        let x = PlatoonState::new(
            vec![0.0, -20.0, -40.0, -60.0, -80.0],
            vec![15.0; 5],
            vec![0.0; 5],
        )
        .unwrap();
        let next = step_platoon(&x, &[15.0; 5], &m).unwrap();
        assert_eq!(next.velocities, x.velocities);
        assert_eq!(next.accelerations, x.accelerations);
        for (a, b) in next.positions.iter().zip(&x.positions) {
            assert_relative_eq!(a - b, 1.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn platoon_zero() {
        let m = build_system_matrices(&params()).unwrap();
        let next = step_platoon(&PlatoonState::zeros(5), &[0.0; 5], &m).unwrap();
        assert_eq!(next, PlatoonState::zeros(5));
    }

    #[test]
    fn platoon_dimension_mismatch() {
        let m = build_system_matrices(&params()).unwrap();
        assert!(matches!(
            step_platoon(&PlatoonState::zeros(5), &[0.0; 4], &m),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(step_platoon(&PlatoonState::zeros(3), &[0.0; 5], &m).is_err());
    }

    #[test]
    fn serialization_is_grouped() {
        let x = PlatoonState::new(vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]).unwrap();
        assert_eq!(x.to_vector().as_slice(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(PlatoonState::from_vector(&x.to_vector()).unwrap(), x);
        assert_eq!(x.spacings(), vec![-1.0]);
    }
}
