use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use platoon_perl::dynamics::{build_system_matrices, DynamicsParams, PlatoonState, SystemMatrices};
use platoon_perl::mpc::{build_prediction_matrices, MpcConfig, QpTemplate, ReferenceWindow};

fn random_vec(len: usize, seed: &mut u64, scale: f64) -> Vec<f64> {
    (0..len)
        .map(|_| {
            *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            scale * (((*seed >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0)
        })
        .collect()
}

/// Roll the stacked model forward `horizon` steps with
/// `U_{k+n} = U_{k−1} + Σ_{j≤n} ΔU_j`; returns the stacked states.
fn rollout(mats: &SystemMatrices, x: &DVector<f64>, u_prev: &[f64], du: &[f64], horizon: usize) -> Vec<DVector<f64>> {
    let n = mats.n_vehicles();
    let mut u = u_prev.to_vec();
    let mut state = x.clone();
    let mut out = Vec::new();
    for step in 0..horizon {
        for i in 0..n {
            u[i] += du[step * n + i];
        }
        state = &mats.a_platoon * &state + &mats.b_platoon * DVector::from_column_slice(&u);
        out.push(state.clone());
    }
    out
}

fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows() * b.nrows(), a.ncols() * b.ncols(), |r, c| {
        a[(r / b.nrows(), c / b.ncols())] * b[(r % b.nrows(), c % b.ncols())]
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn platoon_matrices_are_kronecker_lifts(n in 1usize..6, dt in 0.01f64..0.5, tau in 0.05f64..2.0) {
        let mats = build_system_matrices(&DynamicsParams::new(dt, tau, n).unwrap()).unwrap();
        let a = DMatrix::from_column_slice(3, 3, mats.a_single.as_slice());
        let b = DMatrix::from_column_slice(3, 1, mats.b_single.as_slice());
        let eye = DMatrix::identity(n, n);
        prop_assert_eq!(&mats.a_platoon, &kron(&a, &eye));
        prop_assert_eq!(&mats.b_platoon, &kron(&b, &eye));
    }

    #[test]
    fn prediction_matches_rollout(
        n in 1usize..6,
        horizon in 1usize..11,
        dt in 0.05f64..0.2,
        tau in 0.2f64..1.0,
        seed in any::<u64>(),
    ) {
        let mats = build_system_matrices(&DynamicsParams::new(dt, tau, n).unwrap()).unwrap();
        let pred = build_prediction_matrices(&mats, horizon).unwrap();
        let mut s = seed;
        let x = DVector::from_vec(random_vec(3 * n, &mut s, 20.0));
        let u_prev = random_vec(n, &mut s, 20.0);
        let du = random_vec(n * horizon, &mut s, 2.0);
        let stacked = pred.predict(&x, &DVector::from_column_slice(&u_prev), &DVector::from_column_slice(&du));
        for (step, state) in rollout(&mats, &x, &u_prev, &du, horizon).iter().enumerate() {
            let block = stacked.rows(step * 3 * n, 3 * n);
            prop_assert!((block - state).amax() <= 1e-9);
        }
    }

    #[test]
    fn prediction_matches_rollout_for_arbitrary_matrices(n in 1usize..4, seed in any::<u64>()) {
        let mut s = seed;
        let nx = 3 * n;
        let mats = SystemMatrices {
            a_single: Default::default(),
            b_single: Default::default(),
            a_platoon: DMatrix::from_vec(nx, nx, random_vec(nx * nx, &mut s, 0.6)),
            b_platoon: DMatrix::from_vec(nx, n, random_vec(nx * n, &mut s, 1.0)),
        };
        let horizon = 3;
        let pred = build_prediction_matrices(&mats, horizon).unwrap();
        let x = DVector::from_vec(random_vec(nx, &mut s, 5.0));
        let u_prev = random_vec(n, &mut s, 5.0);
        let du = random_vec(n * horizon, &mut s, 1.0);
        let stacked = pred.predict(&x, &DVector::from_column_slice(&u_prev), &DVector::from_column_slice(&du));
        for (step, state) in rollout(&mats, &x, &u_prev, &du, horizon).iter().enumerate() {
            prop_assert!((stacked.rows(step * nx, nx) - state).amax() <= 1e-9);
        }
    }
}

/// Tracking cost summed directly over the rolled-out window.
fn direct_cost(
    mats: &SystemMatrices,
    cfg: &MpcConfig,
    x: &DVector<f64>,
    u_prev: &[f64],
    reference: &DVector<f64>,
    du: &[f64],
) -> f64 {
    let n = mats.n_vehicles();
    let nx = 3 * n;
    let states = rollout(mats, x, u_prev, du, cfg.horizon);
    let mut cost = 0.0;
    for (step, state) in states.iter().enumerate() {
        let weighted = step + 1 < cfg.horizon || cfg.weight_terminal;
        if weighted {
            for i in 0..nx {
                let q = [cfg.q1, cfg.q2, cfg.q3][i / n];
                let e = state[i] - reference[step * nx + i];
                cost += q * e * e;
            }
        }
        for i in 0..n {
            cost += cfg.q4 * du[step * n + i].powi(2);
        }
    }
    cost
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn condensed_objective_equals_direct_sum(
        q in proptest::array::uniform4(0.0f64..2.0),
        terminal in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let (n, horizon) = (2, 3);
        let cfg = MpcConfig { horizon, q1: q[0], q2: q[1], q3: q[2], q4: q[3] + 0.01, weight_terminal: terminal, ..MpcConfig::default() };
        let mats = build_system_matrices(&DynamicsParams::new(0.1, 0.5, n).unwrap()).unwrap();
        let pred = build_prediction_matrices(&mats, horizon).unwrap();
        let template = QpTemplate::new(&pred, &cfg).unwrap();
        let mut s = seed;
        let xv = random_vec(3 * n, &mut s, 10.0);
        let x = PlatoonState::new(xv[0..n].to_vec(), xv[n..2 * n].to_vec(), xv[2 * n..].to_vec()).unwrap();
        let u_prev = random_vec(n, &mut s, 10.0);
        let window = ReferenceWindow { stacked: DVector::from_vec(random_vec(3 * n * horizon, &mut s, 10.0)), horizon };
        let qp = template.instantiate(&x, &u_prev, &window).unwrap();
        let x_vec = x.to_vector();
        let zero = vec![0.0; n * horizon];
        let constant = direct_cost(&mats, &cfg, &x_vec, &u_prev, &window.stacked, &zero);
        let du = random_vec(n * horizon, &mut s, 3.0);
        let direct = direct_cost(&mats, &cfg, &x_vec, &u_prev, &window.stacked, &du);
        let condensed = qp.objective(&DVector::from_column_slice(&du)) + constant;
        prop_assert!((direct - condensed).abs() <= 1e-9 * direct.abs().max(1.0), "{} vs {}", direct, condensed);
    }

    #[test]
    fn constraint_rows_match_predicted_bounds(seed in any::<u64>()) {
        let (n, horizon) = (3, 4);
        let cfg = MpcConfig { horizon, ..MpcConfig::default() };
        let mats = build_system_matrices(&DynamicsParams::new(0.1, 0.5, n).unwrap()).unwrap();
        let pred = build_prediction_matrices(&mats, horizon).unwrap();
        let template = QpTemplate::new(&pred, &cfg).unwrap();
        let mut s = seed;
        let jitter = random_vec(3 * n, &mut s, 3.0);
        let x = PlatoonState::new(
            (0..n).map(|i| -20.0 * i as f64 + jitter[i]).collect(),
            (0..n).map(|i| 15.0 + jitter[n + i]).collect(),
            (0..n).map(|i| jitter[2 * n + i]).collect(),
        ).unwrap();
        let u_prev = random_vec(n, &mut s, 5.0).iter().map(|u| u + 15.0).collect::<Vec<_>>();
        let window = ReferenceWindow { stacked: DVector::zeros(3 * n * horizon), horizon };
        let qp = template.instantiate(&x, &u_prev, &window).unwrap();
        let du = random_vec(n * horizon, &mut s, 4.0);
        let slack = &qp.g_mat * DVector::from_column_slice(&du) - &qp.h_vec;
        let states = rollout(&mats, &x.to_vector(), &u_prev, &du, horizon);
        let rows = slack.len() / horizon;
        for (step, st) in states.iter().enumerate() {
            let mut expected = Vec::new();
            for i in 1..n {
                expected.push(cfg.d_min - (st[i - 1] - st[i]));
            }
            for i in 1..n {
                expected.push((st[i - 1] - st[i]) - cfg.d_max);
            }
            for (block, lo, hi) in [(1, cfg.v_min, cfg.v_max), (2, cfg.a_min, cfg.a_max)] {
                for i in 0..n {
                    expected.push(lo - st[block * n + i]);
                }
                for i in 0..n {
                    expected.push(st[block * n + i] - hi);
                }
            }
            for (r, e) in expected.iter().enumerate() {
                prop_assert!((slack[step * rows + r] - e).abs() <= 1e-9);
            }
        }
    }
}

#[test]
fn spacing_violation_makes_zero_increment_infeasible() {
    let n = 2;
    let cfg = MpcConfig { horizon: 2, ..MpcConfig::default() };
    let mats = build_system_matrices(&DynamicsParams::new(0.1, 0.5, n).unwrap()).unwrap();
    let pred = build_prediction_matrices(&mats, 2).unwrap();
    let template = QpTemplate::new(&pred, &cfg).unwrap();
    // 10 m apart, closing at 2 m/s
    let x = PlatoonState::new(vec![0.0, -10.0], vec![15.0, 17.0], vec![0.0, 0.0]).unwrap();
    let u_prev = [15.0, 17.0];
    let window = ReferenceWindow { stacked: DVector::zeros(12), horizon: 2 };
    let qp = template.instantiate(&x, &u_prev, &window).unwrap();
    let slack = -&qp.h_vec;
    // first row of each step block: d_min − (p0 − p1) > 0
    let rows = slack.len() / 2;
    assert!(slack[0] > 0.0);
    assert!(slack[rows] > 0.0);
    assert!((1..rows).all(|r| slack[r] <= 0.0));
}
