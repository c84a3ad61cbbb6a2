use proptest::prelude::*;

use platoon_perl::residual_nn::{identity_mae, pretrain_identity, MlpModel, PretrainConfig};
use platoon_perl::residual_q::{update_qtable, ExperienceBuffer, QTable, Transition};

/// Q* of a deterministic MDP by value iteration.
fn value_iteration(next: &[Vec<usize>], reward: &[Vec<f64>], gamma: f64) -> Vec<Vec<f64>> {
    let (ns, na) = (next.len(), next[0].len());
    let mut q = vec![vec![0.0; na]; ns];
    for _ in 0..10_000 {
        let v: Vec<f64> = q.iter().map(|row| row.iter().cloned().fold(f64::MIN, f64::max)).collect();
        let mut delta = 0.0_f64;
        for s in 0..ns {
            for a in 0..na {
                let new = reward[s][a] + gamma * v[next[s][a]];
                delta = delta.max((new - q[s][a]).abs());
                q[s][a] = new;
            }
        }
        if delta < 1e-14 {
            break;
        }
    }
    q
}

fn train(next: &[Vec<usize>], reward: &[Vec<f64>], alpha: f64, gamma: f64, sweeps: usize) -> QTable {
    let (ns, na) = (next.len(), next[0].len());
    let mut table = QTable::new(ns, na, alpha, gamma, 0.0).unwrap();
    let mut buffer = ExperienceBuffer::default();
    for _ in 0..sweeps {
        for s in 0..ns {
            for a in 0..na {
                buffer.push(Transition {
                    state: s,
                    action: a,
                    reward: reward[s][a],
                    next_state: next[s][a],
                });
            }
        }
        update_qtable(&mut table, &mut buffer).unwrap();
        assert!(buffer.is_empty());
    }
    table
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for a in 1..row.len() {
        if row[a] > row[best] {
            best = a;
        }
    }
    best
}

#[test]
fn three_state_mdp_matches_value_iteration() {
    let next = vec![vec![0, 1, 2], vec![0, 2, 1], vec![2, 0, 1]];
    let reward = vec![vec![-1.0, -0.5, -2.0], vec![-0.3, -1.5, -0.8], vec![-0.1, -2.5, -1.2]];
    let gamma = 0.8;
    let oracle = value_iteration(&next, &reward, gamma);
    let table = train(&next, &reward, 0.5, gamma, 400);
    for s in 0..3 {
        for a in 0..3 {
            assert!((table.get(s, a) - oracle[s][a]).abs() <= 1e-6, "Q({s},{a}) {} vs {}", table.get(s, a), oracle[s][a]);
        }
        assert_eq!(table.greedy(s), argmax(&oracle[s]));
    }
}

#[test]
fn two_state_chain_matches_value_iteration() {
    let next = vec![vec![0, 1], vec![0, 1]];
    let reward = vec![vec![-1.0, -0.2], vec![-0.7, 0.0]];
    let gamma = 0.9;
    let oracle = value_iteration(&next, &reward, gamma);
    let table = train(&next, &reward, 0.3, gamma, 2000);
    for s in 0..2 {
        for a in 0..2 {
            assert!((table.get(s, a) - oracle[s][a]).abs() <= 1e-6);
        }
    }
}

proptest! {
    #[test]
    fn q_values_stay_bounded(
        gamma in 0.0f64..0.95,
        alpha in 0.01f64..1.0,
        steps in proptest::collection::vec((0usize..4, 0usize..5, 0.0f64..1.0, 0usize..4), 1..300),
    ) {
        let r_max = 2.0;
        let mut table = QTable::new(4, 5, alpha, gamma, 0.0).unwrap();
        let mut buffer = ExperienceBuffer::default();
        let lo = -r_max / (1.0 - gamma) - 1e-9;
        for (state, action, r, next_state) in steps {
            buffer.push(Transition { state, action, reward: -r_max * r, next_state });
            update_qtable(&mut table, &mut buffer).unwrap();
            prop_assert!(table.values().iter().all(|&q| q >= lo && q <= 0.0));
        }
    }
}

fn flatten(model: &MlpModel) -> Vec<f64> {
    model
        .weights
        .iter()
        .zip(&model.biases)
        .flat_map(|(w, b)| w.iter().chain(b.iter()).copied().collect::<Vec<_>>())
        .collect()
}

fn param_mut(model: &mut MlpModel, mut idx: usize) -> &mut f64 {
    for l in 0..model.weights.len() {
        let nw = model.weights[l].len();
        if idx < nw {
            return &mut model.weights[l].as_mut_slice()[idx];
        }
        idx -= nw;
        let nb = model.biases[l].len();
        if idx < nb {
            return &mut model.biases[l].as_mut_slice()[idx];
        }
        idx -= nb;
    }
    panic!("parameter index out of range")
}

#[test]
fn backprop_matches_finite_differences() {
    for seed in 0..5 {
        let mut model = MlpModel::new(&[1, 16, 16, 1], 1e-3, seed).unwrap();
        for b in model.biases.iter_mut() {
            b.iter_mut().enumerate().for_each(|(i, v)| *v = 0.05 * ((i as f64 * 1.7 + seed as f64).sin()));
        }
        let batch: Vec<(f64, f64)> = (0..7).map(|i| (0.1 + 0.13 * i as f64, 0.3 * (i as f64).cos())).collect();
        let (_, grads) = model.loss_and_gradients(&batch);
        let analytic: Vec<f64> = grads
            .weights
            .iter()
            .zip(&grads.biases)
            .flat_map(|(w, b)| w.iter().chain(b.iter()).copied().collect::<Vec<_>>())
            .collect();
        let h = 1e-6;
        let mut numeric = Vec::with_capacity(analytic.len());
        for idx in 0..analytic.len() {
            let mut plus = model.clone();
            *param_mut(&mut plus, idx) += h;
            let mut minus = model.clone();
            *param_mut(&mut minus, idx) -= h;
            numeric.push((plus.loss(&batch) - minus.loss(&batch)) / (2.0 * h));
        }
        // per tensor, in the flattened order
        let mut offset = 0;
        for len in model.weights.iter().zip(&model.biases).flat_map(|(w, b)| [w.len(), b.len()]) {
            let a = &analytic[offset..offset + len];
            let n = &numeric[offset..offset + len];
            let diff = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(n.iter().map(|x| x * x).sum::<f64>().sqrt());
            assert!(diff <= 1e-4 * scale.max(1e-8), "seed {seed}: relative error {}", diff / scale);
            offset += len;
        }
        assert_eq!(offset, flatten(&model).len());
    }
}

#[test]
fn identity_pretraining_reaches_threshold() {
    let model = MlpModel::new(&[1, 16, 16, 1], 1e-3, 3).unwrap();
    let cfg = PretrainConfig::default();
    let trained = pretrain_identity(&model, &cfg, 3).unwrap();
    assert!(identity_mae(&trained, (0.0, 30.0), 301) <= 0.05);
    assert!((trained.forward(15.0) - 15.0).abs() <= 0.05);
    let again = pretrain_identity(&model, &cfg, 3).unwrap();
    assert_eq!(trained, again);
}

#[test]
fn more_pretraining_samples_stay_within_threshold() {
    let model = MlpModel::new(&[1, 16, 16, 1], 1e-3, 5).unwrap();
    let cfg = PretrainConfig {
        samples: 512,
        ..PretrainConfig::default()
    };
    let trained = pretrain_identity(&model, &cfg, 5).unwrap();
    assert!(identity_mae(&trained, (0.0, 30.0), 301) <= 0.05);
}
