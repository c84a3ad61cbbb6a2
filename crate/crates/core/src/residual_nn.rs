//! Feed-forward ReLU network used as the neural residual baseline.
//!
//! The network maps the MPC speed command to an adjusted command. Inputs and
//! outputs pass through a fixed affine map from `[0, 30]` m/s to `[0, 1]`.
//! It is pretrained to reproduce its input, then refined online on batches of
//! `(u_p, target)` pairs with Adam on the mean squared error.

use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::textio;

/// Speed range normalized to `[0, 1]`.
pub const SPEED_RANGE: (f64, f64) = (0.0, 30.0);

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    sizes: Vec<usize>,
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
}

fn normalize(u: f64) -> f64 {
    (u - SPEED_RANGE.0) / (SPEED_RANGE.1 - SPEED_RANGE.0)
}

fn denormalize(y: f64) -> f64 {
    SPEED_RANGE.0 + y * (SPEED_RANGE.1 - SPEED_RANGE.0)
}

impl MlpModel {
    /// He-initialized weights, zero biases.
    pub fn new(sizes: &[usize], learning_rate: f64, seed: u64) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::InvalidInput(format!("invalid layer sizes {sizes:?}")));
        }
        if sizes[0] != 1 || sizes[sizes.len() - 1] != 1 {
            return Err(Error::InvalidInput("network must be scalar in and scalar out".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            weights.push(DMatrix::from_fn(fan_out, fan_in, |_, _| normal.sample(&mut rng)));
            biases.push(DVector::zeros(fan_out));
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            weights,
            biases,
            learning_rate,
        })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn n_params(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>() + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    /// Network output on normalized input.
    pub fn forward_normalized(&self, x: f64) -> f64 {
        let mut a = DVector::from_element(1, x);
        let last = self.weights.len() - 1;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            a = w * a + b;
            if l < last {
                a.apply(|v| *v = v.max(0.0));
            }
        }
        a[0]
    }

    /// Adjusted speed command for `u_p` (both m/s).
    pub fn forward(&self, u_p: f64) -> f64 {
        denormalize(self.forward_normalized(normalize(u_p)))
    }

    /// Mean squared error over normalized `(input, target)` pairs and its
    /// gradient by backpropagation.
    pub fn loss_and_gradients(&self, batch: &[(f64, f64)]) -> (f64, Gradients) {
        let n_layers = self.weights.len();
        let mut gw: Vec<DMatrix<f64>> = self.weights.iter().map(|w| DMatrix::zeros(w.nrows(), w.ncols())).collect();
        let mut gb: Vec<DVector<f64>> = self.biases.iter().map(|b| DVector::zeros(b.len())).collect();
        let mut loss = 0.0;
        let scale = 1.0 / batch.len().max(1) as f64;

        for &(x, y) in batch {
            // activations[l] is the input to layer l
            let mut activations = Vec::with_capacity(n_layers + 1);
            let mut pre = Vec::with_capacity(n_layers);
            activations.push(DVector::from_element(1, x));
            for l in 0..n_layers {
                let z = &self.weights[l] * &activations[l] + &self.biases[l];
                let a = if l + 1 < n_layers { z.map(|v| v.max(0.0)) } else { z.clone() };
                pre.push(z);
                activations.push(a);
            }
            let err = activations[n_layers][0] - y;
            loss += err * err * scale;

            let mut delta = DVector::from_element(1, 2.0 * err * scale);
            for l in (0..n_layers).rev() {
                gw[l] += &delta * activations[l].transpose();
                gb[l] += &delta;
                if l > 0 {
                    let mut back = self.weights[l].transpose() * &delta;
                    for (d, z) in back.iter_mut().zip(pre[l - 1].iter()) {
                        if *z <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    delta = back;
                }
            }
        }
        (loss, Gradients { weights: gw, biases: gb })
    }

    pub fn loss(&self, batch: &[(f64, f64)]) -> f64 {
        let scale = 1.0 / batch.len().max(1) as f64;
        batch
            .iter()
            .map(|&(x, y)| (self.forward_normalized(x) - y).powi(2) * scale)
            .sum()
    }

    /// Header line with layer sizes, then per layer the weight rows and one
    /// bias row.
    pub fn write_snapshot<W: Write>(&self, mut w: W) -> Result<()> {
        let header: Vec<String> = self.sizes.iter().map(|s| s.to_string()).collect();
        writeln!(w, "{}", header.join(" "))?;
        for (wm, b) in self.weights.iter().zip(&self.biases) {
            textio::write_matrix(&mut w, wm)?;
            textio::write_row(&mut w, b.iter())?;
        }
        Ok(())
    }

    pub fn read_snapshot<R: BufRead>(r: R, learning_rate: f64) -> Result<Self> {
        let mut rows = textio::RowReader::new(r);
        let sizes: Vec<usize> = rows.next_row()?.into_iter().map(|v| v as usize).collect();
        let mut model = Self::new(&sizes, learning_rate, 0)?;
        for l in 0..sizes.len() - 1 {
            model.weights[l] = rows.read_matrix(sizes[l + 1], sizes[l])?;
            model.biases[l] = DVector::from_vec(rows.read_fixed(sizes[l + 1])?);
        }
        Ok(model)
    }
}

/// Adam moment estimates for one model.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Gradients,
    v: Gradients,
    t: i32,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(model: &MlpModel) -> Self {
        let zeros = Gradients {
            weights: model.weights.iter().map(|w| DMatrix::zeros(w.nrows(), w.ncols())).collect(),
            biases: model.biases.iter().map(|b| DVector::zeros(b.len())).collect(),
        };
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, model: &mut MlpModel, grads: &Gradients, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let update = |param: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *param -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        };
        for l in 0..model.weights.len() {
            for (((p, g), m), v) in model.weights[l]
                .iter_mut()
                .zip(grads.weights[l].iter())
                .zip(self.m.weights[l].iter_mut())
                .zip(self.v.weights[l].iter_mut())
            {
                update(p, *g, m, v);
            }
            for (((p, g), m), v) in model.biases[l]
                .iter_mut()
                .zip(grads.biases[l].iter())
                .zip(self.m.biases[l].iter_mut())
                .zip(self.v.biases[l].iter_mut())
            {
                update(p, *g, m, v);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub range: (f64, f64),
    pub samples: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Held-out mean absolute error that must be reached (m/s).
    pub threshold: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            range: (-20.0, 35.0),
            samples: 256,
            epochs: 3000,
            learning_rate: 1e-2,
            threshold: 0.05,
        }
    }
}

/// Mean absolute error `|forward(u) − u|` over an evenly spaced grid.
pub fn identity_mae(model: &MlpModel, range: (f64, f64), points: usize) -> f64 {
    let points = points.max(2);
    let step = (range.1 - range.0) / (points - 1) as f64;
    (0..points)
        .map(|i| {
            let u = range.0 + step * i as f64;
            (model.forward(u) - u).abs()
        })
        .sum::<f64>()
        / points as f64
}

/// Fit the model to the identity map on `cfg.range` with full-batch Adam.
/// Training inputs are jittered uniform samples; the held-out check uses a
/// separate 301-point grid.
pub fn pretrain_identity(model: &MlpModel, cfg: &PretrainConfig, seed: u64) -> Result<MlpModel> {
    let mut model = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = cfg.range;
    let n = cfg.samples.max(2);
    let batch: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let jitter: f64 = rand::Rng::random(&mut rng);
            let u = lo + (hi - lo) * (i as f64 + jitter) / n as f64;
            (normalize(u), normalize(u))
        })
        .collect();
    let mut adam = Adam::new(&model);
    for epoch in 0..cfg.epochs {
        // step decay over the last two thirds
        let lr = if epoch < cfg.epochs / 3 {
            cfg.learning_rate
        } else if epoch < 2 * cfg.epochs / 3 {
            cfg.learning_rate * 0.1
        } else {
            cfg.learning_rate * 0.01
        };
        let (_, grads) = model.loss_and_gradients(&batch);
        adam.step(&mut model, &grads, lr);
    }
    let mae = identity_mae(&model, cfg.range, 301);
    if !(mae <= cfg.threshold) {
        return Err(Error::PretrainFailed {
            mae,
            threshold: cfg.threshold,
        });
    }
    Ok(model)
}

/// `steps` Adam steps on the MSE of a batch given in m/s.
pub fn online_update(model: &mut MlpModel, adam: &mut Adam, batch: &[(f64, f64)], steps: usize) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("online update needs a nonempty batch".into()));
    }
    let normalized: Vec<(f64, f64)> = batch.iter().map(|&(u, t)| (normalize(u), normalize(t))).collect();
    let lr = model.learning_rate;
    for _ in 0..steps {
        let (_, grads) = model.loss_and_gradients(&normalized);
        adam.step(model, &grads, lr);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NnConfig {
    pub layers: Vec<usize>,
    pub learning_rate: f64,
    /// Adam steps per scheduled update.
    pub steps_per_update: usize,
    pub update_every: usize,
    pub pretrain: PretrainConfig,
}

impl Default for NnConfig {
    fn default() -> Self {
        Self {
            layers: vec![1, 16, 16, 1],
            learning_rate: 1e-3,
            steps_per_update: 100,
            update_every: 20,
            pretrain: PretrainConfig::default(),
        }
    }
}

impl NnConfig {
    pub fn validate(&self) -> std::result::Result<(), (&'static str, String)> {
        if self.layers.len() < 2 || self.layers[0] != 1 || self.layers[self.layers.len() - 1] != 1 {
            return Err(("layers", "must start and end with 1".into()));
        }
        if self.layers.contains(&0) {
            return Err(("layers", "layer sizes must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(("learning_rate", "must be > 0".into()));
        }
        if self.update_every == 0 {
            return Err(("update_every", "must be at least 1".into()));
        }
        Ok(())
    }
}

/// Closed-loop MLP residual. Until the first online update the command
/// passes through unchanged.
#[derive(Debug, Clone)]
pub struct NnResidual {
    cfg: NnConfig,
    model: MlpModel,
    adam: Adam,
    batch: Vec<(f64, f64)>,
    updates: usize,
}

impl NnResidual {
    pub fn new(cfg: NnConfig, pretrained: MlpModel) -> Result<Self> {
        cfg.validate().map_err(|(path, message)| Error::Config {
            path: format!("neural_net.{path}"),
            message,
        })?;
        let adam = Adam::new(&pretrained);
        Ok(Self {
            cfg,
            model: pretrained,
            adam,
            batch: Vec::new(),
            updates: 0,
        })
    }

    /// Build and pretrain a fresh model.
    pub fn pretrained(cfg: NnConfig, seed: u64) -> Result<Self> {
        let model = MlpModel::new(&cfg.layers, cfg.learning_rate, seed)?;
        let model = pretrain_identity(&model, &cfg.pretrain, seed)?;
        Self::new(cfg, model)
    }

    pub fn model(&self) -> &MlpModel {
        &self.model
    }

    pub fn updates(&self) -> usize {
        self.updates
    }

    pub fn adjust(&self, u_p: &[f64]) -> Vec<f64> {
        if self.updates == 0 {
            return u_p.to_vec();
        }
        u_p.iter().map(|&u| self.model.forward(u)).collect()
    }

    /// `u_r` is what this stage sent for `u_p`. The supervised target shifts
    /// it by the remaining speed discrepancy: `u_r + (u_p − u_actual)`, whose
    /// fixed point makes the actuated speed equal `u_p`.
    pub fn observe(&mut self, k: usize, u_p: &[f64], u_r: &[f64], u_actual: &[f64]) -> Result<()> {
        crate::error::ensure_dim(u_p.len(), u_r.len(), "adjusted commands")?;
        crate::error::ensure_dim(u_p.len(), u_actual.len(), "actual speeds")?;
        for ((&u, &ur), &ua) in u_p.iter().zip(u_r).zip(u_actual) {
            self.batch.push((u, ur + (u - ua)));
        }
        if (k + 1).is_multiple_of(self.cfg.update_every) && !self.batch.is_empty() {
            let batch = std::mem::take(&mut self.batch);
            online_update(&mut self.model, &mut self.adam, &batch, self.cfg.steps_per_update)?;
            if !self.model.is_finite() {
                return Err(Error::InvalidInput("network parameters became non-finite".into()));
            }
            self.updates += 1;
        }
        Ok(())
    }
}
