//! Actuation-error models: the speed the drivetrain actually targets when
//! asked for `u`.
//!
//! * affine: `1.1·u + 0.1 + x`
//! * quadratic: `0.01·u² + u + 0.1 + x`
//!
//! with `x ~ N(0, σ²)` drawn independently per vehicle and step. `σ` is a
//! standard deviation, in the same speed units as `u`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisturbanceKind {
    None,
    Affine,
    Quadratic,
}

impl DisturbanceKind {
    pub const ALL: [DisturbanceKind; 3] = [Self::None, Self::Affine, Self::Quadratic];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Affine => "affine",
            Self::Quadratic => "quadratic",
        }
    }

    /// Noise-free part of the map.
    pub fn nominal(&self, u: f64) -> f64 {
        match self {
            Self::None => u,
            Self::Affine => 1.1 * u + 0.1,
            Self::Quadratic => 0.01 * u * u + u + 0.1,
        }
    }
}

impl std::str::FromStr for DisturbanceKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(Self::None),
            "affine" => Ok(Self::Affine),
            "quadratic" => Ok(Self::Quadratic),
            other => Err(format!("unknown error kind `{other}` (expected none, affine or quadratic)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DisturbanceModel {
    pub kind: DisturbanceKind,
    pub noise_sigma: f64,
}

impl Default for DisturbanceModel {
    fn default() -> Self {
        Self {
            kind: DisturbanceKind::None,
            noise_sigma: 0.3,
        }
    }
}

impl DisturbanceModel {
    pub fn new(kind: DisturbanceKind, noise_sigma: f64) -> Self {
        Self { kind, noise_sigma }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.noise_sigma.is_finite() && self.noise_sigma >= 0.0 {
            Ok(())
        } else {
            Err(format!("noise_sigma must be finite and >= 0, got {}", self.noise_sigma))
        }
    }

    pub fn apply<R: rand::Rng + ?Sized>(&self, u: f64, rng: &mut R) -> f64 {
        if self.kind == DisturbanceKind::None {
            return u;
        }
        let noise = if self.noise_sigma > 0.0 {
            let z: f64 = StandardNormal.sample(rng);
            self.noise_sigma * z
        } else {
            0.0
        };
        self.kind.nominal(u) + noise
    }
}

/// A disturbance model bound to its own seeded generator.
#[derive(Debug, Clone)]
pub struct Actuator {
    model: DisturbanceModel,
    rng: ChaCha8Rng,
}

impl Actuator {
    pub fn new(model: DisturbanceModel, seed: u64) -> Self {
        Self {
            model,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn model(&self) -> &DisturbanceModel {
        &self.model
    }

    pub fn apply(&mut self, u: f64) -> f64 {
        self.model.apply(u, &mut self.rng)
    }

    pub fn apply_all(&mut self, u: &[f64]) -> Vec<f64> {
        u.iter().map(|&ui| self.apply(ui)).collect()
    }
}
