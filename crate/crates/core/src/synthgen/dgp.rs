use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureSchema;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearTerm {
    pub feature: String,
    pub coef: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionTerm {
    pub a: String,
    pub b: String,
    pub coef: f64,
}

/// Per-driver effect on daily revenue:
/// `intercept + Σ coef·x + Σ coef·x_a·x_b + latent_weight·latent + N(0, noise_sd²)`,
/// with `x` taken from the extractor's feature row for that driver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectFunction {
    pub intercept: f64,
    #[serde(default)]
    pub linear: Vec<LinearTerm>,
    #[serde(default)]
    pub interactions: Vec<InteractionTerm>,
    #[serde(default)]
    pub latent_weight: f64,
    #[serde(default)]
    pub noise_sd: f64,
}

impl Default for EffectFunction {
    fn default() -> Self {
        Self::plausible_default()
    }
}

/// Effect function with feature names resolved to column indices.
#[derive(Debug, Clone)]
pub struct CompiledEffect {
    intercept: f64,
    linear: Vec<(usize, f64)>,
    interactions: Vec<(usize, usize, f64)>,
    latent_weight: f64,
    noise: Option<Normal<f64>>,
}

impl EffectFunction {
    pub fn zero() -> Self {
        Self::constant(0.0)
    }

    pub fn constant(value: f64) -> Self {
        Self {
            intercept: value,
            linear: Vec::new(),
            interactions: Vec::new(),
            latent_weight: 0.0,
            noise_sd: 0.0,
        }
    }

    /// True when the effect does not depend on any driver.
    pub fn is_constant(&self) -> bool {
        self.linear.iter().all(|t| t.coef == 0.0)
            && self.interactions.iter().all(|t| t.coef == 0.0)
            && self.latent_weight == 0.0
            && self.noise_sd == 0.0
    }

    pub fn compile(&self, schema: &FeatureSchema) -> Result<CompiledEffect> {
        let idx = |name: &str| {
            schema
                .index_of(name)
                .ok_or_else(|| Error::Config(format!("effect function uses unknown feature {name:?}")))
        };
        if !(self.noise_sd.is_finite() && self.noise_sd >= 0.0) {
            return Err(Error::Config(format!("effect noise sd {} is invalid", self.noise_sd)));
        }
        let linear = self
            .linear
            .iter()
            .map(|t| Ok((idx(&t.feature)?, t.coef)))
            .collect::<Result<Vec<_>>>()?;
        let interactions = self
            .interactions
            .iter()
            .map(|t| Ok((idx(&t.a)?, idx(&t.b)?, t.coef)))
            .collect::<Result<Vec<_>>>()?;
        let noise = if self.noise_sd > 0.0 {
            Some(Normal::new(0.0, self.noise_sd).map_err(|e| Error::Config(e.to_string()))?)
        } else {
            None
        };
        Ok(CompiledEffect {
            intercept: self.intercept,
            linear,
            interactions,
            latent_weight: self.latent_weight,
            noise,
        })
    }
}

impl CompiledEffect {
    /// Deterministic part of the effect.
    pub fn systematic(&self, row: &[f64], latent: f64) -> f64 {
        let mut e = self.intercept + self.latent_weight * latent;
        for &(j, c) in &self.linear {
            e += c * row[j];
        }
        for &(a, b, c) in &self.interactions {
            e += c * row[a] * row[b];
        }
        e
    }

    pub fn draw(&self, row: &[f64], latent: f64, rng: &mut impl Rng) -> f64 {
        let noise = self.noise.map_or(0.0, |n| n.sample(rng));
        self.systematic(row, latent) + noise
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn evaluates_linear_and_interaction_terms() {
        let schema = FeatureSchema::standard();
        let f = EffectFunction {
            intercept: 1.0,
            linear: vec![LinearTerm {
                feature: "team_history".into(),
                coef: 2.0,
            }],
            interactions: vec![InteractionTerm {
                a: "team_history".into(),
                b: "team_history".into(),
                coef: -1.0,
            }],
            latent_weight: 0.5,
            noise_sd: 0.0,
        };
        let c = f.compile(&schema).unwrap();
        let mut row = vec![0.0; schema.len()];
        row[schema.index_of("team_history").unwrap()] = 3.0;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(c.draw(&row, 4.0, &mut rng), 1.0 + 6.0 - 9.0 + 2.0);
    }

    #[test]
    fn unknown_feature_is_rejected() {
        let mut f = EffectFunction::zero();
        f.linear.push(LinearTerm {
            feature: "no_such_column".into(),
            coef: 1.0,
        });
        assert!(f.compile(&FeatureSchema::standard()).is_err());
    }

    #[test]
    fn default_compiles_against_standard_schema() {
        EffectFunction::plausible_default()
            .compile(&FeatureSchema::standard())
            .unwrap();
        assert!(EffectFunction::constant(20.0).is_constant());
        assert!(!EffectFunction::plausible_default().is_constant());
    }
}
