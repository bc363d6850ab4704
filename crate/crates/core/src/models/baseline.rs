use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    /// Every prediction is the training mean.
    Uniform,
    /// Independent draws from a Gaussian fitted to the training labels.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselinePredictor {
    pub kind: BaselineKind,
    pub mean: f64,
    pub sd: f64,
    pub seed: u64,
}

impl BaselinePredictor {
    pub fn fit(kind: BaselineKind, y: &[f64], seed: u64) -> Result<Self> {
        if y.is_empty() {
            return Err(Error::Fit("no training labels".into()));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Fit("non-finite training label".into()));
        }
        Ok(Self {
            kind,
            mean: stats::mean(y),
            sd: if kind == BaselineKind::Random { stats::sample_sd(y) } else { 0.0 },
            seed,
        })
    }

    /// `n` predictions; the random baseline restarts its stream on every call.
    pub fn predict(&self, n: usize) -> Result<Vec<f64>> {
        match self.kind {
            BaselineKind::Uniform => Ok(vec![self.mean; n]),
            BaselineKind::Random => {
                let dist = Normal::new(self.mean, self.sd).map_err(|e| Error::Fit(e.to_string()))?;
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                Ok((0..n).map(|_| dist.sample(&mut rng)).collect())
            }
        }
    }
}
