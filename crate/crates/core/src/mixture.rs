//! 2D Gaussian mixtures for the synthetic source and target distributions.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::MixtureError;
use crate::state::StateVec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentSpec {
    pub weight: f64,
    pub mean: [f64; 2],
    pub covariance: [[f64; 2]; 2],
}

/// Serializable mixture description; validated into a [`GaussianMixture`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub components: Vec<ComponentSpec>,
}

impl MixtureSpec {
    /// Equal weights, identity covariances.
    pub fn isotropic(means: &[[f64; 2]]) -> Self {
        let w = 1.0 / means.len() as f64;
        Self {
            components: means
                .iter()
                .map(|&mean| ComponentSpec {
                    weight: w,
                    mean,
                    covariance: [[1.0, 0.0], [0.0, 1.0]],
                })
                .collect(),
        }
    }

    /// Two unit components at (-8, +-3).
    pub fn default_source() -> Self {
        Self::isotropic(&[[-8.0, 3.0], [-8.0, -3.0]])
    }

    /// Three unit components at (8, -4), (8, 0), (8, 4).
    pub fn default_target() -> Self {
        Self::isotropic(&[[8.0, -4.0], [8.0, 0.0], [8.0, 4.0]])
    }

    pub fn build(&self) -> Result<GaussianMixture, MixtureError> {
        GaussianMixture::new(self.clone())
    }
}

#[derive(Debug, Clone)]
struct Component {
    mean: [f64; 2],
    /// Lower Cholesky factor of the covariance.
    chol: [[f64; 2]; 2],
}

#[derive(Debug, Clone)]
pub struct GaussianMixture {
    spec: MixtureSpec,
    components: Vec<Component>,
    picker: WeightedIndex<f64>,
}

impl GaussianMixture {
    pub fn new(spec: MixtureSpec) -> Result<Self, MixtureError> {
        if spec.components.is_empty() {
            return Err(MixtureError::Empty);
        }
        let total: f64 = spec.components.iter().map(|c| c.weight).sum();
        let weights_ok = spec
            .components
            .iter()
            .all(|c| c.weight.is_finite() && c.weight > 0.0);
        if !weights_ok || (total - 1.0).abs() > 1e-12 {
            return Err(MixtureError::Weights(total));
        }
        let mut components = Vec::with_capacity(spec.components.len());
        for (i, c) in spec.components.iter().enumerate() {
            if c.mean.iter().any(|m| !m.is_finite()) {
                return Err(MixtureError::Mean(i));
            }
            let chol = cholesky(&c.covariance).ok_or(MixtureError::Covariance(i))?;
            components.push(Component { mean: c.mean, chol });
        }
        let picker = WeightedIndex::new(spec.components.iter().map(|c| c.weight))
            .map_err(|_| MixtureError::Weights(total))?;
        Ok(Self {
            spec,
            components,
            picker,
        })
    }

    pub fn spec(&self) -> &MixtureSpec {
        &self.spec
    }

    pub fn num_components(&self) -> usize {
        self.components.len()
    }

    /// Draws one point together with the index of its component.
    pub fn sample_labeled<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, StateVec) {
        let k = self.picker.sample(rng);
        let c = &self.components[k];
        let z0: f64 = rng.sample(StandardNormal);
        let z1: f64 = rng.sample(StandardNormal);
        let x = c.mean[0] + c.chol[0][0] * z0;
        let y = c.mean[1] + c.chol[1][0] * z0 + c.chol[1][1] * z1;
        (k, StateVec::new(vec![x, y]).expect("finite sample"))
    }

    pub fn sample_with<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Vec<StateVec> {
        (0..n).map(|_| self.sample_labeled(rng).1).collect()
    }

    /// `n` i.i.d. draws, reproducible per seed.
    pub fn sample(&self, n: usize, seed: u64) -> Vec<StateVec> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.sample_with(&mut rng, n)
    }
}

fn cholesky(cov: &[[f64; 2]; 2]) -> Option<[[f64; 2]; 2]> {
    let [[a, b], [c, d]] = *cov;
    if ![a, b, c, d].iter().all(|v| v.is_finite()) {
        return None;
    }
    let scale = a.abs().max(d.abs()).max(1.0);
    if (b - c).abs() > 1e-12 * scale || a <= 0.0 {
        return None;
    }
    let l00 = a.sqrt();
    let l10 = b / l00;
    let rest = d - l10 * l10;
    if rest <= 0.0 {
        return None;
    }
    Some([[l00, 0.0], [l10, rest.sqrt()]])
}
