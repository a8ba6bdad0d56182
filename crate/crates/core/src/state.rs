//! Finite points in R^d.

use std::fmt;
use std::ops::Index;

use serde::{Deserialize, Serialize};

use crate::error::StateError;

/// A point of the flow state space. Every component is finite and `dim >= 1`.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct StateVec(Vec<f64>);

impl StateVec {
    pub fn new(components: Vec<f64>) -> Result<Self, StateError> {
        if components.is_empty() {
            return Err(StateError::Empty);
        }
        if let Some(index) = components.iter().position(|c| !c.is_finite()) {
            return Err(StateError::NonFinite {
                index,
                value: components[index],
            });
        }
        Ok(Self(components))
    }

    pub fn zeros(dim: usize) -> Result<Self, StateError> {
        Self::new(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// `self + scale * direction`, or `None` if the result leaves the finite range.
    pub fn offset(&self, scale: f64, direction: &StateVec) -> Option<StateVec> {
        debug_assert_eq!(self.dim(), direction.dim());
        let out: Vec<f64> = self
            .0
            .iter()
            .zip(&direction.0)
            .map(|(x, v)| x + scale * v)
            .collect();
        out.iter().all(|c| c.is_finite()).then_some(StateVec(out))
    }

    /// Component-wise difference `self - other`.
    pub fn sub(&self, other: &StateVec) -> StateVec {
        assert_eq!(self.dim(), other.dim(), "dimension mismatch");
        StateVec(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|c| c * c).sum::<f64>().sqrt()
    }

    pub fn distance(&self, other: &StateVec) -> f64 {
        euclidean(&self.0, &other.0)
    }
}

pub(crate) fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

impl TryFrom<Vec<f64>> for StateVec {
    type Error = StateError;

    fn try_from(value: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl From<StateVec> for Vec<f64> {
    fn from(value: StateVec) -> Self {
        value.0
    }
}

impl Index<usize> for StateVec {
    type Output = f64;

    fn index(&self, index: usize) -> &f64 {
        &self.0[index]
    }
}

impl fmt::Debug for StateVec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(&self.0).finish()
    }
}
