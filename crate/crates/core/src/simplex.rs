//! Probability-simplex vectors and the softmax map onto them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on `sum = 1` accepted by [`SimplexVector::new`].
pub const SIMPLEX_TOL: f64 = 1e-10;

/// Nonnegative weights summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct SimplexVector(Vec<f64>);

impl SimplexVector {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Input("simplex vector must be non-empty".into()));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Input(format!("simplex weights must be finite and nonnegative: {weights:?}")));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::Input(format!("simplex weights sum to {sum}, not 1")));
        }
        Ok(Self(weights))
    }

    /// Rescales nonnegative weights to sum to one.
    pub fn normalized(weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Input(format!("cannot normalize {weights:?}")));
        }
        let sum: f64 = weights.iter().sum();
        if !(sum > 0.0) {
            return Err(Error::Input("cannot normalize an all-zero weight vector".into()));
        }
        Ok(Self(weights.into_iter().map(|w| w / sum).collect()))
    }

    pub fn uniform(k: usize) -> Self {
        Self(vec![1.0 / k as f64; k])
    }

    /// Softmax of free parameters, renormalized so the sum is exact to rounding.
    pub fn from_logits(z: &[f64]) -> Self {
        Self(softmax(z))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl std::ops::Index<usize> for SimplexVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl TryFrom<Vec<f64>> for SimplexVector {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<SimplexVector> for Vec<f64> {
    fn from(s: SimplexVector) -> Self {
        s.0
    }
}

/// Max-subtracted softmax.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= sum);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn validates_weights() {
        assert!(SimplexVector::new(vec![0.25, 0.75]).is_ok());
        assert!(SimplexVector::new(vec![0.5, 0.6]).is_err());
        assert!(SimplexVector::new(vec![-0.1, 1.1]).is_err());
        assert!(SimplexVector::new(vec![]).is_err());
        assert_eq!(SimplexVector::normalized(vec![1.0, 3.0]).unwrap().as_slice(), &[0.25, 0.75]);
    }

    #[test]
    fn json_rejects_off_simplex() {
        let ok: SimplexVector = serde_json::from_str("[0.5,0.5]").unwrap();
        assert_eq!(ok.len(), 2);
        assert!(serde_json::from_str::<SimplexVector>("[0.5,0.4]").is_err());
    }

    #[test]
    fn softmax_handles_huge_logits() {
        let s = softmax(&[1000.0, 1000.0, -1000.0]);
        assert!((s[0] - 0.5).abs() < 1e-15 && s[2] >= 0.0);
    }

    proptest! {
        #[test]
        fn logits_map_onto_simplex(z in prop::collection::vec(-50.0f64..50.0, 1..8)) {
            let s = SimplexVector::from_logits(&z);
            let sum: f64 = s.as_slice().iter().sum();
            prop_assert!((sum - 1.0).abs() <= SIMPLEX_TOL);
            prop_assert!(s.as_slice().iter().all(|&w| w >= 0.0));
            prop_assert!(SimplexVector::new(s.into_vec()).is_ok());
        }
    }
}
