//! Numeric primitives shared by every other module.

use std::ops::Deref;

use crate::error::{Error, Result};
use crate::linalg::{dot, norm};

/// A unit-norm embedding produced by one of the encoders.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for FeatureVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl AsRef<[f64]> for FeatureVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Softmax temperature; always strictly positive and finite.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Temperature(f64);

impl Temperature {
    pub const DEFAULT: Temperature = Temperature(0.01);

    pub fn new(tau: f64) -> Result<Self> {
        if tau.is_finite() && tau > 0.0 {
            Ok(Self(tau))
        } else {
            Err(Error::Range(format!("temperature must be positive and finite, got {tau}")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl Default for Temperature {
    fn default() -> Self {
        Self::DEFAULT
    }
}

/// Scales `v` to unit Euclidean norm.
pub fn l2_normalize(v: &[f64]) -> Result<FeatureVector> {
    if v.is_empty() {
        return Err(Error::Shape("cannot normalize an empty vector".into()));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("vector has a non-finite component".into()));
    }
    let n = norm(v);
    if n == 0.0 {
        return Err(Error::DegenerateInput("cannot normalize the zero vector".into()));
    }
    Ok(FeatureVector(v.iter().map(|x| x / n).collect()))
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("dimensions {} and {} differ", a.len(), b.len())));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateInput("cosine similarity of a zero vector".into()));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// `softmax(logits / tau)`, evaluated with the running maximum subtracted.
pub fn softmax_with_temperature(logits: &[f64], tau: Temperature) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::Shape("softmax of an empty vector".into()));
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("non-finite logit".into()));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| ((x - max) / tau.value()).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

/// Harmonic mean of two percentages, with `H(0, 0) = 0`.
pub fn harmonic_mean(base_acc: f64, new_acc: f64) -> Result<f64> {
    for (name, v) in [("base", base_acc), ("new", new_acc)] {
        if !(0.0..=100.0).contains(&v) {
            return Err(Error::Range(format!("{name} accuracy {v} outside [0, 100]")));
        }
    }
    let sum = base_acc + new_acc;
    if sum == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * base_acc * new_acc / sum)
}

/// Rounds a non-negative value half-up at one decimal place.
///
/// The small bias absorbs binary representation error so that e.g. 64.05
/// rounds to 64.1.
pub fn round_1dp(x: f64) -> f64 {
    let scaled = x * 10.0;
    let r = if scaled >= 0.0 { (scaled + 0.5 + 1e-9).floor() } else { -((-scaled + 0.5 - 1e-9).floor()) };
    r / 10.0
}
