//! Finite-activity Poisson random measures over a discrete mark list.

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Discrete mark intensity: marks `e_j` with rates `λ(e_j) > 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "IntensityTable", into = "IntensityTable")]
pub struct JumpIntensity {
    marks: Vec<f64>,
    rates: Vec<f64>,
    total_rate: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IntensityTable {
    marks: Vec<f64>,
    rates: Vec<f64>,
}

impl TryFrom<IntensityTable> for JumpIntensity {
    type Error = Error;

    fn try_from(t: IntensityTable) -> Result<Self> {
        JumpIntensity::new(t.marks, t.rates)
    }
}

impl From<JumpIntensity> for IntensityTable {
    fn from(j: JumpIntensity) -> Self {
        IntensityTable { marks: j.marks, rates: j.rates }
    }
}

impl JumpIntensity {
    pub fn new(marks: Vec<f64>, rates: Vec<f64>) -> Result<Self> {
        if marks.is_empty() || marks.len() != rates.len() {
            return Err(Error::InvalidParameter(format!(
                "{} marks with {} rates",
                marks.len(),
                rates.len()
            )));
        }
        if let Some(r) = rates.iter().find(|r| !(**r > 0.0 && r.is_finite())) {
            return Err(Error::InvalidParameter(format!("jump rate {r} must be positive and finite")));
        }
        if marks.iter().any(|e| !e.is_finite()) {
            return Err(Error::InvalidParameter("marks must be finite".into()));
        }
        let total_rate = rates.iter().sum();
        Ok(Self { marks, rates, total_rate })
    }

    /// Build from `(mark, rate)` pairs.
    pub fn from_pairs(pairs: &[(f64, f64)]) -> Result<Self> {
        Self::new(pairs.iter().map(|p| p.0).collect(), pairs.iter().map(|p| p.1).collect())
    }

    pub fn single(mark: f64, rate: f64) -> Result<Self> {
        Self::new(vec![mark], vec![rate])
    }

    pub fn marks(&self) -> &[f64] {
        &self.marks
    }

    pub fn rates(&self) -> &[f64] {
        &self.rates
    }

    pub fn total_rate(&self) -> f64 {
        self.total_rate
    }

    pub fn len(&self) -> usize {
        self.marks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.marks.is_empty()
    }

    /// Concatenate two mark lists, `self` first.
    pub fn concat(&self, other: &JumpIntensity) -> JumpIntensity {
        let marks = [self.marks.clone(), other.marks.clone()].concat();
        let rates = [self.rates.clone(), other.rates.clone()].concat();
        JumpIntensity { total_rate: rates.iter().sum(), marks, rates }
    }
}

/// Realised jumps on `(0, T]`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct JumpTrain {
    pub times: Vec<f64>,
    pub mark_indices: Vec<usize>,
}

impl JumpTrain {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

pub fn sample_jump_train<R: Rng + ?Sized>(intensity: &JumpIntensity, horizon: f64, rng: &mut R) -> Result<JumpTrain> {
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(Error::InvalidParameter(format!("horizon {horizon} must be positive")));
    }
    let poisson = Poisson::new(intensity.total_rate * horizon)
        .map_err(|e| Error::InvalidParameter(format!("poisson mean: {e}")))?;
    let count = poisson.sample(rng) as usize;
    let mut jumps: Vec<(f64, usize)> = (0..count)
        .map(|_| {
            // (0, T] rather than [0, T)
            let t = horizon * (1.0 - rng.random::<f64>());
            (t, pick_mark(intensity, rng))
        })
        .collect();
    jumps.sort_by(|a, b| a.0.total_cmp(&b.0));
    jumps.dedup_by(|a, b| a.0 == b.0);
    Ok(JumpTrain {
        times: jumps.iter().map(|j| j.0).collect(),
        mark_indices: jumps.iter().map(|j| j.1).collect(),
    })
}

fn pick_mark<R: Rng + ?Sized>(intensity: &JumpIntensity, rng: &mut R) -> usize {
    if intensity.len() == 1 {
        return 0;
    }
    let u = rng.random::<f64>() * intensity.total_rate;
    let mut acc = 0.0;
    for (j, r) in intensity.rates.iter().enumerate() {
        acc += r;
        if u < acc {
            return j;
        }
    }
    intensity.len() - 1
}

/// `Σ_jumps K(t_i, e_i) − ∫₀ᵀ Σ_j K(t, e_j) λ_j dt`, the time integral by the
/// trapezoid rule on `steps` uniform intervals.
pub fn compensated_integral<F>(train: &JumpTrain, intensity: &JumpIntensity, integrand: F, horizon: f64, steps: usize) -> f64
where
    F: Fn(f64, f64) -> f64,
{
    let jumps: f64 = train
        .times
        .iter()
        .zip(&train.mark_indices)
        .map(|(&t, &j)| integrand(t, intensity.marks[j]))
        .sum();
    let steps = steps.max(1);
    let dt = horizon / steps as f64;
    let rate_at = |t: f64| compensator_drift(intensity, |e| integrand(t, e));
    let mut comp = 0.5 * (rate_at(0.0) + rate_at(horizon));
    for i in 1..steps {
        comp += rate_at(i as f64 * dt);
    }
    jumps - comp * dt
}

/// `Σ_j β(e_j) λ(e_j)`.
pub fn compensator_drift<F>(intensity: &JumpIntensity, beta: F) -> f64
where
    F: Fn(f64) -> f64,
{
    intensity.marks.iter().zip(&intensity.rates).map(|(&e, &r)| beta(e) * r).sum()
}
