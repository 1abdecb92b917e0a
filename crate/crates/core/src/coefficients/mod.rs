//! Coefficient sets `(b, σ, β, h, g)` of a mean-field FBSDE with jumps,
//! their Lipschitz record and the monotonicity operator.
//!
//! The backward equation is written as
//! `Y_t = g(X_T, μ_T) + ∫ₜᵀ h ds − ∫ₜᵀ Z dW − ∫ₜᵀ∫ K π̃(ds, de)`.

mod checks;
mod contraction;
pub mod families;

use std::fmt;
use std::sync::Arc;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measure::EmpiricalLaw;
use crate::random_measure::JumpIntensity;
use crate::rng::{self, Domain};

pub use checks::{audit_lipschitz, check_h1, check_h2, AuditRow, CheckReport, ConditionReport, Sample, SamplerConfig};
pub use contraction::{contraction_constants_h1, contraction_constants_h2, ContractionConstants, FreeParameters, Threshold};
pub use families::{appendix_ode, linear_family, zero_instance, LinearParams};

/// State dimensions. `w` counts every Brownian component the coefficients
/// see, `marks` every jump mark.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub marks: usize,
}

impl Dims {
    pub fn z_len(&self) -> usize {
        self.y * self.w
    }

    pub fn k_len(&self) -> usize {
        self.y * self.marks
    }
}

/// Borrowed `(x, y, z, k)`; `z` is `d_y × d_w` and `k` is `d_y × marks`, both row-major.
#[derive(Debug, Clone, Copy)]
pub struct StateRef<'a> {
    pub x: &'a [f64],
    pub y: &'a [f64],
    pub z: &'a [f64],
    pub k: &'a [f64],
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct State {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub z: Vec<f64>,
    pub k: Vec<f64>,
}

impl State {
    pub fn zeros(dims: &Dims) -> Self {
        Self { x: vec![0.0; dims.x], y: vec![0.0; dims.y], z: vec![0.0; dims.z_len()], k: vec![0.0; dims.k_len()] }
    }

    pub fn as_ref(&self) -> StateRef<'_> {
        StateRef { x: &self.x, y: &self.y, z: &self.z, k: &self.k }
    }

    fn check(&self, dims: &Dims) -> Result<()> {
        if self.x.len() != dims.x || self.y.len() != dims.y || self.z.len() != dims.z_len() || self.k.len() != dims.k_len() {
            return Err(Error::Shape(format!(
                "state with |x|={}, |y|={}, |z|={}, |k|={} does not match dims {:?}",
                self.x.len(),
                self.y.len(),
                self.z.len(),
                self.k.len(),
                dims
            )));
        }
        Ok(())
    }
}

/// `f(t, u, ν, out)`.
pub type StateFn = Arc<dyn Fn(f64, StateRef<'_>, &EmpiricalLaw, &mut [f64]) + Send + Sync>;
/// `β(t, u, ν, mark index, mark value, out)`.
pub type JumpFn = Arc<dyn Fn(f64, StateRef<'_>, &EmpiricalLaw, usize, f64, &mut [f64]) + Send + Sync>;
/// `g(x, μ, out)`.
pub type TerminalFn = Arc<dyn Fn(&[f64], &EmpiricalLaw, &mut [f64]) + Send + Sync>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialLaw {
    Fixed { value: Vec<f64> },
    Gaussian { mean: Vec<f64>, sd: Vec<f64> },
}

impl InitialLaw {
    pub fn dim(&self) -> usize {
        match self {
            InitialLaw::Fixed { value } => value.len(),
            InitialLaw::Gaussian { mean, .. } => mean.len(),
        }
    }

    /// Draw for particle `p` from its own stream.
    pub fn sample(&self, seed: u64, p: usize, out: &mut [f64]) {
        match self {
            InitialLaw::Fixed { value } => out.copy_from_slice(value),
            InitialLaw::Gaussian { mean, sd } => {
                let mut r = rng::stream(seed, Domain::Initial, rng::particle(p));
                for ((o, m), s) in out.iter_mut().zip(mean).zip(sd) {
                    let n: f64 = StandardNormal.sample(&mut r);
                    *o = m + s * n;
                }
            }
        }
    }
}

/// One MF-FBSDEJ instance.
#[derive(Clone)]
pub struct CoefficientSet {
    pub name: String,
    pub dims: Dims,
    pub drift: StateFn,
    /// Row-major `d_x × d_w`.
    pub diffusion: StateFn,
    pub jump: JumpFn,
    pub driver: StateFn,
    pub terminal: TerminalFn,
    pub initial: InitialLaw,
}

impl fmt::Debug for CoefficientSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CoefficientSet")
            .field("name", &self.name)
            .field("dims", &self.dims)
            .field("initial", &self.initial)
            .finish_non_exhaustive()
    }
}

impl CoefficientSet {
    pub fn validate(&self) -> Result<()> {
        if self.dims.x == 0 || self.dims.y == 0 {
            return Err(Error::Shape("d_x and d_y must be positive".into()));
        }
        if self.initial.dim() != self.dims.x {
            return Err(Error::Shape(format!(
                "initial law has dimension {}, expected {}",
                self.initial.dim(),
                self.dims.x
            )));
        }
        Ok(())
    }
}

/// Lipschitz constants of one coefficient in each argument.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FnConstants {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub k: f64,
    pub nu: f64,
}

impl FnConstants {
    fn values(&self) -> [f64; 5] {
        [self.x, self.y, self.z, self.k, self.nu]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LipschitzConstants {
    pub drift: FnConstants,
    pub diffusion: FnConstants,
    pub jump: FnConstants,
    pub driver: FnConstants,
    pub terminal_x: f64,
    pub terminal_nu: f64,
    /// Monotonicity constant `k` of the operator `𝒜`.
    pub mono_k: f64,
    /// Monotonicity constant `k′` of the terminal function.
    pub mono_k_prime: f64,
    /// Appendix constant `C̃`.
    pub c_tilde: f64,
}

impl Default for LipschitzConstants {
    fn default() -> Self {
        Self {
            drift: FnConstants::default(),
            diffusion: FnConstants::default(),
            jump: FnConstants::default(),
            driver: FnConstants::default(),
            terminal_x: 0.0,
            terminal_nu: 0.0,
            mono_k: 1.0,
            mono_k_prime: 1.0,
            c_tilde: 1.0,
        }
    }
}

impl LipschitzConstants {
    pub fn validate(&self) -> Result<()> {
        let fns = [self.drift, self.diffusion, self.jump, self.driver];
        let lip = fns.iter().flat_map(|c| c.values()).chain([self.terminal_x, self.terminal_nu]);
        for v in lip {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter(format!("Lipschitz constant {v} must be finite and nonnegative")));
            }
        }
        for (name, v) in [("k", self.mono_k), ("k'", self.mono_k_prime), ("C~", self.c_tilde)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter(format!("{name} = {v} must be positive")));
            }
        }
        Ok(())
    }

    /// Appendix perturbation size `min(k, k′)/C̃`.
    pub fn appendix_delta(&self) -> f64 {
        self.mono_k.min(self.mono_k_prime) / self.c_tilde
    }
}

/// Dot product over the components shared by the canonical embedding of
/// `R^{d_x}` and `R^{d_y}`.
pub fn embedded_dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `𝒜(t, u, u′, ν) = Δb·Δy + Δh·Δx + Δσ:Δz + Σⱼ Δβⱼ·Δkⱼ λⱼ`.
pub fn monotonicity_operator(
    t: f64,
    u: &State,
    u_prime: &State,
    nu: &EmpiricalLaw,
    coeffs: &CoefficientSet,
    intensity: Option<&JumpIntensity>,
) -> Result<f64> {
    let dims = coeffs.dims;
    u.check(&dims)?;
    u_prime.check(&dims)?;
    let rates: &[f64] = match intensity {
        Some(i) if i.len() == dims.marks => i.rates(),
        None if dims.marks == 0 => &[],
        _ => return Err(Error::Shape(format!("jump intensity does not match {} marks", dims.marks))),
    };
    let marks: Vec<f64> = intensity.map(|i| i.marks().to_vec()).unwrap_or_default();
    let (a, b) = (u.as_ref(), u_prime.as_ref());

    let diff = |f: &StateFn, len: usize| {
        let mut fa = vec![0.0; len];
        let mut fb = vec![0.0; len];
        f(t, a, nu, &mut fa);
        f(t, b, nu, &mut fb);
        fa.iter().zip(&fb).map(|(p, q)| p - q).collect::<Vec<_>>()
    };
    let dx: Vec<f64> = u.x.iter().zip(&u_prime.x).map(|(p, q)| p - q).collect();
    let dy: Vec<f64> = u.y.iter().zip(&u_prime.y).map(|(p, q)| p - q).collect();
    let dz: Vec<f64> = u.z.iter().zip(&u_prime.z).map(|(p, q)| p - q).collect();
    let dk: Vec<f64> = u.k.iter().zip(&u_prime.k).map(|(p, q)| p - q).collect();

    let db = diff(&coeffs.drift, dims.x);
    let dh = diff(&coeffs.driver, dims.y);
    let dsigma = diff(&coeffs.diffusion, dims.x * dims.w);

    let mut total = embedded_dot(&db, &dy) + embedded_dot(&dh, &dx);
    for r in 0..dims.x.min(dims.y) {
        total += embedded_dot(&dsigma[r * dims.w..(r + 1) * dims.w], &dz[r * dims.w..(r + 1) * dims.w]);
    }
    let mut ba = vec![0.0; dims.x];
    let mut bb = vec![0.0; dims.x];
    for j in 0..dims.marks {
        (coeffs.jump)(t, a, nu, j, marks[j], &mut ba);
        (coeffs.jump)(t, b, nu, j, marks[j], &mut bb);
        let mut term = 0.0;
        for r in 0..dims.x.min(dims.y) {
            term += (ba[r] - bb[r]) * dk[r * dims.marks + j];
        }
        total += term * rates[j];
    }
    Ok(total)
}

/// `|k|ₜ = sqrt(Σⱼ |kⱼ|² λⱼ)` for a `d_y × marks` row-major array.
pub fn jump_norm(k: &[f64], rates: &[f64]) -> f64 {
    let m = rates.len();
    if m == 0 {
        return 0.0;
    }
    k.iter().enumerate().map(|(i, v)| v * v * rates[i % m]).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_state(x: f64, y: f64, z: f64) -> State {
        State { x: vec![x], y: vec![y], z: vec![z], k: vec![] }
    }

    fn dummy_law() -> EmpiricalLaw {
        EmpiricalLaw::from_flat(vec![0.0, 0.0], 2).unwrap()
    }

    fn linear(bx: f64, by: f64, hx: f64, sz: f64) -> CoefficientSet {
        let p = LinearParams { drift_x: bx, drift_y: by, driver_x: hx, diffusion_z: sz, terminal_x: 1.0, ..LinearParams::default() };
        linear_family(&p, None).unwrap().0
    }

    #[test]
    fn operator_vanishes_on_equal_states() {
        let c = linear(0.3, -1.0, -1.0, 0.2);
        let u = scalar_state(0.4, -0.2, 1.1);
        assert_eq!(monotonicity_operator(0.1, &u, &u, &dummy_law(), &c, None).unwrap(), 0.0);
    }

    #[test]
    fn operator_of_rotation_instance() {
        let c = linear(0.0, -1.0, -1.0, 0.0);
        let (u, v) = (scalar_state(1.5, 0.5, 0.0), scalar_state(-0.5, 2.0, 0.3));
        let a = monotonicity_operator(0.0, &u, &v, &dummy_law(), &c, None).unwrap();
        assert!((a - (-(1.5f64.powi(2)) - 2.0f64.powi(2))).abs() < 1e-14);
        assert!(a <= -(2.0f64.powi(2)));
    }

    #[test]
    fn operator_of_constant_coefficients() {
        let p = LinearParams { drift_const: 1.0, diffusion_const: 2.0, driver_const: -1.0, ..LinearParams::default() };
        let (c, _) = linear_family(&p, None).unwrap();
        let (u, v) = (scalar_state(1.0, 2.0, 3.0), scalar_state(-1.0, 0.0, 1.0));
        assert_eq!(monotonicity_operator(0.5, &u, &v, &dummy_law(), &c, None).unwrap(), 0.0);
    }

    #[test]
    fn operator_is_exactly_symmetric() {
        let i = JumpIntensity::from_pairs(&[(0.5, 1.0), (-1.0, 2.0)]).unwrap();
        let p = LinearParams { drift_y: -1.0, driver_x: -1.0, diffusion_z: 0.3, jump_x: 0.7, jump_y: 0.2, ..LinearParams::default() };
        let (c, _) = linear_family(&p, Some(&i)).unwrap();
        let u = State { x: vec![0.3], y: vec![-0.7], z: vec![0.1], k: vec![0.9, -0.4] };
        let v = State { x: vec![-1.3], y: vec![0.2], z: vec![-0.6], k: vec![0.1, 0.5] };
        let a = monotonicity_operator(0.2, &u, &v, &dummy_law(), &c, Some(&i)).unwrap();
        let b = monotonicity_operator(0.2, &v, &u, &dummy_law(), &c, Some(&i)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn operator_rejects_bad_shapes() {
        let c = linear(0.0, -1.0, -1.0, 0.0);
        let bad = State { x: vec![0.0, 1.0], y: vec![0.0], z: vec![0.0], k: vec![] };
        let u = scalar_state(0.0, 0.0, 0.0);
        assert!(matches!(monotonicity_operator(0.0, &bad, &u, &dummy_law(), &c, None), Err(Error::Shape(_))));
    }

    #[test]
    fn constants_validation() {
        assert!(LipschitzConstants::default().validate().is_ok());
        let bad = LipschitzConstants { mono_k: 0.0, ..LipschitzConstants::default() };
        assert!(bad.validate().is_err());
        let neg = LipschitzConstants { terminal_x: -1.0, ..LipschitzConstants::default() };
        assert!(neg.validate().is_err());
        let c = LipschitzConstants { mono_k: 1.0, mono_k_prime: 0.5, c_tilde: 2.0, ..LipschitzConstants::default() };
        assert_eq!(c.appendix_delta(), 0.25);
    }

    #[test]
    fn jump_norm_weights_by_rate() {
        assert_eq!(jump_norm(&[1.0, 0.0], &[2.0, 1.0]), 2.0f64.sqrt());
        assert_eq!(jump_norm(&[], &[]), 0.0);
    }
}
