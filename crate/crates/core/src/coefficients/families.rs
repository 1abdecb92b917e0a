use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{CoefficientSet, Dims, FnConstants, InitialLaw, LipschitzConstants};
use crate::error::{Error, Result};
use crate::random_measure::JumpIntensity;

/// Scalar linear family with one Brownian component:
///
/// - `b = b₀ + bₓx + b_y y + b_z z + b_ν E[X]`
/// - `σ = s₀ + sₓx + s_y y + s_z z`
/// - `β(e) = (j₀ + jₓx + j_y y) e`
/// - `h = h₀ + hₓx + h_y y + h_z z + h_k Σⱼ λⱼkⱼ + h_ν E[X]`
/// - `g = g₀ + gₓx + g_ν E[X_T]`
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinearParams {
    pub drift_const: f64,
    pub drift_x: f64,
    pub drift_y: f64,
    pub drift_z: f64,
    pub drift_nu: f64,
    pub diffusion_const: f64,
    pub diffusion_x: f64,
    pub diffusion_y: f64,
    pub diffusion_z: f64,
    pub jump_const: f64,
    pub jump_x: f64,
    pub jump_y: f64,
    pub driver_const: f64,
    pub driver_x: f64,
    pub driver_y: f64,
    pub driver_z: f64,
    pub driver_k: f64,
    pub driver_nu: f64,
    pub terminal_const: f64,
    pub terminal_x: f64,
    pub terminal_nu: f64,
    pub x0: f64,
    pub x0_sd: f64,
    /// Declared monotonicity constants.
    pub mono_k: f64,
    pub mono_k_prime: f64,
    pub c_tilde: f64,
}

impl Default for LinearParams {
    fn default() -> Self {
        Self {
            drift_const: 0.0,
            drift_x: 0.0,
            drift_y: 0.0,
            drift_z: 0.0,
            drift_nu: 0.0,
            diffusion_const: 0.0,
            diffusion_x: 0.0,
            diffusion_y: 0.0,
            diffusion_z: 0.0,
            jump_const: 0.0,
            jump_x: 0.0,
            jump_y: 0.0,
            driver_const: 0.0,
            driver_x: 0.0,
            driver_y: 0.0,
            driver_z: 0.0,
            driver_k: 0.0,
            driver_nu: 0.0,
            terminal_const: 0.0,
            terminal_x: 0.0,
            terminal_nu: 0.0,
            x0: 0.0,
            x0_sd: 0.0,
            mono_k: 1.0,
            mono_k_prime: 1.0,
            c_tilde: 1.0,
        }
    }
}

/// The linear family together with its exact Lipschitz constants.
pub fn linear_family(p: &LinearParams, intensity: Option<&JumpIntensity>) -> Result<(CoefficientSet, LipschitzConstants)> {
    let fields = [
        p.drift_const, p.drift_x, p.drift_y, p.drift_z, p.drift_nu, p.diffusion_const, p.diffusion_x, p.diffusion_y,
        p.diffusion_z, p.jump_const, p.jump_x, p.jump_y, p.driver_const, p.driver_x, p.driver_y, p.driver_z, p.driver_k,
        p.driver_nu, p.terminal_const, p.terminal_x, p.terminal_nu, p.x0, p.x0_sd,
    ];
    if fields.iter().any(|v| !v.is_finite()) || p.x0_sd < 0.0 {
        return Err(Error::InvalidParameter("linear coefficients must be finite with x0_sd >= 0".into()));
    }
    let marks = intensity.map(|i| i.len()).unwrap_or(0);
    let rates: Vec<f64> = intensity.map(|i| i.rates().to_vec()).unwrap_or_default();
    let q = *p;
    let dims = Dims { x: 1, y: 1, w: 1, marks };
    let rates_h = rates.clone();
    let set = CoefficientSet {
        name: "linear".into(),
        dims,
        drift: Arc::new(move |_, u, nu, out| {
            out[0] = q.drift_const + q.drift_x * u.x[0] + q.drift_y * u.y[0] + q.drift_z * u.z[0] + q.drift_nu * nu.mean()[0];
        }),
        diffusion: Arc::new(move |_, u, _, out| {
            out[0] = q.diffusion_const + q.diffusion_x * u.x[0] + q.diffusion_y * u.y[0] + q.diffusion_z * u.z[0];
        }),
        jump: Arc::new(move |_, u, _, _, e, out| {
            out[0] = (q.jump_const + q.jump_x * u.x[0] + q.jump_y * u.y[0]) * e;
        }),
        driver: Arc::new(move |_, u, nu, out| {
            let kk: f64 = u.k.iter().zip(&rates_h).map(|(k, r)| k * r).sum();
            out[0] = q.driver_const
                + q.driver_x * u.x[0]
                + q.driver_y * u.y[0]
                + q.driver_z * u.z[0]
                + q.driver_k * kk
                + q.driver_nu * nu.mean()[0];
        }),
        terminal: Arc::new(move |x, mu, out| {
            out[0] = q.terminal_const + q.terminal_x * x[0] + q.terminal_nu * mu.mean()[0];
        }),
        initial: if p.x0_sd > 0.0 {
            InitialLaw::Gaussian { mean: vec![p.x0], sd: vec![p.x0_sd] }
        } else {
            InitialLaw::Fixed { value: vec![p.x0] }
        },
    };
    // |Σ λⱼ Δkⱼ| ≤ √λ̄ |Δk|ₜ and |Δβ|ₜ = |jₓΔx| √(Σ e² λ)
    let total_rate: f64 = rates.iter().sum();
    let mark_scale = intensity
        .map(|i| i.marks().iter().zip(i.rates()).map(|(e, r)| e * e * r).sum::<f64>().sqrt())
        .unwrap_or(0.0);
    let constants = LipschitzConstants {
        drift: FnConstants { x: p.drift_x.abs(), y: p.drift_y.abs(), z: p.drift_z.abs(), k: 0.0, nu: p.drift_nu.abs() },
        diffusion: FnConstants { x: p.diffusion_x.abs(), y: p.diffusion_y.abs(), z: p.diffusion_z.abs(), k: 0.0, nu: 0.0 },
        jump: FnConstants { x: p.jump_x.abs() * mark_scale, y: p.jump_y.abs() * mark_scale, z: 0.0, k: 0.0, nu: 0.0 },
        driver: FnConstants {
            x: p.driver_x.abs(),
            y: p.driver_y.abs(),
            z: p.driver_z.abs(),
            k: p.driver_k.abs() * total_rate.sqrt(),
            nu: p.driver_nu.abs(),
        },
        terminal_x: p.terminal_x.abs(),
        terminal_nu: p.terminal_nu.abs(),
        mono_k: p.mono_k,
        mono_k_prime: p.mono_k_prime,
        c_tilde: p.c_tilde,
    };
    Ok((set, constants))
}

/// All coefficients zero, `X₀ = 0`.
pub fn zero_instance() -> (CoefficientSet, LipschitzConstants) {
    let (mut c, l) = linear_family(&LinearParams::default(), None).expect("zero parameters are valid");
    c.name = "zero".into();
    (c, l)
}

/// Deterministic rotation system `b = −y`, `h = −x`, `g(x) = x`, `X₀ = x0`.
pub fn appendix_ode(x0: f64) -> (CoefficientSet, LipschitzConstants) {
    let p = LinearParams { drift_y: -1.0, driver_x: -1.0, terminal_x: 1.0, x0, c_tilde: 2.0, ..LinearParams::default() };
    let (mut c, l) = linear_family(&p, None).expect("rotation parameters are valid");
    c.name = "appendix_ode".into();
    (c, l)
}
