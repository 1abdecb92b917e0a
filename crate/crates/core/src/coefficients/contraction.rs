use serde::Serialize;

use super::LipschitzConstants;
use crate::error::{Error, Result};

const GRID_POINTS: usize = 25;

fn log_grid() -> Vec<f64> {
    (0..GRID_POINTS)
        .map(|i| 10f64.powf(-3.0 + 6.0 * i as f64 / (GRID_POINTS - 1) as f64))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FreeParameters {
    pub epsilon: f64,
    pub epsilon_tilde: f64,
    pub kappa: f64,
    pub alpha_y: f64,
    pub rho_y: f64,
    pub delta: f64,
}

impl Default for FreeParameters {
    fn default() -> Self {
        Self { epsilon: 1.0, epsilon_tilde: 1.0, kappa: 1.0, alpha_y: 1.0, rho_y: 1.0, delta: 1.0 }
    }
}

/// One inequality `lhs > rhs` of a certificate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Threshold {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    pub passed: bool,
}

impl Threshold {
    fn strict(name: &str, lhs: f64, rhs: f64) -> Self {
        Self { name: name.into(), lhs, rhs, passed: lhs > rhs }
    }

    fn weak(name: &str, lhs: f64, rhs: f64) -> Self {
        Self { name: name.into(), lhs, rhs, passed: lhs >= rhs }
    }
}

/// Constants of the a-priori estimates and of the Picard contraction.
///
/// `theta`/`gamma` follow the printed definitions. `theta_sign_corrected`
/// replaces the printed `−C/(2ε)` by `+C/(2ε)`, the sign the preceding
/// inequality carries; its ratio is bounded below by `1/(κ(2−κ)) ≥ 1`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContractionConstants {
    pub scheme: String,
    pub theta1: f64,
    pub theta2: f64,
    pub theta1_bar: f64,
    pub theta2_bar: f64,
    pub upsilon1: f64,
    pub upsilon2: f64,
    pub upsilon3: f64,
    pub upsilon4: f64,
    pub upsilon_nu: f64,
    pub growth_factor: f64,
    pub growth_factor_standard: f64,
    pub gamma: f64,
    pub theta: f64,
    pub ratio: f64,
    pub theta_sign_corrected: f64,
    pub gamma_sign_corrected: f64,
    pub ratio_sign_corrected: f64,
    pub params: FreeParameters,
    pub thresholds: Vec<Threshold>,
    pub valid: bool,
}

impl ContractionConstants {
    /// `(name, value)` rows in a fixed order.
    pub fn rows(&self) -> Vec<(String, f64)> {
        let mut rows = vec![
            ("theta1", self.theta1),
            ("theta2", self.theta2),
            ("theta1_bar", self.theta1_bar),
            ("theta2_bar", self.theta2_bar),
            ("upsilon1", self.upsilon1),
            ("upsilon2", self.upsilon2),
            ("upsilon3", self.upsilon3),
            ("upsilon4", self.upsilon4),
            ("upsilon_nu", self.upsilon_nu),
            ("growth_factor", self.growth_factor),
            ("growth_factor_standard", self.growth_factor_standard),
            ("gamma", self.gamma),
            ("theta", self.theta),
            ("ratio", self.ratio),
            ("gamma_sign_corrected", self.gamma_sign_corrected),
            ("theta_sign_corrected", self.theta_sign_corrected),
            ("ratio_sign_corrected", self.ratio_sign_corrected),
            ("epsilon", self.params.epsilon),
            ("epsilon_tilde", self.params.epsilon_tilde),
            ("kappa", self.params.kappa),
            ("alpha_y", self.params.alpha_y),
            ("rho_y", self.params.rho_y),
            ("delta", self.params.delta),
            ("valid", if self.valid { 1.0 } else { 0.0 }),
        ]
        .into_iter()
        .map(|(n, v)| (n.to_string(), v))
        .collect::<Vec<_>>();
        for t in &self.thresholds {
            rows.push((format!("{}_lhs", t.name), t.lhs));
            rows.push((format!("{}_rhs", t.name), t.rhs));
        }
        rows
    }
}

fn check_horizon(horizon: f64) -> Result<()> {
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(Error::InvalidParameter(format!("horizon {horizon} must be positive")));
    }
    Ok(())
}

struct Search {
    ratio: f64,
    gamma: f64,
    theta: f64,
    params: FreeParameters,
}

fn minimise<F>(grids: [&[f64]; 4], eval: F) -> Option<Search>
where
    F: Fn([f64; 4]) -> (f64, f64, FreeParameters),
{
    let mut best: Option<Search> = None;
    for &a in grids[0] {
        for &b in grids[1] {
            for &c in grids[2] {
                for &d in grids[3] {
                    let (gamma, theta, params) = eval([a, b, c, d]);
                    if !(gamma > 0.0) {
                        continue;
                    }
                    let ratio = theta / gamma;
                    if best.as_ref().is_none_or(|s| ratio < s.ratio) {
                        best = Some(Search { ratio, gamma, theta, params });
                    }
                }
            }
        }
    }
    best
}

fn h1_family(l: &LipschitzConstants, horizon: f64) -> (f64, f64, f64, f64) {
    let h = l.driver;
    let c = h.x + h.z * h.z + h.k * h.k + 2.0 * h.nu + 2.0 * h.y;
    let growth = (c * horizon).exp();
    let g = l.terminal_x + l.terminal_nu;
    let theta1 = growth * g * g;
    let theta2 = growth * (h.x + h.nu);
    let theta1_bar = 2.0 * c * theta1 + 2.0 * g * g;
    let theta2_bar = 2.0 * c * theta2 + 2.0 * (h.x + h.nu);
    (theta1, theta2, theta1_bar, theta2_bar)
}

/// Estimate constants and the contraction certificate of the forward-perturbed scheme.
pub fn contraction_constants_h1(constants: &LipschitzConstants, horizon: f64) -> Result<ContractionConstants> {
    check_horizon(horizon)?;
    let l = constants;
    let (theta1, theta2, theta1_bar, theta2_bar) = h1_family(l, horizon);
    let (k, kp) = (l.mono_k, l.mono_k_prime);
    let (cg, ch, cf, cs, cb) = (l.terminal_nu, l.driver.nu, l.drift.nu, l.diffusion.nu, l.jump.nu);
    let csum = ch + cf + cs + cb;

    let grid = log_grid();
    let delta_grid: Vec<f64> = grid.iter().copied().filter(|d| *d <= 1.0).collect();
    let gamma_of = |eps: f64, eps_t: f64, kappa: f64, delta: f64| {
        let damp = delta - kappa * delta / 2.0;
        (kp - cg * eps / 2.0)
            .min(k - eps_t * ch / 2.0)
            .min(damp - eps_t * cf / 2.0)
            .min(damp - eps_t * cs / 2.0)
            .min(damp - eps_t * cb / 2.0)
    };
    let params_of = |v: [f64; 4]| FreeParameters { epsilon: v[0], epsilon_tilde: v[1], kappa: v[2], delta: v[3], ..FreeParameters::default() };
    let printed = minimise([&grid, &grid, &grid, &delta_grid], |v| {
        let theta = (cg / (2.0 * v[0])).max(-csum / (2.0 * v[0]) + v[3] / (2.0 * v[2]));
        (gamma_of(v[0], v[1], v[2], v[3]), theta, params_of(v))
    });
    let corrected = minimise([&grid, &grid, &grid, &delta_grid], |v| {
        let theta = (cg / (2.0 * v[0])).max(csum / (2.0 * v[0]) + v[3] / (2.0 * v[2]));
        (gamma_of(v[0], v[1], v[2], v[3]), theta, params_of(v))
    });

    let mix = cf + 0.5 * (ch + cs + cb);
    let nu_x = ch + 0.5 * (cf + cs + cb);
    let min_sb = cs.min(cb);
    let thresholds = vec![
        Threshold::weak("uniqueness_k_prime", kp - cg, theta1 * mix + 0.5 * min_sb * theta1_bar),
        Threshold::weak("uniqueness_k", k, nu_x + mix * theta2 + 0.5 * min_sb * theta2_bar),
    ];
    let (gamma, theta, ratio, params) = match &printed {
        Some(s) => (s.gamma, s.theta, s.ratio, s.params),
        None => (gamma_of(1.0, 1.0, 1.0, 1.0), f64::INFINITY, f64::INFINITY, FreeParameters::default()),
    };
    let (gamma_c, theta_c, ratio_c) = match &corrected {
        Some(s) => (s.gamma, s.theta, s.ratio),
        None => (gamma, f64::INFINITY, f64::INFINITY),
    };
    Ok(ContractionConstants {
        scheme: "h1".into(),
        theta1,
        theta2,
        theta1_bar,
        theta2_bar,
        upsilon1: 0.0,
        upsilon2: 0.0,
        upsilon3: 0.0,
        upsilon4: 0.0,
        upsilon_nu: 0.0,
        growth_factor: 0.0,
        growth_factor_standard: 0.0,
        gamma,
        theta,
        ratio,
        theta_sign_corrected: theta_c,
        gamma_sign_corrected: gamma_c,
        ratio_sign_corrected: ratio_c,
        params,
        thresholds,
        valid: gamma > 0.0 && theta < gamma,
    })
}

/// `(e^{TΥ} − Υ)/Υ` as printed and the standard `(e^{TΥ} − 1)/Υ`; both
/// return `T` at `Υ = 0`.
pub fn growth_factors(upsilon1: f64, horizon: f64) -> (f64, f64) {
    if upsilon1 == 0.0 {
        return (horizon, horizon);
    }
    let e = (horizon * upsilon1).exp();
    ((e - upsilon1) / upsilon1, (e - 1.0) / upsilon1)
}

/// Estimate constants, uniqueness thresholds and the contraction certificate
/// of the backward-perturbed scheme.
pub fn contraction_constants_h2(constants: &LipschitzConstants, horizon: f64) -> Result<ContractionConstants> {
    check_horizon(horizon)?;
    let l = constants;
    let (f, s, b, h) = (l.drift, l.diffusion, l.jump, l.driver);
    let sq = |v: f64| v * v;
    let upsilon1 = 2.0 * f.x + f.y + f.z + f.k + 5.0 * sq(s.x) + 5.0 * sq(b.x) + 2.0 * f.nu + 5.0 * sq(s.nu) + 5.0 * sq(b.nu);
    let upsilon2 = f.y + 5.0 * sq(s.y) + 5.0 * sq(b.y) + f.nu + 5.0 * sq(s.nu) + 5.0 * sq(b.nu);
    // the printed third constant carries the jump x-constant
    let upsilon3 = f.z + 5.0 * sq(s.z) + 5.0 * sq(b.x);
    let upsilon4 = f.k + 5.0 * sq(s.k) + 5.0 * sq(b.k);
    let upsilon_nu = h.nu + 0.5 * (f.nu + s.nu + b.nu);
    let (growth, growth_std) = growth_factors(upsilon1, horizon);
    let (k, kp, cg) = (l.mono_k, l.mono_k_prime, l.terminal_nu);

    let thresholds = vec![
        Threshold::strict("k_vs_y", k, upsilon_nu * growth * upsilon2 + f.nu + 0.5 * (h.nu + s.nu + b.nu)),
        Threshold::strict("k_vs_z", k, upsilon_nu * growth * upsilon3 + s.nu / 2.0),
        Threshold::strict("k_vs_k", k, upsilon_nu * growth * upsilon4 + b.nu / 2.0),
        Threshold::strict("k_prime_vs_g", kp - cg, 0.0),
    ];

    let csum = h.nu + f.nu + s.nu + b.nu;
    let grid = log_grid();
    // sign-corrected coefficients k − Cα/2 on the left-hand side
    let eval = |v: [f64; 4]| {
        let (eps, alpha, rho, delta) = (v[0], v[1], v[2], v[3]);
        let gamma = (kp - cg * eps / 2.0 + delta / 2.0)
            .min(-h.nu * alpha / 2.0 + delta - delta * rho / 2.0)
            .min(k - f.nu * alpha / 2.0)
            .min(k - s.nu * alpha / 2.0)
            .min(k - b.nu * alpha / 2.0);
        let theta = (2.0 * cg / eps + delta / 2.0)
            .max(csum / (2.0 * alpha) + delta / (2.0 * rho))
            .max(csum / (2.0 * alpha));
        let params = FreeParameters { epsilon: eps, alpha_y: alpha, rho_y: rho, delta, ..FreeParameters::default() };
        (gamma, theta, params)
    };
    let found = minimise([&grid, &grid, &grid, &grid], eval);
    let (gamma, theta, ratio, params) = match found {
        Some(s) => (s.gamma, s.theta, s.ratio, s.params),
        None => (eval([1.0; 4]).0, f64::INFINITY, f64::INFINITY, FreeParameters::default()),
    };
    let uniqueness = thresholds.iter().all(|t| t.passed);
    Ok(ContractionConstants {
        scheme: "h2".into(),
        theta1: 0.0,
        theta2: 0.0,
        theta1_bar: 0.0,
        theta2_bar: 0.0,
        upsilon1,
        upsilon2,
        upsilon3,
        upsilon4,
        upsilon_nu,
        growth_factor: growth,
        growth_factor_standard: growth_std,
        gamma,
        theta,
        ratio,
        theta_sign_corrected: theta,
        gamma_sign_corrected: gamma,
        ratio_sign_corrected: ratio,
        params,
        thresholds,
        valid: uniqueness && gamma > 0.0 && theta < gamma,
    })
}
