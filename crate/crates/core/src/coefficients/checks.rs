use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{embedded_dot, jump_norm, monotonicity_operator, CoefficientSet, LipschitzConstants, State, StateFn};
use crate::error::Result;
use crate::measure::{w2_coupled_bound, EmpiricalLaw};
use crate::random_measure::JumpIntensity;
use crate::rng::{self, Domain};

const REL_TOL: f64 = 1e-12;

/// A `(t, u, u′)` probe; `nu` and `mu` default to random clouds.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub t: f64,
    pub u: State,
    pub u_prime: State,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub samples: usize,
    /// Half-width of the state box.
    pub radius: f64,
    pub horizon: f64,
    pub seed: u64,
    /// Points in each random law.
    pub law_points: usize,
    #[serde(skip)]
    pub injected: Vec<Sample>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { samples: 2000, radius: 2.0, horizon: 1.0, seed: 0, law_points: 8, injected: Vec::new() }
    }
}

/// Worst observed value of `lhs − rhs` for a condition `lhs ≤ rhs`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionReport {
    pub name: String,
    pub worst_margin: f64,
    pub worst_sample: usize,
    pub violations: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckReport {
    pub assumption: String,
    pub samples: usize,
    pub monotonicity: ConditionReport,
    pub terminal: ConditionReport,
    pub passed: bool,
    pub notes: Vec<String>,
}

struct Probe {
    t: f64,
    u: State,
    v: State,
    nu: EmpiricalLaw,
    mu: EmpiricalLaw,
}

fn uniform_vec<R: Rng>(r: &mut R, n: usize, radius: f64) -> Vec<f64> {
    (0..n).map(|_| r.random_range(-radius..=radius)).collect()
}

fn random_state<R: Rng>(r: &mut R, coeffs: &CoefficientSet, radius: f64) -> State {
    let d = coeffs.dims;
    State {
        x: uniform_vec(r, d.x, radius),
        y: uniform_vec(r, d.y, radius),
        z: uniform_vec(r, d.z_len(), radius),
        k: uniform_vec(r, d.k_len(), radius),
    }
}

fn probe(coeffs: &CoefficientSet, cfg: &SamplerConfig, i: usize) -> Probe {
    let mut r = rng::stream(cfg.seed, Domain::Sampler, i as u64);
    let d = coeffs.dims;
    let n = cfg.law_points.max(1);
    let nu = EmpiricalLaw::from_flat(uniform_vec(&mut r, n * (d.x + d.y), cfg.radius), d.x + d.y).expect("nonempty cloud");
    let mu = EmpiricalLaw::from_flat(uniform_vec(&mut r, n * d.x, cfg.radius), d.x).expect("nonempty cloud");
    if i < cfg.samples {
        let t = r.random_range(0.0..=cfg.horizon);
        let u = random_state(&mut r, coeffs, cfg.radius);
        let mut v = random_state(&mut r, coeffs, cfg.radius);
        // every fourth probe shares x, every fourth other shares (y, z, k)
        match i % 4 {
            1 => v.x = u.x.clone(),
            2 => {
                v.y = u.y.clone();
                v.z = u.z.clone();
                v.k = u.k.clone();
            }
            _ => {}
        }
        Probe { t, u, v, nu, mu }
    } else {
        let s = &cfg.injected[i - cfg.samples];
        Probe { t: s.t, u: s.u.clone(), v: s.u_prime.clone(), nu, mu }
    }
}

fn sq(v: &[f64], w: &[f64]) -> f64 {
    v.iter().zip(w).map(|(a, b)| (a - b) * (a - b)).sum()
}

fn terminal_product(coeffs: &CoefficientSet, p: &Probe) -> f64 {
    let mut ga = vec![0.0; coeffs.dims.y];
    let mut gb = vec![0.0; coeffs.dims.y];
    (coeffs.terminal)(&p.u.x, &p.mu, &mut ga);
    (coeffs.terminal)(&p.v.x, &p.mu, &mut gb);
    let dg: Vec<f64> = ga.iter().zip(&gb).map(|(a, b)| a - b).collect();
    let dx: Vec<f64> = p.u.x.iter().zip(&p.v.x).map(|(a, b)| a - b).collect();
    embedded_dot(&dg, &dx)
}

/// `(lhs, rhs)` pairs for the operator and terminal conditions.
type Evaluation = ((f64, f64), (f64, f64));

fn summarise(name: &str, pairs: &[(f64, f64)]) -> ConditionReport {
    let mut worst = f64::NEG_INFINITY;
    let mut worst_sample = 0;
    let mut violations = 0;
    for (i, &(lhs, rhs)) in pairs.iter().enumerate() {
        let margin = lhs - rhs;
        let scale = 1.0 + lhs.abs() + rhs.abs();
        if !(margin <= REL_TOL * scale) {
            violations += 1;
        }
        if margin > worst || margin.is_nan() {
            worst = margin;
            worst_sample = i;
        }
    }
    ConditionReport { name: name.into(), worst_margin: worst, worst_sample, violations, passed: violations == 0 }
}

fn run_check<F>(
    assumption: &str,
    coeffs: &CoefficientSet,
    intensity: Option<&JumpIntensity>,
    cfg: &SamplerConfig,
    eval: F,
) -> Result<CheckReport>
where
    F: Fn(&Probe, f64) -> Evaluation + Sync,
{
    coeffs.validate()?;
    let total = cfg.samples + cfg.injected.len();
    let results: Vec<Result<Evaluation>> = (0..total)
        .into_par_iter()
        .map(|i| {
            let p = probe(coeffs, cfg, i);
            let a = monotonicity_operator(p.t, &p.u, &p.v, &p.nu, coeffs, intensity)?;
            Ok(eval(&p, a))
        })
        .collect();
    let mut ops = Vec::with_capacity(total);
    let mut terms = Vec::with_capacity(total);
    for r in results {
        let (a, g) = r?;
        ops.push(a);
        terms.push(g);
    }
    let monotonicity = summarise("operator", &ops);
    let terminal = summarise("terminal", &terms);
    let passed = monotonicity.passed && terminal.passed;
    Ok(CheckReport {
        assumption: assumption.into(),
        samples: total,
        monotonicity,
        terminal,
        passed,
        notes: vec!["sampled evidence only; a pass is not a proof".into()],
    })
}

/// Sampled test of `𝒜 ≤ −k|Δx|²` and `Δg·Δx ≥ k′|Δx|²`.
pub fn check_h1(
    coeffs: &CoefficientSet,
    constants: &LipschitzConstants,
    intensity: Option<&JumpIntensity>,
    cfg: &SamplerConfig,
) -> Result<CheckReport> {
    let (k, kp) = (constants.mono_k, constants.mono_k_prime);
    run_check("H1", coeffs, intensity, cfg, |p, a| {
        let dx2 = sq(&p.u.x, &p.v.x);
        ((a, -k * dx2), (kp * dx2, terminal_product(coeffs, p)))
    })
}

/// Sampled test of `𝒜 ≤ −k(|Δx|² + |Δy|² + ‖Δz‖² + |Δk|ₜ)` and `Δg·Δx ≤ k′|Δx|²`.
/// The jump term is the unsquared rate-weighted norm.
pub fn check_h2(
    coeffs: &CoefficientSet,
    constants: &LipschitzConstants,
    intensity: Option<&JumpIntensity>,
    cfg: &SamplerConfig,
) -> Result<CheckReport> {
    let (k, kp) = (constants.mono_k, constants.mono_k_prime);
    let rates: Vec<f64> = intensity.map(|i| i.rates().to_vec()).unwrap_or_default();
    let mut report = run_check("H2", coeffs, intensity, cfg, |p, a| {
        let dx2 = sq(&p.u.x, &p.v.x);
        let dk: Vec<f64> = p.u.k.iter().zip(&p.v.k).map(|(x, y)| x - y).collect();
        let decay = dx2 + sq(&p.u.y, &p.v.y) + sq(&p.u.z, &p.v.z) + jump_norm(&dk, &rates);
        ((a, -k * decay), (terminal_product(coeffs, p), kp * dx2))
    })?;
    report.notes.push("jump decay term uses the unsquared norm |Δk|_t".into());
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditRow {
    pub function: String,
    pub argument: String,
    pub declared: f64,
    pub observed: f64,
    pub consistent: bool,
}

/// Largest sampled difference quotient of each coefficient in each argument,
/// against the declared constant. For the law argument the denominator is the
/// paired coupling bound, so the observed quotient never exceeds the true one.
pub fn audit_lipschitz(
    coeffs: &CoefficientSet,
    constants: &LipschitzConstants,
    intensity: Option<&JumpIntensity>,
    cfg: &SamplerConfig,
) -> Result<Vec<AuditRow>> {
    coeffs.validate()?;
    let d = coeffs.dims;
    let marks: Vec<f64> = intensity.map(|i| i.marks().to_vec()).unwrap_or_default();
    let rates: Vec<f64> = intensity.map(|i| i.rates().to_vec()).unwrap_or_default();
    let args = ["x", "y", "z", "k", "nu"];
    let quotients: Vec<[[f64; 5]; 4]> = (0..cfg.samples)
        .into_par_iter()
        .map(|i| {
            let p = probe(coeffs, cfg, i);
            let mut r = rng::stream(cfg.seed, Domain::Sampler, (1u64 << 40) + i as u64);
            let nu2 = EmpiricalLaw::from_flat(
                p.nu.points().iter().map(|v| v + r.random_range(-0.5..=0.5)).collect(),
                d.x + d.y,
            )
            .expect("same shape");
            let w = w2_coupled_bound(&p.nu, &nu2, true).unwrap_or(0.0);
            let mut out = [[0.0; 5]; 4];
            for (a, arg) in args.iter().enumerate() {
                let mut v = p.u.clone();
                let mut nu_v = &p.nu;
                let denom = match *arg {
                    "x" => {
                        v.x = p.v.x.clone();
                        sq(&p.u.x, &v.x).sqrt()
                    }
                    "y" => {
                        v.y = p.v.y.clone();
                        sq(&p.u.y, &v.y).sqrt()
                    }
                    "z" => {
                        v.z = p.v.z.clone();
                        sq(&p.u.z, &v.z).sqrt()
                    }
                    "k" => {
                        v.k = p.v.k.clone();
                        let dk: Vec<f64> = p.u.k.iter().zip(&v.k).map(|(x, y)| x - y).collect();
                        jump_norm(&dk, &rates)
                    }
                    _ => {
                        nu_v = &nu2;
                        w
                    }
                };
                if denom <= 1e-12 {
                    continue;
                }
                let state_diff = |f: &StateFn, len: usize| {
                    let mut fa = vec![0.0; len];
                    let mut fb = vec![0.0; len];
                    f(p.t, p.u.as_ref(), &p.nu, &mut fa);
                    f(p.t, v.as_ref(), nu_v, &mut fb);
                    sq(&fa, &fb).sqrt()
                };
                out[0][a] = state_diff(&coeffs.drift, d.x) / denom;
                out[1][a] = state_diff(&coeffs.diffusion, d.x * d.w) / denom;
                let mut jsum = 0.0;
                let mut ja = vec![0.0; d.x];
                let mut jb = vec![0.0; d.x];
                for j in 0..d.marks {
                    (coeffs.jump)(p.t, p.u.as_ref(), &p.nu, j, marks[j], &mut ja);
                    (coeffs.jump)(p.t, v.as_ref(), nu_v, j, marks[j], &mut jb);
                    jsum += sq(&ja, &jb) * rates[j];
                }
                out[2][a] = jsum.sqrt() / denom;
                out[3][a] = state_diff(&coeffs.driver, d.y) / denom;
            }
            out
        })
        .collect();
    let declared = [constants.drift, constants.diffusion, constants.jump, constants.driver];
    let names = ["drift", "diffusion", "jump", "driver"];
    let mut rows = Vec::new();
    for (f, name) in names.iter().enumerate() {
        let dec = declared[f].values();
        for (a, arg) in args.iter().enumerate() {
            let observed = quotients.iter().map(|q| q[f][a]).fold(0.0, f64::max);
            rows.push(AuditRow {
                function: name.to_string(),
                argument: arg.to_string(),
                declared: dec[a],
                observed,
                consistent: observed <= dec[a] * (1.0 + 1e-9) + 1e-12,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::{linear_family, LinearParams};

    fn rotation(k: f64, kp: f64, g: f64) -> (CoefficientSet, LipschitzConstants) {
        let p = LinearParams { drift_y: -1.0, driver_x: -1.0, terminal_x: g, mono_k: k, mono_k_prime: kp, ..LinearParams::default() };
        linear_family(&p, None).unwrap()
    }

    fn cfg() -> SamplerConfig {
        SamplerConfig { samples: 500, seed: 11, ..SamplerConfig::default() }
    }

    #[test]
    fn h1_passes_on_rotation_instance() {
        let (c, l) = rotation(1.0, 1.0, 1.0);
        let r = check_h1(&c, &l, None, &cfg()).unwrap();
        assert!(r.passed, "{r:?}");
        assert!(r.monotonicity.worst_margin <= 0.0);
    }

    #[test]
    fn h1_fails_with_large_k() {
        let (c, l) = rotation(10.0, 1.0, 1.0);
        let r = check_h1(&c, &l, None, &cfg()).unwrap();
        assert!(!r.monotonicity.passed);
        assert!(!r.passed);
    }

    #[test]
    fn h1_fails_with_reversed_terminal() {
        let (c, l) = rotation(1.0, 0.1, -1.0);
        let r = check_h1(&c, &l, None, &cfg()).unwrap();
        assert!(!r.terminal.passed);
    }

    #[test]
    fn h2_half_z_instance() {
        let p = LinearParams { drift_y: -1.0, driver_x: -1.0, diffusion_z: -0.5, terminal_x: 1.0, mono_k: 0.5, ..LinearParams::default() };
        let (c, l) = linear_family(&p, None).unwrap();
        assert!(check_h2(&c, &l, None, &cfg()).unwrap().monotonicity.passed);
        let strict = LipschitzConstants { mono_k: 2.0, ..l };
        assert!(!check_h2(&c, &strict, None, &cfg()).unwrap().monotonicity.passed);
    }

    #[test]
    fn h2_fails_on_constant_coefficients() {
        let p = LinearParams { drift_const: 1.0, driver_const: 2.0, mono_k: 0.01, ..LinearParams::default() };
        let (c, l) = linear_family(&p, None).unwrap();
        assert!(!check_h2(&c, &l, None, &cfg()).unwrap().monotonicity.passed);
    }

    #[test]
    fn injected_counterexample_is_caught() {
        // 𝒜 = −0.9|Δx|² whenever Δy = 0
        let p = LinearParams { drift_y: -1.0, driver_x: -0.9, terminal_x: 1.0, ..LinearParams::default() };
        let (c, l) = linear_family(&p, None).unwrap();
        let bad = Sample {
            t: 0.0,
            u: State { x: vec![1.0], y: vec![0.0], z: vec![0.0], k: vec![] },
            u_prime: State { x: vec![0.0], y: vec![0.0], z: vec![0.0], k: vec![] },
        };
        let cfg = SamplerConfig { samples: 0, injected: vec![bad], ..SamplerConfig::default() };
        let r = check_h1(&c, &l, None, &cfg).unwrap();
        assert!(!r.passed);
        assert_eq!(r.monotonicity.worst_sample, 0);
    }

    #[test]
    fn audit_recovers_linear_constants() {
        let i = JumpIntensity::from_pairs(&[(1.0, 2.0), (-0.5, 1.0)]).unwrap();
        let p = LinearParams {
            drift_x: 0.3,
            drift_y: -1.0,
            drift_nu: 0.5,
            diffusion_z: 0.2,
            jump_x: 0.4,
            driver_x: -1.0,
            driver_k: 0.3,
            ..LinearParams::default()
        };
        let (c, l) = linear_family(&p, Some(&i)).unwrap();
        let rows = audit_lipschitz(&c, &l, Some(&i), &SamplerConfig { samples: 300, ..SamplerConfig::default() }).unwrap();
        assert!(rows.iter().all(|r| r.consistent), "{rows:?}");
        let drift_x = rows.iter().find(|r| r.function == "drift" && r.argument == "x").unwrap();
        assert!((drift_x.observed - 0.3).abs() < 1e-9);
    }
}
