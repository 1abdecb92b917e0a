//! Outer Picard drivers for the perturbed mean-field schemes.
//!
//! Each outer iteration freezes the laws of the previous iterate and solves
//! the δ-perturbed coupled system by alternating forward and backward passes.

use serde::{Deserialize, Serialize};

use crate::backward_solver::{l2_distance, solve_backward, BackwardPerturbation, BasisSpec, SolverIterate};
use crate::coefficients::{CoefficientSet, LipschitzConstants, State};
use crate::error::{Error, Result};
use crate::forward_sim::{simulate_forward, terminal_distance, ForwardPerturbation, PathEnsemble, StepLaws};
use crate::measure::EmpiricalLaw;

const MIN_RELAXATION: f64 = 1.0 / 64.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    H1,
    H2,
    Appendix,
}

impl Scheme {
    pub fn label(&self) -> &'static str {
        match self {
            Scheme::H1 => "h1",
            Scheme::H2 => "h2",
            Scheme::Appendix => "appendix",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PicardConfig {
    pub scheme: Scheme,
    pub delta: f64,
    pub outer_tol: f64,
    pub inner_tol: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    /// Weight of the inner update at the start of each inner solve; halved whenever the inner change grows.
    pub relaxation: f64,
}

impl Default for PicardConfig {
    fn default() -> Self {
        Self {
            scheme: Scheme::H1,
            delta: 0.5,
            outer_tol: 1e-6,
            inner_tol: 1e-8,
            max_outer: 50,
            max_inner: 200,
            relaxation: 0.5,
        }
    }
}

impl PicardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            return Err(Error::InvalidParameter(format!("delta {} must lie in (0, 1]", self.delta)));
        }
        if !(self.outer_tol > 0.0 && self.inner_tol > 0.0) {
            return Err(Error::InvalidParameter("tolerances must be positive".into()));
        }
        if self.max_outer == 0 || self.max_inner == 0 {
            return Err(Error::InvalidParameter("iteration caps must be at least 1".into()));
        }
        if !(self.relaxation > 0.0 && self.relaxation <= 1.0) {
            return Err(Error::InvalidParameter(format!("relaxation {} must lie in (0, 1]", self.relaxation)));
        }
        Ok(())
    }
}

/// One outer iteration. Squared components; `distance` is the root of their sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IterationRow {
    pub iteration: usize,
    pub x_terminal: f64,
    pub y: f64,
    pub z: f64,
    pub k: f64,
    pub distance: f64,
    /// `dₙ / dₙ₋₁`, from the second iteration on.
    pub ratio: Option<f64>,
    pub inner_iterations: usize,
    pub inner_change: f64,
    pub relaxation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceReport {
    pub scheme: Scheme,
    pub delta: f64,
    pub rows: Vec<IterationRow>,
    pub converged: bool,
    pub iterations: usize,
    /// Mean `Y₀` of the final iterate.
    pub y0: Vec<f64>,
}

impl ConvergenceReport {
    pub fn distances(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.distance).collect()
    }
}

#[derive(Debug, Clone)]
pub struct MfSolution {
    pub iterate: SolverIterate,
    pub ensemble: PathEnsemble,
    pub laws: StepLaws,
    pub report: ConvergenceReport,
}

fn expect_scheme(config: &PicardConfig, scheme: Scheme) -> Result<()> {
    config.validate()?;
    if config.scheme != scheme {
        return Err(Error::InvalidParameter(format!(
            "configuration selects scheme {}, solver runs {}",
            config.scheme.label(),
            scheme.label()
        )));
    }
    Ok(())
}

pub fn solve_mf_h1(coeffs: &CoefficientSet, ens: &PathEnsemble, basis: &BasisSpec, config: &PicardConfig) -> Result<MfSolution> {
    expect_scheme(config, Scheme::H1)?;
    picard(coeffs, ens, basis, config, true)
}

pub fn solve_mf_h2(coeffs: &CoefficientSet, ens: &PathEnsemble, basis: &BasisSpec, config: &PicardConfig) -> Result<MfSolution> {
    expect_scheme(config, Scheme::H2)?;
    picard(coeffs, ens, basis, config, true)
}

/// Coupled scheme without mean-field terms; `δ = min(k, k′)/C̃` (capped at 1)
/// when constants are supplied.
pub fn solve_coupled_appendix(
    coeffs: &CoefficientSet,
    ens: &PathEnsemble,
    basis: &BasisSpec,
    config: &PicardConfig,
    constants: Option<&LipschitzConstants>,
) -> Result<MfSolution> {
    let mut cfg = *config;
    if let Some(l) = constants {
        l.validate()?;
        cfg.delta = l.appendix_delta().min(1.0);
    }
    expect_scheme(&cfg, Scheme::Appendix)?;
    ensure_law_free(coeffs)?;
    picard(coeffs, ens, basis, &cfg, false)
}

/// Dispatch on `config.scheme`.
pub fn solve(coeffs: &CoefficientSet, ens: &PathEnsemble, basis: &BasisSpec, config: &PicardConfig) -> Result<MfSolution> {
    match config.scheme {
        Scheme::H1 => solve_mf_h1(coeffs, ens, basis, config),
        Scheme::H2 => solve_mf_h2(coeffs, ens, basis, config),
        Scheme::Appendix => solve_coupled_appendix(coeffs, ens, basis, config, None),
    }
}

/// Rejects coefficient sets whose values at the initial state move with the law.
fn ensure_law_free(coeffs: &CoefficientSet) -> Result<()> {
    let d = coeffs.dims;
    let mut u = State::zeros(&d);
    coeffs.initial.sample(0, 0, &mut u.x);
    let n = d.x + d.y;
    let a = EmpiricalLaw::from_flat(vec![0.0; n], n)?;
    let b = EmpiricalLaw::from_flat((0..2 * n).map(|i| if i < n { 1.5 } else { -0.5 }).collect(), n)?;
    let ta = EmpiricalLaw::from_flat(vec![0.0; d.x], d.x)?;
    let tb = EmpiricalLaw::from_flat(vec![1.5; d.x], d.x)?;
    let mut oa = vec![0.0; d.x.max(d.y) * d.w.max(1)];
    let mut ob = oa.clone();
    let mut differs = false;
    let mut cmp = |f: &dyn Fn(&EmpiricalLaw, &mut [f64]), len: usize| {
        f(&a, &mut oa[..len]);
        f(&b, &mut ob[..len]);
        differs |= oa[..len] != ob[..len];
    };
    cmp(&|nu, out| (coeffs.drift)(0.0, u.as_ref(), nu, out), d.x);
    cmp(&|nu, out| (coeffs.diffusion)(0.0, u.as_ref(), nu, out), d.x * d.w);
    cmp(&|nu, out| (coeffs.driver)(0.0, u.as_ref(), nu, out), d.y);
    for j in 0..d.marks {
        cmp(&|nu, out| (coeffs.jump)(0.0, u.as_ref(), nu, j, 1.0, out), d.x);
    }
    let mut ga = vec![0.0; d.y];
    let mut gb = vec![0.0; d.y];
    (coeffs.terminal)(&u.x, &ta, &mut ga);
    (coeffs.terminal)(&u.x, &tb, &mut gb);
    if differs || ga != gb {
        return Err(Error::InvalidParameter(format!(
            "coefficient set {} depends on the law; the appendix scheme requires law-free coefficients",
            coeffs.name
        )));
    }
    Ok(())
}

struct InnerOutcome {
    iterate: SolverIterate,
    ensemble: PathEnsemble,
    iterations: usize,
    change: f64,
}

#[allow(clippy::too_many_arguments)]
fn inner_solve(
    coeffs: &CoefficientSet,
    laws: &StepLaws,
    basis: &BasisSpec,
    config: &PicardConfig,
    prev_it: &SolverIterate,
    prev_ens: &PathEnsemble,
    omega: &mut f64,
) -> Result<InnerOutcome> {
    let forward_damped = config.scheme != Scheme::H2;
    let grid = prev_ens.grid;
    let rates = prev_ens.noise.rates();
    let mut est = prev_it.clone();
    let mut ens = prev_ens.clone();
    let mut last_change = f64::INFINITY;
    let mut change = f64::INFINITY;
    let mut cand = prev_it.clone();
    let mut used = 0;
    for k in 1..=config.max_inner {
        used = k;
        let fp = forward_damped.then_some(ForwardPerturbation { delta: config.delta, previous: prev_it });
        simulate_forward(coeffs, Some(&est), laws, &mut ens, fp)?;
        let bp = (!forward_damped).then_some(BackwardPerturbation { delta: config.delta, previous_x: &prev_ens.x });
        cand = solve_backward(&ens, coeffs, laws, basis, bp)?;
        change = l2_distance(&cand, &est, &grid, &rates)?.total().sqrt();
        if change < config.inner_tol {
            break;
        }
        if change > last_change {
            *omega = (*omega * 0.5).max(MIN_RELAXATION);
        }
        last_change = change;
        est.relax_towards(&cand, *omega)?;
    }
    Ok(InnerOutcome { iterate: cand, ensemble: ens, iterations: used, change })
}

fn picard(
    coeffs: &CoefficientSet,
    ens: &PathEnsemble,
    basis: &BasisSpec,
    config: &PicardConfig,
    mean_field: bool,
) -> Result<MfSolution> {
    coeffs.validate()?;
    basis.validate(coeffs.dims.x)?;
    let d = coeffs.dims;
    let m = ens.grid.steps;
    let rates = ens.noise.rates();
    if d.w != ens.noise.dw() || d.marks != ens.noise.marks() {
        return Err(Error::Shape("coefficient dimensions do not match the ensemble noise".into()));
    }
    let mut prev_ens = ens.clone();
    prev_ens.reset_state(d.x);
    let mut prev_it = SolverIterate::zeros(ens.particles, m, d);
    let mut laws = StepLaws::dirac_zero(d.x, d.y, m);
    let mut rows: Vec<IterationRow> = Vec::new();
    let mut converged = false;

    for n in 1..=config.max_outer {
        if mean_field {
            laws = StepLaws::from_paths(&prev_ens, Some(&prev_it), d.y)?;
        }
        let mut omega = config.relaxation;
        let inner = inner_solve(coeffs, &laws, basis, config, &prev_it, &prev_ens, &mut omega)?;
        let x_terminal = terminal_distance(&inner.ensemble, &prev_ens)?;
        let l2 = l2_distance(&inner.iterate, &prev_it, &ens.grid, &rates)?;
        let distance = (x_terminal + l2.total()).sqrt();
        let ratio = rows.last().map(|r| if r.distance > 0.0 { distance / r.distance } else { f64::NAN });
        rows.push(IterationRow {
            iteration: n,
            x_terminal,
            y: l2.y,
            z: l2.z,
            k: l2.k,
            distance,
            ratio,
            inner_iterations: inner.iterations,
            inner_change: inner.change,
            relaxation: omega,
        });
        prev_ens = inner.ensemble;
        prev_it = inner.iterate;
        if !distance.is_finite() {
            return Err(Error::Divergence(format!("outer distance is not finite at iteration {n}")));
        }
        if distance < config.outer_tol {
            converged = true;
            break;
        }
    }
    if mean_field {
        laws = StepLaws::from_paths(&prev_ens, Some(&prev_it), d.y)?;
    }
    let report = ConvergenceReport {
        scheme: config.scheme,
        delta: config.delta,
        iterations: rows.len(),
        rows,
        converged,
        y0: prev_it.y0_mean(),
    };
    Ok(MfSolution { iterate: prev_it, ensemble: prev_ens, laws, report })
}

/// Median of `dₙ₊₁/dₙ` over the ratios after the first.
pub fn empirical_contraction_ratio(report: &ConvergenceReport) -> Result<f64> {
    ratio_of_distances(&report.distances())
}

pub fn ratio_of_distances(d: &[f64]) -> Result<f64> {
    if d.len() < 3 {
        return Err(Error::InsufficientData(format!("{} outer iterations, at least 3 are needed", d.len())));
    }
    let mut r: Vec<f64> = d.windows(2).skip(1).filter(|w| w[0] > 0.0).map(|w| w[1] / w[0]).collect();
    if r.is_empty() {
        return Err(Error::InsufficientData("all distances after the first ratio are zero".into()));
    }
    r.sort_by(f64::total_cmp);
    let k = r.len();
    Ok(if k % 2 == 1 { r[k / 2] } else { 0.5 * (r[k / 2 - 1] + r[k / 2]) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::families::{appendix_ode, linear_family, zero_instance, LinearParams};
    use crate::forward_sim::{make_ensemble, NoiseSpec, TimeGrid};

    fn ens(n: usize, steps: usize, seed: u64) -> PathEnsemble {
        make_ensemble(n, TimeGrid::new(1.0, steps).unwrap(), NoiseSpec::brownian(1), seed).unwrap()
    }

    #[test]
    fn ratio_examples() {
        let geo: Vec<f64> = (1..10).map(|n| 0.5f64.powi(n)).collect();
        assert!((ratio_of_distances(&geo).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(ratio_of_distances(&[2.0; 5]).unwrap(), 1.0);
        assert!(matches!(ratio_of_distances(&[1.0, 0.5]), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn zero_instance_converges_immediately() {
        let (c, _) = zero_instance();
        for scheme in [Scheme::H1, Scheme::H2, Scheme::Appendix] {
            let cfg = PicardConfig { scheme, ..Default::default() };
            let sol = solve(&c, &ens(20, 10, 1), &BasisSpec::new(1), &cfg).unwrap();
            assert!(sol.report.converged);
            assert_eq!(sol.report.iterations, 1);
            assert!(sol.iterate.y.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn config_validation() {
        let (c, _) = zero_instance();
        let e = ens(2, 2, 0);
        let b = BasisSpec::new(1);
        for bad in [
            PicardConfig { delta: 0.0, ..Default::default() },
            PicardConfig { delta: 1.5, ..Default::default() },
            PicardConfig { outer_tol: 0.0, ..Default::default() },
            PicardConfig { max_inner: 0, ..Default::default() },
        ] {
            assert!(solve(&c, &e, &b, &bad).is_err());
        }
        let h2 = PicardConfig { scheme: Scheme::H2, ..Default::default() };
        assert!(solve_mf_h1(&c, &e, &b, &h2).is_err());
    }

    #[test]
    fn appendix_rejects_law_dependence() {
        let p = LinearParams { drift_nu: 1.0, ..Default::default() };
        let (c, l) = linear_family(&p, None).unwrap();
        let cfg = PicardConfig { scheme: Scheme::Appendix, ..Default::default() };
        assert!(solve_coupled_appendix(&c, &ens(2, 2, 0), &BasisSpec::new(1), &cfg, Some(&l)).is_err());
    }

    #[test]
    fn appendix_delta_from_constants() {
        let (c, l) = appendix_ode(1.0);
        let cfg = PicardConfig { scheme: Scheme::Appendix, outer_tol: 1e-6, ..Default::default() };
        let e = make_ensemble(1, TimeGrid::new(1.0, 50).unwrap(), NoiseSpec::brownian(1), 0).unwrap();
        let sol = solve_coupled_appendix(&c, &e, &BasisSpec::new(0), &cfg, Some(&l)).unwrap();
        assert_eq!(sol.report.delta, 0.5);
        assert!(sol.report.converged);
    }

    #[test]
    fn reports_are_deterministic() {
        let p = LinearParams { drift_y: -1.0, driver_x: -1.0, diffusion_const: 0.1, terminal_x: 1.0, x0: 1.0, ..Default::default() };
        let (c, _) = linear_family(&p, None).unwrap();
        let cfg = PicardConfig { outer_tol: 1e-5, ..Default::default() };
        let a = solve_mf_h1(&c, &ens(200, 20, 3), &BasisSpec::new(1), &cfg).unwrap();
        let b = solve_mf_h1(&c, &ens(200, 20, 3), &BasisSpec::new(1), &cfg).unwrap();
        assert_eq!(a.report, b.report);
        assert!(a.report.converged);
    }
}
