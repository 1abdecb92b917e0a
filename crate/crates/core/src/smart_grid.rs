//! Storage network model: production, price formation, costs and the
//! Nash / mean-field-control coupling assembled into an FBSDE.
//!
//! Forward state per particle: `(S¹..S^Γ, Q¹..Q^Γ, Q⁰)`, one representative
//! node of every region. Backward state: `(Y¹..Y^Γ)`, adjoint to storage.
//! Brownian columns: `B¹..B^Γ` then `B⁰`; marks: `Ñ` then `Ñ⁰`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backward_solver::{BasisSpec, SolverIterate};
use crate::coefficients::{CoefficientSet, Dims, InitialLaw};
use crate::error::{Error, Result};
use crate::forward_sim::{simulate_production, NoiseSpec, PathEnsemble, ProductionSpec, RestSpec, StepLaws};
use crate::lq_benchmark::LqParams;
use crate::measure::EmpiricalLaw;
use crate::mf_solver::{solve, MfSolution, PicardConfig};
use crate::random_measure::JumpIntensity;

const ROOT_ITERATIONS: usize = 100;

/// Inverse demand function, nondecreasing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PriceFunction {
    Linear { p0: f64, p1: f64 },
    Cubic { p0: f64, p1: f64, p3: f64 },
    /// `clamp(p0 + p1 x, floor, cap)`; not differentiable at the kinks.
    Clipped { p0: f64, p1: f64, floor: f64, cap: f64 },
}

impl PriceFunction {
    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            PriceFunction::Linear { p0, p1 } => p0 + p1 * x,
            PriceFunction::Cubic { p0, p1, p3 } => p0 + p1 * x + p3 * x * x * x,
            PriceFunction::Clipped { p0, p1, floor, cap } => (p0 + p1 * x).clamp(floor, cap),
        }
    }

    pub fn derivative(&self, x: f64) -> Result<f64> {
        match *self {
            PriceFunction::Linear { p1, .. } => Ok(p1),
            PriceFunction::Cubic { p1, p3, .. } => Ok(p1 + 3.0 * p3 * x * x),
            PriceFunction::Clipped { p0, p1, floor, cap } => {
                let v = p0 + p1 * x;
                if v == floor || v == cap {
                    Err(Error::Domain(format!("price function is not differentiable at {x}")))
                } else if v < floor || v > cap {
                    Ok(0.0)
                } else {
                    Ok(p1)
                }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            PriceFunction::Linear { p0, p1 } => p0.is_finite() && p1.is_finite() && p1 >= 0.0,
            PriceFunction::Cubic { p0, p1, p3 } => p0.is_finite() && p1 >= 0.0 && p3 >= 0.0 && p3.is_finite(),
            PriceFunction::Clipped { p0, p1, floor, cap } => p0.is_finite() && p1 >= 0.0 && floor < cap,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("price function {self:?} must be finite and nondecreasing")))
        }
    }

    fn is_linear(&self) -> Option<(f64, f64)> {
        match *self {
            PriceFunction::Linear { p0, p1 } => Some((p0, p1)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Region {
    pub weight: f64,
    pub production: ProductionSpec,
    /// `K^γ` of `L_T(q, α) = K/2 (q − α)²`.
    pub transmission: f64,
    #[serde(default)]
    pub s0: f64,
}

/// `L_S(s, α) = A₁ s + A₂/2 s² + C/2 α²` and `g(s) = B₂/2 (s − B₁/B₂)²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostParams {
    pub a1: f64,
    pub a2: f64,
    pub c: f64,
    pub b1: f64,
    pub b2: f64,
}

impl CostParams {
    pub fn storage(&self, s: f64, alpha: f64) -> f64 {
        self.a1 * s + 0.5 * self.a2 * s * s + 0.5 * self.c * alpha * alpha
    }

    pub fn storage_ds(&self, s: f64) -> f64 {
        self.a1 + self.a2 * s
    }

    pub fn terminal(&self, s: f64) -> f64 {
        if self.b2 == 0.0 {
            return 0.0;
        }
        let d = s - self.b1 / self.b2;
        0.5 * self.b2 * d * d
    }

    pub fn terminal_ds(&self, s: f64) -> f64 {
        self.b2 * s - self.b1
    }
}

pub fn transmission_cost(k: f64, q: f64, alpha: f64) -> f64 {
    0.5 * k * (q - alpha) * (q - alpha)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridModel {
    pub regions: Vec<Region>,
    #[serde(default)]
    pub rest: RestSpec,
    /// `K⁰` of the rest-of-world transmission cost.
    #[serde(default)]
    pub rest_transmission: f64,
    pub price: PriceFunction,
    pub costs: CostParams,
    pub s_max: f64,
    #[serde(default)]
    pub jumps: Option<JumpIntensity>,
    #[serde(default)]
    pub common_jumps: Option<JumpIntensity>,
}

impl GridModel {
    /// One region driven by the deterministic benchmark production paths.
    pub fn from_lq(p: &LqParams) -> Self {
        let production = ProductionSpec {
            q0: p.region_mean.initial,
            drift: p.region_mean.drift_const,
            drift_lin: p.region_mean.drift_lin,
            ..ProductionSpec::default()
        };
        let rest = RestSpec { q0: p.rest.initial, drift: p.rest.drift_const, drift_lin: p.rest.drift_lin, ..RestSpec::default() };
        GridModel {
            regions: vec![Region { weight: 1.0, production, transmission: p.k, s0: p.s0 }],
            rest,
            rest_transmission: 0.0,
            price: PriceFunction::Linear { p0: p.p0, p1: p.p1 },
            costs: CostParams { a1: p.a1, a2: p.a2, c: p.c, b1: p.b1, b2: p.b2 },
            s_max: 1.0,
            jumps: None,
            common_jumps: None,
        }
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.regions.is_empty() {
            return Err(Error::InvalidParameter("grid model needs at least one region".into()));
        }
        let total: f64 = self.regions.iter().map(|r| r.weight).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidParameter(format!("region weights sum to {total}, expected 1")));
        }
        for (g, r) in self.regions.iter().enumerate() {
            if !(r.weight > 0.0 && r.weight <= 1.0) {
                return Err(Error::InvalidParameter(format!("weight of region {g} must lie in (0, 1]")));
            }
            if !(r.transmission > 0.0) {
                return Err(Error::InvalidParameter(format!("transmission constant of region {g} must be positive")));
            }
        }
        if !(self.costs.a2 > 0.0) {
            return Err(Error::InvalidParameter("A2 must be positive".into()));
        }
        if !(self.costs.b2 > 0.0) {
            return Err(Error::InvalidParameter("B2 must be positive".into()));
        }
        if !(self.s_max > 0.0) {
            return Err(Error::InvalidParameter("S_max must be positive".into()));
        }
        self.price.validate()
    }

    pub fn noise_spec(&self) -> NoiseSpec {
        NoiseSpec {
            brownian: self.regions.len(),
            common_brownian: 1,
            jumps: self.jumps.clone(),
            common_jumps: self.common_jumps.clone(),
        }
    }

    pub fn dims(&self) -> Dims {
        let g = self.regions.len();
        let noise = self.noise_spec();
        Dims { x: 2 * g + 1, y: g, w: noise.dw(), marks: noise.marks() }
    }

    pub fn productions(&self) -> Vec<ProductionSpec> {
        self.regions.iter().map(|r| r.production).collect()
    }

    /// Demand argument `−Q⁰ − Σ π^γ (q^γ − ν̄^γ)`.
    pub fn demand(&self, q0: f64, means: &[f64], nu_bar: &[f64]) -> f64 {
        -q0 - self.regions.iter().zip(means).zip(nu_bar).map(|((r, m), n)| r.weight * (m - n)).sum::<f64>()
    }

    pub fn spot_price_mf(&self, q0: f64, means: &[f64], nu_bar: &[f64]) -> f64 {
        self.price.eval(self.demand(q0, means, nu_bar))
    }

    /// `Y + P + ∂_α L_T + ∂_α L_S = Y + P − K(Q − α) + Cα`.
    pub fn nash_residual(&self, region: usize, y: f64, price: f64, q: f64, alpha: f64) -> f64 {
        y + price - self.regions[region].transmission * (q - alpha) + self.costs.c * alpha
    }

    /// Mean-field-control coupling with the effective price `p(D) + p′(D) D`
    /// minus the price-impact term `p′(D) D`.
    pub fn mfc_residual(&self, region: usize, y: f64, q0: f64, qbar: &[f64], alpha_bar: &[f64], q: f64, alpha: f64) -> Result<f64> {
        let d = self.demand(q0, qbar, alpha_bar);
        let dp = self.price.derivative(d)?;
        let effective = self.price.eval(d) + dp * d;
        Ok(y - self.regions[region].transmission * (q - alpha) + self.costs.c * alpha + effective - dp * d)
    }
}

/// Piecewise-linear path on a uniform grid of `[0, T]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TabulatedPath {
    pub horizon: f64,
    pub values: Vec<f64>,
}

impl TabulatedPath {
    pub fn constant(horizon: f64, value: f64) -> Self {
        Self { horizon, values: vec![value, value] }
    }

    pub fn eval(&self, t: f64) -> f64 {
        let n = self.values.len() - 1;
        if n == 0 {
            return self.values[0];
        }
        let s = (t / self.horizon).clamp(0.0, 1.0) * n as f64;
        let k = (s.floor() as usize).min(n - 1);
        let w = s - k as f64;
        self.values[k] * (1.0 - w) + self.values[k + 1] * w
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CouplingMode {
    /// Best response to a frozen aggregate control path `ν̄^γ(t)`.
    Nash { nu_bar: Vec<TabulatedPath> },
    /// Aggregate control solved jointly with the price at every time.
    Mfc,
}

/// Pointwise solution of the coupling condition for the storage rates.
#[derive(Debug, Clone)]
pub struct ControlLaw {
    model: GridModel,
    mode: CouplingMode,
}

impl ControlLaw {
    pub fn new(model: &GridModel, mode: &CouplingMode) -> Result<Self> {
        model.validate()?;
        let c = model.costs.c;
        for (g, r) in model.regions.iter().enumerate() {
            if (r.transmission + c).abs() < 1e-14 {
                return Err(Error::Domain(format!("K + C vanishes in region {g}; coupling condition is degenerate")));
            }
        }
        match mode {
            CouplingMode::Nash { nu_bar } => {
                if nu_bar.len() != model.len() || nu_bar.iter().any(|p| p.values.is_empty()) {
                    return Err(Error::Shape("one nonempty aggregate path per region is required".into()));
                }
            }
            CouplingMode::Mfc => {
                if let Some((_, p1)) = model.price.is_linear() {
                    let slope = 1.0 + p1 * model.regions.iter().map(|r| r.weight / (r.transmission + c)).sum::<f64>();
                    if slope.abs() < 1e-14 {
                        return Err(Error::Domain("K + C + p1 vanishes; aggregate coupling is degenerate".into()));
                    }
                }
            }
        }
        Ok(Self { model: model.clone(), mode: mode.clone() })
    }

    /// Aggregate terms `(D, ᾱ)` given conditional means of `Y` and `Q` and `Q⁰`.
    pub fn aggregate(&self, t: f64, ybar: &[f64], qbar: &[f64], q0: f64) -> Result<(f64, Vec<f64>)> {
        let m = &self.model;
        let c = m.costs.c;
        let alpha_of = |d: f64| -> Vec<f64> {
            let p = m.price.eval(d);
            m.regions
                .iter()
                .enumerate()
                .map(|(g, r)| -(ybar[g] - r.transmission * qbar[g] + p) / (r.transmission + c))
                .collect()
        };
        match &self.mode {
            CouplingMode::Nash { nu_bar } => {
                let nu: Vec<f64> = nu_bar.iter().map(|p| p.eval(t)).collect();
                let d = m.demand(q0, qbar, &nu);
                Ok((d, alpha_of(d)))
            }
            CouplingMode::Mfc => {
                let base = -q0 - m.regions.iter().zip(qbar).map(|(r, q)| r.weight * q).sum::<f64>();
                let f = |u: f64| {
                    let a = alpha_of(base + u);
                    m.regions.iter().zip(&a).map(|(r, a)| r.weight * a).sum::<f64>() - u
                };
                let df = |u: f64| {
                    let dp = m.price.derivative(base + u).unwrap_or(0.0);
                    -1.0 - dp * m.regions.iter().map(|r| r.weight / (r.transmission + c)).sum::<f64>()
                };
                let u = match m.price.is_linear() {
                    Some(_) => {
                        let f0 = f(0.0);
                        -f0 / df(0.0)
                    }
                    None => newton_bisection(f, df, 0.0)?,
                };
                let d = base + u;
                Ok((d, alpha_of(d)))
            }
        }
    }

    /// Storage rate of one node given its `Y`, `Q` and the aggregate demand.
    pub fn node_alpha(&self, region: usize, y: f64, q: f64, demand: f64) -> f64 {
        let r = &self.model.regions[region];
        -(y - r.transmission * q + self.model.price.eval(demand)) / (r.transmission + self.model.costs.c)
    }

    /// Rates of every region at one particle, reading aggregates from `ν`.
    pub fn alphas(&self, t: f64, x: &[f64], y: &[f64], nu: &EmpiricalLaw, out: &mut [f64]) -> Result<f64> {
        let g = self.model.len();
        let mean = nu.mean();
        let (qbar, ybar) = (&mean[g..2 * g], &mean[2 * g + 1..3 * g + 1]);
        let (d, _) = self.aggregate(t, ybar, qbar, x[2 * g])?;
        for r in 0..g {
            out[r] = self.node_alpha(r, y[r], x[g + r], d);
        }
        Ok(self.model.price.eval(d))
    }
}

/// Newton iteration safeguarded by bisection once a sign change is bracketed.
pub fn newton_bisection<F, D>(f: F, df: D, x0: f64) -> Result<f64>
where
    F: Fn(f64) -> f64,
    D: Fn(f64) -> f64,
{
    let mut x = x0;
    let mut fx = f(x);
    let mut bracket: Option<(f64, f64)> = None;
    let mut step = 1.0;
    for _ in 0..ROOT_ITERATIONS {
        if fx.abs() <= 1e-13 * (1.0 + x.abs()) {
            return Ok(x);
        }
        let d = df(x);
        let mut next = if d != 0.0 && d.is_finite() { x - fx / d } else { x + step };
        if let Some((lo, hi)) = bracket {
            if !(next > lo.min(hi) && next < lo.max(hi)) {
                next = 0.5 * (lo + hi);
            }
        }
        let fn_ = f(next);
        if !fn_.is_finite() {
            step *= 0.5;
            continue;
        }
        if fn_.signum() != fx.signum() {
            bracket = Some((x, next));
        } else if let Some((lo, hi)) = bracket {
            let flo = f(lo);
            bracket = Some(if flo.signum() == fn_.signum() { (next, hi) } else { (lo, next) });
        }
        if (next - x).abs() <= 1e-15 * (1.0 + x.abs()) {
            return Ok(next);
        }
        x = next;
        fx = fn_;
        step *= 2.0;
    }
    Err(Error::Domain(format!("coupling root not found after {ROOT_ITERATIONS} iterations")))
}

/// FBSDE of the storage problem under the chosen coupling.
pub fn assemble_mfc_fbsde(model: &GridModel, mode: &CouplingMode) -> Result<CoefficientSet> {
    let law = Arc::new(ControlLaw::new(model, mode)?);
    let dims = model.dims();
    let g = model.len();
    let regions = model.regions.clone();
    let rest = model.rest;
    let costs = model.costs;
    let idio = model.jumps.as_ref().map_or(0, |j| j.len());
    let drift_law = law.clone();
    let mut initial: Vec<f64> = regions.iter().map(|r| r.s0).collect();
    initial.extend(regions.iter().map(|r| r.production.q0));
    initial.push(rest.q0);
    let regions_d = regions.clone();
    let regions_j = regions.clone();
    Ok(CoefficientSet {
        name: match mode {
            CouplingMode::Nash { .. } => "grid_nash".into(),
            CouplingMode::Mfc => "grid_mfc".into(),
        },
        dims,
        drift: Arc::new(move |t, u, nu, out| {
            if drift_law.alphas(t, u.x, u.y, nu, &mut out[..g]).is_err() {
                out[..g].fill(f64::NAN);
            }
            for (r, reg) in regions.iter().enumerate() {
                let q = u.x[g + r];
                out[g + r] = reg.production.drift + reg.production.drift_lin * q;
            }
            out[2 * g] = rest.drift + rest.drift_lin * u.x[2 * g];
        }),
        diffusion: Arc::new(move |_, _, _, out| {
            let w = g + 1;
            out.fill(0.0);
            for (r, reg) in regions_d.iter().enumerate() {
                out[(g + r) * w + r] = reg.production.sigma;
                out[(g + r) * w + g] = reg.production.sigma_common;
            }
            out[2 * g * w + g] = rest.sigma;
        }),
        jump: Arc::new(move |_, _, _, j, e, out| {
            out.fill(0.0);
            for (r, reg) in regions_j.iter().enumerate() {
                out[g + r] = if j < idio { reg.production.beta } else { reg.production.beta_common } * e;
            }
            if j >= idio {
                out[2 * g] = rest.beta * e;
            }
        }),
        driver: Arc::new(move |_, u, _, out| {
            for r in 0..g {
                out[r] = costs.storage_ds(u.x[r]);
            }
        }),
        terminal: Arc::new(move |x, _, out| {
            for r in 0..g {
                out[r] = costs.terminal_ds(x[r]);
            }
        }),
        initial: InitialLaw::Fixed { value: initial },
    })
}

/// Storage, production and control paths of an ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct GridPaths {
    pub particles: usize,
    pub steps: usize,
    pub regions: usize,
    pub horizon: f64,
    /// `N × (M+1) × Γ` each.
    pub s: Vec<f64>,
    pub q: Vec<f64>,
    pub alpha: Vec<f64>,
    /// `M + 1`.
    pub q0: Vec<f64>,
}

impl GridPaths {
    fn idx(&self, p: usize, i: usize, r: usize) -> usize {
        (p * (self.steps + 1) + i) * self.regions + r
    }

    pub fn s_at(&self, p: usize, i: usize, r: usize) -> f64 {
        self.s[self.idx(p, i, r)]
    }

    pub fn q_at(&self, p: usize, i: usize, r: usize) -> f64 {
        self.q[self.idx(p, i, r)]
    }

    pub fn alpha_at(&self, p: usize, i: usize, r: usize) -> f64 {
        self.alpha[self.idx(p, i, r)]
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    /// Cross-particle mean of a field at every time, region-major `Γ × (M+1)`.
    fn means(&self, field: &[f64]) -> Vec<Vec<f64>> {
        (0..self.regions)
            .map(|r| {
                (0..=self.steps)
                    .map(|i| (0..self.particles).map(|p| field[self.idx(p, i, r)]).sum::<f64>() / self.particles as f64)
                    .collect()
            })
            .collect()
    }

    pub fn mean_s(&self) -> Vec<Vec<f64>> {
        self.means(&self.s)
    }

    pub fn mean_q(&self) -> Vec<Vec<f64>> {
        self.means(&self.q)
    }

    pub fn mean_alpha(&self) -> Vec<Vec<f64>> {
        self.means(&self.alpha)
    }
}

/// Prices `p(−Q⁰ − Σπ(E[Q^γ|F⁰] − ν̄^γ))` along the paths; `nu_bar` is `Γ × (M+1)`.
pub fn price_path(model: &GridModel, paths: &GridPaths, nu_bar: &[Vec<f64>]) -> Vec<f64> {
    let qbar = paths.mean_q();
    (0..=paths.steps)
        .map(|i| {
            let m: Vec<f64> = qbar.iter().map(|v| v[i]).collect();
            let n: Vec<f64> = nu_bar.iter().map(|v| v[i]).collect();
            model.spot_price_mf(paths.q0[i], &m, &n)
        })
        .collect()
}

fn trapezoid(values: &[f64], dt: f64) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    dt * (values[1..n - 1].iter().sum::<f64>() + 0.5 * (values[0] + values[n - 1]))
}

/// Running and terminal cost of one region, split as (energy, transmission, storage, terminal).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct CostBreakdown {
    pub energy: f64,
    pub transmission: f64,
    pub storage: f64,
    pub terminal: f64,
}

impl CostBreakdown {
    pub fn total(&self) -> f64 {
        self.energy + self.transmission + self.storage + self.terminal
    }
}

pub fn cost_region_breakdown(model: &GridModel, paths: &GridPaths, region: usize, nu_bar: &[Vec<f64>]) -> CostBreakdown {
    let price = price_path(model, paths, nu_bar);
    let k = model.regions[region].transmission;
    let dt = paths.dt();
    let mut out = CostBreakdown::default();
    for p in 0..paths.particles {
        let (mut e, mut t, mut s) = (Vec::new(), Vec::new(), Vec::new());
        for i in 0..=paths.steps {
            let (a, q, st) = (paths.alpha_at(p, i, region), paths.q_at(p, i, region), paths.s_at(p, i, region));
            e.push(price[i] * (a - q));
            t.push(transmission_cost(k, q, a));
            s.push(model.costs.storage(st, a));
        }
        out.energy += trapezoid(&e, dt);
        out.transmission += trapezoid(&t, dt);
        out.storage += trapezoid(&s, dt);
        out.terminal += model.costs.terminal(paths.s_at(p, paths.steps, region));
    }
    let n = paths.particles as f64;
    CostBreakdown { energy: out.energy / n, transmission: out.transmission / n, storage: out.storage / n, terminal: out.terminal / n }
}

/// `J^γ(α^γ, ν̄)`.
pub fn cost_region(model: &GridModel, paths: &GridPaths, region: usize, nu_bar: &[Vec<f64>]) -> f64 {
    cost_region_breakdown(model, paths, region, nu_bar).total()
}

/// `J^C(α)`: rest-of-world energy and transmission plus the weighted regional costs at `ν̄ = ᾱ`.
pub fn cost_central(model: &GridModel, paths: &GridPaths) -> f64 {
    let abar = paths.mean_alpha();
    let price = price_path(model, paths, &abar);
    let rest: Vec<f64> = (0..=paths.steps)
        .map(|i| -price[i] * paths.q0[i] + transmission_cost(model.rest_transmission, paths.q0[i], 0.0))
        .collect();
    let regional: f64 =
        model.regions.iter().enumerate().map(|(g, r)| r.weight * cost_region(model, paths, g, &abar)).sum();
    trapezoid(&rest, paths.dt()) + regional
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BatteryReport {
    pub violation_fraction: f64,
    pub max_excursion: f64,
}

/// Share of samples outside `[0, S_max]` and the largest distance outside it.
pub fn battery_constraint_report(s: &[f64], s_max: f64) -> BatteryReport {
    let mut bad = 0usize;
    let mut worst: f64 = 0.0;
    for &v in s {
        let ex = (-v).max(v - s_max).max(0.0);
        if ex > 0.0 {
            bad += 1;
        }
        worst = worst.max(ex);
    }
    BatteryReport { violation_fraction: if s.is_empty() { 0.0 } else { bad as f64 / s.len() as f64 }, max_excursion: worst }
}

/// Exogenous storage policies for simulation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Policy {
    Constant { rate: f64 },
    /// `α = offset + gain · S`.
    Feedback { offset: f64, gain: f64 },
}

pub fn simulate_policy(model: &GridModel, policy: &Policy, ens: &PathEnsemble) -> Result<GridPaths> {
    model.validate()?;
    let prod = simulate_production(&model.productions(), &model.rest, ens)?;
    let g = model.len();
    let m = ens.grid.steps;
    let dt = ens.grid.dt();
    let n = ens.particles;
    let mut s = vec![0.0; n * (m + 1) * g];
    let mut alpha = vec![0.0; n * (m + 1) * g];
    let rate = |sv: f64| match *policy {
        Policy::Constant { rate } => rate,
        Policy::Feedback { offset, gain } => offset + gain * sv,
    };
    for p in 0..n {
        for r in 0..g {
            let mut cur = model.regions[r].s0;
            for i in 0..=m {
                let idx = (p * (m + 1) + i) * g + r;
                s[idx] = cur;
                alpha[idx] = rate(cur);
                cur += alpha[idx] * dt;
            }
        }
    }
    Ok(GridPaths { particles: n, steps: m, regions: g, horizon: ens.grid.horizon, s, q: prod.q, alpha, q0: prod.q0 })
}

/// Paths of a solved storage FBSDE, with `α` re-evaluated from the coupling.
pub fn solution_paths(model: &GridModel, mode: &CouplingMode, sol: &MfSolution) -> Result<GridPaths> {
    let law = ControlLaw::new(model, mode)?;
    let ens = &sol.ensemble;
    let g = model.len();
    let m = ens.grid.steps;
    let n = ens.particles;
    let mut s = vec![0.0; n * (m + 1) * g];
    let mut q = vec![0.0; n * (m + 1) * g];
    let mut alpha = vec![0.0; n * (m + 1) * g];
    for p in 0..n {
        for i in 0..=m {
            let x = ens.x_at(p, i);
            let off = (p * (m + 1) + i) * g;
            s[off..off + g].copy_from_slice(&x[..g]);
            q[off..off + g].copy_from_slice(&x[g..2 * g]);
            law.alphas(ens.grid.time(i), x, sol.iterate.y_at(p, i), &sol.laws.joint[i], &mut alpha[off..off + g])?;
        }
    }
    let q0 = (0..=m).map(|i| ens.x_at(0, i)[2 * g]).collect();
    Ok(GridPaths { particles: n, steps: m, regions: g, horizon: ens.grid.horizon, s, q, alpha, q0 })
}

/// Largest Nash and MFC coupling residuals along a solution.
pub fn coupling_residuals(model: &GridModel, mode: &CouplingMode, sol: &MfSolution) -> Result<(f64, f64)> {
    let paths = solution_paths(model, mode, sol)?;
    let qbar = paths.mean_q();
    let abar = paths.mean_alpha();
    let nu_bar: Vec<Vec<f64>> = match mode {
        CouplingMode::Nash { nu_bar } => {
            nu_bar.iter().map(|p| (0..=paths.steps).map(|i| p.eval(sol.ensemble.grid.time(i))).collect()).collect()
        }
        CouplingMode::Mfc => abar.clone(),
    };
    let price = price_path(model, &paths, &nu_bar);
    let (mut nash, mut mfc): (f64, f64) = (0.0, 0.0);
    for p in 0..paths.particles {
        for i in 0..=paths.steps {
            let qb: Vec<f64> = qbar.iter().map(|v| v[i]).collect();
            let ab: Vec<f64> = abar.iter().map(|v| v[i]).collect();
            for r in 0..paths.regions {
                let y = sol.iterate.y_at(p, i)[r];
                let (q, a) = (paths.q_at(p, i, r), paths.alpha_at(p, i, r));
                nash = nash.max(model.nash_residual(r, y, price[i], q, a).abs());
                mfc = mfc.max(model.mfc_residual(r, y, paths.q0[i], &qb, &ab, q, a)?.abs());
            }
        }
    }
    Ok((nash, mfc))
}

/// Fixed-point experiment `ν̄ ← E[α*(ν̄)]`; returns the solution and the sup gaps per round.
pub fn nash_fixed_point(
    model: &GridModel,
    ens: &PathEnsemble,
    basis: &BasisSpec,
    config: &PicardConfig,
    rounds: usize,
) -> Result<(MfSolution, Vec<f64>)> {
    let horizon = ens.grid.horizon;
    let mut nu: Vec<TabulatedPath> = (0..model.len()).map(|_| TabulatedPath::constant(horizon, 0.0)).collect();
    let mut gaps = Vec::new();
    let mut last = None;
    for _ in 0..rounds.max(1) {
        let mode = CouplingMode::Nash { nu_bar: nu.clone() };
        let coeffs = assemble_mfc_fbsde(model, &mode)?;
        let sol = solve(&coeffs, ens, basis, config)?;
        let abar = solution_paths(model, &mode, &sol)?.mean_alpha();
        let mut gap: f64 = 0.0;
        for (r, path) in abar.iter().enumerate() {
            for (i, a) in path.iter().enumerate() {
                gap = gap.max((a - nu[r].eval(ens.grid.time(i))).abs());
            }
        }
        gaps.push(gap);
        nu = abar.into_iter().map(|values| TabulatedPath { horizon, values }).collect();
        last = Some(sol);
    }
    Ok((last.expect("at least one round"), gaps))
}

/// `(Y, Z, K)` zeros shaped for a grid model, for callers that need a placeholder iterate.
pub fn zero_iterate(model: &GridModel, ens: &PathEnsemble) -> SolverIterate {
    SolverIterate::zeros(ens.particles, ens.grid.steps, model.dims())
}

/// Laws of the zero process shaped for a grid model.
pub fn zero_laws(model: &GridModel, steps: usize) -> StepLaws {
    let d = model.dims();
    StepLaws::dirac_zero(d.x, d.y, steps)
}
