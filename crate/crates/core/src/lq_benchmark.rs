//! Closed-form solution of the one-region linear-quadratic storage problem.
//!
//! With the affine ansatz `Y = φ S + ψ` the storage FBSDE reduces to the
//! Riccati equation `φ' = g φ² − A₂`, `φ(T) = B₂`, a linear equation for `ψ`
//! and a linear equation for `S`, where `g` is the control gain (`Δ` for the
//! aggregate problem, `δ` for a single node).

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::coefficients::{CoefficientSet, Dims, InitialLaw};
use crate::error::{Error, Result};

/// Default number of quadrature intervals on `[0, T]`.
pub const DEFAULT_INTERVALS: usize = 2000;

const BLOW_UP: f64 = 1e8;

/// Deterministic production path solving `q' = drift_const + drift_lin q`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffinePath {
    pub initial: f64,
    #[serde(default)]
    pub drift_const: f64,
    #[serde(default)]
    pub drift_lin: f64,
}

impl AffinePath {
    pub fn constant(value: f64) -> Self {
        Self { initial: value, drift_const: 0.0, drift_lin: 0.0 }
    }

    pub fn linear(initial: f64, slope: f64) -> Self {
        Self { initial, drift_const: slope, drift_lin: 0.0 }
    }

    pub fn value(&self, t: f64) -> f64 {
        if self.drift_lin == 0.0 {
            self.initial + self.drift_const * t
        } else {
            let r = self.drift_const / self.drift_lin;
            (self.initial + r) * (self.drift_lin * t).exp() - r
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LqParams {
    pub p0: f64,
    pub p1: f64,
    pub a1: f64,
    pub a2: f64,
    pub c: f64,
    pub k: f64,
    pub b1: f64,
    pub b2: f64,
    pub horizon: f64,
    #[serde(default)]
    pub s0: f64,
    /// Rest-of-world production `Q⁰`.
    pub rest: AffinePath,
    /// Mean regional production `Q̄`.
    pub region_mean: AffinePath,
}

impl Default for LqParams {
    fn default() -> Self {
        Self {
            p0: 1.0,
            p1: 1.5,
            a1: -0.2,
            a2: 0.5,
            c: -2.5,
            k: 2.0,
            b1: 0.3,
            b2: 0.5,
            horizon: 1.0,
            s0: 0.0,
            rest: AffinePath::constant(0.5),
            region_mean: AffinePath::linear(0.2, 0.1),
        }
    }
}

impl LqParams {
    fn check_common(&self) -> Result<()> {
        let all = [self.p0, self.p1, self.a1, self.a2, self.c, self.k, self.b1, self.b2, self.horizon, self.s0];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("LQ parameters must be finite".into()));
        }
        if !(self.horizon > 0.0) {
            return Err(Error::InvalidParameter(format!("horizon {} must be positive", self.horizon)));
        }
        Ok(())
    }

    /// Aggregate gain `Δ = 1/(K + C + p₁)`, validated so that `ρ = √(A₂Δ)` is real.
    pub fn delta_step1(&self) -> Result<f64> {
        self.check_common()?;
        gain_checked(1.0 / (self.k + self.c + self.p1), self.a2, "Δ = 1/(K+C+p1)")
    }

    /// Node gain `δ = −1/(K + C)`, validated separately from the aggregate gain.
    pub fn delta_step2(&self) -> Result<f64> {
        self.check_common()?;
        gain_checked(-1.0 / (self.k + self.c), self.a2, "δ = -1/(K+C)")
    }
}

fn gain_checked(gain: f64, a2: f64, label: &str) -> Result<f64> {
    if !gain.is_finite() {
        return Err(Error::Domain(format!("{label} is not finite")));
    }
    if a2 != 0.0 && !(a2 * gain > 0.0) {
        return Err(Error::Domain(format!("{label} = {gain} gives A2·gain = {} ≤ 0, so ρ is not real", a2 * gain)));
    }
    Ok(gain)
}

/// Closed-form solution of `φ' = g φ² − A₂`, `φ(T) = B₂`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Riccati {
    pub gain: f64,
    pub a2: f64,
    pub b2: f64,
    pub horizon: f64,
    rho: f64,
}

impl Riccati {
    pub fn new(gain: f64, a2: f64, b2: f64, horizon: f64) -> Result<Self> {
        gain_checked(gain, a2, "gain")?;
        let rho = if a2 == 0.0 { 0.0 } else { (a2 * gain).sqrt() };
        let r = Self { gain, a2, b2, horizon, rho };
        r.check_nonsingular()?;
        Ok(r)
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    /// The denominator `D(t)` of the closed form, normalised so `D(T) = 1`.
    /// It satisfies `g φ = −D'/D`, hence `exp(−∫ₛᵗ g φ) = D(t)/D(s)`.
    pub fn denominator(&self, t: f64) -> f64 {
        let tau = self.horizon - t;
        let bg = self.b2 * self.gain;
        if self.rho == 0.0 {
            1.0 + bg * tau
        } else {
            let r = self.rho;
            ((-r * tau).exp() * (r - bg) + (r * tau).exp() * (r + bg)) / (2.0 * r)
        }
    }

    fn check_nonsingular(&self) -> Result<()> {
        let bg = self.b2 * self.gain;
        let tau_star = if self.rho == 0.0 {
            if bg < 0.0 {
                Some(-1.0 / bg)
            } else {
                None
            }
        } else if bg < -self.rho {
            Some((-self.rho / bg).atanh() / self.rho)
        } else {
            None
        };
        match tau_star {
            Some(tau) if tau <= self.horizon => Err(Error::Singular(format!(
                "Riccati denominator vanishes at t = {}",
                self.horizon - tau
            ))),
            _ => Ok(()),
        }
    }

    pub fn eval(&self, t: f64) -> Result<f64> {
        let tau = self.horizon - t;
        let bg = self.b2 * self.gain;
        if self.rho == 0.0 {
            let den = 1.0 + bg * tau;
            if den.abs() < 1e-300 {
                return Err(Error::Singular(format!("Riccati denominator vanishes at t = {t}")));
            }
            return Ok(self.b2 / den);
        }
        // φ = B₂ + (A₂ − gB₂²) tanh(ρτ) / (ρ + gB₂ tanh(ρτ))
        let r = self.rho;
        let th = (r * tau).tanh();
        let den = r + bg * th;
        if den.abs() < 1e-300 || !den.is_finite() {
            return Err(Error::Singular(format!("Riccati denominator vanishes at t = {t}")));
        }
        Ok(self.b2 + (self.a2 - self.gain * self.b2 * self.b2) * th / den)
    }
}

/// `φ̄(t)` for the aggregate gain `Δ`.
pub fn phi_bar(t: f64, params: &LqParams) -> Result<f64> {
    Riccati::new(params.delta_step1()?, params.a2, params.b2, params.horizon)?.eval(t)
}

/// Backward RK4 integration of `φ' = Δ φ² − A₂` from `φ(T) = B₂`, tabulated
/// at `t_i = i T / steps`.
pub fn riccati_rk4(params: &LqParams, steps: usize) -> Result<Vec<f64>> {
    riccati_rk4_with(params.delta_step1()?, params.a2, params.b2, params.horizon, steps)
}

pub fn riccati_rk4_with(gain: f64, a2: f64, b2: f64, horizon: f64, steps: usize) -> Result<Vec<f64>> {
    if steps < 100 {
        return Err(Error::InvalidParameter(format!("{steps} steps, at least 100 required")));
    }
    let f = |phi: f64| gain * phi * phi - a2;
    let h = -horizon / steps as f64;
    let mut out = vec![0.0; steps + 1];
    out[steps] = b2;
    let mut phi = b2;
    for i in (0..steps).rev() {
        let k1 = f(phi);
        let k2 = f(phi + 0.5 * h * k1);
        let k3 = f(phi + 0.5 * h * k2);
        let k4 = f(phi + h * k3);
        phi += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        if !(phi.abs() <= BLOW_UP) {
            return Err(Error::Divergence(format!(
                "Riccati RK4 blew up near t = {}",
                i as f64 * horizon / steps as f64
            )));
        }
        out[i] = phi;
    }
    Ok(out)
}

/// `b_t = p₀ − p₁ Q⁰_t − (p₁ + K) Q̄_t`.
pub fn b_path(t: f64, params: &LqParams) -> f64 {
    params.p0 - params.p1 * params.rest.value(t) - (params.p1 + params.k) * params.region_mean.value(t)
}

/// `P̄_t = −A₁/(Δ φ̄_t) + b_t`.
pub fn price_bar(a1: f64, gain: f64, phi: f64, b: f64) -> Result<f64> {
    if phi == 0.0 || gain == 0.0 {
        if a1 == 0.0 {
            return Ok(b);
        }
        return Err(Error::Singular("price needs a nonvanishing φ".into()));
    }
    Ok(-a1 / (gain * phi) + b)
}

fn simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    (b - a) / 6.0 * (f(a) + 4.0 * f(0.5 * (a + b)) + f(b))
}

/// Cumulative integral of a callable, tabulated at nodes and refined between.
struct Cumulative {
    step: f64,
    table: Vec<f64>,
}

impl Cumulative {
    fn build<F: Fn(f64) -> f64>(f: &F, horizon: f64, intervals: usize) -> Self {
        let step = horizon / intervals as f64;
        let mut table = Vec::with_capacity(intervals + 1);
        table.push(0.0);
        let mut acc = 0.0;
        for k in 0..intervals {
            let a = k as f64 * step;
            let b = if k + 1 == intervals { horizon } else { (k + 1) as f64 * step };
            acc += simpson(f, a, b);
            table.push(acc);
        }
        Self { step, table }
    }

    fn eval<F: Fn(f64) -> f64>(&self, f: &F, t: f64) -> f64 {
        let n = self.table.len() - 1;
        let k = ((t / self.step).floor().max(0.0) as usize).min(n);
        let tk = if k == n { t } else { k as f64 * self.step };
        if k == n {
            return self.table[n];
        }
        self.table[k] + simpson(f, tk, t)
    }
}

type PathFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Solution of the affine-ansatz system for one gain and one price path:
///
/// `S' = −g (Y + b)`, `Y' = −(A₁ + A₂ S)`, `Y_T = B₂ S_T − B₁`, `Y = φ S + ψ`.
pub struct AffineSolution {
    pub riccati: Riccati,
    pub a1: f64,
    pub b1: f64,
    pub s0: f64,
    b: PathFn,
    exponent: Cumulative,
    adjoint: Cumulative,
    state: Cumulative,
}

impl std::fmt::Debug for AffineSolution {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AffineSolution")
            .field("riccati", &self.riccati)
            .field("a1", &self.a1)
            .field("b1", &self.b1)
            .field("s0", &self.s0)
            .finish_non_exhaustive()
    }
}

impl AffineSolution {
    pub fn new(riccati: Riccati, a1: f64, b1: f64, s0: f64, b: PathFn, intervals: usize) -> Result<Self> {
        if intervals == 0 {
            return Err(Error::InvalidParameter("quadrature needs at least one interval".into()));
        }
        let horizon = riccati.horizon;
        let gain = riccati.gain;
        let gphi = move |u: f64| gain * riccati.eval(u).unwrap_or(f64::NAN);
        let exponent = Cumulative::build(&gphi, horizon, intervals);
        let mut sol = Self {
            riccati,
            a1,
            b1,
            s0,
            b,
            exponent,
            adjoint: Cumulative { step: 1.0, table: vec![0.0] },
            state: Cumulative { step: 1.0, table: vec![0.0] },
        };
        let adjoint = Cumulative::build(&|u| sol.adjoint_integrand(u), horizon, intervals);
        sol.adjoint = adjoint;
        let state = Cumulative::build(&|u| sol.state_integrand(u), horizon, intervals);
        sol.state = state;
        if !sol.state.table.iter().chain(&sol.adjoint.table).all(|v| v.is_finite()) {
            return Err(Error::Singular("affine solution quadrature produced non-finite values".into()));
        }
        Ok(sol)
    }

    fn gphi(&self, u: f64) -> f64 {
        self.riccati.gain * self.riccati.eval(u).unwrap_or(f64::NAN)
    }

    /// `F(t) = ∫₀ᵗ g φ`.
    pub fn exponent(&self, t: f64) -> f64 {
        self.exponent.eval(&|u| self.gphi(u), t)
    }

    /// `g φ P = g φ b − A₁`, written without the division by `φ`.
    fn adjoint_integrand(&self, u: f64) -> f64 {
        (-self.exponent(u)).exp() * (self.gphi(u) * (self.b)(u) - self.a1)
    }

    fn state_integrand(&self, u: f64) -> f64 {
        self.exponent(u).exp() * ((self.b)(u) + self.psi(u))
    }

    pub fn horizon(&self) -> f64 {
        self.riccati.horizon
    }

    pub fn b(&self, t: f64) -> f64 {
        (self.b)(t)
    }

    pub fn phi(&self, t: f64) -> Result<f64> {
        self.riccati.eval(t)
    }

    pub fn price(&self, t: f64) -> Result<f64> {
        price_bar(self.a1, self.riccati.gain, self.phi(t)?, self.b(t))
    }

    /// `ψ(t) = −B₁ e^{−∫ₜᵀ gφ} − ∫ₜᵀ gφ(u) e^{−∫ₜᵘ gφ} P_u du`.
    pub fn psi(&self, t: f64) -> f64 {
        let horizon = self.horizon();
        let ft = self.exponent(t);
        let ft_end = self.exponent(horizon);
        let g = |u: f64| self.adjoint_integrand(u);
        let tail = self.adjoint.eval(&g, horizon) - self.adjoint.eval(&g, t);
        -self.b1 * (ft - ft_end).exp() - ft.exp() * tail
    }

    /// `S(t) = s₀ e^{−∫₀ᵗ gφ} − g ∫₀ᵗ e^{−∫ᵤᵗ gφ} (P_u + ψ_u + A₁/(gφ_u)) du`.
    pub fn s(&self, t: f64) -> f64 {
        let ft = self.exponent(t);
        let h = self.state.eval(&|u| self.state_integrand(u), t);
        let decay = (-ft).exp();
        let forced = -self.riccati.gain * decay * h;
        if self.s0 == 0.0 {
            forced
        } else {
            self.s0 * decay + forced
        }
    }

    pub fn y(&self, t: f64) -> Result<f64> {
        Ok(self.phi(t)? * self.s(t) + self.psi(t))
    }

    /// `α = −g (Y + b)`.
    pub fn alpha(&self, t: f64) -> Result<f64> {
        Ok(-self.riccati.gain * (self.y(t)? + self.b(t)))
    }

    /// `α = −g (Y + P + A₁/(g φ))`, the price-based form of the same control.
    pub fn alpha_from_price(&self, t: f64) -> Result<f64> {
        let phi = self.phi(t)?;
        let p = self.price(t)?;
        Ok(-self.riccati.gain * (self.y(t)? + p + self.a1 / (self.riccati.gain * phi)))
    }

    /// Central finite difference of `S`, one-sided at the endpoints.
    pub fn s_derivative_fd(&self, t: f64, h: f64) -> f64 {
        let horizon = self.horizon();
        let lo = (t - h).max(0.0);
        let hi = (t + h).min(horizon);
        (self.s(hi) - self.s(lo)) / (hi - lo)
    }
}

/// Aggregate closed form on the benchmark parameters.
#[derive(Debug)]
pub struct ClosedFormSolution {
    pub params: LqParams,
    pub intervals: usize,
    pub aggregate: AffineSolution,
}

impl ClosedFormSolution {
    pub fn new(params: &LqParams, intervals: usize) -> Result<Self> {
        let gain = params.delta_step1()?;
        let riccati = Riccati::new(gain, params.a2, params.b2, params.horizon)?;
        let p = *params;
        let b: PathFn = Arc::new(move |t| b_path(t, &p));
        let aggregate = AffineSolution::new(riccati, params.a1, params.b1, 0.0, b, intervals)?;
        Ok(Self { params: *params, intervals, aggregate })
    }

    pub fn delta(&self) -> f64 {
        self.aggregate.riccati.gain
    }

    pub fn phi_bar(&self, t: f64) -> Result<f64> {
        self.aggregate.phi(t)
    }

    pub fn price_bar(&self, t: f64) -> Result<f64> {
        self.aggregate.price(t)
    }

    pub fn psi_bar(&self, t: f64) -> f64 {
        self.aggregate.psi(t)
    }

    pub fn s_bar(&self, t: f64) -> f64 {
        self.aggregate.s(t)
    }

    pub fn y_bar(&self, t: f64) -> Result<f64> {
        self.aggregate.y(t)
    }

    pub fn alpha_bar(&self, t: f64) -> Result<f64> {
        self.aggregate.alpha(t)
    }

    /// Largest gap between `ᾱ` and the finite-difference slope of `S̄` over
    /// `points` interior grid points.
    pub fn alpha_consistency_gap(&self, points: usize, h: f64) -> Result<f64> {
        let horizon = self.params.horizon;
        let mut worst: f64 = 0.0;
        for i in 1..points {
            let t = horizon * i as f64 / points as f64;
            let gap = (self.alpha_bar(t)? - self.aggregate.s_derivative_fd(t, h)).abs();
            worst = worst.max(gap);
        }
        Ok(worst)
    }

    /// Node-level solution: gain `δ`, price built from the aggregate control.
    pub fn step2_node_solution(&self, s0: f64) -> Result<AffineSolution> {
        let p = self.params;
        let gain = p.delta_step2()?;
        let riccati = Riccati::new(gain, p.a2, p.b2, p.horizon)?;
        let agg = ClosedFormSolution::new(&p, self.intervals)?;
        let b: PathFn = Arc::new(move |t| {
            let alpha_bar = agg.alpha_bar(t).unwrap_or(f64::NAN);
            p.p0 - p.k * p.region_mean.value(t) - 2.0 * p.p1 * (p.rest.value(t) + p.region_mean.value(t) - alpha_bar)
        });
        AffineSolution::new(riccati, p.a1, p.b1, s0, b, self.intervals)
    }
}

/// Aggregate one-region benchmark as an FBSDE in `(S̄, Ȳ)`:
///
/// `dS = −Δ(Y + b_t)dt`, `dY = −(A₁ + A₂ S)dt`, `Y_T = B₂ S_T − B₁`, `S₀ = s₀`.
pub fn benchmark_fbsde(params: &LqParams) -> Result<CoefficientSet> {
    let gain = params.delta_step1()?;
    let p = *params;
    Ok(CoefficientSet {
        name: "lq_benchmark".into(),
        dims: Dims { x: 1, y: 1, w: 0, marks: 0 },
        drift: Arc::new(move |t, u, _, out| out[0] = -gain * (u.y[0] + b_path(t, &p))),
        diffusion: Arc::new(|_, _, _, _| {}),
        jump: Arc::new(|_, _, _, _, _, out| out.fill(0.0)),
        driver: Arc::new(move |_, u, _, out| out[0] = p.a1 + p.a2 * u.x[0]),
        terminal: Arc::new(move |x, _, out| out[0] = p.b2 * x[0] - p.b1),
        initial: InitialLaw::Fixed { value: vec![p.s0] },
    })
}
