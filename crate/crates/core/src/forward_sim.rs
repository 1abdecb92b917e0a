//! Time grid, noise ensembles and the jump-diffusion Euler scheme.

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backward_solver::SolverIterate;
use crate::coefficients::{CoefficientSet, StateRef};
use crate::error::{Error, Result};
use crate::measure::EmpiricalLaw;
use crate::random_measure::{sample_jump_train, JumpIntensity, JumpTrain};
use crate::rng::{self, Domain};

/// States beyond this magnitude abort the simulation.
pub const DIVERGENCE_BOUND: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeGrid {
    pub horizon: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        let g = Self { horizon, steps };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::InvalidParameter(format!("horizon {} must be positive", self.horizon)));
        }
        if self.steps == 0 {
            return Err(Error::InvalidParameter("time grid needs at least one step".into()));
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn time(&self, i: usize) -> f64 {
        if i == self.steps {
            self.horizon
        } else {
            i as f64 * self.dt()
        }
    }

    /// Index `i` of the step `(tᵢ, tᵢ₊₁]` containing `t`.
    pub fn step_of(&self, t: f64) -> usize {
        let i = (t / self.dt()).ceil() as usize;
        i.saturating_sub(1).min(self.steps - 1)
    }
}

/// Noise layout. Brownian columns are idiosyncratic first, then common; the
/// mark list is the idiosyncratic intensity followed by the common one.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSpec {
    pub brownian: usize,
    pub common_brownian: usize,
    pub jumps: Option<JumpIntensity>,
    pub common_jumps: Option<JumpIntensity>,
}

impl NoiseSpec {
    pub fn brownian(dim: usize) -> Self {
        Self { brownian: dim, ..Self::default() }
    }

    pub fn dw(&self) -> usize {
        self.brownian + self.common_brownian
    }

    pub fn idiosyncratic_marks(&self) -> usize {
        self.jumps.as_ref().map_or(0, |j| j.len())
    }

    pub fn marks(&self) -> usize {
        self.idiosyncratic_marks() + self.common_jumps.as_ref().map_or(0, |j| j.len())
    }

    /// Combined intensity over the full mark list.
    pub fn intensity(&self) -> Option<JumpIntensity> {
        match (&self.jumps, &self.common_jumps) {
            (None, None) => None,
            (Some(a), None) => Some(a.clone()),
            (None, Some(b)) => Some(b.clone()),
            (Some(a), Some(b)) => Some(a.concat(b)),
        }
    }

    pub fn rates(&self) -> Vec<f64> {
        self.intensity().map(|i| i.rates().to_vec()).unwrap_or_default()
    }

    pub fn mark_values(&self) -> Vec<f64> {
        self.intensity().map(|i| i.marks().to_vec()).unwrap_or_default()
    }
}

/// Particle cloud with its frozen noise and forward state.
#[derive(Debug, Clone, PartialEq)]
pub struct PathEnsemble {
    pub particles: usize,
    pub grid: TimeGrid,
    pub noise: NoiseSpec,
    pub seed: u64,
    /// `N × M × d_w`.
    pub dw: Vec<f64>,
    /// `N × M × marks` jump counts per step.
    pub counts: Vec<u32>,
    pub trains: Vec<JumpTrain>,
    pub common_train: JumpTrain,
    /// `N × (M+1) × d_x`, empty until the first forward pass.
    pub x: Vec<f64>,
    pub dx: usize,
}

struct ParticleNoise {
    dw: Vec<f64>,
    train: JumpTrain,
}

fn brownian_block<R: rand::Rng>(rng: &mut R, len: usize, sd: f64) -> Vec<f64> {
    (0..len)
        .map(|_| {
            let n: f64 = StandardNormal.sample(rng);
            sd * n
        })
        .collect()
}

fn generate(seed: u64, index: u64, dim: usize, intensity: Option<&JumpIntensity>, grid: &TimeGrid) -> Result<ParticleNoise> {
    let mut r = rng::stream(seed, Domain::Noise, index);
    let dw = brownian_block(&mut r, grid.steps * dim, grid.dt().sqrt());
    let train = match intensity {
        Some(i) => sample_jump_train(i, grid.horizon, &mut r)?,
        None => JumpTrain::default(),
    };
    Ok(ParticleNoise { dw, train })
}

/// Idiosyncratic Brownian increments (`M × d_idio`) and jump train of particle `p`,
/// regenerated from the master seed alone.
pub fn particle_noise(seed: u64, p: usize, grid: &TimeGrid, noise: &NoiseSpec) -> Result<(Vec<f64>, JumpTrain)> {
    let n = generate(seed, rng::particle(p), noise.brownian, noise.jumps.as_ref(), grid)?;
    Ok((n.dw, n.train))
}

pub fn make_ensemble(particles: usize, grid: TimeGrid, noise: NoiseSpec, seed: u64) -> Result<PathEnsemble> {
    if particles == 0 {
        return Err(Error::InvalidParameter("ensemble needs at least one particle".into()));
    }
    grid.validate()?;
    let m = grid.steps;
    let dw_total = noise.dw();
    let marks = noise.marks();
    let idio_marks = noise.idiosyncratic_marks();
    let common = generate(seed, rng::COMMON, noise.common_brownian, noise.common_jumps.as_ref(), &grid)?;
    let own: Vec<ParticleNoise> = (0..particles)
        .into_par_iter()
        .map(|p| generate(seed, rng::particle(p), noise.brownian, noise.jumps.as_ref(), &grid))
        .collect::<Result<_>>()?;

    let mut common_counts = vec![0u32; m * marks];
    for (&t, &j) in common.train.times.iter().zip(&common.train.mark_indices) {
        common_counts[grid.step_of(t) * marks + idio_marks + j] += 1;
    }
    let mut dw = vec![0.0; particles * m * dw_total];
    let mut counts = vec![0u32; particles * m * marks];
    if dw_total > 0 {
        dw.par_chunks_mut(m * dw_total).zip(&own).for_each(|(dwp, pn)| {
            for i in 0..m {
                let row = &mut dwp[i * dw_total..(i + 1) * dw_total];
                row[..noise.brownian].copy_from_slice(&pn.dw[i * noise.brownian..(i + 1) * noise.brownian]);
                row[noise.brownian..]
                    .copy_from_slice(&common.dw[i * noise.common_brownian..(i + 1) * noise.common_brownian]);
            }
        });
    }
    if marks > 0 {
        counts.par_chunks_mut(m * marks).zip(&own).for_each(|(cp, pn)| {
            cp.copy_from_slice(&common_counts);
            for (&t, &j) in pn.train.times.iter().zip(&pn.train.mark_indices) {
                cp[grid.step_of(t) * marks + j] += 1;
            }
        });
    }
    let trains = own.into_iter().map(|pn| pn.train).collect();
    Ok(PathEnsemble {
        particles,
        grid,
        noise,
        seed,
        dw,
        counts,
        trains,
        common_train: common.train,
        x: Vec::new(),
        dx: 0,
    })
}

impl PathEnsemble {
    pub fn steps(&self) -> usize {
        self.grid.steps
    }

    pub fn dw_at(&self, p: usize, i: usize) -> &[f64] {
        let d = self.noise.dw();
        let off = (p * self.grid.steps + i) * d;
        &self.dw[off..off + d]
    }

    pub fn counts_at(&self, p: usize, i: usize) -> &[u32] {
        let k = self.noise.marks();
        let off = (p * self.grid.steps + i) * k;
        &self.counts[off..off + k]
    }

    pub fn x_at(&self, p: usize, i: usize) -> &[f64] {
        let off = (p * (self.grid.steps + 1) + i) * self.dx;
        &self.x[off..off + self.dx]
    }

    /// Forward states of every particle at step `i`, particle-major.
    pub fn slice(&self, i: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.particles * self.dx);
        for p in 0..self.particles {
            out.extend_from_slice(self.x_at(p, i));
        }
        out
    }

    pub fn terminal(&self) -> Vec<f64> {
        self.slice(self.grid.steps)
    }

    /// Resets the forward state to the zero process `X ≡ 0`.
    pub fn reset_state(&mut self, dx: usize) {
        self.dx = dx;
        self.x = vec![0.0; self.particles * (self.grid.steps + 1) * dx];
    }

    pub fn has_state(&self) -> bool {
        self.dx > 0 && self.x.len() == self.particles * (self.grid.steps + 1) * self.dx
    }
}

/// Mean-field inputs frozen for one forward or backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLaws {
    /// Law of `(Xᵢ, Yᵢ)` at every grid time.
    pub joint: Vec<EmpiricalLaw>,
    /// Law of `X_T`.
    pub terminal: EmpiricalLaw,
}

impl StepLaws {
    /// Laws of the zero process.
    pub fn dirac_zero(dx: usize, dy: usize, steps: usize) -> Self {
        let joint = EmpiricalLaw::from_flat(vec![0.0; dx + dy], dx + dy).expect("nonempty");
        let terminal = EmpiricalLaw::from_flat(vec![0.0; dx], dx).expect("nonempty");
        Self { joint: vec![joint; steps + 1], terminal }
    }

    /// Empirical laws of the ensemble state and an iterate (zeros when absent).
    pub fn from_paths(ens: &PathEnsemble, iterate: Option<&SolverIterate>, dy: usize) -> Result<Self> {
        if !ens.has_state() {
            return Err(Error::Shape("ensemble has no forward state".into()));
        }
        let dx = ens.dx;
        let joint = (0..=ens.grid.steps)
            .into_par_iter()
            .map(|i| {
                let mut pts = Vec::with_capacity(ens.particles * (dx + dy));
                for p in 0..ens.particles {
                    pts.extend_from_slice(ens.x_at(p, i));
                    match iterate {
                        Some(it) => pts.extend_from_slice(it.y_at(p, i)),
                        None => pts.extend(std::iter::repeat_n(0.0, dy)),
                    }
                }
                EmpiricalLaw::from_flat(pts, dx + dy)
            })
            .collect::<Result<Vec<_>>>()?;
        let terminal = EmpiricalLaw::from_flat(ens.terminal(), dx)?;
        Ok(Self { joint, terminal })
    }

    fn check(&self, steps: usize) -> Result<()> {
        if self.joint.len() != steps + 1 {
            return Err(Error::Shape(format!("{} step laws for {} grid times", self.joint.len(), steps + 1)));
        }
        Ok(())
    }
}

/// Forward damping `−δ(Y − Y_prev)` in drift and diffusion, `−δ(K − K_prev)` in the jump.
#[derive(Debug, Clone, Copy)]
pub struct ForwardPerturbation<'a> {
    pub delta: f64,
    pub previous: &'a SolverIterate,
}

fn diverged(p: usize, i: usize, x: &[f64]) -> Option<Error> {
    if x.iter().any(|v| !v.is_finite() || v.abs() > DIVERGENCE_BOUND) {
        Some(Error::Divergence(format!("particle {p} left the bounded region at step {}", i + 1)))
    } else {
        None
    }
}

/// One Euler pass of the forward equation over the whole ensemble.
pub fn simulate_forward(
    coeffs: &CoefficientSet,
    backward: Option<&SolverIterate>,
    laws: &StepLaws,
    ens: &mut PathEnsemble,
    perturbation: Option<ForwardPerturbation<'_>>,
) -> Result<()> {
    coeffs.validate()?;
    let d = coeffs.dims;
    let m = ens.grid.steps;
    if d.w != ens.noise.dw() || d.marks != ens.noise.marks() {
        return Err(Error::Shape(format!(
            "coefficients expect d_w = {}, marks = {}; ensemble carries {} and {}",
            d.w,
            d.marks,
            ens.noise.dw(),
            ens.noise.marks()
        )));
    }
    laws.check(m)?;
    for it in backward.iter().copied().chain(perturbation.map(|p| p.previous)) {
        it.check_shape(ens.particles, m, &d)?;
    }
    let dt = ens.grid.dt();
    let grid = ens.grid;
    let rates = ens.noise.rates();
    let marks = ens.noise.mark_values();
    let seed = ens.seed;
    let zeros_y = vec![0.0; d.y];
    let zeros_z = vec![0.0; d.z_len()];
    let zeros_k = vec![0.0; d.k_len()];
    let shared = d.x.min(d.y);

    let mut x = vec![0.0; ens.particles * (m + 1) * d.x];
    let dw_all = &ens.dw;
    let counts_all = &ens.counts;
    let outcome: Vec<Option<Error>> = x
        .par_chunks_mut((m + 1) * d.x)
        .enumerate()
        .map(|(p, xp)| {
            let mut b = vec![0.0; d.x];
            let mut sig = vec![0.0; d.x * d.w];
            let mut beta = vec![0.0; d.x];
            let mut next = vec![0.0; d.x];
            coeffs.initial.sample(seed, p, &mut xp[..d.x]);
            for i in 0..m {
                let (head, tail) = xp.split_at_mut((i + 1) * d.x);
                let xi = &head[i * d.x..];
                let (y, z, k) = match backward {
                    Some(it) => (it.y_at(p, i), it.z_at(p, i), it.k_at(p, i)),
                    None => (&zeros_y[..], &zeros_z[..], &zeros_k[..]),
                };
                let u = StateRef { x: xi, y, z, k };
                let t = grid.time(i);
                let nu = &laws.joint[i];
                (coeffs.drift)(t, u, nu, &mut b);
                (coeffs.diffusion)(t, u, nu, &mut sig);
                if let Some(pert) = perturbation {
                    let yp = pert.previous.y_at(p, i);
                    for r in 0..shared {
                        let shift = pert.delta * (y[r] - yp[r]);
                        b[r] -= shift;
                        for c in 0..d.w {
                            sig[r * d.w + c] -= shift;
                        }
                    }
                }
                for r in 0..d.x {
                    next[r] = xi[r] + b[r] * dt;
                }
                if d.w > 0 {
                    let dw = &dw_all[(p * m + i) * d.w..(p * m + i + 1) * d.w];
                    for r in 0..d.x {
                        next[r] += sig[r * d.w..(r + 1) * d.w].iter().zip(dw).map(|(s, w)| s * w).sum::<f64>();
                    }
                }
                if d.marks > 0 {
                    let counts = &counts_all[(p * m + i) * d.marks..(p * m + i + 1) * d.marks];
                    for j in 0..d.marks {
                        (coeffs.jump)(t, u, nu, j, marks[j], &mut beta);
                        if let Some(pert) = perturbation {
                            let kp = pert.previous.k_at(p, i);
                            for r in 0..shared {
                                beta[r] -= pert.delta * (k[r * d.marks + j] - kp[r * d.marks + j]);
                            }
                        }
                        let weight = counts[j] as f64 - rates[j] * dt;
                        for r in 0..d.x {
                            next[r] += beta[r] * weight;
                        }
                    }
                }
                if let Some(e) = diverged(p, i, &next) {
                    return Some(e);
                }
                tail[..d.x].copy_from_slice(&next);
            }
            None
        })
        .collect();
    if let Some(e) = outcome.into_iter().flatten().next() {
        return Err(e);
    }
    ens.x = x;
    ens.dx = d.x;
    Ok(())
}

/// Affine production coefficients of one region:
/// `dQ = (μ + μ_q Q)dt + σ dB^γ + σ⁰ dB⁰ + ∫ β e Ñ(dt,de) + ∫ β⁰ e Ñ⁰(dt,de)`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProductionSpec {
    pub q0: f64,
    pub drift: f64,
    pub drift_lin: f64,
    pub sigma: f64,
    pub sigma_common: f64,
    pub beta: f64,
    pub beta_common: f64,
}

/// Rest-of-world production, driven by common noise only.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RestSpec {
    pub q0: f64,
    pub drift: f64,
    pub drift_lin: f64,
    pub sigma: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProductionPaths {
    pub regions: usize,
    /// `N × (M+1) × Γ`.
    pub q: Vec<f64>,
    /// `M + 1`.
    pub q0: Vec<f64>,
}

impl ProductionPaths {
    pub fn q_at(&self, p: usize, i: usize, region: usize) -> f64 {
        let steps = self.q0.len();
        self.q[(p * steps + i) * self.regions + region]
    }
}

/// Checks that the noise layout has one idiosyncratic Brownian column per
/// region and a common column when any common coefficient is nonzero.
pub fn check_production_layout(regions: &[ProductionSpec], rest: &RestSpec, noise: &NoiseSpec) -> Result<()> {
    if regions.is_empty() {
        return Err(Error::InvalidParameter("at least one region is required".into()));
    }
    if noise.brownian != regions.len() {
        return Err(Error::Shape(format!(
            "{} regions need {} idiosyncratic Brownian columns, found {}",
            regions.len(),
            regions.len(),
            noise.brownian
        )));
    }
    let needs_common = rest.sigma != 0.0 || regions.iter().any(|r| r.sigma_common != 0.0);
    if needs_common && noise.common_brownian == 0 {
        return Err(Error::Shape("common production volatility requires a common Brownian column".into()));
    }
    Ok(())
}

pub fn simulate_production(regions: &[ProductionSpec], rest: &RestSpec, ens: &PathEnsemble) -> Result<ProductionPaths> {
    check_production_layout(regions, rest, &ens.noise)?;
    let g = regions.len();
    let m = ens.grid.steps;
    let dt = ens.grid.dt();
    let dw_n = ens.noise.dw();
    let marks = ens.noise.mark_values();
    let rates = ens.noise.rates();
    let idio = ens.noise.idiosyncratic_marks();
    let has_common_w = ens.noise.common_brownian > 0;

    // Q⁰ only sees common noise, which particle 0 carries like every other.
    let mut q0 = vec![rest.q0; m + 1];
    for i in 0..m {
        let q = q0[i];
        let mut next = q + (rest.drift + rest.drift_lin * q) * dt;
        if has_common_w {
            next += rest.sigma * ens.dw_at(0, i)[g];
        }
        let counts = ens.counts_at(0, i);
        for j in idio..marks.len() {
            next += rest.beta * marks[j] * (counts[j] as f64 - rates[j] * dt);
        }
        if let Some(e) = diverged(0, i, &[next]) {
            return Err(e);
        }
        q0[i + 1] = next;
    }

    let mut q = vec![0.0; ens.particles * (m + 1) * g];
    let outcome: Vec<Option<Error>> = q
        .par_chunks_mut((m + 1) * g)
        .enumerate()
        .map(|(p, qp)| {
            for (r, spec) in regions.iter().enumerate() {
                qp[r] = spec.q0;
            }
            for i in 0..m {
                let dw = &ens.dw[(p * m + i) * dw_n..(p * m + i + 1) * dw_n];
                let counts = ens.counts_at(p, i);
                for (r, spec) in regions.iter().enumerate() {
                    let cur = qp[i * g + r];
                    let mut next = cur + (spec.drift + spec.drift_lin * cur) * dt + spec.sigma * dw[r];
                    if has_common_w {
                        next += spec.sigma_common * dw[g];
                    }
                    for j in 0..marks.len() {
                        let size = if j < idio { spec.beta } else { spec.beta_common };
                        next += size * marks[j] * (counts[j] as f64 - rates[j] * dt);
                    }
                    if let Some(e) = diverged(p, i, &[next]) {
                        return Some(e);
                    }
                    qp[(i + 1) * g + r] = next;
                }
            }
            None
        })
        .collect();
    if let Some(e) = outcome.into_iter().flatten().next() {
        return Err(e);
    }
    Ok(ProductionPaths { regions: g, q, q0 })
}

/// `E|X_T − X′_T|²` between two forward passes on the same ensemble.
pub fn terminal_distance(a: &PathEnsemble, b: &PathEnsemble) -> Result<f64> {
    if a.dx != b.dx || a.particles != b.particles || a.grid != b.grid || !a.has_state() || !b.has_state() {
        return Err(Error::Shape("ensembles do not share a forward state layout".into()));
    }
    let m = a.grid.steps;
    let s: f64 = (0..a.particles)
        .map(|p| a.x_at(p, m).iter().zip(b.x_at(p, m)).map(|(u, v)| (u - v) * (u - v)).sum::<f64>())
        .sum();
    Ok(s / a.particles as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::families::{linear_family, zero_instance, LinearParams};

    fn run(p: &LinearParams, noise: NoiseSpec, n: usize, steps: usize, seed: u64) -> PathEnsemble {
        let (c, _) = linear_family(p, noise.intensity().as_ref()).unwrap();
        let noise = NoiseSpec { brownian: 1, ..noise };
        let mut ens = make_ensemble(n, TimeGrid::new(1.0, steps).unwrap(), noise, seed).unwrap();
        let laws = StepLaws::dirac_zero(1, 1, steps);
        simulate_forward(&c, None, &laws, &mut ens, None).unwrap();
        ens
    }

    fn mean_var(v: &[f64]) -> (f64, f64) {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        (m, v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0))
    }

    #[test]
    fn zero_coefficients_keep_initial_state() {
        let (mut c, _) = zero_instance();
        c.initial = crate::coefficients::InitialLaw::Fixed { value: vec![0.7] };
        let mut ens = make_ensemble(5, TimeGrid::new(1.0, 10).unwrap(), NoiseSpec::brownian(1), 1).unwrap();
        simulate_forward(&c, None, &StepLaws::dirac_zero(1, 1, 10), &mut ens, None).unwrap();
        assert!(ens.x.iter().all(|&v| v == 0.7));
    }

    #[test]
    fn brownian_terminal_moments() {
        let n = 20_000;
        let ens = run(&LinearParams { diffusion_const: 1.0, ..Default::default() }, NoiseSpec::brownian(1), n, 20, 3);
        let (m, v) = mean_var(&ens.terminal());
        assert!(m.abs() < 4.0 / (n as f64).sqrt());
        assert!((v - 1.0).abs() < 0.05);
    }

    #[test]
    fn compensated_jumps_have_zero_mean() {
        let n = 20_000;
        let rate = 3.0;
        let noise = NoiseSpec { jumps: Some(JumpIntensity::single(1.0, rate).unwrap()), ..Default::default() };
        let ens = run(&LinearParams { jump_const: 1.0, ..Default::default() }, noise, n, 10, 5);
        let (m, v) = mean_var(&ens.terminal());
        assert!(m.abs() < 4.0 * v.sqrt() / (n as f64).sqrt());
        let jumps = ens.trains.iter().map(|t| t.len()).sum::<usize>() as f64 / n as f64;
        assert!((jumps - rate).abs() < 4.0 * (rate / n as f64).sqrt());
        // count minus compensator over the horizon
        let expected: Vec<f64> = ens.trains.iter().map(|t| t.len() as f64 - rate).collect();
        for (a, b) in ens.terminal().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn ensembles_are_deterministic_and_seed_dependent() {
        let noise = NoiseSpec {
            brownian: 1,
            common_brownian: 1,
            jumps: Some(JumpIntensity::single(1.0, 2.0).unwrap()),
            common_jumps: Some(JumpIntensity::single(-1.0, 1.0).unwrap()),
        };
        let g = TimeGrid::new(1.0, 8).unwrap();
        let a = make_ensemble(50, g, noise.clone(), 9).unwrap();
        let b = make_ensemble(50, g, noise.clone(), 9).unwrap();
        let c = make_ensemble(50, g, noise.clone(), 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.dw, c.dw);
        for p in 1..50 {
            for i in 0..8 {
                assert_eq!(a.dw_at(p, i)[1].to_bits(), a.dw_at(0, i)[1].to_bits());
                assert_eq!(a.counts_at(p, i)[1], a.counts_at(0, i)[1]);
            }
        }
        let (dw, train) = particle_noise(9, 17, &g, &noise).unwrap();
        assert_eq!(train, a.trains[17]);
        for i in 0..8 {
            assert_eq!(dw[i].to_bits(), a.dw_at(17, i)[0].to_bits());
        }
        assert!(make_ensemble(1, g, noise, 1).is_ok());
        assert!(make_ensemble(0, g, NoiseSpec::default(), 1).is_err());
    }

    #[test]
    fn result_does_not_depend_on_worker_count() {
        let p = LinearParams { drift_x: -0.5, diffusion_const: 0.3, drift_nu: 0.2, ..Default::default() };
        let go = |threads: usize| {
            rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(|| {
                let ens = run(&p, NoiseSpec::brownian(1), 300, 16, 4);
                StepLaws::from_paths(&ens, None, 1).unwrap().joint[16].mean()[0].to_bits()
            })
        };
        assert_eq!(go(1), go(4));
    }

    #[test]
    fn weak_euler_bias_shrinks_with_step() {
        let theta: f64 = 1.0;
        let n = 200_000;
        let p = LinearParams { drift_x: theta, diffusion_const: 0.2, x0: 1.0, ..Default::default() };
        let exact = theta.exp();
        let bias = |steps| {
            let ens = run(&p, NoiseSpec::brownian(1), n, steps, 11);
            let t = ens.terminal();
            (t.iter().sum::<f64>() / n as f64 - exact).abs()
        };
        let coarse = bias(8);
        let fine = bias(16);
        assert!(fine <= 0.6 * coarse, "coarse {coarse} fine {fine}");
    }

    #[test]
    fn divergence_is_reported() {
        let p = LinearParams { drift_x: 1e4, x0: 1.0, ..Default::default() };
        let (c, _) = linear_family(&p, None).unwrap();
        let mut ens = make_ensemble(2, TimeGrid::new(1.0, 10).unwrap(), NoiseSpec::brownian(1), 0).unwrap();
        let err = simulate_forward(&c, None, &StepLaws::dirac_zero(1, 1, 10), &mut ens, None).unwrap_err();
        assert!(matches!(err, Error::Divergence(_)));
    }

    fn production_noise(common: bool) -> NoiseSpec {
        NoiseSpec { brownian: 2, common_brownian: usize::from(common), ..Default::default() }
    }

    #[test]
    fn production_examples() {
        let g = TimeGrid::new(2.0, 10).unwrap();
        let ens = make_ensemble(4, g, production_noise(true), 2).unwrap();
        let flat = ProductionSpec { q0: 1.0, ..Default::default() };
        let rest = RestSpec { drift: 1.0, ..Default::default() };
        let out = simulate_production(&[flat, flat], &rest, &ens).unwrap();
        assert!(out.q.iter().all(|&v| v == 1.0));
        assert!((out.q0[10] - 2.0).abs() < 1e-14);

        let shared = ProductionSpec { sigma_common: 1.0, ..Default::default() };
        let out = simulate_production(&[shared, shared], &RestSpec::default(), &ens).unwrap();
        for p in 1..4 {
            for i in 0..=10 {
                assert_eq!(out.q_at(p, i, 0), out.q_at(0, i, 0));
                assert_eq!(out.q_at(p, i, 1), out.q_at(0, i, 0));
            }
        }
        assert!(out.q_at(0, 10, 0) != 0.0);

        let ens = make_ensemble(4, g, production_noise(false), 2).unwrap();
        assert!(simulate_production(&[shared, shared], &RestSpec::default(), &ens).is_err());
        assert!(simulate_production(&[flat], &RestSpec::default(), &ens).is_err());
    }

    #[test]
    fn step_of_maps_to_half_open_steps() {
        let g = TimeGrid::new(1.0, 4).unwrap();
        assert_eq!(g.step_of(0.25), 0);
        assert_eq!(g.step_of(0.2500001), 1);
        assert_eq!(g.step_of(1.0), 3);
        assert_eq!(g.time(4), 1.0);
    }
}
