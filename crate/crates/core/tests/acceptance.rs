use std::path::Path;
use std::time::{Duration, Instant};

use rand::Rng;

use mfbsdej::backward_solver::{solve_backward, BasisSpec};
use mfbsdej::coefficients::{appendix_ode, contraction_constants_h1, linear_family, zero_instance, LinearParams};
use mfbsdej::forward_sim::{make_ensemble, simulate_forward, NoiseSpec, StepLaws, TimeGrid};
use mfbsdej::lq_benchmark::{benchmark_fbsde, phi_bar, riccati_rk4, AffinePath, ClosedFormSolution, LqParams};
use mfbsdej::measure::{w2_coupled_bound, w2_exact_1d, w2_exact_small, EmpiricalLaw};
use mfbsdej::mf_solver::{empirical_contraction_ratio, solve, solve_coupled_appendix, MfSolution, PicardConfig, Scheme};
use mfbsdej::random_measure::{compensated_integral, sample_jump_train, JumpIntensity};
use mfbsdej::rng::{stream, Domain};

struct Verdict {
    passed: bool,
    detail: String,
}

impl Verdict {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Self { passed, detail: detail.into() }
    }
}

fn fail(e: impl std::fmt::Display) -> Verdict {
    Verdict::new(false, format!("error: {e}"))
}

fn rk4<const D: usize>(f: impl Fn(f64, &[f64; D]) -> [f64; D], y0: [f64; D], t0: f64, t1: f64, steps: usize) -> Vec<[f64; D]> {
    let h = (t1 - t0) / steps as f64;
    let axpy = |y: &[f64; D], k: &[f64; D], a: f64| {
        let mut out = *y;
        for c in 0..D {
            out[c] += a * k[c];
        }
        out
    };
    let mut path = vec![y0];
    let mut y = y0;
    for i in 0..steps {
        let t = t0 + i as f64 * h;
        let k1 = f(t, &y);
        let k2 = f(t + 0.5 * h, &axpy(&y, &k1, 0.5 * h));
        let k3 = f(t + 0.5 * h, &axpy(&y, &k2, 0.5 * h));
        let k4 = f(t + h, &axpy(&y, &k3, h));
        for c in 0..D {
            y[c] += h / 6.0 * (k1[c] + 2.0 * k2[c] + 2.0 * k3[c] + k4[c]);
        }
        path.push(y);
    }
    path
}

/// Linear two-point problem `x' = F(t, x, y)`, `y' = G(t, x, y)`, `x(0) = x0`,
/// `y(T) = a x(T) + c`, solved by shooting on `y(0)`. Returns `(x, y)` on `steps + 1` nodes.
fn shoot_linear(
    rhs: impl Fn(f64, &[f64; 2]) -> [f64; 2],
    x0: f64,
    horizon: f64,
    a: f64,
    c: f64,
    steps: usize,
) -> Vec<[f64; 2]> {
    let miss = |y0: f64| {
        let end = *rk4(&rhs, [x0, y0], 0.0, horizon, steps).last().unwrap();
        end[1] - a * end[0] - c
    };
    let (m0, m1) = (miss(0.0), miss(1.0));
    let y0 = -m0 / (m1 - m0);
    rk4(&rhs, [x0, y0], 0.0, horizon, steps)
}

fn mean_x(sol: &MfSolution, i: usize) -> f64 {
    let e = &sol.ensemble;
    (0..e.particles).map(|p| e.x_at(p, i)[0]).sum::<f64>() / e.particles as f64
}

fn mean_y(sol: &MfSolution, i: usize) -> f64 {
    let e = &sol.ensemble;
    (0..e.particles).map(|p| sol.iterate.y_at(p, i)[0]).sum::<f64>() / e.particles as f64
}

fn random_lq(r: &mut impl Rng) -> LqParams {
    LqParams {
        p0: r.random_range(0.0..2.0),
        p1: r.random_range(0.5..2.0),
        a1: r.random_range(-1.0..0.0),
        a2: r.random_range(0.05..2.0),
        c: r.random_range(-1.0..1.0),
        k: r.random_range(1.0..3.0),
        b1: r.random_range(0.0..1.0),
        b2: r.random_range(0.0..2.0),
        horizon: r.random_range(0.5..2.0),
        s0: 0.0,
        rest: AffinePath::constant(r.random_range(0.0..1.0)),
        region_mean: AffinePath::linear(r.random_range(0.0..0.5), r.random_range(-0.2..0.2)),
    }
}

fn riccati_oracle() -> Verdict {
    let mut r = stream(11, Domain::Misc, 0);
    let mut sets: Vec<LqParams> = (0..20).map(|_| random_lq(&mut r)).collect();
    sets.push(LqParams::default());
    let (mut gap, mut residual) = (0.0f64, 0.0f64);
    let mut terminal_exact = true;
    for p in &sets {
        let run = || -> mfbsdej::Result<(f64, f64, bool)> {
            let steps = 1000;
            let table = riccati_rk4(p, steps)?;
            let mut g = 0.0f64;
            for (i, v) in table.iter().enumerate() {
                g = g.max((phi_bar(p.horizon * i as f64 / steps as f64, p)? - v).abs());
            }
            let gain = 1.0 / (p.k + p.c + p.p1);
            let h = 1e-4;
            let mut res = 0.0f64;
            for i in 0..1000 {
                let t = h + (p.horizon - 2.0 * h) * i as f64 / 999.0;
                let slope = (phi_bar(t + h, p)? - phi_bar(t - h, p)?) / (2.0 * h);
                let phi = phi_bar(t, p)?;
                res = res.max((slope - gain * phi * phi + p.a2).abs());
            }
            Ok((g, res, phi_bar(p.horizon, p)? == p.b2))
        };
        match run() {
            Ok((g, res, exact)) => {
                gap = gap.max(g);
                residual = residual.max(res);
                terminal_exact &= exact;
            }
            Err(e) => return fail(e),
        }
    }
    Verdict::new(
        gap <= 1e-8 && residual <= 1e-4 && terminal_exact,
        format!("{} sets: sup gap {gap:.2e} (tol 1e-8), fd residual {residual:.2e} (tol 1e-4), terminal exact {terminal_exact}", sets.len()),
    )
}

fn b_oracle(t: f64, p: &LqParams) -> f64 {
    p.p0 - p.p1 * p.rest.value(t) - (p.p1 + p.k) * p.region_mean.value(t)
}

/// Aggregate storage and adjoint from the two-point problem of the LQ benchmark.
fn lq_shooting(p: &LqParams, steps: usize) -> Vec<[f64; 2]> {
    let gain = 1.0 / (p.k + p.c + p.p1);
    let q = *p;
    shoot_linear(move |t, u| [-gain * (u[1] + b_oracle(t, &q)), -(q.a1 + q.a2 * u[0])], p.s0, p.horizon, p.b2, -p.b1, steps)
}

fn closed_form_consistency() -> Verdict {
    let p = LqParams::default();
    let run = || -> mfbsdej::Result<Verdict> {
        let cf = ClosedFormSolution::new(&p, 2000)?;
        let psi_gap = (cf.psi_bar(p.horizon) + p.b1).abs();
        let s0 = cf.s_bar(0.0).abs();
        let alpha_gap = cf.alpha_consistency_gap(1000, 1e-4)?;
        let oracle = lq_shooting(&p, 20_000);
        let mut s_gap = 0.0f64;
        for (i, u) in oracle.iter().enumerate().step_by(100) {
            s_gap = s_gap.max((cf.s_bar(p.horizon * i as f64 / 20_000.0) - u[0]).abs());
        }
        Ok(Verdict::new(
            psi_gap <= 1e-12 && s0 <= 1e-12 && alpha_gap <= 1e-4,
            format!(
                "|Psi(T)+B1| {psi_gap:.1e}, |S(0)| {s0:.1e} (tol 1e-12); alpha vs dS/dt {alpha_gap:.2e} (tol 1e-4); S vs shooting {s_gap:.1e}"
            ),
        ))
    };
    run().unwrap_or_else(fail)
}

fn solver_vs_oracle() -> Verdict {
    let p = LqParams::default();
    let run = || -> mfbsdej::Result<Verdict> {
        let cf = ClosedFormSolution::new(&p, 2000)?;
        let coeffs = benchmark_fbsde(&p)?;
        let steps = 200;
        let grid = TimeGrid::new(p.horizon, steps)?;
        let ens = make_ensemble(2, grid, NoiseSpec::default(), 1)?;
        let outer_tol = 1e-8;
        let psi0 = cf.psi_bar(0.0);
        let s_scale = (0..=steps).map(|i| cf.s_bar(grid.time(i)).abs()).fold(0.0, f64::max);
        let mut parts = Vec::new();
        let mut ok = true;
        let mut sols = Vec::new();
        for scheme in [Scheme::H1, Scheme::H2] {
            let cfg = PicardConfig { scheme, outer_tol, max_outer: 200, ..Default::default() };
            let sol = solve(&coeffs, &ens, &BasisSpec::new(0), &cfg)?;
            let y_err = (mean_y(&sol, 0) - psi0).abs() / psi0.abs();
            let s_err = (0..=steps).map(|i| (mean_x(&sol, i) - cf.s_bar(grid.time(i))).abs()).fold(0.0, f64::max) / s_scale;
            ok &= sol.report.converged && y_err <= 0.01 && s_err <= 0.01;
            parts.push(format!("{}: Y0 rel {y_err:.2e}, S rel sup {s_err:.2e}, {} it", scheme.label(), sol.report.iterations));
            sols.push(sol);
        }
        let mut agree = (mean_y(&sols[0], 0) - mean_y(&sols[1], 0)).abs();
        for i in 0..=steps {
            agree = agree.max((mean_x(&sols[0], i) - mean_x(&sols[1], i)).abs());
            agree = agree.max((mean_y(&sols[0], i) - mean_y(&sols[1], i)).abs());
        }
        ok &= agree <= 3.0 * outer_tol;
        parts.push(format!("h1 vs h2 {agree:.1e} (tol {:.0e})", 3.0 * outer_tol));
        Ok(Verdict::new(ok, parts.join("; ")))
    };
    run().unwrap_or_else(fail)
}

fn appendix_vs_shooting() -> Verdict {
    let run = || -> mfbsdej::Result<Verdict> {
        let (coeffs, constants) = appendix_ode(1.0);
        let steps = 2000;
        let grid = TimeGrid::new(1.0, steps)?;
        let ens = make_ensemble(1, grid, NoiseSpec::brownian(1), 0)?;
        let cfg = PicardConfig { scheme: Scheme::Appendix, outer_tol: 1e-9, max_outer: 200, ..Default::default() };
        let sol = solve_coupled_appendix(&coeffs, &ens, &BasisSpec::new(0), &cfg, Some(&constants))?;
        let oracle = shoot_linear(|_, u| [-u[1], u[0]], 1.0, 1.0, 1.0, 0.0, steps);
        let b = (1f64.sin() - 1f64.cos()) / (1f64.sin() + 1f64.cos());
        let (mut err, mut oracle_gap) = (0.0f64, 0.0f64);
        for (i, u) in oracle.iter().enumerate() {
            let t = grid.time(i);
            err = err.max((mean_x(&sol, i) - u[0]).abs()).max((mean_y(&sol, i) - u[1]).abs());
            oracle_gap = oracle_gap.max((u[0] - (t.cos() + b * t.sin())).abs());
        }
        Ok(Verdict::new(
            sol.report.converged && err <= 1e-3,
            format!("sup error {err:.2e} (tol 1e-3), {} it; shooting vs analytic {oracle_gap:.1e}", sol.report.iterations),
        ))
    };
    run().unwrap_or_else(fail)
}

fn contraction_behavior() -> Verdict {
    let run = || -> mfbsdej::Result<Verdict> {
        let p = LinearParams { drift_y: -1.0, driver_x: -1.0, driver_nu: 0.5, diffusion_const: 0.1, terminal_x: 1.0, x0: 1.0, ..Default::default() };
        let (coeffs, constants) = linear_family(&p, None)?;
        let cert = contraction_constants_h1(&constants, 1.0)?;
        let ens = make_ensemble(1000, TimeGrid::new(1.0, 25)?, NoiseSpec::brownian(1), 5)?;
        let cfg = PicardConfig { delta: cert.params.delta, outer_tol: 1e-6, ..Default::default() };
        let sol = solve(&coeffs, &ens, &BasisSpec::new(1), &cfg)?;
        let ratio = empirical_contraction_ratio(&sol.report)?;
        let (zc, _) = zero_instance();
        let zero = solve(&zc, &make_ensemble(50, TimeGrid::new(1.0, 10)?, NoiseSpec::brownian(1), 5)?, &BasisSpec::new(1), &PicardConfig::default())?;
        let cert_ok = cert.valid && cert.theta / cert.gamma < 1.0;
        Ok(Verdict::new(
            cert_ok && ratio < 1.0 && zero.report.converged && zero.report.iterations == 1,
            format!(
                "certificate theta/gamma {:.2e} valid {} at delta {}; empirical ratio {ratio:.3}; zero instance {} iteration(s)",
                cert.theta / cert.gamma,
                cert.valid,
                cert.params.delta,
                zero.report.iterations
            ),
        ))
    };
    run().unwrap_or_else(fail)
}

fn martingale_case(p: &LinearParams, noise: NoiseSpec, seed: u64) -> mfbsdej::Result<mfbsdej::backward_solver::SolverIterate> {
    let (coeffs, _) = linear_family(p, noise.intensity().as_ref())?;
    let steps = 50;
    let mut ens = make_ensemble(10_000, TimeGrid::new(1.0, steps)?, noise, seed)?;
    let laws = StepLaws::dirac_zero(1, 1, steps);
    simulate_forward(&coeffs, None, &laws, &mut ens, None)?;
    solve_backward(&ens, &coeffs, &laws, &BasisSpec::new(1), None)
}

fn stochastic_sanity() -> Verdict {
    let run = || -> mfbsdej::Result<Verdict> {
        let intensity = JumpIntensity::from_pairs(&[(-1.0, 1.0), (2.0, 0.5)])?;
        let integrand = |t: f64, e: f64| e * (1.0 + t);
        // ∫₀¹ (1+t)² dt = 7/3
        let variance = intensity.marks().iter().zip(intensity.rates()).map(|(e, l)| l * e * e).sum::<f64>() * 7.0 / 3.0;
        let trains = 100_000;
        let mut rng = stream(21, Domain::Misc, 1);
        let mut total = 0.0;
        for _ in 0..trains {
            let train = sample_jump_train(&intensity, 1.0, &mut rng)?;
            total += compensated_integral(&train, &intensity, integrand, 1.0, 10);
        }
        let mean = total / trains as f64;
        let band = 4.0 * (variance / trains as f64).sqrt();

        let bm = martingale_case(&LinearParams { diffusion_const: 1.0, terminal_x: 1.0, ..Default::default() }, NoiseSpec::brownian(1), 2)?;
        let z_err = bm.z.iter().map(|z| (z - 1.0).abs()).sum::<f64>() / bm.z.len() as f64;
        let jump_noise = NoiseSpec { brownian: 1, jumps: Some(JumpIntensity::single(1.0, 1.0)?), ..Default::default() };
        let pj = martingale_case(&LinearParams { jump_const: 1.0, terminal_x: 1.0, ..Default::default() }, jump_noise, 3)?;
        let k_err = (pj.k.iter().sum::<f64>() / pj.k.len() as f64 - 1.0).abs();
        Ok(Verdict::new(
            mean.abs() <= band && z_err <= 0.05 && k_err <= 0.1,
            format!("compensated mean {mean:.2e} within {band:.2e}; mean |Z-1| {z_err:.3} (tol 0.05); |mean K - 1| {k_err:.3} (tol 0.1)"),
        ))
    };
    run().unwrap_or_else(fail)
}

fn cloud(r: &mut impl Rng, n: usize, dim: usize) -> EmpiricalLaw {
    let mut pts: Vec<f64> = (0..n * dim).map(|_| r.random_range(-3.0..3.0)).collect();
    // occasional ties
    if n > 1 && r.random_bool(0.2) {
        let (head, tail) = pts.split_at_mut(dim);
        tail[..dim].copy_from_slice(head);
    }
    EmpiricalLaw::from_flat(pts, dim).unwrap()
}

fn brute_force_w2(a: &EmpiricalLaw, b: &EmpiricalLaw) -> f64 {
    fn permute(k: usize, perm: &mut Vec<usize>, best: &mut f64, a: &EmpiricalLaw, b: &EmpiricalLaw) {
        if k == perm.len() {
            let cost: f64 = perm
                .iter()
                .enumerate()
                .map(|(i, &j)| a.point(i).iter().zip(b.point(j)).map(|(x, y)| (x - y) * (x - y)).sum::<f64>())
                .sum();
            *best = best.min(cost);
            return;
        }
        for i in k..perm.len() {
            perm.swap(k, i);
            permute(k + 1, perm, best, a, b);
            perm.swap(k, i);
        }
    }
    let mut perm: Vec<usize> = (0..a.len()).collect();
    let mut best = f64::INFINITY;
    permute(0, &mut perm, &mut best, a, b);
    (best / a.len() as f64).sqrt()
}

fn measure_metrics() -> Verdict {
    let run = || -> mfbsdej::Result<Verdict> {
        let mut r = stream(31, Domain::Misc, 2);
        let (mut symmetric, mut identity) = (true, true);
        let mut triangle: f64 = f64::NEG_INFINITY;
        for _ in 0..200 {
            let n = r.random_range(1..=8);
            let dim = r.random_range(1..=3);
            let (a, b, c) = (cloud(&mut r, n, dim), cloud(&mut r, n, dim), cloud(&mut r, n, dim));
            let (ab, bc, ac) = (w2_exact_small(&a, &b)?, w2_exact_small(&b, &c)?, w2_exact_small(&a, &c)?);
            symmetric &= ab == w2_exact_small(&b, &a)?;
            identity &= w2_exact_small(&a, &a)? == 0.0 && ab >= 0.0;
            triangle = triangle.max(ac - ab - bc);
        }
        let mut dominated: f64 = f64::NEG_INFINITY;
        for _ in 0..200 {
            let n = r.random_range(1..=20);
            let dim = r.random_range(1..=3);
            let (a, b) = (cloud(&mut r, n, dim), cloud(&mut r, n, dim));
            dominated = dominated.max(w2_exact_small(&a, &b)? - w2_coupled_bound(&a, &b, true)?);
        }
        let (mut sorted_gap, mut brute_gap) = (0.0f64, 0.0f64);
        for _ in 0..200 {
            let n = r.random_range(1..=64);
            let (a, b) = (cloud(&mut r, n, 1), cloud(&mut r, n, 1));
            sorted_gap = sorted_gap.max((w2_exact_1d(&a, &b)? - w2_exact_small(&a, &b)?).abs());
        }
        for _ in 0..50 {
            let n = r.random_range(1..=6);
            let dim = r.random_range(1..=2);
            let (a, b) = (cloud(&mut r, n, dim), cloud(&mut r, n, dim));
            brute_gap = brute_gap.max((w2_exact_small(&a, &b)? - brute_force_w2(&a, &b)).abs());
        }
        Ok(Verdict::new(
            symmetric && identity && triangle <= 1e-9 && dominated <= 1e-12 && sorted_gap <= 1e-12 && brute_gap <= 1e-12,
            format!(
                "symmetric {symmetric}, identity {identity}, triangle excess {triangle:.1e} (slack 1e-9), coupled excess {dominated:.1e}, 1-D vs matching {sorted_gap:.1e} (tol 1e-12), matching vs brute force {brute_gap:.1e}"
            ),
        ))
    };
    run().unwrap_or_else(fail)
}

const SOLVE_CONFIG: &str = r#"
seed = 9
[simulation]
particles = 300
steps = 20
[basis]
degree = 1
[picard]
outer_tol = 1e-5
[instance]
kind = "linear"
jumps = { marks = [1.0], rates = [1.5] }
[instance.params]
drift_y = -1.0
driver_x = -1.0
driver_nu = 0.5
diffusion_const = 0.2
jump_const = 0.2
terminal_x = 1.0
x0 = 1.0
"#;

const GRID_CONFIG: &str = r#"
seed = 4
[simulation]
particles = 400
steps = 20
[grid.model]
s_max = 1.0
price = { kind = "linear", p0 = 1.0, p1 = 1.5 }
costs = { a1 = -0.2, a2 = 0.5, c = 1.0, b1 = 0.3, b2 = 0.5 }
jumps = { marks = [0.5], rates = [2.0] }
rest = { q0 = 0.5, sigma = 0.1 }
[[grid.model.regions]]
weight = 0.4
transmission = 2.0
production = { q0 = 0.2, drift = 0.1, sigma = 0.2, beta = 0.3 }
[[grid.model.regions]]
weight = 0.6
transmission = 1.5
production = { q0 = 0.1, sigma = 0.1, sigma_common = 0.05 }
[grid.policy]
kind = "feedback"
offset = 0.3
gain = -0.5
"#;

fn csv_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .map(|d| {
            d.filter_map(|e| e.ok())
                .map(|e| e.path())
                .filter(|p| p.extension().is_some_and(|x| x == "csv"))
                .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
                .collect()
        })
        .unwrap_or_default();
    files.sort();
    files
}

fn reproducibility() -> Verdict {
    let tmp = match tempfile::tempdir() {
        Ok(t) => t,
        Err(e) => return fail(e),
    };
    let cases: [(&str, &str); 4] = [("check", SOLVE_CONFIG), ("solve", SOLVE_CONFIG), ("benchmark", ""), ("grid", GRID_CONFIG)];
    let mut ok = true;
    let mut parts = Vec::new();
    for (command, text) in cases {
        let config = tmp.path().join(format!("{command}.toml"));
        if let Err(e) = std::fs::write(&config, text) {
            return fail(e);
        }
        let mut outputs = Vec::new();
        for (run, workers) in [(0, 1), (1, 4), (2, 4)] {
            let out = tmp.path().join(format!("{command}-{run}"));
            let args = ["mfbsdej", command, "--config", config.to_str().unwrap(), "--workers", &workers.to_string(), "--out", out.to_str().unwrap()];
            let code = mfbsdej::cli::main_with_args(args);
            outputs.push((code, csv_files(&out)));
        }
        let same = outputs.windows(2).all(|w| w[0] == w[1]) && !outputs[0].1.is_empty();
        ok &= same && outputs[0].0 == 0;
        parts.push(format!("{command}: {} csv, exit {}, identical {same}", outputs[0].1.len(), outputs[0].0));
    }
    Verdict::new(ok, format!("workers 1/4/4: {}", parts.join("; ")))
}

fn main() {
    let criteria: [(&str, fn() -> Verdict, Option<Duration>); 8] = [
        ("riccati oracle agreement", riccati_oracle, Some(Duration::from_secs(5))),
        ("closed-form pipeline consistency", closed_form_consistency, Some(Duration::from_secs(5))),
        ("solver vs closed form", solver_vs_oracle, Some(Duration::from_secs(60))),
        ("appendix scheme vs shooting", appendix_vs_shooting, Some(Duration::from_secs(10))),
        ("contraction behavior", contraction_behavior, Some(Duration::from_secs(30))),
        ("stochastic sanity", stochastic_sanity, Some(Duration::from_secs(60))),
        ("measure metrics", measure_metrics, Some(Duration::from_secs(5))),
        ("reproducibility across workers", reproducibility, None),
    ];
    let mut failures = 0;
    for (n, (name, check, limit)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let v = check();
        let elapsed = start.elapsed();
        let in_time = limit.is_none_or(|l| elapsed <= l);
        let passed = v.passed && in_time;
        if !passed {
            failures += 1;
        }
        let budget = limit.map(|l| format!(" of {}s", l.as_secs())).unwrap_or_default();
        println!(
            "{} [{}] {name}: {} ({:.2}s{budget})",
            if passed { "PASS" } else { "FAIL" },
            n + 1,
            v.detail,
            elapsed.as_secs_f64()
        );
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failures, criteria.len());
    if failures > 0 {
        std::process::exit(1);
    }
}
