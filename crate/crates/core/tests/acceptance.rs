//! Acceptance checks. Runs without the libtest harness so every check
//! prints its own PASS/FAIL line; exits non-zero if any check fails.

use std::sync::OnceLock;
use std::time::Instant;

use nnlif::diagnostics::{
    min_exp_weight, check_super_solution, dissipation_parts, fit_decay_rate, poincare_constant_fn,
    poincare_constant_profile, relative_entropy, EntropyChoice,
};
use nnlif::freeboundary::{cross_check_transform, volterra_m, VolterraConfig};
use nnlif::grid::{boundary_slope_raw, build_grid, gaussian, project_function, DensityProfile, Grid};
use nnlif::model::{DilationParams, ModelParams};
use nnlif::solver::{interp, run_limit_observed, run_tau, StepperConfig, TauTrajectory};
use nnlif::steady::{steady_excitatory, steady_numeric};
use nnlif::timescale::{
    detect_blowups, forward_time, inverse_time, lifespan, sample_generalized, verify_jump, LifespanStatus, TimeMap,
};

type Outcome = (bool, String);

fn jump_params() -> ModelParams {
    ModelParams::with_b0(0.0, 1.0, 0.0, 0.9, 0.5, 1.0).unwrap()
}

fn jump_run(c: f64, n: usize, dtau: f64, horizon: f64) -> TauTrajectory {
    let p = jump_params();
    let grid = build_grid(&p, n, 1e-9).unwrap();
    let p0 = project_function(gaussian(0.2, 0.01), &grid, true).unwrap();
    let dil = DilationParams::new(&p, c).unwrap();
    run_tau(&p0, &p, &dil, &StepperConfig::new(dtau, horizon)).unwrap()
}

const HORIZON: f64 = 10.0;

fn run_c1() -> &'static TauTrajectory {
    static RUN: OnceLock<TauTrajectory> = OnceLock::new();
    RUN.get_or_init(|| jump_run(1.0, 1024, 1e-4, HORIZON))
}

/// The horizon for `c = 0.5` covering the same original-time span as
/// `run_c1`: `dτ₂ = (N + c₂) dt = (1 + (c₂ − c₁) Ñ₁) dτ₁`.
fn matched_horizon() -> f64 {
    let a = run_c1();
    let mut h = 0.0;
    for k in 1..a.tau.len() {
        let f = |j: usize| 1.0 + (0.5 - 1.0) * a.tilde_n[j];
        h += 0.5 * (a.tau[k] - a.tau[k - 1]) * (f(k) + f(k - 1));
    }
    h
}

fn run_half() -> &'static TauTrajectory {
    static RUN: OnceLock<TauTrajectory> = OnceLock::new();
    RUN.get_or_init(|| jump_run(0.5, 1024, 1e-4, matched_horizon()))
}

/// Closed-form limit steady state for `b > 0`, written out independently.
fn p_inf(b: f64, a1: f64, v_r: f64, v_f: f64, v: f64) -> f64 {
    let k = b / a1;
    let l = v_f - v_r;
    if v <= v_r {
        (1.0 - (-k * l).exp()) / l * (k * (v - v_r)).exp()
    } else {
        (1.0 - (k * (v - v_f)).exp()) / l
    }
}

fn sampled(grid: &Grid, f: impl Fn(f64) -> f64) -> Vec<f64> {
    (0..=grid.n).map(|i| f(grid.node(i))).collect()
}

fn steady_flux() -> Outcome {
    let mut ok = true;
    let mut notes = Vec::new();
    for &b in &[0.3, 0.5, 0.9, 1.5] {
        let p = ModelParams::with_b0(0.0, 1.0, 0.0, b, 1.0, 1.0).unwrap();
        let mut errs = Vec::new();
        for &n in &[256usize, 512, 1024] {
            let grid = build_grid(&p, n, 1e-9).unwrap();
            let s = steady_excitatory(&p, &grid).unwrap();
            if n == 1024 {
                ok &= s.m_inf == b / (1.0 - 0.0);
                let slope = p.a1 * boundary_slope_raw(&s.profile);
                ok &= ((slope - b) / b).abs() <= 0.01;
            }
            let exact = sampled(&grid, |v| p_inf(b, 1.0, 0.0, 1.0, v));
            let num = steady_numeric(&p, &grid).unwrap();
            errs.push(num.values.iter().zip(&exact).map(|(a, e)| (a - e).abs()).fold(0.0, f64::max));
        }
        let o1 = (errs[0] / errs[1]).log2();
        let o2 = (errs[1] / errs[2]).log2();
        ok &= o1 >= 1.9 && o2 >= 1.9;
        notes.push(format!("b={b}: orders {o1:.2},{o2:.2}"));
    }
    (ok, notes.join("; "))
}

fn conservation() -> Outcome {
    let a = run_c1();
    let dev = a.mass.iter().map(|m| (m - 1.0).abs()).fold(0.0, f64::max);
    let ok = dev <= 1e-6 && a.min_value >= -1e-12 && a.clamped_mass <= 1e-9;
    (ok, format!("max |mass-1| = {dev:.2e}, min node {:.2e}, clamped {:.2e}", a.min_value, a.clamped_mass))
}

fn eternal() -> Outcome {
    let p = ModelParams::with_b0(0.0, 1.0, 0.0, 1.5, 1.0, 1.0).unwrap();
    let grid = build_grid(&p, 1024, 1e-9).unwrap();
    let p0 = steady_excitatory(&p, &grid).unwrap().profile;
    let dil = DilationParams::new(&p, 1.0).unwrap();
    let traj = run_tau(&p0, &p, &dil, &StepperConfig::new(1e-4, 5.0)).unwrap();
    let max_tn = traj.tilde_n.iter().cloned().fold(0.0, f64::max);
    let map = forward_time(&traj).unwrap();
    let (t_star, status) = lifespan(&map);
    let ok = max_tn <= 1e-6 && status == LifespanStatus::FiniteConverged && t_star <= 1e-4;
    (ok, format!("max Ñ = {max_tn:.2e}, T* = {t_star:.2e}, {status:?}"))
}

fn jump_characterization() -> Outcome {
    let dt = 5e-5;
    let traj = jump_run(1.0, 2048, dt, 4.0);
    let events = detect_blowups(&traj, 1e-8).unwrap();
    let terminated: Vec<_> = events.iter().filter(|e| e.terminated).collect();
    if terminated.len() != 1 {
        return (false, format!("{} terminated events", terminated.len()));
    }
    let ev = terminated[0];
    let check = verify_jump(&traj, ev).unwrap();
    let Some(indep) = check.delta_tau_independent else {
        return (false, "limit run never released the flux".into());
    };
    let dd = (indep - ev.delta_tau).abs();
    let ok = check.l1_gap <= 1e-3 && dd <= 2.0 * dt;
    (ok, format!("τ₁={:.4} τ₂={:.4} l1_gap={:.2e} |ΔΔτ|={dd:.2e}", ev.tau1, ev.tau2, check.l1_gap))
}

fn entropy_suite() -> Outcome {
    let p = ModelParams::with_b0(0.0, 1.0, 0.0, 0.5, 1.0, 1.0).unwrap();
    let grid = build_grid(&p, 512, 1e-9).unwrap();
    let s = steady_excitatory(&p, &grid).unwrap();
    let g = EntropyChoice::QuadraticCentered;
    // multiplicative perturbation with zero mean against p∞
    let psi: Vec<f64> = (0..=grid.n).map(|i| (grid.node(i) + 1.0).tanh()).collect();
    let w: Vec<f64> = s.profile.values.iter().zip(&psi).map(|(r, x)| r * x).collect();
    let mean = nnlif::grid::trapezoid(&w, grid.h) / s.profile.mass();
    let vals: Vec<f64> = s.profile.values.iter().zip(&psi).map(|(r, x)| r * (1.0 + 0.5 * (x - mean))).collect();
    let p0 = DensityProfile::new(grid, vals).unwrap();
    let dt = 1e-3;
    // long enough for the fit window to leave the transient
    let mut cfg = StepperConfig::new(dt, 20.0);
    cfg.snapshot_stride = 10_000;
    let mut ss = Vec::new();
    let mut ds = Vec::new();
    let mut taus = Vec::new();
    let res = run_limit_observed(&p0, &p, &cfg, &mut |_, tau, prof, _| {
        taus.push(tau);
        ss.push(relative_entropy(prof, &s, g)?);
        ds.push(dissipation_parts(prof, &s, g, &p)?.total());
        Ok(true)
    });
    if let Err(e) = res {
        return (false, format!("run failed: {e}"));
    }
    let mut monotone = true;
    let mut worst_rel: f64 = 0.0;
    for k in 0..ss.len() - 1 {
        monotone &= ss[k + 1] <= ss[k] + 1e-8;
        if k >= 50 {
            let q = (ss[k + 1] - ss[k]) / dt;
            let d = 0.5 * (ds[k] + ds[k + 1]);
            worst_rel = worst_rel.max((q + d).abs() / d);
        }
    }
    let alpha = fit_decay_rate(&taus, &ss).unwrap_or(f64::NAN);
    let pc = poincare_constant_profile(&DensityProfile::new(
        Grid::from_cells(grid.v_r, grid.node(grid.n - 1), grid.i_reset, grid.n - grid.i_reset - 1).unwrap(),
        s.profile.values[..grid.n].to_vec(),
    )
    .unwrap())
    .unwrap();
    let ratio = alpha / (2.0 * pc);
    let ok = monotone && worst_rel <= 0.05 && alpha > 0.0 && (1.0 / 3.0..=3.0).contains(&ratio);
    (
        ok,
        format!(
            "monotone={monotone}, max |dS/dτ + D|/D = {worst_rel:.2e}, α̂={alpha:.4}, 2·poincaré={:.4}, S_end={:.2e}",
            2.0 * pc,
            ss.last().unwrap()
        ),
    )
}

fn free_boundary() -> Outcome {
    let a = run_c1();
    let chk = cross_check_transform(a).unwrap();
    let p = jump_params();
    let l = (p.b0().abs().max(p.b.abs() * 1.0) + 1.0) / p.a0.min(p.a1 * 1.0);
    let ok = chk.beta_gap <= 1e-3 && chk.bounds_ok && chk.path.lipschitz_max <= 2.0 * l;
    (
        ok,
        format!("beta_gap={:.2e}, bounds_ok={}, Lipschitz {:.4} vs 2L={:.4}", chk.beta_gap, chk.bounds_ok, chk.path.lipschitz_max, 2.0 * l),
    )
}

fn volterra() -> Outcome {
    let p = jump_params();
    let grid = build_grid(&p, 1024, 1e-9).unwrap();
    let sg: f64 = 1.2;
    let u0 = project_function(
        |v| {
            let x = (1.0 - v).max(0.0);
            x / (sg * sg) * (-(x * x) / (2.0 * sg * sg)).exp()
        },
        &grid,
        true,
    )
    .unwrap();
    let sol = volterra_m(&u0, 0.0, &p, 1.0, &VolterraConfig::default()).unwrap();
    // independent transform of the τ-run: β = exp ∫Ñ, s = ∫β²ã, M = g/β²
    let dil = DilationParams::new(&p, 1.0).unwrap();
    let traj = run_tau(&u0, &p, &dil, &StepperConfig::new(1e-4, 0.5)).unwrap();
    let (mut lb, mut s, mut prev) = (0.0, 0.0, 0.0);
    let mut ss = Vec::new();
    let mut ms = Vec::new();
    for k in 0..traj.len() {
        if k > 0 {
            lb += 0.5 * (traj.tau[k] - traj.tau[k - 1]) * (traj.tilde_n[k] + traj.tilde_n[k - 1]);
        }
        let beta2 = (2.0 * lb).exp();
        let tn = traj.tilde_n[k];
        let w = beta2 * (tn * p.a0 + (1.0 - tn) * p.a1);
        if k > 0 {
            s += 0.5 * (traj.tau[k] - traj.tau[k - 1]) * (w + prev);
        }
        prev = w;
        ss.push(s);
        ms.push(traj.slope[k] / beta2);
    }
    if *ss.last().unwrap() < sol.sigma {
        return (false, "τ-run too short for the accepted horizon".into());
    }
    let err = sol.s.iter().zip(&sol.m).map(|(x, m)| (interp(&ss, &ms, *x) - m).abs()).fold(0.0, f64::max);
    let contraction = sol.max_contraction();
    let ok = err <= 1e-2 && contraction <= 0.5;
    (ok, format!("σ={}, max |ΔM| = {err:.2e}, contraction {contraction:.3}, {} iterations", sol.sigma, sol.iterations))
}

fn timescale_algebra() -> Outcome {
    let mut ok = true;
    // Ñ = 1 on [0,1], 0 on (1,2], 1/2 on (2,4]
    let taus = [0.0, 0.5, 1.0, 1.0, 2.0, 2.0, 3.0, 4.0];
    let tn = [1.0, 1.0, 1.0, 0.0, 0.0, 0.5, 0.5, 0.5];
    let map = TimeMap::from_series(&taus, &tn).unwrap();
    let t_exact = |tau: f64| {
        if tau <= 1.0 {
            tau
        } else if tau <= 2.0 {
            1.0
        } else {
            1.0 + 0.5 * (tau - 2.0)
        }
    };
    for &tau in &[0.0, 0.3, 1.0, 1.5, 2.0, 2.5, 3.7, 4.0] {
        ok &= (map.t_at(tau) - t_exact(tau)).abs() <= 1e-12;
    }
    ok &= (map.total() - 2.0).abs() <= 1e-12;
    // supremum convention: the plateau t = 1 maps to its right end
    ok &= (inverse_time(&map, 1.0).unwrap() - 2.0).abs() <= 1e-12;
    ok &= (inverse_time(&map, 1.25).unwrap() - 2.5).abs() <= 1e-12;
    ok &= (inverse_time(&map, 0.4).unwrap() - 0.4).abs() <= 1e-12;
    ok &= inverse_time(&map, 2.0).is_err() && inverse_time(&map, -1e-9).is_err();
    // round trip on strictly increasing pieces
    for &tau in &[0.1, 0.7, 2.2, 3.9] {
        let t = map.t_at(tau);
        ok &= (inverse_time(&map, t).unwrap() - tau).abs() <= 1e-12;
    }
    // right-continuity at the plateau: approaching from above stays near τ₂
    let above = inverse_time(&map, 1.0 + 1e-9).unwrap();
    let below = inverse_time(&map, 1.0 - 1e-9).unwrap();
    ok &= (above - 2.0).abs() <= 1e-8 && (below - 1.0).abs() <= 1e-8;
    (ok, format!("left limit {below:.9}, value 2, right limit {above:.9}"))
}

fn c_independence() -> Outcome {
    let a = run_c1();
    let b = run_half();
    let (ma, mb) = (forward_time(a).unwrap(), forward_time(b).unwrap());
    let (ta, tb) = (ma.total(), mb.total());
    let rel = (ta - tb).abs() / ta;
    let ea = detect_blowups(a, 1e-8).unwrap();
    let eb = detect_blowups(b, 1e-8).unwrap();
    let (Some(e1), Some(e2)) = (ea.first(), eb.first()) else {
        return (false, "missing blow-up event".into());
    };
    let rel_star = (e1.t_star - e2.t_star).abs() / e1.t_star;
    let mut ok = rel <= 1e-3 && rel_star <= 1e-3;
    let mut gaps = Vec::new();
    for t in [0.1, e1.t_star + 0.05] {
        let pa = sample_generalized(a, &ma, t).unwrap();
        let pb = sample_generalized(b, &mb, t).unwrap();
        let gap = pa.profile.l1_distance(&pb.profile);
        ok &= gap <= 5e-3;
        gaps.push(format!("{gap:.2e}"));
    }
    (ok, format!("T(H): {ta:.6} vs {tb:.6} (rel {rel:.1e}), t* rel {rel_star:.1e}, L¹ gaps {}", gaps.join(",")))
}

fn super_solutions() -> Outcome {
    let exc = jump_run(0.5, 1024, 1e-4, 5.0);
    let r1 = check_super_solution(&exc).unwrap();
    let p = ModelParams::with_b0(0.0, 1.0, 0.0, -0.5, 0.5, 1.0).unwrap();
    let grid = build_grid(&p, 1024, 1e-9).unwrap();
    let p0 = project_function(gaussian(0.2, 0.01), &grid, true).unwrap();
    let dil = DilationParams::natural(&p);
    let inh = run_tau(&p0, &p, &dil, &StepperConfig::new(1e-4, 5.0)).unwrap();
    let r2 = check_super_solution(&inh).unwrap();
    let ok = r1.max_violation <= 1e-8 && r2.max_violation <= 1e-8;
    (
        ok,
        format!(
            "excitatory: violation {:.1e} over {} snapshots; inhibitory: violation {:.1e} over {}",
            r1.max_violation, r1.checked, r2.max_violation, r2.checked
        ),
    )
}

fn poincare() -> Outcome {
    let a = poincare_constant_fn(|_| 1.0, 0.0, 1.0, 512).unwrap();
    let pi2 = std::f64::consts::PI.powi(2);
    let rel = (a - pi2).abs() / pi2;
    let w1 = poincare_constant_fn(min_exp_weight, 0.0, 20.0, 512).unwrap();
    let w2 = poincare_constant_fn(min_exp_weight, 0.0, 20.0, 1024).unwrap();
    let drift = (w1 - w2).abs() / w2;
    (rel <= 5e-3 && drift <= 0.05, format!("α={a:.5} (rel {rel:.1e}); weighted {w1:.5} vs {w2:.5}"))
}

fn main() {
    let checks: Vec<(&str, fn() -> Outcome)> = vec![
        ("steady-state flux", steady_flux),
        ("conservation and positivity", conservation),
        ("eternal blow-up", eternal),
        ("jump characterization", jump_characterization),
        ("entropy suite", entropy_suite),
        ("free-boundary cross-check", free_boundary),
        ("Volterra equivalence", volterra),
        ("timescale algebra", timescale_algebra),
        ("c-independence", c_independence),
        ("super-solution bounds", super_solutions),
        ("Poincaré sanity", poincare),
    ];
    let results: Vec<(Outcome, f64)> = std::thread::scope(|scope| {
        let handles: Vec<_> = checks
            .iter()
            .map(|(_, f)| {
                let f = *f;
                scope.spawn(move || {
                    let start = Instant::now();
                    let out = f();
                    (out, start.elapsed().as_secs_f64())
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| ((false, "panicked".into()), 0.0)))
            .collect()
    });
    let mut failed = 0;
    for (k, ((name, _), ((ok, detail), secs))) in checks.iter().zip(results).enumerate() {
        if !ok {
            failed += 1;
        }
        println!("[{:>2}] {:<28} {}  ({secs:.1} s)  {detail}", k + 1, name, if ok { "PASS" } else { "FAIL" });
    }
    println!("acceptance: {} passed, {failed} failed", checks.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
