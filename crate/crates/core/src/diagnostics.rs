//! Relative entropy, dissipation, decay fits, super-solution bounds and
//! weighted Poincaré constants.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{trapezoid, DensityProfile};
use crate::model::{classify_regime, drift_hypothesis_check, DilationParams, ModelParams, RegimeLabel};
use crate::solver::TauTrajectory;
use crate::steady::{reference_ratio, steady_derivative, steady_excitatory, SteadyState};
use crate::timescale::forward_time;

/// Convex function `G` of the relative entropy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum EntropyChoice {
    /// `(x - 1)²`
    QuadraticCentered,
    /// `x²`
    Quadratic,
}

impl EntropyChoice {
    pub fn g(&self, x: f64) -> f64 {
        match self {
            EntropyChoice::QuadraticCentered => (x - 1.0) * (x - 1.0),
            EntropyChoice::Quadratic => x * x,
        }
    }

    pub fn dg(&self, x: f64) -> f64 {
        match self {
            EntropyChoice::QuadraticCentered => 2.0 * (x - 1.0),
            EntropyChoice::Quadratic => 2.0 * x,
        }
    }

    pub fn d2g(&self, _x: f64) -> f64 {
        2.0
    }

    /// Natural choice for the sign of `b`.
    pub fn for_params(params: &ModelParams) -> Self {
        if params.b > 0.0 {
            EntropyChoice::QuadraticCentered
        } else {
            EntropyChoice::Quadratic
        }
    }
}

pub fn relative_entropy(p: &DensityProfile, s: &SteadyState, g: EntropyChoice) -> Result<f64> {
    let h = reference_ratio(p, s)?;
    let f: Vec<f64> = s.profile.values.iter().zip(&h).map(|(r, x)| r * g.g(*x)).collect();
    Ok(trapezoid(&f, p.grid.h))
}

/// The two pieces of the dissipation: gradient part and boundary part.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Dissipation {
    pub gradient: f64,
    pub boundary: f64,
    pub nu: f64,
    pub h_reset: f64,
}

impl Dissipation {
    pub fn total(&self) -> f64 {
        self.gradient + self.boundary
    }
}

pub fn dissipation_parts(p: &DensityProfile, s: &SteadyState, g: EntropyChoice, params: &ModelParams) -> Result<Dissipation> {
    let h = reference_ratio(p, s)?;
    let grid = p.grid;
    let dv = grid.h;
    let r = &s.profile.values;
    // cell-wise differences are centred at the cell midpoints
    let mut gradient = 0.0;
    for i in 0..grid.n {
        let dh = (h[i + 1] - h[i]) / dv;
        let hm = 0.5 * (h[i] + h[i + 1]);
        let rm = 0.5 * (r[i] + r[i + 1]);
        gradient += g.d2g(hm) * dh * dh * rm * dv;
    }
    gradient *= params.a1;
    let nu = h[grid.n];
    let hr = h[grid.i_reset];
    let boundary = s.m_inf * (g.g(nu) - g.g(hr) - g.dg(hr) * (nu - hr));
    Ok(Dissipation { gradient, boundary, nu, h_reset: hr })
}

pub fn entropy_dissipation(p: &DensityProfile, s: &SteadyState, g: EntropyChoice, params: &ModelParams) -> Result<f64> {
    Ok(dissipation_parts(p, s, g, params)?.total())
}

/// Perturbation term of the nonlinear entropy balance (requires `c = a0/a1`).
pub fn perturbation_term(
    p: &DensityProfile,
    s: &SteadyState,
    tn: f64,
    dil: &DilationParams,
    g: EntropyChoice,
) -> Result<f64> {
    if !dil.uses_natural_c(&s.params) {
        return Err(Error::Precondition("perturbation term assumes c = a0/a1".into()));
    }
    if tn == 0.0 {
        return Ok(0.0);
    }
    let h = reference_ratio(p, s)?;
    let grid = p.grid;
    let prm = &s.params;
    let f: Vec<f64> = (0..=grid.n)
        .map(|i| {
            let v = grid.node(i);
            let dp = if i == grid.i_reset {
                0.5 * (steady_derivative(prm, v - 1e-12 * v.abs().max(1.0)) + steady_derivative(prm, v))
            } else {
                steady_derivative(prm, v)
            };
            let x = h[i];
            (g.dg(x) * x - g.g(x)) * ((-v + dil.b_star) * dp - s.profile.values[i])
        })
        .collect();
    Ok(-tn * trapezoid(&f, grid.h))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EntropyReport {
    pub tau: Vec<f64>,
    pub s: Vec<f64>,
    pub d: Vec<f64>,
    pub e: Vec<f64>,
    pub nu: Vec<f64>,
    pub h_reset: Vec<f64>,
}

impl EntropyReport {
    pub fn new() -> Self {
        EntropyReport { tau: vec![], s: vec![], d: vec![], e: vec![], nu: vec![], h_reset: vec![] }
    }

    /// Appends the diagnostics of one profile. `E` is evaluated only when
    /// `dil` uses `c = a0/a1`; otherwise it is recorded as zero.
    pub fn push(&mut self, tau: f64, p: &DensityProfile, tn: f64, s: &SteadyState, dil: &DilationParams, g: EntropyChoice) -> Result<()> {
        let parts = dissipation_parts(p, s, g, &s.params)?;
        let e = if dil.uses_natural_c(&s.params) { perturbation_term(p, s, tn, dil, g)? } else { 0.0 };
        self.tau.push(tau);
        self.s.push(relative_entropy(p, s, g)?);
        self.d.push(parts.total());
        self.e.push(e);
        self.nu.push(parts.nu);
        self.h_reset.push(parts.h_reset);
        Ok(())
    }

    /// CSV with header `tau,S,D,E,nu,hVR`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("tau,S,D,E,nu,hVR\n");
        for k in 0..self.tau.len() {
            let row = [self.tau[k], self.s[k], self.d[k], self.e[k], self.nu[k], self.h_reset[k]];
            let cells: Vec<String> = row.iter().map(|x| crate::fmt_f64(*x)).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

impl Default for EntropyReport {
    fn default() -> Self {
        Self::new()
    }
}

/// Entropy diagnostics on every stored snapshot.
pub fn entropy_report(traj: &TauTrajectory, s: &SteadyState, g: EntropyChoice) -> Result<EntropyReport> {
    let mut rep = EntropyReport::new();
    for snap in &traj.snapshots {
        let tn = traj.tilde_n[snap.index];
        rep.push(snap.tau, &snap.profile, tn, s, &traj.dil, g)?;
    }
    Ok(rep)
}

/// Least-squares slope of `-ln S` against `τ` over the second half of the samples.
pub fn fit_decay_rate(taus: &[f64], s: &[f64]) -> Result<f64> {
    if taus.len() != s.len() || taus.len() < 4 {
        return Err(Error::Precondition("decay fit needs at least four paired samples".into()));
    }
    let start = taus.len() / 2;
    let (xs, ys) = (&taus[start..], &s[start..]);
    if ys.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::Numerical("nonpositive entropy in the fit window".into()));
    }
    let ly: Vec<f64> = ys.iter().map(|v| -v.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    Ok(sxy / sxx)
}

/// `∫(M − M∞)²` over the series and its increment over the last tenth.
pub fn flux_variance_integral(taus: &[f64], m: &[f64], m_inf: f64) -> (f64, f64) {
    let mut acc = vec![0.0; taus.len()];
    for k in 1..taus.len() {
        let a = (m[k - 1] - m_inf).powi(2);
        let b = (m[k] - m_inf).powi(2);
        acc[k] = acc[k - 1] + 0.5 * (taus[k] - taus[k - 1]) * (a + b);
    }
    let total = *acc.last().unwrap_or(&0.0);
    if taus.len() < 2 {
        return (total, 0.0);
    }
    let t0 = taus[0] + 0.9 * (taus[taus.len() - 1] - taus[0]);
    let tail = total - crate::solver::interp(taus, &acc, t0);
    (total, tail)
}

/// Mean of `h = p/p∞` over `[V_R − K, V_R]` and the bound `C/K`, where
/// `C = 1/inf_{v ≤ V_R} p∞` (unit-mass `p`).
pub fn delta_k_mean(p: &DensityProfile, s: &SteadyState, k: f64) -> Result<(f64, f64)> {
    let prm = &s.params;
    if prm.b > 0.0 {
        return Err(Error::Regime("window mean uses the b <= 0 reference".into()));
    }
    let grid = p.grid;
    let cells = (k / grid.h).round() as usize;
    if !(k > 0.0) || cells == 0 || cells > grid.i_reset {
        return Err(Error::Configuration(format!("window of length {k} leaves the grid")));
    }
    let h = reference_ratio(p, s)?;
    let lo = grid.i_reset - cells;
    let window = &h[lo..=grid.i_reset];
    let mean = trapezoid(window, grid.h) / (cells as f64 * grid.h);
    let inf = if prm.b < 0.0 { -(prm.b / prm.a1 * prm.gap()).exp_m1() } else { prm.gap() };
    Ok((mean, 1.0 / (inf * k)))
}

/// Largest `ε` with `D ≥ ε M∞ (ν − 1)²` over the report (snapshots with `ν ≈ 1` are skipped).
pub fn estimate_control_epsilon(rep: &EntropyReport, m_inf: f64) -> Option<f64> {
    rep.d
        .iter()
        .zip(&rep.nu)
        .filter(|(_, nu)| (**nu - 1.0).abs() > 1e-6)
        .map(|(d, nu)| d / (m_inf * (nu - 1.0).powi(2)))
        .fold(None, |acc: Option<f64>, x| Some(acc.map_or(x, |a| a.min(x))))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SuperSolutionReport {
    pub holds: bool,
    pub max_violation: f64,
    pub gamma_sup: f64,
    pub c_i: f64,
    pub checked: usize,
}

/// Exponent of the excitatory super-solution.
pub fn gamma_sup_excitatory(params: &ModelParams) -> f64 {
    let k = params.b / params.a1;
    let bs = params.b0() - params.a0 / params.a1 * params.b;
    let l = params.gap();
    let mut best = k * (bs - params.v_r).abs();
    if bs > params.v_r {
        let top = bs.min(params.v_f);
        let samples = 20_000;
        for j in 1..samples {
            let v = params.v_r + (top - params.v_r) * j as f64 / samples as f64;
            let e = (k * (v - params.v_r)).exp();
            let val = (bs - v) * k * e / ((k * l).exp() - e);
            best = best.max(val);
        }
    }
    1.0 + best
}

/// Exponent of the inhibitory super-solution.
pub fn gamma_sup_inhibitory(params: &ModelParams) -> f64 {
    let b0 = params.b0();
    if b0 > params.v_r {
        1.0 + (b0 - params.v_r) / (params.v_f - params.v_r)
    } else {
        1.0
    }
}

/// Piecewise-linear inhibitory reference: 1 below the reset, linear to zero at the threshold.
pub fn inhibitory_reference(params: &ModelParams, v: f64) -> f64 {
    if v <= params.v_r {
        1.0
    } else {
        ((params.v_f - v) / params.gap()).max(0.0)
    }
}

/// Checks `p ≤ C_I exp(γ ∫Ñ) q` on every snapshot of a run with `c = a0/a1`.
pub fn check_super_solution(traj: &TauTrajectory) -> Result<SuperSolutionReport> {
    let params = &traj.params;
    if !traj.dil.uses_natural_c(params) {
        return Err(Error::Precondition("super-solution bound assumes c = a0/a1".into()));
    }
    let hyp = drift_hypothesis_check(params);
    let grid = traj.grid;
    let (reference, gamma): (Vec<f64>, f64) = match classify_regime(params) {
        RegimeLabel::MildlyExcitatory if hyp.excitatory_drift => {
            let s = steady_excitatory(params, &grid)?;
            (s.profile.values, gamma_sup_excitatory(params))
        }
        RegimeLabel::Inhibitory if hyp.inhibitory_drift => {
            let q = (0..=grid.n).map(|i| inhibitory_reference(params, grid.node(i))).collect();
            (q, gamma_sup_inhibitory(params))
        }
        r => {
            return Err(Error::Regime(format!("no super-solution for regime {r} with these drift constants")));
        }
    };
    let p0 = &traj.snapshots.first().ok_or_else(|| Error::Resolution("no snapshots".into()))?.profile;
    let mut c_i: f64 = 0.0;
    for i in 0..=grid.n {
        if reference[i] > 0.0 {
            c_i = c_i.max(p0.values[i] / reference[i]);
        } else if p0.values[i] > 0.0 {
            return Err(Error::Domain(format!("reference vanishes at v = {} where p0 > 0", grid.node(i))));
        }
    }
    let map = forward_time(traj)?;
    let mut worst = f64::NEG_INFINITY;
    for snap in &traj.snapshots {
        let factor = c_i * (gamma * map.ts[snap.index]).exp();
        for i in 0..=grid.n {
            worst = worst.max(snap.profile.values[i] - factor * reference[i]);
        }
    }
    let max_violation = worst.max(0.0);
    Ok(SuperSolutionReport {
        holds: max_violation <= 1e-8,
        max_violation,
        gamma_sup: gamma,
        c_i,
        checked: traj.snapshots.len(),
    })
}

/// Sturm count: number of eigenvalues of the symmetric tridiagonal matrix below `x`.
fn sturm_count(diag: &[f64], off: &[f64], x: f64) -> usize {
    let mut count = 0;
    let mut d = 1.0;
    for i in 0..diag.len() {
        let b2 = if i == 0 { 0.0 } else { off[i - 1] * off[i - 1] };
        d = diag[i] - x - if i == 0 { 0.0 } else { b2 / d };
        if d == 0.0 {
            d = -f64::EPSILON * (diag[i].abs() + x.abs()).max(f64::MIN_POSITIVE);
        }
        if d < 0.0 {
            count += 1;
        }
    }
    count
}

/// `k`-th smallest eigenvalue (0-based) by bisection on the Sturm count.
fn tridiag_eigenvalue(diag: &[f64], off: &[f64], k: usize) -> Result<f64> {
    let n = diag.len();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..n {
        let r = if i > 0 { off[i - 1].abs() } else { 0.0 } + if i + 1 < n { off[i].abs() } else { 0.0 };
        lo = lo.min(diag[i] - r);
        hi = hi.max(diag[i] + r);
    }
    if !lo.is_finite() || !hi.is_finite() {
        return Err(Error::Numerical("non-finite matrix entries in eigensolve".into()));
    }
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        if sturm_count(diag, off, mid) > k {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi - lo <= 1e-15 * hi.abs().max(lo.abs()).max(1e-300) {
            return Ok(0.5 * (lo + hi));
        }
    }
    Err(Error::Numerical("eigenvalue bisection did not converge".into()))
}

/// Smallest weighted Rayleigh quotient `∫w f'² / ∫w f²` over functions with
/// zero weighted mean, for a weight sampled on the nodes of a uniform grid.
///
/// Cell-centred unknowns with natural boundary conditions; the weighted
/// constant spans the kernel, so the constrained minimum is the second
/// eigenvalue of the symmetrized pencil.
pub fn poincare_constant(node_weights: &[f64], h: f64) -> Result<f64> {
    let cells = node_weights.len().saturating_sub(1);
    if cells < 2 || !(h > 0.0) {
        return Err(Error::Precondition("weight needs at least three nodes and positive spacing".into()));
    }
    let mass: Vec<f64> = (0..cells).map(|j| 0.5 * h * (node_weights[j] + node_weights[j + 1])).collect();
    if mass.iter().any(|&m| !(m > 0.0) || !m.is_finite()) {
        return Err(Error::Domain("weight must be positive on every cell".into()));
    }
    for w in &node_weights[1..cells] {
        if !(*w > 0.0) {
            return Err(Error::Domain("weight must be positive at interior nodes".into()));
        }
    }
    let mut diag = vec![0.0; cells];
    let mut off = vec![0.0; cells - 1];
    for j in 0..cells {
        let left = if j > 0 { node_weights[j] / h } else { 0.0 };
        let right = if j + 1 < cells { node_weights[j + 1] / h } else { 0.0 };
        diag[j] = (left + right) / mass[j];
    }
    for j in 0..cells - 1 {
        off[j] = -node_weights[j + 1] / h / (mass[j] * mass[j + 1]).sqrt();
    }
    let alpha = tridiag_eigenvalue(&diag, &off, 1)?;
    if !(alpha > 0.0) {
        return Err(Error::Numerical(format!("non-positive Poincaré estimate {alpha}")));
    }
    Ok(alpha)
}

/// Poincaré constant for a weight function sampled on `n` cells of `[a, b]`.
pub fn poincare_constant_fn<F: Fn(f64) -> f64>(w: F, a: f64, b: f64, n: usize) -> Result<f64> {
    let h = (b - a) / n as f64;
    let nodes: Vec<f64> = (0..=n).map(|i| w(a + i as f64 * h)).collect();
    poincare_constant(&nodes, h)
}

pub fn poincare_constant_profile(weight: &DensityProfile) -> Result<f64> {
    poincare_constant(&weight.values, weight.grid.h)
}

/// The weight `min(x, e^{-x})` up to its normalization.
pub fn min_exp_weight(x: f64) -> f64 {
    x.min((-x).exp())
}
